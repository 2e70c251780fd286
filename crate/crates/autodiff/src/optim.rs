//! Named parameters and SGD.
//!
//! A [`Parameter`] is a named tensor with a trainable flag. The flag is the
//! freezing mechanism used throughout the laboratory: frozen parameters are
//! bound to tapes as constants and [`Sgd::step`] refuses to touch them, so
//! their bytes stay identical across any number of optimizer steps.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::Grads;
use crate::tensor::Tensor;

/// Named value with a trainable flag.
#[derive(Debug, Clone)]
pub struct Parameter<S: Scalar = f64> {
    pub id: String,
    pub value: Tensor<S>,
    pub trainable: bool,
}

impl<S: Scalar> Parameter<S> {
    pub fn new(id: impl Into<String>, value: Tensor<S>, trainable: bool) -> Self {
        Parameter {
            id: id.into(),
            value,
            trainable,
        }
    }
}

/// SGD with a momentum knob.
///
/// The update is `v ← momentum·v + g; value ← value − lr·v`, which reduces to
/// the plain rule `value ← value − lr·g` at `momentum = 0` and on the first
/// step at any momentum. The default momentum of 0.9 is common practice for
/// prompt tuning, not a value taken from any reference table.
#[derive(Debug, Clone)]
pub struct Sgd<S: Scalar = f64> {
    lr: S,
    momentum: S,
    velocity: BTreeMap<String, Vec<S>>,
}

/// Default momentum; see [`Sgd`].
pub const DEFAULT_MOMENTUM: f64 = 0.9;

impl<S: Scalar> Sgd<S> {
    /// Plain SGD with the default momentum of 0.9; `lr` must be positive.
    pub fn new(lr: S) -> Result<Self> {
        Self::with_momentum(lr, S::from_f64_checked(DEFAULT_MOMENTUM))
    }

    pub fn with_momentum(lr: S, momentum: S) -> Result<Self> {
        if lr <= S::zero() || !lr.is_finite() {
            return Err(Error::Contract(format!(
                "learning rate must be positive and finite, got {lr}"
            )));
        }
        if momentum < S::zero() || momentum >= S::one() {
            return Err(Error::Contract(format!(
                "momentum must lie in [0, 1), got {momentum}"
            )));
        }
        Ok(Sgd {
            lr,
            momentum,
            velocity: BTreeMap::new(),
        })
    }

    pub fn lr(&self) -> S {
        self.lr
    }

    /// Applies one update to every *trainable* parameter with a gradient.
    ///
    /// Frozen parameters are never modified. A gradient whose id matches no
    /// parameter in `params` is a contract error: it means the tape and the
    /// optimizer disagree about what is being trained.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut Parameter<S>>,
        grads: &Grads<S>,
    ) -> Result<()> {
        let mut seen: Vec<String> = Vec::new();
        for p in params {
            seen.push(p.id.clone());
            let Some(g) = grads.get(&p.id) else {
                continue;
            };
            if !p.trainable {
                return Err(Error::Contract(format!(
                    "gradient supplied for frozen parameter `{}`",
                    p.id
                )));
            }
            if g.shape() != p.value.shape() {
                return Err(Error::ShapeMismatch {
                    op: "sgd_step",
                    lhs: p.value.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            let v = self
                .velocity
                .entry(p.id.clone())
                .or_insert_with(|| vec![S::zero(); g.len()]);
            let data = p.value.data_mut();
            for j in 0..data.len() {
                v[j] = self.momentum * v[j] + g.data()[j];
                data[j] -= self.lr * v[j];
            }
        }
        for id in grads.ids() {
            if !seen.iter().any(|s| s == id) {
                return Err(Error::Contract(format!(
                    "gradient id `{id}` matches no optimizer parameter"
                )));
            }
        }
        Ok(())
    }
}

/// Adam with bias correction.
///
/// `m ← β₁·m + (1−β₁)·g; v ← β₂·v + (1−β₂)·g²;
/// value ← value − lr·m̂/(√v̂ + ε)` with the usual `m̂ = m/(1−β₁ᵗ)`,
/// `v̂ = v/(1−β₂ᵗ)`. The per-parameter normalization makes update sizes
/// roughly uniform across parameters regardless of raw gradient scale —
/// which is what keeps weak early pathways (input embeddings) trainable
/// where plain SGD starves them.
///
/// Shares [`Sgd::step`]'s contract: frozen parameters are never modified and
/// a gradient with no matching parameter is a contract error.
#[derive(Debug, Clone)]
pub struct Adam<S: Scalar = f64> {
    lr: S,
    beta1: S,
    beta2: S,
    eps: S,
    /// Completed steps, shared across parameters (one increment per call).
    t: u32,
    moments: BTreeMap<String, (Vec<S>, Vec<S>)>,
}

impl<S: Scalar> Adam<S> {
    /// Adam with the conventional β₁ = 0.9, β₂ = 0.999, ε = 1e-8.
    pub fn new(lr: S) -> Result<Self> {
        Self::with_betas(
            lr,
            S::from_f64_checked(0.9),
            S::from_f64_checked(0.999),
        )
    }

    pub fn with_betas(lr: S, beta1: S, beta2: S) -> Result<Self> {
        if lr <= S::zero() || !lr.is_finite() {
            return Err(Error::Contract(format!(
                "learning rate must be positive and finite, got {lr}"
            )));
        }
        for (name, b) in [("beta1", beta1), ("beta2", beta2)] {
            if b < S::zero() || b >= S::one() {
                return Err(Error::Contract(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        Ok(Adam {
            lr,
            beta1,
            beta2,
            eps: S::from_f64_checked(1e-8),
            t: 0,
            moments: BTreeMap::new(),
        })
    }

    pub fn lr(&self) -> S {
        self.lr
    }

    /// Applies one update to every *trainable* parameter with a gradient;
    /// see [`Sgd::step`] for the shared contract.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut Parameter<S>>,
        grads: &Grads<S>,
    ) -> Result<()> {
        self.t += 1;
        let c1 = S::one() - self.beta1.powi(self.t as i32);
        let c2 = S::one() - self.beta2.powi(self.t as i32);
        let mut seen: Vec<String> = Vec::new();
        for p in params {
            seen.push(p.id.clone());
            let Some(g) = grads.get(&p.id) else {
                continue;
            };
            if !p.trainable {
                return Err(Error::Contract(format!(
                    "gradient supplied for frozen parameter `{}`",
                    p.id
                )));
            }
            if g.shape() != p.value.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    lhs: p.value.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            let (m, v) = self
                .moments
                .entry(p.id.clone())
                .or_insert_with(|| (vec![S::zero(); g.len()], vec![S::zero(); g.len()]));
            let data = p.value.data_mut();
            for j in 0..data.len() {
                let gj = g.data()[j];
                m[j] = self.beta1 * m[j] + (S::one() - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (S::one() - self.beta2) * gj * gj;
                data[j] -= self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
        }
        for id in grads.ids() {
            if !seen.iter().any(|s| s == id) {
                return Err(Error::Contract(format!(
                    "gradient id `{id}` matches no optimizer parameter"
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;

    #[test]
    fn first_step_matches_plain_rule() {
        // value 1.0, grad 2.0, lr 0.1 -> 0.8 (identical with or without
        // momentum on the very first step).
        let mut tape: Tape = Tape::new();
        let node = tape.param("p", Tensor::scalar(1.0)).unwrap();
        let doubled = tape.scale(node, 2.0);
        let loss = tape.sum(doubled);
        let grads = tape.backward(loss).unwrap();
        let mut p = Parameter::new("p", Tensor::scalar(1.0), true);
        let mut opt: Sgd = Sgd::new(0.1).unwrap();
        opt.step([&mut p], &grads).unwrap();
        assert!((p.value.data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_momentum_is_plain_sgd_on_every_step() {
        let mut p = Parameter::new("p", Tensor::scalar(1.0), true);
        let mut opt: Sgd = Sgd::with_momentum(0.1, 0.0).unwrap();
        for _ in 0..2 {
            let mut tape: Tape = Tape::new();
            let node = tape.param("p", p.value.clone()).unwrap();
            let doubled = tape.scale(node, 2.0);
            let loss = tape.sum(doubled);
            let grads = tape.backward(loss).unwrap();
            opt.step([&mut p], &grads).unwrap();
        }
        // two plain steps: 1.0 - 0.2 - 0.2
        assert!((p.value.data()[0] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn frozen_parameter_with_gradient_is_a_contract_error() {
        let mut tape: Tape = Tape::new();
        let node = tape.param("frozen", Tensor::scalar(1.0)).unwrap();
        let loss = tape.sum(node);
        let grads = tape.backward(loss).unwrap();
        let mut p = Parameter::new("frozen", Tensor::scalar(1.0), false);
        let mut opt: Sgd = Sgd::new(0.1).unwrap();
        assert!(opt.step([&mut p], &grads).is_err());
    }

    #[test]
    fn unmatched_gradient_id_is_a_contract_error() {
        let mut tape: Tape = Tape::new();
        let node = tape.param("ghost", Tensor::scalar(1.0)).unwrap();
        let loss = tape.sum(node);
        let grads = tape.backward(loss).unwrap();
        let mut p = Parameter::new("real", Tensor::scalar(1.0), true);
        let mut opt: Sgd = Sgd::new(0.1).unwrap();
        let err = opt.step([&mut p], &grads).unwrap_err();
        assert!(err.to_string().contains("ghost"));
    }

    #[test]
    fn invalid_learning_rate_is_rejected() {
        assert!(Sgd::<f64>::new(0.0).is_err());
        assert!(Sgd::<f64>::new(-0.1).is_err());
        assert!(Adam::<f64>::new(0.0).is_err());
        assert!(Adam::<f64>::with_betas(0.1, 1.0, 0.999).is_err());
    }

    fn grads_for(value: f64, factor: f64, id: &str) -> Grads {
        let mut tape: Tape = Tape::new();
        let node = tape.param(id, Tensor::scalar(value)).unwrap();
        let scaled = tape.scale(node, factor);
        let loss = tape.sum(scaled);
        tape.backward(loss).unwrap()
    }

    #[test]
    fn adam_first_step_is_a_signed_learning_rate_step() {
        // With bias correction, the very first update is lr·g/(|g| + ε') —
        // essentially lr·sign(g) for any nonzero gradient.
        let mut p = Parameter::new("p", Tensor::scalar(1.0), true);
        let mut opt: Adam = Adam::new(0.1).unwrap();
        opt.step([&mut p], &grads_for(1.0, 2.0, "p")).unwrap();
        assert!((p.value.data()[0] - 0.9).abs() < 1e-9);
    }

    #[test]
    fn adam_equalizes_updates_across_gradient_scales() {
        // A pathway with a 10⁶× smaller gradient still moves at (almost) the
        // same speed — the property SGD lacks.
        let mut big = Parameter::new("big", Tensor::scalar(0.0), true);
        let mut small = Parameter::new("small", Tensor::scalar(0.0), true);
        let mut opt: Adam = Adam::new(0.01).unwrap();
        let g_big = grads_for(0.0, 1.0, "big");
        let g_small = grads_for(0.0, 1e-6, "small");
        opt.step([&mut big], &g_big).unwrap();
        // Fresh optimizer for the small pathway so both see step t = 1.
        let mut opt2: Adam = Adam::new(0.01).unwrap();
        opt2.step([&mut small], &g_small).unwrap();
        let (b, s) = (big.value.data()[0].abs(), small.value.data()[0].abs());
        assert!((b - 0.01).abs() < 1e-6, "big-gradient step: {b}");
        assert!(s > 0.009, "small-gradient step should be nearly lr: {s}");
    }

    #[test]
    fn adam_respects_the_freezing_contract() {
        let grads = grads_for(1.0, 1.0, "frozen");
        let mut p = Parameter::new("frozen", Tensor::scalar(1.0), false);
        let mut opt: Adam = Adam::new(0.1).unwrap();
        assert!(opt.step([&mut p], &grads).is_err());

        let ghost = grads_for(1.0, 1.0, "ghost");
        let mut real = Parameter::new("real", Tensor::scalar(1.0), true);
        let err = opt.step([&mut real], &ghost).unwrap_err();
        assert!(err.to_string().contains("ghost"));
    }
}
