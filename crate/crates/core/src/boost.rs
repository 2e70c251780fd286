//! Phase I: distilling boosting prompts from a frozen teacher over
//! unlabeled images.
//!
//! The student's backbone never moves — the only trainable tensors are the
//! boosting prompt blocks on both branches. The frozen teacher classifies
//! each unlabeled image zero-shot through the domain's caption template;
//! the student (bare class tokens plus its boosting prompts) is pulled
//! toward the teacher's temperature-softened distribution with a KL loss.
//!
//! Labels never enter this phase. [`UnlabeledSet`] exposes images and the
//! domain's class-name list (metadata needed to build the classifier head),
//! but has no per-image label accessor at all.

use caspl_autodiff::{Parameter, Sgd, Tape, Tensor};
use rand::seq::SliceRandom;

use crate::domain::Dataset;
use crate::error::{Error, Result};
use crate::eval::{class_token_rows, cosine_logits, image_features, template_rows, text_features};
use crate::model::{
    argmax_rows, encode_image, encode_text, scaled_logits, MiniClip, ModelBinder, PromptBinder,
};
use crate::prompts::{cascade, Branch, CascadeLayout, PromptRole, PromptSet};
use crate::rng::seeded;
use crate::tokenizer::Vocab;

/// Distillation settings. Defaults follow the desk-scale recipe: softening
/// temperature 1, 20 epochs of SGD at 0.0025 with momentum 0.9 over batches
/// of 32, and length-8 boosting prompts injected at every layer of the
/// default 6-layer student.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct KdConfig {
    /// Softening temperature applied to both logit sets before the KL.
    pub temperature: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Caption template the teacher classifies through.
    pub template_id: String,
    /// Boosting prompt tokens per layer (per branch).
    pub prompt_length: usize,
    /// Layers carrying fresh boosting blocks (0..depth). Must not exceed
    /// the student's depth.
    pub prompt_depth: usize,
    /// Fraction of the pool held out for the agreement curve (never
    /// trained on).
    pub heldout_fraction: f64,
    pub seed: u64,
}

impl Default for KdConfig {
    fn default() -> Self {
        KdConfig {
            temperature: 1.0,
            epochs: 20,
            batch_size: 32,
            lr: 0.0025,
            momentum: 0.9,
            template_id: "plain".into(),
            prompt_length: 8,
            prompt_depth: 6,
            heldout_fraction: 0.1,
            seed: 0,
        }
    }
}

impl KdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::config(format!(
                "kd temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.epochs == 0 {
            return Err(Error::config("kd epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("kd batch size must be positive"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config(format!("kd lr must be positive, got {}", self.lr)));
        }
        if self.prompt_length == 0 || self.prompt_depth == 0 {
            return Err(Error::config("boosting prompt length and depth must be positive"));
        }
        if !(0.0..1.0).contains(&self.heldout_fraction) {
            return Err(Error::config(format!(
                "heldout fraction {} outside [0, 1)",
                self.heldout_fraction
            )));
        }
        Ok(())
    }
}

/// A pool of images with labels withheld by construction: there is no
/// accessor that maps an image back to its class. The class-name list is
/// domain metadata (it parameterizes the classifier head), not supervision.
#[derive(Debug, Clone)]
pub struct UnlabeledSet {
    images: Vec<Tensor>,
    class_names: Vec<String>,
}

impl UnlabeledSet {
    /// The full train split with labels stripped.
    pub fn from_train_split(ds: &Dataset) -> Self {
        let images = ds.all_train().into_iter().map(|i| ds.image(i).clone()).collect();
        UnlabeledSet { images, class_names: ds.spec().class_names.clone() }
    }

    /// `per_class` train images per class, labels stripped after selection.
    ///
    /// Subsets are nested under one seed: each class's train indices are
    /// shuffled once, and `per_class` takes a prefix — so the 4-per-class
    /// pool contains the 2-per-class pool exactly. This keeps pool-size
    /// ablation rows comparable (growing the pool only ever adds images).
    pub fn from_train_subset(ds: &Dataset, per_class: usize, seed: u64) -> Result<Self> {
        if per_class == 0 {
            return Err(Error::config("unlabeled subset needs at least one image per class"));
        }
        let mut images = Vec::new();
        for c in 0..ds.spec().num_classes() {
            let mut idx = ds.train_indices(c);
            if idx.len() < per_class {
                return Err(Error::config(format!(
                    "class {c} has only {} train images, cannot sample {per_class}",
                    idx.len()
                )));
            }
            idx.shuffle(&mut seeded(seed, &format!("unlabeled/class{c}")));
            images.extend(idx[..per_class].iter().map(|&i| ds.image(i).clone()));
        }
        Ok(UnlabeledSet { images, class_names: ds.spec().class_names.clone() })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image(&self, i: usize) -> &Tensor {
        &self.images[i]
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }
}

/// Zero-shot logits of a frozen model over the pool: cosine similarities
/// against templated class captions, divided by the model's own similarity
/// temperature. Returns `[images × classes]`. Nothing is recorded for
/// gradients — the computation runs on throwaway constant tapes.
pub fn teacher_logits(
    teacher: &MiniClip,
    images: &[&Tensor],
    class_names: &[String],
    template_id: &str,
) -> Result<Tensor> {
    if !teacher.is_frozen() {
        return Err(Error::contract(
            "teacher must be fully frozen before it supervises distillation",
        ));
    }
    let vocab = Vocab::standard();
    let rows = template_rows(&vocab, template_id, class_names)?;
    let tf = text_features(teacher, &rows, None, None)?;
    let vf = image_features(teacher, images, None, None)?;
    cosine_logits(&vf, &tf, teacher.temperature())
}

/// Mean over rows of `KL(softmax(teacher/τ) ‖ softmax(student/τ))` — the
/// distillation objective as a pure function. Serves as the oracle the tape
/// route is checked against; gradients (when taken through the tape) flow
/// only into the student logits because the teacher side enters as
/// constants.
pub fn kd_loss(student_logits: &Tensor, teacher_logits: &Tensor, tau: f64) -> Result<f64> {
    if student_logits.shape() != teacher_logits.shape() {
        return Err(Error::contract(format!(
            "kd_loss shapes differ: student {:?}, teacher {:?}",
            student_logits.shape(),
            teacher_logits.shape()
        )));
    }
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::contract(format!("kd temperature must be positive, got {tau}")));
    }
    let (rows, cols) = student_logits.dims2()?;
    let mut acc = 0.0;
    for i in 0..rows {
        let s = &student_logits.data()[i * cols..(i + 1) * cols];
        let t = &teacher_logits.data()[i * cols..(i + 1) * cols];
        // Log-softmax both rows at temperature τ; KL = Σ p (ln p − ln q).
        let lse = |row: &[f64]| {
            let m = row.iter().map(|v| v / tau).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v / tau - m).exp()).sum();
            m + z.ln()
        };
        let (ls, lt) = (lse(s), lse(t));
        acc += (0..cols)
            .map(|j| {
                let lp = t[j] / tau - lt;
                let lq = s[j] / tau - ls;
                lp.exp() * (lp - lq)
            })
            .sum::<f64>();
    }
    Ok(acc / rows as f64)
}

/// One row of the distillation curve. Epoch 0 is measured before any
/// update; epoch `e ≥ 1` reports the image-weighted mean training loss over
/// that epoch's batches.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BoostEpoch {
    pub epoch: usize,
    pub kd_loss: f64,
    /// Fraction of held-out images where student and teacher pick the same
    /// class.
    pub heldout_agreement: f64,
}

/// What Phase I hands to Phase II: frozen boosting sets plus the training
/// record.
#[derive(Debug, Clone)]
pub struct BoostOutcome {
    pub text: PromptSet,
    pub vision: PromptSet,
    pub epochs: Vec<BoostEpoch>,
    /// The exact parameter ids that trained — audited to be the boosting
    /// blocks of both branches and nothing else.
    pub trainable_ids: Vec<String>,
}

/// Runs the distillation phase and returns frozen boosting prompt sets.
///
/// Contract: both models are pretrained and fully frozen; the pool is
/// non-empty and large enough to hold out at least one image. Exactly
/// `2 × prompt_depth` tensors train (one block per layer per branch);
/// everything else is bitwise untouched.
pub fn run_boost_phase(
    student: &MiniClip,
    teacher: &MiniClip,
    pool: &UnlabeledSet,
    cfg: &KdConfig,
) -> Result<BoostOutcome> {
    cfg.validate()?;
    if pool.is_empty() {
        return Err(Error::config("unlabeled pool is empty"));
    }
    if !student.is_frozen() || !teacher.is_frozen() {
        return Err(Error::contract(
            "both models must be frozen before distillation (only prompts may train)",
        ));
    }
    let scfg = student.cfg();
    if cfg.prompt_depth > scfg.depth {
        return Err(Error::config(format!(
            "boosting depth {} exceeds student depth {}",
            cfg.prompt_depth, scfg.depth
        )));
    }

    // Held-out split for the agreement curve: shuffled once, never trained.
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(&mut seeded(cfg.seed, "boost/heldout"));
    let n_held = ((pool.len() as f64 * cfg.heldout_fraction).ceil() as usize)
        .clamp(1, pool.len().saturating_sub(1));
    if pool.len() < 2 {
        return Err(Error::config(
            "unlabeled pool needs at least 2 images (one must be held out)",
        ));
    }
    let (held_idx, train_idx) = order.split_at(n_held);

    // The teacher is immutable: its logits over the whole pool are computed
    // once up front.
    let all_images: Vec<&Tensor> = (0..pool.len()).map(|i| pool.image(i)).collect();
    let t_logits = teacher_logits(teacher, &all_images, pool.class_names(), &cfg.template_id)?;
    let num_classes = pool.class_names().len();
    let t_row = |i: usize| &t_logits.data()[i * num_classes..(i + 1) * num_classes];
    let softened = |row: &[f64]| {
        let m = row.iter().map(|v| v / cfg.temperature).fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v / cfg.temperature - m).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|v| v / z).collect::<Vec<f64>>()
    };
    let held_teacher_pred: Vec<usize> = {
        let rows: Vec<f64> = held_idx.iter().flat_map(|&i| t_row(i).to_vec()).collect();
        argmax_rows(&Tensor::new(vec![held_idx.len(), num_classes], rows))?
    };

    // Fresh boosting sets, one independent block per layer per branch.
    let mut text_set = PromptSet::init(
        PromptRole::Boosting,
        Branch::Text,
        cfg.prompt_length,
        cfg.prompt_depth,
        scfg.width,
        crate::rng::derive_seed(cfg.seed, "boost/init/text"),
    )?;
    let mut vision_set = PromptSet::init(
        PromptRole::Boosting,
        Branch::Vision,
        cfg.prompt_length,
        cfg.prompt_depth,
        scfg.width,
        crate::rng::derive_seed(cfg.seed, "boost/init/vision"),
    )?;
    let expected_ids: Vec<String> = {
        let mut ids: Vec<String> = (0..cfg.prompt_depth)
            .flat_map(|l| [text_set.param_id(l), vision_set.param_id(l)])
            .collect();
        ids.sort();
        ids
    };

    // The student reads bare class tokens; context comes from the prompts.
    let vocab = Vocab::standard();
    let class_rows = class_token_rows(&vocab, pool.class_names())?;
    let text_layout = student_text_layout(&text_set, scfg.depth, class_rows[0].len())?;
    let vision_layout =
        cascade(Some(&vision_set), None, Branch::Vision, scfg.depth, 1 + scfg.num_patches(), true)?;

    let mut sgd = Sgd::with_momentum(cfg.lr, cfg.momentum)?;
    let mut curve = Vec::with_capacity(cfg.epochs + 1);

    // Epoch 0: the pre-update state of both curves.
    curve.push(BoostEpoch {
        epoch: 0,
        kd_loss: pool_kd_loss(
            student, &text_set, &vision_set, &text_layout, &class_rows, pool, train_idx, &t_logits,
            num_classes, cfg.temperature,
        )?,
        heldout_agreement: heldout_agreement(
            student, &text_set, &vision_set, &class_rows, pool, held_idx, &held_teacher_pred,
        )?,
    });

    for epoch in 1..=cfg.epochs {
        let mut batch_order = train_idx.to_vec();
        batch_order.shuffle(&mut seeded(cfg.seed, &format!("boost/epoch{epoch}")));
        let mut loss_sum = 0.0;
        for batch in batch_order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let mut mb = ModelBinder::new(student, false);

            // Text features: one row per class, boosting blocks as params.
            let mut tb = PromptBinder::new(Some(&text_set), None);
            let mut tprov = tb.provider();
            let refs: Vec<&[u32]> = class_rows.iter().map(|r| r.as_slice()).collect();
            let (tf, _) = encode_text(&mut tape, &mut mb, &text_layout, &mut tprov, &refs)?;
            drop(tprov);

            // Image features for the batch, vision blocks as params.
            let mut vb = PromptBinder::new(Some(&vision_set), None);
            let mut vprov = vb.provider();
            let imgs: Vec<&Tensor> = batch.iter().map(|&i| pool.image(i)).collect();
            let (vf, _) = encode_image(&mut tape, &mut mb, &vision_layout, &mut vprov, &imgs)?;
            drop(vprov);

            let logits = scaled_logits(&mut tape, &mut mb, vf, tf)?;
            let q = tape.softmax_t(logits, cfg.temperature)?;
            let p_rows: Vec<f64> =
                batch.iter().flat_map(|&i| softened(t_row(i))).collect();
            let p = tape.constant(Tensor::new(vec![batch.len(), num_classes], p_rows));
            let loss = tape.kl_div(p, q)?;
            let loss_val = tape.value(loss).data()[0];
            let grads = tape.backward(loss)?;

            // Exactly the boosting blocks may train — audit every step.
            let mut params: Vec<Parameter> = text_set
                .parameters()
                .into_iter()
                .chain(vision_set.parameters())
                .collect();
            let mut got: Vec<String> = grads.ids().map(String::from).collect();
            got.sort();
            if got != expected_ids {
                return Err(Error::contract(format!(
                    "distillation trained {got:?}, expected exactly the boosting blocks {expected_ids:?}"
                )));
            }
            sgd.step(params.iter_mut(), &grads)?;
            for p in params {
                let (set, layer) = parse_block_id(&p.id, &text_set, &vision_set)?;
                match set {
                    Branch::Text => text_set.update_block(layer, p.value)?,
                    Branch::Vision => vision_set.update_block(layer, p.value)?,
                }
            }
            loss_sum += loss_val * batch.len() as f64;
        }
        curve.push(BoostEpoch {
            epoch,
            kd_loss: loss_sum / train_idx.len() as f64,
            heldout_agreement: heldout_agreement(
                student, &text_set, &vision_set, &class_rows, pool, held_idx, &held_teacher_pred,
            )?,
        });
    }

    text_set.freeze();
    vision_set.freeze();
    Ok(BoostOutcome { text: text_set, vision: vision_set, epochs: curve, trainable_ids: expected_ids })
}

/// Text layout for Phase I: unfrozen boosting prompts ahead of the class
/// token. The unfrozen-cascade override is correct here — this *is* the
/// phase that trains them.
fn student_text_layout(
    text_set: &PromptSet,
    depth: usize,
    content_len: usize,
) -> Result<CascadeLayout> {
    cascade(Some(text_set), None, Branch::Text, depth, content_len, true)
}

/// Maps a gradient/parameter id back to (branch, layer) of the boosting
/// sets.
fn parse_block_id(
    id: &str,
    text_set: &PromptSet,
    vision_set: &PromptSet,
) -> Result<(Branch, usize)> {
    for (set, branch) in [(text_set, Branch::Text), (vision_set, Branch::Vision)] {
        for l in 0..set.depth() {
            if set.param_id(l) == id {
                return Ok((branch, l));
            }
        }
    }
    Err(Error::contract(format!("parameter id `{id}` is not a boosting block")))
}

/// Mean distillation loss over a set of pool indices, computed with
/// everything bound as constants (used for the epoch-0 row).
#[allow(clippy::too_many_arguments)]
fn pool_kd_loss(
    student: &MiniClip,
    text_set: &PromptSet,
    vision_set: &PromptSet,
    text_layout: &CascadeLayout,
    class_rows: &[Vec<u32>],
    pool: &UnlabeledSet,
    indices: &[usize],
    t_logits: &Tensor,
    num_classes: usize,
    tau: f64,
) -> Result<f64> {
    let _ = text_layout; // the eval helpers rebuild layouts internally
    let s_logits = student_pool_logits(student, text_set, vision_set, class_rows, pool, indices)?;
    let t_rows: Vec<f64> = indices
        .iter()
        .flat_map(|&i| t_logits.data()[i * num_classes..(i + 1) * num_classes].to_vec())
        .collect();
    kd_loss(
        &s_logits,
        &Tensor::new(vec![indices.len(), num_classes], t_rows),
        tau,
    )
}

/// Student zero-shot logits over pool indices with the current (possibly
/// mid-training) boosting sets bound as constants.
fn student_pool_logits(
    student: &MiniClip,
    text_set: &PromptSet,
    vision_set: &PromptSet,
    class_rows: &[Vec<u32>],
    pool: &UnlabeledSet,
    indices: &[usize],
) -> Result<Tensor> {
    let tf = text_features(student, class_rows, Some(text_set), None)?;
    let imgs: Vec<&Tensor> = indices.iter().map(|&i| pool.image(i)).collect();
    let vf = image_features(student, &imgs, Some(vision_set), None)?;
    cosine_logits(&vf, &tf, student.temperature())
}

/// Fraction of held-out images where the student's top-1 matches the
/// teacher's.
fn heldout_agreement(
    student: &MiniClip,
    text_set: &PromptSet,
    vision_set: &PromptSet,
    class_rows: &[Vec<u32>],
    pool: &UnlabeledSet,
    held_idx: &[usize],
    teacher_pred: &[usize],
) -> Result<f64> {
    let logits = student_pool_logits(student, text_set, vision_set, class_rows, pool, held_idx)?;
    let pred = argmax_rows(&logits)?;
    let agree = pred.iter().zip(teacher_pred).filter(|(a, b)| a == b).count();
    Ok(agree as f64 / held_idx.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{generate_domain, DomainSpec};
    use crate::model::EncoderConfig;
    use crate::tokenizer::class_slot_name;
    use rand::Rng;

    fn micro_spec() -> DomainSpec {
        DomainSpec {
            id: "micro".into(),
            class_names: (0..4).map(class_slot_name).collect(),
            image_size: 8,
            noise_sigma: 0.02,
            max_shift: 1,
            max_brightness: 0.05,
            brightness_bias: 0.0,
            style_strength: 0.3,
            style_salt: String::new(),
            template_id: "plain".into(),
            train_per_class: 4,
            test_per_class: 2,
        }
    }

    fn micro_model(seed: u64) -> MiniClip {
        let cfg = EncoderConfig {
            depth: 2,
            width: 8,
            heads: 2,
            max_seq: 24,
            patch_size: 4,
            image_size: 8,
            vocab_size: Vocab::standard().len(),
        };
        let mut m = MiniClip::init(cfg, 6, seed).unwrap();
        m.freeze();
        m
    }

    fn micro_kd() -> KdConfig {
        KdConfig {
            epochs: 2,
            batch_size: 4,
            prompt_length: 2,
            prompt_depth: 2,
            ..KdConfig::default()
        }
    }

    fn random_logits(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
        let data = (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect();
        Tensor::new(vec![rows, cols], data)
    }

    #[test]
    fn kd_loss_is_zero_on_identical_logits_and_matches_closed_form() {
        let mut rng = seeded(0, "kd-zero");
        let s = random_logits(&mut rng, 5, 7);
        assert_eq!(kd_loss(&s, &s, 1.0).unwrap(), 0.0);
        // Unit logit gap, two classes: KL = σ(1) − σ(−1).
        let teacher = Tensor::new(vec![1, 2], vec![1.0, 0.0]);
        let student = Tensor::new(vec![1, 2], vec![0.0, 1.0]);
        let got = kd_loss(&student, &teacher, 1.0).unwrap();
        assert!((got - 0.46212).abs() < 1e-5, "got {got}");
    }

    #[test]
    fn kd_loss_nonnegative_across_temperatures() {
        let mut rng = seeded(1, "kd-nonneg");
        for _ in 0..25 {
            let s = random_logits(&mut rng, 3, 6);
            let t = random_logits(&mut rng, 3, 6);
            for tau in [0.5, 1.0, 2.0, 4.0] {
                let v = kd_loss(&s, &t, tau).unwrap();
                assert!(v >= 0.0, "kd_loss {v} negative at tau {tau}");
            }
        }
    }

    #[test]
    fn kd_loss_decays_with_temperature_on_fixed_pair() {
        let mut rng = seeded(2, "kd-decay");
        let s = random_logits(&mut rng, 4, 5);
        let t = random_logits(&mut rng, 4, 5);
        let vals: Vec<f64> =
            [1.0, 2.0, 4.0, 8.0, 16.0].iter().map(|&tau| kd_loss(&s, &t, tau).unwrap()).collect();
        for w in vals[1..].windows(2) {
            assert!(w[1] <= w[0], "not monotone beyond τ=2: {vals:?}");
        }
        assert!(vals[4] < vals[0] && vals[4] < 0.01, "no decay toward zero: {vals:?}");
    }

    #[test]
    fn kd_loss_validates_inputs() {
        let a = Tensor::new(vec![1, 2], vec![0.0, 1.0]);
        let b = Tensor::new(vec![1, 3], vec![0.0, 1.0, 2.0]);
        assert!(kd_loss(&a, &b, 1.0).is_err());
        assert!(kd_loss(&a, &a, 0.0).is_err());
        assert!(kd_loss(&a, &a, -1.0).is_err());
    }

    #[test]
    fn tape_route_reproduces_the_pure_kd_loss() {
        let mut rng = seeded(3, "kd-route");
        let s = random_logits(&mut rng, 4, 6);
        let t = random_logits(&mut rng, 4, 6);
        for tau in [0.7, 1.0, 3.0] {
            let oracle = kd_loss(&s, &t, tau).unwrap();
            let mut tape = Tape::new();
            let sn = tape.param("student", s.clone()).unwrap();
            let q = tape.softmax_t(sn, tau).unwrap();
            let p_rows: Vec<f64> = (0..4)
                .flat_map(|i| {
                    let row = &t.data()[i * 6..(i + 1) * 6];
                    let m = row.iter().map(|v| v / tau).fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = row.iter().map(|v| (v / tau - m).exp()).collect();
                    let z: f64 = e.iter().sum();
                    e.into_iter().map(move |v| v / z)
                })
                .collect();
            let p = tape.constant(Tensor::new(vec![4, 6], p_rows));
            let loss = tape.kl_div(p, q).unwrap();
            assert!((tape.value(loss).data()[0] - oracle).abs() < 1e-12);
            // Gradient reaches the student logits and is finite.
            let grads = tape.backward(loss).unwrap();
            let g = grads.get("student").unwrap();
            assert!(g.data().iter().all(|v| v.is_finite()));
            assert!(g.data().iter().any(|v| v.abs() > 0.0));
        }
    }

    #[test]
    fn unlabeled_subsets_nest_under_one_seed() {
        let ds = generate_domain(&micro_spec(), 5).unwrap();
        let s1 = UnlabeledSet::from_train_subset(&ds, 1, 9).unwrap();
        let s2 = UnlabeledSet::from_train_subset(&ds, 2, 9).unwrap();
        let s4 = UnlabeledSet::from_train_subset(&ds, 4, 9).unwrap();
        assert_eq!((s1.len(), s2.len(), s4.len()), (4, 8, 16));
        let contains = |big: &UnlabeledSet, img: &Tensor| {
            (0..big.len()).any(|i| big.image(i).bit_eq(img))
        };
        for i in 0..s1.len() {
            assert!(contains(&s2, s1.image(i)), "subset(1) ⊄ subset(2)");
        }
        for i in 0..s2.len() {
            assert!(contains(&s4, s2.image(i)), "subset(2) ⊄ subset(4)");
        }
        assert!(UnlabeledSet::from_train_subset(&ds, 99, 9).is_err());
        // Full pool equals train split size.
        assert_eq!(UnlabeledSet::from_train_split(&ds).len(), 16);
    }

    #[test]
    fn teacher_logits_require_a_frozen_model_and_are_deterministic() {
        let ds = generate_domain(&micro_spec(), 6).unwrap();
        let imgs: Vec<&Tensor> = ds.all_train().into_iter().map(|i| ds.image(i)).collect();
        let names = ds.spec().class_names.clone();
        let unfrozen = {
            let cfg = EncoderConfig {
                depth: 2,
                width: 8,
                heads: 2,
                max_seq: 24,
                patch_size: 4,
                image_size: 8,
                vocab_size: Vocab::standard().len(),
            };
            MiniClip::init(cfg, 6, 11).unwrap()
        };
        assert!(teacher_logits(&unfrozen, &imgs[..2], &names, "plain").is_err());
        let teacher = micro_model(11);
        let a = teacher_logits(&teacher, &imgs[..3], &names, "plain").unwrap();
        let b = teacher_logits(&teacher, &imgs[..3], &names, "plain").unwrap();
        assert!(a.bit_eq(&b));
        assert_eq!(a.shape(), &[3, 4]);
    }

    #[test]
    fn boost_phase_trains_only_boosting_blocks_and_freezes_them() {
        let ds = generate_domain(&micro_spec(), 7).unwrap();
        let student = micro_model(21);
        let teacher = micro_model(22);
        let pool = UnlabeledSet::from_train_split(&ds);
        let before = student.snapshot();
        let cfg = micro_kd();
        let out = run_boost_phase(&student, &teacher, &pool, &cfg).unwrap();

        assert!(student.diff_snapshot(&before).is_empty(), "backbone moved");
        assert!(out.text.frozen() && out.vision.frozen());
        assert_eq!(out.trainable_ids.len(), 2 * cfg.prompt_depth);
        assert_eq!(out.epochs.len(), cfg.epochs + 1);
        assert_eq!(out.epochs[0].epoch, 0);
        for row in &out.epochs {
            assert!(row.kd_loss.is_finite() && row.kd_loss >= 0.0);
            assert!((0.0..=1.0).contains(&row.heldout_agreement));
        }
        // The prompts must actually have moved off their init.
        let fresh_text = PromptSet::init(
            PromptRole::Boosting,
            Branch::Text,
            cfg.prompt_length,
            cfg.prompt_depth,
            8,
            crate::rng::derive_seed(cfg.seed, "boost/init/text"),
        )
        .unwrap();
        assert!(!out.text.block(0).unwrap().bit_eq(fresh_text.block(0).unwrap()));
    }

    #[test]
    fn boost_phase_is_deterministic() {
        let ds = generate_domain(&micro_spec(), 8).unwrap();
        let student = micro_model(31);
        let teacher = micro_model(32);
        let pool = UnlabeledSet::from_train_subset(&ds, 2, 0).unwrap();
        let cfg = micro_kd();
        let a = run_boost_phase(&student, &teacher, &pool, &cfg).unwrap();
        let b = run_boost_phase(&student, &teacher, &pool, &cfg).unwrap();
        for l in 0..cfg.prompt_depth {
            assert!(a.text.block(l).unwrap().bit_eq(b.text.block(l).unwrap()));
            assert!(a.vision.block(l).unwrap().bit_eq(b.vision.block(l).unwrap()));
        }
        assert_eq!(a.epochs, b.epochs);
    }

    #[test]
    fn boost_phase_rejects_unfrozen_models_and_bad_configs() {
        let ds = generate_domain(&micro_spec(), 9).unwrap();
        let pool = UnlabeledSet::from_train_split(&ds);
        let frozen = micro_model(41);
        let unfrozen = {
            let cfg = *frozen.cfg();
            MiniClip::init(cfg, 6, 42).unwrap()
        };
        assert!(run_boost_phase(&unfrozen, &frozen, &pool, &micro_kd()).is_err());
        assert!(run_boost_phase(&frozen, &unfrozen, &pool, &micro_kd()).is_err());
        let mut bad = micro_kd();
        bad.prompt_depth = 99;
        assert!(run_boost_phase(&frozen, &frozen, &pool, &bad).is_err());
        let mut bad = micro_kd();
        bad.temperature = 0.0;
        assert!(run_boost_phase(&frozen, &frozen, &pool, &bad).is_err());
        let empty = UnlabeledSet { images: vec![], class_names: vec![] };
        assert!(run_boost_phase(&frozen, &frozen, &empty, &micro_kd()).is_err());
    }
}
