//! Procedural synthetic image domains.
//!
//! Every class in the laboratory's closed world is a deterministic texture: a
//! mixture of low-frequency sinusoids keyed by the class *name*. Because the
//! prototype depends only on the name, two domains that share a class name
//! share its underlying texture — what differs between domains is a seeded
//! *style* overlay (an additive pattern plus per-channel gains keyed by the
//! domain id), per-image Gaussian noise, and nuisance transforms (cyclic
//! translation, brightness jitter). That construction gives a controllable
//! domain gap: a classifier fit on one domain's pixels degrades on another
//! domain's rendering of the same classes, while the class identity remains
//! recoverable.
//!
//! Datasets are fully reproducible: image `j` of class `c` is a pure function
//! of `(domain spec, seed)`, so regenerating any slice of a dataset never
//! depends on generation order.

use std::collections::BTreeMap;
use std::ops::Range;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use caspl_autodiff::checkpoint;
use caspl_autodiff::{Parameter, Sgd, Tape, Tensor};

use crate::error::{Error, Result};
use crate::rng::seeded;

/// Number of sinusoid components per channel in a class prototype.
const PROTO_COMPONENTS: usize = 3;
/// Number of sinusoid components per channel in a style overlay.
const STYLE_COMPONENTS: usize = 2;

/// Declarative description of a synthetic domain.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DomainSpec {
    /// Stable identifier; also keys the style overlay.
    pub id: String,
    /// Class names, must be distinct; the first half forms the base split.
    pub class_names: Vec<String>,
    /// Images are square `image_size × image_size × 3`.
    pub image_size: usize,
    /// Per-pixel Gaussian noise (0 gives noiseless images).
    pub noise_sigma: f64,
    /// Maximum cyclic translation in pixels, drawn uniformly per image.
    pub max_shift: usize,
    /// Maximum additive brightness jitter, drawn uniformly per image.
    pub max_brightness: f64,
    /// Constant brightness offset (used by [`shift_domain`] to move the
    /// nuisance distribution without touching class identity).
    pub brightness_bias: f64,
    /// Strength of the domain's rendering overlay (0 disables it).
    pub style_strength: f64,
    /// Extra salt mixed into the style seed; [`shift_domain`] changes it so a
    /// shifted domain re-renders the same classes differently.
    pub style_salt: String,
    /// Caption template id for this domain (see [`TemplateSpec::library`]).
    ///
    /// [`TemplateSpec::library`]: crate::tokenizer::TemplateSpec::library
    pub template_id: String,
    /// Training images generated per class.
    pub train_per_class: usize,
    /// Test images generated per class.
    pub test_per_class: usize,
}

impl DomainSpec {
    /// Checks every field-level invariant, naming the offending field.
    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty()
            || !self.id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
        {
            return Err(Error::config(format!(
                "domain id {:?} must be non-empty and use only [A-Za-z0-9_-]",
                self.id
            )));
        }
        let c = self.class_names.len();
        if c < 4 || c % 2 != 0 {
            return Err(Error::config(format!(
                "domain {}: class count must be even and at least 4, got {c}",
                self.id
            )));
        }
        let mut sorted = self.class_names.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != c {
            return Err(Error::config(format!("domain {}: class names must be distinct", self.id)));
        }
        if self.image_size < 4 {
            return Err(Error::config(format!(
                "domain {}: image size must be at least 4, got {}",
                self.id, self.image_size
            )));
        }
        for (name, v) in [
            ("noise_sigma", self.noise_sigma),
            ("max_brightness", self.max_brightness),
            ("style_strength", self.style_strength),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(format!(
                    "domain {}: {name} must be finite and non-negative, got {v}",
                    self.id
                )));
            }
        }
        if !self.brightness_bias.is_finite() {
            return Err(Error::config(format!("domain {}: brightness_bias must be finite", self.id)));
        }
        if self.max_shift >= self.image_size {
            return Err(Error::config(format!(
                "domain {}: max_shift {} must be smaller than image size {}",
                self.id, self.max_shift, self.image_size
            )));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::config(format!(
                "domain {}: train_per_class and test_per_class must be positive",
                self.id
            )));
        }
        Ok(())
    }

    /// Number of classes.
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Class indices in the base split (first half, used for few-shot tuning).
    pub fn base_classes(&self) -> Range<usize> {
        0..self.num_classes() / 2
    }

    /// Class indices in the novel split (second half, never tuned on).
    pub fn novel_classes(&self) -> Range<usize> {
        self.num_classes() / 2..self.num_classes()
    }

    /// Images generated per class (train + test).
    pub fn images_per_class(&self) -> usize {
        self.train_per_class + self.test_per_class
    }
}

/// Derives a new domain with the same classes but a deterministically moved
/// nuisance/rendering distribution: fresh style overlay, stronger style, and
/// a brightness bias. Class prototypes are untouched, so class identity is
/// preserved while pixels move.
pub fn shift_domain(spec: &DomainSpec, magnitude: f64) -> Result<DomainSpec> {
    if !magnitude.is_finite() || magnitude <= 0.0 {
        return Err(Error::config(format!(
            "shift magnitude must be finite and positive, got {magnitude}"
        )));
    }
    let mut out = spec.clone();
    out.id = format!("{}-shift", spec.id);
    out.style_salt = format!("{}+shift", spec.style_salt);
    out.style_strength += 0.5 * magnitude;
    out.brightness_bias += 0.3 * magnitude;
    out.validate()?;
    Ok(out)
}

/// A generated dataset: images, labels, and train/test index lists per class.
///
/// Images are stored class-major (all of class 0, then class 1, …), each class
/// block holding its training images before its test images.
#[derive(Debug, Clone)]
pub struct Dataset {
    spec: DomainSpec,
    images: Vec<Tensor>,
    labels: Vec<usize>,
}

impl Dataset {
    /// The spec this dataset was generated from.
    pub fn spec(&self) -> &DomainSpec {
        &self.spec
    }

    /// Total image count.
    pub fn num_images(&self) -> usize {
        self.images.len()
    }

    /// Image by global index, shape `[size, size, 3]`.
    pub fn image(&self, idx: usize) -> &Tensor {
        &self.images[idx]
    }

    /// Class index of an image.
    pub fn label(&self, idx: usize) -> usize {
        self.labels[idx]
    }

    /// Global indices of a class's training images.
    pub fn train_indices(&self, class: usize) -> Vec<usize> {
        let per = self.spec.images_per_class();
        let start = class * per;
        (start..start + self.spec.train_per_class).collect()
    }

    /// Global indices of a class's test images.
    pub fn test_indices(&self, class: usize) -> Vec<usize> {
        let per = self.spec.images_per_class();
        let start = class * per + self.spec.train_per_class;
        (start..start + self.spec.test_per_class).collect()
    }

    /// All training indices across classes, class-major order.
    pub fn all_train(&self) -> Vec<usize> {
        (0..self.spec.num_classes()).flat_map(|c| self.train_indices(c)).collect()
    }

    /// All test indices across classes, class-major order.
    pub fn all_test(&self) -> Vec<usize> {
        (0..self.spec.num_classes()).flat_map(|c| self.test_indices(c)).collect()
    }

    /// Flattens an image to a feature row (row-major pixels, channels last).
    pub fn pixels(&self, idx: usize) -> &[f64] {
        self.images[idx].data()
    }

    /// Mean absolute per-pixel distance between two datasets of identical
    /// layout (used to verify a shifted domain actually moved).
    pub fn mean_pixel_distance(a: &Dataset, b: &Dataset) -> Result<f64> {
        if a.num_images() != b.num_images() {
            return Err(Error::contract(format!(
                "pixel distance needs aligned datasets, got {} vs {} images",
                a.num_images(),
                b.num_images()
            )));
        }
        let mut total = 0.0;
        let mut count = 0usize;
        for i in 0..a.num_images() {
            let (xa, xb) = (a.pixels(i), b.pixels(i));
            if xa.len() != xb.len() {
                return Err(Error::contract("pixel distance needs equal image sizes"));
            }
            total += xa.iter().zip(xb).map(|(p, q)| (p - q).abs()).sum::<f64>();
            count += xa.len();
        }
        Ok(total / count as f64)
    }

    /// Writes the dataset as a tensor bundle plus a JSON manifest whose
    /// `extra` block carries the domain spec; regenerating from that spec
    /// reproduces the images byte for byte.
    pub fn save(&self, bin_path: &Path, manifest_path: &Path) -> Result<()> {
        let ids: Vec<String> = (0..self.images.len()).map(record_name).collect();
        let tensors: Vec<(&str, &Tensor)> =
            ids.iter().map(|s| s.as_str()).zip(self.images.iter()).collect();
        let extra = serde_json::json!({
            "kind": "dataset",
            "spec": self.spec,
            "labels": self.labels,
        });
        checkpoint::save(bin_path, manifest_path, tensors, extra)?;
        Ok(())
    }

    /// Loads a dataset bundle, validating counts and label layout against the
    /// embedded spec.
    pub fn load(bin_path: &Path, manifest_path: &Path) -> Result<Dataset> {
        let manifest = checkpoint::load_manifest(manifest_path)?;
        let spec: DomainSpec = serde_json::from_value(
            manifest
                .extra
                .get("spec")
                .cloned()
                .ok_or_else(|| Error::Io {
                    path: manifest_path.to_path_buf(),
                    detail: "dataset manifest missing spec".into(),
                })?,
        )
        .map_err(|e| Error::Io { path: manifest_path.to_path_buf(), detail: e.to_string() })?;
        spec.validate()?;
        let labels: Vec<usize> = serde_json::from_value(
            manifest.extra.get("labels").cloned().unwrap_or(serde_json::Value::Null),
        )
        .map_err(|e| Error::Io { path: manifest_path.to_path_buf(), detail: e.to_string() })?;
        let expected = spec.num_classes() * spec.images_per_class();
        if labels.len() != expected {
            return Err(Error::Io {
                path: manifest_path.to_path_buf(),
                detail: format!("dataset has {} labels, spec implies {expected}", labels.len()),
            });
        }
        let all: BTreeMap<String, Tensor> = checkpoint::load_all(bin_path, &manifest)?;
        let mut images = Vec::with_capacity(expected);
        for i in 0..expected {
            let name = record_name(i);
            let img = all.get(&name).ok_or_else(|| Error::Io {
                path: bin_path.to_path_buf(),
                detail: format!("dataset bundle missing image record {name}"),
            })?;
            images.push(img.clone());
        }
        Ok(Dataset { spec, images, labels })
    }
}

fn record_name(idx: usize) -> String {
    format!("img{idx:05}")
}

/// Deterministic texture for a class, keyed by its name alone: a per-channel
/// mixture of low-frequency sinusoids around mid-gray. Shape `[size, size, 3]`.
pub fn class_prototype(name: &str, size: usize) -> Tensor {
    let mut rng = seeded(0, &format!("prototype/{name}"));
    let mut comps = Vec::new();
    for _ in 0..3 {
        for _ in 0..PROTO_COMPONENTS {
            comps.push(sample_component(&mut rng, 0.08, 0.22));
        }
    }
    let mut data = vec![0.0; size * size * 3];
    for y in 0..size {
        for x in 0..size {
            for ch in 0..3 {
                let mut v = 0.5;
                for k in 0..PROTO_COMPONENTS {
                    v += comps[ch * PROTO_COMPONENTS + k].eval(x, y, size);
                }
                data[(y * size + x) * 3 + ch] = v;
            }
        }
    }
    Tensor::new(vec![size, size, 3], data)
}

/// One sinusoid: integer spatial frequency, amplitude, phase.
struct SinusoidComponent {
    fx: i32,
    fy: i32,
    amp: f64,
    phase: f64,
}

impl SinusoidComponent {
    fn eval(&self, x: usize, y: usize, size: usize) -> f64 {
        let t = (self.fx as f64 * x as f64 + self.fy as f64 * y as f64) / size as f64;
        self.amp * (std::f64::consts::TAU * t + self.phase).sin()
    }
}

fn sample_component(rng: &mut impl Rng, amp_lo: f64, amp_hi: f64) -> SinusoidComponent {
    // Reject the constant (0, 0) frequency so every component carries texture.
    let (fx, fy) = loop {
        let fx = rng.gen_range(-3..=3);
        let fy = rng.gen_range(-3..=3);
        if fx != 0 || fy != 0 {
            break (fx, fy);
        }
    };
    SinusoidComponent {
        fx,
        fy,
        amp: rng.gen_range(amp_lo..amp_hi),
        phase: rng.gen_range(0.0..std::f64::consts::TAU),
    }
}

/// Domain rendering overlay: an additive pattern and per-channel gains, both
/// keyed by `(domain id, style salt)` and scaled by the style strength.
struct StyleOverlay {
    pattern: Vec<f64>,
    gains: [f64; 3],
}

fn style_overlay(spec: &DomainSpec) -> StyleOverlay {
    let size = spec.image_size;
    let mut rng = seeded(0, &format!("style/{}/{}", spec.id, spec.style_salt));
    let mut comps = Vec::new();
    for _ in 0..3 {
        for _ in 0..STYLE_COMPONENTS {
            comps.push(sample_component(&mut rng, 0.25, 0.6));
        }
    }
    let mut gains = [1.0; 3];
    for g in &mut gains {
        *g = 1.0 + spec.style_strength * rng.gen_range(-0.4..0.4);
    }
    let mut pattern = vec![0.0; size * size * 3];
    for y in 0..size {
        for x in 0..size {
            for ch in 0..3 {
                let mut v = 0.0;
                for k in 0..STYLE_COMPONENTS {
                    v += comps[ch * STYLE_COMPONENTS + k].eval(x, y, size);
                }
                pattern[(y * size + x) * 3 + ch] = spec.style_strength * v;
            }
        }
    }
    StyleOverlay { pattern, gains }
}

/// Generates the full dataset for a domain. Every image is a pure function of
/// `(spec, seed)`: prototype (by class name) → cyclic shift → channel gains →
/// additive style → Gaussian noise → brightness offset.
pub fn generate_domain(spec: &DomainSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let size = spec.image_size;
    let style = style_overlay(spec);
    let per = spec.images_per_class();
    let mut images = Vec::with_capacity(spec.num_classes() * per);
    let mut labels = Vec::with_capacity(spec.num_classes() * per);
    for (c, name) in spec.class_names.iter().enumerate() {
        let proto = class_prototype(name, size);
        for j in 0..per {
            let mut rng = seeded(seed, &format!("{}/{}/{}", spec.id, name, j));
            let s = spec.max_shift as i64;
            let dx = rng.gen_range(-s..=s);
            let dy = rng.gen_range(-s..=s);
            let delta = if spec.max_brightness > 0.0 {
                rng.gen_range(-spec.max_brightness..spec.max_brightness)
            } else {
                0.0
            } + spec.brightness_bias;
            let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| {
                Error::config(format!("domain {}: invalid noise sigma: {e}", spec.id))
            })?;
            let mut data = vec![0.0; size * size * 3];
            for y in 0..size {
                for x in 0..size {
                    // Cyclic translation of the class content; style is applied
                    // in the output frame, as a property of the rendering.
                    let sy = (y as i64 - dy).rem_euclid(size as i64) as usize;
                    let sx = (x as i64 - dx).rem_euclid(size as i64) as usize;
                    for ch in 0..3 {
                        let p = proto.data()[(sy * size + sx) * 3 + ch];
                        let idx = (y * size + x) * 3 + ch;
                        data[idx] = p * style.gains[ch]
                            + style.pattern[idx]
                            + noise.sample(&mut rng)
                            + delta;
                    }
                }
            }
            images.push(Tensor::new(vec![size, size, 3], data));
            labels.push(c);
        }
    }
    Ok(Dataset { spec: spec.clone(), images, labels })
}

/// A multinomial logistic-regression probe on raw pixels: the reference
/// witness that a domain's classes are linearly separable, and that a domain
/// shift actually hurts a source-fit classifier. Independent of the encoders.
pub struct LinearProbe {
    w: Tensor,
    b: Tensor,
    classes: usize,
}

/// Fits a linear probe on a dataset's training split with full-batch gradient
/// descent (momentum 0.9). Convex problem, zero init, deterministic.
pub fn fit_linear_probe(ds: &Dataset, steps: usize, lr: f64) -> Result<LinearProbe> {
    let classes = ds.spec().num_classes();
    let idx = ds.all_train();
    let d = ds.pixels(0).len();
    let mut flat = Vec::with_capacity(idx.len() * d);
    let mut labels = Vec::with_capacity(idx.len());
    for &i in &idx {
        flat.extend_from_slice(ds.pixels(i));
        labels.push(ds.label(i));
    }
    let x = Tensor::new(vec![idx.len(), d], flat);
    let mut w = Parameter::new("probe.w", Tensor::zeros(vec![d, classes]), true);
    let mut b = Parameter::new("probe.b", Tensor::zeros(vec![1, classes]), true);
    let mut opt = Sgd::new(lr)?;
    for _ in 0..steps {
        let mut tape: Tape = Tape::new();
        let xn = tape.constant(x.clone());
        let wn = tape.param("probe.w", w.value.clone())?;
        let bn = tape.param("probe.b", b.value.clone())?;
        let logits = tape.matmul(xn, wn)?;
        let logits = tape.add_row(logits, bn)?;
        let loss = tape.cross_entropy(logits, &labels)?;
        let grads = tape.backward(loss)?;
        opt.step([&mut w, &mut b], &grads)?;
    }
    Ok(LinearProbe { w: w.value, b: b.value, classes })
}

impl LinearProbe {
    /// Top-1 accuracy on a dataset's test split; the dataset must have the
    /// same feature size and class count the probe was fit on.
    pub fn accuracy(&self, ds: &Dataset) -> Result<f64> {
        if ds.spec().num_classes() != self.classes {
            return Err(Error::contract(format!(
                "probe was fit on {} classes, dataset has {}",
                self.classes,
                ds.spec().num_classes()
            )));
        }
        let (d, c) = self.w.dims2()?;
        let idx = ds.all_test();
        let mut hits = 0usize;
        for &i in &idx {
            let px = ds.pixels(i);
            if px.len() != d {
                return Err(Error::contract(format!(
                    "probe expects {d} pixels per image, got {}",
                    px.len()
                )));
            }
            let mut best = (0usize, f64::NEG_INFINITY);
            for k in 0..c {
                let mut z = self.b.data()[k];
                for (j, p) in px.iter().enumerate() {
                    z += p * self.w.data()[j * c + k];
                }
                if z > best.1 {
                    best = (k, z);
                }
            }
            if best.0 == ds.label(i) {
                hits += 1;
            }
        }
        Ok(hits as f64 / idx.len() as f64)
    }
}
