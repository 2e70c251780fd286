//! The run configuration: one JSON document that pins every knob of the
//! laboratory. Unknown fields are rejected with their full path, every field
//! has a default, and the fully resolved document is snapshotted next to the
//! artifacts so a run is always reproducible from its output directory alone.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapt::{AdaptConfig, AdaptVariant};
use crate::boost::KdConfig;
use crate::domain::DomainSpec;
use crate::error::{Error, Result};
use crate::model::EncoderConfig;
use crate::pretrain::PretrainConfig;
use crate::rng::derive_seed;
use crate::tokenizer::{class_slot_name, TemplateSpec, Vocab, MAX_CLASS_SLOTS};

/// Top-level configuration. Every field is optional in the JSON file; the
/// defaults are the desk-scale recipe used throughout the tests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Global seed; every phase derives its own stream from it.
    pub seed: u64,
    /// Seeds per multi-seed experiment (reports carry mean ± stddev).
    pub seeds: usize,
    /// Few-shot budget per base class for the adapting phase.
    pub shots: usize,
    /// Emit SVG plots next to the metric files.
    pub plots: bool,
    /// Magnitude of the domain shift used for the generalization analog.
    pub shift_magnitude: f64,
    pub domain: DomainSection,
    pub model: ModelSection,
    pub pretrain: PretrainSection,
    pub boost: BoostSection,
    pub adapt: AdaptSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            seeds: 5,
            shots: 16,
            plots: false,
            shift_magnitude: 1.0,
            domain: DomainSection::default(),
            model: ModelSection::default(),
            pretrain: PretrainSection::default(),
            boost: BoostSection::default(),
            adapt: AdaptSection::default(),
        }
    }
}

/// Synthetic source-domain parameters (class count and rendering knobs).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainSection {
    pub id: String,
    pub classes: usize,
    pub image_size: usize,
    pub noise_sigma: f64,
    pub max_shift: usize,
    pub max_brightness: f64,
    pub style_strength: f64,
    pub template_id: String,
    pub train_per_class: usize,
    pub test_per_class: usize,
}

impl Default for DomainSection {
    fn default() -> Self {
        DomainSection {
            id: "source".into(),
            classes: 10,
            image_size: 16,
            noise_sigma: 0.1,
            max_shift: 2,
            max_brightness: 0.1,
            style_strength: 0.3,
            template_id: "plain".into(),
            train_per_class: 100,
            test_per_class: 50,
        }
    }
}

/// One encoder geometry (image size and vocabulary come from the domain).
/// When overriding `model.student` or `model.teacher`, every field must be
/// given — partial geometries have no sensible fallback.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSection {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub max_seq: usize,
    pub patch_size: usize,
}

/// Student and teacher geometries plus the shared embedding width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub student: EncoderSection,
    pub teacher: EncoderSection,
    pub d_shared: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let s = EncoderConfig::desk_student();
        let t = EncoderConfig::desk_teacher();
        let to_section = |c: EncoderConfig| EncoderSection {
            depth: c.depth,
            width: c.width,
            heads: c.heads,
            max_seq: c.max_seq,
            patch_size: c.patch_size,
        };
        ModelSection { student: to_section(s), teacher: to_section(t), d_shared: 32 }
    }
}

/// Contrastive pretraining recipe, applied to both encoders.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Leading epochs on the batch-centered warmup objective.
    pub warmup_epochs: usize,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let d = PretrainConfig::default();
        PretrainSection {
            epochs: d.epochs,
            batch_size: d.batch_size,
            lr: d.lr,
            momentum: d.momentum,
            warmup_epochs: d.warmup_epochs,
        }
    }
}

/// Distillation (phase one) recipe. The caption template comes from the
/// domain section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoostSection {
    pub temperature: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub length: usize,
    /// Layers carrying fresh boosting blocks; `null` means every student
    /// layer.
    pub depth: Option<usize>,
    pub heldout_fraction: f64,
}

impl Default for BoostSection {
    fn default() -> Self {
        let d = KdConfig::default();
        BoostSection {
            temperature: d.temperature,
            epochs: d.epochs,
            batch_size: d.batch_size,
            lr: d.lr,
            momentum: d.momentum,
            length: d.prompt_length,
            depth: None,
            heldout_fraction: d.heldout_fraction,
        }
    }
}

/// Adapting (phase two) recipe. Unset fields fall back to the chosen
/// variant's training recipe ([`AdaptConfig::for_variant`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptSection {
    pub variant: AdaptVariant,
    pub text_length: Option<usize>,
    pub vision_length: Option<usize>,
    pub depth: Option<usize>,
    pub lr: Option<f64>,
    pub momentum: Option<f64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    /// Base/novel accuracy re-measurement period; `null` evaluates the final
    /// epoch only (the cheap setting every grid uses).
    pub eval_every: Option<usize>,
    pub train_boosting: bool,
}

impl Default for AdaptSection {
    fn default() -> Self {
        AdaptSection {
            variant: AdaptVariant::TextShallow,
            text_length: None,
            vision_length: None,
            depth: None,
            lr: None,
            momentum: None,
            epochs: None,
            batch_size: None,
            eval_every: None,
            train_boosting: false,
        }
    }
}

impl RunConfig {
    /// The source-domain spec this config describes.
    pub fn domain_spec(&self) -> DomainSpec {
        let d = &self.domain;
        DomainSpec {
            id: d.id.clone(),
            class_names: (0..d.classes).map(class_slot_name).collect(),
            image_size: d.image_size,
            noise_sigma: d.noise_sigma,
            max_shift: d.max_shift,
            max_brightness: d.max_brightness,
            brightness_bias: 0.0,
            style_strength: d.style_strength,
            style_salt: String::new(),
            template_id: d.template_id.clone(),
            train_per_class: d.train_per_class,
            test_per_class: d.test_per_class,
        }
    }

    fn encoder_cfg(&self, s: EncoderSection) -> EncoderConfig {
        EncoderConfig {
            depth: s.depth,
            width: s.width,
            heads: s.heads,
            max_seq: s.max_seq,
            patch_size: s.patch_size,
            image_size: self.domain.image_size,
            vocab_size: Vocab::standard().len(),
        }
    }

    pub fn student_cfg(&self) -> EncoderConfig {
        self.encoder_cfg(self.model.student)
    }

    pub fn teacher_cfg(&self) -> EncoderConfig {
        self.encoder_cfg(self.model.teacher)
    }

    /// Pretraining recipe for one encoder role ("student" / "teacher"); each
    /// role trains under its own derived seed.
    pub fn pretrain_cfg(&self, role: &str) -> PretrainConfig {
        PretrainConfig {
            epochs: self.pretrain.epochs,
            batch_size: self.pretrain.batch_size,
            lr: self.pretrain.lr,
            momentum: self.pretrain.momentum,
            warmup_epochs: self.pretrain.warmup_epochs,
            seed: derive_seed(self.seed, &format!("pretrain/{role}")),
        }
    }

    /// Distillation recipe (depth `null` resolves to the full student).
    pub fn kd_cfg(&self) -> KdConfig {
        let b = &self.boost;
        KdConfig {
            temperature: b.temperature,
            epochs: b.epochs,
            batch_size: b.batch_size,
            lr: b.lr,
            momentum: b.momentum,
            template_id: self.domain.template_id.clone(),
            prompt_length: b.length,
            prompt_depth: b.depth.unwrap_or(self.model.student.depth),
            heldout_fraction: b.heldout_fraction,
            seed: derive_seed(self.seed, "boost"),
        }
    }

    /// Adapting recipe for a variant: the variant's defaults overlaid with
    /// this config's explicit fields. `eval_every` left unset evaluates the
    /// final epoch only. Layout overrides apply only where the variant has
    /// the corresponding freedom — `vision_length` and `depth` are ignored
    /// by the shallow text-only variants, and coupled-deep always mirrors
    /// `text_length` on the vision side — so one config can drive every
    /// variant of a grid.
    pub fn adapt_cfg(&self, variant: AdaptVariant) -> AdaptConfig {
        let mut cfg = AdaptConfig::for_variant(variant, self.model.student.depth);
        let a = &self.adapt;
        if let Some(v) = a.text_length {
            cfg.text_length = v;
        }
        if variant.has_vision_prompts() {
            if let Some(v) = a.vision_length {
                cfg.vision_length = v;
            }
            if let Some(v) = a.depth {
                cfg.depth = v;
            }
        }
        if variant == AdaptVariant::CoupledDeep {
            cfg.vision_length = cfg.text_length;
        }
        if let Some(v) = a.lr {
            cfg.lr = v;
        }
        if let Some(v) = a.momentum {
            cfg.momentum = v;
        }
        if let Some(v) = a.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = a.batch_size {
            cfg.batch_size = v;
        }
        cfg.eval_every = a.eval_every.unwrap_or(cfg.epochs);
        cfg.train_boosting = a.train_boosting;
        cfg
    }

    /// The derived seed of the `i`-th run in a multi-seed experiment.
    pub fn run_seed(&self, i: usize) -> u64 {
        derive_seed(self.seed, &format!("run/{i}"))
    }

    /// Cross-field validation; called after loading and before any run.
    pub fn validate(&self) -> Result<()> {
        if self.seeds == 0 {
            return Err(Error::config("seeds must be at least 1"));
        }
        if self.domain.classes > MAX_CLASS_SLOTS {
            return Err(Error::config(format!(
                "domain.classes {} exceeds the {MAX_CLASS_SLOTS} reserved class slots",
                self.domain.classes
            )));
        }
        self.domain_spec().validate()?;
        TemplateSpec::by_id(&self.domain.template_id)?;
        self.student_cfg().validate()?;
        self.teacher_cfg().validate()?;
        if self.model.d_shared == 0 {
            return Err(Error::config("model.d_shared must be positive"));
        }
        if self.pretrain.batch_size > self.domain.classes {
            return Err(Error::config(format!(
                "pretrain.batch_size {} exceeds the {} distinct classes (one pair per class \
                 and batch)",
                self.pretrain.batch_size, self.domain.classes
            )));
        }
        self.kd_cfg().validate()?;
        if self.kd_cfg().prompt_depth > self.model.student.depth {
            return Err(Error::config(format!(
                "boost.depth {} exceeds student depth {}",
                self.kd_cfg().prompt_depth,
                self.model.student.depth
            )));
        }
        self.adapt_cfg(self.adapt.variant).validate(self.model.student.depth)?;
        if ![1, 2, 4, 8, 16].contains(&self.shots) {
            return Err(Error::config(format!(
                "shots must be one of 1, 2, 4, 8, 16; got {}",
                self.shots
            )));
        }
        if !(self.shift_magnitude.is_finite() && self.shift_magnitude > 0.0) {
            return Err(Error::config("shift_magnitude must be finite and positive"));
        }
        Ok(())
    }

    /// The resolved document (defaults filled in) as a JSON value.
    pub fn resolved(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

/// Loads a run configuration: `None` gives the defaults, `Some(path)` parses
/// the file strictly. Schema violations name the offending field path.
pub fn load_run_config(path: Option<&Path>) -> Result<RunConfig> {
    let cfg = match path {
        None => RunConfig::default(),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let mut de = serde_json::Deserializer::from_str(&text);
            serde_path_to_error::deserialize(&mut de).map_err(|e| {
                Error::config(format!(
                    "{}: invalid config at `{}`: {}",
                    p.display(),
                    e.path(),
                    e.inner()
                ))
            })?
        }
    };
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn defaults_validate_and_resolve_the_desk_recipe() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.domain_spec().num_classes(), 10);
        assert_eq!(cfg.student_cfg().depth, 6);
        assert_eq!(cfg.teacher_cfg().width, 64);
        assert_eq!(cfg.kd_cfg().prompt_depth, 6, "null boost depth = full student");
        let a = cfg.adapt_cfg(AdaptVariant::IndependentDeep);
        assert_eq!((a.text_length, a.vision_length, a.depth), (8, 8, 6));
        assert_eq!(a.eval_every, a.epochs, "grids evaluate the final epoch only");
        assert_ne!(cfg.run_seed(0), cfg.run_seed(1));
        assert_ne!(cfg.pretrain_cfg("student").seed, cfg.pretrain_cfg("teacher").seed);
    }

    #[test]
    fn explicit_fields_override_variant_defaults() {
        let mut cfg = RunConfig::default();
        cfg.adapt.epochs = Some(3);
        cfg.adapt.eval_every = Some(1);
        cfg.adapt.lr = Some(0.01);
        let a = cfg.adapt_cfg(AdaptVariant::TextShallow);
        assert_eq!((a.epochs, a.eval_every, a.lr), (3, 1, 0.01));
    }

    #[test]
    fn unknown_fields_are_rejected_with_their_path() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cfg.json");
        let mut f = std::fs::File::create(&p).unwrap();
        write!(f, r#"{{"boost": {{"learning_rate": 0.1}}}}"#).unwrap();
        drop(f);
        let err = load_run_config(Some(&p)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("boost"), "missing field path in: {msg}");
        assert!(msg.contains("learning_rate"), "missing field name in: {msg}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn missing_file_is_an_io_error_and_bad_values_fail_validation() {
        let err = load_run_config(Some(Path::new("/nonexistent/cfg.json"))).unwrap_err();
        assert_eq!(err.exit_code(), 3);

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cfg.json");
        std::fs::write(&p, r#"{"domain": {"classes": 7}}"#).unwrap();
        let err = load_run_config(Some(&p)).unwrap_err();
        assert_eq!(err.exit_code(), 2, "odd class count must fail validation: {err}");

        std::fs::write(&p, r#"{"shots": 5}"#).unwrap();
        assert!(load_run_config(Some(&p)).is_err());

        std::fs::write(&p, r#"{"adapt": {"variant": "independent-deep"}}"#).unwrap();
        let cfg = load_run_config(Some(&p)).unwrap();
        assert_eq!(cfg.adapt.variant, AdaptVariant::IndependentDeep);
    }

    #[test]
    fn resolved_snapshot_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.seed = 7;
        cfg.boost.length = 4;
        let back: RunConfig = serde_json::from_value(cfg.resolved()).unwrap();
        assert_eq!(back, cfg);
    }
}
