//! Evaluation: feature extraction on throwaway tapes, restricted-label-space
//! accuracy, the base/novel harmonic mean, and zero-shot classification with
//! and without boosting prompts.
//!
//! Everything here is inference-only. Feature helpers bind every tensor —
//! model weights and prompt blocks alike — as tape constants, so no gradient
//! bookkeeping happens even when a prompt set is mid-training; tapes are
//! dropped as soon as the feature values are copied out.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Read;
use std::path::Path;

use caspl_autodiff::{Tape, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain::Dataset;
use crate::error::{Error, Result};
use crate::model::{encode_image, encode_text, MiniClip, ModelBinder, PromptBinder};
use crate::prompts::{cascade, Branch, PromptSet};
use crate::tokenizer::{TemplateSpec, Vocab};

/// Images (or captions) encoded per tape. Keeps peak tape memory bounded
/// while amortizing the per-tape weight-binding cost.
const EVAL_CHUNK: usize = 16;

// ── harmonic mean ────────────────────────────────────────────────────

/// `2·B·N / (B + N)` over two accuracies in percent.
///
/// Both inputs must lie in `(0, 100]`; the harmonic mean of a non-positive
/// accuracy is either undefined or a division hazard, so such inputs are
/// rejected rather than silently clamped.
pub fn harmonic_mean(base_acc: f64, novel_acc: f64) -> Result<f64> {
    for (name, v) in [("base", base_acc), ("novel", novel_acc)] {
        if !v.is_finite() || v <= 0.0 || v > 100.0 {
            return Err(Error::contract(format!(
                "{name} accuracy {v} outside (0, 100]"
            )));
        }
    }
    Ok(2.0 * base_acc * novel_acc / (base_acc + novel_acc))
}

// ── reports ──────────────────────────────────────────────────────────

/// Run provenance attached to every report: enough to re-run the evaluation
/// and to detect a swapped checkpoint after the fact.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ReportMeta {
    pub seed: u64,
    /// Resolved configuration echo (filled by the experiment layer; `Null`
    /// when the evaluation is invoked directly).
    pub config: serde_json::Value,
    /// SHA-256 of every checkpoint file that fed the run, keyed by role
    /// (e.g. `"student"`, `"boost"`).
    pub checkpoint_sha256: BTreeMap<String, String>,
    pub num_classes: usize,
    pub base_classes: Vec<usize>,
    pub novel_classes: Vec<usize>,
    pub train_per_class: usize,
    pub test_per_class: usize,
}

impl ReportMeta {
    /// Metadata skeleton for a dataset: class counts and splits filled in,
    /// config and checkpoint hashes left for the caller.
    pub fn for_dataset(ds: &Dataset, seed: u64) -> Self {
        let spec = ds.spec();
        ReportMeta {
            seed,
            config: serde_json::Value::Null,
            checkpoint_sha256: BTreeMap::new(),
            num_classes: spec.num_classes(),
            base_classes: spec.base_classes().collect(),
            novel_classes: spec.novel_classes().collect(),
            train_per_class: spec.train_per_class,
            test_per_class: spec.test_per_class,
        }
    }
}

/// Base/novel accuracy pair with their harmonic mean, all in percent.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub base_acc: f64,
    pub novel_acc: f64,
    pub harmonic_mean: f64,
    pub meta: ReportMeta,
}

impl EvalReport {
    /// Builds a report, deriving the harmonic mean from the two accuracies.
    /// A zero accuracy gets the limit value 0 instead of a domain error so
    /// that a collapsed run still produces a well-formed report.
    pub fn new(base_acc: f64, novel_acc: f64, meta: ReportMeta) -> Result<Self> {
        for (name, v) in [("base", base_acc), ("novel", novel_acc)] {
            if !v.is_finite() || !(0.0..=100.0).contains(&v) {
                return Err(Error::contract(format!(
                    "{name} accuracy {v} outside [0, 100]"
                )));
            }
        }
        let hm = if base_acc == 0.0 || novel_acc == 0.0 {
            0.0
        } else {
            harmonic_mean(base_acc, novel_acc)?
        };
        Ok(EvalReport { base_acc, novel_acc, harmonic_mean: hm, meta })
    }

    /// Re-checks the internal consistency invariant (useful after
    /// deserializing a report file).
    pub fn validate(&self) -> Result<()> {
        let expect = if self.base_acc == 0.0 || self.novel_acc == 0.0 {
            0.0
        } else {
            harmonic_mean(self.base_acc, self.novel_acc)?
        };
        if (self.harmonic_mean - expect).abs() > 0.01 {
            return Err(Error::contract(format!(
                "harmonic mean {} inconsistent with accuracies ({}, {})",
                self.harmonic_mean, self.base_acc, self.novel_acc
            )));
        }
        Ok(())
    }
}

/// Plain vs boosted template-free zero-shot accuracy over the full class
/// list, both in percent. Both numbers are always reported; no winner is
/// implied.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ZeroShotReport {
    pub plain_acc: f64,
    pub boosted_acc: f64,
    pub meta: ReportMeta,
}

/// Hex SHA-256 of a file's contents.
pub fn file_sha256(path: &Path) -> Result<String> {
    let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 8192];
    loop {
        let n = f.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

// ── token rows ───────────────────────────────────────────────────────

/// One caption per class consisting of the bare class token (the
/// template-free text content used by prompt-tuned classifiers: prompts
/// supply the context, the class token supplies the identity).
pub fn class_token_rows(vocab: &Vocab, names: &[String]) -> Result<Vec<Vec<u32>>> {
    names.iter().map(|n| vocab.tokenize(n)).collect()
}

/// One caption per class rendered through a library template (the
/// hand-written-prompt path used by plain zero-shot classifiers).
pub fn template_rows(
    vocab: &Vocab,
    template_id: &str,
    names: &[String],
) -> Result<Vec<Vec<u32>>> {
    let t = TemplateSpec::by_id(template_id)?;
    names.iter().map(|n| vocab.tokenize(&t.render(n))).collect()
}

// ── feature extraction ───────────────────────────────────────────────

/// Encodes token rows into l2-normalized text features `[rows × d_shared]`
/// with everything bound as constants. All rows must share one length.
pub fn text_features(
    model: &MiniClip,
    rows: &[Vec<u32>],
    boosting: Option<&PromptSet>,
    adapting: Option<&PromptSet>,
) -> Result<Tensor> {
    if rows.is_empty() {
        return Err(Error::contract("text_features needs at least one row"));
    }
    let cfg = model.cfg();
    // `allow_unfrozen_boosting` is safe here: the set is bound as a constant
    // regardless, so an evaluation mid-Phase-I cannot train it by accident.
    let layout = cascade(boosting, adapting, Branch::Text, cfg.depth, rows[0].len(), true)?;
    let mut out = Vec::with_capacity(rows.len() * model.d_shared());
    for chunk in rows.chunks(EVAL_CHUNK) {
        let mut tape = Tape::new();
        let mut mb = ModelBinder::new(model, false);
        let mut pb = PromptBinder::new(boosting, adapting).with_training(false, false);
        let mut provider = pb.provider();
        let refs: Vec<&[u32]> = chunk.iter().map(|r| r.as_slice()).collect();
        let (f, _) = encode_text(&mut tape, &mut mb, &layout, &mut provider, &refs)?;
        out.extend_from_slice(tape.value(f).data());
    }
    Ok(Tensor::new(vec![rows.len(), model.d_shared()], out))
}

/// Encodes images into l2-normalized features `[images × d_shared]` with
/// everything bound as constants, in bounded-memory chunks.
pub fn image_features(
    model: &MiniClip,
    images: &[&Tensor],
    boosting: Option<&PromptSet>,
    adapting: Option<&PromptSet>,
) -> Result<Tensor> {
    if images.is_empty() {
        return Err(Error::contract("image_features needs at least one image"));
    }
    let cfg = model.cfg();
    let content_len = 1 + cfg.num_patches();
    let layout = cascade(boosting, adapting, Branch::Vision, cfg.depth, content_len, true)?;
    let mut out = Vec::with_capacity(images.len() * model.d_shared());
    for chunk in images.chunks(EVAL_CHUNK) {
        let mut tape = Tape::new();
        let mut mb = ModelBinder::new(model, false);
        let mut pb = PromptBinder::new(boosting, adapting).with_training(false, false);
        let mut provider = pb.provider();
        let (f, _) = encode_image(&mut tape, &mut mb, &layout, &mut provider, chunk)?;
        out.extend_from_slice(tape.value(f).data());
    }
    Ok(Tensor::new(vec![images.len(), model.d_shared()], out))
}

/// Similarity logits `cos(image, text) / τ` as a plain `[B × C]` tensor.
/// Feature rows must already be l2-normalized (they are, coming out of the
/// encoders), making the dot product a cosine.
pub fn cosine_logits(
    image_features: &Tensor,
    text_features: &Tensor,
    tau: f64,
) -> Result<Tensor> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::contract(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let (b, d) = image_features.dims2()?;
    let (c, d2) = text_features.dims2()?;
    if d != d2 {
        return Err(Error::contract(format!(
            "feature widths differ: images {d}, texts {d2}"
        )));
    }
    let mut out = Vec::with_capacity(b * c);
    for i in 0..b {
        let xi = &image_features.data()[i * d..(i + 1) * d];
        for j in 0..c {
            let yj = &text_features.data()[j * d..(j + 1) * d];
            let s: f64 = xi.iter().zip(yj).map(|(a, b)| a * b).sum();
            out.push(s / tau);
        }
    }
    Ok(Tensor::new(vec![b, c], out))
}

/// Index of the nearest text row for each image row (cosine, first max
/// wins). Temperature does not change the argmax, so none is applied.
pub fn nearest_text(image_features: &Tensor, text_features: &Tensor) -> Result<Vec<usize>> {
    let logits = cosine_logits(image_features, text_features, 1.0)?;
    crate::model::argmax_rows(&logits)
}

// ── accuracy heads ───────────────────────────────────────────────────

/// Fraction of `indices` whose nearest text row maps back to the image's
/// true label. `label_space[j]` gives the class id of text row `j`: passing
/// a restricted space evaluates the restricted-label-space protocol, the
/// full class list evaluates ordinary zero-shot.
pub fn accuracy_with_features(
    ds: &Dataset,
    indices: &[usize],
    label_space: &[usize],
    image_feats: &Tensor,
    text_feats: &Tensor,
) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::contract("accuracy over an empty index set is undefined"));
    }
    let (rows, _) = image_feats.dims2()?;
    if rows != indices.len() {
        return Err(Error::contract(format!(
            "feature rows {rows} do not match {} indices",
            indices.len()
        )));
    }
    let (c, _) = text_feats.dims2()?;
    if c != label_space.len() {
        return Err(Error::contract(format!(
            "text rows {c} do not match label space of {}",
            label_space.len()
        )));
    }
    let preds = nearest_text(image_feats, text_feats)?;
    let correct = indices
        .iter()
        .zip(&preds)
        .filter(|&(&idx, &p)| label_space[p] == ds.label(idx))
        .count();
    Ok(correct as f64 / indices.len() as f64)
}

/// End-to-end zero-shot accuracy (fraction in [0,1]) of `model` on the given
/// dataset indices, classifying into `label_space`.
///
/// `template_id` picks the text content: `Some(id)` renders each class name
/// through that caption template (the hand-written-prompt convention),
/// `None` uses the bare class token (the prompt-tuned convention — any
/// context comes from the bound prompt sets).
pub fn zero_shot_accuracy(
    model: &MiniClip,
    ds: &Dataset,
    indices: &[usize],
    label_space: &[usize],
    template_id: Option<&str>,
    boosting: Option<(&PromptSet, &PromptSet)>,
) -> Result<f64> {
    let vocab = Vocab::standard();
    let names: Vec<String> = label_space
        .iter()
        .map(|&c| {
            ds.spec().class_names.get(c).cloned().ok_or_else(|| {
                Error::contract(format!("label space names class {c} beyond the domain"))
            })
        })
        .collect::<Result<_>>()?;
    let rows = match template_id {
        Some(id) => template_rows(&vocab, id, &names)?,
        None => class_token_rows(&vocab, &names)?,
    };
    let (boost_text, boost_vision) = match boosting {
        Some((t, v)) => (Some(t), Some(v)),
        None => (None, None),
    };
    let tf = text_features(model, &rows, boost_text, None)?;
    let imgs: Vec<&Tensor> = indices.iter().map(|&i| ds.image(i)).collect();
    let vf = image_features(model, &imgs, boost_vision, None)?;
    accuracy_with_features(ds, indices, label_space, &vf, &tf)
}

/// Template-free zero-shot evaluation of the full class list on the test
/// split, with and without boosting prompts.
///
/// Both arms run the identical computation — bare class tokens, no
/// templates — differing only in the bound prompt sets, so `boosting =
/// None` degenerates to two copies of the same number. Boosting sets must
/// be frozen: this is a deployment-path evaluation, not a training probe.
pub fn eval_zero_shot_with_boosting(
    model: &MiniClip,
    boosting: Option<(&PromptSet, &PromptSet)>,
    ds: &Dataset,
    seed: u64,
) -> Result<ZeroShotReport> {
    if let Some((t, v)) = boosting {
        if !t.frozen() || !v.frozen() {
            return Err(Error::contract(
                "zero-shot evaluation requires frozen boosting sets",
            ));
        }
    }
    let all: Vec<usize> = (0..ds.spec().num_classes()).collect();
    let test = ds.all_test();
    let plain = zero_shot_accuracy(model, ds, &test, &all, None, None)?;
    let boosted = zero_shot_accuracy(model, ds, &test, &all, None, boosting)?;
    Ok(ZeroShotReport {
        plain_acc: plain * 100.0,
        boosted_acc: boosted * 100.0,
        meta: ReportMeta::for_dataset(ds, seed),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{generate_domain, DomainSpec};
    use crate::model::EncoderConfig;
    use crate::prompts::PromptRole;
    use crate::tokenizer::class_slot_name;

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
            train_per_class: 3,
            test_per_class: 2,
        }
    }

    fn micro_model() -> MiniClip {
        let cfg = EncoderConfig {
            depth: 2,
            width: 8,
            heads: 2,
            max_seq: 24,
            patch_size: 4,
            image_size: 8,
            vocab_size: Vocab::standard().len(),
        };
        MiniClip::init(cfg, 6, 7).unwrap()
    }

    #[test]
    fn harmonic_mean_matches_reference_triples() {
        assert!((harmonic_mean(84.26, 76.10).unwrap() - 79.97).abs() < 0.01);
        assert!((harmonic_mean(86.11, 79.54).unwrap() - 82.69).abs() < 0.01);
        assert!((harmonic_mean(55.5, 55.5).unwrap() - 55.5).abs() < 1e-12);
        assert!(harmonic_mean(0.0, 50.0).is_err());
        assert!(harmonic_mean(-3.0, 50.0).is_err());
        assert!(harmonic_mean(50.0, 101.0).is_err());
        assert!(harmonic_mean(f64::NAN, 50.0).is_err());
    }

    #[test]
    fn report_constructor_enforces_consistency() {
        let ds = generate_domain(&micro_spec(), 0).unwrap();
        let meta = ReportMeta::for_dataset(&ds, 0);
        let r = EvalReport::new(80.0, 60.0, meta.clone()).unwrap();
        assert!((r.harmonic_mean - 2.0 * 80.0 * 60.0 / 140.0).abs() < 1e-12);
        r.validate().unwrap();
        // Collapsed run: zero accuracy takes the limit value, not an error.
        let z = EvalReport::new(50.0, 0.0, meta.clone()).unwrap();
        assert_eq!(z.harmonic_mean, 0.0);
        z.validate().unwrap();
        assert!(EvalReport::new(120.0, 50.0, meta).is_err());
        let mut bad = r;
        bad.harmonic_mean += 1.0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn sha256_matches_known_vectors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty");
        std::fs::write(&p, b"").unwrap();
        assert_eq!(
            file_sha256(&p).unwrap(),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
        let q = dir.path().join("abc");
        std::fs::write(&q, b"abc").unwrap();
        assert_eq!(
            file_sha256(&q).unwrap(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        assert!(file_sha256(&dir.path().join("missing")).is_err());
    }

    #[test]
    fn nearest_text_and_accuracy_on_hand_features() {
        let ds = generate_domain(&micro_spec(), 0).unwrap();
        // Two test images of classes 0 and 1 with one-hot "features".
        let idx = vec![ds.test_indices(0)[0], ds.test_indices(1)[0]];
        let imgs = Tensor::new(vec![2, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let texts = Tensor::new(
            vec![2, 3],
            vec![0.0, 1.0, 0.0, 1.0, 0.0, 0.0], // row 0 ↔ class 1, row 1 ↔ class 0
        );
        assert_eq!(nearest_text(&imgs, &texts).unwrap(), vec![1, 0]);
        let acc =
            accuracy_with_features(&ds, &idx, &[1, 0], &imgs, &texts).unwrap();
        assert!((acc - 1.0).abs() < 1e-12, "swapped label space still resolves");
        let acc =
            accuracy_with_features(&ds, &idx, &[0, 1], &imgs, &texts).unwrap();
        assert_eq!(acc, 0.0);
    }

    #[test]
    fn feature_helpers_chunk_invariantly_and_normalize() {
        let model = micro_model();
        let ds = generate_domain(&micro_spec(), 1).unwrap();
        let imgs: Vec<&Tensor> = (0..ds.num_images()).map(|i| ds.image(i)).collect();
        assert!(imgs.len() > EVAL_CHUNK, "exercise the chunked path");
        let all = image_features(&model, &imgs, None, None).unwrap();
        let head = image_features(&model, &imgs[..5], None, None).unwrap();
        assert_eq!(&all.data()[..5 * 6], head.data());
        let (rows, d) = all.dims2().unwrap();
        for r in 0..rows {
            let n: f64 = all.data()[r * d..(r + 1) * d]
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_shot_report_degenerates_without_boosting() {
        let model = micro_model();
        let ds = generate_domain(&micro_spec(), 2).unwrap();
        let r = eval_zero_shot_with_boosting(&model, None, &ds, 0).unwrap();
        assert_eq!(r.plain_acc, r.boosted_acc, "identical computation, identical bits");
        assert_eq!(r.meta.num_classes, 4);
        assert_eq!(r.meta.base_classes, vec![0, 1]);
        assert_eq!(r.meta.test_per_class, 2);
    }

    #[test]
    fn zero_shot_rejects_unfrozen_boosting() {
        let model = micro_model();
        let ds = generate_domain(&micro_spec(), 3).unwrap();
        let t = PromptSet::init(PromptRole::Boosting, Branch::Text, 2, 2, 8, 0).unwrap();
        let v = PromptSet::init(PromptRole::Boosting, Branch::Vision, 2, 2, 8, 0).unwrap();
        assert!(eval_zero_shot_with_boosting(&model, Some((&t, &v)), &ds, 0).is_err());
        let (mut t, mut v) = (t, v);
        t.freeze();
        v.freeze();
        let r = eval_zero_shot_with_boosting(&model, Some((&t, &v)), &ds, 0).unwrap();
        assert!(r.plain_acc >= 0.0 && r.boosted_acc <= 100.0);
    }

    #[test]
    fn templated_and_bare_rows_tokenize_to_uniform_lengths() {
        let vocab = Vocab::standard();
        let names: Vec<String> = (0..4).map(class_slot_name).collect();
        let bare = class_token_rows(&vocab, &names).unwrap();
        assert!(bare.iter().all(|r| r.len() == 1));
        let templated = template_rows(&vocab, "plain", &names).unwrap();
        assert!(templated.iter().all(|r| r.len() == templated[0].len()));
        assert!(templated[0].len() > 1);
    }
}
