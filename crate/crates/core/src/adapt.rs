//! Phase II: few-shot supervised tuning of adapting prompts cascaded with
//! frozen boosting prompts, under four baseline prompt layouts.
//!
//! Every variant minimizes the same plain cross-entropy over zero-shot
//! probabilities — all four funnel through the single loss call in
//! [`run_adapt_phase`], so adding boosting prompts changes the encoder
//! inputs, never the objective. The variants differ only in which tensors
//! train and how text features are produced:
//!
//! * [`AdaptVariant::TextShallow`] — one text prompt block at layer 0,
//!   propagated through the stack.
//! * [`AdaptVariant::ConditionedTextShallow`] — TextShallow plus a meta-net
//!   that shifts the prompt block per image.
//! * [`AdaptVariant::CoupledDeep`] — deep text blocks; vision blocks are
//!   *generated* from them through per-layer linear maps, so the only
//!   independent parameters are text blocks and maps.
//! * [`AdaptVariant::IndependentDeep`] — deep text and vision blocks, each
//!   trained independently (cross-entropy only; no extra regularizers).

use std::collections::HashMap;
use std::fmt;

use caspl_autodiff::{NodeId, Parameter, Sgd, Tape, Tensor};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::domain::Dataset;
use crate::error::{Error, Result};
use crate::eval::{
    accuracy_with_features, class_token_rows, image_features, text_features, EvalReport,
    ReportMeta,
};
use crate::model::{
    encode_image, encode_text, scaled_logits, MiniClip, ModelBinder, PromptBinder,
    WEIGHT_INIT_STD,
};
use crate::prompts::{cascade, Branch, CascadeLayout, PromptRole, PromptSet, SegmentKind};
use crate::rng::{derive_seed, seeded};
use crate::tokenizer::Vocab;

// ── variants and configuration ───────────────────────────────────────

/// The four baseline prompt layouts the adapting phase can run under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdaptVariant {
    TextShallow,
    ConditionedTextShallow,
    CoupledDeep,
    IndependentDeep,
}

impl AdaptVariant {
    pub const ALL: [AdaptVariant; 4] = [
        AdaptVariant::TextShallow,
        AdaptVariant::ConditionedTextShallow,
        AdaptVariant::CoupledDeep,
        AdaptVariant::IndependentDeep,
    ];

    pub fn id(self) -> &'static str {
        match self {
            AdaptVariant::TextShallow => "text-shallow",
            AdaptVariant::ConditionedTextShallow => "conditioned-text-shallow",
            AdaptVariant::CoupledDeep => "coupled-deep",
            AdaptVariant::IndependentDeep => "independent-deep",
        }
    }

    /// True for the layouts that carry vision-branch adapting prompts.
    pub fn has_vision_prompts(self) -> bool {
        matches!(self, AdaptVariant::CoupledDeep | AdaptVariant::IndependentDeep)
    }
}

impl fmt::Display for AdaptVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl std::str::FromStr for AdaptVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AdaptVariant::ALL
            .into_iter()
            .find(|v| v.id() == s)
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown adapt variant `{s}` (expected one of: {})",
                    AdaptVariant::ALL.map(|v| v.id()).join(", ")
                ))
            })
    }
}

/// Adapting-phase settings. [`AdaptConfig::for_variant`] fills the
/// per-variant training recipe; deviate only deliberately.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptConfig {
    pub variant: AdaptVariant,
    /// Adapting text tokens per fresh layer.
    pub text_length: usize,
    /// Adapting vision tokens per fresh layer (0 for text-only layouts;
    /// must equal `text_length` for CoupledDeep, whose vision blocks are
    /// images of the text blocks).
    pub vision_length: usize,
    /// Layers carrying fresh adapting blocks (1 = shallow/propagating).
    pub depth: usize,
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Re-evaluate base/novel accuracy every this many epochs (the final
    /// epoch is always evaluated); rows in between repeat the last
    /// measurement.
    pub eval_every: usize,
    /// Co-train the boosting prompts instead of keeping them frozen (the
    /// learnability ablation). Requires boosting sets to be present.
    pub train_boosting: bool,
    pub seed: u64,
}

impl AdaptConfig {
    /// The default training recipe for a variant on an encoder of the given
    /// depth ("all layers" for the deep variants).
    pub fn for_variant(variant: AdaptVariant, encoder_depth: usize) -> Self {
        let (text_length, vision_length, depth, lr, epochs) = match variant {
            AdaptVariant::TextShallow => (8, 0, 1, 0.002, 50),
            AdaptVariant::ConditionedTextShallow => (8, 0, 1, 0.002, 10),
            AdaptVariant::CoupledDeep => (8, 8, encoder_depth, 0.0035, 5),
            AdaptVariant::IndependentDeep => (8, 8, encoder_depth, 0.0025, 20),
        };
        AdaptConfig {
            variant,
            text_length,
            vision_length,
            depth,
            lr,
            momentum: 0.9,
            epochs,
            batch_size: 32,
            eval_every: 1,
            train_boosting: false,
            seed: 0,
        }
    }

    pub fn validate(&self, encoder_depth: usize) -> Result<()> {
        if self.text_length == 0 {
            return Err(Error::config("adapting text length must be positive"));
        }
        if self.depth == 0 || self.depth > encoder_depth {
            return Err(Error::config(format!(
                "adapting depth {} outside 1..={encoder_depth}",
                self.depth
            )));
        }
        match self.variant {
            AdaptVariant::TextShallow | AdaptVariant::ConditionedTextShallow => {
                if self.vision_length != 0 {
                    return Err(Error::config(format!(
                        "{} is a text-only layout; vision length must be 0",
                        self.variant
                    )));
                }
                if self.depth != 1 {
                    return Err(Error::config(format!(
                        "{} is a shallow layout; depth must be 1",
                        self.variant
                    )));
                }
            }
            AdaptVariant::CoupledDeep => {
                if self.vision_length != self.text_length {
                    return Err(Error::config(format!(
                        "coupled-deep generates vision blocks from text blocks; lengths must \
                         match (text {}, vision {})",
                        self.text_length, self.vision_length
                    )));
                }
            }
            AdaptVariant::IndependentDeep => {
                if self.vision_length == 0 {
                    return Err(Error::config(
                        "independent-deep needs a positive vision length",
                    ));
                }
            }
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config(format!("adapt lr must be positive, got {}", self.lr)));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::config(
                "adapt epochs, batch size, and eval_every must be positive",
            ));
        }
        Ok(())
    }
}

// ── few-shot sampling ────────────────────────────────────────────────

/// Shot budget for the supervised phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FewShotConfig {
    /// Train images per class.
    pub shots: usize,
    pub seed: u64,
    /// Restrict sampling to base classes (the base-to-novel protocol).
    /// Disable only for source-domain training in the generalization
    /// experiments, where all classes are fair game.
    pub base_only: bool,
}

impl FewShotConfig {
    pub fn new(shots: usize, seed: u64) -> Self {
        FewShotConfig { shots, seed, base_only: true }
    }

    pub fn validate(&self) -> Result<()> {
        if ![1, 2, 4, 8, 16].contains(&self.shots) {
            return Err(Error::config(format!(
                "shots must be one of 1, 2, 4, 8, 16; got {}",
                self.shots
            )));
        }
        Ok(())
    }
}

/// Draws exactly `shots` train images per eligible class, deterministically
/// under the seed. Returns dataset indices in class-major order.
pub fn sample_few_shot(ds: &Dataset, cfg: &FewShotConfig) -> Result<Vec<usize>> {
    cfg.validate()?;
    let spec = ds.spec();
    let classes: Vec<usize> = if cfg.base_only {
        spec.base_classes().collect()
    } else {
        (0..spec.num_classes()).collect()
    };
    let mut picked = Vec::with_capacity(classes.len() * cfg.shots);
    for &c in &classes {
        let mut idx = ds.train_indices(c);
        if idx.len() < cfg.shots {
            return Err(Error::config(format!(
                "class {c} (`{}`) has {} train images, fewer than {} shots",
                spec.class_names[c],
                idx.len(),
                cfg.shots
            )));
        }
        idx.shuffle(&mut seeded(cfg.seed, &format!("fewshot/class{c}")));
        picked.extend_from_slice(&idx[..cfg.shots]);
    }
    Ok(picked)
}

// ── meta-net (conditioned variant) ───────────────────────────────────

/// Two affine layers with a GELU between: image feature (`d_shared`) in,
/// per-token prompt offset (encoder width) out. Hidden width is
/// `d_shared/2`.
#[derive(Debug, Clone)]
pub struct MetaNet {
    w1: Parameter,
    b1: Parameter,
    w2: Parameter,
    b2: Parameter,
}

/// Tape bindings of a [`MetaNet`], one per tape.
pub struct MetaNetNodes {
    w1: NodeId,
    b1: NodeId,
    w2: NodeId,
    b2: NodeId,
}

impl MetaNet {
    pub const PARAM_IDS: [&'static str; 4] =
        ["meta_net.w1", "meta_net.b1", "meta_net.w2", "meta_net.b2"];

    pub fn init(d_in: usize, d_out: usize, seed: u64) -> Result<Self> {
        if d_in == 0 || d_out == 0 {
            return Err(Error::config("meta-net dimensions must be positive"));
        }
        let hidden = (d_in / 2).max(1);
        let normal = Normal::new(0.0, WEIGHT_INIT_STD).expect("valid init std");
        let mut rng = seeded(seed, "meta_net/init");
        let mut draw = |rows: usize, cols: usize| {
            Tensor::new(
                vec![rows, cols],
                (0..rows * cols).map(|_| normal.sample(&mut rng)).collect::<Vec<f64>>(),
            )
        };
        Ok(MetaNet {
            w1: Parameter::new("meta_net.w1", draw(d_in, hidden), true),
            b1: Parameter::new("meta_net.b1", Tensor::new(vec![1, hidden], vec![0.0; hidden]), true),
            w2: Parameter::new("meta_net.w2", draw(hidden, d_out), true),
            b2: Parameter::new("meta_net.b2", Tensor::new(vec![1, d_out], vec![0.0; d_out]), true),
        })
    }

    /// All-zero weights: the conditioned shift becomes identically zero and
    /// the variant degenerates to TextShallow.
    pub fn zeroed(d_in: usize, d_out: usize) -> Result<Self> {
        let mut m = Self::init(d_in, d_out, 0)?;
        for p in [&mut m.w1, &mut m.b1, &mut m.w2, &mut m.b2] {
            let shape = p.value.shape().to_vec();
            let len = p.value.len();
            p.value = Tensor::new(shape, vec![0.0; len]);
        }
        Ok(m)
    }

    pub fn parameters(&self) -> Vec<Parameter> {
        vec![self.w1.clone(), self.b1.clone(), self.w2.clone(), self.b2.clone()]
    }

    pub fn set_value(&mut self, id: &str, value: Tensor) -> Result<()> {
        let slot = match id {
            "meta_net.w1" => &mut self.w1,
            "meta_net.b1" => &mut self.b1,
            "meta_net.w2" => &mut self.w2,
            "meta_net.b2" => &mut self.b2,
            _ => return Err(Error::contract(format!("`{id}` is not a meta-net parameter"))),
        };
        if value.shape() != slot.value.shape() {
            return Err(Error::contract(format!(
                "meta-net value shape {:?} does not match {:?} for `{id}`",
                value.shape(),
                slot.value.shape()
            )));
        }
        slot.value = value;
        Ok(())
    }

    /// Binds the four tensors onto a tape (as params when `train`).
    pub fn bind(&self, tape: &mut Tape, train: bool) -> Result<MetaNetNodes> {
        let mut node = |p: &Parameter| -> Result<NodeId> {
            Ok(if train {
                tape.param(&p.id, p.value.clone())?
            } else {
                tape.constant(p.value.clone())
            })
        };
        Ok(MetaNetNodes {
            w1: node(&self.w1)?,
            b1: node(&self.b1)?,
            w2: node(&self.w2)?,
            b2: node(&self.b2)?,
        })
    }

    /// The per-instance prompt offset: `gelu(x·W1 + b1)·W2 + b2`, mapping
    /// `[B × d_shared]` image features to `[B × width]` offsets. Gradients
    /// flow into the net (and onward into anything feeding `x`).
    pub fn conditioned_shift(
        tape: &mut Tape,
        nodes: &MetaNetNodes,
        image_features: NodeId,
    ) -> Result<NodeId> {
        let h = tape.matmul(image_features, nodes.w1)?;
        let h = tape.add_row(h, nodes.b1)?;
        let h = tape.gelu(h);
        let o = tape.matmul(h, nodes.w2)?;
        Ok(tape.add_row(o, nodes.b2)?)
    }

    /// Offsets as plain values (inference path; same kernels, throwaway
    /// tape).
    pub fn offsets(&self, image_features: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let nodes = self.bind(&mut tape, false)?;
        let x = tape.constant(image_features.clone());
        let o = Self::conditioned_shift(&mut tape, &nodes, x)?;
        Ok(tape.value(o).clone())
    }
}

// ── coupling projector (coupled-deep variant) ────────────────────────

/// One linear map per fresh layer turning a text adapting block into the
/// vision adapting block for that layer. Vision prompts thus stay a
/// deterministic function of text prompts throughout training.
#[derive(Debug, Clone)]
pub struct CouplingProjector {
    maps: Vec<Parameter>,
}

impl CouplingProjector {
    pub fn init(depth: usize, width: usize, seed: u64) -> Result<Self> {
        if depth == 0 || width == 0 {
            return Err(Error::config("projector depth and width must be positive"));
        }
        let normal = Normal::new(0.0, WEIGHT_INIT_STD).expect("valid init std");
        let maps = (0..depth)
            .map(|l| {
                let mut rng = seeded(seed, &format!("projector/l{l}"));
                let data =
                    (0..width * width).map(|_| normal.sample(&mut rng)).collect::<Vec<f64>>();
                Parameter::new(Self::param_id(l), Tensor::new(vec![width, width], data), true)
            })
            .collect();
        Ok(CouplingProjector { maps })
    }

    pub fn param_id(layer: usize) -> String {
        format!("projector.l{layer:02}")
    }

    pub fn depth(&self) -> usize {
        self.maps.len()
    }

    pub fn map(&self, layer: usize) -> Option<&Tensor> {
        self.maps.get(layer).map(|p| &p.value)
    }

    pub fn parameters(&self) -> Vec<Parameter> {
        self.maps.clone()
    }

    pub fn set_value(&mut self, id: &str, value: Tensor) -> Result<()> {
        let slot = self
            .maps
            .iter_mut()
            .find(|p| p.id == id)
            .ok_or_else(|| Error::contract(format!("`{id}` is not a projector map")))?;
        if value.shape() != slot.value.shape() {
            return Err(Error::contract(format!(
                "projector value shape {:?} does not match {:?} for `{id}`",
                value.shape(),
                slot.value.shape()
            )));
        }
        slot.value = value;
        Ok(())
    }

    /// Materializes the vision adapting set implied by the given text set
    /// (`vision_block[l] = text_block[l] · map[l]`), as plain values.
    pub fn generate(&self, text_set: &PromptSet) -> Result<PromptSet> {
        if text_set.branch() != Branch::Text {
            return Err(Error::contract("projector generates from a text set"));
        }
        if text_set.depth() != self.depth() {
            return Err(Error::contract(format!(
                "projector depth {} does not match text set depth {}",
                self.depth(),
                text_set.depth()
            )));
        }
        let mut out = PromptSet::init(
            PromptRole::Adapting,
            Branch::Vision,
            text_set.length(),
            text_set.depth(),
            text_set.dim(),
            0,
        )?;
        for l in 0..self.depth() {
            let mut tape = Tape::new();
            let t = tape.constant(text_set.block(l).expect("within depth").clone());
            let m = tape.constant(self.maps[l].value.clone());
            let v = tape.matmul(t, m)?;
            out.update_block(l, tape.value(v).clone())?;
        }
        Ok(out)
    }
}

// ── outcome types ────────────────────────────────────────────────────

/// One row of the adapting curve. `train_loss` is the image-weighted mean
/// cross-entropy over the epoch's batches; accuracies are test-split
/// measurements taken after the epoch (re-measured per `eval_every`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub base_acc: f64,
    pub novel_acc: f64,
}

/// Everything the adapting phase produced. Prompt sets come back frozen;
/// `boosting` echoes the cascaded sets (retrained copies when the
/// learnability ablation was on, otherwise bit-identical to the inputs).
#[derive(Debug, Clone)]
pub struct AdaptOutcome {
    pub variant: AdaptVariant,
    pub text_adapting: PromptSet,
    /// Trained directly (IndependentDeep) or materialized through the
    /// projector (CoupledDeep); absent for text-only layouts.
    pub vision_adapting: Option<PromptSet>,
    pub projector: Option<CouplingProjector>,
    pub meta_net: Option<MetaNet>,
    pub boosting: Option<(PromptSet, PromptSet)>,
    pub epochs: Vec<AdaptEpoch>,
    /// The exact parameter ids that trained, audited every step.
    pub trainable_ids: Vec<String>,
}

// ── the adapting phase ───────────────────────────────────────────────

/// Runs the supervised phase: few-shot cross-entropy on base classes, only
/// the variant's declared parameters training. Boosting sets, when present,
/// must be frozen unless `cfg.train_boosting` opts into the learnability
/// ablation (in which case thawed copies are co-trained and returned).
pub fn run_adapt_phase(
    model: &MiniClip,
    boosting: Option<(&PromptSet, &PromptSet)>,
    ds: &Dataset,
    few: &FewShotConfig,
    cfg: &AdaptConfig,
) -> Result<AdaptOutcome> {
    let ecfg = model.cfg();
    cfg.validate(ecfg.depth)?;
    few.validate()?;
    if !model.is_frozen() {
        return Err(Error::contract(
            "the backbone must be frozen before the adapting phase (only prompts may train)",
        ));
    }
    if let Some((t, v)) = boosting {
        if (!t.frozen() || !v.frozen()) && !cfg.train_boosting {
            return Err(Error::contract(
                "cascade requires frozen boosting sets (set train_boosting for the \
                 learnability ablation)",
            ));
        }
        if t.branch() != Branch::Text || v.branch() != Branch::Vision {
            return Err(Error::contract("boosting sets must be (text, vision) in that order"));
        }
    } else if cfg.train_boosting {
        return Err(Error::config("train_boosting set but no boosting prompts supplied"));
    }

    // Owned training state. Under the learnability ablation the boosting
    // copies are thawed so they can re-enter the optimizer.
    let mut boost_text = boosting.map(|(t, _)| {
        if cfg.train_boosting { t.thawed_copy() } else { t.clone() }
    });
    let mut boost_vision = boosting.map(|(_, v)| {
        if cfg.train_boosting { v.thawed_copy() } else { v.clone() }
    });
    let mut text_set = PromptSet::init(
        PromptRole::Adapting,
        Branch::Text,
        cfg.text_length,
        cfg.depth,
        ecfg.width,
        derive_seed(cfg.seed, "adapt/init/text"),
    )?;
    let mut vision_set = if cfg.variant == AdaptVariant::IndependentDeep {
        Some(PromptSet::init(
            PromptRole::Adapting,
            Branch::Vision,
            cfg.vision_length,
            cfg.depth,
            ecfg.width,
            derive_seed(cfg.seed, "adapt/init/vision"),
        )?)
    } else {
        None
    };
    let mut meta = if cfg.variant == AdaptVariant::ConditionedTextShallow {
        Some(MetaNet::init(
            model.d_shared(),
            ecfg.width,
            derive_seed(cfg.seed, "adapt/init/meta"),
        )?)
    } else {
        None
    };
    let mut projector = if cfg.variant == AdaptVariant::CoupledDeep {
        Some(CouplingProjector::init(
            cfg.depth,
            ecfg.width,
            derive_seed(cfg.seed, "adapt/init/projector"),
        )?)
    } else {
        None
    };

    // Few-shot pool, label space, and caption rows (bare class tokens).
    let samples = sample_few_shot(ds, few)?;
    let label_space: Vec<usize> = if few.base_only {
        ds.spec().base_classes().collect()
    } else {
        (0..ds.spec().num_classes()).collect()
    };
    let vocab = Vocab::standard();
    let names: Vec<String> =
        label_space.iter().map(|&c| ds.spec().class_names[c].clone()).collect();
    let class_rows = class_token_rows(&vocab, &names)?;
    let targets: Vec<usize> = samples
        .iter()
        .map(|&i| {
            label_space
                .iter()
                .position(|&c| c == ds.label(i))
                .ok_or_else(|| Error::contract(format!("sample {i} outside the label space")))
        })
        .collect::<Result<_>>()?;

    // Layouts are pure geometry; built once. The unfrozen-cascade override
    // tracks the ablation flag.
    let allow = cfg.train_boosting;
    let text_layout = cascade(
        boost_text.as_ref(),
        Some(&text_set),
        Branch::Text,
        ecfg.depth,
        class_rows[0].len(),
        allow,
    )?;
    let vision_geometry = match cfg.variant {
        AdaptVariant::IndependentDeep => vision_set.clone(),
        AdaptVariant::CoupledDeep => {
            Some(projector.as_ref().expect("coupled").generate(&text_set)?)
        }
        _ => None,
    };
    let vision_layout = cascade(
        boost_vision.as_ref(),
        vision_geometry.as_ref(),
        Branch::Vision,
        ecfg.depth,
        1 + ecfg.num_patches(),
        allow,
    )?;

    // Text-only layouts with frozen boosting never need image gradients:
    // image features are computed once and enter every step as constants.
    let precompute_images = !cfg.variant.has_vision_prompts() && !cfg.train_boosting;
    let sample_images: Vec<&Tensor> = samples.iter().map(|&i| ds.image(i)).collect();
    let sample_feats = if precompute_images {
        Some(image_features(model, &sample_images, boost_vision.as_ref(), None)?)
    } else {
        None
    };

    // The audited trainable set for this variant.
    let mut expected_ids: Vec<String> = match cfg.variant {
        AdaptVariant::TextShallow => vec![text_set.param_id(0)],
        AdaptVariant::ConditionedTextShallow => {
            let mut v = vec![text_set.param_id(0)];
            v.extend(MetaNet::PARAM_IDS.iter().map(|s| s.to_string()));
            v
        }
        AdaptVariant::CoupledDeep => (0..cfg.depth)
            .flat_map(|l| [text_set.param_id(l), CouplingProjector::param_id(l)])
            .collect(),
        AdaptVariant::IndependentDeep => {
            let vs = vision_set.as_ref().expect("independent");
            (0..cfg.depth).flat_map(|l| [text_set.param_id(l), vs.param_id(l)]).collect()
        }
    };
    if cfg.train_boosting {
        let (bt, bv) = (boost_text.as_ref().unwrap(), boost_vision.as_ref().unwrap());
        expected_ids.extend((0..bt.depth()).map(|l| bt.param_id(l)));
        expected_ids.extend((0..bv.depth()).map(|l| bv.param_id(l)));
    }
    expected_ids.sort();

    let mut sgd = Sgd::with_momentum(cfg.lr, cfg.momentum)?;
    let mut curve: Vec<AdaptEpoch> = Vec::with_capacity(cfg.epochs);
    let mut last_acc: Option<(f64, f64)> = None;
    let d_shared = model.d_shared();

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut seeded(cfg.seed, &format!("adapt/epoch{epoch}")));
        let mut loss_sum = 0.0;

        for batch in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let mut mb = ModelBinder::new(model, false);
            let batch_targets: Vec<usize> = batch.iter().map(|&s| targets[s]).collect();

            // Build this batch's logit matrix. CoupledDeep has its own
            // combined path because its text params must be bound exactly
            // once per tape and shared between both encodes.
            let logits = if cfg.variant == AdaptVariant::CoupledDeep {
                let imgs: Vec<&Tensor> = batch.iter().map(|&s| sample_images[s]).collect();
                coupled_logits(
                    &mut tape,
                    &mut mb,
                    &text_layout,
                    &vision_layout,
                    boost_text.as_ref(),
                    boost_vision.as_ref(),
                    &text_set,
                    projector.as_ref().expect("coupled"),
                    cfg.train_boosting,
                    &imgs,
                    &class_rows,
                )?
            } else {
                // Image-feature node: precomputed constants, or a live
                // encode when vision-side tensors are training.
                let vf = if let Some(feats) = &sample_feats {
                    let rows: Vec<f64> = batch
                        .iter()
                        .flat_map(|&s| feats.data()[s * d_shared..(s + 1) * d_shared].to_vec())
                        .collect();
                    tape.constant(Tensor::new(vec![batch.len(), d_shared], rows))
                } else {
                    let imgs: Vec<&Tensor> = batch.iter().map(|&s| sample_images[s]).collect();
                    let mut vb = PromptBinder::new(boost_vision.as_ref(), vision_set.as_ref())
                        .with_training(cfg.train_boosting, true);
                    let mut vprov = vb.provider();
                    let (vf, _) =
                        encode_image(&mut tape, &mut mb, &vision_layout, &mut vprov, &imgs)?;
                    vf
                };
                match cfg.variant {
                    AdaptVariant::ConditionedTextShallow => conditioned_logits(
                        &mut tape,
                        &mut mb,
                        &text_layout,
                        boost_text.as_ref(),
                        &text_set,
                        meta.as_ref().expect("conditioned"),
                        cfg.train_boosting,
                        vf,
                        batch.len(),
                        &class_rows,
                    )?,
                    _ => {
                        let mut tb = PromptBinder::new(boost_text.as_ref(), Some(&text_set))
                            .with_training(cfg.train_boosting, true);
                        let mut tprov = tb.provider();
                        let refs: Vec<&[u32]> =
                            class_rows.iter().map(|r| r.as_slice()).collect();
                        let (tf, _) =
                            encode_text(&mut tape, &mut mb, &text_layout, &mut tprov, &refs)?;
                        drop(tprov);
                        scaled_logits(&mut tape, &mut mb, vf, tf)?
                    }
                }
            };

            // The one objective every variant shares.
            let loss = tape.cross_entropy(logits, &batch_targets)?;
            let loss_val = tape.value(loss).data()[0];
            let grads = tape.backward(loss)?;

            let mut got: Vec<String> = grads.ids().map(String::from).collect();
            got.sort();
            if got != expected_ids {
                return Err(Error::contract(format!(
                    "adapt phase trained {got:?}, expected exactly {expected_ids:?}"
                )));
            }

            // Step and write back into the owned state.
            let mut params: Vec<Parameter> = Vec::new();
            params.extend(adapting_parameters(&text_set));
            if let Some(vs) = &vision_set {
                params.extend(adapting_parameters(vs));
            }
            if let Some(m) = &meta {
                params.extend(m.parameters());
            }
            if let Some(p) = &projector {
                params.extend(p.parameters());
            }
            if cfg.train_boosting {
                params.extend(adapting_parameters(boost_text.as_ref().unwrap()));
                params.extend(adapting_parameters(boost_vision.as_ref().unwrap()));
            }
            sgd.step(params.iter_mut(), &grads)?;
            for p in params {
                write_back(
                    p,
                    &mut text_set,
                    vision_set.as_mut(),
                    meta.as_mut(),
                    projector.as_mut(),
                    boost_text.as_mut(),
                    boost_vision.as_mut(),
                )?;
            }
            loss_sum += loss_val * batch.len() as f64;
        }

        // Test-split accuracies with everything bound as constants.
        if epoch % cfg.eval_every == 0 || epoch == cfg.epochs || last_acc.is_none() {
            let vision_eval = match cfg.variant {
                AdaptVariant::CoupledDeep => {
                    Some(projector.as_ref().expect("coupled").generate(&text_set)?)
                }
                _ => vision_set.clone(),
            };
            let head = TunedHead {
                variant: cfg.variant,
                boost_text: boost_text.as_ref(),
                boost_vision: boost_vision.as_ref(),
                text_set: &text_set,
                vision_set: vision_eval.as_ref(),
                meta: meta.as_ref(),
            };
            let base: Vec<usize> = ds.spec().base_classes().collect();
            let novel: Vec<usize> = ds.spec().novel_classes().collect();
            last_acc = Some((
                head.accuracy(model, ds, &base)?,
                head.accuracy(model, ds, &novel)?,
            ));
        }
        let (base_acc, novel_acc) = last_acc.expect("evaluated at least once");
        curve.push(AdaptEpoch {
            epoch,
            train_loss: loss_sum / samples.len() as f64,
            base_acc,
            novel_acc,
        });
    }

    let vision_out = match cfg.variant {
        AdaptVariant::CoupledDeep => {
            Some(projector.as_ref().expect("coupled").generate(&text_set)?)
        }
        _ => vision_set,
    };
    text_set.freeze();
    let vision_out = vision_out.map(|mut v| {
        v.freeze();
        v
    });
    let boosting_out = match (boost_text, boost_vision) {
        (Some(mut t), Some(mut v)) => {
            t.freeze();
            v.freeze();
            Some((t, v))
        }
        _ => None,
    };
    Ok(AdaptOutcome {
        variant: cfg.variant,
        text_adapting: text_set,
        vision_adapting: vision_out,
        projector,
        meta_net: meta,
        boosting: boosting_out,
        epochs: curve,
        trainable_ids: expected_ids,
    })
}

/// A set's blocks as optimizer parameters. (The name on the tin: every set
/// passed here is in its training phase.)
fn adapting_parameters(set: &PromptSet) -> Vec<Parameter> {
    set.parameters()
}

/// Routes one stepped parameter back into whichever owner declared it.
fn write_back(
    p: Parameter,
    text_set: &mut PromptSet,
    vision_set: Option<&mut PromptSet>,
    meta: Option<&mut MetaNet>,
    projector: Option<&mut CouplingProjector>,
    boost_text: Option<&mut PromptSet>,
    boost_vision: Option<&mut PromptSet>,
) -> Result<()> {
    if p.id.starts_with("meta_net.") {
        return meta
            .ok_or_else(|| Error::contract("meta-net parameter without a meta-net"))?
            .set_value(&p.id, p.value);
    }
    if p.id.starts_with("projector.") {
        return projector
            .ok_or_else(|| Error::contract("projector parameter without a projector"))?
            .set_value(&p.id, p.value);
    }
    for set in [Some(text_set), vision_set, boost_text, boost_vision].into_iter().flatten() {
        if let Some(l) = block_layer(set, &p.id) {
            return set.update_block(l, p.value);
        }
    }
    Err(Error::contract(format!("stepped parameter `{}` has no owner", p.id)))
}

fn block_layer(set: &PromptSet, id: &str) -> Option<usize> {
    (0..set.depth()).find(|&l| set.param_id(l) == id)
}

/// Binds a prompt set's fresh blocks up front (param or constant per
/// `train`), returning a layer-indexed map for closure-based providers.
fn bind_blocks(tape: &mut Tape, set: &PromptSet, train: bool) -> Result<HashMap<usize, NodeId>> {
    (0..set.depth())
        .map(|l| {
            let block = set.block(l).expect("within depth").clone();
            let n = if train && !set.frozen() {
                tape.param(&set.param_id(l), block)?
            } else {
                tape.constant(block)
            };
            Ok((l, n))
        })
        .collect()
}

/// The coupled-deep step: text adapting blocks bound as params exactly once,
/// vision adapting blocks derived on-tape as `text_block · map[layer]`, both
/// encodes sharing those nodes. Gradients reach the text blocks through both
/// branches and the maps through the vision branch.
#[allow(clippy::too_many_arguments)]
fn coupled_logits(
    tape: &mut Tape,
    mb: &mut ModelBinder<'_>,
    text_layout: &CascadeLayout,
    vision_layout: &CascadeLayout,
    boost_text: Option<&PromptSet>,
    boost_vision: Option<&PromptSet>,
    text_set: &PromptSet,
    projector: &CouplingProjector,
    train_boost: bool,
    images: &[&Tensor],
    class_rows: &[Vec<u32>],
) -> Result<NodeId> {
    let boost_t = match boost_text {
        Some(b) => bind_blocks(tape, b, train_boost)?,
        None => HashMap::new(),
    };
    let boost_v = match boost_vision {
        Some(b) => bind_blocks(tape, b, train_boost)?,
        None => HashMap::new(),
    };
    let text_nodes = bind_blocks(tape, text_set, true)?;
    let mut vision_nodes: HashMap<usize, NodeId> = HashMap::new();
    for l in 0..text_set.depth() {
        let m = tape.param(
            &CouplingProjector::param_id(l),
            projector.map(l).expect("projector depth").clone(),
        )?;
        vision_nodes.insert(l, tape.matmul(text_nodes[&l], m)?);
    }

    let missing =
        |kind: &str, layer: usize| Error::contract(format!("no {kind} block at layer {layer}"));
    let vf = {
        let mut prov = |_: &mut Tape, layer: usize, kind: SegmentKind, _: usize| match kind {
            SegmentKind::Adapting => {
                vision_nodes.get(&layer).copied().ok_or_else(|| missing("generated vision", layer))
            }
            SegmentKind::Boosting => {
                boost_v.get(&layer).copied().ok_or_else(|| missing("boosting vision", layer))
            }
            SegmentKind::Content => Err(Error::contract("content is not a prompt segment")),
        };
        encode_image(tape, mb, vision_layout, &mut prov, images)?.0
    };
    let tf = {
        let mut prov = |_: &mut Tape, layer: usize, kind: SegmentKind, _: usize| match kind {
            SegmentKind::Adapting => {
                text_nodes.get(&layer).copied().ok_or_else(|| missing("adapting text", layer))
            }
            SegmentKind::Boosting => {
                boost_t.get(&layer).copied().ok_or_else(|| missing("boosting text", layer))
            }
            SegmentKind::Content => Err(Error::contract("content is not a prompt segment")),
        };
        let refs: Vec<&[u32]> = class_rows.iter().map(|r| r.as_slice()).collect();
        encode_text(tape, mb, text_layout, &mut prov, &refs)?.0
    };
    scaled_logits(tape, mb, vf, tf)
}

/// Conditioned (meta-net) logits: one text encode per image, its adapting
/// block shifted by that image's offset; rows concatenated into the batch
/// logit matrix.
#[allow(clippy::too_many_arguments)]
fn conditioned_logits(
    tape: &mut Tape,
    mb: &mut ModelBinder<'_>,
    layout: &CascadeLayout,
    boost_text: Option<&PromptSet>,
    text_set: &PromptSet,
    meta: &MetaNet,
    train_boost: bool,
    image_feats: NodeId,
    batch_len: usize,
    class_rows: &[Vec<u32>],
) -> Result<NodeId> {
    let boost_nodes = match boost_text {
        Some(b) => bind_blocks(tape, b, train_boost)?,
        None => HashMap::new(),
    };
    let base_block = bind_blocks(tape, text_set, true)?[&0];
    let nodes = meta.bind(tape, true)?;
    let offsets = MetaNet::conditioned_shift(tape, &nodes, image_feats)?;
    let refs: Vec<&[u32]> = class_rows.iter().map(|r| r.as_slice()).collect();
    let mut rows = Vec::with_capacity(batch_len);
    for i in 0..batch_len {
        let off = tape.slice(offsets, 0, i, 1)?;
        let eff = tape.add_row(base_block, off)?;
        let mut prov = |_: &mut Tape, layer: usize, kind: SegmentKind, _: usize| match kind {
            SegmentKind::Adapting => Ok(eff),
            SegmentKind::Boosting => boost_nodes.get(&layer).copied().ok_or_else(|| {
                Error::contract(format!("no boosting text block at layer {layer}"))
            }),
            SegmentKind::Content => Err(Error::contract("content is not a prompt segment")),
        };
        let (tf, _) = encode_text(tape, mb, layout, &mut prov, &refs)?;
        let img_row = tape.slice(image_feats, 0, i, 1)?;
        rows.push(scaled_logits(tape, mb, img_row, tf)?);
    }
    Ok(tape.concat(&rows, 0)?)
}

// ── evaluation ───────────────────────────────────────────────────────

/// The deployed classifier a finished (or mid-training) adapting phase
/// defines: frozen-boosting cascade plus this variant's tuned pieces.
struct TunedHead<'a> {
    variant: AdaptVariant,
    boost_text: Option<&'a PromptSet>,
    boost_vision: Option<&'a PromptSet>,
    text_set: &'a PromptSet,
    vision_set: Option<&'a PromptSet>,
    meta: Option<&'a MetaNet>,
}

impl TunedHead<'_> {
    /// Test-split accuracy (fraction in [0,1]) over the restricted label
    /// space `class_ids`.
    fn accuracy(&self, model: &MiniClip, ds: &Dataset, class_ids: &[usize]) -> Result<f64> {
        let vocab = Vocab::standard();
        let names: Vec<String> =
            class_ids.iter().map(|&c| ds.spec().class_names[c].clone()).collect();
        let rows = class_token_rows(&vocab, &names)?;
        let indices: Vec<usize> =
            class_ids.iter().flat_map(|&c| ds.test_indices(c)).collect();
        let imgs: Vec<&Tensor> = indices.iter().map(|&i| ds.image(i)).collect();
        let vf = image_features(model, &imgs, self.boost_vision, self.vision_set)?;

        if self.variant == AdaptVariant::ConditionedTextShallow {
            let meta = self
                .meta
                .ok_or_else(|| Error::contract("conditioned evaluation without a meta-net"))?;
            let offsets = meta.offsets(&vf)?;
            let (n, width) = offsets.dims2()?;
            let mut correct = 0usize;
            for i in 0..n {
                let mut shifted = self.text_set.thawed_copy();
                let block = shifted.block(0).expect("shallow").clone();
                let (len, w) = block.dims2()?;
                debug_assert_eq!(w, width);
                let mut data = block.data().to_vec();
                for r in 0..len {
                    for c in 0..w {
                        data[r * w + c] += offsets.data()[i * width + c];
                    }
                }
                shifted.update_block(0, Tensor::new(vec![len, w], data))?;
                let tf = text_features(model, &rows, self.boost_text, Some(&shifted))?;
                let d = model.d_shared();
                let img_row =
                    Tensor::new(vec![1, d], vf.data()[i * d..(i + 1) * d].to_vec());
                let pred = crate::eval::nearest_text(&img_row, &tf)?[0];
                if class_ids[pred] == ds.label(indices[i]) {
                    correct += 1;
                }
            }
            return Ok(correct as f64 / indices.len() as f64);
        }

        let tf = text_features(model, &rows, self.boost_text, Some(self.text_set))?;
        accuracy_with_features(ds, &indices, class_ids, &vf, &tf)
    }
}

/// Base-to-novel evaluation of a finished adapting phase: base accuracy
/// over the base label space, novel accuracy over the novel label space,
/// and their harmonic mean, all in percent.
pub fn eval_base_to_novel(
    model: &MiniClip,
    outcome: &AdaptOutcome,
    ds: &Dataset,
    seed: u64,
) -> Result<EvalReport> {
    let head = TunedHead {
        variant: outcome.variant,
        boost_text: outcome.boosting.as_ref().map(|(t, _)| t),
        boost_vision: outcome.boosting.as_ref().map(|(_, v)| v),
        text_set: &outcome.text_adapting,
        vision_set: outcome.vision_adapting.as_ref(),
        meta: outcome.meta_net.as_ref(),
    };
    let base: Vec<usize> = ds.spec().base_classes().collect();
    let novel: Vec<usize> = ds.spec().novel_classes().collect();
    let base_acc = head.accuracy(model, ds, &base)? * 100.0;
    let novel_acc = head.accuracy(model, ds, &novel)? * 100.0;
    EvalReport::new(base_acc, novel_acc, ReportMeta::for_dataset(ds, seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{generate_domain, DomainSpec};
    use crate::model::EncoderConfig;
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

    fn micro_cfg(variant: AdaptVariant) -> AdaptConfig {
        let mut cfg = AdaptConfig::for_variant(variant, 2);
        cfg.epochs = 2;
        cfg.batch_size = 4;
        cfg.text_length = 2;
        if cfg.vision_length > 0 {
            cfg.vision_length = 2;
        }
        cfg
    }

    fn micro_boost(model: &MiniClip, seed: u64) -> (PromptSet, PromptSet) {
        let mut t = PromptSet::init(PromptRole::Boosting, Branch::Text, 2, 2, 8, seed).unwrap();
        let mut v =
            PromptSet::init(PromptRole::Boosting, Branch::Vision, 2, 2, 8, seed + 1).unwrap();
        let _ = model;
        t.freeze();
        v.freeze();
        (t, v)
    }

    #[test]
    fn variant_defaults_match_the_training_recipe() {
        let c = AdaptConfig::for_variant(AdaptVariant::TextShallow, 6);
        assert_eq!((c.text_length, c.vision_length, c.depth), (8, 0, 1));
        assert_eq!((c.lr, c.epochs), (0.002, 50));
        let c = AdaptConfig::for_variant(AdaptVariant::ConditionedTextShallow, 6);
        assert_eq!((c.text_length, c.depth, c.lr, c.epochs), (8, 1, 0.002, 10));
        let c = AdaptConfig::for_variant(AdaptVariant::CoupledDeep, 6);
        assert_eq!((c.text_length, c.vision_length, c.depth), (8, 8, 6));
        assert_eq!((c.lr, c.epochs), (0.0035, 5));
        let c = AdaptConfig::for_variant(AdaptVariant::IndependentDeep, 6);
        assert_eq!((c.text_length, c.vision_length, c.depth), (8, 8, 6));
        assert_eq!((c.lr, c.epochs), (0.0025, 20));
        for v in AdaptVariant::ALL {
            AdaptConfig::for_variant(v, 6).validate(6).unwrap();
            assert_eq!(v, v.id().parse().unwrap());
        }
        assert!("no-such-variant".parse::<AdaptVariant>().is_err());
    }

    #[test]
    fn config_validation_rejects_layout_violations() {
        let mut c = AdaptConfig::for_variant(AdaptVariant::TextShallow, 6);
        c.vision_length = 4;
        assert!(c.validate(6).is_err());
        let mut c = AdaptConfig::for_variant(AdaptVariant::TextShallow, 6);
        c.depth = 2;
        assert!(c.validate(6).is_err());
        let mut c = AdaptConfig::for_variant(AdaptVariant::CoupledDeep, 6);
        c.vision_length = 4;
        assert!(c.validate(6).is_err());
        let mut c = AdaptConfig::for_variant(AdaptVariant::IndependentDeep, 6);
        c.depth = 7;
        assert!(c.validate(6).is_err());
    }

    #[test]
    fn few_shot_sampling_is_exact_deterministic_and_leak_free() {
        let ds = generate_domain(&micro_spec(), 0).unwrap();
        let cfg = FewShotConfig::new(2, 5);
        let a = sample_few_shot(&ds, &cfg).unwrap();
        let b = sample_few_shot(&ds, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 2 * 2, "2 shots × 2 base classes");
        for &i in &a {
            assert!(ds.spec().base_classes().contains(&ds.label(i)), "novel leakage");
        }
        for c in ds.spec().base_classes() {
            let n = a.iter().filter(|&&i| ds.label(i) == c).count();
            assert_eq!(n, 2);
        }
        // Too many shots: the error names the class.
        let err = sample_few_shot(&ds, &FewShotConfig::new(8, 0)).unwrap_err();
        assert!(err.to_string().contains("class 0"), "{err}");
        assert!(sample_few_shot(&ds, &FewShotConfig::new(3, 0)).is_err(), "off-menu K");
        let all = sample_few_shot(&ds, &FewShotConfig { base_only: false, ..cfg }).unwrap();
        assert_eq!(all.len(), 2 * 4);
    }

    #[test]
    fn zeroed_meta_net_degenerates_to_text_shallow() {
        let model = micro_model(3);
        let ds = generate_domain(&micro_spec(), 1).unwrap();
        let (bt, bv) = micro_boost(&model, 100);
        let mut text = PromptSet::init(PromptRole::Adapting, Branch::Text, 2, 1, 8, 7).unwrap();
        text.freeze();
        let base = AdaptOutcome {
            variant: AdaptVariant::TextShallow,
            text_adapting: text.clone(),
            vision_adapting: None,
            projector: None,
            meta_net: None,
            boosting: Some((bt.clone(), bv.clone())),
            epochs: vec![],
            trainable_ids: vec![],
        };
        let conditioned = AdaptOutcome {
            variant: AdaptVariant::ConditionedTextShallow,
            meta_net: Some(MetaNet::zeroed(6, 8).unwrap()),
            ..base.clone()
        };
        let r1 = eval_base_to_novel(&model, &base, &ds, 0).unwrap();
        let r2 = eval_base_to_novel(&model, &conditioned, &ds, 0).unwrap();
        assert_eq!(r1.base_acc, r2.base_acc);
        assert_eq!(r1.novel_acc, r2.novel_acc);
    }

    #[test]
    fn projector_jacobian_is_the_map_itself() {
        let proj = CouplingProjector::init(2, 8, 3).unwrap();
        let text = PromptSet::init(PromptRole::Adapting, Branch::Text, 2, 2, 8, 4).unwrap();
        let v0 = proj.generate(&text).unwrap();
        let h = 1e-6;
        let (layer, token, dim_in) = (1, 0, 3);
        let mut bumped = text.clone();
        let mut data = bumped.block(layer).unwrap().data().to_vec();
        data[token * 8 + dim_in] += h;
        bumped.update_block(layer, Tensor::new(vec![2, 8], data)).unwrap();
        let v1 = proj.generate(&bumped).unwrap();
        // d vision[token, j] / d text[token, k] = map[k, j]; finite
        // differences must recover the map row.
        let map = proj.map(layer).unwrap();
        for j in 0..8 {
            let fd = (v1.block(layer).unwrap().data()[token * 8 + j]
                - v0.block(layer).unwrap().data()[token * 8 + j])
                / h;
            assert!(
                (fd - map.data()[dim_in * 8 + j]).abs() < 1e-6,
                "jacobian mismatch at column {j}"
            );
        }
        // Other tokens' vision rows are untouched.
        let other = 1;
        assert_eq!(
            &v1.block(layer).unwrap().data()[other * 8..(other + 1) * 8],
            &v0.block(layer).unwrap().data()[other * 8..(other + 1) * 8]
        );
    }

    #[test]
    fn text_shallow_trains_only_its_block_and_reduces_loss() {
        let model = micro_model(5);
        let ds = generate_domain(&micro_spec(), 2).unwrap();
        let (bt, bv) = micro_boost(&model, 200);
        let snap_t = bt.block(0).unwrap().clone();
        let snap_v = bv.block(0).unwrap().clone();
        let backbone = model.snapshot();
        let mut cfg = micro_cfg(AdaptVariant::TextShallow);
        cfg.epochs = 8;
        cfg.lr = 0.05;
        let few = FewShotConfig::new(4, 0);
        let out = run_adapt_phase(&model, Some((&bt, &bv)), &ds, &few, &cfg).unwrap();

        assert_eq!(out.trainable_ids, vec!["adapting.text.l00".to_string()]);
        assert!(model.diff_snapshot(&backbone).is_empty());
        let (t, v) = out.boosting.as_ref().unwrap();
        assert!(t.block(0).unwrap().bit_eq(&snap_t), "boosting text moved");
        assert!(v.block(0).unwrap().bit_eq(&snap_v), "boosting vision moved");
        assert_eq!(out.epochs.len(), cfg.epochs);
        let first = out.epochs.first().unwrap().train_loss;
        let last = out.epochs.last().unwrap().train_loss;
        assert!(last < first, "cross-entropy did not decrease: {first} → {last}");
        assert!(out.text_adapting.frozen());
        let report = eval_base_to_novel(&model, &out, &ds, 0).unwrap();
        report.validate().unwrap();
    }

    #[test]
    fn every_variant_audits_its_exact_trainable_set() {
        let model = micro_model(6);
        let ds = generate_domain(&micro_spec(), 3).unwrap();
        let (bt, bv) = micro_boost(&model, 300);
        let few = FewShotConfig::new(2, 0);
        for variant in AdaptVariant::ALL {
            let mut cfg = micro_cfg(variant);
            cfg.epochs = 1;
            let out = run_adapt_phase(&model, Some((&bt, &bv)), &ds, &few, &cfg).unwrap();
            let mut expect: Vec<String> = match variant {
                AdaptVariant::TextShallow => vec!["adapting.text.l00".into()],
                AdaptVariant::ConditionedTextShallow => {
                    let mut v: Vec<String> = vec!["adapting.text.l00".into()];
                    v.extend(MetaNet::PARAM_IDS.iter().map(|s| s.to_string()));
                    v
                }
                AdaptVariant::CoupledDeep => (0..2)
                    .flat_map(|l| {
                        [format!("adapting.text.l{l:02}"), format!("projector.l{l:02}")]
                    })
                    .collect(),
                AdaptVariant::IndependentDeep => (0..2)
                    .flat_map(|l| {
                        [format!("adapting.text.l{l:02}"), format!("adapting.vision.l{l:02}")]
                    })
                    .collect(),
            };
            expect.sort();
            assert_eq!(out.trainable_ids, expect, "variant {variant}");
            assert_eq!(out.variant, variant);
            assert_eq!(out.vision_adapting.is_some(), variant.has_vision_prompts());
            assert_eq!(
                out.projector.is_some(),
                variant == AdaptVariant::CoupledDeep
            );
            assert_eq!(
                out.meta_net.is_some(),
                variant == AdaptVariant::ConditionedTextShallow
            );
            // The per-epoch record carries plausible accuracies.
            for row in &out.epochs {
                assert!(row.train_loss.is_finite());
                assert!((0.0..=1.0).contains(&row.base_acc));
                assert!((0.0..=1.0).contains(&row.novel_acc));
            }
        }
    }

    #[test]
    fn coupled_outcome_vision_set_is_the_projected_text_set() {
        let model = micro_model(7);
        let ds = generate_domain(&micro_spec(), 4).unwrap();
        let (bt, bv) = micro_boost(&model, 400);
        let cfg = micro_cfg(AdaptVariant::CoupledDeep);
        let few = FewShotConfig::new(2, 1);
        let out = run_adapt_phase(&model, Some((&bt, &bv)), &ds, &few, &cfg).unwrap();
        let regen = out
            .projector
            .as_ref()
            .unwrap()
            .generate(&out.text_adapting.thawed_copy())
            .unwrap();
        for l in 0..2 {
            assert!(out
                .vision_adapting
                .as_ref()
                .unwrap()
                .block(l)
                .unwrap()
                .bit_eq(regen.block(l).unwrap()));
        }
    }

    #[test]
    fn learnability_ablation_co_trains_boosting() {
        let model = micro_model(8);
        let ds = generate_domain(&micro_spec(), 5).unwrap();
        let (bt, bv) = micro_boost(&model, 500);
        let mut cfg = micro_cfg(AdaptVariant::IndependentDeep);
        cfg.train_boosting = true;
        cfg.epochs = 2;
        cfg.lr = 0.05;
        let few = FewShotConfig::new(2, 0);
        let out = run_adapt_phase(&model, Some((&bt, &bv)), &ds, &few, &cfg).unwrap();
        assert!(out.trainable_ids.iter().any(|i| i.starts_with("boosting.")));
        assert_eq!(out.trainable_ids.len(), 4 + 4);
        let (t, v) = out.boosting.as_ref().unwrap();
        assert!(!t.block(0).unwrap().bit_eq(bt.block(0).unwrap()), "boosting text frozen");
        assert!(!v.block(0).unwrap().bit_eq(bv.block(0).unwrap()), "boosting vision frozen");
        // Inputs stay frozen and untouched.
        assert!(bt.frozen() && bv.frozen());
        // Flag without sets is a config error; unfrozen sets without the
        // flag are a contract error.
        let mut cfg2 = micro_cfg(AdaptVariant::TextShallow);
        cfg2.train_boosting = true;
        assert!(run_adapt_phase(&model, None, &ds, &few, &cfg2).is_err());
        let thawed_t = bt.thawed_copy();
        let thawed_v = bv.thawed_copy();
        let cfg3 = micro_cfg(AdaptVariant::TextShallow);
        assert!(run_adapt_phase(&model, Some((&thawed_t, &thawed_v)), &ds, &few, &cfg3).is_err());
    }

    #[test]
    fn adapt_phase_is_deterministic_and_works_without_boosting() {
        let model = micro_model(9);
        let ds = generate_domain(&micro_spec(), 6).unwrap();
        let cfg = micro_cfg(AdaptVariant::IndependentDeep);
        let few = FewShotConfig::new(2, 7);
        let a = run_adapt_phase(&model, None, &ds, &few, &cfg).unwrap();
        let b = run_adapt_phase(&model, None, &ds, &few, &cfg).unwrap();
        assert!(a.boosting.is_none());
        for l in 0..2 {
            assert!(a
                .text_adapting
                .block(l)
                .unwrap()
                .bit_eq(b.text_adapting.block(l).unwrap()));
        }
        assert_eq!(a.epochs, b.epochs);
        let ra = eval_base_to_novel(&model, &a, &ds, 0).unwrap();
        let rb = eval_base_to_novel(&model, &b, &ds, 0).unwrap();
        assert_eq!(ra.base_acc, rb.base_acc);
        assert_eq!(ra.harmonic_mean, rb.harmonic_mean);
        assert_eq!(ra.meta.num_classes, 4);
    }

    #[test]
    fn unfrozen_backbone_is_rejected() {
        let ds = generate_domain(&micro_spec(), 7).unwrap();
        let cfg = micro_cfg(AdaptVariant::TextShallow);
        let few = FewShotConfig::new(2, 0);
        let unfrozen = {
            let c = EncoderConfig {
                depth: 2,
                width: 8,
                heads: 2,
                max_seq: 24,
                patch_size: 4,
                image_size: 8,
                vocab_size: Vocab::standard().len(),
            };
            MiniClip::init(c, 6, 10).unwrap()
        };
        assert!(run_adapt_phase(&unfrozen, None, &ds, &few, &cfg).is_err());
    }
}
