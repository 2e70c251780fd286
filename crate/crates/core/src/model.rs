//! The miniature dual-encoder vision-language model.
//!
//! Two pre-LayerNorm transformers — a patch encoder for images and a token
//! encoder for captions — project into a shared embedding space where cosine
//! similarity scaled by a learnable temperature acts as the classifier head.
//! The geometry is desk-sized (widths of 32/64, depths of 6/8) so that full
//! training runs fit in CPU minutes, but the structure mirrors the large
//! models this laboratory imitates: CLS readout on the vision side, last-token
//! readout on the text side, l2-normalized features on both.
//!
//! Prompt tokens enter through a [`CascadeLayout`]: before every layer the
//! encoder assembles its input sequence from carried-over rows and freshly
//! bound prompt blocks, per the layout's span table. A `provider` callback
//! supplies the prompt nodes, which is how the different tuning strategies
//! plug in (plain parameter binding, per-image conditioned offsets, or
//! projector-generated vision prompts) without the encoder knowing about any
//! of them. Every encode returns an [`EncodeAudit`] recording exactly which
//! spans were assembled where and which values were freshly injected, so tests
//! can verify layout claims against what actually happened rather than
//! against the plan.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use caspl_autodiff::{checkpoint, NodeId, Parameter, Tape, Tensor};

use crate::error::{Error, Result};
use crate::prompts::{CascadeLayout, PromptSet, SegmentKind};
use crate::rng::seeded;
use crate::tokenizer::Vocab;

/// Initialization std for attention/MLP/projection weights and position/CLS
/// embeddings (transformer convention).
pub const WEIGHT_INIT_STD: f64 = 0.02;

/// Initialization std for the input embeddings (patch projection and token
/// table). Kept at parity with [`WEIGHT_INIT_STD`] so the input-driven part of
/// the residual stream can compete with the input-independent carriers
/// (position embeddings, CLS) from the first step: a weaker input pathway
/// loses the early race against the uniform-similarity collapse during
/// contrastive pretraining (see the pretraining module docs).
pub const INPUT_EMBED_INIT_STD: f64 = 0.02;

/// Initial similarity temperature (the classifier divides cosine similarities
/// by this value; stored internally as its logarithm).
pub const LOGIT_TEMP_INIT: f64 = 0.07;

/// Bounds for the learnable similarity temperature during pretraining.
pub const LOGIT_TEMP_RANGE: (f64, f64) = (0.01, 1.0);

/// MLP expansion factor.
pub const MLP_RATIO: usize = 4;

/// Geometry of one dual-encoder model (both branches share the width).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    /// Hard cap on assembled sequence length (content + prompts).
    pub max_seq: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub vocab_size: usize,
}

impl EncoderConfig {
    /// The deployed (student) geometry.
    pub fn desk_student() -> Self {
        EncoderConfig {
            depth: 6,
            width: 32,
            heads: 4,
            max_seq: 48,
            patch_size: 4,
            image_size: 16,
            vocab_size: Vocab::standard().len(),
        }
    }

    /// The larger supervising (teacher) geometry.
    pub fn desk_teacher() -> Self {
        EncoderConfig { depth: 8, width: 64, ..Self::desk_student() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.width == 0 || self.heads == 0 {
            return Err(Error::config("encoder depth/width/heads must be positive"));
        }
        if self.width % self.heads != 0 {
            return Err(Error::config(format!(
                "encoder width {} must be divisible by heads {}",
                self.width, self.heads
            )));
        }
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::config(format!(
                "image size {} must be a positive multiple of patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.max_seq < self.num_patches() + 1 {
            return Err(Error::config(format!(
                "max_seq {} cannot hold CLS + {} patches",
                self.max_seq,
                self.num_patches()
            )));
        }
        if self.vocab_size < 2 {
            return Err(Error::config("vocab size must be at least 2"));
        }
        Ok(())
    }

    /// Patches per image (square grid).
    pub fn num_patches(&self) -> usize {
        let g = self.image_size / self.patch_size;
        g * g
    }

    /// Flattened pixels per patch.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }
}

/// A dual-encoder model: a flat parameter store plus its geometry.
#[derive(Debug, Clone)]
pub struct MiniClip {
    cfg: EncoderConfig,
    d_shared: usize,
    params: BTreeMap<String, Parameter>,
}

impl MiniClip {
    /// Fresh random initialization; every tensor gets an independent stream
    /// derived from `(seed, parameter id)`, so ids — not insertion order —
    /// determine values.
    pub fn init(cfg: EncoderConfig, d_shared: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if d_shared == 0 {
            return Err(Error::config("shared embedding width must be positive"));
        }
        let d = cfg.width;
        let mut params = BTreeMap::new();
        let mut add = |id: String, shape: Vec<usize>, std: f64| {
            let t = if std == 0.0 {
                Tensor::zeros(shape)
            } else {
                let mut rng = seeded(seed, &format!("model/{id}"));
                let n = Normal::new(0.0, std).expect("valid std");
                let len = shape.iter().product();
                Tensor::new(shape, (0..len).map(|_| n.sample(&mut rng)).collect())
            };
            params.insert(id.clone(), Parameter::new(id, t, true));
        };

        add("text.tok_embed".into(), vec![cfg.vocab_size, d], INPUT_EMBED_INIT_STD);
        add("text.pos_embed".into(), vec![cfg.max_seq, d], WEIGHT_INIT_STD);
        add("vision.patch_embed.w".into(), vec![cfg.patch_dim(), d], INPUT_EMBED_INIT_STD);
        add("vision.patch_embed.b".into(), vec![1, d], 0.0);
        add("vision.cls".into(), vec![1, d], WEIGHT_INIT_STD);
        add("vision.pos_embed".into(), vec![1 + cfg.num_patches(), d], WEIGHT_INIT_STD);
        for branch in ["text", "vision"] {
            for l in 0..cfg.depth {
                let p = format!("{branch}.l{l:02}");
                for ln in ["ln1", "ln2"] {
                    add(format!("{p}.{ln}.g"), vec![1, d], 0.0);
                    add(format!("{p}.{ln}.b"), vec![1, d], 0.0);
                }
                for w in ["wq", "wk", "wv", "wo"] {
                    add(format!("{p}.attn.{w}"), vec![d, d], WEIGHT_INIT_STD);
                }
                for b in ["bq", "bk", "bv", "bo"] {
                    add(format!("{p}.attn.{b}"), vec![1, d], 0.0);
                }
                add(format!("{p}.mlp.w1"), vec![d, MLP_RATIO * d], WEIGHT_INIT_STD);
                add(format!("{p}.mlp.b1"), vec![1, MLP_RATIO * d], 0.0);
                add(format!("{p}.mlp.w2"), vec![MLP_RATIO * d, d], WEIGHT_INIT_STD);
                add(format!("{p}.mlp.b2"), vec![1, d], 0.0);
            }
            add(format!("{branch}.ln_f.g"), vec![1, d], 0.0);
            add(format!("{branch}.ln_f.b"), vec![1, d], 0.0);
            add(format!("{branch}.proj"), vec![d, d_shared], WEIGHT_INIT_STD);
        }
        add("logit_temp".into(), vec![1], 0.0);
        let mut model = MiniClip { cfg, d_shared, params };
        // LayerNorm gains start at identity; the temperature at its pinned
        // initial value.
        for id in model.params.keys().cloned().collect::<Vec<_>>() {
            if id.ends_with(".g") {
                let d = model.params[&id].value.len();
                model.params.get_mut(&id).unwrap().value = Tensor::new(vec![1, d], vec![1.0; d]);
            }
        }
        model.params.get_mut("logit_temp").unwrap().value =
            Tensor::new(vec![1], vec![LOGIT_TEMP_INIT.ln()]);
        Ok(model)
    }

    pub fn cfg(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn d_shared(&self) -> usize {
        self.d_shared
    }

    /// Current similarity temperature (always positive by construction).
    pub fn temperature(&self) -> f64 {
        self.params["logit_temp"].value.data()[0].exp()
    }

    pub fn param(&self, id: &str) -> Result<&Parameter> {
        self.params
            .get(id)
            .ok_or_else(|| Error::contract(format!("model has no parameter {id:?}")))
    }

    /// All parameters, in id order.
    pub fn parameters(&self) -> impl Iterator<Item = &Parameter> {
        self.params.values()
    }

    /// Mutable access for the pretraining optimizer.
    pub fn parameters_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.values_mut()
    }

    /// Total scalar count.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// Marks every parameter non-trainable (the state both phases require).
    pub fn freeze(&mut self) {
        for p in self.params.values_mut() {
            p.trainable = false;
        }
    }

    /// True when no parameter is trainable.
    pub fn is_frozen(&self) -> bool {
        self.params.values().all(|p| !p.trainable)
    }

    /// Bit-exact copy of all parameter values, for freezing audits.
    pub fn snapshot(&self) -> BTreeMap<String, Tensor> {
        self.params.iter().map(|(k, p)| (k.clone(), p.value.clone())).collect()
    }

    /// Compares against a snapshot, returning ids whose bits changed.
    pub fn diff_snapshot(&self, snap: &BTreeMap<String, Tensor>) -> Vec<String> {
        self.params
            .iter()
            .filter(|(k, p)| snap.get(*k).map(|t| !t.bit_eq(&p.value)).unwrap_or(true))
            .map(|(k, _)| k.clone())
            .collect()
    }

    /// Saves all parameters plus geometry into a tensor bundle + manifest.
    pub fn save(&self, bin_path: &Path, manifest_path: &Path) -> Result<()> {
        let tensors: Vec<(&str, &Tensor)> =
            self.params.iter().map(|(k, p)| (k.as_str(), &p.value)).collect();
        let extra = serde_json::json!({
            "kind": "model",
            "encoder": self.cfg,
            "d_shared": self.d_shared,
        });
        checkpoint::save(bin_path, manifest_path, tensors, extra)?;
        Ok(())
    }

    /// Loads a model bundle. The result is frozen: training phases never
    /// resume a backbone, they only read it.
    pub fn load(bin_path: &Path, manifest_path: &Path) -> Result<Self> {
        let manifest = checkpoint::load_manifest(manifest_path)?;
        let cfg: EncoderConfig = serde_json::from_value(
            manifest.extra.get("encoder").cloned().ok_or_else(|| Error::Io {
                path: manifest_path.to_path_buf(),
                detail: "model manifest missing encoder geometry".into(),
            })?,
        )
        .map_err(|e| Error::Io { path: manifest_path.to_path_buf(), detail: e.to_string() })?;
        let d_shared = manifest
            .extra
            .get("d_shared")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Io {
                path: manifest_path.to_path_buf(),
                detail: "model manifest missing d_shared".into(),
            })? as usize;
        let mut model = MiniClip::init(cfg, d_shared, 0)?;
        let stored = checkpoint::load_all::<f64>(bin_path, &manifest)?;
        if stored.len() != model.params.len() {
            return Err(Error::Io {
                path: bin_path.to_path_buf(),
                detail: format!(
                    "model bundle has {} tensors, geometry implies {}",
                    stored.len(),
                    model.params.len()
                ),
            });
        }
        for (id, p) in model.params.iter_mut() {
            let t = stored.get(id).ok_or_else(|| Error::Io {
                path: bin_path.to_path_buf(),
                detail: format!("model bundle missing parameter {id}"),
            })?;
            if t.shape() != p.value.shape() {
                return Err(Error::Io {
                    path: bin_path.to_path_buf(),
                    detail: format!(
                        "parameter {id} has shape {:?}, geometry implies {:?}",
                        t.shape(),
                        p.value.shape()
                    ),
                });
            }
            p.value = t.clone();
            p.trainable = false;
        }
        Ok(model)
    }
}

/// Binds model parameters onto a tape, once each: trainable parameters become
/// tape params (when `bind_trainable`), everything else becomes a constant, so
/// frozen backbones never generate gradient work.
pub struct ModelBinder<'a> {
    model: &'a MiniClip,
    bind_trainable: bool,
    cache: HashMap<String, NodeId>,
}

impl<'a> ModelBinder<'a> {
    /// `bind_trainable = true` during pretraining; false in both phases.
    pub fn new(model: &'a MiniClip, bind_trainable: bool) -> Self {
        ModelBinder { model, bind_trainable, cache: HashMap::new() }
    }

    pub fn model(&self) -> &MiniClip {
        self.model
    }

    /// Node for a model parameter; one node per id per tape.
    pub fn node(&mut self, tape: &mut Tape, id: &str) -> Result<NodeId> {
        if let Some(n) = self.cache.get(id) {
            return Ok(*n);
        }
        let p = self.model.param(id)?;
        let n = if self.bind_trainable && p.trainable {
            tape.param(id, p.value.clone())?
        } else {
            tape.constant(p.value.clone())
        };
        self.cache.insert(id.to_string(), n);
        Ok(n)
    }
}

/// Callback supplying prompt nodes during encoding: `(tape, layer, kind,
/// item)` → node of shape `[segment length × width]`. `item` is the row index
/// within the current encode call, letting per-instance strategies vary their
/// prompts across items.
pub type PromptNodes<'a> =
    dyn FnMut(&mut Tape, usize, SegmentKind, usize) -> Result<NodeId> + 'a;

/// Provider for layouts without prompt segments; reports a contract violation
/// if the layout asks for one anyway.
pub fn no_prompt_nodes(
) -> impl FnMut(&mut Tape, usize, SegmentKind, usize) -> Result<NodeId> {
    |_: &mut Tape, layer: usize, kind: SegmentKind, _: usize| {
        Err(Error::contract(format!(
            "layout requested a {kind:?} segment at layer {layer} but no prompts were provided"
        )))
    }
}

/// Standard prompt binding: boosting/adapting blocks become tape params when
/// their set is trainable (and training is enabled for that role), constants
/// otherwise. One node per `(layer, kind)` per tape.
pub struct PromptBinder<'a> {
    boosting: Option<&'a PromptSet>,
    adapting: Option<&'a PromptSet>,
    train_boosting: bool,
    train_adapting: bool,
    cache: HashMap<(usize, SegmentKind), NodeId>,
}

impl<'a> PromptBinder<'a> {
    /// Training flags default to each set's own frozen state.
    pub fn new(boosting: Option<&'a PromptSet>, adapting: Option<&'a PromptSet>) -> Self {
        PromptBinder {
            train_boosting: boosting.map(|s| !s.frozen()).unwrap_or(false),
            train_adapting: adapting.map(|s| !s.frozen()).unwrap_or(false),
            boosting,
            adapting,
            cache: HashMap::new(),
        }
    }

    /// Overrides training flags (used to bind everything as constants during
    /// evaluation even while sets are mid-training).
    pub fn with_training(mut self, boosting: bool, adapting: bool) -> Self {
        self.train_boosting = boosting;
        self.train_adapting = adapting;
        self
    }

    pub fn node(&mut self, tape: &mut Tape, layer: usize, kind: SegmentKind) -> Result<NodeId> {
        if let Some(n) = self.cache.get(&(layer, kind)) {
            return Ok(*n);
        }
        let (set, train) = match kind {
            SegmentKind::Boosting => (self.boosting, self.train_boosting),
            SegmentKind::Adapting => (self.adapting, self.train_adapting),
            SegmentKind::Content => {
                return Err(Error::contract("content segments are not prompt segments"))
            }
        };
        let set = set.ok_or_else(|| {
            Error::contract(format!("layout requested a {kind:?} segment but none was bound"))
        })?;
        let block = set.block(layer).ok_or_else(|| {
            Error::contract(format!(
                "layout requested a fresh {kind:?} block at layer {layer} beyond depth {}",
                set.depth()
            ))
        })?;
        let n = if train && !set.frozen() {
            tape.param(&set.param_id(layer), block.clone())?
        } else {
            tape.constant(block.clone())
        };
        self.cache.insert((layer, kind), n);
        Ok(n)
    }

    /// Adapts this binder to the [`PromptNodes`] callback shape (ignoring the
    /// item index — blocks are shared across items).
    pub fn provider<'b>(&'b mut self) -> Box<PromptNodes<'b>>
    where
        'a: 'b,
    {
        Box::new(move |tape, layer, kind, _| self.node(tape, layer, kind))
    }
}

/// Record of what an encode actually assembled: the span table per layer, the
/// values freshly injected into prompt spans (captured for the first item),
/// and the readout row.
#[derive(Debug, Clone)]
pub struct EncodeAudit {
    pub spans: Vec<Vec<crate::prompts::SegmentSpan>>,
    pub fresh_prompt_values: Vec<Vec<(SegmentKind, Tensor)>>,
    pub readout_row: usize,
}

/// Flattens an image `[H, W, 3]` into patch rows `[M × patch_size²·3]`,
/// row-major over the patch grid and `(y, x, channel)` within a patch.
pub fn extract_patches(image: &Tensor, cfg: &EncoderConfig) -> Result<Tensor> {
    let shape = image.shape();
    if shape != [cfg.image_size, cfg.image_size, 3] {
        return Err(Error::contract(format!(
            "image shape {:?} does not match configured {}×{}×3",
            shape, cfg.image_size, cfg.image_size
        )));
    }
    let (size, p) = (cfg.image_size, cfg.patch_size);
    let grid = size / p;
    let mut out = Vec::with_capacity(cfg.num_patches() * cfg.patch_dim());
    for gy in 0..grid {
        for gx in 0..grid {
            for dy in 0..p {
                for dx in 0..p {
                    let (y, x) = (gy * p + dy, gx * p + dx);
                    for ch in 0..3 {
                        out.push(image.data()[(y * size + x) * 3 + ch]);
                    }
                }
            }
        }
    }
    Ok(Tensor::new(vec![cfg.num_patches(), cfg.patch_dim()], out))
}

/// Encodes a batch of images under a vision layout. Returns the l2-normalized
/// feature matrix `[batch × d_shared]` and the assembly audit.
pub fn encode_image(
    tape: &mut Tape,
    binder: &mut ModelBinder<'_>,
    layout: &CascadeLayout,
    provider: &mut PromptNodes<'_>,
    images: &[&Tensor],
) -> Result<(NodeId, EncodeAudit)> {
    let cfg = *binder.model().cfg();
    if images.is_empty() {
        return Err(Error::contract("encode_image needs at least one image"));
    }
    if layout.branch() != crate::prompts::Branch::Vision {
        return Err(Error::contract("encode_image needs a vision-branch layout"));
    }
    if layout.depth() != cfg.depth {
        return Err(Error::contract(format!(
            "layout depth {} does not match encoder depth {}",
            layout.depth(),
            cfg.depth
        )));
    }
    if layout.content_len() != 1 + cfg.num_patches() {
        return Err(Error::contract(format!(
            "vision layout content length {} must be CLS + {} patches",
            layout.content_len(),
            cfg.num_patches()
        )));
    }
    check_capacity(layout, cfg.max_seq)?;

    let mut audit = None;
    let mut feature_rows = Vec::with_capacity(images.len());
    for (item, img) in images.iter().enumerate() {
        let patches = extract_patches(img, &cfg)?;
        let pn = tape.constant(patches);
        let w = binder.node(tape, "vision.patch_embed.w")?;
        let b = binder.node(tape, "vision.patch_embed.b")?;
        let emb = tape.matmul(pn, w)?;
        let emb = tape.add_row(emb, b)?;
        let cls = binder.node(tape, "vision.cls")?;
        let content = tape.concat(&[cls, emb], 0)?;
        let pos = binder.node(tape, "vision.pos_embed")?;
        let content = tape.add(content, pos)?;
        let (row, item_audit) =
            run_branch(tape, binder, "vision", layout, provider, item, content)?;
        feature_rows.push(row);
        if item == 0 {
            audit = Some(item_audit);
        }
    }
    let stacked = tape.concat(&feature_rows, 0)?;
    let features = tape.l2_normalize_rows(stacked)?;
    Ok((features, audit.expect("at least one item")))
}

/// Encodes token sequences under a text layout. All sequences must share one
/// length (captions from a single template do). Returns l2-normalized features
/// `[rows × d_shared]` and the assembly audit.
pub fn encode_text(
    tape: &mut Tape,
    binder: &mut ModelBinder<'_>,
    layout: &CascadeLayout,
    provider: &mut PromptNodes<'_>,
    sequences: &[&[u32]],
) -> Result<(NodeId, EncodeAudit)> {
    let cfg = *binder.model().cfg();
    if sequences.is_empty() {
        return Err(Error::contract("encode_text needs at least one sequence"));
    }
    if layout.branch() != crate::prompts::Branch::Text {
        return Err(Error::contract("encode_text needs a text-branch layout"));
    }
    if layout.depth() != cfg.depth {
        return Err(Error::contract(format!(
            "layout depth {} does not match encoder depth {}",
            layout.depth(),
            cfg.depth
        )));
    }
    let len = sequences[0].len();
    if sequences.iter().any(|s| s.len() != len) {
        return Err(Error::contract("all text sequences in a batch must share one length"));
    }
    if layout.content_len() != len {
        return Err(Error::contract(format!(
            "text layout content length {} does not match sequence length {len}",
            layout.content_len()
        )));
    }
    for s in sequences {
        for &t in s.iter() {
            if (t as usize) >= cfg.vocab_size {
                return Err(Error::config(format!(
                    "token id {t} outside vocabulary of size {}",
                    cfg.vocab_size
                )));
            }
        }
    }
    check_capacity(layout, cfg.max_seq)?;

    let mut audit = None;
    let mut feature_rows = Vec::with_capacity(sequences.len());
    for (item, seq) in sequences.iter().enumerate() {
        let table = binder.node(tape, "text.tok_embed")?;
        let idx: Vec<usize> = seq.iter().map(|&t| t as usize).collect();
        let emb = tape.gather_rows(table, &idx)?;
        let pos_table = binder.node(tape, "text.pos_embed")?;
        let pos = tape.slice(pos_table, 0, 0, len)?;
        let content = tape.add(emb, pos)?;
        let (row, item_audit) = run_branch(tape, binder, "text", layout, provider, item, content)?;
        feature_rows.push(row);
        if item == 0 {
            audit = Some(item_audit);
        }
    }
    let stacked = tape.concat(&feature_rows, 0)?;
    let features = tape.l2_normalize_rows(stacked)?;
    Ok((features, audit.expect("at least one item")))
}

fn check_capacity(layout: &CascadeLayout, max_seq: usize) -> Result<()> {
    for l in 0..layout.depth() {
        let s = layout.seq_len(l);
        if s > max_seq {
            return Err(Error::config(format!(
                "sequence overflow at layer {l}: assembled length {s} exceeds max_seq {max_seq} \
                 (segments: {:?})",
                layout.spans(l)
            )));
        }
    }
    Ok(())
}

/// Runs one branch for one item: assemble per-layer inputs per the layout,
/// apply transformer layers, read out, project. Returns the `[1 × d_shared]`
/// projected row (not yet normalized) plus the audit.
fn run_branch(
    tape: &mut Tape,
    binder: &mut ModelBinder<'_>,
    branch: &str,
    layout: &CascadeLayout,
    provider: &mut PromptNodes<'_>,
    item: usize,
    content0: NodeId,
) -> Result<(NodeId, EncodeAudit)> {
    let cfg = *binder.model().cfg();
    let mut audit = EncodeAudit {
        spans: Vec::with_capacity(cfg.depth),
        fresh_prompt_values: Vec::with_capacity(cfg.depth),
        readout_row: layout.readout_row(),
    };
    let mut prev: Option<NodeId> = None;
    for l in 0..cfg.depth {
        let mut parts = Vec::new();
        let mut fresh_values = Vec::new();
        for span in layout.spans(l) {
            let node = match (span.kind, span.fresh) {
                (SegmentKind::Content, true) => content0,
                (kind, true) => {
                    let n = provider(tape, l, kind, item)?;
                    let got = tape.value(n).shape().to_vec();
                    if got != [span.len, cfg.width] {
                        return Err(Error::contract(format!(
                            "prompt provider returned shape {got:?} for a {kind:?} span of \
                             {} × {} at layer {l}",
                            span.len, cfg.width
                        )));
                    }
                    fresh_values.push((kind, tape.value(n).clone()));
                    n
                }
                (kind, false) => {
                    let prev_node =
                        prev.expect("non-fresh span implies a previous layer");
                    let old = layout.span(l - 1, kind).ok_or_else(|| {
                        Error::contract(format!(
                            "carried-over {kind:?} span at layer {l} missing from layer {}",
                            l - 1
                        ))
                    })?;
                    tape.slice(prev_node, 0, old.start, old.len)?
                }
            };
            parts.push(node);
        }
        let x = if parts.len() == 1 { parts[0] } else { tape.concat(&parts, 0)? };
        audit.spans.push(layout.spans(l).to_vec());
        audit.fresh_prompt_values.push(fresh_values);
        prev = Some(transformer_layer(tape, binder, &format!("{branch}.l{l:02}"), x, &cfg)?);
    }
    let x = prev.expect("depth is positive");
    let g = binder.node(tape, &format!("{branch}.ln_f.g"))?;
    let b = binder.node(tape, &format!("{branch}.ln_f.b"))?;
    let x = tape.layer_norm(x, g, b)?;
    let row = tape.slice(x, 0, layout.readout_row(), 1)?;
    let proj = binder.node(tape, &format!("{branch}.proj"))?;
    let feat = tape.matmul(row, proj)?;
    Ok((feat, audit))
}

/// One pre-LayerNorm transformer layer: multi-head self-attention and a GELU
/// MLP, each behind a residual connection.
fn transformer_layer(
    tape: &mut Tape,
    binder: &mut ModelBinder<'_>,
    prefix: &str,
    x: NodeId,
    cfg: &EncoderConfig,
) -> Result<NodeId> {
    let node = |t: &mut Tape, b: &mut ModelBinder<'_>, suffix: &str| -> Result<NodeId> {
        b.node(t, &format!("{prefix}.{suffix}"))
    };

    let g1 = node(tape, binder, "ln1.g")?;
    let b1 = node(tape, binder, "ln1.b")?;
    let h = tape.layer_norm(x, g1, b1)?;
    let mut qkv = Vec::with_capacity(3);
    for (w, b) in [("wq", "bq"), ("wk", "bk"), ("wv", "bv")] {
        let wn = node(tape, binder, &format!("attn.{w}"))?;
        let bn = node(tape, binder, &format!("attn.{b}"))?;
        let p = tape.matmul(h, wn)?;
        qkv.push(tape.add_row(p, bn)?);
    }
    let (q, k, v) = (qkv[0], qkv[1], qkv[2]);
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.heads);
    for hd in 0..cfg.heads {
        let qh = tape.slice(q, 1, hd * dh, dh)?;
        let kh = tape.slice(k, 1, hd * dh, dh)?;
        let vh = tape.slice(v, 1, hd * dh, dh)?;
        let scores = tape.matmul_nt(qh, kh)?;
        let scores = tape.scale(scores, scale);
        let attn = tape.softmax_t(scores, 1.0)?;
        heads.push(tape.matmul(attn, vh)?);
    }
    let cat = if heads.len() == 1 { heads[0] } else { tape.concat(&heads, 1)? };
    let wo = node(tape, binder, "attn.wo")?;
    let bo = node(tape, binder, "attn.bo")?;
    let o = tape.matmul(cat, wo)?;
    let o = tape.add_row(o, bo)?;
    let x = tape.add(x, o)?;

    let g2 = node(tape, binder, "ln2.g")?;
    let b2 = node(tape, binder, "ln2.b")?;
    let h = tape.layer_norm(x, g2, b2)?;
    let w1 = node(tape, binder, "mlp.w1")?;
    let bb1 = node(tape, binder, "mlp.b1")?;
    let m = tape.matmul(h, w1)?;
    let m = tape.add_row(m, bb1)?;
    let m = tape.gelu(m);
    let w2 = node(tape, binder, "mlp.w2")?;
    let bb2 = node(tape, binder, "mlp.b2")?;
    let m = tape.matmul(m, w2)?;
    let m = tape.add_row(m, bb2)?;
    Ok(tape.add(x, m)?)
}

/// Scales similarity rows by the inverse temperature on the tape (the node
/// route used during training; gradients flow into the temperature when it is
/// bound trainable).
pub fn scaled_logits(
    tape: &mut Tape,
    binder: &mut ModelBinder<'_>,
    image_features: NodeId,
    text_features: NodeId,
) -> Result<NodeId> {
    let sims = tape.matmul_nt(image_features, text_features)?;
    let lt = binder.node(tape, "logit_temp")?;
    let neg = tape.scale(lt, -1.0);
    let inv = tape.exp(neg);
    Ok(tape.mul_scalar(sims, inv)?)
}

/// The zero-shot classifier head as a pure function: softmax over cosine
/// similarities divided by the temperature. Rows of both feature matrices
/// must be l2-normalized (this is what makes the dot product a cosine).
pub fn zero_shot_probs(
    image_features: &Tensor,
    text_features: &Tensor,
    tau: f64,
) -> Result<Tensor> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::contract(format!("temperature must be positive, got {tau}")));
    }
    let (b, d) = image_features.dims2()?;
    let (c, d2) = text_features.dims2()?;
    if d != d2 {
        return Err(Error::contract(format!(
            "feature widths differ: images {d}, texts {d2}"
        )));
    }
    for (name, t, rows) in
        [("image", image_features, b), ("text", text_features, c)]
    {
        let width = t.len() / rows;
        for r in 0..rows {
            let row = &t.data()[r * width..(r + 1) * width];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(Error::contract(format!(
                    "{name} feature row {r} has norm {norm}, expected l2-normalized inputs"
                )));
            }
        }
    }
    let mut out = Vec::with_capacity(b * c);
    for i in 0..b {
        let xi = &image_features.data()[i * d..(i + 1) * d];
        let mut logits = Vec::with_capacity(c);
        for j in 0..c {
            let yj = &text_features.data()[j * d..(j + 1) * d];
            let s: f64 = xi.iter().zip(yj).map(|(a, b)| a * b).sum();
            logits.push(s / tau);
        }
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
        let sum: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| e / sum));
    }
    Ok(Tensor::new(vec![b, c], out))
}

/// Row-wise argmax (first maximum wins).
pub fn argmax_rows(t: &Tensor) -> Result<Vec<usize>> {
    let (r, c) = t.dims2()?;
    Ok((0..r)
        .map(|i| {
            let row = &t.data()[i * c..(i + 1) * c];
            row.iter()
                .enumerate()
                .fold((0usize, f64::NEG_INFINITY), |best, (j, &v)| {
                    if v > best.1 {
                        (j, v)
                    } else {
                        best
                    }
                })
                .0
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompts::{cascade, content_only, Branch, PromptRole, PromptSet};

    fn tiny_cfg() -> EncoderConfig {
        EncoderConfig {
            depth: 2,
            width: 8,
            heads: 2,
            max_seq: 24,
            patch_size: 4,
            image_size: 8,
            vocab_size: 12,
        }
    }

    fn tiny_model() -> MiniClip {
        MiniClip::init(tiny_cfg(), 6, 3).unwrap()
    }

    fn tiny_image(seed: u64) -> Tensor {
        let mut rng = seeded(seed, "test-image");
        use rand::Rng;
        let data = (0..8 * 8 * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
        Tensor::new(vec![8, 8, 3], data)
    }

    #[test]
    fn config_validation_catches_geometry_errors() {
        let mut c = tiny_cfg();
        c.width = 9; // not divisible by heads
        assert!(c.validate().is_err());
        let mut c = tiny_cfg();
        c.image_size = 10; // not a multiple of patch size
        assert!(c.validate().is_err());
        let mut c = tiny_cfg();
        c.max_seq = 4; // cannot hold CLS + patches
        assert!(c.validate().is_err());
        assert!(EncoderConfig::desk_student().validate().is_ok());
        assert!(EncoderConfig::desk_teacher().validate().is_ok());
    }

    #[test]
    fn encode_image_shapes_and_determinism() {
        let model = tiny_model();
        let layout = content_only(Branch::Vision, 2, 1 + 4);
        let imgs = [tiny_image(1), tiny_image(1), tiny_image(2)];
        let run = || {
            let mut tape: Tape = Tape::new();
            let mut binder = ModelBinder::new(&model, false);
            let mut provider = no_prompt_nodes();
            let (f, _) = encode_image(
                &mut tape,
                &mut binder,
                &layout,
                &mut provider,
                &[&imgs[0], &imgs[1], &imgs[2]],
            )
            .unwrap();
            tape.value(f).clone()
        };
        let f1 = run();
        let f2 = run();
        assert_eq!(f1.shape(), &[3, 6]);
        // Repeated calls are bitwise equal; identical inputs give identical rows.
        assert!(f1.bit_eq(&f2));
        let (r0, r1) = (&f1.data()[0..6], &f1.data()[6..12]);
        assert_eq!(r0, r1);
        // Rows are l2-normalized.
        for r in 0..3 {
            let n: f64 = f1.data()[r * 6..(r + 1) * 6].iter().map(|v| v * v).sum();
            assert!((n.sqrt() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn encode_text_rejects_bad_tokens_and_ragged_batches() {
        let model = tiny_model();
        let layout = content_only(Branch::Text, 2, 3);
        let mut tape: Tape = Tape::new();
        let mut binder = ModelBinder::new(&model, false);
        let mut provider = no_prompt_nodes();
        let seq_ok: &[u32] = &[1, 2, 3];
        let seq_bad: &[u32] = &[1, 2, 99];
        let err = encode_text(&mut tape, &mut binder, &layout, &mut provider, &[seq_ok, seq_bad])
            .unwrap_err();
        assert_eq!(err.exit_code(), 2);

        let mut tape: Tape = Tape::new();
        let mut binder = ModelBinder::new(&model, false);
        let short: &[u32] = &[1, 2];
        let err = encode_text(&mut tape, &mut binder, &layout, &mut provider, &[seq_ok, short])
            .unwrap_err();
        assert_eq!(err.exit_code(), 4);
    }

    #[test]
    fn prompted_vision_sequence_length_and_audit() {
        // Desk numbers: M=16 patches, L=8 boosting, N=8 adapting → 33 rows.
        let cfg = EncoderConfig {
            depth: 2,
            width: 8,
            heads: 2,
            max_seq: 40,
            patch_size: 4,
            image_size: 16,
            vocab_size: 12,
        };
        let model = MiniClip::init(cfg, 6, 3).unwrap();
        let mut boost = PromptSet::init(PromptRole::Boosting, Branch::Vision, 8, 2, 8, 1).unwrap();
        boost.freeze();
        let adapt = PromptSet::init(PromptRole::Adapting, Branch::Vision, 8, 2, 8, 2).unwrap();
        let layout = cascade(Some(&boost), Some(&adapt), Branch::Vision, 2, 17, false).unwrap();
        assert_eq!(layout.seq_len(0), 33);

        let img = {
            let mut rng = seeded(5, "img");
            use rand::Rng;
            Tensor::new(vec![16, 16, 3], (0..768).map(|_| rng.gen_range(0.0..1.0)).collect())
        };
        let mut tape: Tape = Tape::new();
        let mut binder = ModelBinder::new(&model, false);
        let mut pb = PromptBinder::new(Some(&boost), Some(&adapt));
        let mut provider = pb.provider();
        let (_, audit) =
            encode_image(&mut tape, &mut binder, &layout, &mut provider, &[&img]).unwrap();
        // The audit reflects the layout exactly, layer by layer.
        for l in 0..2 {
            assert_eq!(audit.spans[l], layout.spans(l));
        }
        // Freshly injected values are the prompt blocks themselves.
        for l in 0..2 {
            let vals = &audit.fresh_prompt_values[l];
            assert_eq!(vals.len(), 2);
            for (kind, v) in vals {
                let expected = match kind {
                    SegmentKind::Boosting => boost.block(l).unwrap(),
                    SegmentKind::Adapting => adapt.block(l).unwrap(),
                    SegmentKind::Content => unreachable!(),
                };
                assert!(v.bit_eq(expected));
            }
        }
        assert_eq!(audit.readout_row, 0);
    }

    #[test]
    fn text_audit_places_class_token_last() {
        let model = tiny_model();
        let mut boost = PromptSet::init(PromptRole::Boosting, Branch::Text, 4, 1, 8, 1).unwrap();
        boost.freeze();
        let layout = cascade(Some(&boost), None, Branch::Text, 2, 1, false).unwrap();
        let mut tape: Tape = Tape::new();
        let mut binder = ModelBinder::new(&model, false);
        let mut pb = PromptBinder::new(Some(&boost), None);
        let mut provider = pb.provider();
        let seq: &[u32] = &[7];
        let (_, audit) =
            encode_text(&mut tape, &mut binder, &layout, &mut provider, &[seq]).unwrap();
        // Prompts occupy rows 0..4; the single class token sits last and is
        // the readout position.
        let content = audit.spans[0].iter().find(|s| s.kind == SegmentKind::Content).unwrap();
        assert_eq!(content.start, 4);
        assert_eq!(audit.readout_row, 4);
    }

    #[test]
    fn sequence_overflow_is_a_config_error_naming_the_layer() {
        let model = tiny_model(); // max_seq 24, content 5
        let mut boost = PromptSet::init(PromptRole::Boosting, Branch::Vision, 30, 1, 8, 1).unwrap();
        boost.freeze();
        let layout = cascade(Some(&boost), None, Branch::Vision, 2, 5, false).unwrap();
        let img = tiny_image(1);
        let mut tape: Tape = Tape::new();
        let mut binder = ModelBinder::new(&model, false);
        let mut pb = PromptBinder::new(Some(&boost), None);
        let mut provider = pb.provider();
        let err = encode_image(&mut tape, &mut binder, &layout, &mut provider, &[&img])
            .unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let msg = err.to_string();
        assert!(msg.contains("layer 0") && msg.contains("35"), "unhelpful message: {msg}");
    }

    #[test]
    fn deep_blocks_are_replaced_per_layer() {
        // Zeroing the layer-0 block changes the features (it feeds layer 0),
        // but the value injected at layer 1 is always layer 1's own block.
        let model = tiny_model();
        let adapt = PromptSet::init(PromptRole::Adapting, Branch::Text, 3, 2, 8, 9).unwrap();
        let layout = cascade(None, Some(&adapt), Branch::Text, 2, 2, false).unwrap();
        let seq: &[u32] = &[4, 7];
        let encode = |set: &PromptSet| {
            let mut tape: Tape = Tape::new();
            let mut binder = ModelBinder::new(&model, false);
            let mut pb = PromptBinder::new(None, Some(set)).with_training(false, false);
            let mut provider = pb.provider();
            let (f, audit) =
                encode_text(&mut tape, &mut binder, &layout, &mut provider, &[seq]).unwrap();
            (tape.value(f).clone(), audit)
        };
        let (f_orig, _) = encode(&adapt);
        let mut zeroed = adapt.clone();
        zeroed.update_block(0, Tensor::zeros(vec![3, 8])).unwrap();
        let (f_zero, audit) = encode(&zeroed);
        assert!(!f_orig.bit_eq(&f_zero), "layer-0 block must influence the output");
        let (_, layer1_value) = &audit.fresh_prompt_values[1][0];
        assert!(layer1_value.bit_eq(adapt.block(1).unwrap()), "layer 1 must inject its own block");
    }

    #[test]
    fn zero_shot_probs_matches_hand_softmax_and_contracts() {
        // C=2, similarities (1, 0), τ=1 → (e/(e+1), 1/(e+1)).
        let x = Tensor::new(vec![1, 2], vec![1.0, 0.0]);
        let y = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let p = zero_shot_probs(&x, &y, 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((p.data()[0] - e / (e + 1.0)).abs() < 1e-10);
        assert!((p.data()[0] - 0.7311).abs() < 1e-4);
        assert!((p.data()[1] - 0.2689).abs() < 1e-4);

        // Uniform similarities → uniform row.
        let y_same = Tensor::new(vec![2, 2], vec![1.0, 0.0, 1.0, 0.0]);
        let p = zero_shot_probs(&x, &y_same, 0.07).unwrap();
        assert!((p.data()[0] - 0.5).abs() < 1e-12);

        // Non-normalized input is a contract violation.
        let bad = Tensor::new(vec![1, 2], vec![1.0, 1.0]);
        assert_eq!(zero_shot_probs(&bad, &y, 1.0).unwrap_err().exit_code(), 4);
        assert!(zero_shot_probs(&x, &y, 0.0).is_err());
        assert!(zero_shot_probs(&x, &y, -1.0).is_err());
    }

    #[test]
    fn model_save_load_round_trips_and_freezes() {
        let dir = tempfile::tempdir().unwrap();
        let model = tiny_model();
        assert!(!model.is_frozen(), "fresh models are trainable");
        let bin = dir.path().join("m.bin");
        let man = dir.path().join("m.json");
        model.save(&bin, &man).unwrap();
        let back = MiniClip::load(&bin, &man).unwrap();
        assert!(back.is_frozen(), "loaded models are frozen");
        assert_eq!(back.num_scalars(), model.num_scalars());
        for p in model.parameters() {
            assert!(back.param(&p.id).unwrap().value.bit_eq(&p.value));
        }
        assert!((back.temperature() - LOGIT_TEMP_INIT).abs() < 1e-12);
    }

    #[test]
    fn snapshot_diff_detects_single_bit_changes() {
        let mut model = tiny_model();
        let snap = model.snapshot();
        assert!(model.diff_snapshot(&snap).is_empty());
        let t = model.params.get_mut("vision.cls").unwrap();
        let mut data = t.value.data().to_vec();
        // Flip the value by exactly one ulp: far below any approximate
        // tolerance, but a bitwise comparison must still catch it.
        data[0] = f64::from_bits(data[0].to_bits() ^ 1);
        t.value = Tensor::new(vec![1, 8], data);
        assert_eq!(model.diff_snapshot(&snap), vec!["vision.cls".to_string()]);
    }
}
