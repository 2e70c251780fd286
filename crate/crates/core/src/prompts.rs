//! Prompt sets and the cascade layout.
//!
//! A [`PromptSet`] is a small stack of learnable token blocks attached to one
//! encoder branch. Two roles exist and are trained in different phases:
//!
//! * **Boosting** prompts are distilled from the teacher on unlabeled images,
//!   then frozen forever.
//! * **Adapting** prompts are tuned on few-shot labels *around* the frozen
//!   boosting prompts.
//!
//! [`cascade`] turns a pair of sets into a per-layer [`CascadeLayout`]: for
//! every encoder layer it records which segments occupy which positions. The
//! ordering contract is fixed — text sequences run `[adapting][boosting]
//! [content]` so the class token stays last and the readout sees it; vision
//! sequences run `[content][boosting][adapting]` so the CLS token stays first.
//!
//! Depth semantics: a set of depth 1 is *shallow* — injected before layer 0
//! and carried through the whole encoder like ordinary tokens. A set of depth
//! `k ≥ 2` is *deep* — its blocks replace the segment's rows before each of
//! layers `0..k`, and from layer `k` on the segment is dropped from the
//! sequence entirely, so layers beyond an adapting depth of `k` process
//! boosting and content tokens only.

use std::fmt;
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use caspl_autodiff::{checkpoint, Parameter, Tensor};

use crate::error::{Error, Result};
use crate::rng::seeded;

/// Initial scale of prompt tokens (zero-mean Gaussian).
pub const PROMPT_INIT_STD: f64 = 0.02;

/// Which phase owns a prompt set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptRole {
    /// Distilled from the teacher in the first phase, then frozen.
    Boosting,
    /// Tuned on few-shot labels in the second phase.
    Adapting,
}

impl fmt::Display for PromptRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PromptRole::Boosting => "boosting",
            PromptRole::Adapting => "adapting",
        })
    }
}

/// Which encoder branch a prompt set attaches to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Text,
    Vision,
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Branch::Text => "text",
            Branch::Vision => "vision",
        })
    }
}

/// A stack of prompt token blocks: one `[length × dim]` tensor per occupied
/// layer (layers `0..depth`).
#[derive(Debug, Clone)]
pub struct PromptSet {
    role: PromptRole,
    branch: Branch,
    length: usize,
    depth: usize,
    tokens: Vec<Tensor>,
    frozen: bool,
}

impl PromptSet {
    /// Creates a freshly initialized, trainable prompt set. Tokens are drawn
    /// from `N(0, 0.02²)`, one independent stream per layer.
    pub fn init(
        role: PromptRole,
        branch: Branch,
        length: usize,
        depth: usize,
        dim: usize,
        seed: u64,
    ) -> Result<Self> {
        if length == 0 {
            return Err(Error::config("prompt length must be positive"));
        }
        if depth == 0 {
            return Err(Error::config("prompt depth must be positive"));
        }
        if dim == 0 {
            return Err(Error::config("prompt dim must be positive"));
        }
        let normal = Normal::new(0.0, PROMPT_INIT_STD).expect("valid init std");
        let tokens = (0..depth)
            .map(|l| {
                let mut rng = seeded(seed, &format!("prompt/{role}/{branch}/l{l}"));
                let data = (0..length * dim).map(|_| normal.sample(&mut rng)).collect();
                Tensor::new(vec![length, dim], data)
            })
            .collect();
        Ok(PromptSet { role, branch, length, depth, tokens, frozen: false })
    }

    pub fn role(&self) -> PromptRole {
        self.role
    }

    pub fn branch(&self) -> Branch {
        self.branch
    }

    /// Tokens per block.
    pub fn length(&self) -> usize {
        self.length
    }

    /// Number of encoder layers carrying (fresh) blocks; 1 means shallow.
    pub fn depth(&self) -> usize {
        self.depth
    }

    /// Embedding width of the blocks.
    pub fn dim(&self) -> usize {
        self.tokens[0].shape()[1]
    }

    /// True once the set is permanently read-only.
    pub fn frozen(&self) -> bool {
        self.frozen
    }

    /// Marks the set read-only. There is no way back.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Returns a trainable copy of a frozen set. This is the explicit escape
    /// hatch for the learnability ablation (co-training boosting prompts in
    /// the adapting phase); the original stays frozen, so the freezing
    /// invariant on the set it was copied from is preserved.
    pub fn thawed_copy(&self) -> PromptSet {
        PromptSet { frozen: false, ..self.clone() }
    }

    /// The token block for a layer, if the layer is within this set's depth.
    pub fn block(&self, layer: usize) -> Option<&Tensor> {
        self.tokens.get(layer)
    }

    /// Stable parameter id for a layer's block, e.g. `boosting.text.l00`.
    pub fn param_id(&self, layer: usize) -> String {
        format!("{}.{}.l{layer:02}", self.role, self.branch)
    }

    /// Total scalar count across all blocks.
    pub fn parameter_count(&self) -> usize {
        self.length * self.dim() * self.depth
    }

    /// Trainable [`Parameter`]s mirroring this set (respecting `frozen`).
    pub fn parameters(&self) -> Vec<Parameter> {
        (0..self.depth)
            .map(|l| Parameter {
                id: self.param_id(l),
                value: self.tokens[l].clone(),
                trainable: !self.frozen,
            })
            .collect()
    }

    /// Writes back an updated block. Frozen sets reject updates.
    pub fn update_block(&mut self, layer: usize, t: Tensor) -> Result<()> {
        if self.frozen {
            return Err(Error::contract(format!(
                "attempted to update frozen prompt set {}",
                self.param_id(layer)
            )));
        }
        let cur = self.tokens.get(layer).ok_or_else(|| {
            Error::contract(format!("prompt set has no layer {layer} (depth {})", self.depth))
        })?;
        if t.shape() != cur.shape() {
            return Err(Error::contract(format!(
                "prompt block shape {:?} does not match {:?}",
                t.shape(),
                cur.shape()
            )));
        }
        self.tokens[layer] = t;
        Ok(())
    }
}

/// Total scalar count across several prompt sets.
pub fn parameter_count(sets: &[&PromptSet]) -> usize {
    sets.iter().map(|s| s.parameter_count()).sum()
}

/// What occupies a span of positions in one layer's sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SegmentKind {
    Adapting,
    Boosting,
    /// Real tokens: CLS + patches (vision) or caption tokens (text).
    Content,
}

/// One contiguous segment in a layer's sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SegmentSpan {
    pub kind: SegmentKind,
    /// First row of the segment within the layer's sequence.
    pub start: usize,
    pub len: usize,
    /// True when the segment's rows are replaced before this layer (from the
    /// prompt blocks, or from the raw inputs for layer-0 content); false when
    /// they are carried over from the previous layer's output.
    pub fresh: bool,
}

/// The per-layer sequence layout for one encoder branch.
#[derive(Debug, Clone)]
pub struct CascadeLayout {
    branch: Branch,
    content_len: usize,
    layers: Vec<Vec<SegmentSpan>>,
}

impl CascadeLayout {
    pub fn branch(&self) -> Branch {
        self.branch
    }

    /// Number of real (non-prompt) tokens.
    pub fn content_len(&self) -> usize {
        self.content_len
    }

    /// Encoder depth this layout was built for.
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Segments of a layer, in sequence order.
    pub fn spans(&self, layer: usize) -> &[SegmentSpan] {
        &self.layers[layer]
    }

    /// Sequence length entering a layer.
    pub fn seq_len(&self, layer: usize) -> usize {
        self.layers[layer].iter().map(|s| s.len).sum()
    }

    /// Longest sequence across layers (for capacity checks).
    pub fn max_seq_len(&self) -> usize {
        (0..self.depth()).map(|l| self.seq_len(l)).max().unwrap_or(0)
    }

    /// The span of a given kind in a layer, if present.
    pub fn span(&self, layer: usize, kind: SegmentKind) -> Option<SegmentSpan> {
        self.layers[layer].iter().copied().find(|s| s.kind == kind)
    }

    /// Row index the similarity head reads from the final layer: the last
    /// content row for text (the class token position), the first content row
    /// for vision (CLS).
    pub fn readout_row(&self) -> usize {
        let last = self
            .layers
            .last()
            .expect("layout has at least one layer")
            .iter()
            .find(|s| s.kind == SegmentKind::Content)
            .expect("content never drops out");
        match self.branch {
            Branch::Text => last.start + last.len - 1,
            Branch::Vision => last.start,
        }
    }
}

/// Builds the per-layer layout for one branch from an optional boosting set
/// and an optional adapting set.
///
/// Contract: both sets must belong to `branch`; the boosting set must already
/// be frozen unless `allow_unfrozen_boosting` is set (the switch exists for
/// the ablation that co-trains boosting prompts); set depths must not exceed
/// the encoder depth.
pub fn cascade(
    boosting: Option<&PromptSet>,
    adapting: Option<&PromptSet>,
    branch: Branch,
    encoder_depth: usize,
    content_len: usize,
    allow_unfrozen_boosting: bool,
) -> Result<CascadeLayout> {
    if encoder_depth == 0 {
        return Err(Error::config("encoder depth must be positive"));
    }
    if content_len == 0 {
        return Err(Error::contract("cascade needs at least one content token"));
    }
    for (set, role) in [(boosting, PromptRole::Boosting), (adapting, PromptRole::Adapting)] {
        if let Some(s) = set {
            if s.role() != role {
                return Err(Error::contract(format!(
                    "cascade expected a {role} set, got {}",
                    s.role()
                )));
            }
            if s.branch() != branch {
                return Err(Error::contract(format!(
                    "cascade for the {branch} branch got a {} set",
                    s.branch()
                )));
            }
            if s.depth() > encoder_depth {
                return Err(Error::config(format!(
                    "{role} prompt depth {} exceeds encoder depth {encoder_depth}",
                    s.depth()
                )));
            }
        }
    }
    if let Some(b) = boosting {
        if !b.frozen() && !allow_unfrozen_boosting {
            return Err(Error::contract(
                "cascade requires a frozen boosting set (enable the override only for the \
                 co-training ablation)",
            ));
        }
    }
    if let (Some(b), Some(a)) = (boosting, adapting) {
        if b.dim() != a.dim() {
            return Err(Error::contract(format!(
                "boosting dim {} does not match adapting dim {}",
                b.dim(),
                a.dim()
            )));
        }
    }

    // A shallow set (depth 1) stays in the sequence for all layers; a deep set
    // is refreshed while `layer < depth` and dropped afterwards.
    let occupancy = |set: Option<&PromptSet>, layer: usize| -> Option<(usize, bool)> {
        let s = set?;
        let fresh = layer < s.depth();
        let alive = fresh || s.depth() == 1;
        alive.then_some((s.length(), fresh))
    };

    let mut layers = Vec::with_capacity(encoder_depth);
    for l in 0..encoder_depth {
        let mut spans = Vec::new();
        let mut pos = 0usize;
        let mut push = |kind: SegmentKind, len: usize, fresh: bool| {
            spans.push(SegmentSpan { kind, start: pos, len, fresh });
            pos += len;
        };
        let boost = occupancy(boosting, l);
        let adapt = occupancy(adapting, l);
        match branch {
            Branch::Text => {
                if let Some((len, fresh)) = adapt {
                    push(SegmentKind::Adapting, len, fresh);
                }
                if let Some((len, fresh)) = boost {
                    push(SegmentKind::Boosting, len, fresh);
                }
                push(SegmentKind::Content, content_len, l == 0);
            }
            Branch::Vision => {
                push(SegmentKind::Content, content_len, l == 0);
                if let Some((len, fresh)) = boost {
                    push(SegmentKind::Boosting, len, fresh);
                }
                if let Some((len, fresh)) = adapt {
                    push(SegmentKind::Adapting, len, fresh);
                }
            }
        }
        layers.push(spans);
    }
    Ok(CascadeLayout { branch, content_len, layers })
}

/// Layout with no prompts at all — plain encoding.
pub fn content_only(branch: Branch, encoder_depth: usize, content_len: usize) -> CascadeLayout {
    cascade(None, None, branch, encoder_depth, content_len, false)
        .expect("content-only layout is always valid")
}

#[derive(Debug, Serialize, Deserialize)]
struct PromptSetMeta {
    role: PromptRole,
    branch: Branch,
    length: usize,
    depth: usize,
    dim: usize,
    frozen: bool,
}

/// Saves prompt sets as a tensor bundle; layer blocks are stored under their
/// parameter ids and geometry lives in the manifest.
pub fn save_prompt_sets(
    bin_path: &Path,
    manifest_path: &Path,
    sets: &[&PromptSet],
    note: serde_json::Value,
) -> Result<()> {
    let metas: Vec<PromptSetMeta> = sets
        .iter()
        .map(|s| PromptSetMeta {
            role: s.role(),
            branch: s.branch(),
            length: s.length(),
            depth: s.depth(),
            dim: s.dim(),
            frozen: s.frozen(),
        })
        .collect();
    let mut tensors: Vec<(String, &Tensor)> = Vec::new();
    for s in sets {
        for l in 0..s.depth() {
            tensors.push((s.param_id(l), s.block(l).expect("layer within depth")));
        }
    }
    let refs: Vec<(&str, &Tensor)> = tensors.iter().map(|(id, t)| (id.as_str(), *t)).collect();
    let extra = serde_json::json!({ "kind": "prompt-sets", "sets": metas, "note": note });
    checkpoint::save(bin_path, manifest_path, refs, extra)?;
    Ok(())
}

/// Loads prompt sets saved by [`save_prompt_sets`], restoring frozen flags.
pub fn load_prompt_sets(bin_path: &Path, manifest_path: &Path) -> Result<Vec<PromptSet>> {
    let manifest = checkpoint::load_manifest(manifest_path)?;
    let metas: Vec<PromptSetMeta> = serde_json::from_value(
        manifest.extra.get("sets").cloned().ok_or_else(|| Error::Io {
            path: manifest_path.to_path_buf(),
            detail: "prompt manifest missing set descriptors".into(),
        })?,
    )
    .map_err(|e| Error::Io { path: manifest_path.to_path_buf(), detail: e.to_string() })?;
    let all = checkpoint::load_all::<f64>(bin_path, &manifest)?;
    let mut out = Vec::with_capacity(metas.len());
    for m in metas {
        let mut set = PromptSet::init(m.role, m.branch, m.length, m.depth, m.dim, 0)?;
        for l in 0..m.depth {
            let id = set.param_id(l);
            let t = all.get(&id).ok_or_else(|| Error::Io {
                path: bin_path.to_path_buf(),
                detail: format!("prompt bundle missing block {id}"),
            })?;
            set.update_block(l, t.clone())?;
        }
        if m.frozen {
            set.freeze();
        }
        out.push(set);
    }
    Ok(out)
}
