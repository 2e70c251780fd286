//! From-scratch contrastive pretraining of a dual encoder.
//!
//! The laboratory cannot download pretrained weights, so both the teacher and
//! the student earn their zero-shot ability here: symmetric cross-entropy over
//! the in-batch image–caption similarity matrix, the standard recipe for
//! aligning two encoders in a shared space.
//!
//! Batches are assembled from *distinct* classes. With synthetic captions
//! there is exactly one caption per class, so allowing a class to repeat
//! within a batch would make two rows share a caption and turn the
//! contrastive targets self-contradictory. One epoch runs `per-class image
//! count` rounds; each round shuffles the class order and chunks it into
//! batches, pairing every class with one of its images.
//!
//! # The uniform-similarity trap and the centered warmup
//!
//! A randomly initialized encoder pair emits features dominated by
//! input-independent components (position embeddings, CLS token), so the
//! initial similarity matrix is nearly uniform. Under the plain cosine
//! objective that near-uniformity is a *stable* fixpoint: the cheapest descent
//! direction on a random model is to flatten the similarity matrix outright by
//! erasing the weak input pathway, and once features stop depending on the
//! input, the per-batch gradients cancel exactly — loss pins at ln(batch) and
//! retrieval at chance, permanently. Desk-scale encoders fall in at every
//! learning rate.
//!
//! The first [`PretrainConfig::warmup_epochs`] therefore train on
//! *batch-centered* logits: the per-batch column mean of each feature matrix
//! is subtracted before rows are re-normalized, which deletes the shared
//! constant direction from the objective. "Agreeing by being constant" becomes
//! inexpressible — the renormalized residual is pure input-driven variation,
//! so the trap turns repulsive and the alignment signal is the only descent
//! direction left. Once alignment has formed, the remaining epochs switch to
//! the deployed objective (cosine similarity at the learnable temperature)
//! that the zero-shot classifier uses.
//!
//! Centering alone leaves the feature means themselves untrained, and a large
//! modality mean makes the switch hazardous: under the plain objective the
//! mean–mean term is softmax-invariant, but the mean–residual cross terms act
//! as row/column biases that can swamp the freshly learned alignment (the
//! wider the encoder, the worse). The warmup loss therefore adds a
//! mean-suppression penalty ([`GAP_WEIGHT`] × squared norms of both batch
//! means). On unit-normalized rows this is a hypersphere uniformity pressure:
//! it spreads each modality's features around the sphere instead of letting
//! them huddle in one cap, so the model arrives at the switch already
//! compatible with the deployed similarity.

use rand::seq::SliceRandom;

use caspl_autodiff::{Adam, NodeId, Tape, Tensor};

use crate::domain::Dataset;
use crate::error::{Error, Result};
use crate::model::{
    argmax_rows, encode_image, encode_text, no_prompt_nodes, scaled_logits, MiniClip,
    ModelBinder, LOGIT_TEMP_RANGE,
};
use crate::prompts::{content_only, Branch};
use crate::rng::seeded;
use crate::tokenizer::{TemplateSpec, Vocab};

/// Pretraining hyperparameters.
#[derive(Debug, Clone)]
pub struct PretrainConfig {
    pub epochs: usize,
    /// Distinct classes (= pairs) per batch.
    pub batch_size: usize,
    pub lr: f64,
    /// First-moment decay (β₁) of the adaptive optimizer. Contrastive
    /// pretraining uses Adam: with plain SGD the weak input-embedding
    /// pathways starve and training falls into the uniform-similarity
    /// collapse. The phases keep SGD.
    pub momentum: f64,
    /// Leading epochs trained on batch-centered logits (see the module docs).
    /// Clamped to `epochs`; 0 disables the warmup.
    pub warmup_epochs: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 12,
            batch_size: 10,
            lr: 1e-3,
            momentum: 0.9,
            warmup_epochs: 4,
            seed: 0,
        }
    }
}

/// An image–caption corpus: the training split of a dataset paired with one
/// tokenized caption per class (rendered from the dataset's template).
#[derive(Debug, Clone)]
pub struct PairedCorpus {
    images: Vec<Tensor>,
    class_of: Vec<usize>,
    captions: Vec<Vec<u32>>,
    num_classes: usize,
}

impl PairedCorpus {
    pub fn from_dataset(ds: &Dataset, vocab: &Vocab) -> Result<Self> {
        let spec = ds.spec();
        let template = TemplateSpec::by_id(&spec.template_id)?;
        let captions: Result<Vec<Vec<u32>>> = spec
            .class_names
            .iter()
            .map(|name| vocab.tokenize(&template.render(name)))
            .collect();
        let captions = captions?;
        let mut images = Vec::new();
        let mut class_of = Vec::new();
        for c in 0..spec.num_classes() {
            for i in ds.train_indices(c) {
                images.push(ds.image(i).clone());
                class_of.push(c);
            }
        }
        Ok(PairedCorpus { images, class_of, captions, num_classes: spec.num_classes() })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_images(&self) -> usize {
        self.images.len()
    }
}

/// One epoch's summary.
#[derive(Debug, Clone, Copy)]
pub struct PretrainEpoch {
    pub epoch: usize,
    /// Mean symmetric loss per pair.
    pub loss: f64,
    /// In-batch image→caption top-1 retrieval over the epoch.
    pub retrieval: f64,
    /// Learned softmax temperature at the end of the epoch.
    pub temperature: f64,
}

/// Full pretraining record.
#[derive(Debug, Clone)]
pub struct PretrainMetrics {
    /// Per-direction losses of the very first batch, before any update. On a
    /// random model both sit near ln(batch): the similarity matrix is close
    /// to uniform.
    pub first_batch_loss_i2t: f64,
    pub first_batch_loss_t2i: f64,
    pub per_epoch: Vec<PretrainEpoch>,
}

/// Trains both encoders and the temperature with symmetric contrastive
/// cross-entropy. Mutates the model in place.
pub fn contrastive_pretrain(
    model: &mut MiniClip,
    corpus: &PairedCorpus,
    cfg: &PretrainConfig,
) -> Result<PretrainMetrics> {
    if cfg.batch_size < 2 {
        return Err(Error::contract(
            "contrastive loss is undefined for batch size 1 (nothing to contrast against)",
        ));
    }
    if cfg.batch_size > corpus.num_classes {
        return Err(Error::config(format!(
            "batch size {} exceeds the {} distinct classes available",
            cfg.batch_size, corpus.num_classes
        )));
    }
    if cfg.epochs == 0 {
        return Err(Error::config("pretraining needs at least one epoch"));
    }
    if !(cfg.lr.is_finite() && cfg.lr > 0.0) {
        return Err(Error::config(format!("learning rate must be positive, got {}", cfg.lr)));
    }
    if model.is_frozen() {
        return Err(Error::contract("cannot pretrain a frozen model"));
    }

    // Per-class image index lists.
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); corpus.num_classes];
    for (i, &c) in corpus.class_of.iter().enumerate() {
        by_class[c].push(i);
    }
    let rounds = by_class.iter().map(Vec::len).min().unwrap_or(0);
    if rounds == 0 {
        return Err(Error::config("every class needs at least one training image"));
    }

    let cfg_model = *model.cfg();
    let vision_layout = content_only(Branch::Vision, cfg_model.depth, 1 + cfg_model.num_patches());
    let caption_len = corpus.captions[0].len();
    if corpus.captions.iter().any(|c| c.len() != caption_len) {
        return Err(Error::contract("captions from one template must share one length"));
    }
    let text_layout = content_only(Branch::Text, cfg_model.depth, caption_len);

    let mut opt = Adam::with_betas(cfg.lr, cfg.momentum, 0.999)?;
    let mut metrics = PretrainMetrics {
        first_batch_loss_i2t: f64::NAN,
        first_batch_loss_t2i: f64::NAN,
        per_epoch: Vec::with_capacity(cfg.epochs),
    };

    for epoch in 0..cfg.epochs {
        let mut class_images: Vec<Vec<usize>> = by_class.clone();
        for (c, list) in class_images.iter_mut().enumerate() {
            let mut rng = seeded(cfg.seed, &format!("pretrain/epoch{epoch}/class{c}"));
            list.shuffle(&mut rng);
        }
        let mut loss_sum = 0.0;
        let mut pair_count = 0usize;
        let mut hits = 0usize;
        for round in 0..rounds {
            let mut order: Vec<usize> = (0..corpus.num_classes).collect();
            let mut rng = seeded(cfg.seed, &format!("pretrain/epoch{epoch}/round{round}"));
            order.shuffle(&mut rng);
            for chunk in order.chunks(cfg.batch_size) {
                if chunk.len() < 2 {
                    continue; // a trailing singleton has nothing to contrast against
                }
                let image_refs: Vec<&Tensor> =
                    chunk.iter().map(|&c| &corpus.images[class_images[c][round]]).collect();
                let caption_refs: Vec<&[u32]> =
                    chunk.iter().map(|&c| corpus.captions[c].as_slice()).collect();
                let targets: Vec<usize> = (0..chunk.len()).collect();

                let mut tape: Tape = Tape::new();
                let mut binder = ModelBinder::new(model, true);
                let mut provider = no_prompt_nodes();
                let (img_f, _) = encode_image(
                    &mut tape,
                    &mut binder,
                    &vision_layout,
                    &mut provider,
                    &image_refs,
                )?;
                let (txt_f, _) = encode_text(
                    &mut tape,
                    &mut binder,
                    &text_layout,
                    &mut provider,
                    &caption_refs,
                )?;
                let (logits_i2t, logits_t2i, gap) = if epoch < cfg.warmup_epochs {
                    let (ci, mi) = centered_rows(&mut tape, img_f, chunk.len())?;
                    let (ct, mt) = centered_rows(&mut tape, txt_f, chunk.len())?;
                    let gap = mean_norm_penalty(&mut tape, mi, mt)?;
                    (tape.matmul_nt(ci, ct)?, tape.matmul_nt(ct, ci)?, Some(gap))
                } else {
                    let i2t = scaled_logits(&mut tape, &mut binder, img_f, txt_f)?;
                    let t2i = scaled_logits(&mut tape, &mut binder, txt_f, img_f)?;
                    (i2t, t2i, None)
                };
                let loss_i2t = tape.cross_entropy(logits_i2t, &targets)?;
                let loss_t2i = tape.cross_entropy(logits_t2i, &targets)?;
                let both = tape.add(loss_i2t, loss_t2i)?;
                let mut loss = tape.scale(both, 0.5);
                if let Some(gap) = gap {
                    let weighted = tape.scale(gap, GAP_WEIGHT);
                    loss = tape.add(loss, weighted)?;
                }

                if metrics.first_batch_loss_i2t.is_nan() {
                    metrics.first_batch_loss_i2t = tape.value(loss_i2t).data()[0];
                    metrics.first_batch_loss_t2i = tape.value(loss_t2i).data()[0];
                }
                // The loss column tracks the contrastive objective itself; the
                // warmup's penalty term is excluded so the two phases stay
                // comparable.
                let ce = 0.5
                    * (tape.value(loss_i2t).data()[0] + tape.value(loss_t2i).data()[0]);
                loss_sum += ce * chunk.len() as f64;
                pair_count += chunk.len();
                let preds = argmax_rows(tape.value(logits_i2t))?;
                hits += preds.iter().zip(&targets).filter(|(p, t)| p == t).count();

                let grads = tape.backward(loss)?;
                opt.step(model.parameters_mut(), &grads)?;
                clamp_temperature(model);
            }
        }
        metrics.per_epoch.push(PretrainEpoch {
            epoch,
            loss: loss_sum / pair_count as f64,
            retrieval: hits as f64 / pair_count as f64,
            temperature: model.temperature(),
        });
    }
    Ok(metrics)
}

/// Weight of the warmup's mean-suppression penalty (see the module docs).
const GAP_WEIGHT: f64 = 0.5;

/// Subtracts the per-column batch mean from a feature matrix and re-normalizes
/// the rows: the warmup objective's view of the features. Returns the centered
/// rows together with the batch-mean row. Differentiable — built from the
/// tape's own kernels so gradients flow through the centering.
fn centered_rows(tape: &mut Tape, features: NodeId, rows: usize) -> Result<(NodeId, NodeId)> {
    let col_mean = {
        let averager = Tensor::new(vec![1, rows], vec![1.0 / rows as f64; rows]);
        let a = tape.constant(averager);
        tape.matmul(a, features)?
    };
    let tiled = {
        let ones = tape.constant(Tensor::new(vec![rows, 1], vec![1.0; rows]));
        tape.matmul(ones, col_mean)?
    };
    let neg_mean = tape.scale(tiled, -1.0);
    let centered = tape.add(features, neg_mean)?;
    Ok((tape.l2_normalize_rows(centered)?, col_mean))
}

/// Sum of squared norms of the two batch-mean rows: the warmup's pressure
/// toward zero modality gap.
fn mean_norm_penalty(tape: &mut Tape, mean_a: NodeId, mean_b: NodeId) -> Result<NodeId> {
    let sq_a = tape.mul(mean_a, mean_a)?;
    let sq_b = tape.mul(mean_b, mean_b)?;
    let sum_a = tape.sum(sq_a);
    let sum_b = tape.sum(sq_b);
    Ok(tape.add(sum_a, sum_b)?)
}

/// Keeps the learnable temperature inside its sanctioned range after a step
/// (the usual guard against runaway similarity scales).
fn clamp_temperature(model: &mut MiniClip) {
    let (lo, hi) = (LOGIT_TEMP_RANGE.0.ln(), LOGIT_TEMP_RANGE.1.ln());
    let p = model
        .parameters_mut()
        .find(|p| p.id == "logit_temp")
        .expect("model always has a temperature");
    let v = p.value.data()[0].clamp(lo, hi);
    if v != p.value.data()[0] {
        p.value = Tensor::new(vec![1], vec![v]);
    }
}
