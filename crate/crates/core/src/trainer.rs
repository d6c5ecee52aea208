//! Deterministic mini-batch training with teacher forcing, plus checkpoints.
//!
//! All randomness (initialization, epoch permutations, random embedding rows)
//! flows from `TrainConfig::seed`, and batch gradients are summed in batch
//! order, so a checkpoint is a pure function of corpus, features and config.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;

use crate::corpus::{FeatureTable, ImageRecord, Split, Vocabulary};
use crate::encoder::load_pretrained_embeddings;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seq_model::{Example, Gradients, Model, ModelDims};
use crate::tensor::cast_vec;

pub const CHECKPOINT_VERSION: u32 = 1;
const INIT_SCALE: f64 = 0.08;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Training hyperparameters. The defaults are sized for minutes-long runs on
/// a laptop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub d_img: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Maximum global L2 norm of the batch gradient.
    pub grad_clip: f64,
    /// Questions are truncated to this many words.
    pub max_len: usize,
    pub seed: u64,
    pub embeddings_trainable: bool,
    pub pretrained_embedding_path: Option<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            hidden_dim: 64,
            d_img: 16,
            optimizer: OptimizerKind::Adam,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 300,
            batch_size: 8,
            grad_clip: 5.0,
            max_len: 20,
            seed: 42,
            embeddings_trainable: true,
            pretrained_embedding_path: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.embed_dim == 0 || self.hidden_dim == 0 || self.d_img == 0 {
            return bad("embed_dim, hidden_dim and d_img must be ≥ 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            return bad(format!("adam betas must lie in (0, 1): {} {}", self.beta1, self.beta2));
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            return bad("adam_eps must be positive".into());
        }
        if self.batch_size == 0 || self.max_len == 0 {
            return bad("batch_size and max_len must be ≥ 1".into());
        }
        if self.grad_clip.is_nan() || self.grad_clip <= 0.0 {
            return bad("grad_clip must be positive".into());
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn dims(&self, vocab_size: usize) -> ModelDims {
        ModelDims {
            vocab_size,
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
            feature_dim: self.d_img,
        }
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamMoments<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Scalar> AdamMoments<T> {
    pub fn zeros(len: usize) -> Self {
        Self {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
        }
    }
}

/// Bias-corrected Adam update for step `t ≥ 1`:
/// `p -= lr · m̂ / (√v̂ + ε)`.
pub fn adam_step<T: Scalar>(param: &mut [T], grad: &[T], moments: &mut AdamMoments<T>, t: u64, cfg: &AdamConfig) {
    debug_assert!(t >= 1);
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let one = T::one();
    let c1 = one - b1.powi(t as i32);
    let c2 = one - b2.powi(t as i32);
    let (lr, eps) = (T::of(cfg.lr), T::of(cfg.eps));
    for (((p, &g), m), v) in param
        .iter_mut()
        .zip(grad)
        .zip(moments.m.iter_mut())
        .zip(moments.v.iter_mut())
    {
        *m = b1 * *m + (one - b1) * g;
        *v = b2 * *v + (one - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut Gradients<T>, max_norm: T) -> T {
    let norm = grads.squared_norm().sqrt();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

enum OptimizerState {
    Sgd,
    Adam { moments: Vec<AdamMoments<f64>>, t: u64 },
}

impl OptimizerState {
    fn new(config: &TrainConfig, model: &Model<f64>) -> Self {
        match config.optimizer {
            OptimizerKind::Sgd => OptimizerState::Sgd,
            OptimizerKind::Adam => OptimizerState::Adam {
                moments: model
                    .tensors()
                    .iter()
                    .map(|t| AdamMoments::zeros(t.data.len()))
                    .collect(),
                t: 0,
            },
        }
    }

    fn apply(&mut self, config: &TrainConfig, model: &mut Model<f64>, grads: &Gradients<f64>) {
        let frozen_embeddings = !model.embeddings.trainable;
        let names = Model::<f64>::tensor_names();
        match self {
            OptimizerState::Sgd => {
                for ((p, g), name) in model.tensors_mut().into_iter().zip(grads.tensors()).zip(names) {
                    if frozen_embeddings && *name == "embeddings" {
                        continue;
                    }
                    for (pi, &gi) in p.iter_mut().zip(g.data) {
                        *pi -= config.lr * gi;
                    }
                }
            }
            OptimizerState::Adam { moments, t } => {
                *t += 1;
                let cfg = config.adam();
                for (((p, g), m), name) in model
                    .tensors_mut()
                    .into_iter()
                    .zip(grads.tensors())
                    .zip(moments.iter_mut())
                    .zip(names)
                {
                    if frozen_embeddings && *name == "embeddings" {
                        continue;
                    }
                    adam_step(p, g.data, m, *t, &cfg);
                }
            }
        }
    }
}

/// One example per (image, question) pair of the records, in record order.
pub fn build_examples<T: Scalar>(
    records: &[&ImageRecord],
    features: &FeatureTable,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<Vec<Example<T>>> {
    let mut out = Vec::new();
    for r in records {
        let feature: Vec<T> = cast_vec(features.require(&r.image_id)?);
        let keywords = vocab.encode(&r.keywords);
        for q in &r.questions {
            out.push(Example {
                feature: feature.clone(),
                keywords: keywords.clone(),
                target: vocab.encode_target(q, max_len),
            });
        }
    }
    Ok(out)
}

/// `exp` of the mean per-label cross-entropy over all examples.
pub fn perplexity_of<T: Scalar>(model: &Model<T>, examples: &[Example<T>]) -> Result<f64> {
    let per_example: Vec<(f64, usize)> = examples
        .par_iter()
        .map(|ex| {
            model
                .forward(ex)
                .map(|t| (t.total_nll().to_f64_lossy(), t.n_labels))
        })
        .collect::<Result<_>>()?;
    let (nll, labels) = per_example
        .iter()
        .fold((0.0, 0usize), |(a, n), &(b, m)| (a + b, n + m));
    if labels == 0 {
        return Err(Error::Invalid("no labels to compute perplexity over".into()));
    }
    Ok((nll / labels as f64).exp())
}

/// Mean per-example loss.
fn mean_loss(model: &Model<f64>, examples: &[Example<f64>]) -> Result<f64> {
    let losses: Vec<f64> = examples
        .par_iter()
        .map(|ex| model.loss(ex))
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

/// Mean of per-example gradients, summed in slice order.
pub fn batch_gradient(model: &Model<f64>, batch: &[&Example<f64>]) -> Result<(f64, Gradients<f64>)> {
    let parts: Vec<(f64, Gradients<f64>)> = batch
        .par_iter()
        .map(|ex| model.loss_and_grad(ex))
        .collect::<Result<_>>()?;
    let mut total = model.zeros_like();
    let mut loss = 0.0;
    for (l, g) in &parts {
        loss += l;
        total.add_assign(g);
    }
    let n = batch.len() as f64;
    total.scale(1.0 / n);
    Ok((loss / n, total))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Mean training loss of the initialized model.
    pub initial_loss: f64,
    /// Running mean of batch losses, one entry per epoch.
    pub epoch_losses: Vec<f64>,
    /// Validation perplexity before training followed by one entry per
    /// epoch; empty when there is no validation split.
    pub val_perplexity: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: ModelCheckpoint,
    pub history: TrainHistory,
}

pub fn initial_model(vocab: &Vocabulary, config: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Model<f64>> {
    let dims = config.dims(vocab.len());
    dims.validate()?;
    let mut model = Model::random(dims, INIT_SCALE, rng);
    if let Some(path) = &config.pretrained_embedding_path {
        let table = load_pretrained_embeddings::<f64>(path, vocab, config.seed, config.embeddings_trainable)?;
        if table.dim() != config.embed_dim {
            return Err(Error::Config(format!(
                "pretrained embeddings have dimension {}, config embed_dim is {}",
                table.dim(),
                config.embed_dim
            )));
        }
        model.embeddings = table;
    }
    model.embeddings.trainable = config.embeddings_trainable;
    Ok(model)
}

/// Trains on the `train` split, monitoring perplexity on `val`.
pub fn train(
    records: &[ImageRecord],
    features: &FeatureTable,
    vocab: &Vocabulary,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if features.dim() != config.d_img {
        return Err(Error::Config(format!(
            "features have dimension {}, config d_img is {}",
            features.dim(),
            config.d_img
        )));
    }
    let train_recs: Vec<&ImageRecord> = records.iter().filter(|r| r.split == Split::Train).collect();
    let val_recs: Vec<&ImageRecord> = records.iter().filter(|r| r.split == Split::Val).collect();
    let train_set = build_examples::<f64>(&train_recs, features, vocab, config.max_len)?;
    let val_set = build_examples::<f64>(&val_recs, features, vocab, config.max_len)?;
    if train_set.is_empty() {
        return Err(Error::Invalid("training split has no (image, question) pairs".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = initial_model(vocab, config, &mut rng)?;
    let mut optimizer = OptimizerState::new(config, &model);

    let initial_loss = mean_loss(&model, &train_set)?;
    let mut history = TrainHistory {
        initial_loss,
        epoch_losses: Vec::with_capacity(config.epochs),
        val_perplexity: Vec::new(),
    };
    if !val_set.is_empty() {
        history.val_perplexity.push(perplexity_of(&model, &val_set)?);
    }
    log::info!(
        "training on {} pairs ({} val), {} parameters, initial loss {:.4}",
        train_set.len(),
        val_set.len(),
        model.num_parameters(),
        initial_loss
    );

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Example<f64>> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (loss, mut grads) = batch_gradient(&model, &batch)?;
            clip_global_norm(&mut grads, config.grad_clip);
            optimizer.apply(config, &mut model, &grads);
            epoch_loss += loss;
            batches += 1;
        }
        let epoch_loss = epoch_loss / batches as f64;
        history.epoch_losses.push(epoch_loss);
        if !val_set.is_empty() {
            let ppl = perplexity_of(&model, &val_set)?;
            history.val_perplexity.push(ppl);
            log::info!("epoch {epoch}: train loss {epoch_loss:.4}, val perplexity {ppl:.3}");
        } else {
            log::info!("epoch {epoch}: train loss {epoch_loss:.4}");
        }
    }
    if !model.is_finite() {
        return Err(Error::Invalid("training diverged: non-finite parameters".into()));
    }

    let final_loss = mean_loss(&model, &train_set)?;
    Ok(TrainOutcome {
        checkpoint: ModelCheckpoint {
            config: config.clone(),
            vocab: vocab.clone(),
            model,
            epoch: config.epochs,
            final_loss,
        },
        history,
    })
}

/// Parameters, config and vocabulary: everything needed to decode or resume.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub config: TrainConfig,
    pub vocab: Vocabulary,
    pub model: Model<f64>,
    pub epoch: usize,
    pub final_loss: f64,
}

#[derive(Serialize)]
struct TensorOut<'a> {
    name: &'a str,
    shape: [usize; 2],
    data: Box<RawValue>,
}

#[derive(Serialize)]
struct CheckpointOut<'a> {
    version: u32,
    config: &'a TrainConfig,
    vocab: &'a Vocabulary,
    tensors: Vec<TensorOut<'a>>,
    epoch: usize,
    final_loss: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorIn {
    name: String,
    shape: [usize; 2],
    data: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointIn {
    version: u32,
    config: TrainConfig,
    vocab: Vocabulary,
    tensors: Vec<TensorIn>,
    epoch: usize,
    final_loss: f64,
}

/// `[v₁,v₂,…]` with 17 significant digits per value.
fn format_reals(data: &[f64]) -> Result<Box<RawValue>> {
    let mut s = String::with_capacity(data.len() * 24 + 2);
    s.push('[');
    for (i, v) in data.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::Checkpoint("cannot serialize non-finite parameter".into()));
        }
        if i > 0 {
            s.push(',');
        }
        s.push_str(&format!("{v:.16e}"));
    }
    s.push(']');
    Ok(RawValue::from_string(s)?)
}

impl ModelCheckpoint {
    pub fn to_json(&self) -> Result<String> {
        let tensors = self
            .model
            .tensors()
            .into_iter()
            .map(|t| {
                Ok(TensorOut {
                    name: t.name,
                    shape: t.shape,
                    data: format_reals(t.data)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let doc = CheckpointOut {
            version: CHECKPOINT_VERSION,
            config: &self.config,
            vocab: &self.vocab,
            tensors,
            epoch: self.epoch,
            final_loss: self.final_loss,
        };
        let mut s = serde_json::to_string(&doc)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: CheckpointIn = serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if doc.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", doc.version)));
        }
        doc.config.validate()?;
        for t in &doc.tensors {
            if t.shape[0] * t.shape[1] != t.data.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` declares shape {:?} but holds {} values",
                    t.name,
                    t.shape,
                    t.data.len()
                )));
            }
        }
        let dims = doc.config.dims(doc.vocab.len());
        let views: Vec<(&str, [usize; 2], &[f64])> = doc
            .tensors
            .iter()
            .map(|t| (t.name.as_str(), t.shape, t.data.as_slice()))
            .collect();
        let mut model = Model::from_tensors(dims, &views).map_err(|e| Error::Checkpoint(e.to_string()))?;
        model.embeddings.trainable = doc.config.embeddings_trainable;
        Ok(Self {
            config: doc.config,
            vocab: doc.vocab,
            model,
            epoch: doc.epoch,
            final_loss: doc.final_loss,
        })
    }

    /// Written atomically (temporary file, then rename).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::corpus::write_atomic(path.as_ref(), self.to_json()?.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// Perplexity over every (image, question) pair of `records`.
    pub fn perplexity(&self, records: &[ImageRecord], features: &FeatureTable) -> Result<f64> {
        let refs: Vec<&ImageRecord> = records.iter().collect();
        let examples = build_examples::<f64>(&refs, features, &self.vocab, self.config.max_len)?;
        perplexity_of(&self.model, &examples)
    }
}
