//! Training objectives and the optimizer step.
//!
//! The generative loss is the mean next-event NLL over all predicted
//! positions of a batch. The contrastive loss pulls together profile
//! embeddings of users that a [`PositivePairPolicy`] marks as similar,
//! with every other in-batch user in the denominator. A step mixes them
//! as `(1-λ)·L_gen + λ·L_CL`.

mod trainer;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, PantherError, Result};
use crate::model::{forward_on_tape, output_mask, profile_on_tape, Model, ModelConfig, ModelParams, ModelWeights};
use crate::tensor::{RowMask, Scalar, Tape, Tensor, Var};
use crate::tokenizer::{AttributeDef, PAD_ID};

pub use trainer::{build_examples, fine_tune, lambda_sweep, train, transfer_weights, EpochLog, SweepRow, TrainOutcome};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Weight of the contrastive term, in `[0, 1]`.
    pub lambda: f64,
    /// Distance temperature of the contrastive softmax.
    pub temperature: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            temperature: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(config_err(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if !(self.temperature > 0.0) {
            return Err(config_err(format!("temperature {} must be positive", self.temperature)));
        }
        Ok(())
    }
}

/// One profile attribute condition. `Exact` is `Within` with `delta = 0`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum PairRule {
    Exact { attribute: String },
    /// Value positions in the schema differ by at most `delta`.
    Within { attribute: String, delta: usize },
}

/// Users `i != j` form a positive pair when every rule holds. Unknown
/// profile values never match.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositivePairPolicy {
    pub rules: Vec<PairRule>,
}

impl Default for PositivePairPolicy {
    fn default() -> Self {
        Self {
            rules: vec![
                PairRule::Exact {
                    attribute: "region".into(),
                },
                PairRule::Within {
                    attribute: "age_bucket".into(),
                    delta: 1,
                },
            ],
        }
    }
}

impl PositivePairPolicy {
    fn compile(&self, schema: &[AttributeDef]) -> Result<Vec<(usize, usize)>> {
        self.rules
            .iter()
            .map(|r| {
                let (name, delta) = match r {
                    PairRule::Exact { attribute } => (attribute, 0),
                    PairRule::Within { attribute, delta } => (attribute, *delta),
                };
                schema
                    .iter()
                    .position(|a| &a.name == name)
                    .map(|p| (p, delta))
                    .ok_or_else(|| PantherError::Schema(format!("pair rule names unknown attribute `{name}`")))
            })
            .collect()
    }

    /// Row-major `B×B` mask over profile indices (as produced by
    /// [`ModelConfig::profile_indices`]); the diagonal is false.
    pub fn pair_mask(&self, schema: &[AttributeDef], profiles: &[Vec<usize>]) -> Result<Vec<bool>> {
        let rules = self.compile(schema)?;
        let b = profiles.len();
        let mut mask = vec![false; b * b];
        for i in 0..b {
            for j in 0..b {
                mask[i * b + j] = i != j
                    && rules.iter().all(|&(pos, delta)| {
                        let (x, y) = (profiles[i][pos], profiles[j][pos]);
                        x != 0 && y != 0 && x.abs_diff(y) <= delta
                    });
            }
        }
        Ok(mask)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub epochs: usize,
    pub clip_norm: f64,
    pub seed: u64,
    /// Independent gradient shards per batch.
    pub shards: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            epochs: 10,
            clip_norm: 1.0,
            seed: 0,
            shards: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.learning_rate, self.epsilon, self.clip_norm];
        if self.batch_size == 0 || self.shards == 0 || positive.iter().any(|&x| !(x > 0.0)) {
            return Err(config_err("batch size, shards, learning rate, epsilon and clip norm must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(config_err("Adam betas must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// A training sequence: token ids (no profile slot) and profile indices.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub user_id: String,
    pub tokens: Vec<u32>,
    pub profile: Vec<usize>,
}

/// Summed NLL of every token of `tokens` given its prefix, and the number
/// of predicted positions. Trailing PAD ids are dropped.
pub fn sequence_nll<T: Scalar>(
    tape: &mut Tape<T>,
    w: &ModelWeights<Var>,
    cfg: &ModelConfig,
    tokens: &[u32],
    profile: &[usize],
) -> Result<Option<(Var, usize)>> {
    let n = tokens.iter().rposition(|&t| t != PAD_ID).map_or(0, |i| i + 1);
    if n == 0 {
        return Ok(None);
    }
    let tokens = &tokens[..n];
    let out = forward_on_tape(tape, w, cfg, &tokens[..n - 1], profile)?;
    let targets: Vec<Option<usize>> = tokens.iter().map(|&t| Some(t as usize)).collect();
    let nll = tape.nll_sum(out.logits, &targets, &output_mask(cfg.vocab_size))?;
    Ok(Some((nll, n)))
}

/// Mean generative loss of `batch` under `model`.
pub fn generative_loss(model: &Model, batch: &[Example]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0;
    for ex in batch {
        let mut tape = Tape::<f32>::new();
        let w = model.params.bind(&mut tape, false);
        if let Some((nll, n)) = sequence_nll(&mut tape, &w, &model.config, &ex.tokens, &ex.profile)? {
            total += tape.value(nll).item() as f64;
            count += n;
        }
    }
    if count == 0 {
        return Err(PantherError::Empty("batch has no non-pad positions".into()));
    }
    Ok(total / count as f64)
}

/// Mean generative loss and its gradient. The batch is split into
/// `shards` contiguous parts whose gradient sums are added in order.
pub fn generative_gradients(params: &ModelParams, cfg: &ModelConfig, batch: &[Example], shards: usize) -> Result<(f64, ModelParams)> {
    let size = batch.len().div_ceil(shards.max(1)).max(1);
    let parts: Vec<Result<(f64, usize, ModelParams)>> = batch
        .par_chunks(size)
        .map(|chunk| {
            let mut grads = params.zeros_like();
            let mut loss = 0.0;
            let mut count = 0;
            for ex in chunk {
                let mut tape = Tape::<f32>::new();
                let w = params.bind(&mut tape, true);
                let Some((nll, n)) = sequence_nll(&mut tape, &w, cfg, &ex.tokens, &ex.profile)? else {
                    continue;
                };
                loss += tape.value(nll).item() as f64;
                count += n;
                tape.backward(nll)?;
                accumulate(&mut grads, &w, &tape, 1.0);
            }
            Ok((loss, count, grads))
        })
        .collect();
    let mut grads = params.zeros_like();
    let mut loss = 0.0;
    let mut count = 0;
    for part in parts {
        let (l, c, g) = part?;
        loss += l;
        count += c;
        for (dst, src) in grads.slots_mut().into_iter().zip(g.slots()) {
            add_scaled(dst, src, 1.0);
        }
    }
    if count == 0 {
        return Err(PantherError::Empty("batch has no non-pad positions".into()));
    }
    let inv = 1.0 / count as f32;
    grads.visit_mut(&mut |g| g.data_mut().iter_mut().for_each(|x| *x *= inv));
    Ok((loss / count as f64, grads))
}

fn accumulate(grads: &mut ModelParams, w: &ModelWeights<Var>, tape: &Tape<f32>, scale: f32) {
    for (dst, &v) in grads.slots_mut().into_iter().zip(w.slots()) {
        if let Some(g) = tape.grad(v) {
            for (d, &x) in dst.data_mut().iter_mut().zip(g) {
                *d += scale * x;
            }
        }
    }
}

fn add_scaled(dst: &mut Tensor, src: &Tensor, scale: f32) {
    for (d, &x) in dst.data_mut().iter_mut().zip(src.data()) {
        *d += scale * x;
    }
}

/// Contrastive loss over the rows of `e[B×d]`:
/// the mean over positive pairs `(i, j)` of
/// `-log( exp(-‖e_i-e_j‖/τ) / Σ_{k≠i} exp(-‖e_i-e_k‖/τ) )`.
/// Returns `None` when the mask holds no pair.
pub fn contrastive_loss<T: Scalar>(tape: &mut Tape<T>, e: Var, mask: &[bool], temperature: f64) -> Result<Option<Var>> {
    if !(temperature > 0.0) {
        return Err(config_err(format!("temperature {temperature} must be positive")));
    }
    let b = tape.value(e).rows();
    if b < 2 || mask.len() != b * b {
        return Err(config_err(format!("contrastive batch of {b} with a mask of {}", mask.len())));
    }
    let pairs: Vec<usize> = (0..b * b).filter(|&k| mask[k] && k / b != k % b).collect();
    if pairs.is_empty() {
        return Ok(None);
    }
    let dist = tape.pairwise_distance(e)?;
    let logits = tape.scale(dist, T::of(-1.0 / temperature));
    let off_diagonal: std::sync::Arc<[bool]> = (0..b * b).map(|k| k / b != k % b).collect();
    let log_p = tape.log_softmax_rows(logits, RowMask::Explicit(off_diagonal))?;
    let picked = tape.select(log_p, &pairs)?;
    let mean = tape.mean(picked);
    Ok(Some(tape.scale(mean, -T::one())))
}

/// Contrastive loss of the batch's profile embeddings and its gradient,
/// which only reaches the profile encoder.
pub fn contrastive_gradients(
    params: &ModelParams,
    cfg: &ModelConfig,
    batch: &[Example],
    policy: &PositivePairPolicy,
    temperature: f64,
) -> Result<Option<(f64, usize, ModelParams)>> {
    if batch.len() < 2 {
        return Ok(None);
    }
    let profiles: Vec<Vec<usize>> = batch.iter().map(|e| e.profile.clone()).collect();
    let mask = policy.pair_mask(&cfg.profile_schema, &profiles)?;
    let mut tape = Tape::<f32>::new();
    let w = params.profile.map(&mut |t| tape.param(t.clone()));
    let rows = profiles
        .iter()
        .map(|p| profile_on_tape(&mut tape, &w, p))
        .collect::<Result<Vec<_>>>()?;
    let e = tape.concat_rows(&rows)?;
    let Some(loss) = contrastive_loss(&mut tape, e, &mask, temperature)? else {
        return Ok(None);
    };
    tape.backward(loss)?;
    let mut grads = params.zeros_like();
    grads.profile = w.map(&mut |&v| tape.grad_tensor(v));
    let pairs = mask.iter().filter(|&&m| m).count();
    Ok(Some((tape.value(loss).item() as f64, pairs, grads)))
}

/// Adam with bias correction over an ordered list of tensors.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub steps: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ModelParams, cfg: &TrainConfig) -> Self {
        Self::for_slots(&params.slots(), cfg)
    }

    pub fn for_slots(params: &[&Tensor], cfg: &TrainConfig) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            learning_rate: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            epsilon: cfg.epsilon,
            steps: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams) {
        self.step_slots(params.slots_mut(), &grads.slots());
    }

    pub fn step_slots(&mut self, params: Vec<&mut Tensor>, grads: &[&Tensor]) {
        assert_eq!(params.len(), self.m.len(), "optimizer built for a different parameter list");
        self.steps += 1;
        let t = self.steps as i32;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let lr = (self.learning_rate * c2.sqrt() / c1) as f32;
        let eps = (self.epsilon * c2.sqrt()) as f32;
        let slots = params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v);
        for (((p, g), m), v) in slots {
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * *m / (v.sqrt() + eps);
            }
        }
    }
}

pub fn global_norm(grads: &ModelParams) -> f64 {
    grads.slots().iter().map(|t| t.squared_norm()).sum::<f64>().sqrt()
}

/// Clips `grads` to `clip_norm` and applies one Adam step. Returns the
/// pre-clip norm.
pub fn apply_gradients(model: &mut Model, opt: &mut Adam, mut grads: ModelParams, clip_norm: f64) -> f64 {
    let norm = global_norm(&grads);
    if norm > clip_norm {
        let s = (clip_norm / norm) as f32;
        grads.visit_mut(&mut |g| g.data_mut().iter_mut().for_each(|x| *x *= s));
    }
    opt.step(&mut model.params, &grads);
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub loss: f64,
    pub generative: f64,
    /// `None` when λ = 0 or the batch had no positive pair.
    pub contrastive: Option<f64>,
    pub positive_pairs: usize,
    pub grad_norm: f64,
}

/// One optimizer step on `(1-λ)·L_gen + λ·L_CL`.
pub fn combined_step(
    model: &mut Model,
    opt: &mut Adam,
    batch: &[Example],
    weights: &LossWeights,
    cfg: &TrainConfig,
    policy: &PositivePairPolicy,
) -> Result<StepReport> {
    weights.validate()?;
    let (gen, mut grads) = generative_gradients(&model.params, &model.config, batch, cfg.shards)?;
    let keep = (1.0 - weights.lambda) as f32;
    if keep != 1.0 {
        grads.visit_mut(&mut |g| g.data_mut().iter_mut().for_each(|x| *x *= keep));
    }
    let mut contrastive = None;
    let mut positive_pairs = 0;
    if weights.lambda > 0.0 {
        if let Some((cl, pairs, g)) =
            contrastive_gradients(&model.params, &model.config, batch, policy, weights.temperature)?
        {
            contrastive = Some(cl);
            positive_pairs = pairs;
            for (dst, src) in grads.slots_mut().into_iter().zip(g.slots()) {
                add_scaled(dst, src, weights.lambda as f32);
            }
        }
    }
    let loss = (1.0 - weights.lambda) * gen + weights.lambda * contrastive.unwrap_or(0.0);
    if !loss.is_finite() || grads.slots().iter().any(|g| !g.all_finite()) {
        let users: Vec<String> = batch
            .iter()
            .map(|e| format!("{}({} tokens)", e.user_id, e.tokens.len()))
            .collect();
        return Err(PantherError::NonFinite(format!(
            "loss {loss} (generative {gen}, contrastive {contrastive:?}) on batch [{}]",
            users.join(", ")
        )));
    }
    let grad_norm = apply_gradients(model, opt, grads, cfg.clip_norm);
    Ok(StepReport {
        loss,
        generative: gen,
        contrastive,
        positive_pairs,
        grad_norm,
    })
}

#[cfg(test)]
mod tests;
