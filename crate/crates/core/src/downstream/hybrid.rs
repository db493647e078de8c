//! The hybrid fraud scorer: event context, a convolutional encoding of the
//! recent window, the profile embedding and a surprisal feature feed a
//! two-layer perceptron.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{surprisal, SURPRISAL_CLIP};
use crate::error::{config_err, PantherError, Result};
use crate::events::UserRecord;
use crate::model::Model;
use crate::tensor::{Tape, Tensor, Var};
use crate::tokenizer::{AttributeDef, Vocab};
use crate::training::{Adam, TrainConfig};

/// Most recent tokens fed to the window encoder.
pub const RECENT_WINDOW: usize = 100;
pub const CONV_WIDTHS: [usize; 3] = [2, 3, 5];

/// Feature groups a scorer may see. Masked groups are fed as zeros, so
/// ablations keep the same architecture.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureMask {
    pub context: bool,
    pub recent: bool,
    pub profile: bool,
    pub deviation: bool,
}

impl FeatureMask {
    pub const ALL: Self = Self {
        context: true,
        recent: true,
        profile: true,
        deviation: true,
    };
    /// Event context and recent window only.
    pub const CONTEXT_ONLY: Self = Self {
        context: true,
        recent: true,
        profile: false,
        deviation: false,
    };
}

impl Default for FeatureMask {
    fn default() -> Self {
        Self::ALL
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScorerConfig {
    pub filters: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Fraction of negatives kept for training.
    pub negative_rate: f64,
    pub pos_weight: f64,
    /// Shortlist length behind the surprisal feature.
    pub shortlist: usize,
    pub mask: FeatureMask,
    pub seed: u64,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        Self {
            filters: 8,
            hidden: 32,
            epochs: 6,
            batch_size: 64,
            learning_rate: 3e-3,
            negative_rate: 0.05,
            pos_weight: 2.0,
            shortlist: 50,
            mask: FeatureMask::ALL,
            seed: 0,
        }
    }
}

impl ScorerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.filters == 0 || self.hidden == 0 || self.batch_size == 0 || self.shortlist == 0 {
            return Err(config_err("scorer sizes must be positive"));
        }
        if !(self.negative_rate > 0.0 && self.negative_rate <= 1.0) {
            return Err(config_err(format!("negative rate {} outside (0, 1]", self.negative_rate)));
        }
        if !(self.learning_rate > 0.0 && self.pos_weight > 0.0) {
            return Err(config_err("learning rate and positive weight must be positive"));
        }
        Ok(())
    }
}

/// One-hot encoding of an event's attributes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextEncoder {
    pub schema: Vec<AttributeDef>,
}

impl ContextEncoder {
    pub fn dim(&self) -> usize {
        self.schema.iter().map(|a| a.values.len()).sum()
    }

    pub fn encode(&self, attrs: &BTreeMap<String, String>) -> Result<Vec<f32>> {
        let mut out = vec![0.0; self.dim()];
        let mut offset = 0;
        for def in &self.schema {
            let value = attrs
                .get(&def.name)
                .ok_or_else(|| PantherError::Schema(format!("context lacks `{}`", def.name)))?;
            let i = def
                .value_index(value)
                .ok_or_else(|| PantherError::Schema(format!("unknown value `{value}` for `{}`", def.name)))?;
            out[offset + i] = 1.0;
            offset += def.values.len();
        }
        Ok(out)
    }
}

/// Top-`n` `(id, p)` pairs of a next-token distribution, by descending
/// probability with ties to the smaller id.
pub fn shortlist(probs: &[f32], n: usize) -> Vec<(u32, f32)> {
    let mut idx: Vec<u32> = (0..probs.len() as u32).filter(|&i| probs[i as usize] > 0.0).collect();
    idx.sort_by(|&a, &b| probs[b as usize].total_cmp(&probs[a as usize]).then(a.cmp(&b)));
    idx.truncate(n);
    idx.into_iter().map(|i| (i, probs[i as usize])).collect()
}

/// Surprisal of `observed` looked up in a shortlist; off-list tokens get
/// the clip value.
pub fn shortlist_surprisal(list: &[(u32, f32)], observed: u32) -> f64 {
    list.iter()
        .find(|&&(id, _)| id == observed)
        .map_or(SURPRISAL_CLIP, |&(_, p)| surprisal(p as f64))
}

/// Raw inputs of one scoring request.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HybridInput {
    pub context: Vec<f32>,
    /// Up to [`RECENT_WINDOW`] most recent token ids, oldest first.
    pub recent: Vec<u32>,
    /// `None` for users without a cached profile embedding.
    pub profile: Option<Vec<f32>>,
    /// Surprisal of the new event.
    pub deviation: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HybridExample {
    pub input: HybridInput,
    pub label: bool,
    pub user: String,
    pub position: usize,
}

/// Hybrid examples for events at positions `range(user)` of each user
/// (position 0 is skipped). The surprisal feature uses a top-`shortlist`
/// lookup, as the online path does.
pub fn build_hybrid_examples(
    model: &Model,
    vocab: &Vocab,
    users: &[UserRecord],
    context: &ContextEncoder,
    shortlist_len: usize,
    range: impl Fn(usize) -> std::ops::Range<usize> + Sync,
) -> Result<Vec<HybridExample>> {
    use rayon::prelude::*;
    let parts: Vec<Result<Vec<HybridExample>>> = users
        .par_iter()
        .enumerate()
        .map(|(u, user)| {
            let r = range(u);
            let positions: Vec<usize> = (r.start.max(1)..r.end.min(user.events.len())).collect();
            if positions.is_empty() {
                return Ok(Vec::new());
            }
            let ids = vocab.encode(user)?.ids;
            let profile_idx = model.profile_indices(&user.profile);
            let e_u = model.profile_embedding(&user.profile)?;
            let dists = model.next_distributions(&ids, &profile_idx, &positions)?;
            positions
                .iter()
                .zip(dists)
                .map(|(&t, probs)| {
                    let event = &user.events[t];
                    Ok(HybridExample {
                        input: HybridInput {
                            context: context.encode(&event.attributes)?,
                            recent: ids[t.saturating_sub(RECENT_WINDOW)..t].to_vec(),
                            profile: Some(e_u.clone()),
                            deviation: shortlist_surprisal(&shortlist(&probs, shortlist_len), ids[t]),
                        },
                        label: event.is_fraud(),
                        user: user.user_id.clone(),
                        position: t,
                    })
                })
                .collect()
        })
        .collect();
    let mut out = Vec::new();
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct ScorerFile {
    config: ScorerConfig,
    context_dim: usize,
    profile_dim: usize,
    embeddings: (Vec<usize>, Vec<f32>),
    params: Vec<(Vec<usize>, Vec<f32>)>,
}

/// Trainable part of the scorer, in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct ScorerParams {
    pub(crate) convs: Vec<Tensor>,
    pub(crate) conv_bias: Vec<Tensor>,
    pub(crate) w1: Tensor,
    pub(crate) b1: Tensor,
    pub(crate) w2: Tensor,
    pub(crate) b2: Tensor,
}

impl ScorerParams {
    fn slots(&self) -> Vec<&Tensor> {
        let mut v: Vec<&Tensor> = self.convs.iter().chain(&self.conv_bias).collect();
        v.extend([&self.w1, &self.b1, &self.w2, &self.b2]);
        v
    }

    fn slots_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = self.convs.iter_mut().chain(self.conv_bias.iter_mut()).collect();
        v.extend([&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]);
        v
    }
}

/// Layout of the fused input: `[ψ | f_enc | presence | e_u | cold | Δ]`.
#[derive(Clone, Debug)]
pub struct HybridScorer {
    pub config: ScorerConfig,
    pub context_dim: usize,
    pub profile_dim: usize,
    /// Frozen token embeddings of the pretrained model.
    embeddings: Tensor,
    pub(crate) params: ScorerParams,
}

struct Bound {
    convs: Vec<Var>,
    conv_bias: Vec<Var>,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

impl HybridScorer {
    pub fn new(embeddings: Tensor, context_dim: usize, profile_dim: usize, config: ScorerConfig) -> Result<Self> {
        config.validate()?;
        let d = embeddings.cols();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut normal = |rows: usize, cols: usize| {
            let dist = Normal::new(0.0, 1.0 / (rows as f64).sqrt()).expect("finite std");
            Tensor::from_fn(&[rows, cols], |_| dist.sample(&mut rng) as f32)
        };
        let f = config.filters;
        let convs = CONV_WIDTHS.iter().map(|&w| normal(w * d, f)).collect();
        let input = context_dim + CONV_WIDTHS.len() * f + 1 + profile_dim + 2;
        let w1 = normal(input, config.hidden);
        let w2 = normal(config.hidden, 1);
        Ok(Self {
            params: ScorerParams {
                convs,
                conv_bias: CONV_WIDTHS.iter().map(|_| Tensor::zeros(&[1, f])).collect(),
                w1,
                b1: Tensor::zeros(&[1, config.hidden]),
                w2,
                b2: Tensor::zeros(&[1, 1]),
            },
            config,
            context_dim,
            profile_dim,
            embeddings,
        })
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        let pack = |t: &Tensor| (t.shape().to_vec(), t.data().to_vec());
        let file = ScorerFile {
            config: self.config.clone(),
            context_dim: self.context_dim,
            profile_dim: self.profile_dim,
            embeddings: pack(&self.embeddings),
            params: self.params.slots().into_iter().map(pack).collect(),
        };
        Ok(serde_json::to_vec(&file)?)
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let file: ScorerFile = serde_json::from_slice(bytes)?;
        let unpack = |(shape, data): (Vec<usize>, Vec<f32>)| Tensor::new(shape, data);
        let mut scorer = Self::new(unpack(file.embeddings)?, file.context_dim, file.profile_dim, file.config)?;
        let slots = scorer.params.slots_mut();
        if slots.len() != file.params.len() {
            return Err(PantherError::Format("scorer parameter count".into()));
        }
        for (dst, src) in slots.into_iter().zip(file.params) {
            let t = unpack(src)?;
            if t.shape() != dst.shape() {
                return Err(PantherError::Format(format!("scorer tensor shape {:?}", t.shape())));
            }
            *dst = t;
        }
        Ok(scorer)
    }

    pub fn input_dim(&self) -> usize {
        self.params.w1.rows()
    }

    /// Sets every head weight to zero and the output bias to `bias`.
    pub fn set_constant(&mut self, bias: f32) {
        for t in self.params.slots_mut() {
            t.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        self.params.b2.data_mut()[0] = bias;
    }

    fn check(&self, input: &HybridInput) -> Result<()> {
        if input.context.len() != self.context_dim {
            return Err(PantherError::Shape {
                op: "hybrid_score",
                detail: format!("context has {} entries, expected {}", input.context.len(), self.context_dim),
            });
        }
        if let Some(p) = &input.profile {
            if p.len() != self.profile_dim {
                return Err(PantherError::Shape {
                    op: "hybrid_score",
                    detail: format!("profile embedding has {} entries, expected {}", p.len(), self.profile_dim),
                });
            }
        }
        if !input.deviation.is_finite() || input.context.iter().any(|x| !x.is_finite()) {
            return Err(PantherError::NonFinite("hybrid input".into()));
        }
        let v = self.embeddings.rows();
        if let Some(&bad) = input.recent.iter().find(|&&t| t as usize >= v) {
            return Err(PantherError::TokenRange { id: bad as usize, size: v });
        }
        Ok(())
    }

    /// The recent window after masking and truncation.
    fn window<'a>(&self, input: &'a HybridInput) -> &'a [u32] {
        if !self.config.mask.recent {
            return &[];
        }
        &input.recent[input.recent.len().saturating_sub(RECENT_WINDOW)..]
    }

    /// Fused features other than `f_enc`, split around it.
    fn dense(&self, input: &HybridInput) -> (Vec<f32>, Vec<f32>) {
        let m = self.config.mask;
        let head = if m.context {
            input.context.clone()
        } else {
            vec![0.0; self.context_dim]
        };
        let mut tail = Vec::with_capacity(self.profile_dim + 3);
        tail.push(!self.window(input).is_empty() as u8 as f32);
        match (&input.profile, m.profile) {
            (Some(p), true) => {
                tail.extend(p);
                tail.push(0.0);
            }
            (None, true) => {
                tail.extend(std::iter::repeat(0.0).take(self.profile_dim));
                tail.push(1.0);
            }
            (_, false) => tail.extend(std::iter::repeat(0.0).take(self.profile_dim + 1)),
        }
        tail.push(if m.deviation {
            (input.deviation / SURPRISAL_CLIP) as f32
        } else {
            0.0
        });
        (head, tail)
    }

    fn bind(&self, tape: &mut Tape<f32>, trainable: bool) -> Bound {
        let mut leaf = |t: &Tensor| tape.leaf(t.clone(), trainable);
        let p = &self.params;
        Bound {
            convs: p.convs.iter().map(&mut leaf).collect(),
            conv_bias: p.conv_bias.iter().map(&mut leaf).collect(),
            w1: leaf(&p.w1),
            b1: leaf(&p.b1),
            w2: leaf(&p.w2),
            b2: leaf(&p.b2),
        }
    }

    /// Logits `[B×1]` for a batch, on the tape.
    fn logits_on_tape(&self, tape: &mut Tape<f32>, w: &Bound, table: Var, batch: &[&HybridInput]) -> Result<Var> {
        let f = self.config.filters;
        let mut rows = Vec::with_capacity(batch.len());
        for input in batch {
            self.check(input)?;
            let (head, tail) = self.dense(input);
            let head = tape.constant(Tensor::matrix(1, head.len(), head)?);
            let tail = tape.constant(Tensor::matrix(1, tail.len(), tail)?);
            let window = self.window(input);
            let enc = if window.is_empty() {
                tape.constant(Tensor::zeros(&[1, CONV_WIDTHS.len() * f]))
            } else {
                let ids: Vec<usize> = window.iter().map(|&t| t as usize).collect();
                let x = tape.gather_rows(table, &ids)?;
                let mut pooled = Vec::with_capacity(CONV_WIDTHS.len());
                for (k, &width) in CONV_WIDTHS.iter().enumerate() {
                    let u = tape.unfold_causal(x, width)?;
                    let c = tape.matmul(u, w.convs[k])?;
                    let c = tape.add_row(c, w.conv_bias[k])?;
                    let m = tape.max_rows(c)?;
                    pooled.push(tape.tanh(m));
                }
                tape.concat_cols(&pooled)?
            };
            rows.push(tape.concat_cols(&[head, enc, tail])?);
        }
        let x = tape.concat_rows(&rows)?;
        let h = tape.matmul(x, w.w1)?;
        let h = tape.add_row(h, w.b1)?;
        let h = tape.tanh(h);
        let z = tape.matmul(h, w.w2)?;
        tape.add_row(z, w.b2)
    }

    /// Fraud probability, computed on the tape.
    pub fn score_on_tape(&self, input: &HybridInput) -> Result<f64> {
        let mut tape = Tape::<f32>::new();
        let w = self.bind(&mut tape, false);
        let table = tape.constant(self.embeddings.clone());
        let z = self.logits_on_tape(&mut tape, &w, table, &[input])?;
        let s = tape.sigmoid(z);
        Ok(tape.value(s).item() as f64)
    }

    /// The fused input vector `[ψ | f_enc | presence | e_u | cold | Δ]`.
    pub fn features(&self, input: &HybridInput) -> Result<Vec<f32>> {
        self.check(input)?;
        let p = &self.params;
        let f = self.config.filters;
        let d = self.embeddings.cols();
        let (head, tail) = self.dense(input);
        let mut x = head;
        let window = self.window(input);
        for (k, &width) in CONV_WIDTHS.iter().enumerate() {
            if window.is_empty() {
                x.extend(std::iter::repeat(0.0).take(f));
                continue;
            }
            let mut best = vec![f32::NEG_INFINITY; f];
            for t in 0..window.len() {
                let mut acc = p.conv_bias[k].data().to_vec();
                for j in 0..width {
                    let back = width - 1 - j;
                    if back > t {
                        continue;
                    }
                    let emb = self.embeddings.row(window[t - back] as usize);
                    for (i, &e) in emb.iter().enumerate() {
                        for (a, &wv) in acc.iter_mut().zip(p.convs[k].row(j * d + i)) {
                            *a += e * wv;
                        }
                    }
                }
                for (b, a) in best.iter_mut().zip(acc) {
                    *b = b.max(a);
                }
            }
            x.extend(best.into_iter().map(f32::tanh));
        }
        x.extend(tail);
        Ok(x)
    }

    /// The perceptron head applied to a fused input vector.
    pub fn head(&self, x: &[f32]) -> f64 {
        let p = &self.params;
        let mut h = p.b1.data().to_vec();
        for (i, &xi) in x.iter().enumerate() {
            if xi != 0.0 {
                for (a, &wv) in h.iter_mut().zip(p.w1.row(i)) {
                    *a += xi * wv;
                }
            }
        }
        let z = h
            .iter()
            .zip(p.w2.data())
            .fold(p.b2.data()[0], |acc, (&hi, &wv)| acc + hi.tanh() * wv);
        1.0 / (1.0 + (-z as f64).exp())
    }

    /// Fraud probability in `(0, 1)`. Plain loops, no tape.
    pub fn score(&self, input: &HybridInput) -> Result<f64> {
        Ok(self.head(&self.features(input)?))
    }

    /// Mean weighted BCE and its gradients over a batch.
    fn batch_gradients(&self, batch: &[&HybridExample]) -> Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::<f32>::new();
        let w = self.bind(&mut tape, true);
        let table = tape.constant(self.embeddings.clone());
        let inputs: Vec<&HybridInput> = batch.iter().map(|e| &e.input).collect();
        let z = self.logits_on_tape(&mut tape, &w, table, &inputs)?;
        let targets: Vec<f32> = batch.iter().map(|e| e.label as u8 as f32).collect();
        let loss = tape.bce_with_logits_sum(z, &targets, self.config.pos_weight as f32)?;
        let loss = tape.scale(loss, 1.0 / batch.len() as f32);
        tape.backward(loss)?;
        let mut vars = w.convs.clone();
        vars.extend(&w.conv_bias);
        vars.extend([w.w1, w.b1, w.w2, w.b2]);
        let grads = vars.iter().map(|&v| tape.grad_tensor(v)).collect();
        Ok((tape.value(loss).item() as f64, grads))
    }
}

/// Fits a scorer on labelled examples. Negatives are subsampled at
/// `config.negative_rate`; positives are all kept.
pub fn train_scorer(
    examples: &[HybridExample],
    embeddings: Tensor,
    context_dim: usize,
    profile_dim: usize,
    config: &ScorerConfig,
) -> Result<HybridScorer> {
    let mut scorer = HybridScorer::new(embeddings, context_dim, profile_dim, config.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);
    let kept: Vec<&HybridExample> = examples
        .iter()
        .filter(|e| e.label || rng.gen_bool(config.negative_rate))
        .collect();
    if !kept.iter().any(|e| e.label) || kept.iter().all(|e| e.label) {
        return Err(PantherError::Empty("scorer training needs both classes".into()));
    }
    let opt_cfg = TrainConfig {
        learning_rate: config.learning_rate,
        ..TrainConfig::default()
    };
    let mut opt = Adam::for_slots(&scorer.params.slots(), &opt_cfg);
    let mut order: Vec<usize> = (0..kept.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&HybridExample> = chunk.iter().map(|&i| kept[i]).collect();
            let (loss, grads) = scorer.batch_gradients(&batch)?;
            if !loss.is_finite() {
                return Err(PantherError::NonFinite(format!("scorer loss {loss} in epoch {epoch}")));
            }
            total += loss * batch.len() as f64;
            let grads: Vec<&Tensor> = grads.iter().collect();
            opt.step_slots(scorer.params.slots_mut(), &grads);
        }
        log::debug!("scorer epoch {epoch} loss {:.5}", total / kept.len() as f64);
    }
    Ok(scorer)
}
