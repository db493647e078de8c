//! The sequence model: token and profile embeddings, causal pre-norm
//! blocks that run self-attention and the pattern branch side by side,
//! and an output head tied to the token embedding.
//!
//! Every sequence starts with a `[PROFILE]` slot, so the model emits
//! `n + 1` distributions for `n` input tokens: row `r` is the
//! distribution of the event that follows the first `r` tokens.

mod checkpoint;
mod sprm;
mod weights;

use std::cell::Cell;
use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, PantherError, Result};
use crate::tensor::flops::Kernel;
use crate::tensor::{RowMask, Scalar, Tape, Tensor, Var};
use crate::tokenizer::{AttributeDef, NUM_RESERVED, PAD_ID, PROFILE_ID};

pub use checkpoint::{checkpoint_digest, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use sprm::{sprm_forward, SprmOutput};
pub use weights::{BlockWeights, ModelParams, ModelWeights, ProfileWeights, SprmWeights};

/// How the profile embedding `e_u` enters the sequence.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileMode {
    /// The profile slot carries only the `[PROFILE]` token embedding.
    None,
    /// `e_u` is added to the profile slot.
    FirstToken,
    /// `e_u` is added to every position.
    #[default]
    Positional,
}

/// One depthwise convolution branch: kernel width and dilation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBranch {
    pub width: usize,
    pub dilation: usize,
}

pub fn default_branches() -> Vec<ConvBranch> {
    [(3, 1), (3, 2), (3, 4), (3, 7)]
        .into_iter()
        .map(|(width, dilation)| ConvBranch { width, dilation })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    /// Prototype count `m`.
    pub prototypes: usize,
    pub conv_branches: Vec<ConvBranch>,
    /// Longest sequence including the profile slot.
    pub max_len: usize,
    pub profile_mode: ProfileMode,
    pub causal_sprm: bool,
    /// When false the pattern branch is skipped; its weights still exist.
    pub use_sprm: bool,
    pub profile_schema: Vec<AttributeDef>,
    /// Per-attribute embedding width inside the profile encoder.
    pub profile_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            d_model: 64,
            layers: 2,
            heads: 4,
            ffn_mult: 4,
            prototypes: 64,
            conv_branches: default_branches(),
            max_len: 128,
            profile_mode: ProfileMode::default(),
            causal_sprm: true,
            use_sprm: true,
            profile_schema: Vec::new(),
            profile_dim: 16,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let d = self.d_model;
        if self.vocab_size <= NUM_RESERVED {
            return Err(config_err(format!("vocab size {} leaves no real tokens", self.vocab_size)));
        }
        if d == 0 || self.heads == 0 || d % self.heads != 0 {
            return Err(config_err(format!("d_model {d} must be a positive multiple of heads {}", self.heads)));
        }
        if self.conv_branches.is_empty() || d % self.conv_branches.len() != 0 {
            return Err(config_err(format!(
                "d_model {d} must split evenly over {} conv branches",
                self.conv_branches.len()
            )));
        }
        if self.conv_branches.iter().any(|b| b.width == 0 || b.dilation == 0) {
            return Err(config_err("conv widths and dilations must be positive"));
        }
        if self.prototypes == 0 {
            return Err(config_err("need at least one prototype"));
        }
        if self.layers == 0 || self.ffn_mult == 0 || self.profile_dim == 0 {
            return Err(config_err("layers, ffn_mult and profile_dim must be positive"));
        }
        if self.max_len < 2 {
            return Err(config_err("max_len must allow the profile slot and one token"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn branch_width(&self) -> usize {
        self.d_model / self.conv_branches.len()
    }

    /// Profile attribute values as encoder rows; 0 marks a missing or
    /// unknown value.
    pub fn profile_indices(&self, profile: &BTreeMap<String, String>) -> Vec<usize> {
        self.profile_schema
            .iter()
            .map(|a| {
                profile
                    .get(&a.name)
                    .and_then(|v| a.value_index(v))
                    .map_or(0, |i| i + 1)
            })
            .collect()
    }
}

thread_local! {
    static FORWARD_PASSES: Cell<u64> = const { Cell::new(0) };
}

/// Full-model forward passes run on the current thread.
pub fn forward_passes() -> u64 {
    FORWARD_PASSES.with(|c| c.get())
}

/// Softmax support of the output head: everything but PAD and PROFILE.
pub fn output_mask(vocab_size: usize) -> RowMask {
    let mask: Arc<[bool]> = (0..vocab_size)
        .map(|i| i != PAD_ID as usize && i != PROFILE_ID as usize)
        .collect();
    RowMask::Columns(mask)
}

/// Tape handles produced by [`forward_on_tape`].
pub struct TapeForward {
    /// `[n+1 × V]` unnormalized scores.
    pub logits: Var,
    /// `[n+1 × d]` final hidden states.
    pub hidden: Var,
    /// `[1 × d]` profile embedding.
    pub profile: Var,
    /// Prototype attention per layer and head, `[n+1 × m]` each.
    pub sprm_attention: Vec<Vec<Var>>,
}

fn layer_norm<T: Scalar>(tape: &mut Tape<T>, x: Var, gain: Var, bias: Var) -> Result<Var> {
    let n = tape.layer_norm_rows(x)?;
    let n = tape.mul_row(n, gain)?;
    tape.add_row(n, bias)
}

/// The profile encoder: one table per attribute, concatenated and fused
/// to `[1 × d]`.
pub fn profile_on_tape<T: Scalar>(tape: &mut Tape<T>, w: &ProfileWeights<Var>, idx: &[usize]) -> Result<Var> {
    if idx.len() != w.tables.len() {
        return Err(PantherError::Schema(format!(
            "profile has {} attributes, encoder expects {}",
            idx.len(),
            w.tables.len()
        )));
    }
    if w.tables.is_empty() {
        // no attributes: e_u is the learned bias alone
        let d = tape.value(w.fuse_bias).len();
        let zero = tape.constant(Tensor::zeros(&[1, d]));
        return tape.add_row(zero, w.fuse_bias);
    }
    let parts = w
        .tables
        .iter()
        .zip(idx)
        .map(|(&t, &i)| tape.gather_rows(t, &[i]))
        .collect::<Result<Vec<_>>>()?;
    let cat = tape.concat_cols(&parts)?;
    let e = tape.matmul(cat, w.fuse)?;
    tape.add_row(e, w.fuse_bias)
}

/// Causal multi-head self-attention of one block, output projection included.
pub fn self_attention<T: Scalar>(tape: &mut Tape<T>, x: Var, b: &BlockWeights<Var>, cfg: &ModelConfig) -> Result<Var> {
    let dk = cfg.head_dim();
    let q = tape.matmul(x, b.w_q)?;
    let k = tape.matmul(x, b.w_k)?;
    let v = tape.matmul(x, b.w_v)?;
    let scale = T::of(1.0 / (dk as f64).sqrt());
    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let qh = tape.slice_cols(q, h * dk, dk)?;
        let kh = tape.slice_cols(k, h * dk, dk)?;
        let vh = tape.slice_cols(v, h * dk, dk)?;
        let s = tape.matmul_nt_as(Kernel::SelfAttention, qh, kh)?;
        let s = tape.scale(s, scale);
        let p = tape.softmax_rows(s, RowMask::Causal)?;
        heads.push(tape.matmul_as(Kernel::SelfAttention, p, vh)?);
    }
    let cat = tape.concat_cols(&heads)?;
    tape.matmul(cat, b.w_o)
}

/// One block: `H + Attn(LN1 H) + SPRM(LN1 H)`, then `+ FFN(LN2 ·)`.
/// Returns the block output and the prototype attention per head.
pub fn block_forward<T: Scalar>(
    tape: &mut Tape<T>,
    h: Var,
    b: &BlockWeights<Var>,
    cfg: &ModelConfig,
) -> Result<(Var, Vec<Var>)> {
    let x = layer_norm(tape, h, b.ln1_gain, b.ln1_bias)?;
    let attn = self_attention(tape, x, b, cfg)?;
    let mut h = tape.add(h, attn)?;
    let mut weights = Vec::new();
    if cfg.use_sprm {
        let out = sprm_forward(tape, x, &b.sprm, cfg)?;
        h = tape.add(h, out.output)?;
        weights = out.attention;
    }
    let y = layer_norm(tape, h, b.ln2_gain, b.ln2_bias)?;
    let y = tape.matmul(y, b.ffn_w1)?;
    let y = tape.add_row(y, b.ffn_b1)?;
    let y = tape.gelu(y);
    let y = tape.matmul(y, b.ffn_w2)?;
    let y = tape.add_row(y, b.ffn_b2)?;
    Ok((tape.add(h, y)?, weights))
}

/// Records a full forward pass for `tokens` (without the profile slot).
pub fn forward_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    w: &ModelWeights<Var>,
    cfg: &ModelConfig,
    tokens: &[u32],
    profile: &[usize],
) -> Result<TapeForward> {
    let rows = tokens.len() + 1;
    if rows > cfg.max_len {
        return Err(PantherError::SequenceTooLong {
            len: rows,
            max: cfg.max_len,
        });
    }
    FORWARD_PASSES.with(|c| c.set(c.get() + 1));
    let mut ids = Vec::with_capacity(rows);
    ids.push(PROFILE_ID as usize);
    for &t in tokens {
        if t == PAD_ID || t == PROFILE_ID || t as usize >= cfg.vocab_size {
            return Err(PantherError::TokenRange {
                id: t as usize,
                size: cfg.vocab_size,
            });
        }
        ids.push(t as usize);
    }
    let e_u = profile_on_tape(tape, &w.profile, profile)?;
    let tok = tape.gather_rows(w.token_embedding, &ids)?;
    let pos = tape.slice_rows(w.position_embedding, 0, rows)?;
    let mut h = tape.add(tok, pos)?;
    match cfg.profile_mode {
        ProfileMode::None => {}
        ProfileMode::Positional => h = tape.add_row(h, e_u)?,
        ProfileMode::FirstToken => {
            let rest = tape.constant(Tensor::zeros(&[rows - 1, cfg.d_model]));
            let first = tape.concat_rows(&[e_u, rest])?;
            h = tape.add(h, first)?;
        }
    }
    let mut sprm_attention = Vec::with_capacity(w.blocks.len());
    for b in &w.blocks {
        let (next, att) = block_forward(tape, h, b, cfg)?;
        h = next;
        sprm_attention.push(att);
    }
    let hidden = layer_norm(tape, h, w.final_gain, w.final_bias)?;
    let logits = tape.matmul_nt(hidden, w.token_embedding)?;
    Ok(TapeForward {
        logits,
        hidden,
        profile: e_u,
        sprm_attention,
    })
}

/// Output of [`Model::forward`].
#[derive(Clone, Debug)]
pub struct Prediction {
    /// `[n+1 × V]`; PAD and PROFILE columns are 0.
    pub probs: Tensor,
    pub profile_embedding: Vec<f32>,
    /// Prototype attention per layer and head, `[n+1 × m]` each.
    pub sprm_attention: Vec<Vec<Tensor>>,
}

impl Prediction {
    /// Distribution over the event after the whole input.
    pub fn next(&self) -> &[f32] {
        self.probs.row(self.probs.rows() - 1)
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::init(&config, seed);
        Ok(Self { config, params })
    }

    pub fn from_params(config: ModelConfig, params: ModelParams) -> Result<Self> {
        config.validate()?;
        params.check_shapes(&config)?;
        Ok(Self { config, params })
    }

    pub fn profile_indices(&self, profile: &BTreeMap<String, String>) -> Vec<usize> {
        self.config.profile_indices(profile)
    }

    pub fn forward(&self, tokens: &[u32], profile: &BTreeMap<String, String>) -> Result<Prediction> {
        self.forward_indices(tokens, &self.profile_indices(profile))
    }

    pub fn forward_indices(&self, tokens: &[u32], profile: &[usize]) -> Result<Prediction> {
        let mut tape = Tape::<f32>::new();
        let w = self.params.bind(&mut tape, false);
        let out = forward_on_tape(&mut tape, &w, &self.config, tokens, profile)?;
        let probs = tape.softmax_rows(out.logits, output_mask(self.config.vocab_size))?;
        Ok(Prediction {
            probs: tape.value(probs).clone(),
            profile_embedding: tape.value(out.profile).data().to_vec(),
            sprm_attention: out
                .sprm_attention
                .iter()
                .map(|l| l.iter().map(|&a| tape.value(a).clone()).collect())
                .collect(),
        })
    }

    /// Next-token distributions for ascending `positions`: entry `i`
    /// predicts `ids[positions[i]]` from the preceding `max_len - 1` tokens
    /// at most. Positions inside the first window share one forward pass.
    pub fn next_distributions(&self, ids: &[u32], profile: &[usize], positions: &[usize]) -> Result<Vec<Vec<f32>>> {
        let window = self.config.max_len - 1;
        let mut out = Vec::with_capacity(positions.len());
        let head: Vec<usize> = positions.iter().copied().filter(|&p| p <= window).collect();
        if let Some(&last) = head.last() {
            let pred = self.forward_indices(&ids[..last], profile)?;
            out.extend(head.iter().map(|&p| pred.probs.row(p).to_vec()));
        }
        for &p in &positions[head.len()..] {
            let pred = self.forward_indices(&ids[p - window..p], profile)?;
            out.push(pred.next().to_vec());
        }
        Ok(out)
    }

    /// `e_u` alone; runs only the profile encoder.
    pub fn profile_embedding(&self, profile: &BTreeMap<String, String>) -> Result<Vec<f32>> {
        let mut tape = Tape::<f32>::new();
        let w = self.params.profile.map(&mut |t| tape.constant(t.clone()));
        let e = profile_on_tape(&mut tape, &w, &self.profile_indices(profile))?;
        Ok(tape.value(e).data().to_vec())
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_parameters()
    }
}

#[cfg(test)]
mod tests;
