//! Parameter containers, generic over the slot type so the same layout
//! holds tensors, tape handles, gradients and optimizer moments.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ModelConfig;
use crate::error::{shape_err, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct SprmWeights<P> {
    /// One `[w_k × d/branches]` kernel per branch.
    pub kernels: Vec<P>,
    /// Prototype bank `[m × d]`.
    pub prototypes: P,
    pub w_q: P,
    pub w_k: P,
    pub w_v: P,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockWeights<P> {
    pub ln1_gain: P,
    pub ln1_bias: P,
    pub w_q: P,
    pub w_k: P,
    pub w_v: P,
    pub w_o: P,
    pub sprm: SprmWeights<P>,
    pub ln2_gain: P,
    pub ln2_bias: P,
    pub ffn_w1: P,
    pub ffn_b1: P,
    pub ffn_w2: P,
    pub ffn_b2: P,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProfileWeights<P> {
    /// `[|values|+1 × profile_dim]` per attribute; row 0 is "unknown".
    pub tables: Vec<P>,
    pub fuse: P,
    pub fuse_bias: P,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights<P> {
    /// `[V × d]`, shared with the output head.
    pub token_embedding: P,
    /// `[max_len × d]`.
    pub position_embedding: P,
    pub profile: ProfileWeights<P>,
    pub blocks: Vec<BlockWeights<P>>,
    pub final_gain: P,
    pub final_bias: P,
}

pub type ModelParams = ModelWeights<Tensor<f32>>;

impl<P> SprmWeights<P> {
    pub fn map<Q>(&self, f: &mut dyn FnMut(&P) -> Q) -> SprmWeights<Q> {
        SprmWeights {
            kernels: self.kernels.iter().map(&mut *f).collect(),
            prototypes: f(&self.prototypes),
            w_q: f(&self.w_q),
            w_k: f(&self.w_k),
            w_v: f(&self.w_v),
        }
    }

    pub fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut P)) {
        self.kernels.iter_mut().for_each(&mut *f);
        f(&mut self.prototypes);
        f(&mut self.w_q);
        f(&mut self.w_k);
        f(&mut self.w_v);
    }

    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a P)) {
        self.kernels.iter().for_each(&mut *f);
        f(&self.prototypes);
        f(&self.w_q);
        f(&self.w_k);
        f(&self.w_v);
    }
}

impl<P> BlockWeights<P> {
    pub fn map<Q>(&self, f: &mut dyn FnMut(&P) -> Q) -> BlockWeights<Q> {
        BlockWeights {
            ln1_gain: f(&self.ln1_gain),
            ln1_bias: f(&self.ln1_bias),
            w_q: f(&self.w_q),
            w_k: f(&self.w_k),
            w_v: f(&self.w_v),
            w_o: f(&self.w_o),
            sprm: self.sprm.map(f),
            ln2_gain: f(&self.ln2_gain),
            ln2_bias: f(&self.ln2_bias),
            ffn_w1: f(&self.ffn_w1),
            ffn_b1: f(&self.ffn_b1),
            ffn_w2: f(&self.ffn_w2),
            ffn_b2: f(&self.ffn_b2),
        }
    }

    pub fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut P)) {
        f(&mut self.ln1_gain);
        f(&mut self.ln1_bias);
        f(&mut self.w_q);
        f(&mut self.w_k);
        f(&mut self.w_v);
        f(&mut self.w_o);
        self.sprm.visit_mut(f);
        f(&mut self.ln2_gain);
        f(&mut self.ln2_bias);
        f(&mut self.ffn_w1);
        f(&mut self.ffn_b1);
        f(&mut self.ffn_w2);
        f(&mut self.ffn_b2);
    }

    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a P)) {
        f(&self.ln1_gain);
        f(&self.ln1_bias);
        f(&self.w_q);
        f(&self.w_k);
        f(&self.w_v);
        f(&self.w_o);
        self.sprm.visit(f);
        f(&self.ln2_gain);
        f(&self.ln2_bias);
        f(&self.ffn_w1);
        f(&self.ffn_b1);
        f(&self.ffn_w2);
        f(&self.ffn_b2);
    }
}

impl<P> ProfileWeights<P> {
    pub fn map<Q>(&self, f: &mut dyn FnMut(&P) -> Q) -> ProfileWeights<Q> {
        ProfileWeights {
            tables: self.tables.iter().map(&mut *f).collect(),
            fuse: f(&self.fuse),
            fuse_bias: f(&self.fuse_bias),
        }
    }

    pub fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut P)) {
        self.tables.iter_mut().for_each(&mut *f);
        f(&mut self.fuse);
        f(&mut self.fuse_bias);
    }

    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a P)) {
        self.tables.iter().for_each(&mut *f);
        f(&self.fuse);
        f(&self.fuse_bias);
    }
}

impl<P> ModelWeights<P> {
    /// Applies `f` to every slot in declaration order.
    pub fn map<Q>(&self, f: &mut dyn FnMut(&P) -> Q) -> ModelWeights<Q> {
        ModelWeights {
            token_embedding: f(&self.token_embedding),
            position_embedding: f(&self.position_embedding),
            profile: self.profile.map(f),
            blocks: self.blocks.iter().map(|b| b.map(f)).collect(),
            final_gain: f(&self.final_gain),
            final_bias: f(&self.final_bias),
        }
    }

    pub fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut P)) {
        f(&mut self.token_embedding);
        f(&mut self.position_embedding);
        self.profile.visit_mut(f);
        for b in &mut self.blocks {
            b.visit_mut(f);
        }
        f(&mut self.final_gain);
        f(&mut self.final_bias);
    }

    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a P)) {
        f(&self.token_embedding);
        f(&self.position_embedding);
        self.profile.visit(f);
        for b in &self.blocks {
            b.visit(f);
        }
        f(&self.final_gain);
        f(&self.final_bias);
    }

    /// Slots in declaration order.
    pub fn slots(&self) -> Vec<&P> {
        let mut out = Vec::new();
        self.visit(&mut |p| out.push(p));
        out
    }

    pub fn slots_mut(&mut self) -> Vec<&mut P> {
        let mut out = Vec::new();
        self.visit_mut(&mut |p| out.push(p));
        out
    }
}

impl<T: Scalar> ModelWeights<Tensor<T>> {
    /// Puts every tensor on `tape`, as parameters or constants.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> ModelWeights<Var> {
        self.map(&mut |t| tape.leaf(t.clone(), trainable))
    }

    pub fn cast<U: Scalar>(&self) -> ModelWeights<Tensor<U>> {
        self.map(&mut |t| t.cast())
    }

    pub fn num_parameters(&self) -> usize {
        self.slots().iter().map(|t| t.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        self.map(&mut |t| Tensor::zeros(t.shape()))
    }

    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let expected = ModelParams::shapes(cfg);
        let got = self.map(&mut |t| t.shape().to_vec());
        if expected != got {
            return Err(shape_err("model", "parameter shapes do not match the configuration"));
        }
        Ok(())
    }
}

impl ModelWeights<Vec<usize>> {
    pub fn num_elements(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |s| n += s.iter().product::<usize>());
        n
    }
}

impl ModelParams {
    /// Parameter shapes implied by `cfg`.
    pub fn shapes(cfg: &ModelConfig) -> ModelWeights<Vec<usize>> {
        let d = cfg.d_model;
        let f = cfg.ffn_mult * d;
        let bw = cfg.branch_width();
        let pd = cfg.profile_dim;
        let block = || BlockWeights {
            ln1_gain: vec![d],
            ln1_bias: vec![d],
            w_q: vec![d, d],
            w_k: vec![d, d],
            w_v: vec![d, d],
            w_o: vec![d, d],
            sprm: SprmWeights {
                kernels: cfg.conv_branches.iter().map(|b| vec![b.width, bw]).collect(),
                prototypes: vec![cfg.prototypes, d],
                w_q: vec![d, d],
                w_k: vec![d, d],
                w_v: vec![d, d],
            },
            ln2_gain: vec![d],
            ln2_bias: vec![d],
            ffn_w1: vec![d, f],
            ffn_b1: vec![f],
            ffn_w2: vec![f, d],
            ffn_b2: vec![d],
        };
        ModelWeights {
            token_embedding: vec![cfg.vocab_size, d],
            position_embedding: vec![cfg.max_len, d],
            profile: ProfileWeights {
                tables: cfg.profile_schema.iter().map(|a| vec![a.values.len() + 1, pd]).collect(),
                fuse: vec![cfg.profile_schema.len() * pd, d],
                fuse_bias: vec![d],
            },
            blocks: (0..cfg.layers).map(|_| block()).collect(),
            final_gain: vec![d],
            final_bias: vec![d],
        }
    }

    /// Seeded initialization. The pattern branch is always drawn, so a
    /// model with `use_sprm = false` shares every other weight with its
    /// counterpart at the same seed.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shapes = Self::shapes(cfg);
        let mut normal = |shape: &[usize], std: f64| {
            let dist = Normal::new(0.0, std).expect("positive std");
            Tensor::from_fn(shape, |_| dist.sample(&mut rng) as f32)
        };
        let ones = |shape: &[usize]| Tensor::full(shape, 1.0f32);
        let zeros = |shape: &[usize]| Tensor::<f32>::zeros(shape);
        let fan = |shape: &[usize]| 1.0 / (shape[0] as f64).sqrt();
        let residual = 1.0 / (2.0 * cfg.layers as f64).sqrt();
        let fuse_in = (cfg.profile_schema.len() * cfg.profile_dim).max(1) as f64;

        let token_embedding = normal(&shapes.token_embedding, 0.02);
        let position_embedding = normal(&shapes.position_embedding, 0.02);
        let profile = ProfileWeights {
            tables: shapes.profile.tables.iter().map(|s| normal(s, 0.02)).collect(),
            fuse: normal(&shapes.profile.fuse, 1.0 / fuse_in.sqrt()),
            fuse_bias: zeros(&shapes.profile.fuse_bias),
        };
        let blocks = shapes
            .blocks
            .iter()
            .map(|s| BlockWeights {
                ln1_gain: ones(&s.ln1_gain),
                ln1_bias: zeros(&s.ln1_bias),
                w_q: normal(&s.w_q, fan(&s.w_q)),
                w_k: normal(&s.w_k, fan(&s.w_k)),
                w_v: normal(&s.w_v, fan(&s.w_v)),
                w_o: normal(&s.w_o, fan(&s.w_o) * residual),
                sprm: SprmWeights {
                    kernels: s.sprm.kernels.iter().map(|k| normal(k, fan(k))).collect(),
                    prototypes: normal(&s.sprm.prototypes, 1.0),
                    w_q: normal(&s.sprm.w_q, fan(&s.sprm.w_q)),
                    w_k: normal(&s.sprm.w_k, fan(&s.sprm.w_k)),
                    w_v: normal(&s.sprm.w_v, fan(&s.sprm.w_v) * residual),
                },
                ln2_gain: ones(&s.ln2_gain),
                ln2_bias: zeros(&s.ln2_bias),
                ffn_w1: normal(&s.ffn_w1, fan(&s.ffn_w1)),
                ffn_b1: zeros(&s.ffn_b1),
                ffn_w2: normal(&s.ffn_w2, fan(&s.ffn_w2) * residual),
                ffn_b2: zeros(&s.ffn_b2),
            })
            .collect();
        ModelWeights {
            token_embedding,
            position_embedding,
            profile,
            blocks,
            final_gain: ones(&shapes.final_gain),
            final_bias: zeros(&shapes.final_bias),
        }
    }

    /// Parameters of the pattern branch across all layers.
    pub fn sprm_parameters(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| {
                let mut n = 0;
                b.sprm.visit(&mut |t| n += t.len());
                n
            })
            .sum()
    }
}
