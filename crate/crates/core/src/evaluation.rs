//! Full-ranking next-event metrics and recall at top-p% for fraud scores.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, PantherError, Result};
use crate::events::DatasetSplit;
use crate::model::Model;
use crate::tokenizer::{Vocab, PAD_ID, PROFILE_ID};

pub const HIT_KS: [usize; 4] = [1, 5, 10, 50];
pub const NDCG_KS: [usize; 2] = [5, 10];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingReport {
    pub hr_1: f64,
    pub hr_5: f64,
    pub hr_10: f64,
    pub hr_50: f64,
    pub ndcg_5: f64,
    pub ndcg_10: f64,
    pub positions: usize,
    pub protocol: String,
}

impl RankingReport {
    pub fn hit_ratio(&self, k: usize) -> Option<f64> {
        match k {
            1 => Some(self.hr_1),
            5 => Some(self.hr_5),
            10 => Some(self.hr_10),
            50 => Some(self.hr_50),
            _ => None,
        }
    }
}

/// Running sums behind a [`RankingReport`].
#[derive(Clone, Debug, Default)]
pub struct RankAccumulator {
    hits: [u64; 4],
    ndcg: [f64; 2],
    count: usize,
}

impl RankAccumulator {
    pub fn add(&mut self, rank: usize) {
        for (h, &k) in self.hits.iter_mut().zip(&HIT_KS) {
            *h += (rank <= k) as u64;
        }
        for (n, &k) in self.ndcg.iter_mut().zip(&NDCG_KS) {
            if rank <= k {
                *n += 1.0 / ((rank + 1) as f64).log2();
            }
        }
        self.count += 1;
    }

    pub fn merge(&mut self, other: &RankAccumulator) {
        for (a, b) in self.hits.iter_mut().zip(&other.hits) {
            *a += b;
        }
        for (a, b) in self.ndcg.iter_mut().zip(&other.ndcg) {
            *a += b;
        }
        self.count += other.count;
    }

    pub fn finish(&self) -> Result<RankingReport> {
        if self.count == 0 {
            return Err(PantherError::Empty("no evaluation positions".into()));
        }
        let n = self.count as f64;
        let hr = |i: usize| self.hits[i] as f64 / n;
        Ok(RankingReport {
            hr_1: hr(0),
            hr_5: hr(1),
            hr_10: hr(2),
            hr_50: hr(3),
            ndcg_5: self.ndcg[0] / n,
            ndcg_10: self.ndcg[1] / n,
            positions: self.count,
            protocol: "full-ranking".into(),
        })
    }
}

/// 1-based rank of `target` among the ids not excluded, scores
/// descending, ties broken by smaller id first.
pub fn rank_of(scores: &[f32], target: usize, excluded: impl Fn(usize) -> bool) -> usize {
    let st = scores[target];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(c, &s)| c != target && !excluded(c) && (s > st || (s == st && c < target)))
        .count()
}

pub fn is_reserved(id: usize) -> bool {
    id == PAD_ID as usize || id == PROFILE_ID as usize
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSplit {
    Validation,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalOptions {
    pub split: EvalSplit,
    /// Only the final held-out position of each user.
    pub last_only: bool,
}

impl EvalOptions {
    pub fn test() -> Self {
        Self {
            split: EvalSplit::Test,
            last_only: false,
        }
    }

    pub fn validation() -> Self {
        Self {
            split: EvalSplit::Validation,
            last_only: false,
        }
    }
}

/// Ranks of the held-out events of one user. Each target is predicted
/// from its prefix, truncated to the model's window.
pub fn user_ranks(model: &Model, ids: &[u32], targets: &[usize], profile: &[usize]) -> Result<Vec<usize>> {
    let mut sorted = targets.to_vec();
    sorted.sort_unstable();
    let dists = model.next_distributions(ids, profile, &sorted)?;
    Ok(sorted
        .iter()
        .zip(dists)
        .map(|(&p, probs)| rank_of(&probs, ids[p] as usize, is_reserved))
        .collect())
}

/// Full-ranking HR@K / NDCG@K over the held-out positions of `split`.
pub fn rank_eval(model: &Model, split: &DatasetSplit, vocab: &Vocab, opts: EvalOptions) -> Result<RankingReport> {
    if vocab.len() != model.config.vocab_size {
        return Err(PantherError::VocabMismatch {
            expected: model.config.vocab_size.to_string(),
            found: vocab.len().to_string(),
        });
    }
    let parts: Vec<Result<RankAccumulator>> = (0..split.len())
        .into_par_iter()
        .map(|u| {
            let user = &split.users[u];
            let cut = &split.cuts[u];
            let (lo, hi) = match opts.split {
                EvalSplit::Validation => (cut.train_end, cut.valid_end),
                EvalSplit::Test => (cut.valid_end, user.events.len()),
            };
            let mut acc = RankAccumulator::default();
            if lo >= hi {
                return Ok(acc);
            }
            let lo = if opts.last_only { hi - 1 } else { lo };
            let ids = vocab.encode(user)?.ids;
            let targets: Vec<usize> = (lo..hi).collect();
            for r in user_ranks(model, &ids, &targets, &model.profile_indices(&user.profile))? {
                acc.add(r);
            }
            Ok(acc)
        })
        .collect();
    let mut total = RankAccumulator::default();
    for p in parts {
        total.merge(&p?);
    }
    total.finish()
}

pub const DEFAULT_TOP_LEVELS: [f64; 3] = [0.0001, 0.001, 0.01];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallAtLevel {
    pub p: f64,
    /// `ceil(p·N)`.
    pub top_n: usize,
    /// `None` when there are no positives.
    pub recall: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallAtTopReport {
    pub levels: Vec<RecallAtLevel>,
    pub positives: usize,
    pub total: usize,
    pub no_positives: bool,
}

impl RecallAtTopReport {
    pub fn recall_at(&self, p: f64) -> Option<f64> {
        self.levels.iter().find(|l| l.p == p).and_then(|l| l.recall)
    }
}

/// Share of positives among the top `ceil(p·N)` scores, for each `p`.
/// Equal scores keep their input order.
pub fn recall_at_top(scores: &[(f64, bool)], levels: &[f64]) -> Result<RecallAtTopReport> {
    let n = scores.len();
    let min_p = levels.iter().cloned().fold(f64::INFINITY, f64::min);
    if levels.is_empty() || levels.iter().any(|&p| !(p > 0.0 && p <= 1.0)) {
        return Err(config_err(format!("levels {levels:?} must lie in (0, 1]")));
    }
    if (n as f64) < 1.0 / min_p - 1e-9 {
        return Err(config_err(format!("{n} items are too few for a top-{min_p} cut")));
    }
    if scores.iter().any(|(s, _)| !s.is_finite()) {
        return Err(PantherError::NonFinite("scores must be finite".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].0.total_cmp(&scores[a].0));
    let positives = scores.iter().filter(|s| s.1).count();
    let levels = levels
        .iter()
        .map(|&p| {
            let top_n = ((p * n as f64) - 1e-9).ceil().max(1.0) as usize;
            let hits = order[..top_n.min(n)].iter().filter(|&&i| scores[i].1).count();
            RecallAtLevel {
                p,
                top_n,
                recall: (positives > 0).then(|| hits as f64 / positives as f64),
            }
        })
        .collect();
    Ok(RecallAtTopReport {
        levels,
        positives,
        total: n,
        no_positives: positives == 0,
    })
}
