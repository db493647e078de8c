//! Consumers of a pretrained model: per-event deviation scores, merchant
//! risk aggregation and the hybrid fraud scorer.

mod hybrid;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, PantherError, Result};
use crate::events::UserRecord;
use crate::model::Model;
use crate::tokenizer::{Vocab, PAD_ID, PROFILE_ID};

pub use hybrid::{
    build_hybrid_examples, shortlist, shortlist_surprisal, train_scorer, ContextEncoder, FeatureMask, HybridExample,
    HybridInput, HybridScorer, ScorerConfig, CONV_WIDTHS, RECENT_WINDOW,
};

/// Upper bound of the surprisal feature.
pub const SURPRISAL_CLIP: f64 = 30.0;
/// Standard deviations below this make a distribution degenerate.
pub const DEGENERATE_SIGMA: f64 = 1e-9;

/// `−ln p`, clipped to `[0, SURPRISAL_CLIP]`.
pub fn surprisal(p: f64) -> f64 {
    if p > 0.0 {
        (-p.ln()).clamp(0.0, SURPRISAL_CLIP)
    } else {
        SURPRISAL_CLIP
    }
}

/// Surprisal of `observed` under a next-token distribution.
pub fn transaction_deviation_feature(probs: &[f32], observed: u32) -> Result<f64> {
    let p = probs.get(observed as usize).ok_or(PantherError::TokenRange {
        id: observed as usize,
        size: probs.len(),
    })?;
    Ok(surprisal(*p as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardized {
    pub delta: f64,
    pub mu: f64,
    pub sigma: f64,
    /// σ fell below [`DEGENERATE_SIGMA`]; Δ is reported as 0.
    pub degenerate: bool,
}

/// `(dist[candidate] − μ) / σ` with μ and the population σ taken over all
/// entries of `dist`.
pub fn standardize(dist: &[f64], candidate: usize) -> Result<Standardized> {
    if dist.is_empty() {
        return Err(PantherError::Empty("empty candidate distribution".into()));
    }
    let p = *dist.get(candidate).ok_or(PantherError::TokenRange {
        id: candidate,
        size: dist.len(),
    })?;
    let n = dist.len() as f64;
    let mu = dist.iter().sum::<f64>() / n;
    let sigma = (dist.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / n).sqrt();
    let degenerate = sigma < DEGENERATE_SIGMA;
    Ok(Standardized {
        delta: if degenerate { 0.0 } else { (p - mu) / sigma },
        mu,
        sigma,
        degenerate,
    })
}

/// What a candidate is: a full token, or one value of an attribute with
/// token probabilities summed per value.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum DeviationMode {
    Token,
    Marginal { attribute: String },
}

impl Default for DeviationMode {
    fn default() -> Self {
        DeviationMode::Marginal {
            attribute: "merchant_category".into(),
        }
    }
}

/// Δ of one candidate token given a nonempty prefix.
pub fn deviation(model: &Model, prefix: &[u32], profile: &[usize], candidate: u32) -> Result<Standardized> {
    if prefix.is_empty() {
        return Err(PantherError::Empty("deviation needs a nonempty prefix".into()));
    }
    let probs = model.next_distributions(prefix, profile, &[prefix.len()])?.remove(0);
    let scorer = TokenCandidates;
    standardize(&scorer.distribution(&probs), scorer.index(candidate)?)
}

struct TokenCandidates;

impl TokenCandidates {
    // every id except PAD and PROFILE
    fn distribution(&self, probs: &[f32]) -> Vec<f64> {
        probs
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != PAD_ID as usize && i != PROFILE_ID as usize)
            .map(|(_, &p)| p as f64)
            .collect()
    }

    fn index(&self, id: u32) -> Result<usize> {
        match id {
            PAD_ID | PROFILE_ID => Err(PantherError::TokenRange { id: id as usize, size: 0 }),
            i if i < PROFILE_ID => Ok(i as usize - 1),
            i => Ok(i as usize - 2),
        }
    }
}

/// One scored event.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviationScore {
    pub user: String,
    pub merchant: Option<String>,
    pub position: usize,
    pub delta: f64,
    pub mu: f64,
    pub sigma: f64,
    /// Degenerate distribution.
    pub flag: bool,
    pub surprisal: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<bool>,
}

/// Scores observed events against the model's predictions for them.
pub struct DeviationScorer<'a> {
    model: &'a Model,
    vocab: &'a Vocab,
    marginal: Option<(usize, Vec<Option<usize>>, usize)>,
}

impl<'a> DeviationScorer<'a> {
    pub fn new(model: &'a Model, vocab: &'a Vocab, mode: &DeviationMode) -> Result<Self> {
        if vocab.len() != model.config.vocab_size {
            return Err(PantherError::VocabMismatch {
                expected: model.config.vocab_size.to_string(),
                found: vocab.len().to_string(),
            });
        }
        let marginal = match mode {
            DeviationMode::Token => None,
            DeviationMode::Marginal { attribute } => {
                let pos = vocab
                    .schema()
                    .position(attribute)
                    .ok_or_else(|| PantherError::Schema(format!("unknown attribute `{attribute}`")))?;
                let values = vocab.schema().attributes[pos].values.len();
                Some((pos, vocab.attribute_column(pos), values))
            }
        };
        Ok(Self { model, vocab, marginal })
    }

    /// Candidate distribution derived from a next-token distribution.
    /// Marginal mode drops the mass of `[UNK]`.
    pub fn distribution(&self, probs: &[f32]) -> Vec<f64> {
        match &self.marginal {
            None => TokenCandidates.distribution(probs),
            Some((_, column, values)) => {
                let mut out = vec![0.0; *values];
                for (p, v) in probs.iter().zip(column) {
                    if let Some(v) = v {
                        out[*v] += *p as f64;
                    }
                }
                out
            }
        }
    }

    fn candidate(&self, event: &crate::events::RawEvent, token: u32) -> Result<usize> {
        match &self.marginal {
            None => TokenCandidates.index(token),
            Some((pos, _, _)) => {
                let def = &self.vocab.schema().attributes[*pos];
                let value = event
                    .attributes
                    .get(&def.name)
                    .ok_or_else(|| PantherError::Schema(format!("event lacks `{}`", def.name)))?;
                def.value_index(value)
                    .ok_or_else(|| PantherError::Schema(format!("unknown value `{value}` for `{}`", def.name)))
            }
        }
    }

    /// Scores events `from..` of `user` (position 0 has no prefix and is
    /// skipped).
    pub fn user_deviations(&self, user: &UserRecord, from: usize) -> Result<Vec<DeviationScore>> {
        let ids = self.vocab.encode(user)?.ids;
        let positions: Vec<usize> = (from.max(1)..ids.len()).collect();
        if positions.is_empty() {
            return Ok(Vec::new());
        }
        let profile = self.model.profile_indices(&user.profile);
        let dists = self.model.next_distributions(&ids, &profile, &positions)?;
        positions
            .iter()
            .zip(dists)
            .map(|(&t, probs)| {
                let event = &user.events[t];
                let s = standardize(&self.distribution(&probs), self.candidate(event, ids[t])?)?;
                Ok(DeviationScore {
                    user: user.user_id.clone(),
                    merchant: event.counterparty.clone(),
                    position: t,
                    delta: s.delta,
                    mu: s.mu,
                    sigma: s.sigma,
                    flag: s.degenerate,
                    surprisal: surprisal(probs[ids[t] as usize] as f64),
                    label: event.label,
                })
            })
            .collect()
    }

    /// Every user's deviations, in user order.
    pub fn all_deviations(&self, users: &[UserRecord]) -> Result<Vec<DeviationScore>> {
        let parts: Vec<Result<Vec<DeviationScore>>> = users.par_iter().map(|u| self.user_deviations(u, 1)).collect();
        let mut out = Vec::new();
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }
}

/// Linear-interpolation quantile (`(n−1)·q` between order statistics).
pub fn quantile(values: &[f64], q: f64) -> Result<f64> {
    if !(q > 0.0 && q < 1.0) {
        return Err(config_err(format!("quantile level {q} outside (0, 1)")));
    }
    if values.is_empty() {
        return Err(PantherError::Empty("quantile of no values".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = (v.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    Ok(v[lo] + (h - lo as f64) * (v[hi] - v[lo]))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MerchantRiskScore {
    pub merchant: String,
    pub risk: f64,
    pub q: f64,
    pub users: usize,
    pub median: f64,
    pub iqr: f64,
    pub flagged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskReport {
    /// Most anomalous first: ascending risk for the lower tail.
    pub merchants: Vec<MerchantRiskScore>,
    pub threshold: f64,
    pub flagged: Vec<String>,
}

impl RiskReport {
    /// 0-based position of `merchant`, most anomalous first.
    pub fn rank_of(&self, merchant: &str) -> Option<usize> {
        self.merchants.iter().position(|m| m.merchant == merchant)
    }
}

/// One Δ per (user, merchant): the mean over that user's events there.
pub fn group_by_merchant(scores: &[DeviationScore]) -> BTreeMap<String, Vec<f64>> {
    let mut sums: BTreeMap<(&str, &str), (f64, usize)> = BTreeMap::new();
    for s in scores {
        if let Some(m) = &s.merchant {
            let e = sums.entry((m.as_str(), s.user.as_str())).or_default();
            e.0 += s.delta;
            e.1 += 1;
        }
    }
    let mut out: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for ((m, _), (sum, n)) in sums {
        out.entry(m.to_string()).or_default().push(sum / n as f64);
    }
    out
}

/// Which end of a merchant's Δ distribution signals risk.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tail {
    /// Unlikely behavior (negative Δ) is risky; `R_m = Quantile_q`.
    #[default]
    Lower,
    /// Overly likely behavior is risky; `R_m = Quantile_{1−q}`.
    Upper,
}

/// `R_m = Quantile_q(Δ_{u,m})` per merchant; merchants with `R_m ≤
/// threshold` are flagged.
pub fn merchant_risk(groups: &BTreeMap<String, Vec<f64>>, q: f64, threshold: f64) -> Result<RiskReport> {
    merchant_risk_tail(groups, q, threshold, Tail::Lower)
}

/// [`merchant_risk`] with a chosen tail. Upper-tail reports sort by
/// descending `R_m` and flag `R_m ≥ threshold`.
pub fn merchant_risk_tail(groups: &BTreeMap<String, Vec<f64>>, q: f64, threshold: f64, tail: Tail) -> Result<RiskReport> {
    let level = match tail {
        Tail::Lower => q,
        Tail::Upper => 1.0 - q,
    };
    let mut merchants = groups
        .iter()
        .map(|(m, d)| {
            let risk = quantile(d, level)?;
            let mid = |p| quantile(d, p);
            Ok(MerchantRiskScore {
                merchant: m.clone(),
                risk,
                q,
                users: d.len(),
                median: mid(0.5)?,
                iqr: mid(0.75)? - mid(0.25)?,
                flagged: match tail {
                    Tail::Lower => risk <= threshold,
                    Tail::Upper => risk >= threshold,
                },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    merchants.sort_by(|a, b| {
        let ord = a.risk.total_cmp(&b.risk);
        let ord = if tail == Tail::Upper { ord.reverse() } else { ord };
        ord.then_with(|| a.merchant.cmp(&b.merchant))
    });
    let flagged = merchants.iter().filter(|m| m.flagged).map(|m| m.merchant.clone()).collect();
    Ok(RiskReport {
        merchants,
        threshold,
        flagged,
    })
}

pub fn write_deviations(path: &Path, scores: &[DeviationScore]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in scores {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_risk(path: &Path, report: &RiskReport) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, report)?;
    w.flush()?;
    Ok(())
}
