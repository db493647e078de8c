//! Seeded synthetic corpora with planted periodic motifs, demographic
//! clusters and out-of-cluster fraud.
//!
//! Every tuple of the attribute product space gets a global popularity
//! rank from a seeded shuffle. Merchant categories are partitioned across
//! clusters (category `j` belongs to cluster `j % clusters`), and a
//! cluster's background events follow a Zipf law over the ranks of its own
//! tuples. A user's age bucket sits near their cluster's center, and
//! their region rotates the cluster's ranking, so the profile predicts
//! which tuples dominate before the history does. Fraud events are drawn
//! from a different cluster's law, so they look ordinary in isolation and
//! only stand out against the user's history and profile.

use std::collections::BTreeMap;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::events::{RawEvent, UserRecord};
use crate::tokenizer::{AttributeDef, AttributeSchema};

pub const FRAUD_MERCHANT: &str = "m_fraud";
pub const REGION: &str = "region";
pub const AGE_BUCKET: &str = "age_bucket";

/// A periodic pattern template. Each cluster instantiates it with its own
/// tuples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotifSpec {
    /// Consecutive events per occurrence.
    pub length: usize,
    /// Distance in events between occurrence starts.
    pub period: usize,
    /// Probability that an occurrence is shifted by one slot.
    #[serde(default)]
    pub jitter: f64,
    /// Fixed start offset; random in `0..period` when absent.
    #[serde(default)]
    pub phase: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub num_users: usize,
    pub channels: usize,
    pub amount_buckets: usize,
    pub merchant_categories: usize,
    pub risk_levels: usize,
    pub min_events: usize,
    pub max_events: usize,
    pub motifs: Vec<MotifSpec>,
    /// Motifs each user follows, chosen from the cluster library.
    pub motifs_per_user: usize,
    /// Motif tuples come from cluster ranks in `[lo, hi)`.
    pub motif_rank_range: (usize, usize),
    pub zipf_exponent: f64,
    pub fraud_rate: f64,
    pub clusters: usize,
    /// Regions are drawn independently of clusters.
    pub regions: usize,
    pub age_buckets: usize,
    pub merchants_per_category: usize,
    /// Region `r` rotates every cluster's popularity ranking by `r` times
    /// this many places.
    pub region_rotation: usize,
    /// Emit background events; when false, non-motif slots stay empty.
    pub background: bool,
    pub start_timestamp: u64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_users: 2000,
            channels: 4,
            amount_buckets: 6,
            merchant_categories: 40,
            risk_levels: 4,
            min_events: 40,
            max_events: 80,
            motifs: vec![
                MotifSpec {
                    length: 2,
                    period: 3,
                    jitter: 0.0,
                    phase: None,
                },
                MotifSpec {
                    length: 3,
                    period: 7,
                    jitter: 0.0,
                    phase: None,
                },
            ],
            motifs_per_user: 1,
            motif_rank_range: (4, 120),
            zipf_exponent: 1.5,
            fraud_rate: 0.0,
            clusters: 4,
            regions: 4,
            age_buckets: 8,
            merchants_per_category: 5,
            region_rotation: 3,
            background: true,
            start_timestamp: 1_700_000_000,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn event_schema(&self) -> AttributeSchema {
        let attr = |name: &str, prefix: &str, n: usize| AttributeDef {
            name: name.to_string(),
            values: (0..n).map(|i| format!("{prefix}{i}")).collect(),
        };
        AttributeSchema {
            attributes: vec![
                attr("channel", "c", self.channels),
                attr("amount_bucket", "a", self.amount_buckets),
                attr("merchant_category", "m", self.merchant_categories),
                attr("risk_level", "r", self.risk_levels),
            ],
        }
    }

    pub fn profile_schema(&self) -> AttributeSchema {
        AttributeSchema {
            attributes: vec![
                AttributeDef {
                    name: REGION.to_string(),
                    values: (0..self.regions).map(|i| format!("region{i}")).collect(),
                },
                AttributeDef {
                    name: AGE_BUCKET.to_string(),
                    values: (0..self.age_buckets).map(|i| format!("age{i}")).collect(),
                },
            ],
        }
    }

    fn validate(&self) -> Result<()> {
        if [self.channels, self.amount_buckets, self.merchant_categories, self.risk_levels]
            .contains(&0)
        {
            return Err(config_err("attribute cardinalities must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.fraud_rate) {
            return Err(config_err(format!("fraud rate {} outside [0, 1]", self.fraud_rate)));
        }
        if self.regions == 0 || self.age_buckets == 0 {
            return Err(config_err("need at least one region and one age bucket"));
        }
        if self.clusters == 0 || self.clusters > self.merchant_categories {
            return Err(config_err(format!(
                "{} clusters need between 1 and {} merchant categories",
                self.clusters, self.merchant_categories
            )));
        }
        if self.fraud_rate > 0.0 && self.clusters == 1 && self.cluster_size() < 2 {
            return Err(config_err("fraud needs at least two tuples"));
        }
        if self.min_events == 0 || self.min_events > self.max_events {
            return Err(config_err("need 1 <= min_events <= max_events"));
        }
        if self.age_buckets == 0 || self.merchants_per_category == 0 {
            return Err(config_err("age buckets and merchants per category must be positive"));
        }
        if self.zipf_exponent <= 0.0 {
            return Err(config_err("zipf exponent must be positive"));
        }
        for m in &self.motifs {
            if m.length == 0 || m.length > m.period {
                return Err(config_err(format!(
                    "motif length {} must be in 1..={}",
                    m.length, m.period
                )));
            }
            if !(0.0..=1.0).contains(&m.jitter) {
                return Err(config_err(format!("motif jitter {} outside [0, 1]", m.jitter)));
            }
        }
        let (lo, hi) = self.motif_rank_range;
        let needed: usize = self.motifs.iter().map(|m| m.length).sum();
        if needed > 0 && (lo >= hi || hi > self.cluster_size() || hi - lo < needed) {
            return Err(config_err(format!(
                "motifs need {needed} distinct tuples per cluster in ranks {lo}..{hi}, \
                 but a cluster has {} tuples",
                self.cluster_size()
            )));
        }
        Ok(())
    }

    /// Tuples owned by the smallest cluster.
    fn cluster_size(&self) -> usize {
        let cats = self.merchant_categories / self.clusters;
        cats * self.channels * self.amount_buckets * self.risk_levels
    }
}

type Tuple = [usize; 4];

struct Cluster {
    /// Tuples in popularity order.
    ranked: Vec<Tuple>,
    zipf: WeightedIndex<f64>,
    library: Vec<Vec<Tuple>>,
}

impl Cluster {
    fn draw(&self, rng: &mut ChaCha8Rng, rotation: usize) -> Tuple {
        self.ranked[(self.zipf.sample(rng) + rotation) % self.ranked.len()]
    }
}

fn zipf_weights(n: usize, s: f64) -> WeightedIndex<f64> {
    WeightedIndex::new((1..=n).map(|k| (k as f64).powf(-s))).expect("nonempty positive weights")
}

/// Generates users deterministically from `spec`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<UserRecord>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut all: Vec<Tuple> = Vec::new();
    for c in 0..spec.channels {
        for a in 0..spec.amount_buckets {
            for m in 0..spec.merchant_categories {
                for r in 0..spec.risk_levels {
                    all.push([c, a, m, r]);
                }
            }
        }
    }
    all.shuffle(&mut rng);

    let clusters: Vec<Cluster> = (0..spec.clusters)
        .map(|k| {
            let ranked: Vec<Tuple> = all
                .iter()
                .filter(|t| t[2] % spec.clusters == k)
                .copied()
                .collect();
            let zipf = zipf_weights(ranked.len(), spec.zipf_exponent);
            let (lo, hi) = spec.motif_rank_range;
            let mut pool: Vec<Tuple> = if spec.motifs.is_empty() {
                Vec::new()
            } else {
                ranked[lo..hi].to_vec()
            };
            pool.shuffle(&mut rng);
            let mut it = pool.into_iter();
            let library = spec
                .motifs
                .iter()
                .map(|m| it.by_ref().take(m.length).collect())
                .collect();
            Cluster { ranked, zipf, library }
        })
        .collect();
    // Single-cluster fraud comes from the unpopular half of the space.
    let tail = clusters[0].ranked.len() / 2;
    let tail_pick = rand::distributions::Uniform::new(tail, clusters[0].ranked.len().max(tail + 1));

    let schema = spec.event_schema();
    let names: Vec<&str> = schema.attributes.iter().map(|a| a.name.as_str()).collect();
    let width = spec.num_users.saturating_sub(1).to_string().len();

    let mut users = Vec::with_capacity(spec.num_users);
    for u in 0..spec.num_users {
        let user_id = format!("u{u:0width$}");
        let k = rng.gen_range(0..spec.clusters);
        let cluster = &clusters[k];

        let center = if spec.clusters == 1 {
            spec.age_buckets / 2
        } else {
            k * (spec.age_buckets - 1) / (spec.clusters - 1)
        };
        let age = (center as i64 + rng.gen_range(-1..=1)).clamp(0, spec.age_buckets as i64 - 1);
        let region = rng.gen_range(0..spec.regions);
        let rotation = region * spec.region_rotation;
        let mut profile = BTreeMap::new();
        profile.insert(REGION.to_string(), format!("region{region}"));
        profile.insert(AGE_BUCKET.to_string(), format!("age{age}"));

        let len = rng.gen_range(spec.min_events..=spec.max_events);
        let mut slots: Vec<Option<Tuple>> = vec![None; len];
        let mut chosen: Vec<usize> = (0..spec.motifs.len()).collect();
        chosen.shuffle(&mut rng);
        chosen.truncate(spec.motifs_per_user.min(spec.motifs.len()));
        chosen.sort_unstable();
        for &mi in &chosen {
            let motif = &spec.motifs[mi];
            let tuples = &cluster.library[mi];
            let phase = match motif.phase {
                Some(p) => p,
                None => rng.gen_range(0..motif.period),
            };
            let mut start = phase;
            while start < len {
                let mut at = start as i64;
                if motif.jitter > 0.0 && rng.gen_bool(motif.jitter) {
                    at += if rng.gen_bool(0.5) { 1 } else { -1 };
                }
                for (i, t) in tuples.iter().enumerate() {
                    let pos = at + i as i64;
                    if pos >= 0 && (pos as usize) < len && slots[pos as usize].is_none() {
                        slots[pos as usize] = Some(*t);
                    }
                }
                start += motif.period;
            }
        }

        let mut ts = spec.start_timestamp + rng.gen_range(0..30 * 86_400);
        let mut events = Vec::with_capacity(len);
        for slot in slots {
            let (tuple, fraud) = match slot {
                Some(t) => (t, false),
                None if !spec.background => continue,
                None => {
                    if spec.fraud_rate > 0.0 && rng.gen_bool(spec.fraud_rate) {
                        let t = if spec.clusters == 1 {
                            clusters[0].ranked[tail_pick.sample(&mut rng)]
                        } else {
                            let other = (k + rng.gen_range(1..spec.clusters)) % spec.clusters;
                            clusters[other].draw(&mut rng, 0)
                        };
                        (t, true)
                    } else {
                        (cluster.draw(&mut rng, rotation), false)
                    }
                }
            };
            ts += rng.gen_range(3_600..3 * 86_400);
            let attributes: BTreeMap<String, String> = names
                .iter()
                .zip(tuple)
                .zip(&schema.attributes)
                .map(|((n, v), def)| (n.to_string(), def.values[v].clone()))
                .collect();
            let counterparty = if fraud {
                FRAUD_MERCHANT.to_string()
            } else {
                let j = rng.gen_range(0..spec.merchants_per_category);
                format!("{}_{j}", attributes["merchant_category"])
            };
            events.push(RawEvent {
                user_id: user_id.clone(),
                timestamp: ts,
                attributes,
                label: (spec.fraud_rate > 0.0).then_some(fraud),
                counterparty: Some(counterparty),
            });
        }
        users.push(UserRecord {
            user_id,
            events,
            profile,
        });
    }
    Ok(users)
}
