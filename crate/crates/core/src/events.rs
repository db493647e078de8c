//! Event data model, JSON-lines I/O and chronological splitting.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, PantherError, Result};
use crate::tokenizer::AttributeSchema;

/// One raw behavioral event before tokenization.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawEvent {
    pub user_id: String,
    pub timestamp: u64,
    pub attributes: BTreeMap<String, String>,
    pub label: Option<bool>,
    pub counterparty: Option<String>,
}

impl RawEvent {
    pub fn is_fraud(&self) -> bool {
        self.label == Some(true)
    }
}

/// A user's time-ordered events plus static profile attributes.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct UserRecord {
    pub user_id: String,
    pub events: Vec<RawEvent>,
    pub profile: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct EventLine {
    user_id: String,
    ts: u64,
    attrs: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cp: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct ProfileLine {
    user_id: String,
    profile: BTreeMap<String, String>,
}

/// Reads `events.jsonl`, groups by user (first-appearance order) and sorts
/// each user's events by timestamp. Ties keep file order.
pub fn load_events(path: &Path, schema: &AttributeSchema) -> Result<Vec<UserRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut order: Vec<UserRecord> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();

    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: EventLine = serde_json::from_str(&line).map_err(|e| PantherError::Parse {
            path: path.to_path_buf(),
            line: lineno,
            message: e.to_string(),
        })?;
        for name in parsed.attrs.keys() {
            if schema.position(name).is_none() {
                return Err(PantherError::UnknownAttribute {
                    name: name.clone(),
                    line: lineno,
                });
            }
        }
        if let Some(missing) = schema
            .attributes
            .iter()
            .find(|a| !parsed.attrs.contains_key(&a.name))
        {
            return Err(PantherError::Parse {
                path: path.to_path_buf(),
                line: lineno,
                message: format!("missing attribute `{}`", missing.name),
            });
        }
        let label = match parsed.label {
            None => None,
            Some(0) => Some(false),
            Some(1) => Some(true),
            Some(other) => {
                return Err(PantherError::Parse {
                    path: path.to_path_buf(),
                    line: lineno,
                    message: format!("label must be 0 or 1, got {other}"),
                })
            }
        };
        let event = RawEvent {
            user_id: parsed.user_id,
            timestamp: parsed.ts,
            attributes: parsed.attrs,
            label,
            counterparty: parsed.cp,
        };
        let slot = *index.entry(event.user_id.clone()).or_insert_with(|| {
            order.push(UserRecord {
                user_id: event.user_id.clone(),
                ..Default::default()
            });
            order.len() - 1
        });
        order[slot].events.push(event);
    }

    for user in &mut order {
        user.events.sort_by_key(|e| e.timestamp);
    }
    Ok(order)
}

pub fn write_events(path: &Path, users: &[UserRecord]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for user in users {
        for e in &user.events {
            let line = EventLine {
                user_id: e.user_id.clone(),
                ts: e.timestamp,
                attrs: e.attributes.clone(),
                label: e.label.map(u8::from),
                cp: e.counterparty.clone(),
            };
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n")?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn write_profiles(path: &Path, users: &[UserRecord]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for user in users {
        let line = ProfileLine {
            user_id: user.user_id.clone(),
            profile: user.profile.clone(),
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Attaches `profiles.jsonl` entries to already-loaded users. Profile keys
/// must belong to `profile_schema`; users without a line keep an empty map.
pub fn load_profiles(
    path: &Path,
    profile_schema: &AttributeSchema,
    users: &mut [UserRecord],
) -> Result<()> {
    let reader = BufReader::new(File::open(path)?);
    let index: HashMap<String, usize> = users
        .iter()
        .enumerate()
        .map(|(i, u)| (u.user_id.clone(), i))
        .collect();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: ProfileLine = serde_json::from_str(&line).map_err(|e| PantherError::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            message: e.to_string(),
        })?;
        for name in parsed.profile.keys() {
            if profile_schema.position(name).is_none() {
                return Err(PantherError::UnknownAttribute {
                    name: name.clone(),
                    line: lineno + 1,
                });
            }
        }
        if let Some(&slot) = index.get(&parsed.user_id) {
            users[slot].profile = parsed.profile;
        }
    }
    Ok(())
}

/// Per-user cut indices: `events[..train_end]` train,
/// `events[train_end..valid_end]` validation, the rest test.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCut {
    pub train_end: usize,
    pub valid_end: usize,
}

#[derive(Clone, Debug)]
pub struct DatasetSplit {
    pub users: Vec<UserRecord>,
    pub cuts: Vec<SplitCut>,
    /// Users too short to split; they were assigned entirely to train.
    pub skipped: Vec<String>,
}

impl DatasetSplit {
    pub fn train(&self, user: usize) -> &[RawEvent] {
        &self.users[user].events[..self.cuts[user].train_end]
    }

    pub fn validation(&self, user: usize) -> &[RawEvent] {
        let c = self.cuts[user];
        &self.users[user].events[c.train_end..c.valid_end]
    }

    pub fn test(&self, user: usize) -> &[RawEvent] {
        &self.users[user].events[self.cuts[user].valid_end..]
    }

    pub fn train_events(&self) -> impl Iterator<Item = &RawEvent> {
        (0..self.users.len()).flat_map(move |u| self.train(u).iter())
    }

    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }
}

/// Minimum events a user needs to receive a three-way split.
pub const MIN_SPLIT_EVENTS: usize = 3;

fn floor_cut(len: usize, fraction: f64) -> usize {
    // absorb representation error such as 0.7 + 0.2 = 0.8999999999999999
    ((len as f64) * fraction + 1e-9).floor() as usize
}

pub fn chronological_split(users: Vec<UserRecord>, ratios: [f64; 3]) -> Result<DatasetSplit> {
    if ratios.iter().any(|r| !(*r > 0.0)) {
        return Err(config_err(format!("split ratios must be positive: {ratios:?}")));
    }
    let total: f64 = ratios.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(config_err(format!("split ratios must sum to 1, got {total}")));
    }
    let mut cuts = Vec::with_capacity(users.len());
    let mut skipped = Vec::new();
    for user in &users {
        let len = user.events.len();
        if len < MIN_SPLIT_EVENTS {
            skipped.push(user.user_id.clone());
            cuts.push(SplitCut {
                train_end: len,
                valid_end: len,
            });
            continue;
        }
        let train_end = floor_cut(len, ratios[0]);
        let valid_end = floor_cut(len, ratios[0] + ratios[1]).max(train_end).min(len);
        cuts.push(SplitCut {
            train_end,
            valid_end,
        });
    }
    Ok(DatasetSplit {
        users,
        cuts,
        skipped,
    })
}
