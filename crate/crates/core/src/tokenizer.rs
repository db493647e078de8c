//! Structured tokenization: attribute tuples become atomic tokens, and a
//! frequency cap folds the long tail into a single `[UNK]` sink.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{config_err, PantherError, Result};
use crate::events::{RawEvent, UserRecord};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const PROFILE_ID: u32 = 2;
pub const NUM_RESERVED: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeDef {
    pub name: String,
    pub values: Vec<String>,
}

impl AttributeDef {
    pub fn new(name: &str, values: &[&str]) -> Self {
        Self {
            name: name.to_string(),
            values: values.iter().map(|v| v.to_string()).collect(),
        }
    }

    pub fn value_index(&self, value: &str) -> Option<usize> {
        self.values.iter().position(|v| v == value)
    }
}

/// Ordered attribute names with their categorical value sets.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AttributeSchema {
    pub attributes: Vec<AttributeDef>,
}

impl AttributeSchema {
    pub fn new(attributes: Vec<AttributeDef>) -> Result<Self> {
        if attributes.is_empty() {
            return Err(config_err("schema needs at least one attribute"));
        }
        for (i, a) in attributes.iter().enumerate() {
            if a.values.is_empty() {
                return Err(config_err(format!("attribute `{}` has no values", a.name)));
            }
            if attributes[..i].iter().any(|b| b.name == a.name) {
                return Err(config_err(format!("duplicate attribute `{}`", a.name)));
            }
        }
        Ok(Self { attributes })
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.attributes.iter().position(|a| a.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&AttributeDef> {
        self.attributes.iter().find(|a| a.name == name)
    }

    pub fn len(&self) -> usize {
        self.attributes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attributes.is_empty()
    }

    /// Size of the full Cartesian product of value sets.
    pub fn product_size(&self) -> u128 {
        self.attributes.iter().map(|a| a.values.len() as u128).product()
    }

    /// Extracts the event's tuple in schema order, checking value sets.
    pub fn tuple_of(&self, event: &RawEvent) -> Result<StructuredToken> {
        let mut values = Vec::with_capacity(self.attributes.len());
        for attr in &self.attributes {
            let v = event.attributes.get(&attr.name).ok_or_else(|| {
                PantherError::Schema(format!("event lacks attribute `{}`", attr.name))
            })?;
            if attr.value_index(v).is_none() {
                return Err(PantherError::Schema(format!(
                    "value `{v}` not in the value set of `{}`",
                    attr.name
                )));
            }
            values.push(v.clone());
        }
        Ok(StructuredToken(values))
    }

    /// Like [`tuple_of`](Self::tuple_of) but without value-set validation;
    /// unseen values simply never match a retained token.
    fn lookup_key(&self, event: &RawEvent) -> Result<Vec<String>> {
        self.attributes
            .iter()
            .map(|attr| {
                event.attributes.get(&attr.name).cloned().ok_or_else(|| {
                    PantherError::Schema(format!("event lacks attribute `{}`", attr.name))
                })
            })
            .collect()
    }
}

/// One attribute tuple, e.g. `CreditCard_50-100_Fuel_LowRisk`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StructuredToken(pub Vec<String>);

impl StructuredToken {
    pub fn canonical(&self) -> String {
        self.0.join("_")
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Decoded<'a> {
    Pad,
    Unk,
    Profile,
    Token(&'a StructuredToken),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub user_id: String,
    pub ids: Vec<u32>,
    pub timestamps: Vec<u64>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct Vocab {
    schema: AttributeSchema,
    tokens: Vec<StructuredToken>,
    freqs: Vec<u64>,
    index: HashMap<Vec<String>, u32>,
    cap: usize,
    coverage: f64,
}

#[derive(Serialize, Deserialize)]
struct VocabFileToken {
    tuple: Vec<String>,
    freq: u64,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    schema: Vec<AttributeDef>,
    tokens: Vec<VocabFileToken>,
    coverage: f64,
}

impl Vocab {
    fn from_parts(
        schema: AttributeSchema,
        tokens: Vec<StructuredToken>,
        freqs: Vec<u64>,
        cap: usize,
        coverage: f64,
    ) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.0.clone(), (i + NUM_RESERVED) as u32))
            .collect();
        Self {
            schema,
            tokens,
            freqs,
            index,
            cap,
            coverage,
        }
    }

    /// Total id space including the reserved ids.
    pub fn len(&self) -> usize {
        NUM_RESERVED + self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn schema(&self) -> &AttributeSchema {
        &self.schema
    }

    pub fn coverage(&self) -> f64 {
        self.coverage
    }

    pub fn cap(&self) -> usize {
        self.cap
    }

    pub fn retained(&self) -> &[StructuredToken] {
        &self.tokens
    }

    pub fn frequencies(&self) -> &[u64] {
        &self.freqs
    }

    pub fn id_of(&self, token: &StructuredToken) -> u32 {
        self.index.get(&token.0).copied().unwrap_or(UNK_ID)
    }

    pub fn encode_event(&self, event: &RawEvent) -> Result<u32> {
        let key = self.schema.lookup_key(event)?;
        Ok(self.index.get(&key).copied().unwrap_or(UNK_ID))
    }

    pub fn encode(&self, user: &UserRecord) -> Result<TokenSequence> {
        self.encode_events(&user.user_id, &user.events)
    }

    pub fn encode_events(&self, user_id: &str, events: &[RawEvent]) -> Result<TokenSequence> {
        let ids = events
            .iter()
            .map(|e| self.encode_event(e))
            .collect::<Result<Vec<_>>>()?;
        Ok(TokenSequence {
            user_id: user_id.to_string(),
            ids,
            timestamps: events.iter().map(|e| e.timestamp).collect(),
        })
    }

    pub fn decode(&self, id: u32) -> Result<Decoded<'_>> {
        match id {
            PAD_ID => Ok(Decoded::Pad),
            UNK_ID => Ok(Decoded::Unk),
            PROFILE_ID => Ok(Decoded::Profile),
            _ => self
                .tokens
                .get(id as usize - NUM_RESERVED)
                .map(Decoded::Token)
                .ok_or(PantherError::TokenRange {
                    id: id as usize,
                    size: self.len(),
                }),
        }
    }

    /// Value of attribute `attr` (schema position) for each id; `None` for
    /// the reserved ids.
    pub fn attribute_column(&self, attr: usize) -> Vec<Option<usize>> {
        let def = &self.schema.attributes[attr];
        let mut out = vec![None; NUM_RESERVED];
        out.extend(self.tokens.iter().map(|t| def.value_index(&t.0[attr])));
        out
    }

    /// `|product space| / (K + 3)`.
    pub fn compression_ratio(&self) -> f64 {
        self.schema.product_size() as f64 / (self.cap + NUM_RESERVED) as f64
    }

    fn to_file(&self) -> VocabFile {
        VocabFile {
            schema: self.schema.attributes.clone(),
            tokens: self
                .tokens
                .iter()
                .zip(&self.freqs)
                .map(|(t, &freq)| VocabFileToken {
                    tuple: t.0.clone(),
                    freq,
                })
                .collect(),
            coverage: self.coverage,
        }
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec(&self.to_file())?)
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let file: VocabFile = serde_json::from_slice(bytes)?;
        let schema = AttributeSchema::new(file.schema)?;
        let cap = file.tokens.len().max(1);
        let (tokens, freqs) = file
            .tokens
            .into_iter()
            .map(|t| (StructuredToken(t.tuple), t.freq))
            .unzip();
        Ok(Self::from_parts(schema, tokens, freqs, cap, file.coverage))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read(path)?)
    }

    /// SHA-256 over the serialized vocabulary, hex encoded.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(&self.to_file()).expect("vocab serializes");
        hex_digest(&bytes)
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Keeps the `cap` most frequent tuples (ties: canonical string ascending)
/// and measures how many training events they cover.
pub fn build_vocab<'a>(
    events: impl IntoIterator<Item = &'a RawEvent>,
    schema: &AttributeSchema,
    cap: usize,
) -> Result<Vocab> {
    if cap < 1 {
        return Err(config_err("vocabulary cap must be at least 1"));
    }
    let mut counts: HashMap<StructuredToken, u64> = HashMap::new();
    let mut total = 0u64;
    for e in events {
        *counts.entry(schema.tuple_of(e)?).or_default() += 1;
        total += 1;
    }
    if total == 0 {
        return Err(PantherError::Empty("vocabulary corpus has no events".into()));
    }
    let mut ranked: Vec<(String, StructuredToken, u64)> = counts
        .into_iter()
        .map(|(t, c)| (t.canonical(), t, c))
        .collect();
    ranked.sort_by(|a, b| b.2.cmp(&a.2).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(cap);

    let covered: u64 = ranked.iter().map(|r| r.2).sum();
    let coverage = covered as f64 / total as f64;
    let (tokens, freqs): (Vec<_>, Vec<_>) = ranked.into_iter().map(|(_, t, c)| (t, c)).unzip();
    let vocab = Vocab::from_parts(schema.clone(), tokens, freqs, cap, coverage);
    log::info!(
        "vocab: retained {} tokens, coverage {:.4}, compression ratio {:.1}x",
        vocab.retained().len(),
        coverage,
        vocab.compression_ratio()
    );
    Ok(vocab)
}

pub fn build_vocab_from_users(users: &[UserRecord], schema: &AttributeSchema, cap: usize) -> Result<Vocab> {
    build_vocab(users.iter().flat_map(|u| u.events.iter()), schema, cap)
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use proptest::prelude::*;

    use super::*;

    fn schema() -> AttributeSchema {
        AttributeSchema::new(vec![
            AttributeDef::new("c", &["x", "y", "z"]),
            AttributeDef::new("a", &["1", "2"]),
        ])
        .unwrap()
    }

    fn ev(c: &str, a: &str) -> RawEvent {
        let mut attributes = BTreeMap::new();
        attributes.insert("c".to_string(), c.to_string());
        attributes.insert("a".to_string(), a.to_string());
        RawEvent {
            user_id: "u".into(),
            timestamp: 0,
            attributes,
            label: None,
            counterparty: None,
        }
    }

    fn corpus(spec: &[((&str, &str), usize)]) -> Vec<RawEvent> {
        spec.iter()
            .flat_map(|&((c, a), n)| std::iter::repeat(ev(c, a)).take(n))
            .collect()
    }

    #[test]
    fn top_k_and_coverage() {
        let events = corpus(&[(("x", "1"), 5), (("y", "1"), 3), (("z", "2"), 2)]);
        let vocab = build_vocab(&events, &schema(), 2).unwrap();
        // brute-force: retained counts 5 + 3 of 10 events
        assert_eq!(vocab.len(), 5);
        assert!((vocab.coverage() - 0.8).abs() < 1e-12);
        assert_eq!(vocab.id_of(&StructuredToken(vec!["x".into(), "1".into()])), 3);
        assert_eq!(vocab.encode_event(&ev("z", "2")).unwrap(), UNK_ID);
    }

    #[test]
    fn no_compression_full_coverage() {
        let events = corpus(&[(("x", "1"), 5), (("y", "1"), 3)]);
        let vocab = build_vocab(&events, &schema(), 10).unwrap();
        assert_eq!(vocab.coverage(), 1.0);
    }

    #[test]
    fn ties_prefer_smaller_canonical_string() {
        let events = corpus(&[(("y", "1"), 2), (("x", "2"), 2), (("z", "1"), 9)]);
        let vocab = build_vocab(&events, &schema(), 2).unwrap();
        let kept: Vec<String> = vocab.retained().iter().map(|t| t.canonical()).collect();
        assert_eq!(kept, vec!["z_1", "x_2"]);
    }

    #[test]
    fn build_errors() {
        assert!(build_vocab(&corpus(&[(("x", "1"), 1)]), &schema(), 0).is_err());
        assert!(build_vocab(&Vec::<RawEvent>::new(), &schema(), 3).is_err());
        assert!(build_vocab(&[ev("w", "1")], &schema(), 3).is_err());
    }

    #[test]
    fn encode_decode_contracts() {
        let events = corpus(&[(("x", "1"), 5), (("y", "1"), 3), (("z", "2"), 2)]);
        let vocab = build_vocab(&events, &schema(), 2).unwrap();
        let user = UserRecord {
            user_id: "u".into(),
            events: vec![ev("x", "1"), ev("z", "2")],
            profile: BTreeMap::new(),
        };
        let seq = vocab.encode(&user).unwrap();
        assert_eq!(seq, vocab.encode(&user).unwrap());
        assert_eq!(seq.ids, vec![3, UNK_ID]);
        match vocab.decode(seq.ids[0]).unwrap() {
            Decoded::Token(t) => assert_eq!(t, &schema().tuple_of(&ev("x", "1")).unwrap()),
            other => panic!("{other:?}"),
        }
        assert_eq!(vocab.decode(UNK_ID).unwrap(), Decoded::Unk);
        assert_eq!(vocab.decode(PAD_ID).unwrap(), Decoded::Pad);
        assert!(matches!(
            vocab.decode(vocab.len() as u32),
            Err(PantherError::TokenRange { .. })
        ));
        let empty = UserRecord::default();
        assert!(vocab.encode(&empty).unwrap().is_empty());
    }

    #[test]
    fn json_round_trip_preserves_hash() {
        let events = corpus(&[(("x", "1"), 5), (("y", "1"), 3), (("z", "2"), 2)]);
        let vocab = build_vocab(&events, &schema(), 2).unwrap();
        let back = Vocab::from_json(&vocab.to_json().unwrap()).unwrap();
        assert_eq!(back.hash(), vocab.hash());
        assert_eq!(back.retained(), vocab.retained());
        let text = String::from_utf8(vocab.to_json().unwrap()).unwrap();
        assert!(text.starts_with(r#"{"schema":[{"name":"c""#), "{text}");
    }

    proptest! {
        #[test]
        fn coverage_is_monotone_in_cap(
            picks in proptest::collection::vec((0usize..3, 0usize..2), 1..200),
            k1 in 1usize..7,
            k2 in 1usize..7,
        ) {
            let cs = ["x", "y", "z"];
            let as_ = ["1", "2"];
            let events: Vec<RawEvent> = picks.iter().map(|&(c, a)| ev(cs[c], as_[a])).collect();
            let (lo, hi) = (k1.min(k2), k1.max(k2));
            let v_lo = build_vocab(&events, &schema(), lo).unwrap();
            let v_hi = build_vocab(&events, &schema(), hi).unwrap();
            prop_assert!(v_lo.coverage() <= v_hi.coverage());
            prop_assert!((0.0..=1.0).contains(&v_hi.coverage()));
        }
    }
}
