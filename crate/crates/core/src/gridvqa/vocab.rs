use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const CLS_ID: u32 = 1;
pub const SEP_ID: u32 = 2;

const SPECIALS: [&str; 3] = ["[PAD]", "[CLS]", "[SEP]"];

const WORDS: [&str; 11] = [
    "what", "color", "is", "the", "shape", "object", "which", "row", "in", "at", "col",
];

/// Bijective token ↔ id map. Special tokens occupy ids 0–2.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocabulary {
    /// Specials, template words, colors, shapes and the digits 0–9.
    pub fn standard() -> Self {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(WORDS.iter().map(|s| s.to_string()));
        tokens.extend(super::Color::ALL.iter().map(|c| c.word().to_string()));
        tokens.extend(super::Shape::ALL.iter().map(|s| s.word().to_string()));
        tokens.extend((0..10).map(|d| d.to_string()));
        Self::from_tokens(tokens).expect("standard vocabulary is bijective")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::Input(format!("special token {s} must have id {i}")));
            }
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Input(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Result<u32> {
        self.ids
            .get(token)
            .copied()
            .ok_or_else(|| Error::Input(format!("token {token:?} not in vocabulary")))
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Encodes whitespace-separated words.
    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or("[UNK]"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// `token → id` map, the on-disk form.
    pub fn to_map(&self) -> BTreeMap<String, u32> {
        self.ids.iter().map(|(k, &v)| (k.clone(), v)).collect()
    }

    pub fn from_map(map: &BTreeMap<String, u32>) -> Result<Self> {
        let mut tokens = vec![None; map.len()];
        for (tok, &id) in map {
            let slot = tokens
                .get_mut(id as usize)
                .ok_or_else(|| Error::Input(format!("token id {id} is not dense")))?;
            if slot.replace(tok.clone()).is_some() {
                return Err(Error::Input(format!("id {id} assigned twice")));
            }
        }
        Self::from_tokens(tokens.into_iter().map(|t| t.expect("dense ids")).collect())
    }
}

/// Serialized through its `token → id` map.
impl Serialize for Vocabulary {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_map().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vocabulary {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let map = BTreeMap::<String, u32>::deserialize(d)?;
        Self::from_map(&map).map_err(serde::de::Error::custom)
    }
}
