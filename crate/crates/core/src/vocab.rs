use std::collections::HashMap;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
/// Group boundary inside a term path, sentence boundary inside a story.
pub const SEP: &str = "<sep>";
pub const UNK: &str = "<unk>";

/// Closed token vocabulary with a stable id per token.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a vocabulary: `specials` first, then every other token in
    /// first-seen order.
    pub fn build<'a, I>(specials: &[&str], tokens: I) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut v = Self::new();
        for s in specials {
            v.add(s);
        }
        for t in tokens {
            v.add(t);
        }
        v
    }

    pub fn add(&mut self, token: &str) -> usize {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), self.tokens.len() - 1);
        self.tokens.len() - 1
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Id of `token`, falling back to the `<unk>` id when present.
    pub fn id_or_unk(&self, token: &str) -> Option<usize> {
        self.id(token).or_else(|| self.id(UNK))
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }
}

impl Serialize for Vocab {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.tokens.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vocab {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let tokens = Vec::<String>::deserialize(d)?;
        let mut v = Vocab::new();
        for t in &tokens {
            if v.contains(t) {
                return Err(serde::de::Error::custom(format!("duplicate token {t:?}")));
            }
            v.add(t);
        }
        Ok(v)
    }
}
