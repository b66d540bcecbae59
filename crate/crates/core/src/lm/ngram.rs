use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::{LanguageModel, LmError};
use crate::vocab::UNK;

const FORMAT: &str = "kgstory-ngram";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NGramConfig {
    pub order: usize,
    /// Add-k smoothing constant.
    pub k: f64,
    /// Adds `<unk>` to the prediction vocabulary and maps unseen tokens to it.
    pub unk: bool,
}

impl Default for NGramConfig {
    fn default() -> Self {
        Self {
            order: 3,
            k: 0.1,
            unk: true,
        }
    }
}

/// Add-k smoothed n-gram model over a closed vocabulary.
///
/// Contexts near the start of a sequence are truncated rather than padded,
/// so the first token of each sequence is conditioned on, never predicted.
#[derive(Clone, Debug)]
pub struct NGramLm {
    config: NGramConfig,
    /// Tokens that can be predicted.
    vocab: BTreeSet<String>,
    /// Tokens seen anywhere, including sequence-initial ones.
    known: BTreeSet<String>,
    counts: HashMap<Vec<String>, HashMap<String, u64>>,
    totals: HashMap<Vec<String>, u64>,
}

#[derive(Serialize, Deserialize)]
struct NGramFile {
    format: String,
    version: u32,
    config: NGramConfig,
    vocab: Vec<String>,
    known: Vec<String>,
    /// `(context, next, count)` sorted.
    counts: Vec<(Vec<String>, String, u64)>,
}

impl NGramLm {
    pub fn train<S: AsRef<[String]>>(corpus: &[S], config: NGramConfig) -> Result<Self, LmError> {
        if corpus.is_empty() || config.order == 0 {
            return Err(LmError::EmptyCorpus);
        }
        let mut vocab = BTreeSet::new();
        let mut known = BTreeSet::new();
        for seq in corpus {
            let seq = seq.as_ref();
            known.extend(seq.iter().cloned());
            vocab.extend(seq.iter().skip(1).cloned());
        }
        if config.unk {
            vocab.insert(UNK.to_string());
            known.insert(UNK.to_string());
        }
        let mut lm = Self {
            config,
            vocab,
            known,
            counts: HashMap::new(),
            totals: HashMap::new(),
        };
        for seq in corpus {
            let seq = seq.as_ref();
            for i in 1..seq.len() {
                let ctx = lm.context(&seq[..i]);
                *lm.counts
                    .entry(ctx.clone())
                    .or_default()
                    .entry(seq[i].clone())
                    .or_default() += 1;
                *lm.totals.entry(ctx).or_default() += 1;
            }
        }
        Ok(lm)
    }

    pub fn config(&self) -> &NGramConfig {
        &self.config
    }

    fn map_token(&self, t: &str) -> String {
        if self.config.unk && !self.known.contains(t) {
            UNK.to_string()
        } else {
            t.to_string()
        }
    }

    fn context(&self, prefix: &[String]) -> Vec<String> {
        let keep = self.config.order - 1;
        let start = prefix.len().saturating_sub(keep);
        prefix[start..].iter().map(|t| self.map_token(t)).collect()
    }

    /// `P(next | prefix)`.
    pub fn prob(&self, prefix: &[String], next: &str) -> f64 {
        let next = if self.config.unk && !self.vocab.contains(next) {
            UNK.to_string()
        } else {
            next.to_string()
        };
        let in_vocab = self.vocab.contains(&next);
        let ctx = self.context(prefix);
        let total = self.totals.get(&ctx).copied().unwrap_or(0) as f64;
        let v = self.vocab.len() as f64;
        let denom = total + self.config.k * v;
        if denom == 0.0 {
            // unseen context without smoothing: uniform
            return if in_vocab { 1.0 / v } else { 0.0 };
        }
        let c = self.counts.get(&ctx).and_then(|m| m.get(&next)).copied().unwrap_or(0) as f64;
        (c + self.config.k) / denom
    }

    pub fn to_json(&self) -> Result<String, LmError> {
        let mut counts: Vec<(Vec<String>, String, u64)> = self
            .counts
            .iter()
            .flat_map(|(ctx, m)| m.iter().map(move |(w, c)| (ctx.clone(), w.clone(), *c)))
            .collect();
        counts.sort();
        let file = NGramFile {
            format: FORMAT.into(),
            version: VERSION,
            config: self.config.clone(),
            vocab: self.vocab.iter().cloned().collect(),
            known: self.known.iter().cloned().collect(),
            counts,
        };
        serde_json::to_string(&file).map_err(|e| LmError::Json("n-gram model".into(), e))
    }

    pub fn from_json(text: &str) -> Result<Self, LmError> {
        let file: NGramFile = serde_json::from_str(text).map_err(|e| LmError::Json("n-gram model".into(), e))?;
        if file.format != FORMAT || file.version != VERSION {
            return Err(LmError::UnknownFormat(format!("{} v{}", file.format, file.version)));
        }
        let mut counts: HashMap<Vec<String>, HashMap<String, u64>> = HashMap::new();
        let mut totals: HashMap<Vec<String>, u64> = HashMap::new();
        for (ctx, w, c) in file.counts {
            *totals.entry(ctx.clone()).or_default() += c;
            counts.entry(ctx).or_default().insert(w, c);
        }
        Ok(Self {
            config: file.config,
            vocab: file.vocab.into_iter().collect(),
            known: file.known.into_iter().collect(),
            counts,
            totals,
        })
    }

    pub(super) fn is_ngram_document(text: &str) -> bool {
        #[derive(Deserialize)]
        struct Head {
            format: String,
        }
        serde_json::from_str::<Head>(text).is_ok_and(|h| h.format == FORMAT)
    }

    /// Counts as a sorted map, for inspection.
    pub fn counts(&self) -> BTreeMap<(Vec<String>, String), u64> {
        self.counts
            .iter()
            .flat_map(|(ctx, m)| m.iter().map(move |(w, c)| ((ctx.clone(), w.clone()), *c)))
            .collect()
    }
}

impl LanguageModel for NGramLm {
    fn conditional_log_prob(&self, context: &[String], next: &str) -> f64 {
        self.prob(context, next).ln()
    }

    fn prediction_vocab(&self) -> Vec<String> {
        self.vocab.iter().cloned().collect()
    }
}
