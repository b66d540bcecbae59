//! Language models over term sequences, used to rank candidate term paths.

mod ngram;
pub(crate) mod recurrent;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::neural::{Checkpoint, NeuralError};
use crate::vocab::{BOS, EOS, SEP};

pub use ngram::{NGramConfig, NGramLm};
pub use recurrent::{EpochReport, RecurrentLm, RecurrentLmConfig};

#[derive(Debug, Error)]
pub enum LmError {
    #[error("language model needs a nonempty training corpus")]
    EmptyCorpus,
    #[error("term sequence must start with {BOS} and end with {EOS}: {0:?}")]
    BadMarkers(Vec<String>),
    #[error("unrecognized language model file {0}")]
    UnknownFormat(String),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error("{0}: {1}")]
    Io(String, #[source] std::io::Error),
    #[error("{0}: {1}")]
    Json(String, #[source] serde_json::Error),
}

/// Term tokens framed by begin/end markers, with group boundaries as
/// [`SEP`] tokens.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawSequence", into = "RawSequence")]
pub struct TermSequence {
    tokens: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct RawSequence {
    tokens: Vec<String>,
}

impl TryFrom<RawSequence> for TermSequence {
    type Error = LmError;
    fn try_from(raw: RawSequence) -> Result<Self, LmError> {
        TermSequence::new(raw.tokens)
    }
}

impl From<TermSequence> for RawSequence {
    fn from(s: TermSequence) -> Self {
        RawSequence { tokens: s.tokens }
    }
}

impl TermSequence {
    pub fn new(tokens: Vec<String>) -> Result<Self, LmError> {
        let ok = tokens.len() >= 2
            && tokens.first().map(String::as_str) == Some(BOS)
            && tokens.last().map(String::as_str) == Some(EOS);
        if !ok {
            return Err(LmError::BadMarkers(tokens));
        }
        Ok(Self { tokens })
    }

    /// Joins groups with [`SEP`], terms in stored order.
    pub fn from_groups<G, T>(groups: G) -> Self
    where
        G: IntoIterator<Item = T>,
        T: IntoIterator,
        T::Item: AsRef<str>,
    {
        let mut tokens = vec![BOS.to_string()];
        for (i, g) in groups.into_iter().enumerate() {
            if i > 0 {
                tokens.push(SEP.to_string());
            }
            tokens.extend(g.into_iter().map(|t| t.as_ref().to_string()));
        }
        tokens.push(EOS.to_string());
        Self { tokens }
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Number of predicted tokens: everything after the begin marker.
    pub fn predicted_len(&self) -> usize {
        self.tokens.len() - 1
    }
}

/// Scores token sequences. The first token is given; every later token is
/// predicted from its prefix.
pub trait LanguageModel {
    /// `log P(next | context)` for `next`.
    fn conditional_log_prob(&self, context: &[String], next: &str) -> f64;

    /// The prediction vocabulary, for normalization checks.
    fn prediction_vocab(&self) -> Vec<String>;

    /// `Σ_{i≥1} log P(t_i | t_0..t_{i-1})`.
    fn sequence_log_prob(&self, tokens: &[String]) -> f64 {
        (1..tokens.len())
            .map(|i| self.conditional_log_prob(&tokens[..i], &tokens[i]))
            .sum()
    }
}

pub fn log_prob<M: LanguageModel + ?Sized>(model: &M, seq: &TermSequence) -> f64 {
    model.sequence_log_prob(seq.tokens())
}

/// `exp(-log_prob / n)` with `n` counting the end marker but not the begin
/// marker.
pub fn perplexity<M: LanguageModel + ?Sized>(model: &M, seq: &TermSequence) -> f64 {
    (-log_prob(model, seq) / seq.predicted_len() as f64).exp()
}

/// Either language model variant, as loaded from disk.
#[derive(Clone, Debug)]
pub enum TermLm {
    NGram(NGramLm),
    Recurrent(RecurrentLm),
}

impl LanguageModel for TermLm {
    fn conditional_log_prob(&self, context: &[String], next: &str) -> f64 {
        match self {
            TermLm::NGram(m) => m.conditional_log_prob(context, next),
            TermLm::Recurrent(m) => m.conditional_log_prob(context, next),
        }
    }

    fn prediction_vocab(&self) -> Vec<String> {
        match self {
            TermLm::NGram(m) => m.prediction_vocab(),
            TermLm::Recurrent(m) => m.prediction_vocab(),
        }
    }

    fn sequence_log_prob(&self, tokens: &[String]) -> f64 {
        match self {
            TermLm::NGram(m) => m.sequence_log_prob(tokens),
            TermLm::Recurrent(m) => m.sequence_log_prob(tokens),
        }
    }
}

impl TermLm {
    pub fn save(&self, path: &Path) -> Result<(), LmError> {
        let text = match self {
            TermLm::NGram(m) => m.to_json()?,
            TermLm::Recurrent(m) => m.to_checkpoint()?.to_json()?,
        };
        fs::write(path, text).map_err(|e| LmError::Io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self, LmError> {
        let text = fs::read_to_string(path).map_err(|e| LmError::Io(path.display().to_string(), e))?;
        if Checkpoint::peek_kind(&text).as_deref() == Some(recurrent::CHECKPOINT_KIND) {
            let ckpt = Checkpoint::from_json(&text)?;
            return Ok(TermLm::Recurrent(RecurrentLm::from_checkpoint(ckpt)?));
        }
        if NGramLm::is_ngram_document(&text) {
            return Ok(TermLm::NGram(NGramLm::from_json(&text)?));
        }
        Err(LmError::UnknownFormat(path.display().to_string()))
    }
}

/// Reads a JSONL corpus of term sequences.
pub fn read_corpus(path: &Path) -> Result<Vec<TermSequence>, LmError> {
    let text = fs::read_to_string(path).map_err(|e| LmError::Io(path.display().to_string(), e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| LmError::Json(format!("{}:{}", path.display(), i + 1), e)))
        .collect()
}
