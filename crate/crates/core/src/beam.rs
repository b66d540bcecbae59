//! Beam search with intra-sentence and inter-sentence repetition penalties.
//!
//! Each candidate token `x` extending a hypothesis is scored as
//! `log p(x) - alpha * [x in S] - (gamma / l) * [x in R]`, where `S` holds
//! the tokens of the current sentence, `R` those of earlier sentences and `l`
//! the current story length. The term distiller uses the same engine with
//! `alpha = 1e19`, `gamma = 0` and no sentence boundaries.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::neural::NeuralError;

/// Intra-image penalty for repeated terms; large enough to act as a mask.
pub const TERM_REPEAT_PENALTY: f64 = 1e19;

/// `log p(x) - alpha * [in S] - (gamma / l) * [in R]`, `l` clamped to >= 1.
pub fn beam_score(log_p: f64, in_s: bool, in_r: bool, alpha: f64, gamma: f64, l: usize) -> f64 {
    let mut score = log_p;
    if in_s {
        score -= alpha;
    }
    if in_r {
        score -= gamma / l.max(1) as f64;
    }
    score
}

/// Supplies next-token log-probabilities for a prefix of generated ids.
pub trait StepScorer {
    fn next_log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>, NeuralError>;
}

impl<F> StepScorer for F
where
    F: FnMut(&[usize]) -> Vec<f64>,
{
    fn next_log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>, NeuralError> {
        Ok(self(prefix))
    }
}

/// What `l` counts in the inter-sentence penalty.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LengthUnit {
    /// Tokens generated so far in the whole story.
    #[default]
    Tokens,
    /// Index of the current sentence, counting from 1.
    Sentences,
}

/// What happens to a hypothesis that reaches `max_tokens`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CapPolicy {
    /// Append the end token with its model log-probability.
    ForceEnd,
    /// Stop where it is and flag the result as truncated.
    Truncate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeamConfig {
    pub beam_size: usize,
    pub alpha: f64,
    pub gamma: f64,
    pub end: usize,
    /// Sentence boundary token. `S` empties into `R` when it is emitted.
    pub boundary: Option<usize>,
    /// With a boundary token: the end token is masked until this many
    /// sentences are complete, and the hypothesis finishes on the last one.
    pub sentences: Option<usize>,
    /// With a boundary token: once a sentence holds this many tokens the
    /// boundary is the only allowed continuation.
    #[serde(default)]
    pub max_sentence_tokens: Option<usize>,
    /// Generated tokens allowed before [`CapPolicy`] applies.
    pub max_tokens: usize,
    pub on_cap: CapPolicy,
    /// Never generated.
    pub banned: Vec<usize>,
    /// Not tracked in `S` or `R`.
    pub exempt: Vec<usize>,
    pub length_unit: LengthUnit,
}

impl BeamConfig {
    /// Term decoding: hard no-repeat mask, end-of-set after `max_terms`.
    pub fn terms(beam_size: usize, end: usize, max_terms: usize) -> Self {
        Self {
            beam_size,
            alpha: TERM_REPEAT_PENALTY,
            gamma: 0.0,
            end,
            boundary: None,
            sentences: None,
            max_sentence_tokens: None,
            max_tokens: max_terms,
            on_cap: CapPolicy::ForceEnd,
            banned: Vec::new(),
            exempt: Vec::new(),
            length_unit: LengthUnit::Tokens,
        }
    }
}

#[derive(Clone, Debug)]
struct Hypothesis {
    tokens: Vec<usize>,
    step_scores: Vec<f64>,
    score: f64,
    current: BTreeSet<usize>,
    previous: BTreeSet<usize>,
    sentences_done: usize,
    sentence_len: usize,
}

impl Hypothesis {
    fn length(&self, unit: LengthUnit) -> usize {
        match unit {
            LengthUnit::Tokens => self.tokens.len(),
            LengthUnit::Sentences => self.sentences_done + 1,
        }
        .max(1)
    }
}

/// A finished decode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeamResult {
    /// Generated ids, including the end token when one was emitted.
    pub tokens: Vec<usize>,
    /// Per-token score increments; they sum to `score`.
    pub step_scores: Vec<f64>,
    pub score: f64,
    pub truncated: bool,
}

/// Runs the penalized beam search. Exact score ties are broken toward the
/// lower token id, then toward the earlier parent hypothesis.
pub fn beam_search<M: StepScorer + ?Sized>(model: &mut M, config: &BeamConfig) -> Result<BeamResult, NeuralError> {
    let beam = config.beam_size.max(1);
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        step_scores: Vec::new(),
        score: 0.0,
        current: BTreeSet::new(),
        previous: BTreeSet::new(),
        sentences_done: 0,
        sentence_len: 0,
    }];
    let mut finished: Vec<(Hypothesis, bool)> = Vec::new();

    while !live.is_empty() {
        let mut candidates: Vec<(f64, usize, usize, f64)> = Vec::new();
        let mut expandable = Vec::new();
        for (hi, h) in live.iter().enumerate() {
            let log_probs = model.next_log_probs(&h.tokens)?;
            if h.tokens.len() >= config.max_tokens {
                let mut done = h.clone();
                let truncated = match config.on_cap {
                    CapPolicy::ForceEnd => {
                        let lp = log_probs[config.end];
                        done.tokens.push(config.end);
                        done.step_scores.push(lp);
                        done.score += lp;
                        false
                    }
                    CapPolicy::Truncate => true,
                };
                finished.push((done, truncated));
                continue;
            }
            expandable.push(hi);
            let end_masked = match (config.boundary, config.sentences) {
                (Some(_), Some(n)) => h.sentences_done < n,
                _ => false,
            };
            let must_close = match (config.boundary, config.max_sentence_tokens) {
                (Some(_), Some(cap)) => h.sentence_len >= cap,
                _ => false,
            };
            let l = h.length(config.length_unit);
            for (tok, &lp) in log_probs.iter().enumerate() {
                if config.banned.contains(&tok) || (tok == config.end && end_masked) {
                    continue;
                }
                if must_close && Some(tok) != config.boundary {
                    continue;
                }
                if lp == f64::NEG_INFINITY {
                    continue;
                }
                let tracked = !config.exempt.contains(&tok) && tok != config.end && Some(tok) != config.boundary;
                let in_s = tracked && h.current.contains(&tok);
                let in_r = tracked && h.previous.contains(&tok);
                let inc = beam_score(lp, in_s, in_r, config.alpha, config.gamma, l);
                candidates.push((h.score + inc, tok, hi, inc));
            }
        }
        if expandable.is_empty() {
            break;
        }
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        candidates.truncate(beam);

        let mut next = Vec::with_capacity(beam);
        for (score, tok, hi, inc) in candidates {
            let mut h = live[hi].clone();
            h.tokens.push(tok);
            h.step_scores.push(inc);
            h.score = score;
            let mut done = tok == config.end;
            if Some(tok) == config.boundary {
                let cur = std::mem::take(&mut h.current);
                h.previous.extend(cur);
                h.sentences_done += 1;
                h.sentence_len = 0;
                if config.sentences == Some(h.sentences_done) {
                    done = true;
                }
            } else if tok != config.end {
                h.sentence_len += 1;
                if !config.exempt.contains(&tok) {
                    h.current.insert(tok);
                }
            }
            if done {
                finished.push((h, false));
            } else {
                next.push(h);
            }
        }
        live = next;

        let best_finished = finished.iter().map(|(h, _)| h.score).fold(f64::NEG_INFINITY, f64::max);
        let best_live = live.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
        // scores never increase, so no live hypothesis can overtake the best finished one
        if best_finished >= best_live {
            break;
        }
    }

    let (best, truncated) = finished
        .into_iter()
        .enumerate()
        .max_by(|(i, a), (j, b)| a.0.score.total_cmp(&b.0.score).then(j.cmp(i)))
        .map(|(_, x)| x)
        .ok_or_else(|| NeuralError::ShapeMismatch {
            op: "beam_search",
            detail: "no hypothesis finished; every token is banned or masked".into(),
        })?;
    Ok(BeamResult {
        tokens: best.tokens,
        step_scores: best.step_scores,
        score: best.score,
        truncated,
    })
}
