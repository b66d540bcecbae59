//! Corpus BLEU and distinct-n over tokenized text.

use std::collections::{HashMap, HashSet};

use log::warn;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("BLEU order must be in 1..=4, got {0}")]
    BadOrder(usize),
    #[error("distinct-n order must be at least 1")]
    ZeroOrder,
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("{candidates} candidates but {references} reference sets")]
    Misaligned { candidates: usize, references: usize },
    #[error("candidate {0} has no references")]
    NoReferences(usize),
}

fn ngrams<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    out
}

/// Clipped n-gram matches and candidate n-gram total for one candidate.
fn clipped<S: AsRef<str>>(candidate: &[S], references: &[Vec<S>], n: usize) -> (usize, usize) {
    let cand = ngrams(candidate, n);
    let mut max_ref: HashMap<Vec<&str>, usize> = HashMap::new();
    for r in references {
        for (g, c) in ngrams(r, n) {
            let e = max_ref.entry(g).or_insert(0);
            *e = (*e).max(c);
        }
    }
    let matched = cand
        .iter()
        .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
        .sum();
    (matched, cand.values().sum())
}

/// Reference length closest to `c`; ties go to the shorter reference.
fn closest_ref_len<S>(c: usize, references: &[Vec<S>]) -> usize {
    references
        .iter()
        .map(Vec::len)
        .min_by_key(|&r| (r.abs_diff(c), r))
        .unwrap_or(0)
}

/// Modified n-gram precisions `p_1..p_n` pooled over the corpus, and the
/// brevity penalty.
pub fn bleu_components<S: AsRef<str>>(
    candidates: &[Vec<S>],
    references: &[Vec<Vec<S>>],
    n: usize,
) -> Result<(Vec<f64>, f64), MetricsError> {
    if !(1..=4).contains(&n) {
        return Err(MetricsError::BadOrder(n));
    }
    if candidates.is_empty() {
        return Err(MetricsError::EmptyCorpus);
    }
    if candidates.len() != references.len() {
        return Err(MetricsError::Misaligned {
            candidates: candidates.len(),
            references: references.len(),
        });
    }
    if let Some(i) = references.iter().position(Vec::is_empty) {
        return Err(MetricsError::NoReferences(i));
    }
    let mut precisions = Vec::with_capacity(n);
    for k in 1..=n {
        let (m, t) = candidates
            .iter()
            .zip(references)
            .map(|(c, r)| clipped(c, r, k))
            .fold((0, 0), |(a, b), (m, t)| (a + m, b + t));
        precisions.push(if t == 0 { 0.0 } else { m as f64 / t as f64 });
    }
    let c: usize = candidates.iter().map(Vec::len).sum();
    let r: usize = candidates
        .iter()
        .zip(references)
        .map(|(cand, refs)| closest_ref_len(cand.len(), refs))
        .sum();
    let bp = if c == 0 {
        0.0
    } else if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    Ok((precisions, bp))
}

/// Corpus BLEU with uniform weights over orders `1..=n`.
pub fn bleu_n<S: AsRef<str>>(candidates: &[Vec<S>], references: &[Vec<Vec<S>>], n: usize) -> Result<f64, MetricsError> {
    let (p, bp) = bleu_components(candidates, references, n)?;
    if p.contains(&0.0) {
        return Ok(0.0);
    }
    let mean_log = p.iter().map(|x| x.ln()).sum::<f64>() / n as f64;
    Ok((bp * mean_log.exp()).clamp(0.0, 1.0))
}

/// Unique n-grams over total n-grams across all stories. An empty corpus
/// (or one with no n-grams) scores 0 with a warning.
pub fn distinct_n<S: AsRef<str>>(stories: &[Vec<S>], n: usize) -> Result<f64, MetricsError> {
    if n == 0 {
        return Err(MetricsError::ZeroOrder);
    }
    let mut unique: HashSet<Vec<&str>> = HashSet::new();
    let mut total = 0usize;
    for s in stories {
        if s.len() < n {
            continue;
        }
        for w in s.windows(n) {
            unique.insert(w.iter().map(AsRef::as_ref).collect());
            total += 1;
        }
    }
    if total == 0 {
        warn!("distinct-{n}: no {n}-grams in {} stories, reporting 0", stories.len());
        return Ok(0.0);
    }
    Ok(unique.len() as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn identical_corpus_scores_one() {
        let c = vec![toks("the dog runs in the park")];
        let r = vec![vec![toks("the dog runs in the park")]];
        for n in 1..=4 {
            assert_eq!(bleu_n(&c, &r, n).unwrap(), 1.0);
        }
    }

    #[test]
    fn no_overlap_scores_zero() {
        let c = vec![toks("a b c")];
        let r = vec![vec![toks("x y z")]];
        assert_eq!(bleu_n(&c, &r, 1).unwrap(), 0.0);
    }

    #[test]
    fn clipping_limits_repeats() {
        let c = vec![toks("the the the the")];
        let r = vec![vec![toks("the cat"), toks("the the dog")]];
        let (p, _) = bleu_components(&c, &r, 1).unwrap();
        assert_eq!(p[0], 0.5);
    }

    #[test]
    fn bad_inputs_are_errors() {
        let c: Vec<Vec<String>> = vec![];
        assert_eq!(bleu_n(&c, &[], 2), Err(MetricsError::EmptyCorpus));
        let c = vec![toks("a")];
        assert_eq!(bleu_n(&c, &[vec![toks("a")]], 5), Err(MetricsError::BadOrder(5)));
        assert_eq!(distinct_n(&c, 0), Err(MetricsError::ZeroOrder));
    }

    #[test]
    fn distinct_counts() {
        let s = vec![toks("a b a b")];
        assert_eq!(distinct_n(&s, 1).unwrap(), 0.5);
        assert_eq!(distinct_n(&s, 2).unwrap(), 2.0 / 3.0);
        let empty: Vec<Vec<String>> = vec![];
        assert_eq!(distinct_n(&empty, 2).unwrap(), 0.0);
    }
}
