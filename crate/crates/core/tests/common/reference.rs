//! Plain beam search without repetition penalties, written independently of
//! the library decoder, plus the constructed models used by the penalty laws.

use kgstory::beam::{beam_search, BeamConfig, CapPolicy, LengthUnit, StepScorer};
use kgstory::neural::log_softmax_row;

pub struct Plain {
    pub tokens: Vec<usize>,
    pub score: f64,
}

/// Beam search over `model` that only enforces the sentence structure:
/// `end` is unavailable until `sentences` boundaries are emitted and a story
/// finishes on its last boundary. A sentence of `sentence_cap` tokens can
/// only be followed by the boundary.
#[allow(clippy::too_many_arguments)]
pub fn plain_beam<M: StepScorer>(
    model: &mut M,
    beam: usize,
    end: usize,
    boundary: usize,
    sentences: usize,
    sentence_cap: usize,
    banned: &[usize],
    max_tokens: usize,
) -> Plain {
    let mut live: Vec<(Vec<usize>, f64)> = vec![(vec![], 0.0)];
    let mut done: Vec<(Vec<usize>, f64)> = vec![];
    while !live.is_empty() {
        let mut cands: Vec<(f64, usize, usize)> = vec![];
        let mut any = false;
        for (hi, (toks, score)) in live.iter().enumerate() {
            if toks.len() >= max_tokens {
                done.push((toks.clone(), *score));
                continue;
            }
            any = true;
            let lp = model.next_log_probs(toks).unwrap();
            let seps = toks.iter().filter(|&&t| t == boundary).count();
            let open = toks.iter().rev().take_while(|&&t| t != boundary).count();
            for (t, &p) in lp.iter().enumerate() {
                if banned.contains(&t) || (t == end && seps < sentences) {
                    continue;
                }
                if open >= sentence_cap && t != boundary {
                    continue;
                }
                cands.push((score + p, t, hi));
            }
        }
        if !any {
            break;
        }
        cands.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut next = vec![];
        for &(s, t, hi) in cands.iter().take(beam) {
            let mut toks = live[hi].0.clone();
            toks.push(t);
            let seps = toks.iter().filter(|&&x| x == boundary).count();
            if t == end || (t == boundary && seps == sentences) {
                done.push((toks, s));
            } else {
                next.push((toks, s));
            }
        }
        live = next;
        let best_done = done.iter().map(|d| d.1).fold(f64::NEG_INFINITY, f64::max);
        let best_live = live.iter().map(|d| d.1).fold(f64::NEG_INFINITY, f64::max);
        if best_done >= best_live {
            break;
        }
    }
    let mut best = 0;
    for i in 1..done.len() {
        if done[i].1 > done[best].1 {
            best = i;
        }
    }
    let (tokens, score) = done.swap_remove(best);
    Plain { tokens, score }
}

pub const VOCAB: usize = 20;
pub const END: usize = 0;
pub const BOUNDARY: usize = 1;

/// Context-free model over a 20-token vocabulary: `favored` has logit 0,
/// each rival sits just over `gap` nats below it, the boundary 30 below and
/// every other token 40 below.
pub fn rival_model(favored: usize, rivals: Vec<usize>, gap: f64) -> impl FnMut(&[usize]) -> Vec<f64> {
    move |_: &[usize]| {
        let logits: Vec<f64> = (0..VOCAB)
            .map(|t| {
                if t == favored {
                    0.0
                } else if let Some(j) = rivals.iter().position(|&r| r == t) {
                    -gap - 1e-3 * j as f64
                } else if t == BOUNDARY {
                    -30.0
                } else {
                    -40.0
                }
            })
            .collect();
        log_softmax_row(&logits)
    }
}

pub fn story_config(beam: usize, alpha: f64, gamma: f64, sentences: usize, max_tokens: usize) -> BeamConfig {
    BeamConfig {
        beam_size: beam,
        alpha,
        gamma,
        end: END,
        boundary: Some(BOUNDARY),
        sentences: Some(sentences),
        max_sentence_tokens: None,
        max_tokens,
        on_cap: CapPolicy::Truncate,
        banned: vec![],
        exempt: vec![],
        length_unit: LengthUnit::Tokens,
    }
}

/// Checks the intra-sentence law on every step of a decode: whenever the
/// chosen token repeats one from the current sentence, no fresh token had a
/// log-probability within `alpha` of it. Returns the number of violations.
pub fn repeat_violations(tokens: &[usize], lp: &[f64], alpha: f64) -> usize {
    let mut current: Vec<usize> = vec![];
    let mut violations = 0;
    for &t in tokens {
        if t == BOUNDARY || t == END {
            current.clear();
            continue;
        }
        if current.contains(&t) {
            let close_fresh = (2..VOCAB)
                .filter(|x| !current.contains(x))
                .any(|x| lp[x] > lp[t] - alpha);
            if close_fresh {
                violations += 1;
            }
        }
        current.push(t);
    }
    violations
}

/// Exhaustive sweep of the intra-sentence law: every favored word, every
/// number of rival words within 20 nats of it, several gaps, beam 1 and 3.
/// The sentence budget never forces a repeat, so any repeat is a violation.
/// Returns `(decodes checked, violations)`.
pub fn sweep_intra_sentence_law() -> (usize, usize) {
    let (mut checked, mut violations) = (0, 0);
    for favored in 2..VOCAB {
        for k in 1..VOCAB - 2 {
            let rivals: Vec<usize> = (1..=k).map(|j| 2 + (favored - 2 + j) % (VOCAB - 2)).collect();
            for gap in [0.5, 5.0, 19.5] {
                for beam in [1, 3] {
                    let mut model = rival_model(favored, rivals.clone(), gap);
                    let lp = model(&[]);
                    let r = beam_search(&mut model, &story_config(beam, 20.0, 5.0, 2, k + 1)).unwrap();
                    let mut seen: Vec<usize> = vec![];
                    let mut repeated = 0;
                    for &t in &r.tokens {
                        if seen.contains(&t) {
                            repeated += 1;
                        }
                        seen.push(t);
                    }
                    violations += repeated.max(repeat_violations(&r.tokens, &lp, 20.0));
                    checked += 1;
                }
            }
        }
    }
    (checked, violations)
}
