mod common;

use common::oracles::{
    check_add_one_bigram, check_normalization, check_recurrent_overfit, memorized_sequence, overfit_config,
};
use common::rng;
use kgstory::lm::{log_prob, perplexity, LanguageModel, NGramConfig, NGramLm, RecurrentLm, TermLm, TermSequence};
use proptest::prelude::*;
use rand::Rng;

fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

#[test]
fn add_one_bigram_hand_count() {
    check_add_one_bigram().unwrap();
}

#[test]
fn recurrent_lm_memorizes_one_sequence() {
    println!("{}", check_recurrent_overfit().unwrap());
}

#[test]
fn distributions_are_normalized() {
    println!("{}", check_normalization().unwrap());
}

#[test]
fn log_prob_is_the_sum_of_per_token_terms() {
    let corpus = [toks("<bos> a b <sep> c <eos>"), toks("<bos> b c <sep> a <eos>")];
    let lm = NGramLm::train(&corpus, NGramConfig::default()).unwrap();
    let seq = TermSequence::new(toks("<bos> a c <sep> b <eos>")).unwrap();
    let t = seq.tokens();
    let manual: f64 = (1..t.len()).map(|i| lm.prob(&t[..i], &t[i]).ln()).sum();
    assert!((log_prob(&lm, &seq) - manual).abs() < 1e-12);
    assert!((perplexity(&lm, &seq) - (-manual / 5.0).exp()).abs() < 1e-12);
}

#[test]
fn empty_corpus_is_an_error() {
    let none: [Vec<String>; 0] = [];
    assert!(NGramLm::train(&none, NGramConfig::default()).is_err());
    assert!(RecurrentLm::train(&[], overfit_config()).is_err());
}

#[test]
fn recurrent_and_ngram_rank_paths_alike() {
    // a deterministic pattern: x is always followed by y, p by q
    let corpus: Vec<TermSequence> = (0..6)
        .map(|i| {
            if i % 2 == 0 {
                TermSequence::from_groups([vec!["x", "y"], vec!["p", "q"]])
            } else {
                TermSequence::from_groups([vec!["p", "q"], vec!["x", "y"]])
            }
        })
        .collect();
    // no, one and six unseen transitions
    let candidates = [
        TermSequence::from_groups([vec!["x", "y"], vec!["p", "q"]]),
        TermSequence::from_groups([vec!["x", "y"], vec!["p", "y"]]),
        TermSequence::from_groups([vec!["y", "x"], vec!["q", "p"]]),
    ];
    let tokens: Vec<Vec<String>> = corpus.iter().map(|s| s.tokens().to_vec()).collect();
    let ngram = NGramLm::train(
        &tokens,
        NGramConfig {
            order: 2,
            k: 0.1,
            unk: true,
        },
    )
    .unwrap();
    let mut cfg = overfit_config();
    cfg.epochs = 80;
    let (rnn, _) = RecurrentLm::train(&corpus, cfg).unwrap();
    let rank = |m: &dyn LanguageModel| {
        let mut order: Vec<usize> = (0..candidates.len()).collect();
        order.sort_by(|&a, &b| perplexity(m, &candidates[a]).total_cmp(&perplexity(m, &candidates[b])));
        order
    };
    let (a, b) = (rank(&ngram), rank(&rnn));
    assert_eq!(a, [0, 1, 2]);
    assert_eq!(a, b);
}

#[test]
fn saved_models_load_back() {
    let dir = tempfile::tempdir().unwrap();
    let seq = memorized_sequence();
    let ngram = TermLm::NGram(NGramLm::train(&[seq.tokens().to_vec()], NGramConfig::default()).unwrap());
    let mut cfg = overfit_config();
    cfg.epochs = 2;
    let rnn = TermLm::Recurrent(RecurrentLm::train(std::slice::from_ref(&seq), cfg).unwrap().0);
    for (name, lm) in [("n.json", ngram), ("r.json", rnn)] {
        let p = dir.path().join(name);
        lm.save(&p).unwrap();
        let back = TermLm::load(&p).unwrap();
        assert_eq!(log_prob(&back, &seq), log_prob(&lm, &seq));
    }
}

fn random_corpus(seed: u64) -> Vec<Vec<String>> {
    let mut r = rng(seed);
    (0..8)
        .map(|_| {
            let groups: Vec<Vec<String>> = (0..r.gen_range(1..5))
                .map(|_| {
                    (0..r.gen_range(1..4))
                        .map(|_| format!("w{}", r.gen_range(0..6)))
                        .collect()
                })
                .collect();
            TermSequence::from_groups(groups).tokens().to_vec()
        })
        .collect()
}

proptest! {
    #[test]
    fn ngram_perplexity_is_consistent(seed in 0u64..300, order in 1usize..4, k in 0.01f64..2.0) {
        let corpus = random_corpus(seed);
        let lm = NGramLm::train(&corpus, NGramConfig { order, k, unk: true }).unwrap();
        for t in random_corpus(seed + 1) {
            let s = TermSequence::new(t).unwrap();
            let lp = log_prob(&lm, &s);
            prop_assert!(lp <= 0.0);
            let ppl = perplexity(&lm, &s);
            prop_assert!(ppl >= 1.0 - 1e-12);
            prop_assert!((ppl - (-lp / s.predicted_len() as f64).exp()).abs() < 1e-9 * ppl);
        }
    }

    #[test]
    fn appending_never_raises_log_prob(seed in 0u64..300, extra in 0usize..6) {
        let lm = NGramLm::train(&random_corpus(seed), NGramConfig::default()).unwrap();
        let t = &random_corpus(seed + 7)[0];
        let longer: Vec<String> = t.iter().cloned().chain(std::iter::once(format!("w{extra}"))).collect();
        prop_assert!(lm.sequence_log_prob(&longer) <= lm.sequence_log_prob(t));
    }
}
