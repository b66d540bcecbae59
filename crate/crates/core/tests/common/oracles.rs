//! Independent re-implementations used as test oracles. Each `check_*`
//! returns a short summary on success and a description of the first
//! disagreement otherwise.

use std::collections::BTreeSet;
use std::sync::Arc;

use kgstory::enrich::{build_candidates, select_best, EnrichConfig, TermPath};
use kgstory::fixtures::graduation;
use kgstory::kg::{Bridge, KgSource, RelationIndex};
use kgstory::lm::{perplexity, LanguageModel, NGramConfig, NGramLm, RecurrentLm, RecurrentLmConfig, TermSequence};
use kgstory::metrics::bleu_n;
use kgstory::neural::AdamConfig;
use kgstory::vocab::{BOS, EOS, SEP};
use rand::seq::SliceRandom;
use rand::Rng;

use super::rng;

pub type Check = Result<String, String>;

/// `(head, relation, tail, two_hop)` rows as loaded.
pub type Rows = Vec<(String, String, String, bool)>;

/// A random graph over `nodes` terms with at most `max_tuples` tuples from
/// two sources, one of which is excluded from two-hop joins.
pub fn random_graph(seed: u64, nodes: usize, max_tuples: usize) -> (RelationIndex, Rows) {
    let mut r = rng(seed);
    let open = Arc::new(KgSource::new("open", false));
    let scene = Arc::new(KgSource::new("scene", true));
    let n = r.gen_range(1..=max_tuples);
    let mut idx = RelationIndex::new();
    let mut rows = Vec::new();
    for _ in 0..n {
        let h = format!("t{}", r.gen_range(0..nodes));
        let t = format!("t{}", r.gen_range(0..nodes));
        let rel = format!("r{}", r.gen_range(0..6));
        let two_hop = r.gen_bool(0.7);
        let src = if two_hop { &scene } else { &open };
        idx.insert(&h, &rel, &t, src).unwrap();
        rows.push((h, rel, t, two_hop));
    }
    (idx, rows)
}

pub fn scan_one_hop(rows: &Rows, a: &str, b: &str) -> Vec<String> {
    let set: BTreeSet<String> = rows
        .iter()
        .filter(|(h, _, t, _)| h == a && t == b)
        .map(|(_, r, _, _)| r.clone())
        .collect();
    set.into_iter().collect()
}

pub fn join_two_hop(rows: &Rows, a: &str, c: &str) -> Vec<(String, String, String)> {
    let mut out = BTreeSet::new();
    for (h1, r1, m, x1) in rows {
        for (h2, r2, t2, x2) in rows {
            if *x1 && *x2 && h1 == a && h2 == m && t2 == c && m != a && m != c {
                out.insert((r1.clone(), m.clone(), r2.clone()));
            }
        }
    }
    out.into_iter().collect()
}

pub fn brute_bridges(rows: &Rows, terms_a: &[String], terms_b: &[String], two_hop: bool) -> Vec<Bridge> {
    let mut out = BTreeSet::new();
    for a in terms_a {
        for b in terms_b {
            for r in scan_one_hop(rows, a, b) {
                out.insert(Bridge::one_hop(a, &r, b));
            }
            if two_hop {
                for (r1, m, r2) in join_two_hop(rows, a, b) {
                    out.insert(Bridge::two_hop(a, &r1, &m, &r2, b));
                }
            }
        }
    }
    out.into_iter().collect()
}

/// Index queries against scans and joins on `graphs` random graphs, all
/// node pairs, plus random 10x10 bridge queries.
pub fn check_kg_oracles(graphs: u64) -> Check {
    let nodes = 14;
    let mut queries = 0usize;
    for g in 0..graphs {
        let (idx, rows) = random_graph(1000 + g, nodes, 500);
        let names: Vec<String> = (0..nodes).map(|i| format!("t{i}")).collect();
        for a in &names {
            for b in &names {
                let got = idx.one_hop(a, b);
                let want = scan_one_hop(&rows, a, b);
                if got != want {
                    return Err(format!("graph {g}: one_hop({a},{b}) = {got:?}, scan gives {want:?}"));
                }
                let got = idx.two_hop(a, b);
                let want = join_two_hop(&rows, a, b);
                if got != want {
                    return Err(format!("graph {g}: two_hop({a},{b}) = {got:?}, join gives {want:?}"));
                }
                queries += 2;
            }
        }
        let mut r = rng(g);
        let mut pool = names.clone();
        pool.push("absent".into());
        for two_hop in [false, true] {
            pool.shuffle(&mut r);
            let ta = pool[..10].to_vec();
            pool.shuffle(&mut r);
            let tb = pool[..10].to_vec();
            let got = idx.enumerate_bridges(&ta, &tb, two_hop);
            let want = brute_bridges(&rows, &ta, &tb, two_hop);
            if got != want {
                return Err(format!(
                    "graph {g}: enumerate_bridges(two_hop={two_hop}) has {} bridges, oracle {}",
                    got.len(),
                    want.len()
                ));
            }
            queries += 1;
        }
    }
    Ok(format!("{graphs} graphs, {queries} queries agree"))
}

/// Two-hop paths never start or end their middle at an endpoint.
pub fn check_chain_exclusion() -> Check {
    let src = Arc::new(KgSource::new("chain", true));
    let mut idx = RelationIndex::new();
    for (h, r, t) in [("a", "r_ab", "b"), ("b", "r_bc", "c")] {
        idx.insert(h, r, t, &src).unwrap();
    }
    let want = vec![("r_ab".to_string(), "b".to_string(), "r_bc".to_string())];
    if idx.two_hop("a", "c") != want {
        return Err(format!("chain a-b-c: two_hop(a,c) = {:?}", idx.two_hop("a", "c")));
    }
    if !idx.two_hop("a", "a").is_empty() {
        return Err("chain a-b-c: two_hop(a,a) is not empty".into());
    }
    // a loop through an endpoint: a->a->c and a->c->c must not count
    let mut looped = RelationIndex::new();
    for (h, r, t) in [("a", "self", "a"), ("a", "r1", "c"), ("c", "self", "c")] {
        looped.insert(h, r, t, &src).unwrap();
    }
    if !looped.two_hop("a", "c").is_empty() {
        return Err(format!("endpoint middles kept: {:?}", looped.two_hop("a", "c")));
    }
    // a one-hop-only source never joins
    let open = Arc::new(KgSource::new("open", false));
    let mut mixed = RelationIndex::new();
    mixed.insert("a", "r_ab", "b", &open).unwrap();
    mixed.insert("b", "r_bc", "c", &src).unwrap();
    if !mixed.two_hop("a", "c").is_empty() {
        return Err("one-hop-only source took part in a join".into());
    }
    Ok("chain, self-loop and one-hop-only cases hold".into())
}

/// Perplexity recomputed from the n-gram model's raw probabilities over a
/// hand-built linearization.
pub fn rescore(lm: &NGramLm, path: &TermPath) -> f64 {
    let mut toks = vec![BOS.to_string()];
    for (i, g) in path.groups.iter().enumerate() {
        if i > 0 {
            toks.push(SEP.to_string());
        }
        toks.extend(g.iter().cloned());
    }
    toks.push(EOS.to_string());
    let mut lp = 0.0;
    for i in 1..toks.len() {
        lp += lm.prob(&toks[..i], &toks[i]).ln();
    }
    (-lp / (toks.len() - 1) as f64).exp()
}

/// A random five-group path, a random graph over the same terms and an
/// n-gram model trained on random term paths.
pub fn random_enrich_fixture(seed: u64) -> (TermPath, RelationIndex, Rows, NGramLm) {
    let mut r = rng(seed);
    let nodes = 10;
    let term = |r: &mut rand_chacha::ChaCha8Rng| format!("t{}", r.gen_range(0..nodes));
    let groups: Vec<Vec<String>> = (0..5)
        .map(|_| {
            let mut g: Vec<String> = (0..r.gen_range(1..=3)).map(|_| term(&mut r)).collect();
            g.dedup();
            g
        })
        .collect();
    let base = TermPath::from_groups(format!("fx{seed}"), groups);
    let (idx, rows) = random_graph(seed ^ 0xabc, nodes, 60);
    let corpus: Vec<Vec<String>> = (0..30)
        .map(|_| {
            let groups: Vec<Vec<String>> = (0..r.gen_range(2..7))
                .map(|_| {
                    (0..r.gen_range(1..4))
                        .map(|_| {
                            if r.gen_bool(0.3) {
                                format!("r{}", r.gen_range(0..6))
                            } else {
                                term(&mut r)
                            }
                        })
                        .collect()
                })
                .collect();
            TermSequence::from_groups(groups).tokens().to_vec()
        })
        .collect();
    let lm = NGramLm::train(&corpus, NGramConfig::default()).unwrap();
    (base, idx, rows, lm)
}

/// Candidate sets and selections against brute-force enumeration and
/// independent rescoring.
pub fn check_enrich_selection(fixtures: u64) -> Check {
    let mut bridged = 0;
    for seed in 0..fixtures {
        let (base, idx, rows, lm) = random_enrich_fixture(seed);
        let cfg = EnrichConfig {
            cap: usize::MAX,
            allow_two_hop: true,
        };
        let candidates = build_candidates(&base, &idx, &cfg).map_err(|e| e.to_string())?;
        let expected = 1
            + (0..4)
                .map(|k| brute_bridges(&rows, &base.groups[k], &base.groups[k + 1], true).len())
                .sum::<usize>();
        if candidates.len() != expected {
            return Err(format!(
                "fixture {seed}: {} candidates, oracle {expected}",
                candidates.len()
            ));
        }
        let scores: Vec<f64> = candidates.iter().map(|c| rescore(&lm, c)).collect();
        let mut best = 0;
        for (i, s) in scores.iter().enumerate() {
            if *s < scores[best] {
                best = i;
            }
        }
        let chosen = select_best(&candidates, &lm).map_err(|e| e.to_string())?;
        if chosen.path != candidates[best] {
            return Err(format!("fixture {seed}: selected a path other than candidate {best}"));
        }
        if (chosen.perplexity - scores[best]).abs() > 1e-9 * scores[best] {
            return Err(format!(
                "fixture {seed}: perplexity {} vs rescored {}",
                chosen.perplexity, scores[best]
            ));
        }
        if chosen.path.without_bridge() != base {
            return Err(format!(
                "fixture {seed}: removing the bridge does not give the base path"
            ));
        }
        if chosen.path.is_enriched() {
            bridged += 1;
        }
    }
    Ok(format!(
        "{fixtures} fixtures agree, {bridged} selections carry a bridge"
    ))
}

/// An empty graph leaves only the base path, which is then selected.
pub fn check_empty_graph_keeps_base() -> Check {
    let (base, _, _, lm) = random_enrich_fixture(3);
    let candidates =
        build_candidates(&base, &RelationIndex::new(), &EnrichConfig::default()).map_err(|e| e.to_string())?;
    let chosen = select_best(&candidates, &lm).map_err(|e| e.to_string())?;
    if candidates.len() != 1 || chosen.path != base {
        return Err(format!("{} candidates from an empty graph", candidates.len()));
    }
    Ok("base path survives".into())
}

/// The graduates/diplomas fixture: the Arriving_Frame bridge is inserted
/// between the two images.
pub fn check_graduation() -> Check {
    let fx = graduation();
    let mut idx = RelationIndex::new();
    idx.load_str(&fx.kg_tsv, "graduation", &Arc::new(KgSource::new("scene", true)))
        .map_err(|e| e.to_string())?;
    let tokens: Vec<Vec<String>> = fx.lm_corpus.iter().map(|s| s.tokens().to_vec()).collect();
    let lm = NGramLm::train(&tokens, NGramConfig::default()).map_err(|e| e.to_string())?;
    let candidates = build_candidates(&fx.base, &idx, &EnrichConfig::default()).map_err(|e| e.to_string())?;
    let chosen = select_best(&candidates, &lm).map_err(|e| e.to_string())?;
    let Some(b) = &chosen.path.bridge else {
        return Err(format!("no bridge chosen among {} candidates", candidates.len()));
    };
    let inserted = &chosen.path.groups[b.after_slot + 1];
    if *inserted != fx.expected_group || b.after_slot != 1 {
        return Err(format!("inserted {inserted:?} after slot {}", b.after_slot));
    }
    Ok(format!("inserted {} after slot 1", inserted.join(" ")))
}

fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

/// Add-1 bigram over "a b a b" with vocabulary {a, b}.
pub fn check_add_one_bigram() -> Check {
    let lm = NGramLm::train(
        &[toks("a b a b")],
        NGramConfig {
            order: 2,
            k: 1.0,
            unk: false,
        },
    )
    .map_err(|e| e.to_string())?;
    let p = lm.prob(&toks("a"), "b");
    // (c(a b) + 1) / (c(a) + |V|) = 3 / 4
    if p != 0.75 {
        return Err(format!("P(b|a) = {p}"));
    }
    Ok("P(b|a) = 0.75".into())
}

pub fn memorized_sequence() -> TermSequence {
    TermSequence::from_groups([
        vec!["Dog_Noun", "Motion_Frame"],
        vec!["Dog_Noun", "Performers_and_roles_Frame", "Ground_Noun"],
        vec!["Ball_Noun"],
    ])
}

pub fn overfit_config() -> RecurrentLmConfig {
    RecurrentLmConfig {
        embed: 16,
        hidden: 32,
        epochs: 150,
        seed: 3,
        adam: AdamConfig {
            base_lr: 1e-2,
            ..AdamConfig::default()
        },
        holdout_every: 0,
    }
}

/// Recurrent LM overfit on one sequence reaches perplexity <= 1.05 on it.
pub fn check_recurrent_overfit() -> Check {
    let seq = memorized_sequence();
    let (lm, reports) = RecurrentLm::train(std::slice::from_ref(&seq), overfit_config()).map_err(|e| e.to_string())?;
    let ppl = perplexity(&lm, &seq);
    if ppl > 1.05 {
        return Err(format!("perplexity {ppl:.4} after {} epochs", reports.len()));
    }
    Ok(format!("perplexity {ppl:.4}"))
}

/// Maximum deviation from 1 of the summed next-token distribution over a
/// set of contexts.
pub fn normalization_error<M: LanguageModel>(lm: &M, contexts: &[Vec<String>]) -> f64 {
    let vocab = lm.prediction_vocab();
    contexts
        .iter()
        .map(|ctx| {
            let total: f64 = vocab.iter().map(|w| lm.conditional_log_prob(ctx, w).exp()).sum();
            (total - 1.0).abs()
        })
        .fold(0.0, f64::max)
}

pub fn check_normalization() -> Check {
    let corpus = [
        toks("<bos> a b <sep> c <eos>"),
        toks("<bos> c a <sep> b b <eos>"),
        toks("<bos> <eos>"),
    ];
    let contexts = vec![
        toks("<bos>"),
        toks("<bos> a"),
        toks("<bos> a b <sep>"),
        toks("<bos> zebra"),
        toks("q r s"),
    ];
    let mut worst: f64 = 0.0;
    for (order, k) in [(1, 0.0), (2, 1.0), (3, 0.1), (3, 0.0)] {
        let lm = NGramLm::train(&corpus, NGramConfig { order, k, unk: true }).map_err(|e| e.to_string())?;
        worst = worst.max(normalization_error(&lm, &contexts));
    }
    let seqs: Vec<TermSequence> = corpus.iter().map(|t| TermSequence::new(t.clone()).unwrap()).collect();
    let mut cfg = overfit_config();
    cfg.epochs = 3;
    let (lm, _) = RecurrentLm::train(&seqs, cfg).map_err(|e| e.to_string())?;
    worst = worst.max(normalization_error(&lm, &contexts));
    if worst > 1e-9 {
        return Err(format!("distribution sums off by {worst:e}"));
    }
    Ok(format!("max deviation {worst:.1e}"))
}

/// The toy corpus: three candidate sentences, one reference each.
pub fn toy_corpus() -> (Vec<Vec<String>>, Vec<Vec<Vec<String>>>) {
    let cands = vec![toks("the cat sat on the mat"), toks("a dog ran home"), toks("it rains")];
    let refs = vec![
        vec![toks("the cat sat on a red mat")],
        vec![toks("a dog ran home fast")],
        vec![toks("it rains")],
    ];
    (cands, refs)
}

/// BLEU-1..4 of [`toy_corpus`], worked by hand.
///
/// Candidate length 12, reference length 14, so BP = exp(1 - 14/12).
/// Clipped matches over candidate n-grams, pooled:
///   p1: 5/6 + 4/4 + 2/2   = 11/12 (the second "the" is clipped)
///   p2: 3/5 + 3/3 + 1/1   = 7/9
///   p3: 2/4 + 2/2 + 0/0   = 4/6
///   p4: 1/3 + 1/1         = 2/4
pub fn toy_bleu_by_hand() -> [f64; 4] {
    let bp = (1.0f64 - 14.0 / 12.0).exp();
    let p = [11.0 / 12.0, 7.0 / 9.0, 4.0 / 6.0, 2.0 / 4.0];
    let mut out = [0.0; 4];
    for n in 1..=4 {
        let mean_log = p[..n].iter().map(|x: &f64| x.ln()).sum::<f64>() / n as f64;
        out[n - 1] = bp * mean_log.exp();
    }
    out
}

pub fn check_toy_bleu() -> Check {
    let (c, r) = toy_corpus();
    let want = toy_bleu_by_hand();
    for n in 1..=4 {
        let got = bleu_n(&c, &r, n).map_err(|e| e.to_string())?;
        if (got - want[n - 1]).abs() > 1e-9 {
            return Err(format!("BLEU-{n} = {got}, by hand {}", want[n - 1]));
        }
    }
    let same: Vec<Vec<Vec<String>>> = c.iter().map(|s| vec![s.clone()]).collect();
    for n in 1..=4 {
        let b = bleu_n(&c, &same, n).map_err(|e| e.to_string())?;
        if b != 1.0 {
            return Err(format!("identical corpus BLEU-{n} = {b}"));
        }
    }
    Ok(format!(
        "BLEU-1..4 = {:.4} {:.4} {:.4} {:.4}; identical corpus 1.0",
        want[0], want[1], want[2], want[3]
    ))
}

/// Writes the synthetic suite (20 five-image stories) into `dir`, runs the
/// full pipeline, checks for a six-sentence story with bridge provenance,
/// then reruns from the manifest and compares every output byte for byte.
pub fn check_fixture_pipeline(dir: &std::path::Path, limit: std::time::Duration) -> Check {
    use kgstory::generator::Story;
    use kgstory::pipeline::{read_jsonl, rerun, run_pipeline, MANIFEST, STORIES};

    let suite = kgstory::fixtures::SyntheticSuite::generate(7, 20);
    let cfg = suite.write(dir).map_err(|e| e.to_string())?;
    let started = std::time::Instant::now();
    let manifest = run_pipeline(&cfg).map_err(|e| e.to_string())?;
    let took = started.elapsed();
    if took > limit {
        return Err(format!("pipeline took {took:?}"));
    }
    let out = &cfg.paths.output_dir;
    let stories: Vec<Story> = read_jsonl(&out.join(STORIES)).map_err(|e| e.to_string())?;
    let bridged: Vec<&Story> = stories
        .iter()
        .filter(|s| s.sentences.len() == 6 && s.bridge.is_some())
        .collect();
    if bridged.is_empty() {
        return Err(format!("no six-sentence bridged story among {}", stories.len()));
    }
    let again = dir.join("rerun");
    let second = rerun(&out.join(MANIFEST), Some(&again)).map_err(|e| e.to_string())?;
    let diffs = manifest.output_differences(&second);
    if !diffs.is_empty() {
        return Err(format!("rerun differs: {diffs:?}"));
    }
    for d in &manifest.outputs {
        let a = std::fs::read(out.join(&d.path)).map_err(|e| e.to_string())?;
        let b = std::fs::read(again.join(&d.path)).map_err(|e| e.to_string())?;
        if a != b {
            return Err(format!("{} is not byte-identical on rerun", d.path.display()));
        }
    }
    let b = bridged[0].bridge.as_ref().unwrap();
    Ok(format!(
        "{:.1}s, {} of {} stories bridged (e.g. {} {} {}), {} outputs identical on rerun",
        took.as_secs_f64(),
        bridged.len(),
        stories.len(),
        b.bridge.head,
        b.bridge.relation,
        b.bridge.tail,
        manifest.outputs.len()
    ))
}
