//! Synthetic corpora, object features and knowledge graphs for tests, demos
//! and the end-to-end pipeline run. Annotations come from a small lexicon
//! tagger rather than real parsers.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{KgInput, LmKind, RunConfig};
use crate::corpus::{AnnotatedSentence, CorefLink, FrameSpan, StoryRecord};
use crate::enrich::TermPath;
use crate::features::{DetectedObject, FeatureRecord, FEATURE_DIM};
use crate::lm::TermSequence;
use crate::neural::AdamConfig;

/// Word lists for the fixture tagger.
#[derive(Clone, Debug, Default)]
pub struct Lexicon {
    nouns: Vec<String>,
    /// Verb surface form to frame label.
    verbs: BTreeMap<String, String>,
    pronouns: Vec<String>,
}

const DETERMINERS: &[&str] = &["the", "a", "an"];
const ADPOSITIONS: &[&str] = &["on", "in", "to", "at", "with"];
const AUXILIARIES: &[&str] = &["is", "are", "was", "were"];
const PUNCT: &[&str] = &[".", ",", "!", "?"];

impl Lexicon {
    pub fn new<'a>(
        nouns: impl IntoIterator<Item = &'a str>,
        verbs: impl IntoIterator<Item = (&'a str, &'a str)>,
    ) -> Self {
        Self {
            nouns: nouns.into_iter().map(String::from).collect(),
            verbs: verbs.into_iter().map(|(v, f)| (v.to_string(), f.to_string())).collect(),
            pronouns: [
                "he", "she", "it", "they", "him", "them", "his", "her", "its", "their", "we",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        }
    }

    /// Covers the dog example and the synthetic suite.
    pub fn fixture() -> Self {
        let mut nouns: Vec<&str> = vec!["dog", "ground"];
        nouns.extend(PAIRS.iter().flat_map(|p| [p.head, p.tail]));
        nouns.extend(FILLERS.iter().map(|f| f.0));
        let mut verbs: Vec<(&str, &str)> = vec![("go", "Motion"), ("playing", "Performers_and_roles")];
        verbs.extend(PAIRS.iter().map(|p| (p.verb, p.frame)));
        verbs.extend(SOLO_VERBS.iter().copied());
        Self::new(nouns, verbs)
    }

    /// Tags a whitespace-tokenized sentence. Unknown words get `X`.
    pub fn tag(&self, text: &str) -> AnnotatedSentence {
        let tokens: Vec<String> = text.split_whitespace().map(String::from).collect();
        let mut pos = Vec::with_capacity(tokens.len());
        let mut frames = Vec::new();
        for (i, t) in tokens.iter().enumerate() {
            let lower = t.to_lowercase();
            let l = lower.as_str();
            let tag = if self.nouns.iter().any(|n| n == l) {
                "NOUN"
            } else if let Some(frame) = self.verbs.get(l) {
                frames.push(FrameSpan {
                    start: i,
                    end: i + 1,
                    label: frame.clone(),
                });
                "VERB"
            } else if self.pronouns.iter().any(|p| p == l) {
                "PRON"
            } else if DETERMINERS.contains(&l) {
                "DET"
            } else if ADPOSITIONS.contains(&l) {
                "ADP"
            } else if AUXILIARIES.contains(&l) {
                "AUX"
            } else if PUNCT.contains(&l) {
                "PUNCT"
            } else if l == "ready" {
                "ADJ"
            } else {
                "X"
            };
            pos.push(tag.to_string());
        }
        AnnotatedSentence {
            tokens,
            pos,
            frames,
            coref: Vec::new(),
        }
    }
}

/// "The dog is ready to go. He is playing on the ground." with `He` linked
/// to `The dog`.
pub fn dog_story() -> StoryRecord {
    let lex = Lexicon::fixture();
    let first = lex.tag("The dog is ready to go .");
    let mut second = lex.tag("He is playing on the ground .");
    second.coref.push(CorefLink {
        mention: [0, 1],
        root: [0, 0, 2],
        entity_type: "ANIMAL".into(),
    });
    StoryRecord::new("dog", vec![first, second])
}

/// Two adjacent images, one showing graduates and the next diplomas, with a
/// graph edge `Graduate_Noun -Arriving_Frame-> Diploma_Noun` and a term-LM
/// corpus in which that bridge is common.
pub struct Graduation {
    pub base: TermPath,
    pub kg_tsv: String,
    pub lm_corpus: Vec<TermSequence>,
    pub expected_group: Vec<String>,
}

pub fn graduation() -> Graduation {
    let g = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    let base = TermPath::from_groups(
        "graduation",
        vec![
            g(&["Graduate_Noun", "Ceremony_Noun"]),
            g(&["Graduate_Noun"]),
            g(&["Diploma_Noun"]),
            g(&["Family_Noun", "Photo_Noun"]),
        ],
    );
    let kg_tsv = [
        "Graduate_Noun\tArriving_Frame\tDiploma_Noun",
        "Graduate_Noun\tAtLocation\tCeremony_Noun",
        "Family_Noun\tHasA\tPhoto_Noun",
        "Diploma_Noun\tRelatedTo\tPhoto_Noun",
    ]
    .join("\n");
    let lm_corpus = [
        vec![
            g(&["Graduate_Noun"]),
            g(&["Graduate_Noun", "Arriving_Frame", "Diploma_Noun"]),
            g(&["Diploma_Noun"]),
        ],
        vec![
            g(&["Ceremony_Noun"]),
            g(&["Graduate_Noun", "Arriving_Frame", "Diploma_Noun"]),
            g(&["Family_Noun", "Photo_Noun"]),
        ],
        vec![
            g(&["Graduate_Noun", "Ceremony_Noun"]),
            g(&["Graduate_Noun"]),
            g(&["Graduate_Noun", "Arriving_Frame", "Diploma_Noun"]),
            g(&["Diploma_Noun"]),
        ],
        vec![g(&["Diploma_Noun"]), g(&["Family_Noun", "Photo_Noun"])],
    ]
    .iter()
    .map(TermSequence::from_groups)
    .collect();
    Graduation {
        base,
        kg_tsv,
        lm_corpus,
        expected_group: g(&["Graduate_Noun", "Arriving_Frame", "Diploma_Noun"]),
    }
}

/// An action linking two nouns; it becomes both a story sentence and a
/// graph edge.
struct Pair {
    head: &'static str,
    verb: &'static str,
    frame: &'static str,
    tail: &'static str,
}

const PAIRS: &[Pair] = &[
    Pair {
        head: "graduate",
        verb: "reaches",
        frame: "Arriving",
        tail: "diploma",
    },
    Pair {
        head: "dog",
        verb: "chases",
        frame: "Cotheme",
        tail: "ball",
    },
    Pair {
        head: "family",
        verb: "eats",
        frame: "Ingestion",
        tail: "cake",
    },
    Pair {
        head: "child",
        verb: "builds",
        frame: "Building",
        tail: "castle",
    },
    Pair {
        head: "friend",
        verb: "drives",
        frame: "Operate_vehicle",
        tail: "car",
    },
    Pair {
        head: "bird",
        verb: "lands",
        frame: "Arriving",
        tail: "tree",
    },
];

/// Held-out reference stories written by [`SyntheticSuite::write`].
pub const REFERENCES_FILE: &str = "heldout_references.jsonl";
/// Held-out gap paths written by [`SyntheticSuite::write`].
pub const GAP_PATHS_FILE: &str = "heldout_paths.jsonl";

/// Object label of an uninformative image; never a story word.
const BLUR: &str = "blur";

/// Scene nouns with the verb each one takes alone.
const FILLERS: &[(&str, &str)] = &[
    ("park", "waits"),
    ("sun", "shines"),
    ("beach", "waits"),
    ("crowd", "cheers"),
    ("road", "turns"),
    ("house", "stands"),
];

const SOLO_VERBS: &[(&str, &str)] = &[
    ("waits", "Waiting"),
    ("shines", "Light_movement"),
    ("cheers", "Cheering"),
    ("turns", "Change_direction"),
    ("stands", "Posture"),
    ("runs", "Self_motion"),
    ("smiles", "Making_faces"),
];

/// The verb a pair noun takes on its own.
fn solo_verb(noun: &str) -> &'static str {
    const CYCLE: &[&str] = &["runs", "smiles", "waits", "stands"];
    let i = PAIRS
        .iter()
        .flat_map(|p| [p.head, p.tail])
        .position(|n| n == noun)
        .unwrap_or(0);
    CYCLE[i % CYCLE.len()]
}

/// Training stories, their image features, held-out image sequences and a
/// graph whose edges can bridge the held-out images.
///
/// Even training stories tell a linking action in three sentences: the head
/// alone, the head acting on the tail, then "It ..." about the tail. The
/// linking sentence's image is blurred. Odd stories are five unrelated
/// sentences about whatever each image shows. The held-out sequences show the head
/// and tail in adjacent images with no linking image, which is the gap a
/// bridge fills.
#[derive(Clone, Debug)]
pub struct SyntheticSuite {
    pub stories: Vec<StoryRecord>,
    pub features: Vec<FeatureRecord>,
    pub inference_features: Vec<FeatureRecord>,
    /// Hand-written stories for the held-out sequences, with the linking
    /// sentence the images leave out.
    pub references: Vec<StoryRecord>,
    /// The term paths a perfect distiller would read off the held-out
    /// images: one group per image and no linking group.
    pub gap_paths: Vec<TermPath>,
    /// `(source id, two-hop allowed, tuple TSV)`.
    pub graphs: Vec<(String, bool, String)>,
}

struct FeatureMaker {
    prototypes: BTreeMap<String, Vec<f64>>,
    rng: ChaCha8Rng,
    dim: usize,
}

impl FeatureMaker {
    fn new(seed: u64, dim: usize) -> Self {
        Self {
            prototypes: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            dim,
        }
    }

    fn prototype(&mut self, noun: &str) -> Vec<f64> {
        if let Some(p) = self.prototypes.get(noun) {
            return p.clone();
        }
        // one stream per noun, independent of first-use order
        let mut r = ChaCha8Rng::seed_from_u64(
            noun.bytes()
                .fold(0xcbf29ce484222325, |h, b| (h ^ b as u64).wrapping_mul(0x100000001b3)),
        );
        let p: Vec<f64> = (0..self.dim).map(|_| r.gen_range(-1.0..1.0)).collect();
        self.prototypes.insert(noun.to_string(), p.clone());
        p
    }

    /// Objects for the nouns shown in one image plus a low-confidence
    /// background object.
    fn image(&mut self, story_id: &str, index: usize, nouns: &[&str]) -> FeatureRecord {
        let mut objects = Vec::new();
        for n in nouns {
            let proto = self.prototype(n);
            let feature = proto.iter().map(|v| v + self.rng.gen_range(-0.05..0.05)).collect();
            objects.push(DetectedObject {
                confidence: self.rng.gen_range(0.8..0.99),
                feature,
            });
        }
        objects.push(DetectedObject {
            confidence: self.rng.gen_range(0.1..0.3),
            feature: (0..self.dim).map(|_| self.rng.gen_range(-0.3..0.3)).collect(),
        });
        FeatureRecord {
            story_id: story_id.to_string(),
            image_index: index,
            objects,
        }
    }
}

fn noun_term(n: &str) -> String {
    crate::corpus::noun_term(n)
}

impl SyntheticSuite {
    /// `stories` five-sentence training stories and one held-out sequence
    /// per linking action.
    pub fn generate(seed: u64, stories: usize) -> Self {
        let lex = Lexicon::fixture();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut feats = FeatureMaker::new(seed ^ 0x5eed, FEATURE_DIM);
        let mut records = Vec::new();
        let mut features = Vec::new();

        for k in 0..stories {
            let id = format!("story-{k:02}");
            let pair = &PAIRS[(k / 2) % PAIRS.len()];
            // odd stories have no linking action, so nouns are seen outside
            // their pair pattern
            let start = if k % 2 == 0 { (k / 2) % 3 } else { usize::MAX };
            let mut sentences = Vec::new();
            let mut shown: Vec<Vec<&str>> = Vec::new();
            let mut slot = 0;
            while slot < 5 {
                if slot == start {
                    sentences.push(lex.tag(&format!("The {} {} .", pair.head, solo_verb(pair.head))));
                    let bridge = lex.tag(&format!("The {} {} the {} .", pair.head, pair.verb, pair.tail));
                    let mut pronoun = lex.tag(&format!("It {} .", solo_verb(pair.tail)));
                    pronoun.coref.push(CorefLink {
                        mention: [0, 1],
                        root: [slot + 1, 3, 5],
                        entity_type: "OBJECT".into(),
                    });
                    sentences.extend([bridge, pronoun]);
                    // the linking moment itself is a blurred shot with no detectable object
                    shown.extend([vec![pair.head], vec![BLUR], vec![pair.tail]]);
                    slot += 3;
                } else if start == usize::MAX {
                    let nouns: Vec<&str> = PAIRS
                        .iter()
                        .flat_map(|p| [p.head, p.tail])
                        .chain(FILLERS.iter().map(|f| f.0))
                        .collect();
                    let noun = nouns[rng.gen_range(0..nouns.len())];
                    let verb = FILLERS
                        .iter()
                        .find(|f| f.0 == noun)
                        .map_or_else(|| solo_verb(noun), |f| f.1);
                    sentences.push(lex.tag(&format!("The {noun} {verb} .")));
                    shown.push(vec![noun]);
                    slot += 1;
                } else {
                    let (noun, verb) = FILLERS[rng.gen_range(0..FILLERS.len())];
                    sentences.push(lex.tag(&format!("The {noun} {verb} .")));
                    shown.push(vec![noun]);
                    slot += 1;
                }
            }
            for (i, nouns) in shown.iter().enumerate() {
                features.push(feats.image(&id, i, nouns));
            }
            records.push(StoryRecord::new(id, sentences));
        }

        let mut inference_features = Vec::new();
        let mut references = Vec::new();
        let mut gap_paths = Vec::new();
        for (j, pair) in PAIRS.iter().enumerate() {
            let id = format!("heldout-{j}");
            let scene: Vec<Vec<&str>> = vec![
                vec![FILLERS[j % FILLERS.len()].0],
                vec![pair.head],
                vec![pair.tail],
                vec![FILLERS[(j + 1) % FILLERS.len()].0],
                vec![FILLERS[(j + 2) % FILLERS.len()].0],
            ];
            for (i, nouns) in scene.iter().enumerate() {
                inference_features.push(feats.image(&id, i, nouns));
            }
            let filler = |noun: &str| {
                let verb = FILLERS.iter().find(|f| f.0 == noun).map(|f| f.1).unwrap_or("waits");
                lex.tag(&format!("The {noun} {verb} ."))
            };
            let told = vec![
                filler(scene[0][0]),
                lex.tag(&format!("The {} {} the {} .", pair.head, pair.verb, pair.tail)),
                lex.tag(&format!("The {} {} .", pair.tail, solo_verb(pair.tail))),
                filler(scene[3][0]),
                filler(scene[4][0]),
            ];
            references.push(StoryRecord::new(id.clone(), told));
            let groups = [scene[0][0], pair.head, pair.tail, scene[3][0], scene[4][0]]
                .iter()
                .enumerate()
                .map(|(i, n)| {
                    let sentence = match i {
                        1 | 2 => lex.tag(&format!("The {n} {} .", solo_verb(n))),
                        _ => filler(n),
                    };
                    crate::corpus::extract_terms(&sentence)
                })
                .collect();
            gap_paths.push(TermPath::from_groups(id, groups));
        }

        let mut commonsense: Vec<String> = PAIRS
            .iter()
            .map(|p| format!("{}\t{}_Frame\t{}", noun_term(p.head), p.frame, noun_term(p.tail)))
            .collect();
        commonsense.extend(
            PAIRS
                .iter()
                .map(|p| format!("{}\tRelatedTo\t{}", noun_term(p.head), noun_term(p.tail))),
        );
        let scene: Vec<String> = FILLERS
            .iter()
            .zip(FILLERS.iter().cycle().skip(1))
            .map(|(a, b)| format!("{}\tNear\t{}", noun_term(a.0), noun_term(b.0)))
            .chain(
                PAIRS
                    .iter()
                    .map(|p| format!("{}\tAtLocation\t{}", noun_term(p.tail), noun_term("park"))),
            )
            .collect();

        Self {
            stories: records,
            features,
            inference_features,
            references,
            gap_paths,
            graphs: vec![
                ("commonsense".into(), true, commonsense.join("\n") + "\n"),
                ("scene".into(), false, scene.join("\n") + "\n"),
            ],
        }
    }

    /// Writes the suite into `dir` and returns a run config over it with
    /// model sizes small enough for a laptop.
    pub fn write(&self, dir: &Path) -> std::io::Result<RunConfig> {
        fs::create_dir_all(dir)?;
        let jsonl = |name: &str, lines: Vec<String>| -> std::io::Result<PathBuf> {
            let path = dir.join(name);
            let mut f = std::io::BufWriter::new(fs::File::create(&path)?);
            for l in lines {
                writeln!(f, "{l}")?;
            }
            f.flush()?;
            Ok(path)
        };
        let corpus = jsonl("corpus.jsonl", json_lines(&self.stories))?;
        let features = jsonl("features.jsonl", json_lines(&self.features))?;
        let inference = jsonl("heldout_features.jsonl", json_lines(&self.inference_features))?;
        jsonl(REFERENCES_FILE, json_lines(&self.references))?;
        let gaps = jsonl(GAP_PATHS_FILE, json_lines(&self.gap_paths))?;
        let mut kg = Vec::new();
        for (source, two_hop, text) in &self.graphs {
            let path = dir.join(format!("kg_{source}.tsv"));
            fs::write(&path, text)?;
            kg.push(KgInput {
                path,
                source: source.clone(),
                two_hop: *two_hop,
            });
        }

        let mut cfg = desk_config();
        cfg.paths.corpus = Some(corpus);
        cfg.paths.features = Some(features);
        cfg.paths.inference_features = Some(inference);
        cfg.paths.kg = kg;
        // read only when the distill stage is off
        cfg.paths.term_paths = Some(gaps);
        cfg.paths.output_dir = dir.join("out");
        Ok(cfg)
    }
}

/// Laptop-scale model sizes; everything else keeps its default.
pub fn desk_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.distiller.dim = 32;
    cfg.distiller.layers = 2;
    cfg.distiller.epochs = 60;
    cfg.distiller.adam = AdamConfig {
        base_lr: 3e-3,
        ..AdamConfig::default()
    };
    cfg.generator.dim = 32;
    cfg.generator.encoder_layers = 2;
    cfg.generator.decoder_layers = 2;
    cfg.generator.epochs = 60;
    cfg.generator.adam = AdamConfig {
        base_lr: 3e-3,
        ..AdamConfig::default()
    };
    cfg.lm.kind = LmKind::Ngram;
    cfg
}

fn json_lines<T: Serialize>(items: &[T]) -> Vec<String> {
    items
        .iter()
        .map(|x| serde_json::to_string(x).expect("fixture records serialize"))
        .collect()
}
