//! Annotated story corpora: term extraction, coreference replacement and
//! training-record assembly.
//!
//! Spans are half-open token ranges `[start, end)`. A coreference link's
//! `root` is `[sentence_index, start, end)` and points at the chain's first
//! (non-pronominal) mention.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::enrich::TermPath;
use crate::features::ImageSequence;
use crate::lm::TermSequence;

pub const SCHEMA_VERSION: u32 = 1;

/// Pronouns replaced by their root mention.
pub const REPLACEABLE_PRONOUNS: &[&str] = &["he", "she", "it", "they", "him", "them"];
/// Possessive pronouns, left in place and reported.
pub const POSSESSIVE_PRONOUNS: &[&str] = &["his", "her", "hers", "its", "their", "theirs"];

const NOUN_TAGS: &[&str] = &["NOUN", "PROPN"];
const VERB_TAG: &str = "VERB";

/// Irregular plurals; everything else lemmatizes to its lowercase form.
const LEMMA_EXCEPTIONS: &[(&str, &str)] = &[
    ("children", "child"),
    ("people", "person"),
    ("men", "man"),
    ("women", "woman"),
    ("mice", "mouse"),
    ("feet", "foot"),
    ("teeth", "tooth"),
    ("geese", "goose"),
];

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("story {story_id} sentence {sentence}: {detail}")]
    Schema {
        story_id: String,
        sentence: usize,
        detail: String,
    },
    #[error("story {story_id}: coreference chain {chain} points outside the story ({detail})")]
    ChainOutsideStory {
        story_id: String,
        chain: String,
        detail: String,
    },
    #[error("no object features for stories: {0:?}")]
    MissingFeatures(Vec<String>),
    #[error("story {story_id}: {sentences} sentences but {images} images")]
    ImageCountMismatch {
        story_id: String,
        sentences: usize,
        images: usize,
    },
    #[error("unsupported corpus schema version {0}")]
    Version(u32),
    #[error("{0}: {1}")]
    Json(String, #[source] serde_json::Error),
    #[error("{0}: {1}")]
    Io(String, #[source] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameSpan {
    pub start: usize,
    pub end: usize,
    pub label: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorefLink {
    pub mention: [usize; 2],
    pub root: [usize; 3],
    #[serde(rename = "type")]
    pub entity_type: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotatedSentence {
    pub tokens: Vec<String>,
    pub pos: Vec<String>,
    #[serde(default)]
    pub frames: Vec<FrameSpan>,
    #[serde(default)]
    pub coref: Vec<CorefLink>,
}

impl AnnotatedSentence {
    /// Tokens joined with spaces, without a space before closing punctuation.
    pub fn text(&self) -> String {
        detokenize(&self.tokens)
    }
}

pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    for t in tokens {
        let t = t.as_ref();
        let attach = matches!(t, "." | "," | "!" | "?" | ";" | ":" | "'s" | "n't");
        if !out.is_empty() && !attach {
            out.push(' ');
        }
        out.push_str(t);
    }
    out
}

fn default_version() -> u32 {
    SCHEMA_VERSION
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoryRecord {
    #[serde(default = "default_version")]
    pub version: u32,
    pub story_id: String,
    pub sentences: Vec<AnnotatedSentence>,
}

impl StoryRecord {
    pub fn new(story_id: impl Into<String>, sentences: Vec<AnnotatedSentence>) -> Self {
        Self {
            version: SCHEMA_VERSION,
            story_id: story_id.into(),
            sentences,
        }
    }

    /// Checks tag/token alignment and span bounds.
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.version != SCHEMA_VERSION {
            return Err(CorpusError::Version(self.version));
        }
        let schema = |sentence: usize, detail: String| CorpusError::Schema {
            story_id: self.story_id.clone(),
            sentence,
            detail,
        };
        if self.sentences.is_empty() {
            return Err(schema(0, "story has no sentences".into()));
        }
        let mentions: HashSet<(usize, usize, usize)> = self
            .sentences
            .iter()
            .enumerate()
            .flat_map(|(i, s)| s.coref.iter().map(move |c| (i, c.mention[0], c.mention[1])))
            .collect();
        for (i, s) in self.sentences.iter().enumerate() {
            let n = s.tokens.len();
            if s.pos.len() != n {
                return Err(schema(i, format!("{} tokens but {} POS tags", n, s.pos.len())));
            }
            for f in &s.frames {
                if f.start >= f.end || f.end > n {
                    return Err(schema(
                        i,
                        format!("frame span {}..{} outside {n} tokens", f.start, f.end),
                    ));
                }
            }
            for c in &s.coref {
                let [ms, me] = c.mention;
                if ms >= me || me > n {
                    return Err(schema(i, format!("mention span {ms}..{me} outside {n} tokens")));
                }
                if mentions.contains(&(c.root[0], c.root[1], c.root[2])) {
                    return Err(schema(i, format!("root {:?} is itself a mention", c.root)));
                }
            }
        }
        Ok(())
    }

    pub fn texts(&self) -> Vec<String> {
        self.sentences.iter().map(AnnotatedSentence::text).collect()
    }
}

pub fn read_corpus(path: &Path) -> Result<Vec<StoryRecord>, CorpusError> {
    let text = fs::read_to_string(path).map_err(|e| CorpusError::Io(path.display().to_string(), e))?;
    parse_corpus(&text, &path.display().to_string())
}

pub fn parse_corpus(text: &str, origin: &str) -> Result<Vec<StoryRecord>, CorpusError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let story: StoryRecord =
            serde_json::from_str(line).map_err(|e| CorpusError::Json(format!("{origin}:{}", i + 1), e))?;
        story.validate()?;
        out.push(story);
    }
    Ok(out)
}

pub fn lemmatize(surface: &str) -> String {
    let lower = surface.to_lowercase();
    LEMMA_EXCEPTIONS
        .iter()
        .find(|(s, _)| *s == lower)
        .map_or(lower, |(_, l)| l.to_string())
}

fn capitalize(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

fn lowercase_first(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) => c.to_lowercase().chain(chars).collect(),
        None => String::new(),
    }
}

pub fn noun_term(surface: &str) -> String {
    format!("{}_Noun", capitalize(&lemmatize(surface)))
}

pub fn frame_term(label: &str) -> String {
    format!("{label}_Frame")
}

/// Nouns become `<Lemma>_Noun`; verbs inside a frame span become
/// `<Frame>_Frame` (once per span); other verbs are dropped. Terms follow
/// token order and each appears once.
pub fn extract_terms(sent: &AnnotatedSentence) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    let mut used_frames = BTreeSet::new();
    for (i, (tok, tag)) in sent.tokens.iter().zip(&sent.pos).enumerate() {
        let term = if NOUN_TAGS.contains(&tag.as_str()) {
            Some(noun_term(tok))
        } else if tag == VERB_TAG {
            sent.frames
                .iter()
                .enumerate()
                .find(|(_, f)| f.start <= i && i < f.end)
                .filter(|(fi, _)| used_frames.insert(*fi))
                .map(|(_, f)| frame_term(&f.label))
        } else {
            None
        };
        if let Some(t) = term {
            if !out.contains(&t) {
                out.push(t);
            }
        }
    }
    out
}

/// A mention left unreplaced because it is possessive.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnreplacedMention {
    pub sentence: usize,
    pub span: [usize; 2],
    pub surface: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorefOutcome {
    pub story: StoryRecord,
    pub replaced: usize,
    pub possessives: Vec<UnreplacedMention>,
}

struct Replacement {
    start: usize,
    end: usize,
    tokens: Vec<String>,
    pos: Vec<String>,
    frames: Vec<FrameSpan>,
}

/// Maps an original token offset to its offset after `reps` are applied.
fn shift(reps: &[Replacement], offset: usize) -> usize {
    let mut out = offset as isize;
    for r in reps {
        if r.end <= offset {
            out += r.tokens.len() as isize - (r.end - r.start) as isize;
        }
    }
    out as usize
}

/// Replaces each pronominal mention with its root entity's tokens, carrying
/// over the root's POS tags and frames. Applied links are dropped so the
/// operation is idempotent; non-pronoun links are kept with shifted offsets.
pub fn apply_coref_replacement(story: &StoryRecord) -> Result<CorefOutcome, CorpusError> {
    let n_sent = story.sentences.len();
    let mut reps: Vec<Vec<Replacement>> = (0..n_sent).map(|_| Vec::new()).collect();
    let mut applied: Vec<HashSet<usize>> = vec![HashSet::new(); n_sent];
    let mut possessives = Vec::new();

    for (si, sent) in story.sentences.iter().enumerate() {
        for (li, link) in sent.coref.iter().enumerate() {
            let chain = format!("s{si}.c{li}");
            let [rs_idx, rs, re] = link.root;
            let outside = |detail: String| CorpusError::ChainOutsideStory {
                story_id: story.story_id.clone(),
                chain: chain.clone(),
                detail,
            };
            let root_sent = story
                .sentences
                .get(rs_idx)
                .ok_or_else(|| outside(format!("root sentence {rs_idx} of {n_sent}")))?;
            if rs >= re || re > root_sent.tokens.len() {
                return Err(outside(format!(
                    "root span {rs}..{re} in a {}-token sentence",
                    root_sent.tokens.len()
                )));
            }
            let [ms, me] = link.mention;
            if me - ms != 1 {
                continue;
            }
            let surface = sent.tokens[ms].to_lowercase();
            if POSSESSIVE_PRONOUNS.contains(&surface.as_str()) {
                possessives.push(UnreplacedMention {
                    sentence: si,
                    span: link.mention,
                    surface: sent.tokens[ms].clone(),
                });
                continue;
            }
            if !REPLACEABLE_PRONOUNS.contains(&surface.as_str()) {
                continue;
            }
            let mut tokens = root_sent.tokens[rs..re].to_vec();
            let pos = root_sent.pos[rs..re].to_vec();
            if ms == 0 {
                tokens[0] = capitalize(&tokens[0]);
            } else if rs == 0 && pos[0] != "PROPN" {
                tokens[0] = lowercase_first(&tokens[0]);
            }
            let frames = root_sent
                .frames
                .iter()
                .filter(|f| rs <= f.start && f.end <= re)
                .map(|f| FrameSpan {
                    start: f.start - rs + ms,
                    end: f.end - rs + ms,
                    label: f.label.clone(),
                })
                .collect();
            reps[si].push(Replacement {
                start: ms,
                end: me,
                tokens,
                pos,
                frames,
            });
            applied[si].insert(li);
        }
        reps[si].sort_by_key(|r| r.start);
    }

    let mut replaced = 0;
    let mut sentences = Vec::with_capacity(n_sent);
    for (si, sent) in story.sentences.iter().enumerate() {
        let sr = &reps[si];
        let mut tokens = Vec::new();
        let mut pos = Vec::new();
        let mut cursor = 0;
        for r in sr {
            tokens.extend_from_slice(&sent.tokens[cursor..r.start]);
            pos.extend_from_slice(&sent.pos[cursor..r.start]);
            tokens.extend(r.tokens.iter().cloned());
            pos.extend(r.pos.iter().cloned());
            cursor = r.end;
            replaced += 1;
        }
        tokens.extend_from_slice(&sent.tokens[cursor..]);
        pos.extend_from_slice(&sent.pos[cursor..]);

        let overlaps = |f: &FrameSpan| sr.iter().any(|r| f.start < r.end && r.start < f.end);
        let mut frames: Vec<FrameSpan> = sent
            .frames
            .iter()
            .filter(|f| !overlaps(f))
            .map(|f| FrameSpan {
                start: shift(sr, f.start),
                end: shift(sr, f.end),
                label: f.label.clone(),
            })
            .collect();
        for r in sr {
            let base = shift(sr, r.start);
            frames.extend(r.frames.iter().map(|f| FrameSpan {
                start: f.start - r.start + base,
                end: f.end - r.start + base,
                label: f.label.clone(),
            }));
        }
        frames.sort_by_key(|f| (f.start, f.end));

        let coref = sent
            .coref
            .iter()
            .enumerate()
            .filter(|(li, _)| !applied[si].contains(li))
            .map(|(_, c)| CorefLink {
                mention: [shift(sr, c.mention[0]), shift(sr, c.mention[1])],
                root: [
                    c.root[0],
                    shift(&reps[c.root[0]], c.root[1]),
                    shift(&reps[c.root[0]], c.root[2]),
                ],
                entity_type: c.entity_type.clone(),
            })
            .collect();
        sentences.push(AnnotatedSentence {
            tokens,
            pos,
            frames,
            coref,
        });
    }

    Ok(CorefOutcome {
        story: StoryRecord {
            version: story.version,
            story_id: story.story_id.clone(),
            sentences,
        },
        replaced,
        possessives,
    })
}

/// Term groups of a story, one per sentence.
pub fn story_terms(story: &StoryRecord) -> Vec<Vec<String>> {
    story.sentences.iter().map(extract_terms).collect()
}

/// Generator training pair: terms from the coreference-replaced story, text
/// from the original.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorPair {
    pub story_id: String,
    pub path: TermPath,
    pub sentences: Vec<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillerExample {
    pub story_id: String,
    pub images: ImageSequence,
    pub gold: Vec<Vec<String>>,
}

pub enum RecordMode<'a> {
    Generator,
    Lm,
    Distiller(&'a BTreeMap<String, ImageSequence>),
}

#[derive(Clone, Debug, PartialEq)]
pub enum TrainingRecords {
    Generator(Vec<GeneratorPair>),
    Lm(Vec<TermSequence>),
    Distiller(Vec<DistillerExample>),
}

impl TrainingRecords {
    pub fn len(&self) -> usize {
        match self {
            TrainingRecords::Generator(v) => v.len(),
            TrainingRecords::Lm(v) => v.len(),
            TrainingRecords::Distiller(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Builds training material. Terms always come from the
/// coreference-replaced story.
pub fn build_training_pairs(stories: &[StoryRecord], mode: RecordMode<'_>) -> Result<TrainingRecords, CorpusError> {
    let terms = stories
        .iter()
        .map(|s| Ok(story_terms(&apply_coref_replacement(s)?.story)))
        .collect::<Result<Vec<_>, CorpusError>>()?;
    Ok(match mode {
        RecordMode::Generator => TrainingRecords::Generator(
            stories
                .iter()
                .zip(terms)
                .map(|(s, groups)| GeneratorPair {
                    story_id: s.story_id.clone(),
                    path: TermPath::from_groups(s.story_id.clone(), groups),
                    sentences: s.sentences.iter().map(|x| x.tokens.clone()).collect(),
                })
                .collect(),
        ),
        RecordMode::Lm => TrainingRecords::Lm(terms.iter().map(TermSequence::from_groups).collect()),
        RecordMode::Distiller(features) => {
            let missing: Vec<String> = stories
                .iter()
                .filter(|s| !features.contains_key(&s.story_id))
                .map(|s| s.story_id.clone())
                .collect();
            if !missing.is_empty() {
                return Err(CorpusError::MissingFeatures(missing));
            }
            let mut out = Vec::with_capacity(stories.len());
            for (s, gold) in stories.iter().zip(terms) {
                let images = features[&s.story_id].clone();
                if images.slots.len() != gold.len() {
                    return Err(CorpusError::ImageCountMismatch {
                        story_id: s.story_id.clone(),
                        sentences: gold.len(),
                        images: images.slots.len(),
                    });
                }
                out.push(DistillerExample {
                    story_id: s.story_id.clone(),
                    images,
                    gold,
                });
            }
            TrainingRecords::Distiller(out)
        }
    })
}
