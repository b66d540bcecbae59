//! Distill, enrich and generate end to end, with a manifest that pins the
//! config, seeds and the digest of every file read or written.
//!
//! Output files in the output directory: `distilled.jsonl` (one term path
//! per image sequence), `enriched.jsonl` (selected path with its perplexity),
//! `stories.jsonl`, model checkpoints when trained, and `manifest.json`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{ConfigError, KgInput, LmKind, RunConfig, Seeds};
use crate::corpus::{build_training_pairs, read_corpus, CorpusError, RecordMode, StoryRecord, TrainingRecords};
use crate::distiller::{Distiller, DistillerError};
use crate::enrich::{build_candidates, select_best, EnrichConfig, EnrichError, TermPath};
use crate::features::{read_feature_file, FeatureError, ImageSequence};
use crate::generator::{BeamPenaltyConfig, Generator, GeneratorError, Story};
use crate::kg::{KgError, KgSource, RelationIndex};
use crate::lm::{LanguageModel, LmError, NGramLm, RecurrentLm, TermLm};
use crate::neural::{Checkpoint, NeuralError};

pub const MANIFEST_FORMAT: &str = "kgstory-manifest";
pub const MANIFEST_VERSION: u32 = 1;

pub const DISTILLED: &str = "distilled.jsonl";
pub const ENRICHED: &str = "enriched.jsonl";
pub const STORIES: &str = "stories.jsonl";
pub const MANIFEST: &str = "manifest.json";
pub const DISTILLER_CKPT: &str = "distiller.json";
pub const LM_CKPT: &str = "lm.json";
pub const GENERATOR_CKPT: &str = "generator.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Train,
    Distill,
    Enrich,
    Generate,
    Eval,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Train => "train",
            Stage::Distill => "distill",
            Stage::Enrich => "enrich",
            Stage::Generate => "generate",
            Stage::Eval => "eval",
        })
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{stage} stage: missing {what} ({path})")]
    MissingInput {
        stage: Stage,
        what: &'static str,
        path: String,
    },
    #[error("{path}: content changed since the manifest was written (expected sha256 {expected}, found {found})")]
    InputChanged {
        path: String,
        expected: String,
        found: String,
    },
    #[error("{path}: {detail}")]
    BadInput { path: String, detail: String },
    #[error("manifest {0}: {1}")]
    Manifest(String, String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Kg(#[from] KgError),
    #[error(transparent)]
    Distiller(#[from] DistillerError),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Enrich(#[from] EnrichError),
    #[error(transparent)]
    Generator(#[from] GeneratorError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error("writing {0}: {1}")]
    Write(String, #[source] std::io::Error),
}

impl PipelineError {
    /// Whether the failure lies in the inputs (files, formats, config)
    /// rather than in the computation.
    pub fn is_input_error(&self) -> bool {
        match self {
            PipelineError::MissingInput { .. }
            | PipelineError::InputChanged { .. }
            | PipelineError::BadInput { .. }
            | PipelineError::Manifest(..)
            | PipelineError::Config(_)
            | PipelineError::Corpus(_)
            | PipelineError::Feature(_)
            | PipelineError::Kg(_) => true,
            PipelineError::Lm(e) => matches!(
                e,
                LmError::Io(..) | LmError::Json(..) | LmError::UnknownFormat(_) | LmError::BadMarkers(_)
            ),
            PipelineError::Neural(e) => matches!(e, NeuralError::Io(..) | NeuralError::Checkpoint(_)),
            PipelineError::Distiller(e) => matches!(
                e,
                DistillerError::WrongKind(_)
                    | DistillerError::OutOfVocabulary { .. }
                    | DistillerError::GoldMismatch { .. }
            ),
            PipelineError::Generator(e) => matches!(
                e,
                GeneratorError::WrongKind(_)
                    | GeneratorError::OutOfVocabulary { .. }
                    | GeneratorError::LengthMismatch { .. }
                    | GeneratorError::EmptyPath(_)
            ),
            _ => false,
        }
    }
}

type Result<T> = std::result::Result<T, PipelineError>;

fn require<'a>(stage: Stage, what: &'static str, path: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    let p = path.as_deref().ok_or_else(|| PipelineError::MissingInput {
        stage,
        what,
        path: format!("paths.{key} is not set"),
    })?;
    if !p.is_file() {
        return Err(PipelineError::MissingInput {
            stage,
            what,
            path: p.display().to_string(),
        });
    }
    Ok(p)
}

fn check_file(stage: Stage, what: &'static str, p: &Path) -> Result<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(PipelineError::MissingInput {
            stage,
            what,
            path: p.display().to_string(),
        })
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| PipelineError::BadInput {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let err = |e| PipelineError::Write(path.display().to_string(), e);
    let mut f = std::io::BufWriter::new(fs::File::create(path).map_err(err)?);
    for item in items {
        let line =
            serde_json::to_string(item).map_err(|e| PipelineError::Write(path.display().to_string(), e.into()))?;
        writeln!(f, "{line}").map_err(err)?;
    }
    f.flush().map_err(err)
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| PipelineError::BadInput {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| PipelineError::BadInput {
                path: format!("{}:{}", path.display(), i + 1),
                detail: e.to_string(),
            })
        })
        .collect()
}

/// A selected path with its score, as written by the enrich stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnrichedRecord {
    pub story_id: String,
    pub perplexity: f64,
    pub candidates: usize,
    pub path: TermPath,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum PathLine {
    Enriched(EnrichedRecord),
    Plain(TermPath),
}

/// Reads term paths from either plain `TermPath` lines or enrich-stage
/// records.
pub fn read_term_paths(path: &Path) -> Result<Vec<TermPath>> {
    let lines: Vec<PathLine> = read_jsonl(path)?;
    let paths: Vec<TermPath> = lines
        .into_iter()
        .map(|l| match l {
            PathLine::Enriched(r) => r.path,
            PathLine::Plain(p) => p,
        })
        .collect();
    for p in &paths {
        p.validate().map_err(|e| PipelineError::BadInput {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
    }
    Ok(paths)
}

/// Features keyed by story id.
type FeatureMap = BTreeMap<String, ImageSequence>;

fn training_records(cfg: &RunConfig, stage: Stage, mode: &str) -> Result<(Vec<StoryRecord>, Option<FeatureMap>)> {
    let corpus = require(stage, "training corpus", &cfg.paths.corpus, "corpus")?;
    let stories = read_corpus(corpus)?;
    let features = if mode == "distiller" {
        let f = require(stage, "training features", &cfg.paths.features, "features")?;
        Some(read_feature_file(f, cfg.features.max_objects)?)
    } else {
        None
    };
    Ok((stories, features))
}

pub fn train_distiller(cfg: &RunConfig) -> Result<Distiller> {
    let (stories, features) = training_records(cfg, Stage::Train, "distiller")?;
    let features = features.expect("distiller mode reads features");
    let TrainingRecords::Distiller(examples) = build_training_pairs(&stories, RecordMode::Distiller(&features))? else {
        unreachable!("distiller mode")
    };
    info!("training distiller on {} stories", examples.len());
    let (model, reports) = Distiller::train(&examples, cfg.distiller.clone())?;
    if let Some(last) = reports.last() {
        info!("distiller final loss {:.4}", last.loss);
    }
    Ok(model)
}

pub fn train_lm(cfg: &RunConfig) -> Result<TermLm> {
    let (stories, _) = training_records(cfg, Stage::Train, "lm")?;
    let TrainingRecords::Lm(seqs) = build_training_pairs(&stories, RecordMode::Lm)? else {
        unreachable!("lm mode")
    };
    info!("training {:?} term LM on {} sequences", cfg.lm.kind, seqs.len());
    Ok(match cfg.lm.kind {
        LmKind::Ngram => {
            let tokens: Vec<Vec<String>> = seqs.iter().map(|s| s.tokens().to_vec()).collect();
            TermLm::NGram(NGramLm::train(&tokens, cfg.lm.ngram.clone())?)
        }
        LmKind::Recurrent => {
            let (lm, reports) = RecurrentLm::train(&seqs, cfg.lm.recurrent.clone())?;
            if let Some(last) = reports.last() {
                info!("term LM held-out perplexity {:.4}", last.heldout_perplexity);
            }
            TermLm::Recurrent(lm)
        }
    })
}

pub fn train_generator(cfg: &RunConfig) -> Result<Generator> {
    let (stories, _) = training_records(cfg, Stage::Train, "generator")?;
    let TrainingRecords::Generator(pairs) = build_training_pairs(&stories, RecordMode::Generator)? else {
        unreachable!("generator mode")
    };
    info!("training generator on {} stories", pairs.len());
    let (model, reports) = Generator::train(&pairs, cfg.generator.clone())?;
    if let Some(last) = reports.last() {
        info!("generator final loss {:.4}", last.loss);
    }
    Ok(model)
}

pub fn load_kg(inputs: &[KgInput]) -> Result<RelationIndex> {
    let mut index = RelationIndex::new();
    for kg in inputs {
        check_file(Stage::Enrich, "knowledge graph", &kg.path)?;
        let n = index.load_tsv(&kg.path, KgSource::new(kg.source.clone(), kg.two_hop))?;
        info!("loaded {n} tuples from {}", kg.path.display());
    }
    Ok(index)
}

/// One unenriched term path per image sequence, in story id order.
pub fn distill(model: &Distiller, sequences: &BTreeMap<String, ImageSequence>, beam: usize) -> Result<Vec<TermPath>> {
    let seqs: Vec<&ImageSequence> = sequences.values().collect();
    seqs.par_iter()
        .map(|s| {
            let groups = model.predict_terms(s, beam)?;
            Ok(TermPath::from_groups(s.story_id.clone(), groups))
        })
        .collect()
}

pub fn enrich_paths<M>(
    paths: &[TermPath],
    index: &RelationIndex,
    lm: &M,
    config: &EnrichConfig,
) -> Result<Vec<EnrichedRecord>>
where
    M: LanguageModel + Sync + ?Sized,
{
    paths
        .iter()
        .map(|p| {
            let candidates = build_candidates(p, index, config)?;
            let best = select_best(&candidates, lm)?;
            Ok(EnrichedRecord {
                story_id: p.story_id.clone(),
                perplexity: best.perplexity,
                candidates: candidates.len(),
                path: best.path,
            })
        })
        .collect()
}

pub fn generate(model: &Generator, paths: &[TermPath], penalties: &BeamPenaltyConfig) -> Result<Vec<Story>> {
    Ok(model.decode_stories(paths, penalties)?)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub role: String,
    pub path: PathBuf,
    pub sha256: String,
}

/// Everything needed to rerun a pipeline invocation and check its outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub seeds: Seeds,
    pub config: RunConfig,
    /// Files read, with absolute or config-relative paths.
    pub inputs: Vec<FileDigest>,
    /// Checkpoints the stages used, whether loaded or trained in this run.
    pub checkpoints: Vec<FileDigest>,
    /// Files written, relative to the output directory.
    pub outputs: Vec<FileDigest>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).map_err(|e| PipelineError::Manifest(path.display().to_string(), e.to_string()))?;
        let m: Manifest = serde_json::from_str(&text)
            .map_err(|e| PipelineError::Manifest(path.display().to_string(), e.to_string()))?;
        if m.format != MANIFEST_FORMAT || m.version != MANIFEST_VERSION {
            return Err(PipelineError::Manifest(
                path.display().to_string(),
                format!("unsupported format {} v{}", m.format, m.version),
            ));
        }
        Ok(m)
    }

    /// Output files whose digests differ from `other`'s, or that only one of
    /// the two manifests lists.
    pub fn output_differences(&self, other: &Manifest) -> Vec<String> {
        let a: BTreeMap<_, _> = self.outputs.iter().map(|d| (&d.path, &d.sha256)).collect();
        let b: BTreeMap<_, _> = other.outputs.iter().map(|d| (&d.path, &d.sha256)).collect();
        let mut out: Vec<String> = a
            .iter()
            .filter(|(p, h)| b.get(*p) != Some(*h))
            .map(|(p, _)| p.display().to_string())
            .collect();
        out.extend(
            b.keys()
                .filter(|p| !a.contains_key(*p))
                .map(|p| p.display().to_string()),
        );
        out
    }
}

struct Recorder {
    out_dir: PathBuf,
    inputs: Vec<FileDigest>,
    checkpoints: Vec<FileDigest>,
    outputs: Vec<FileDigest>,
}

impl Recorder {
    fn input(&mut self, role: &str, path: &Path) -> Result<()> {
        let sha256 = sha256_file(path)?;
        self.inputs.push(FileDigest {
            role: role.into(),
            path: path.to_path_buf(),
            sha256,
        });
        Ok(())
    }

    fn output(&mut self, role: &str, name: &str) -> Result<()> {
        let sha256 = sha256_file(&self.out_dir.join(name))?;
        self.outputs.push(FileDigest {
            role: role.into(),
            path: PathBuf::from(name),
            sha256,
        });
        Ok(())
    }

    fn checkpoint(&mut self, role: &str, path: &Path, trained: bool) -> Result<()> {
        let sha256 = sha256_file(path)?;
        let shown = if trained {
            PathBuf::from(path.file_name().expect("checkpoint file name"))
        } else {
            path.to_path_buf()
        };
        self.checkpoints.push(FileDigest {
            role: role.into(),
            path: shown.clone(),
            sha256: sha256.clone(),
        });
        if trained {
            self.outputs.push(FileDigest {
                role: role.into(),
                path: shown,
                sha256,
            });
        } else {
            self.inputs.push(FileDigest {
                role: role.into(),
                path: path.to_path_buf(),
                sha256,
            });
        }
        Ok(())
    }
}

fn save_checkpoint(ckpt: Checkpoint, path: &Path) -> Result<()> {
    let json = ckpt.to_json()?;
    fs::write(path, json).map_err(|e| PipelineError::Write(path.display().to_string(), e))
}

/// Runs the enabled stages and writes their outputs plus `manifest.json`
/// into `paths.output_dir`.
pub fn run_pipeline(cfg: &RunConfig) -> Result<Manifest> {
    cfg.validate()?;
    let out = cfg.paths.output_dir.clone();
    fs::create_dir_all(&out).map_err(|e| PipelineError::Write(out.display().to_string(), e))?;
    let mut rec = Recorder {
        out_dir: out.clone(),
        inputs: Vec::new(),
        checkpoints: Vec::new(),
        outputs: Vec::new(),
    };
    let st = &cfg.stages;
    if st.train {
        let corpus = require(Stage::Train, "training corpus", &cfg.paths.corpus, "corpus")?;
        rec.input("corpus", corpus)?;
        if st.distill {
            let f = require(Stage::Train, "training features", &cfg.paths.features, "features")?;
            rec.input("features", f)?;
        }
    }

    let mut paths: Option<Vec<TermPath>> = None;
    if st.distill {
        let model = if st.train {
            let m = train_distiller(cfg)?;
            let p = out.join(DISTILLER_CKPT);
            save_checkpoint(m.to_checkpoint()?, &p)?;
            rec.checkpoint("distiller", &p, true)?;
            m
        } else {
            let p = require(
                Stage::Distill,
                "distiller checkpoint",
                &cfg.paths.distiller_model,
                "distiller_model",
            )?;
            rec.checkpoint("distiller", p, false)?;
            Distiller::from_checkpoint(Checkpoint::load(p)?)?
        };
        let source = if cfg.paths.inference_features.is_some() {
            require(
                Stage::Distill,
                "image features",
                &cfg.paths.inference_features,
                "inference_features",
            )?
        } else {
            require(Stage::Distill, "image features", &cfg.paths.features, "features")?
        };
        if !rec.inputs.iter().any(|d| d.path == source) {
            rec.input("inference_features", source)?;
        }
        let sequences = read_feature_file(source, cfg.features.max_objects)?;
        info!("distilling {} image sequences", sequences.len());
        let distilled = distill(&model, &sequences, cfg.distiller.beam)?;
        write_jsonl(&out.join(DISTILLED), &distilled)?;
        rec.output("distilled", DISTILLED)?;
        paths = Some(distilled);
    }

    let first_consumer = if st.enrich { Stage::Enrich } else { Stage::Generate };
    if paths.is_none() && (st.enrich || st.generate) {
        let p = require(first_consumer, "term paths", &cfg.paths.term_paths, "term_paths")?;
        rec.input("term_paths", p)?;
        paths = Some(read_term_paths(p)?);
    }

    if st.enrich {
        let lm = if st.train {
            let m = train_lm(cfg)?;
            let p = out.join(LM_CKPT);
            m.save(&p)?;
            rec.checkpoint("lm", &p, true)?;
            m
        } else {
            let p = require(Stage::Enrich, "term LM", &cfg.paths.lm_model, "lm_model")?;
            rec.checkpoint("lm", p, false)?;
            TermLm::load(p)?
        };
        if cfg.paths.kg.is_empty() {
            log::warn!("no knowledge graphs configured; every path stays unenriched");
        }
        for kg in &cfg.paths.kg {
            check_file(Stage::Enrich, "knowledge graph", &kg.path)?;
            rec.input(&format!("kg:{}", kg.source), &kg.path)?;
        }
        let index = load_kg(&cfg.paths.kg)?;
        let base = paths.take().expect("paths resolved above");
        let enriched = enrich_paths(&base, &index, &lm, &cfg.enrich)?;
        info!(
            "enriched {} of {} paths",
            enriched.iter().filter(|r| r.path.is_enriched()).count(),
            enriched.len()
        );
        write_jsonl(&out.join(ENRICHED), &enriched)?;
        rec.output("enriched", ENRICHED)?;
        paths = Some(enriched.into_iter().map(|r| r.path).collect());
    }

    if st.generate {
        let model = if st.train {
            let m = train_generator(cfg)?;
            let p = out.join(GENERATOR_CKPT);
            save_checkpoint(m.to_checkpoint()?, &p)?;
            rec.checkpoint("generator", &p, true)?;
            m
        } else {
            let p = require(
                Stage::Generate,
                "generator checkpoint",
                &cfg.paths.generator_model,
                "generator_model",
            )?;
            rec.checkpoint("generator", p, false)?;
            Generator::from_checkpoint(Checkpoint::load(p)?)?
        };
        let paths = paths.take().expect("paths resolved above");
        info!("generating {} stories", paths.len());
        let stories = generate(&model, &paths, &cfg.decode)?;
        write_jsonl(&out.join(STORIES), &stories)?;
        rec.output("stories", STORIES)?;
    }

    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        version: MANIFEST_VERSION,
        config_hash: cfg.hash(),
        seeds: cfg.seeds(),
        config: cfg.clone(),
        inputs: rec.inputs,
        checkpoints: rec.checkpoints,
        outputs: rec.outputs,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| PipelineError::Write(MANIFEST.into(), e.into()))?;
    let mpath = out.join(MANIFEST);
    fs::write(&mpath, text + "\n").map_err(|e| PipelineError::Write(mpath.display().to_string(), e))?;
    Ok(manifest)
}

/// Reruns the invocation recorded in a manifest, optionally into another
/// output directory, after checking that every input is unchanged.
pub fn rerun(manifest_path: &Path, output_dir: Option<&Path>) -> Result<Manifest> {
    let m = Manifest::load(manifest_path)?;
    if m.config.hash() != m.config_hash {
        return Err(PipelineError::Manifest(
            manifest_path.display().to_string(),
            "config does not match its recorded hash".into(),
        ));
    }
    for d in &m.inputs {
        check_file(Stage::Train, "manifest input", &d.path)?;
        let found = sha256_file(&d.path)?;
        if found != d.sha256 {
            return Err(PipelineError::InputChanged {
                path: d.path.display().to_string(),
                expected: d.sha256.clone(),
                found,
            });
        }
    }
    let mut cfg = m.config.clone();
    if let Some(dir) = output_dir {
        cfg.paths.output_dir = dir.to_path_buf();
    }
    run_pipeline(&cfg)
}
