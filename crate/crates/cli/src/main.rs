use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use kgstory::config::{ConfigError, KgInput, LmKind, RunConfig};
use kgstory::corpus::read_corpus;
use kgstory::distiller::Distiller;
use kgstory::fixtures::SyntheticSuite;
use kgstory::generator::{Generator, Story};
use kgstory::lm::TermLm;
use kgstory::metrics::{bleu_n, distinct_n};
use kgstory::neural::Checkpoint;
use kgstory::pipeline::{self, Manifest, PipelineError};

const EXIT_RUNTIME: u8 = 1;
const EXIT_INPUT: u8 = 2;

#[derive(Parser)]
#[command(name = "kgstory", version, about = "Distill, enrich and generate visual stories")]
struct Cli {
    /// Run configuration (TOML). Flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Log more (-v info, -vv debug). Warnings and errors always show.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the term distiller on annotated stories and their image features.
    TrainDistiller(TrainDistiller),
    /// Train the term language model used to rank enriched paths.
    TrainLm(TrainLm),
    /// Train the story generator on term paths and stories.
    TrainGenerator(TrainGenerator),
    /// Predict a term path for each image sequence.
    Distill(Distill),
    /// Insert knowledge-graph bridges into term paths.
    Enrich(Enrich),
    /// Write stories for term paths.
    Generate(Generate),
    /// Run the configured stages end to end and write a manifest.
    Pipeline(PipelineCmd),
    /// Score generated stories against reference stories.
    Eval(Eval),
    /// Write the synthetic fixture suite and a config that runs it.
    Fixtures(Fixtures),
}

#[derive(Args)]
struct TrainDistiller {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint to write.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum LmKindArg {
    Ngram,
    Recurrent,
}

#[derive(Args)]
struct TrainLm {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, value_enum)]
    kind: Option<LmKindArg>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainGenerator {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Distill {
    /// Object-feature JSONL.
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    beam: Option<usize>,
    /// Output JSONL; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Args)]
struct Enrich {
    /// Term paths (JSONL).
    #[arg(long)]
    terms: Option<PathBuf>,
    /// Tuple file as `PATH` or `SOURCE=PATH`; repeatable. Replaces the
    /// config's graphs.
    #[arg(long = "kg")]
    kg: Vec<String>,
    /// Source whose edges are excluded from two-hop joins; repeatable.
    #[arg(long = "one-hop-source")]
    one_hop_sources: Vec<String>,
    #[arg(long)]
    lm: Option<PathBuf>,
    /// Maximum number of candidate paths, the base path included.
    #[arg(long)]
    cap: Option<usize>,
    #[arg(long, value_enum)]
    two_hop: Option<Switch>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Generate {
    /// Term paths (JSONL), plain or as written by `enrich`.
    #[arg(long)]
    path: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PipelineCmd {
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated stages to run: train, distill, enrich, generate.
    #[arg(long, value_delimiter = ',')]
    stages: Option<Vec<String>>,
    /// Rerun the invocation recorded in this manifest and compare outputs.
    #[arg(long)]
    from_manifest: Option<PathBuf>,
}

#[derive(Args)]
struct Eval {
    /// Generated stories (JSONL).
    #[arg(long)]
    stories: PathBuf,
    /// Reference corpus (annotated story JSONL), matched by story id.
    #[arg(long)]
    references: PathBuf,
    /// Highest BLEU order.
    #[arg(long, default_value_t = 4)]
    max_n: usize,
}

#[derive(Args)]
struct Fixtures {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    stories: usize,
}

/// A failure and whether it lies in the inputs.
struct Failure {
    input: bool,
    error: anyhow::Error,
}

impl Failure {
    fn input(error: impl Into<anyhow::Error>) -> Self {
        Self {
            input: true,
            error: error.into(),
        }
    }

    fn runtime(error: impl Into<anyhow::Error>) -> Self {
        Self {
            input: false,
            error: error.into(),
        }
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        Self {
            input: e.is_input_error(),
            error: e.into(),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::input(e)
    }
}

type Outcome = Result<(), Failure>;

/// Prints a line to stdout; a closed pipe (`kgstory eval | head`) is not an error.
macro_rules! say {
    ($($arg:tt)*) => {{
        let _ = writeln!(std::io::stdout().lock(), $($arg)*);
    }};
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(if f.input { EXIT_INPUT } else { EXIT_RUNTIME })
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    match path {
        Some(p) => Ok(RunConfig::load(p)?),
        None => Ok(RunConfig::default()),
    }
}

fn run(cli: Cli) -> Outcome {
    let mut cfg = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::TrainDistiller(a) => train_distiller(&mut cfg, a),
        Command::TrainLm(a) => train_lm(&mut cfg, a),
        Command::TrainGenerator(a) => train_generator(&mut cfg, a),
        Command::Distill(a) => distill(&mut cfg, a),
        Command::Enrich(a) => enrich(&mut cfg, a),
        Command::Generate(a) => generate(&mut cfg, a),
        Command::Pipeline(a) => run_pipeline(&mut cfg, a),
        Command::Eval(a) => eval(a),
        Command::Fixtures(a) => fixtures(a),
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn set_some<T>(slot: &mut Option<T>, value: Option<T>) {
    if value.is_some() {
        *slot = value;
    }
}

fn output_path(cfg: &RunConfig, out: Option<PathBuf>, default_name: &str) -> Result<PathBuf, Failure> {
    let path = out.unwrap_or_else(|| cfg.paths.output_dir.join(default_name));
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)
            .with_context(|| format!("creating {}", dir.display()))
            .map_err(Failure::runtime)?;
    }
    Ok(path)
}

fn write_text(path: &Path, text: &str) -> Outcome {
    fs::write(path, text)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(Failure::runtime)
}

fn save_checkpoint(ckpt: Checkpoint, path: &Path) -> Outcome {
    let json = ckpt.to_json().map_err(Failure::runtime)?;
    write_text(path, &json)?;
    say!("wrote {}", path.display());
    Ok(())
}

fn train_distiller(cfg: &mut RunConfig, a: TrainDistiller) -> Outcome {
    set_some(&mut cfg.paths.corpus, a.corpus);
    set_some(&mut cfg.paths.features, a.features);
    set(&mut cfg.distiller.epochs, a.epochs);
    set(&mut cfg.distiller.seed, a.seed);
    cfg.validate()?;
    let out = output_path(cfg, a.out, pipeline::DISTILLER_CKPT)?;
    let model = pipeline::train_distiller(cfg)?;
    save_checkpoint(model.to_checkpoint().map_err(Failure::runtime)?, &out)
}

fn train_lm(cfg: &mut RunConfig, a: TrainLm) -> Outcome {
    set_some(&mut cfg.paths.corpus, a.corpus);
    if let Some(k) = a.kind {
        cfg.lm.kind = match k {
            LmKindArg::Ngram => LmKind::Ngram,
            LmKindArg::Recurrent => LmKind::Recurrent,
        };
    }
    set(&mut cfg.lm.recurrent.epochs, a.epochs);
    set(&mut cfg.lm.recurrent.seed, a.seed);
    cfg.validate()?;
    let out = output_path(cfg, a.out, pipeline::LM_CKPT)?;
    let lm = pipeline::train_lm(cfg)?;
    lm.save(&out).map_err(Failure::runtime)?;
    say!("wrote {}", out.display());
    Ok(())
}

fn train_generator(cfg: &mut RunConfig, a: TrainGenerator) -> Outcome {
    set_some(&mut cfg.paths.corpus, a.corpus);
    set(&mut cfg.generator.epochs, a.epochs);
    set(&mut cfg.generator.seed, a.seed);
    cfg.validate()?;
    let out = output_path(cfg, a.out, pipeline::GENERATOR_CKPT)?;
    let model = pipeline::train_generator(cfg)?;
    save_checkpoint(model.to_checkpoint().map_err(Failure::runtime)?, &out)
}

fn require(path: Option<PathBuf>, flag: &str, config_key: &str) -> Result<PathBuf, Failure> {
    let p = path.ok_or_else(|| Failure::input(anyhow!("missing --{flag} (or paths.{config_key} in the config)")))?;
    if !p.is_file() {
        return Err(Failure::input(anyhow!("{}: no such file", p.display())));
    }
    Ok(p)
}

/// Writes JSONL to `out`, or to stdout.
fn emit<T: serde::Serialize>(out: Option<PathBuf>, items: &[T]) -> Outcome {
    match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(Failure::runtime)?;
            }
            pipeline::write_jsonl(&p, items)?;
            info!("wrote {} records to {}", items.len(), p.display());
        }
        None => {
            let mut stdout = std::io::stdout().lock();
            for item in items {
                let line = serde_json::to_string(item).map_err(Failure::runtime)?;
                writeln!(stdout, "{line}").map_err(Failure::runtime)?;
            }
        }
    }
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, Failure> {
    Checkpoint::load(path).map_err(Failure::input)
}

fn distill(cfg: &mut RunConfig, a: Distill) -> Outcome {
    let features = require(
        a.features
            .or(cfg.paths.inference_features.clone())
            .or(cfg.paths.features.clone()),
        "features",
        "inference_features",
    )?;
    let model_path = require(
        a.model.or(cfg.paths.distiller_model.clone()),
        "model",
        "distiller_model",
    )?;
    let model = Distiller::from_checkpoint(load_checkpoint(&model_path)?).map_err(Failure::input)?;
    let sequences =
        kgstory::features::read_feature_file(&features, cfg.features.max_objects).map_err(Failure::input)?;
    let paths = pipeline::distill(&model, &sequences, a.beam.unwrap_or(cfg.distiller.beam))?;
    emit(a.out, &paths)
}

fn parse_kg(spec: &str, one_hop: &[String]) -> KgInput {
    let (source, path) = match spec.split_once('=') {
        Some((s, p)) => (s.to_string(), PathBuf::from(p)),
        None => {
            let p = PathBuf::from(spec);
            let stem = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| spec.to_string());
            (stem, p)
        }
    };
    let two_hop = !one_hop.contains(&source);
    KgInput { path, source, two_hop }
}

fn enrich(cfg: &mut RunConfig, a: Enrich) -> Outcome {
    let terms = require(a.terms.or(cfg.paths.term_paths.clone()), "terms", "term_paths")?;
    let lm_path = require(a.lm.or(cfg.paths.lm_model.clone()), "lm", "lm_model")?;
    if !a.kg.is_empty() {
        cfg.paths.kg = a.kg.iter().map(|s| parse_kg(s, &a.one_hop_sources)).collect();
    } else {
        for kg in &mut cfg.paths.kg {
            if a.one_hop_sources.contains(&kg.source) {
                kg.two_hop = false;
            }
        }
    }
    set(&mut cfg.enrich.cap, a.cap);
    if let Some(s) = a.two_hop {
        cfg.enrich.allow_two_hop = matches!(s, Switch::On);
    }
    cfg.validate()?;
    let paths = pipeline::read_term_paths(&terms)?;
    let lm = TermLm::load(&lm_path).map_err(Failure::input)?;
    let index = pipeline::load_kg(&cfg.paths.kg)?;
    if index.is_empty() {
        warn!("knowledge graph is empty; paths pass through unenriched");
    }
    let records = pipeline::enrich_paths(&paths, &index, &lm, &cfg.enrich)?;
    emit(a.out, &records)
}

fn generate(cfg: &mut RunConfig, a: Generate) -> Outcome {
    let paths_file = require(a.path.or(cfg.paths.term_paths.clone()), "path", "term_paths")?;
    let model_path = require(
        a.model.or(cfg.paths.generator_model.clone()),
        "model",
        "generator_model",
    )?;
    set(&mut cfg.decode.alpha, a.alpha);
    set(&mut cfg.decode.gamma, a.gamma);
    set(&mut cfg.decode.beam, a.beam);
    cfg.validate()?;
    let model = Generator::from_checkpoint(load_checkpoint(&model_path)?).map_err(Failure::input)?;
    let paths = pipeline::read_term_paths(&paths_file)?;
    let stories = pipeline::generate(&model, &paths, &cfg.decode)?;
    emit(a.out, &stories)
}

fn parse_stages(cfg: &mut RunConfig, stages: &[String]) -> Outcome {
    cfg.stages.train = false;
    cfg.stages.distill = false;
    cfg.stages.enrich = false;
    cfg.stages.generate = false;
    for s in stages {
        match s.trim() {
            "train" => cfg.stages.train = true,
            "distill" => cfg.stages.distill = true,
            "enrich" => cfg.stages.enrich = true,
            "generate" => cfg.stages.generate = true,
            other => return Err(Failure::input(anyhow!("unknown stage {other:?}"))),
        }
    }
    Ok(())
}

fn run_pipeline(cfg: &mut RunConfig, a: PipelineCmd) -> Outcome {
    if let Some(m) = a.from_manifest {
        let recorded = Manifest::load(&m)?;
        let fresh = pipeline::rerun(&m, a.out.as_deref())?;
        let diff = recorded.output_differences(&fresh);
        if diff.is_empty() {
            say!("rerun reproduced all {} outputs", fresh.outputs.len());
            return Ok(());
        }
        return Err(Failure::runtime(anyhow!("rerun outputs differ: {}", diff.join(", "))));
    }
    set(&mut cfg.paths.output_dir, a.out);
    if let Some(stages) = &a.stages {
        parse_stages(cfg, stages)?;
    }
    let manifest = pipeline::run_pipeline(cfg)?;
    for d in &manifest.outputs {
        say!("{}  {}", d.sha256, cfg.paths.output_dir.join(&d.path).display());
    }
    Ok(())
}

fn eval(a: Eval) -> Outcome {
    let stories: Vec<Story> = pipeline::read_jsonl(&a.stories)?;
    let refs = read_corpus(&a.references).map_err(Failure::input)?;
    let by_id: BTreeMap<&str, Vec<String>> = refs
        .iter()
        .map(|r| {
            (
                r.story_id.as_str(),
                r.sentences.iter().flat_map(|s| s.tokens.iter().cloned()).collect(),
            )
        })
        .collect();
    let mut candidates = Vec::new();
    let mut references = Vec::new();
    let mut missing = Vec::new();
    for s in &stories {
        match by_id.get(s.story_id.as_str()) {
            Some(r) => {
                candidates.push(s.tokens.concat());
                references.push(vec![r.clone()]);
            }
            None => missing.push(s.story_id.clone()),
        }
    }
    if !missing.is_empty() {
        return Err(Failure::input(anyhow!("no reference story for ids {missing:?}")));
    }
    let mut report = serde_json::Map::new();
    for n in 1..=a.max_n {
        let b = bleu_n(&candidates, &references, n).map_err(Failure::input)?;
        report.insert(format!("bleu{n}"), b.into());
    }
    let generated: Vec<Vec<String>> = stories.iter().map(|s| s.tokens.concat()).collect();
    for n in 1..=2 {
        let d = distinct_n(&generated, n).map_err(Failure::input)?;
        report.insert(format!("distinct{n}"), d.into());
    }
    report.insert("stories".into(), stories.len().into());
    say!("{}", serde_json::to_string_pretty(&report).map_err(Failure::runtime)?);
    Ok(())
}

fn fixtures(a: Fixtures) -> Outcome {
    let suite = SyntheticSuite::generate(a.seed, a.stories);
    let mut cfg = suite.write(&a.out).map_err(Failure::runtime)?;
    // paths in the written config are relative to it
    let rel = |p: &Path| {
        p.strip_prefix(&a.out)
            .map(Path::to_path_buf)
            .unwrap_or_else(|_| p.to_path_buf())
    };
    for p in [
        &mut cfg.paths.corpus,
        &mut cfg.paths.features,
        &mut cfg.paths.inference_features,
        &mut cfg.paths.term_paths,
    ]
    .into_iter()
    .flatten()
    {
        *p = rel(p);
    }
    for kg in &mut cfg.paths.kg {
        kg.path = rel(&kg.path);
    }
    cfg.paths.output_dir = rel(&cfg.paths.output_dir);
    let path = a.out.join("config.toml");
    write_text(&path, &cfg.to_toml()?)?;
    say!("wrote fixture suite and {}", path.display());
    Ok(())
}
