mod common;

use std::time::Duration;

use common::oracles::check_fixture_pipeline;
use kgstory::config::RunConfig;
use kgstory::enrich::TermPath;
use kgstory::fixtures::{SyntheticSuite, GAP_PATHS_FILE};
use kgstory::generator::Story;
use kgstory::pipeline::{self, read_jsonl, run_pipeline, Manifest, PipelineError, MANIFEST, STORIES};

#[test]
fn fixture_run_bridges_and_reproduces() {
    let dir = tempfile::tempdir().unwrap();
    println!(
        "{}",
        check_fixture_pipeline(dir.path(), Duration::from_secs(600)).unwrap()
    );
}

fn gap_config(dir: &std::path::Path) -> RunConfig {
    let mut cfg = SyntheticSuite::generate(7, 20).write(dir).unwrap();
    cfg.stages.distill = false;
    cfg
}

#[test]
fn gap_paths_are_all_bridged() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = gap_config(dir.path());
    cfg.stages.generate = false;
    run_pipeline(&cfg).unwrap();
    let enriched: Vec<pipeline::EnrichedRecord> = read_jsonl(&cfg.paths.output_dir.join(pipeline::ENRICHED)).unwrap();
    assert_eq!(enriched.len(), 6);
    for r in &enriched {
        let b = r.path.bridge.as_ref().expect("gap path left unbridged");
        assert_eq!(b.after_slot, 1, "{}", r.story_id);
    }
}

#[test]
fn generate_only_uses_provided_paths_and_model() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = gap_config(dir.path());
    // train once to get a generator checkpoint
    let mut train = cfg.clone();
    train.stages.enrich = false;
    run_pipeline(&train).unwrap();

    let mut only = cfg.clone();
    only.stages.train = false;
    only.stages.enrich = false;
    only.paths.generator_model = Some(cfg.paths.output_dir.join(pipeline::GENERATOR_CKPT));
    only.paths.output_dir = dir.path().join("gen");
    let manifest = run_pipeline(&only).unwrap();
    let stories: Vec<Story> = read_jsonl(&only.paths.output_dir.join(STORIES)).unwrap();
    let paths: Vec<TermPath> = read_jsonl(&dir.path().join(GAP_PATHS_FILE)).unwrap();
    assert_eq!(stories.len(), paths.len());
    for (s, p) in stories.iter().zip(&paths) {
        assert_eq!(s.story_id, p.story_id);
        assert_eq!(s.groups, 5);
    }
    assert!(manifest.inputs.iter().any(|d| d.role == "term_paths"));
    assert!(manifest.checkpoints.iter().any(|d| d.role == "generator"));
    assert_eq!(manifest.outputs.len(), 1);
}

#[test]
fn rerun_refuses_changed_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = gap_config(dir.path());
    cfg.stages.generate = false;
    run_pipeline(&cfg).unwrap();
    let mpath = cfg.paths.output_dir.join(MANIFEST);
    let m = Manifest::load(&mpath).unwrap();
    assert_eq!(m.config_hash, cfg.hash());
    std::fs::write(&cfg.paths.kg[0].path, "x\ty\tz\n").unwrap();
    let err = pipeline::rerun(&mpath, Some(&dir.path().join("again"))).unwrap_err();
    assert!(matches!(err, PipelineError::InputChanged { .. }), "{err}");
}

#[test]
fn missing_stage_input_names_stage_and_file() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = gap_config(dir.path());
    cfg.paths.kg[1].path = dir.path().join("missing.tsv");
    let err = run_pipeline(&cfg).unwrap_err();
    let msg = err.to_string();
    assert!(err.is_input_error());
    assert!(msg.contains("enrich") && msg.contains("missing.tsv"), "{msg}");
}
