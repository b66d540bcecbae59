//! Declarative run configuration, read from TOML. Every field has a default;
//! model sizes and decoding settings default to the published values.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::distiller::DistillerConfig;
use crate::enrich::EnrichConfig;
use crate::features::MAX_OBJECTS;
use crate::generator::{BeamPenaltyConfig, GeneratorConfig};
use crate::lm::{NGramConfig, RecurrentLmConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{0}: {1}")]
    Io(String, #[source] std::io::Error),
    #[error("{0}: {1}")]
    Parse(String, #[source] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stages {
    /// Train the models the other enabled stages need instead of loading
    /// them from `paths`.
    pub train: bool,
    pub distill: bool,
    pub enrich: bool,
    pub generate: bool,
}

impl Default for Stages {
    fn default() -> Self {
        Self {
            train: true,
            distill: true,
            enrich: true,
            generate: true,
        }
    }
}

/// A knowledge-graph tuple file and its provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KgInput {
    pub path: PathBuf,
    pub source: String,
    /// Whether edges from this source take part in two-hop joins.
    #[serde(default = "yes")]
    pub two_hop: bool,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Annotated training stories (JSONL).
    pub corpus: Option<PathBuf>,
    /// Object features of the training stories (JSONL).
    pub features: Option<PathBuf>,
    /// Image sequences to tell stories about; `features` when unset.
    pub inference_features: Option<PathBuf>,
    pub kg: Vec<KgInput>,
    /// Term paths (JSONL) fed to the first enabled stage after distillation
    /// when the distill stage is off.
    pub term_paths: Option<PathBuf>,
    pub distiller_model: Option<PathBuf>,
    pub lm_model: Option<PathBuf>,
    pub generator_model: Option<PathBuf>,
    pub output_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            corpus: None,
            features: None,
            inference_features: None,
            kg: Vec::new(),
            term_paths: None,
            distiller_model: None,
            lm_model: None,
            generator_model: None,
            output_dir: PathBuf::from("out"),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LmKind {
    Ngram,
    #[default]
    Recurrent,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmSettings {
    pub kind: LmKind,
    pub ngram: NGramConfig,
    pub recurrent: RecurrentLmConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureSettings {
    /// Objects kept per image, most confident first.
    pub max_objects: usize,
}

impl Default for FeatureSettings {
    fn default() -> Self {
        Self {
            max_objects: MAX_OBJECTS,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub stages: Stages,
    pub paths: Paths,
    pub features: FeatureSettings,
    pub distiller: DistillerConfig,
    pub lm: LmSettings,
    pub enrich: EnrichConfig,
    pub generator: GeneratorConfig,
    pub decode: BeamPenaltyConfig,
}

/// Seeds of every randomized component.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub distiller: u64,
    pub lm: u64,
    pub generator: u64,
}

impl RunConfig {
    pub fn from_toml(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(origin.into(), e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative paths in it are taken relative to the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|e| ConfigError::Io(path.display().to_string(), e))?;
        let mut cfg = Self::from_toml(&text, &path.display().to_string())?;
        if let Some(base) = path.parent() {
            cfg.resolve_paths(base);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String, ConfigError> {
        toml::to_string(self).map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let p = &mut self.paths;
        for x in [
            &mut p.corpus,
            &mut p.features,
            &mut p.inference_features,
            &mut p.term_paths,
            &mut p.distiller_model,
            &mut p.lm_model,
            &mut p.generator_model,
        ]
        .into_iter()
        .flatten()
        {
            fix(x);
        }
        for kg in &mut p.kg {
            fix(&mut kg.path);
        }
        fix(&mut p.output_dir);
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.decode.beam == 0 || self.distiller.beam == 0 {
            return bad("beam size must be at least 1".into());
        }
        if self.decode.alpha < 0.0 || self.decode.gamma < 0.0 {
            return bad("alpha and gamma must be nonnegative".into());
        }
        for (name, d) in [("distiller", self.distiller.dim), ("generator", self.generator.dim)] {
            if d == 0 || d % 2 != 0 {
                return bad(format!("{name}.dim must be even and nonzero, got {d}"));
            }
        }
        if self.features.max_objects == 0 {
            return bad("features.max_objects must be at least 1".into());
        }
        if self.enrich.cap == 0 {
            return bad("enrich.cap must be at least 1".into());
        }
        Ok(())
    }

    pub fn seeds(&self) -> Seeds {
        Seeds {
            distiller: self.distiller.seed,
            lm: self.lm.recurrent.seed,
            generator: self.generator.seed,
        }
    }

    /// SHA-256 of the config's canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}
