use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use super::NeuralError;

pub const CHECKPOINT_FORMAT: &str = "kgstory-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Named trainable parameters plus the seed they were initialized from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterStore {
    rng_seed: u64,
    params: BTreeMap<String, Tensor>,
}

/// FNV-1a, used to derive an independent stream per parameter name.
fn stream_id(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

impl ParameterStore {
    pub fn new(rng_seed: u64) -> Self {
        Self {
            rng_seed,
            params: BTreeMap::new(),
        }
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    /// Generator for `name`: the store seed split by a per-name stream, so
    /// initial values do not depend on registration order.
    pub fn rng_for(&self, name: &str) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.rng_seed);
        rng.set_stream(stream_id(name));
        rng
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<(), NeuralError> {
        if self.params.contains_key(name) {
            return Err(NeuralError::DuplicateParameter(name.to_string()));
        }
        self.params.insert(name.to_string(), tensor.with_grad(true));
        Ok(())
    }

    /// Xavier-uniform `rows x cols` matrix.
    pub fn xavier(&mut self, name: &str, rows: usize, cols: usize) -> Result<(), NeuralError> {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let mut rng = self.rng_for(name);
        let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
        self.insert(name, Tensor::matrix(rows, cols, data)?)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<(), NeuralError> {
        self.insert(name, Tensor::filled(shape, value))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }
}

/// Learning-rate schedule metadata stored alongside parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleMeta {
    pub base_lr: f64,
    pub warmup: u64,
    pub step: u64,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    kind: String,
    rng_seed: u64,
    schedule: Option<ScheduleMeta>,
    #[serde(default)]
    metadata: serde_json::Value,
    params: BTreeMap<String, ParamEntry>,
}

/// JSON checkpoint container: `name -> (shape, data)` entries plus seed,
/// schedule metadata, and a model-specific `metadata` blob.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub params: ParameterStore,
    pub schedule: Option<ScheduleMeta>,
    pub metadata: serde_json::Value,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String, NeuralError> {
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            kind: self.kind.clone(),
            rng_seed: self.params.rng_seed,
            schedule: self.schedule.clone(),
            metadata: self.metadata.clone(),
            params: self
                .params
                .iter()
                .map(|(k, t)| {
                    (
                        k.clone(),
                        ParamEntry {
                            shape: t.shape().to_vec(),
                            data: t.data().to_vec(),
                        },
                    )
                })
                .collect(),
        };
        serde_json::to_string(&file).map_err(|e| NeuralError::Checkpoint(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self, NeuralError> {
        let file: CheckpointFile = serde_json::from_str(text).map_err(|e| NeuralError::Checkpoint(e.to_string()))?;
        if file.format != CHECKPOINT_FORMAT {
            return Err(NeuralError::Checkpoint(format!(
                "unexpected format tag {:?}",
                file.format
            )));
        }
        if file.version != CHECKPOINT_VERSION {
            return Err(NeuralError::Checkpoint(format!(
                "unsupported checkpoint version {}",
                file.version
            )));
        }
        let mut params = ParameterStore::new(file.rng_seed);
        for (name, entry) in file.params {
            params.insert(&name, Tensor::new(entry.shape, entry.data)?)?;
        }
        Ok(Self {
            kind: file.kind,
            params,
            schedule: file.schedule,
            metadata: file.metadata,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), NeuralError> {
        fs::write(path, self.to_json()?).map_err(|e| NeuralError::Io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self, NeuralError> {
        let text = fs::read_to_string(path).map_err(|e| NeuralError::Io(path.display().to_string(), e))?;
        Self::from_json(&text)
    }

    /// Reads only the `kind` tag of a checkpoint document.
    pub fn peek_kind(text: &str) -> Option<String> {
        #[derive(Deserialize)]
        struct Head {
            format: String,
            kind: String,
        }
        let head: Head = serde_json::from_str(text).ok()?;
        (head.format == CHECKPOINT_FORMAT).then_some(head.kind)
    }
}
