//! `.aeck` checkpoints: magic `AECK`, `u32` format version, `u64` header
//! length, a JSON header, then every tensor as little-endian `f32`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::NormStats;
use crate::autodiff::Tensor;
use crate::classifier::{ClassifierConfig, ClassifierModel};
use crate::generator::{GeneratorConfig, GeneratorModel};
use crate::nn::ParamStore;

pub const MAGIC: &[u8; 4] = b"AECK";
pub const FORMAT_VERSION: u32 = 1;
pub const SUPPORTED_VERSIONS: &[u32] = &[FORMAT_VERSION];
pub const EXTENSION: &str = "aeck";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint: {0}")]
    Format(String),
    #[error("unsupported checkpoint version {found}; supported versions: {supported:?}")]
    Version { found: u32, supported: Vec<u32> },
    #[error("payload shorter than header declares: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("header and model disagree: {0}")]
    Mismatch(String),
    #[error("refusing to save non-finite value in tensor {0}")]
    NonFinite(String),
    #[error("checkpoint holds a {found:?} model, expected {expected:?}")]
    Kind {
        found: ModelKind,
        expected: ModelKind,
    },
    #[error(transparent)]
    Model(#[from] crate::ModelError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Classifier,
    Generator,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "config", rename_all = "lowercase")]
pub enum ModelConfig {
    Classifier(ClassifierConfig),
    Generator(GeneratorConfig),
}

impl ModelConfig {
    pub fn kind(&self) -> ModelKind {
        match self {
            ModelConfig::Classifier(_) => ModelKind::Classifier,
            ModelConfig::Generator(_) => ModelKind::Generator,
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            ModelConfig::Classifier(c) => c.seed,
            ModelConfig::Generator(c) => c.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Self-describing header; enough to inventory a checkpoint without
/// building the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub model: ModelConfig,
    /// Initialization seed of the model.
    pub seed: u64,
    pub trained_epochs: usize,
    pub norm: NormStats,
    pub tensors: Vec<TensorEntry>,
}

impl CheckpointHeader {
    pub fn kind(&self) -> ModelKind {
        self.model.kind()
    }

    pub fn payload_len(&self) -> usize {
        4 * self
            .tensors
            .iter()
            .map(|t| t.shape.iter().product::<usize>())
            .sum::<usize>()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: Vec<Tensor>,
}

fn snapshot(
    model: ModelConfig,
    trained_epochs: usize,
    norm: NormStats,
    params: &ParamStore,
) -> Checkpoint {
    let tensors = params
        .names()
        .iter()
        .zip(params.tensors())
        .map(|(name, t)| TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
        })
        .collect();
    Checkpoint {
        header: CheckpointHeader {
            format_version: FORMAT_VERSION,
            seed: model.seed(),
            model,
            trained_epochs,
            norm,
            tensors,
        },
        tensors: params.tensors().to_vec(),
    }
}

impl From<&ClassifierModel> for Checkpoint {
    fn from(m: &ClassifierModel) -> Self {
        snapshot(
            ModelConfig::Classifier(m.config().clone()),
            m.trained_epochs(),
            m.norm(),
            m.params(),
        )
    }
}

impl From<&GeneratorModel> for Checkpoint {
    fn from(m: &GeneratorModel) -> Self {
        snapshot(
            ModelConfig::Generator(m.config().clone()),
            m.trained_epochs(),
            m.norm(),
            m.params(),
        )
    }
}

fn load_into(ck: Checkpoint, store: &mut ParamStore) -> Result<(), CheckpointError> {
    let names: Vec<&str> = ck.header.tensors.iter().map(|t| t.name.as_str()).collect();
    let expected: Vec<&str> = store.names().iter().map(String::as_str).collect();
    if names != expected {
        return Err(CheckpointError::Mismatch(format!(
            "tensor names differ from the model built from the stored config ({} vs {})",
            names.len(),
            expected.len()
        )));
    }
    store
        .load_values(ck.tensors)
        .map_err(CheckpointError::Mismatch)
}

impl Checkpoint {
    pub fn into_classifier(self) -> Result<ClassifierModel, CheckpointError> {
        let ModelConfig::Classifier(cfg) = &self.header.model else {
            return Err(CheckpointError::Kind {
                found: self.header.kind(),
                expected: ModelKind::Classifier,
            });
        };
        let mut m = ClassifierModel::new(cfg.clone())?;
        m.set_norm(self.header.norm);
        m.set_trained_epochs(self.header.trained_epochs);
        load_into(self, m.params_mut())?;
        Ok(m)
    }

    pub fn into_generator(self) -> Result<GeneratorModel, CheckpointError> {
        let ModelConfig::Generator(cfg) = &self.header.model else {
            return Err(CheckpointError::Kind {
                found: self.header.kind(),
                expected: ModelKind::Generator,
            });
        };
        let mut m = GeneratorModel::new(cfg.clone())?;
        m.set_norm(self.header.norm);
        m.set_trained_epochs(self.header.trained_epochs);
        load_into(self, m.params_mut())?;
        Ok(m)
    }

    /// Serialized bytes. Values are stored as `f32`.
    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        if self.header.tensors.len() != self.tensors.len() {
            return Err(CheckpointError::Mismatch(format!(
                "{} header entries for {} tensors",
                self.header.tensors.len(),
                self.tensors.len()
            )));
        }
        for (e, t) in self.header.tensors.iter().zip(&self.tensors) {
            if e.shape != t.shape() {
                return Err(CheckpointError::Mismatch(format!(
                    "tensor {}: header shape {:?}, data shape {:?}",
                    e.name,
                    e.shape,
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(CheckpointError::NonFinite(e.name.clone()));
            }
        }
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + header.len() + self.header.payload_len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.header.format_version.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let header = parse_header(bytes)?;
        let start = header_end(bytes)?;
        let payload = &bytes[start..];
        let expected = header.payload_len();
        if payload.len() < expected {
            return Err(CheckpointError::Truncated {
                expected,
                found: payload.len(),
            });
        }
        if payload.len() > expected {
            return Err(CheckpointError::Format(format!(
                "{} trailing bytes after payload",
                payload.len() - expected
            )));
        }
        let mut values = payload
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])));
        let tensors = header
            .tensors
            .iter()
            .map(|e| {
                let n = e.shape.iter().product();
                Tensor::new(e.shape.clone(), values.by_ref().take(n).collect())
                    .map_err(|err| CheckpointError::Mismatch(format!("tensor {}: {err}", e.name)))
            })
            .collect::<Result<_, _>>()?;
        Ok(Checkpoint { header, tensors })
    }
}

fn header_end(bytes: &[u8]) -> Result<usize, CheckpointError> {
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    16usize
        .checked_add(len)
        .filter(|end| *end <= bytes.len())
        .ok_or(CheckpointError::Truncated {
            expected: len,
            found: bytes.len().saturating_sub(16),
        })
}

fn parse_header(bytes: &[u8]) -> Result<CheckpointHeader, CheckpointError> {
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(CheckpointError::Format("missing AECK magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if !SUPPORTED_VERSIONS.contains(&version) {
        return Err(CheckpointError::Version {
            found: version,
            supported: SUPPORTED_VERSIONS.to_vec(),
        });
    }
    let end = header_end(bytes)?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[16..end])
        .map_err(|e| CheckpointError::Format(format!("header: {e}")))?;
    if header.format_version != version {
        return Err(CheckpointError::Format(format!(
            "header says version {}, preamble says {version}",
            header.format_version
        )));
    }
    let mut seen = std::collections::BTreeSet::new();
    if let Some(dup) = header
        .tensors
        .iter()
        .find(|t| !seen.insert(t.name.as_str()))
    {
        return Err(CheckpointError::Format(format!(
            "tensor {} listed twice",
            dup.name
        )));
    }
    Ok(header)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes to a sibling temporary file, then renames it into place.
pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    let bytes = ck.to_bytes()?;
    let mut tmp = PathBuf::from(path);
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    tmp.set_file_name(format!(".{name}.tmp"));
    let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(&bytes).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    drop(f);
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Checkpoint::from_bytes(&bytes)
}

/// Reads only the header.
pub fn read_header(path: &Path) -> Result<CheckpointHeader, CheckpointError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    parse_header(&bytes)
}

pub fn save_classifier(m: &ClassifierModel, path: &Path) -> Result<(), CheckpointError> {
    save_checkpoint(&Checkpoint::from(m), path)
}

pub fn load_classifier(path: &Path) -> Result<ClassifierModel, CheckpointError> {
    load_checkpoint(path)?.into_classifier()
}

pub fn save_generator(m: &GeneratorModel, path: &Path) -> Result<(), CheckpointError> {
    save_checkpoint(&Checkpoint::from(m), path)
}

pub fn load_generator(path: &Path) -> Result<GeneratorModel, CheckpointError> {
    load_checkpoint(path)?.into_generator()
}
