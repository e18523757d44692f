//! On-disk artifacts: dataset snapshots, checkpoints and run manifests. All
//! are JSON documents tagged with a format name and version.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::sha256_hex;
use crate::data::{Dataset, PrepConfig, Split};
use crate::error::{Error, Result};
use crate::model::{AnyModel, ModelConfig, ModelKind, NamedTensor, ParamStore, Recommender};

pub const SNAPSHOT_FORMAT: &str = "starseq-dataset";
pub const CHECKPOINT_FORMAT: &str = "starseq-checkpoint";
pub const MANIFEST_FORMAT: &str = "starseq-manifest";
pub const FORMAT_VERSION: u32 = 1;

/// Identifies the binary that wrote an artifact.
pub fn build_id() -> String {
    let profile = if cfg!(debug_assertions) { "debug" } else { "release" };
    format!("starseq {} ({profile})", env!("CARGO_PKG_VERSION"))
}

fn check_header(found: &str, version: u32, expected: &str) -> Result<()> {
    if found != expected {
        return Err(Error::Format(format!("expected a {expected} file, found '{found}'")));
    }
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "{expected} version {version} is not supported (expected {FORMAT_VERSION})"
        )));
    }
    Ok(())
}

/// Preprocessed dataset plus its leave-one-out split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub format: String,
    pub version: u32,
    pub prep: PrepConfig,
    /// SHA-256 over the canonical JSON of `dataset` and `split`.
    pub data_hash: String,
    pub dataset: Dataset,
    pub split: Split,
}

fn data_hash(dataset: &Dataset, split: &Split) -> Result<String> {
    let bytes = serde_json::to_vec(&(dataset, split))
        .map_err(|e| Error::Format(format!("cannot hash dataset: {e}")))?;
    Ok(sha256_hex(&bytes))
}

impl Snapshot {
    pub fn new(prep: PrepConfig, dataset: Dataset, split: Split) -> Result<Self> {
        Ok(Self {
            format: SNAPSHOT_FORMAT.into(),
            version: FORMAT_VERSION,
            prep,
            data_hash: data_hash(&dataset, &split)?,
            dataset,
            split,
        })
    }

    /// Checks the header and that the stored hash matches the contents.
    pub fn verify(&self) -> Result<()> {
        check_header(&self.format, self.version, SNAPSHOT_FORMAT)?;
        let actual = data_hash(&self.dataset, &self.split)?;
        if actual != self.data_hash {
            return Err(Error::Format(format!(
                "snapshot hash mismatch: stored {}, computed {actual}",
                self.data_hash
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let snap: Snapshot = read_json(path)?;
        snap.verify()?;
        Ok(snap)
    }
}

/// Everything needed to rebuild a trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub kind: ModelKind,
    pub config: ModelConfig,
    /// Hash of the snapshot the model was trained on.
    pub data_hash: String,
    pub epoch: usize,
    #[serde(rename = "val_recall@10")]
    pub val_recall_at_10: f64,
    pub params: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn new<M: Recommender + ?Sized>(model: &M, data_hash: &str, epoch: usize, val_recall_at_10: f64) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: FORMAT_VERSION,
            kind: model.kind(),
            config: model.config().clone(),
            data_hash: data_hash.into(),
            epoch,
            val_recall_at_10,
            params: model.params().entries().to_vec(),
        }
    }

    pub fn into_model(self) -> Result<AnyModel> {
        check_header(&self.format, self.version, CHECKPOINT_FORMAT)?;
        AnyModel::from_parts(self.kind, self.config, ParamStore::from_entries(self.params))
    }

    /// Fails unless the checkpoint was trained on `snapshot`.
    pub fn check_data(&self, snapshot: &Snapshot) -> Result<()> {
        if self.data_hash != snapshot.data_hash {
            return Err(Error::Format(format!(
                "checkpoint was trained on data {}, snapshot is {}",
                self.data_hash, snapshot.data_hash
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt: Checkpoint = read_json(path)?;
        check_header(&ckpt.format, ckpt.version, CHECKPOINT_FORMAT)?;
        Ok(ckpt)
    }
}

/// Provenance record written next to every primary artifact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub command: String,
    pub artifact: String,
    pub build: String,
    pub seed: u64,
    pub config_hash: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_hash: Option<String>,
    /// The effective configuration as TOML.
    pub config: String,
}

impl Manifest {
    pub fn new(command: &str, artifact: &str, seed: u64, config: String, data_hash: Option<String>) -> Self {
        Self {
            format: MANIFEST_FORMAT.into(),
            version: FORMAT_VERSION,
            command: command.into(),
            artifact: artifact.into(),
            build: build_id(),
            seed,
            config_hash: sha256_hex(config.as_bytes()),
            data_hash,
            config,
        }
    }
}

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Format(format!("cannot serialize: {e}")))?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, to_json(value)?).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}
