//! Model persistence: each trained model is a binary checkpoint
//! (`<stem>.ckpt`) holding the network parameters plus a JSON sidecar
//! (`<stem>.json`) describing what the parameters are — method, machine
//! key(s), feature configuration, method knobs, and the config hash.
//!
//! The hash is stored in both files; loading verifies they agree, so a
//! checkpoint cannot be silently paired with the wrong manifest. All writes
//! go through a temp file and rename.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use ndarray::Array1;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baseline_ae::{AeModel, ArchReading};
use crate::classifier_asd::{ClassifierMode, IdClassifier};
use crate::conditioned_ae::{ConditionedAeModel, ConditionedVariant};
use crate::dataset::MachineKey;
use crate::features::FeatureConfig;
use crate::nn::{self, Network, NnError};
use crate::pipeline::ModelError;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("manifest {path}: {detail}")]
    Json { path: String, detail: String },
    #[error("model '{stem}': manifest hash {manifest_hash} does not match checkpoint hash {checkpoint_hash}")]
    HashMismatch {
        stem: String,
        manifest_hash: String,
        checkpoint_hash: String,
    },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn io_err(path: &Path, source: io::Error) -> ManifestError {
    ManifestError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Sidecar schema. The `method` tag selects the model family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelManifest {
    BaselineAe {
        machine: MachineKey,
        feature: FeatureConfig,
        reading: ArchReading,
        config_hash: String,
    },
    Classifier {
        mode: ClassifierMode,
        id_index: Vec<MachineKey>,
        feature: FeatureConfig,
        config_hash: String,
    },
    ConditionedAe {
        variant: ConditionedVariant,
        id_index: Vec<MachineKey>,
        lambda: f64,
        mismatch_probability: f64,
        constant_vector: Option<Vec<f64>>,
        feature: FeatureConfig,
        config_hash: String,
    },
}

impl ModelManifest {
    pub fn config_hash(&self) -> &str {
        match self {
            ModelManifest::BaselineAe { config_hash, .. }
            | ModelManifest::Classifier { config_hash, .. }
            | ModelManifest::ConditionedAe { config_hash, .. } => config_hash,
        }
    }

    pub fn feature(&self) -> &FeatureConfig {
        match self {
            ModelManifest::BaselineAe { feature, .. }
            | ModelManifest::Classifier { feature, .. }
            | ModelManifest::ConditionedAe { feature, .. } => feature,
        }
    }
}

/// A model reconstructed from disk.
pub enum AnyModel {
    Baseline(AeModel),
    Classifier(IdClassifier),
    Conditioned(ConditionedAeModel),
}

pub struct LoadedModel {
    pub stem: String,
    pub manifest: ModelManifest,
    pub model: AnyModel,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), ManifestError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))?;
    Ok(())
}

/// Writes `<stem>.ckpt` and `<stem>.json` under `dir`.
pub fn save_model(
    dir: impl AsRef<Path>,
    stem: &str,
    manifest: &ModelManifest,
    network: &Network,
) -> Result<(), ManifestError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let ckpt_path = dir.join(format!("{stem}.ckpt"));
    let tmp_ckpt = ckpt_path.with_extension("ckpt.tmp");
    nn::save_checkpoint(network, &tmp_ckpt, manifest.config_hash())?;
    fs::rename(&tmp_ckpt, &ckpt_path).map_err(|e| io_err(&ckpt_path, e))?;

    let json = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    write_atomic(&dir.join(format!("{stem}.json")), json.as_bytes())?;
    Ok(())
}

/// Writes the per-epoch training loss beside a model as `<stem>.loss.csv`.
pub fn write_loss_log(
    dir: impl AsRef<Path>,
    stem: &str,
    history: &[f64],
) -> Result<(), ManifestError> {
    let mut body = String::from("epoch,loss\n");
    for (epoch, loss) in history.iter().enumerate() {
        body.push_str(&format!("{},{}\n", epoch + 1, loss));
    }
    write_atomic(
        &dir.as_ref().join(format!("{stem}.loss.csv")),
        body.as_bytes(),
    )
}

/// Loads one model from its manifest path, verifying the checkpoint hash
/// and rebuilding the typed model.
pub fn load_model(manifest_path: impl AsRef<Path>) -> Result<LoadedModel, ManifestError> {
    let manifest_path = manifest_path.as_ref();
    let stem = manifest_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let text = fs::read_to_string(manifest_path).map_err(|e| io_err(manifest_path, e))?;
    let manifest: ModelManifest = serde_json::from_str(&text).map_err(|e| ManifestError::Json {
        path: manifest_path.display().to_string(),
        detail: e.to_string(),
    })?;
    let ckpt_path = manifest_path.with_extension("ckpt");
    let (network, checkpoint_hash) = nn::load_checkpoint(&ckpt_path)?;
    if checkpoint_hash != manifest.config_hash() {
        return Err(ManifestError::HashMismatch {
            stem,
            manifest_hash: manifest.config_hash().to_string(),
            checkpoint_hash,
        });
    }
    let model = match &manifest {
        ModelManifest::BaselineAe {
            machine,
            feature,
            reading,
            ..
        } => AnyModel::Baseline(AeModel::from_parts(
            network,
            machine.clone(),
            feature.clone(),
            *reading,
        )?),
        ModelManifest::Classifier {
            mode,
            id_index,
            feature,
            ..
        } => AnyModel::Classifier(IdClassifier::from_parts(
            network,
            id_index.clone(),
            mode.clone(),
            feature.clone(),
        )?),
        ModelManifest::ConditionedAe {
            variant,
            id_index,
            lambda,
            mismatch_probability,
            constant_vector,
            feature,
            ..
        } => AnyModel::Conditioned(ConditionedAeModel::from_parts(
            network,
            *variant,
            id_index.clone(),
            constant_vector.as_ref().map(|v| Array1::from_vec(v.clone())),
            *lambda,
            *mismatch_probability,
            feature.clone(),
        )?),
    };
    Ok(LoadedModel {
        stem,
        manifest,
        model,
    })
}

/// Loads every `<stem>.json`/`<stem>.ckpt` pair under `dir`, sorted by stem.
pub fn load_models(dir: impl AsRef<Path>) -> Result<Vec<LoadedModel>, ManifestError> {
    let dir = dir.as_ref();
    let mut manifest_paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("json"))
        .collect();
    manifest_paths.sort();
    manifest_paths.into_iter().map(load_model).collect()
}
