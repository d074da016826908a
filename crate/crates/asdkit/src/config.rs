//! Run configuration: a strict key-value TOML file selecting the method,
//! the feature front end, and the training recipe.
//!
//! Unknown keys are rejected outright — a silently ignored typo in a
//! hyperparameter name is the easiest way to ruin a reproduction run. All
//! numeric fields are range-checked, and the feature settings are digested
//! into a hash that travels with every model so score runs can detect a
//! front-end mismatch.
//!
//! ```toml
//! method = "baseline_ae"        # baseline_ae | classifier | conditioned_ae
//!
//! [features]
//! frame_length = 1024
//! hop_length = 512
//! n_mels = 64
//! context = 2                   # P
//!
//! [training]
//! epochs = 100
//! batch_size = 512
//! learning_rate = 0.001
//! seed = 0
//!
//! [classifier]
//! mode = "within_type"          # or "outlier_exposed"
//!
//! [conditioned]
//! variant = "constant_target"   # or "id_regression"
//! q = 0.5
//! lambda = 1.0
//! ```

use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::baseline_ae::ArchReading;
use crate::conditioned_ae::{ConditionedConfig, ConditionedVariant, ConstantPolicy};
use crate::dataset::SynthSpec;
use crate::features::FeatureConfig;
use crate::nn::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("{path}: {detail}")]
    Parse { path: String, detail: String },
    #[error("config field '{field}' is invalid: {detail}")]
    Invalid { field: String, detail: String },
}

fn invalid(field: &str, detail: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field: field.to_string(),
        detail: detail.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    BaselineAe,
    Classifier,
    ConditionedAe,
}

impl std::str::FromStr for Method {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "baseline_ae" => Ok(Method::BaselineAe),
            "classifier" => Ok(Method::Classifier),
            "conditioned_ae" => Ok(Method::ConditionedAe),
            other => Err(invalid(
                "method",
                format!("'{other}' is not one of baseline_ae, classifier, conditioned_ae"),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainingSection {
    fn default() -> Self {
        TrainingSection {
            epochs: 100,
            batch_size: 512,
            learning_rate: 0.001,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineSection {
    pub reading: ArchReading,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierModeName {
    #[default]
    WithinType,
    OutlierExposed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierSection {
    pub mode: ClassifierModeName,
    pub hidden: Vec<usize>,
}

impl Default for ClassifierSection {
    fn default() -> Self {
        ClassifierSection {
            mode: ClassifierModeName::WithinType,
            hidden: crate::classifier_asd::DEFAULT_HIDDEN.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConditionedSection {
    pub variant: ConditionedVariant,
    /// Wrong-ID substitution probability.
    pub q: f64,
    /// ID-block loss weight.
    pub lambda: f64,
    pub constant: ConstantPolicy,
    pub mismatch_weight: f64,
    pub reading: ArchReading,
}

impl Default for ConditionedSection {
    fn default() -> Self {
        ConditionedSection {
            variant: ConditionedVariant::ConstantTarget,
            q: 0.5,
            lambda: 1.0,
            constant: ConstantPolicy::Mean,
            mismatch_weight: 1.0,
            reading: ArchReading::FourPerHalf,
        }
    }
}

impl ConditionedSection {
    pub fn to_config(&self) -> ConditionedConfig {
        ConditionedConfig {
            variant: self.variant,
            mismatch_probability: self.q,
            lambda: self.lambda,
            constant: self.constant,
            mismatch_weight: self.mismatch_weight,
            reading: self.reading,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub method: Method,
    #[serde(default)]
    pub features: FeatureConfig,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default)]
    pub baseline: BaselineSection,
    #[serde(default)]
    pub classifier: ClassifierSection,
    #[serde(default)]
    pub conditioned: ConditionedSection,
}

impl RunConfig {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.training.epochs,
            batch_size: self.training.batch_size,
            learning_rate: self.training.learning_rate,
            seed: self.training.seed,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let f = &self.features;
        if !f.frame_length.is_power_of_two() || !(64..=16384).contains(&f.frame_length) {
            return Err(invalid(
                "features.frame_length",
                format!("{} must be a power of two in [64, 16384]", f.frame_length),
            ));
        }
        if f.hop_length == 0 || f.hop_length > f.frame_length {
            return Err(invalid(
                "features.hop_length",
                format!("{} must lie in (0, frame_length]", f.hop_length),
            ));
        }
        if f.n_mels == 0 || f.n_mels > f.frame_length / 2 + 1 {
            return Err(invalid(
                "features.n_mels",
                format!("{} must lie in [1, frame_length/2 + 1]", f.n_mels),
            ));
        }
        if f.sample_rate != 16000 {
            return Err(invalid(
                "features.sample_rate",
                format!("{} is not supported; the pipeline is fixed at 16000 Hz", f.sample_rate),
            ));
        }
        let nyquist = f.sample_rate as f64 / 2.0;
        if !(0.0..nyquist).contains(&f.f_min) || f.f_max <= f.f_min || f.f_max > nyquist {
            return Err(invalid(
                "features.f_min/f_max",
                format!("[{}, {}] must satisfy 0 <= f_min < f_max <= {nyquist}", f.f_min, f.f_max),
            ));
        }
        if f.context > 16 {
            return Err(invalid(
                "features.context",
                format!("{} frames of context is outside [0, 16]", f.context),
            ));
        }

        let t = &self.training;
        if t.epochs == 0 || t.epochs > 100_000 {
            return Err(invalid(
                "training.epochs",
                format!("{} must lie in [1, 100000]", t.epochs),
            ));
        }
        if t.batch_size == 0 || t.batch_size > 1_000_000 {
            return Err(invalid(
                "training.batch_size",
                format!("{} must lie in [1, 1000000]", t.batch_size),
            ));
        }
        if !(t.learning_rate > 0.0 && t.learning_rate <= 1.0) {
            return Err(invalid(
                "training.learning_rate",
                format!("{} must lie in (0, 1]", t.learning_rate),
            ));
        }

        let c = &self.classifier;
        if c.hidden.is_empty() || c.hidden.iter().any(|&h| h == 0 || h > 4096) {
            return Err(invalid(
                "classifier.hidden",
                "layer widths must be in [1, 4096] and non-empty",
            ));
        }

        let k = &self.conditioned;
        if !(0.0..=1.0).contains(&k.q) {
            return Err(invalid("conditioned.q", format!("{} must lie in [0, 1]", k.q)));
        }
        if !(k.lambda.is_finite() && (0.0..=1e6).contains(&k.lambda)) {
            return Err(invalid(
                "conditioned.lambda",
                format!("{} must lie in [0, 1e6]", k.lambda),
            ));
        }
        if !(k.mismatch_weight.is_finite() && (0.0..=1e6).contains(&k.mismatch_weight)) {
            return Err(invalid(
                "conditioned.mismatch_weight",
                format!("{} must lie in [0, 1e6]", k.mismatch_weight),
            ));
        }
        Ok(())
    }
}

/// Parses and validates a run config, rejecting unknown keys.
pub fn load_run_config(path: impl AsRef<Path>) -> Result<RunConfig, ConfigError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let config: RunConfig = toml::from_str(&text).map_err(|e| ConfigError::Parse {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    config.validate()?;
    Ok(config)
}

/// Parses a synthetic-corpus spec (validation happens at generation time).
pub fn load_synth_spec(path: impl AsRef<Path>) -> Result<SynthSpec, ConfigError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    toml::from_str(&text).map_err(|e| ConfigError::Parse {
        path: path.display().to_string(),
        detail: e.to_string(),
    })
}

/// Digest of the feature settings, embedded in checkpoints and manifests so
/// a score run can detect front-end mismatches.
pub fn feature_config_hash(f: &FeatureConfig) -> String {
    let canonical = format!(
        "frame_length={};hop_length={};window={:?};n_mels={};f_min={:?};f_max={:?};sample_rate={};context={}",
        f.frame_length, f.hop_length, f.window, f.n_mels, f.f_min, f.f_max, f.sample_rate, f.context
    );
    let mut hasher = Sha256::new();
    hasher.update(canonical.as_bytes());
    hex::encode(&hasher.finalize()[..16])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_standard_defaults() {
        let config: RunConfig = toml::from_str("method = \"baseline_ae\"").unwrap();
        config.validate().unwrap();
        assert_eq!(config.training.epochs, 100);
        assert_eq!(config.training.batch_size, 512);
        assert_eq!(config.training.learning_rate, 0.001);
        assert_eq!(config.features.n_mels, 64);
        assert_eq!(config.features.context, 2);
        assert_eq!(config.features.input_dim(), 320);
    }

    #[test]
    fn unknown_keys_rejected_everywhere() {
        assert!(toml::from_str::<RunConfig>("method = \"classifier\"\nbogus = 1").is_err());
        assert!(toml::from_str::<RunConfig>(
            "method = \"classifier\"\n[training]\nepochz = 10"
        )
        .is_err());
        assert!(toml::from_str::<RunConfig>(
            "method = \"conditioned_ae\"\n[features]\nmel_count = 64"
        )
        .is_err());
    }

    #[test]
    fn range_validation_names_fields() {
        let mut config: RunConfig = toml::from_str("method = \"baseline_ae\"").unwrap();
        config.training.learning_rate = 0.0;
        match config.validate() {
            Err(ConfigError::Invalid { field, .. }) => {
                assert_eq!(field, "training.learning_rate")
            }
            other => panic!("expected invalid field, got {other:?}"),
        }
        let mut config: RunConfig = toml::from_str("method = \"baseline_ae\"").unwrap();
        config.features.frame_length = 1000;
        assert!(matches!(
            config.validate(),
            Err(ConfigError::Invalid { field, .. }) if field == "features.frame_length"
        ));
        let mut config: RunConfig = toml::from_str("method = \"baseline_ae\"").unwrap();
        config.conditioned.q = 1.5;
        assert!(config.validate().is_err());
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let base = FeatureConfig::default();
        let again = FeatureConfig::default();
        assert_eq!(feature_config_hash(&base), feature_config_hash(&again));
        let different = FeatureConfig {
            n_mels: 32,
            ..FeatureConfig::default()
        };
        assert_ne!(feature_config_hash(&base), feature_config_hash(&different));
        assert_eq!(feature_config_hash(&base).len(), 32);
    }

    #[test]
    fn method_parses_from_flag() {
        assert_eq!("classifier".parse::<Method>().unwrap(), Method::Classifier);
        assert!("autoencoder".parse::<Method>().is_err());
    }

    #[test]
    fn synth_spec_parses_strictly() {
        let text = r#"
            machine_type = "widget"
            seed = 7
            clip_seconds = 2.0
            snr_db = 20.0
            train_per_id = 4
            test_normal_per_id = 2
            test_anomaly_per_id = 2
            anomaly = "added_harmonic"
            [[ids]]
            id = 1
            tones_hz = [440.0, 880.0]
            amp_range = [0.1, 0.2]
        "#;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("spec.toml");
        std::fs::write(&path, text).unwrap();
        let spec = load_synth_spec(&path).unwrap();
        assert_eq!(spec.ids.len(), 1);
        assert_eq!(spec.harmonic_amplitude, 0.15); // serde default

        std::fs::write(&path, format!("{text}\nwhatever = 3")).unwrap();
        assert!(load_synth_spec(&path).is_err());
    }
}
