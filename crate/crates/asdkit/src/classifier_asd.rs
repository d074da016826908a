//! Classification-based anomaly detection: a machine-ID classifier trained
//! on pooled normal frames, scoring a clip by how poorly its frames match
//! the claimed ID.
//!
//! Two modes:
//! - [`ClassifierMode::WithinType`]: classes are the machine IDs of one
//!   type.
//! - [`ClassifierMode::OutlierExposed`]: classes are one type's IDs plus a
//!   single extra class fed by every other type's normal frames, standing
//!   in for anomalies.
//!
//! The anomaly score of a clip claimed to be ID `k` is the mean over its
//! frames of the negative log softmax probability of class `k`, with the
//! probability floored at 1e-12 so a confidently wrong classifier cannot
//! produce an infinite score.

use std::collections::BTreeMap;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::audio_io::AudioClip;
use crate::dataset::MachineKey;
use crate::features::{FeatureConfig, FeaturePipeline};
use crate::nn::{self, Activation, Loss, Network, Targets, TrainConfig};
use crate::pipeline::{clip_context_frames, pooled_context_frames, subseed, ModelError};

/// Probability floor applied per frame before taking the log.
pub const PROBABILITY_FLOOR: f64 = 1e-12;

/// Default hidden layer widths between the input and the logits.
pub const DEFAULT_HIDDEN: [usize; 3] = [128, 128, 64];

/// Default pair-confusion threshold for [`similarity_audit`].
pub const DEFAULT_CONFUSION_THRESHOLD: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ClassifierMode {
    WithinType,
    /// Other machine types' normals pooled into one extra anomaly class.
    OutlierExposed { target_type: String },
}

/// A trained machine-ID classifier with its feature front end.
pub struct IdClassifier {
    network: Network,
    id_index: Vec<MachineKey>,
    mode: ClassifierMode,
    pipeline: FeaturePipeline,
}

impl IdClassifier {
    /// Number of classes: the ID count, plus one in outlier-exposed mode.
    pub fn n_classes(&self) -> usize {
        match self.mode {
            ClassifierMode::WithinType => self.id_index.len(),
            ClassifierMode::OutlierExposed { .. } => self.id_index.len() + 1,
        }
    }

    pub fn id_index(&self) -> &[MachineKey] {
        &self.id_index
    }

    pub fn mode(&self) -> &ClassifierMode {
        &self.mode
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn feature_config(&self) -> &FeatureConfig {
        self.pipeline.config()
    }

    pub fn from_parts(
        network: Network,
        id_index: Vec<MachineKey>,
        mode: ClassifierMode,
        feature: FeatureConfig,
    ) -> Result<Self, ModelError> {
        if id_index.is_empty() {
            return Err(ModelError::Config("id index is empty".to_string()));
        }
        let mut deduped = id_index.clone();
        deduped.sort();
        deduped.dedup();
        if deduped.len() != id_index.len() {
            return Err(ModelError::Config("id index has duplicates".to_string()));
        }
        let classes = match &mode {
            ClassifierMode::WithinType => id_index.len(),
            ClassifierMode::OutlierExposed { .. } => id_index.len() + 1,
        };
        if network.input_dim() != feature.input_dim() || network.output_dim() != classes {
            return Err(ModelError::Config(format!(
                "network is {}→{} but expected {}→{classes}",
                network.input_dim(),
                network.output_dim(),
                feature.input_dim()
            )));
        }
        let pipeline =
            FeaturePipeline::new(feature).map_err(|e| ModelError::Config(e.to_string()))?;
        Ok(IdClassifier {
            network,
            id_index,
            mode,
            pipeline,
        })
    }

    fn class_of(&self, key: &MachineKey) -> Result<usize, ModelError> {
        self.id_index
            .iter()
            .position(|k| k == key)
            .ok_or_else(|| ModelError::UnknownId(key.to_string()))
    }

    /// Per-frame negative log probability of `class` over the given frames.
    fn frame_nll(&self, frames: &Array2<f64>, class: usize) -> Result<Vec<f64>, ModelError> {
        let pass = nn::forward(&self.network, frames)?;
        let log_p = nn::log_softmax(pass.output());
        Ok(log_p
            .column(class)
            .iter()
            .map(|&lp| -lp.exp().max(PROBABILITY_FLOOR).ln())
            .collect())
    }

    /// Anomaly score for a clip claimed to be `claimed`: mean frame NLL of
    /// the claimed ID. Higher means more anomalous.
    pub fn anomaly_score(
        &self,
        clip: &AudioClip,
        claimed: &MachineKey,
    ) -> Result<f64, ModelError> {
        let class = self.class_of(claimed)?;
        let frames = clip_context_frames(&self.pipeline, clip)?;
        let nll = self.frame_nll(&frames.into_vectors(), class)?;
        Ok(nll.iter().sum::<f64>() / nll.len() as f64)
    }

    /// Most likely class per frame.
    fn frame_argmax(&self, frames: &Array2<f64>) -> Result<Vec<usize>, ModelError> {
        let pass = nn::forward(&self.network, frames)?;
        Ok(pass
            .output()
            .outer_iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(i, _)| i)
                    .unwrap()
            })
            .collect())
    }
}

fn classifier_activations(n_layers: usize) -> Vec<Activation> {
    let mut acts = vec![Activation::Relu; n_layers];
    *acts.last_mut().unwrap() = Activation::Identity;
    acts
}

/// Trains a machine-ID classifier on frame-level normal data.
///
/// `data` maps each machine to its normal training clips. In within-type
/// mode every key must share one machine type; in outlier-exposed mode the
/// keys of `target_type` become the ID classes and every other key's clips
/// feed the pooled anomaly class.
pub fn train_id_classifier(
    data: &BTreeMap<MachineKey, Vec<AudioClip>>,
    mode: ClassifierMode,
    hidden: &[usize],
    feature: FeatureConfig,
    train_cfg: &TrainConfig,
) -> Result<(IdClassifier, Vec<f64>), ModelError> {
    if hidden.is_empty() || hidden.contains(&0) {
        return Err(ModelError::Config(
            "hidden layer widths must be positive and non-empty".to_string(),
        ));
    }
    for (key, clips) in data {
        if clips.is_empty() {
            return Err(ModelError::Config(format!("machine {key} has no clips")));
        }
    }
    let id_index: Vec<MachineKey> = match &mode {
        ClassifierMode::WithinType => {
            let types: std::collections::BTreeSet<&str> =
                data.keys().map(|k| k.machine_type.as_str()).collect();
            if types.len() > 1 {
                return Err(ModelError::Config(format!(
                    "within-type training got machines of {} types: {types:?}",
                    types.len()
                )));
            }
            data.keys().cloned().collect()
        }
        ClassifierMode::OutlierExposed { target_type } => {
            let targets: Vec<MachineKey> = data
                .keys()
                .filter(|k| &k.machine_type == target_type)
                .cloned()
                .collect();
            if targets.is_empty() {
                return Err(ModelError::Config(format!(
                    "no machines of target type '{target_type}'"
                )));
            }
            if targets.len() == data.len() {
                return Err(ModelError::Config(format!(
                    "outlier-exposed training needs clips of types other than '{target_type}'"
                )));
            }
            targets
        }
    };
    let n_classes = match &mode {
        ClassifierMode::WithinType => id_index.len(),
        ClassifierMode::OutlierExposed { .. } => id_index.len() + 1,
    };
    if n_classes < 2 {
        return Err(ModelError::Config(format!(
            "classification needs at least 2 classes, got {n_classes}"
        )));
    }

    let pipeline =
        FeaturePipeline::new(feature.clone()).map_err(|e| ModelError::Config(e.to_string()))?;
    let dim = feature.input_dim();
    let mut pooled = Array2::zeros((0, dim));
    let mut labels: Vec<usize> = Vec::new();
    for (key, clips) in data {
        let class = id_index
            .iter()
            .position(|k| k == key)
            .unwrap_or(id_index.len()); // pooled anomaly class in OE mode
        let (frames, _) = pooled_context_frames(&pipeline, clips)?;
        labels.extend(std::iter::repeat_n(class, frames.nrows()));
        pooled
            .append(Axis(0), frames.view())
            .expect("frame dimension matches pipeline config");
    }

    let mut dims = vec![dim];
    dims.extend_from_slice(hidden);
    dims.push(n_classes);
    let network = nn::init_network(
        &dims,
        &classifier_activations(dims.len() - 1),
        subseed(train_cfg.seed, "classifier/init"),
    )?;
    let cfg = TrainConfig {
        seed: subseed(train_cfg.seed, "classifier/shuffle"),
        ..*train_cfg
    };
    let (network, history) = nn::train(
        network,
        &pooled,
        Targets::Classes(&labels),
        &Loss::SoftmaxCrossEntropy,
        &cfg,
    )?;
    let model = IdClassifier::from_parts(network, id_index, mode, feature)?;
    Ok((model, history))
}

/// Directional confusion between two IDs on held-out frames.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairConfusion {
    pub a: MachineKey,
    pub b: MachineKey,
    /// Fraction of a's frames classified as b.
    pub a_as_b: f64,
    /// Fraction of b's frames classified as a.
    pub b_as_a: f64,
    /// Mean of the two directional rates.
    pub pair_confusion: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimilarityAudit {
    pub threshold: f64,
    pub pairs: Vec<PairConfusion>,
}

impl SimilarityAudit {
    pub fn flagged_pairs(&self) -> impl Iterator<Item = &PairConfusion> {
        self.pairs.iter().filter(|p| p.flagged)
    }
}

/// Pairwise confusion rates between the classifier's IDs on held-out normal
/// clips. Pairs whose mean confusion exceeds `threshold` are flagged as
/// false-positive risks. A single-ID input yields an empty report.
pub fn similarity_audit(
    clf: &IdClassifier,
    heldout: &BTreeMap<MachineKey, Vec<AudioClip>>,
    threshold: f64,
) -> Result<SimilarityAudit, ModelError> {
    let mut per_id_predictions: BTreeMap<&MachineKey, Vec<usize>> = BTreeMap::new();
    for (key, clips) in heldout {
        clf.class_of(key)?; // audit only covers known IDs
        let mut predictions = Vec::new();
        for clip in clips {
            let frames = clip_context_frames(&clf.pipeline, clip)?;
            predictions.extend(clf.frame_argmax(&frames.into_vectors())?);
        }
        per_id_predictions.insert(key, predictions);
    }
    let keys: Vec<&MachineKey> = per_id_predictions.keys().cloned().collect();
    let mut pairs = Vec::new();
    for i in 0..keys.len() {
        for j in i + 1..keys.len() {
            let (a, b) = (keys[i], keys[j]);
            let class_a = clf.class_of(a)?;
            let class_b = clf.class_of(b)?;
            let rate = |key: &MachineKey, class: usize| {
                let predictions = &per_id_predictions[key];
                predictions.iter().filter(|&&p| p == class).count() as f64
                    / predictions.len() as f64
            };
            let a_as_b = rate(a, class_b);
            let b_as_a = rate(b, class_a);
            let pair_confusion = (a_as_b + b_as_a) / 2.0;
            pairs.push(PairConfusion {
                a: a.clone(),
                b: b.clone(),
                a_as_b,
                b_as_a,
                pair_confusion,
                flagged: pair_confusion > threshold,
            });
        }
    }
    Ok(SimilarityAudit { threshold, pairs })
}
