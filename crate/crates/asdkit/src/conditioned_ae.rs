//! ID-conditioned autoencoders: one model per machine type, trained on all
//! of that type's normal clips with the machine ID supplied as a one-hot
//! block appended to the encoder input.
//!
//! Two variants:
//! - [`ConditionedVariant::ConstantTarget`]: with probability `q` a training
//!   row is paired with a deliberately wrong ID, and its reconstruction
//!   target switches to a predefined constant vector (the per-dimension
//!   training mean by default). The model learns to reconstruct a frame
//!   only under its own ID.
//! - [`ConditionedVariant::IdRegression`]: the one-hot ID is part of both
//!   input and target, and the loss adds `λ ×` the ID-block error to the
//!   feature error; anomalous frames tend to confuse the reconstructed ID.
//!
//! Scoring mirrors training: the claimed ID is appended to each context
//! frame and the score is the mean reconstruction error (plus the λ-scaled
//! ID-block error for the regression variant).

use std::collections::BTreeMap;

use ndarray::{s, Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio_io::AudioClip;
use crate::baseline_ae::{autoencoder_activations, autoencoder_dims, ArchReading};
use crate::dataset::MachineKey;
use crate::features::{FeatureConfig, FeaturePipeline};
use crate::nn::{
    self, adam_step, backward, epoch_permutation, forward, mse_loss_weighted_rows, AdamState,
    Loss, Network, Targets, TrainConfig,
};
use crate::pipeline::{
    append_one_hot, clip_context_frames, one_hot, pooled_context_frames, subseed, ModelError,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionedVariant {
    ConstantTarget,
    IdRegression,
}

/// Wrong-ID reconstruction target for the constant-target variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ConstantPolicy {
    /// Per-dimension mean of the training features: achievable, so the
    /// mismatch objective stays bounded.
    #[default]
    Mean,
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionedConfig {
    pub variant: ConditionedVariant,
    /// Probability `q` of substituting a wrong ID for a training row
    /// (constant-target variant).
    pub mismatch_probability: f64,
    /// Weight `λ` of the ID-block reconstruction error (ID-regression
    /// variant).
    pub lambda: f64,
    pub constant: ConstantPolicy,
    /// Loss weight of mismatch rows relative to matched rows. 1 keeps the
    /// two objectives balanced as trained by default.
    pub mismatch_weight: f64,
    pub reading: ArchReading,
}

impl Default for ConditionedConfig {
    fn default() -> Self {
        ConditionedConfig {
            variant: ConditionedVariant::ConstantTarget,
            mismatch_probability: 0.5,
            lambda: 1.0,
            constant: ConstantPolicy::Mean,
            mismatch_weight: 1.0,
            reading: ArchReading::FourPerHalf,
        }
    }
}

impl ConditionedConfig {
    fn validate(&self) -> Result<(), ModelError> {
        if !(0.0..=1.0).contains(&self.mismatch_probability) {
            return Err(ModelError::Config(format!(
                "mismatch probability {} must lie in [0, 1]",
                self.mismatch_probability
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(ModelError::Config(format!(
                "lambda {} must be finite and nonnegative",
                self.lambda
            )));
        }
        if !(self.mismatch_weight >= 0.0 && self.mismatch_weight.is_finite()) {
            return Err(ModelError::Config(format!(
                "mismatch weight {} must be finite and nonnegative",
                self.mismatch_weight
            )));
        }
        Ok(())
    }
}

/// A trained ID-conditioned autoencoder for one machine type.
pub struct ConditionedAeModel {
    network: Network,
    variant: ConditionedVariant,
    id_index: Vec<MachineKey>,
    constant_vector: Option<Array1<f64>>,
    lambda: f64,
    mismatch_probability: f64,
    pipeline: FeaturePipeline,
}

impl ConditionedAeModel {
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        network: Network,
        variant: ConditionedVariant,
        id_index: Vec<MachineKey>,
        constant_vector: Option<Array1<f64>>,
        lambda: f64,
        mismatch_probability: f64,
        feature: FeatureConfig,
    ) -> Result<Self, ModelError> {
        if id_index.is_empty() {
            return Err(ModelError::Config("id index is empty".to_string()));
        }
        let dim = feature.input_dim();
        let k = id_index.len();
        let (want_in, want_out) = match variant {
            ConditionedVariant::ConstantTarget => (dim + k, dim),
            ConditionedVariant::IdRegression => (dim + k, dim + k),
        };
        if network.input_dim() != want_in || network.output_dim() != want_out {
            return Err(ModelError::Config(format!(
                "network is {}→{} but the variant needs {want_in}→{want_out}",
                network.input_dim(),
                network.output_dim()
            )));
        }
        if variant == ConditionedVariant::ConstantTarget {
            match &constant_vector {
                Some(c) if c.len() == dim => {}
                Some(c) => {
                    return Err(ModelError::Config(format!(
                        "constant vector has {} dims, features have {dim}",
                        c.len()
                    )))
                }
                None => {
                    return Err(ModelError::Config(
                        "constant-target model needs its constant vector".to_string(),
                    ))
                }
            }
        }
        let pipeline =
            FeaturePipeline::new(feature).map_err(|e| ModelError::Config(e.to_string()))?;
        Ok(ConditionedAeModel {
            network,
            variant,
            id_index,
            constant_vector,
            lambda,
            mismatch_probability,
            pipeline,
        })
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn variant(&self) -> ConditionedVariant {
        self.variant
    }

    pub fn id_index(&self) -> &[MachineKey] {
        &self.id_index
    }

    pub fn machine_type(&self) -> &str {
        &self.id_index[0].machine_type
    }

    pub fn constant_vector(&self) -> Option<&Array1<f64>> {
        self.constant_vector.as_ref()
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn mismatch_probability(&self) -> f64 {
        self.mismatch_probability
    }

    pub fn feature_config(&self) -> &FeatureConfig {
        self.pipeline.config()
    }

    fn class_of(&self, key: &MachineKey) -> Result<usize, ModelError> {
        self.id_index
            .iter()
            .position(|k| k == key)
            .ok_or_else(|| ModelError::UnknownId(key.to_string()))
    }

    /// Per-frame score for feature rows conditioned on class index `class`.
    pub fn frame_scores(
        &self,
        frames: &Array2<f64>,
        class: usize,
    ) -> Result<Vec<f64>, ModelError> {
        let k = self.id_index.len();
        let inputs = append_one_hot(frames, class, k);
        let pass = forward(&self.network, &inputs)?;
        let d = frames.ncols();
        let out = pass.output();
        let scores = match self.variant {
            ConditionedVariant::ConstantTarget => {
                let diff = out - frames;
                diff.outer_iter()
                    .map(|row| row.iter().map(|v| v * v).sum())
                    .collect()
            }
            ConditionedVariant::IdRegression => {
                let target_id = one_hot(class, k);
                (0..frames.nrows())
                    .map(|i| {
                        let feature_err: f64 = (0..d)
                            .map(|c| {
                                let diff = out[[i, c]] - frames[[i, c]];
                                diff * diff
                            })
                            .sum();
                        let id_err: f64 = (0..k)
                            .map(|c| {
                                let diff = out[[i, d + c]] - target_id[c];
                                diff * diff
                            })
                            .sum();
                        feature_err + self.lambda * id_err
                    })
                    .collect()
            }
        };
        Ok(scores)
    }

    /// Anomaly score for a clip claimed to be `claimed`: mean per-frame
    /// score under that conditioning.
    pub fn anomaly_score(
        &self,
        clip: &AudioClip,
        claimed: &MachineKey,
    ) -> Result<f64, ModelError> {
        let class = self.class_of(claimed)?;
        let frames = clip_context_frames(&self.pipeline, clip)?;
        let scores = self.frame_scores(&frames.into_vectors(), class)?;
        Ok(scores.iter().sum::<f64>() / scores.len() as f64)
    }
}

struct PooledFrames {
    rows: Array2<f64>,
    row_class: Vec<usize>,
    id_index: Vec<MachineKey>,
}

fn pool_by_id(
    data: &BTreeMap<MachineKey, Vec<AudioClip>>,
    pipeline: &FeaturePipeline,
) -> Result<PooledFrames, ModelError> {
    if data.is_empty() {
        return Err(ModelError::NoClips);
    }
    let types: std::collections::BTreeSet<&str> =
        data.keys().map(|k| k.machine_type.as_str()).collect();
    if types.len() > 1 {
        return Err(ModelError::Config(format!(
            "conditioned training got machines of {} types: {types:?}",
            types.len()
        )));
    }
    let id_index: Vec<MachineKey> = data.keys().cloned().collect();
    let dim = pipeline.config().input_dim();
    let mut rows = Array2::zeros((0, dim));
    let mut row_class = Vec::new();
    for (class, (_, clips)) in data.iter().enumerate() {
        let (frames, _) = pooled_context_frames(pipeline, clips)?;
        row_class.extend(std::iter::repeat_n(class, frames.nrows()));
        rows.append(Axis(0), frames.view())
            .expect("frame dimension matches pipeline config");
    }
    Ok(PooledFrames {
        rows,
        row_class,
        id_index,
    })
}

/// Trains an ID-conditioned autoencoder on one machine type's normal clips.
/// A single-ID map is accepted (conditioning is vacuous then; the mismatch
/// path never fires).
pub fn train_conditioned_ae(
    data: &BTreeMap<MachineKey, Vec<AudioClip>>,
    cond: &ConditionedConfig,
    feature: FeatureConfig,
    train_cfg: &TrainConfig,
) -> Result<(ConditionedAeModel, Vec<f64>), ModelError> {
    cond.validate()?;
    let pipeline =
        FeaturePipeline::new(feature.clone()).map_err(|e| ModelError::Config(e.to_string()))?;
    let pooled = pool_by_id(data, &pipeline)?;
    let d = feature.input_dim();
    let k = pooled.id_index.len();

    match cond.variant {
        ConditionedVariant::IdRegression => {
            let mut inputs = Array2::zeros((pooled.rows.nrows(), d + k));
            inputs.slice_mut(s![.., ..d]).assign(&pooled.rows);
            for (i, &class) in pooled.row_class.iter().enumerate() {
                inputs[[i, d + class]] = 1.0;
            }
            let dims = autoencoder_dims(d + k, d + k, cond.reading);
            let network = nn::init_network(
                &dims,
                &autoencoder_activations(dims.len() - 1),
                subseed(train_cfg.seed, "conditioned/init"),
            )?;
            let mut col_weights = Array1::ones(d + k);
            col_weights.slice_mut(s![d..]).fill(cond.lambda);
            let cfg = TrainConfig {
                seed: subseed(train_cfg.seed, "conditioned/shuffle"),
                ..*train_cfg
            };
            let (network, history) = nn::train(
                network,
                &inputs,
                Targets::Dense(&inputs),
                &Loss::ColumnWeightedMse(col_weights),
                &cfg,
            )?;
            let model = ConditionedAeModel::from_parts(
                network,
                cond.variant,
                pooled.id_index,
                None,
                cond.lambda,
                cond.mismatch_probability,
                feature,
            )?;
            Ok((model, history))
        }
        ConditionedVariant::ConstantTarget => {
            let constant = match cond.constant {
                ConstantPolicy::Mean => pooled.rows.mean_axis(Axis(0)).expect("rows non-empty"),
                ConstantPolicy::Zero => Array1::zeros(d),
            };
            let dims = autoencoder_dims(d + k, d, cond.reading);
            let mut network = nn::init_network(
                &dims,
                &autoencoder_activations(dims.len() - 1),
                subseed(train_cfg.seed, "conditioned/init"),
            )?;
            if train_cfg.batch_size == 0 {
                return Err(ModelError::Config("batch_size must be positive".to_string()));
            }

            let n = pooled.rows.nrows();
            let mut state = AdamState::new(&network, train_cfg.learning_rate);
            let mut mismatch_rng =
                ChaCha8Rng::seed_from_u64(subseed(train_cfg.seed, "conditioned/mismatch"));
            let mut shuffle_rng =
                ChaCha8Rng::seed_from_u64(subseed(train_cfg.seed, "conditioned/shuffle"));
            let mut history = Vec::with_capacity(train_cfg.epochs);

            for _ in 0..train_cfg.epochs {
                // Resample the ID conditioning: each row keeps its own ID and
                // feature target, or (with probability q) gets a wrong ID and
                // the constant vector as target.
                let mut inputs = Array2::zeros((n, d + k));
                inputs.slice_mut(s![.., ..d]).assign(&pooled.rows);
                let mut targets = pooled.rows.clone();
                let mut row_weights = Array1::ones(n);
                for i in 0..n {
                    let true_class = pooled.row_class[i];
                    let mismatch =
                        k >= 2 && mismatch_rng.gen::<f64>() < cond.mismatch_probability;
                    if mismatch {
                        let mut wrong = mismatch_rng.gen_range(0..k - 1);
                        if wrong >= true_class {
                            wrong += 1;
                        }
                        inputs[[i, d + wrong]] = 1.0;
                        targets.row_mut(i).assign(&constant);
                        row_weights[i] = cond.mismatch_weight;
                    } else {
                        inputs[[i, d + true_class]] = 1.0;
                    }
                }

                let order = epoch_permutation(&mut shuffle_rng, n);
                let mut epoch_loss = 0.0;
                for batch_indices in order.chunks(train_cfg.batch_size) {
                    let batch = inputs.select(Axis(0), batch_indices);
                    let batch_targets = targets.select(Axis(0), batch_indices);
                    let batch_weights = Array1::from_iter(
                        batch_indices.iter().map(|&i| row_weights[i]),
                    );
                    let pass = forward(&network, &batch)?;
                    let (loss, loss_grad) =
                        mse_loss_weighted_rows(pass.output(), &batch_targets, &batch_weights)?;
                    let grads = backward(&network, &pass, &loss_grad)?;
                    adam_step(&mut network, &grads, &mut state)?;
                    epoch_loss += loss * batch_indices.len() as f64;
                }
                history.push(epoch_loss / n as f64);
            }

            let model = ConditionedAeModel::from_parts(
                network,
                cond.variant,
                pooled.id_index,
                Some(constant),
                cond.lambda,
                cond.mismatch_probability,
                feature,
            )?;
            Ok((model, history))
        }
    }
}
