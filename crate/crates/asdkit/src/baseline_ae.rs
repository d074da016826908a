//! The autoencoder baseline: one model per machine type/ID, trained on that
//! machine's normal sounds only, scoring a clip by the mean squared
//! reconstruction error of its context frames.
//!
//! The default architecture is four weight layers per half — encoder
//! `input→128→128→128→8`, decoder `8→128→128→128→input` — with ReLU after
//! every layer except the decoder output. [`ArchReading::FivePerHalf`]
//! selects the wider reading with an extra 128-unit hidden layer per half.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::audio_io::AudioClip;
use crate::dataset::MachineKey;
use crate::features::{FeatureConfig, FeaturePipeline};
use crate::nn::{self, Activation, Loss, Network, Targets, TrainConfig};
use crate::pipeline::{clip_context_frames, pooled_context_frames, subseed, ModelError};

pub const HIDDEN_DIM: usize = 128;
pub const BOTTLENECK_DIM: usize = 8;

/// How many weight layers each autoencoder half gets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ArchReading {
    /// `input→128→128→128→8` per half.
    #[default]
    FourPerHalf,
    /// `input→128→128→128→128→8` per half.
    FivePerHalf,
}

/// Layer sizes for an autoencoder with the given input width.
pub fn baseline_dims(input_dim: usize, reading: ArchReading) -> Vec<usize> {
    autoencoder_dims(input_dim, input_dim, reading)
}

/// Autoencoder layer sizes with independent input/output widths (the
/// conditioned variants widen one side).
pub fn autoencoder_dims(input_dim: usize, output_dim: usize, reading: ArchReading) -> Vec<usize> {
    let hidden_per_half = match reading {
        ArchReading::FourPerHalf => 3,
        ArchReading::FivePerHalf => 4,
    };
    let mut dims = vec![input_dim];
    dims.extend(std::iter::repeat_n(HIDDEN_DIM, hidden_per_half));
    dims.push(BOTTLENECK_DIM);
    dims.extend(std::iter::repeat_n(HIDDEN_DIM, hidden_per_half));
    dims.push(output_dim);
    dims
}

/// ReLU after every layer except the last (the decoder output).
pub fn autoencoder_activations(n_layers: usize) -> Vec<Activation> {
    let mut acts = vec![Activation::Relu; n_layers];
    *acts.last_mut().unwrap() = Activation::Identity;
    acts
}

/// Builds the (untrained) baseline autoencoder network.
pub fn build_baseline_network(
    input_dim: usize,
    reading: ArchReading,
    seed: u64,
) -> Result<Network, ModelError> {
    let dims = baseline_dims(input_dim, reading);
    let acts = autoencoder_activations(dims.len() - 1);
    Ok(nn::init_network(&dims, &acts, seed)?)
}

/// A trained per-machine autoencoder with its feature front end.
pub struct AeModel {
    network: Network,
    machine: MachineKey,
    reading: ArchReading,
    pipeline: FeaturePipeline,
}

impl AeModel {
    /// Assembles a model from persisted parts, checking that the network
    /// width matches the feature configuration.
    pub fn from_parts(
        network: Network,
        machine: MachineKey,
        feature: FeatureConfig,
        reading: ArchReading,
    ) -> Result<Self, ModelError> {
        let dim = feature.input_dim();
        if network.input_dim() != dim || network.output_dim() != dim {
            return Err(ModelError::Config(format!(
                "network is {}→{} but the feature config produces {dim}-dim frames",
                network.input_dim(),
                network.output_dim()
            )));
        }
        let pipeline = FeaturePipeline::new(feature)
            .map_err(|e| ModelError::Config(e.to_string()))?;
        Ok(AeModel {
            network,
            machine,
            reading,
            pipeline,
        })
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn machine(&self) -> &MachineKey {
        &self.machine
    }

    pub fn reading(&self) -> ArchReading {
        self.reading
    }

    pub fn feature_config(&self) -> &FeatureConfig {
        self.pipeline.config()
    }

    /// Squared l2 reconstruction error of each context-frame row.
    pub fn reconstruction_errors(&self, rows: &Array2<f64>) -> Result<Vec<f64>, ModelError> {
        let pass = nn::forward(&self.network, rows)?;
        let diff = pass.output() - rows;
        Ok(diff
            .outer_iter()
            .map(|row| row.iter().map(|d| d * d).sum())
            .collect())
    }

    /// Anomaly score: mean squared reconstruction error over the clip's
    /// valid context frames. Nonnegative and deterministic.
    pub fn anomaly_score(&self, clip: &AudioClip) -> Result<f64, ModelError> {
        let frames = clip_context_frames(&self.pipeline, clip)?;
        let errors = self.reconstruction_errors(&frames.into_vectors())?;
        Ok(errors.iter().sum::<f64>() / errors.len() as f64)
    }
}

/// Trains the baseline autoencoder for one machine on its normal clips.
/// Returns the model and the per-epoch training loss.
pub fn train_baseline(
    clips: &[AudioClip],
    machine: MachineKey,
    feature: FeatureConfig,
    reading: ArchReading,
    train_cfg: &TrainConfig,
) -> Result<(AeModel, Vec<f64>), ModelError> {
    let pipeline = FeaturePipeline::new(feature.clone())
        .map_err(|e| ModelError::Config(e.to_string()))?;
    let (pooled, _) = pooled_context_frames(&pipeline, clips)?;
    let network = build_baseline_network(
        feature.input_dim(),
        reading,
        subseed(train_cfg.seed, "baseline/init"),
    )?;
    let cfg = TrainConfig {
        seed: subseed(train_cfg.seed, "baseline/shuffle"),
        ..*train_cfg
    };
    let (network, history) = nn::train(network, &pooled, Targets::Dense(&pooled), &Loss::Mse, &cfg)?;
    let model = AeModel::from_parts(network, machine, feature, reading)?;
    Ok((model, history))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Normal,
    Anomaly,
}

/// Threshold decision: anomalous only when the score strictly exceeds φ.
pub fn decide(score: f64, threshold: f64) -> Decision {
    if score > threshold {
        Decision::Anomaly
    } else {
        Decision::Normal
    }
}
