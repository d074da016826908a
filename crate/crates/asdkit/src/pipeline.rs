//! Plumbing shared by the three model families: clip-to-frame extraction
//! with per-clip error reporting, one-hot encoding, and seed derivation.

use ndarray::{Array1, Array2, Axis};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::audio_io::AudioClip;
use crate::features::{ContextFrames, FeatureError, FeaturePipeline};
use crate::nn::NnError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("feature extraction failed for clip '{clip}': {source}")]
    Feature {
        clip: String,
        #[source]
        source: FeatureError,
    },
    #[error("clip '{clip}' is too short to yield a context frame")]
    TooShort { clip: String },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("no training clips provided")]
    NoClips,
    #[error("machine '{0}' is not in the model's id index")]
    UnknownId(String),
    #[error("invalid model configuration: {0}")]
    Config(String),
}

/// Derives an independent stream seed from a base seed and a role tag, so
/// initialization, shuffling, and per-machine work never share RNG streams.
pub fn subseed(seed: u64, tag: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(tag.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Context frames for one clip; an empty result (clip shorter than the
/// context window) is an error naming the clip.
pub fn clip_context_frames(
    pipeline: &FeaturePipeline,
    clip: &AudioClip,
) -> Result<ContextFrames, ModelError> {
    let name = clip.source_name().to_string();
    let frames = pipeline.context_frames(clip).map_err(|source| match source {
        FeatureError::ClipTooShort { .. } => ModelError::TooShort { clip: name.clone() },
        other => ModelError::Feature {
            clip: name.clone(),
            source: other,
        },
    })?;
    if frames.is_empty() {
        return Err(ModelError::TooShort { clip: name });
    }
    Ok(frames)
}

/// Pools every clip's context frames into one training matrix, preserving
/// clip order. Also returns the per-clip row counts.
pub fn pooled_context_frames(
    pipeline: &FeaturePipeline,
    clips: &[AudioClip],
) -> Result<(Array2<f64>, Vec<usize>), ModelError> {
    if clips.is_empty() {
        return Err(ModelError::NoClips);
    }
    let dim = pipeline.config().input_dim();
    let mut pooled = Array2::zeros((0, dim));
    let mut counts = Vec::with_capacity(clips.len());
    for clip in clips {
        let frames = clip_context_frames(pipeline, clip)?;
        counts.push(frames.n_rows());
        pooled
            .append(Axis(0), frames.vectors())
            .expect("context frame dimension matches the pipeline config");
    }
    Ok((pooled, counts))
}

pub fn one_hot(index: usize, classes: usize) -> Array1<f64> {
    let mut v = Array1::zeros(classes);
    v[index] = 1.0;
    v
}

/// Widens each row of `rows` with a one-hot block for `index`.
pub fn append_one_hot(rows: &Array2<f64>, index: usize, classes: usize) -> Array2<f64> {
    let mut out = Array2::zeros((rows.nrows(), rows.ncols() + classes));
    out.slice_mut(ndarray::s![.., ..rows.ncols()]).assign(rows);
    for mut row in out.outer_iter_mut() {
        row[rows.ncols() + index] = 1.0;
    }
    out
}

/// Mean of the squared l2 row differences between two equal-shape matrices.
pub fn mean_row_squared_error(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let diff = a - b;
    diff.iter().map(|d| d * d).sum::<f64>() / a.nrows() as f64
}
