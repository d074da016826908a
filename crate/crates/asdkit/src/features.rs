//! Log-mel feature extraction.
//!
//! A waveform becomes a power spectrogram ([`stft_power`]), then a log-mel
//! spectrogram ([`log_mel`] through a [`MelFilterbank`]), then a matrix of
//! context frames ([`frame_context`]): each log-mel column concatenated with
//! its `P` neighbors on each side. Context frames are the input vectors for
//! every model in the toolkit; with the default 64 mel bands and `P = 2`
//! their dimension is 320.
//!
//! Edge frames without full context are dropped, not padded, so a `T`-frame
//! spectrogram yields `T - 2P` context rows. Per-clip scores later average
//! over those valid rows.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio_io::AudioClip;

/// Floor applied to mel energies before the log, pinning the silence value
/// at `10·log10(1e-10) = -100` dB.
pub const LOG_FLOOR: f64 = 1e-10;

const CACHE_MAGIC: &[u8; 8] = b"ASDFEAT1";

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("invalid feature configuration: {0}")]
    Config(String),
    #[error("clip '{clip}' is shorter than one frame ({samples} < {frame_length} samples)")]
    ClipTooShort {
        clip: String,
        samples: usize,
        frame_length: usize,
    },
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("clip '{clip}' has sample rate {found} Hz, feature config expects {expected} Hz")]
    SampleRate {
        clip: String,
        found: u32,
        expected: u32,
    },
    #[error("feature cache {path}: {detail}")]
    Cache { path: String, detail: String },
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
}

/// Analysis window applied to each frame before the FFT.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Window {
    #[default]
    Hann,
    Rectangular,
}

impl Window {
    fn taper(self, frame_length: usize) -> Array1<f64> {
        match self {
            Window::Hann => Array1::from_shape_fn(frame_length, |n| {
                0.5 - 0.5 * (std::f64::consts::TAU * n as f64 / frame_length as f64).cos()
            }),
            Window::Rectangular => Array1::ones(frame_length),
        }
    }
}

/// Short-time Fourier transform parameters. The FFT size equals the frame
/// length (no zero padding).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StftConfig {
    pub frame_length: usize,
    pub hop_length: usize,
    pub window: Window,
}

impl StftConfig {
    pub fn new(frame_length: usize, hop_length: usize, window: Window) -> Result<Self, FeatureError> {
        if frame_length == 0 || !frame_length.is_power_of_two() {
            return Err(FeatureError::Config(format!(
                "frame_length must be a power of two, got {frame_length}"
            )));
        }
        if hop_length == 0 || hop_length > frame_length {
            return Err(FeatureError::Config(format!(
                "hop_length must satisfy 0 < hop <= frame_length, got {hop_length}"
            )));
        }
        Ok(StftConfig {
            frame_length,
            hop_length,
            window,
        })
    }

    pub fn fft_size(&self) -> usize {
        self.frame_length
    }

    /// Number of one-sided spectrum bins, `fft_size/2 + 1`.
    pub fn n_bins(&self) -> usize {
        self.frame_length / 2 + 1
    }

    /// Frame count for a clip of `samples` samples.
    pub fn n_frames(&self, samples: usize) -> usize {
        if samples < self.frame_length {
            0
        } else {
            1 + (samples - self.frame_length) / self.hop_length
        }
    }
}

impl Default for StftConfig {
    fn default() -> Self {
        StftConfig {
            frame_length: 1024,
            hop_length: 512,
            window: Window::Hann,
        }
    }
}

/// One-sided power spectrogram: `|DFT(window ⊙ frame)|²` per frame,
/// `(fft_size/2 + 1) × T`.
pub fn stft_power(clip: &AudioClip, cfg: &StftConfig) -> Result<Array2<f64>, FeatureError> {
    if clip.len() < cfg.frame_length {
        return Err(FeatureError::ClipTooShort {
            clip: clip.source_name().to_string(),
            samples: clip.len(),
            frame_length: cfg.frame_length,
        });
    }
    let fft = FftPlanner::new().plan_fft_forward(cfg.fft_size());
    stft_power_with(clip, cfg, fft.as_ref())
}

fn stft_power_with(
    clip: &AudioClip,
    cfg: &StftConfig,
    fft: &dyn Fft<f64>,
) -> Result<Array2<f64>, FeatureError> {
    let n = cfg.fft_size();
    let n_frames = cfg.n_frames(clip.len());
    let window = cfg.window.taper(n);
    let mut power = Array2::zeros((cfg.n_bins(), n_frames));
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    let samples = clip.samples();
    for t in 0..n_frames {
        let start = t * cfg.hop_length;
        for (i, slot) in buf.iter_mut().enumerate() {
            *slot = Complex::new(samples[start + i] * window[i], 0.0);
        }
        fft.process(&mut buf);
        for (k, value) in buf.iter().take(cfg.n_bins()).enumerate() {
            power[[k, t]] = value.norm_sqr();
        }
    }
    Ok(power)
}

/// HTK mel scale.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filterbank, `n_mels × (fft_size/2 + 1)`, peak height 1.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    weights: Array2<f64>,
    centers_hz: Vec<f64>,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub sample_rate: u32,
}

impl MelFilterbank {
    pub fn weights(&self) -> ArrayView2<'_, f64> {
        self.weights.view()
    }

    /// Peak frequency of each filter in Hz, strictly increasing.
    pub fn centers_hz(&self) -> &[f64] {
        &self.centers_hz
    }
}

/// Builds `n_mels` triangular filters with centers equally spaced on the mel
/// scale between `f_min` and `f_max`.
pub fn mel_filterbank(
    n_mels: usize,
    cfg: &StftConfig,
    sample_rate: u32,
    f_min: f64,
    f_max: f64,
) -> Result<MelFilterbank, FeatureError> {
    if n_mels == 0 {
        return Err(FeatureError::Config("n_mels must be at least 1".into()));
    }
    let nyquist = sample_rate as f64 / 2.0;
    if !(0.0..nyquist).contains(&f_min) || f_max <= f_min || f_max > nyquist {
        return Err(FeatureError::Config(format!(
            "mel band [{f_min}, {f_max}] Hz must satisfy 0 <= f_min < f_max <= {nyquist}"
        )));
    }
    let n_bins = cfg.n_bins();
    let mel_lo = hz_to_mel(f_min);
    let mel_hi = hz_to_mel(f_max);
    // n_mels + 2 edge points; filter i spans points i .. i+2 with its peak at i+1.
    let edges_hz: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bin_hz: Vec<f64> = (0..n_bins)
        .map(|k| k as f64 * sample_rate as f64 / cfg.fft_size() as f64)
        .collect();

    let mut weights = Array2::zeros((n_mels, n_bins));
    for m in 0..n_mels {
        let (left, center, right) = (edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]);
        let mut any_positive = false;
        for (k, &f) in bin_hz.iter().enumerate() {
            let up = (f - left) / (center - left);
            let down = (right - f) / (right - center);
            let w = up.min(down).max(0.0);
            if w > 0.0 {
                any_positive = true;
            }
            weights[[m, k]] = w;
        }
        if !any_positive {
            return Err(FeatureError::Config(format!(
                "mel filter {m} covers no FFT bin; layout of {n_mels} filters over \
                 [{f_min}, {f_max}] Hz at fft size {} is infeasible",
                cfg.fft_size()
            )));
        }
    }
    Ok(MelFilterbank {
        weights,
        centers_hz: edges_hz[1..=n_mels].to_vec(),
        n_mels,
        f_min,
        f_max,
        sample_rate,
    })
}

/// Log-mel spectrogram, `F × T`, in dB-like units.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    values: Array2<f64>,
}

impl FeatureMatrix {
    pub fn from_values(values: Array2<f64>) -> Self {
        FeatureMatrix { values }
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    /// Mel band count `F`.
    pub fn n_mels(&self) -> usize {
        self.values.nrows()
    }

    /// Frame count `T`.
    pub fn n_frames(&self) -> usize {
        self.values.ncols()
    }

    pub fn column(&self, t: usize) -> ArrayView1<'_, f64> {
        self.values.column(t)
    }
}

/// `10·log10(max(weights · power, 1e-10))`.
pub fn log_mel(power: &Array2<f64>, fb: &MelFilterbank) -> Result<FeatureMatrix, FeatureError> {
    if power.nrows() != fb.weights.ncols() {
        return Err(FeatureError::DimMismatch(format!(
            "power spectrogram has {} bins but the filterbank expects {}",
            power.nrows(),
            fb.weights.ncols()
        )));
    }
    let mut mel = fb.weights.dot(power);
    mel.mapv_inplace(|e| 10.0 * e.max(LOG_FLOOR).log10());
    Ok(FeatureMatrix::from_values(mel))
}

/// Context frames: row `i` is the concatenation of log-mel columns
/// `i .. i + 2P` (center frame `i + P`), one row per frame with full context.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextFrames {
    vectors: Array2<f64>,
    pub n_mels: usize,
    pub radius: usize,
}

impl ContextFrames {
    pub fn vectors(&self) -> ArrayView2<'_, f64> {
        self.vectors.view()
    }

    pub fn into_vectors(self) -> Array2<f64> {
        self.vectors
    }

    pub fn n_rows(&self) -> usize {
        self.vectors.nrows()
    }

    /// Row dimension `F(2P+1)`.
    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    /// True when the source spectrogram had `T <= 2P` frames: the clip was
    /// too short for any full-context row.
    pub fn is_empty(&self) -> bool {
        self.vectors.nrows() == 0
    }
}

/// Concatenates each log-mel column with `radius` neighbors on each side.
/// Edge frames are dropped; a spectrogram with `T <= 2·radius` frames yields
/// an empty (zero-row) result.
pub fn frame_context(x: &FeatureMatrix, radius: usize) -> ContextFrames {
    let f = x.n_mels();
    let t = x.n_frames();
    let dim = f * (2 * radius + 1);
    let rows = t.saturating_sub(2 * radius);
    let mut vectors = Array2::zeros((rows, dim));
    for i in 0..rows {
        for b in 0..(2 * radius + 1) {
            let col = x.column(i + b);
            vectors
                .row_mut(i)
                .slice_mut(ndarray::s![b * f..(b + 1) * f])
                .assign(&col);
        }
    }
    ContextFrames {
        vectors,
        n_mels: f,
        radius,
    }
}

/// Full front-end settings, shared by models, manifests and the CLI config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    pub frame_length: usize,
    pub hop_length: usize,
    pub window: Window,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub sample_rate: u32,
    /// Context radius `P`.
    pub context: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            frame_length: 1024,
            hop_length: 512,
            window: Window::Hann,
            n_mels: 64,
            f_min: 0.0,
            f_max: 8000.0,
            sample_rate: 16000,
            context: 2,
        }
    }
}

impl FeatureConfig {
    pub fn stft(&self) -> Result<StftConfig, FeatureError> {
        StftConfig::new(self.frame_length, self.hop_length, self.window)
    }

    /// Model input dimension `F(2P+1)`.
    pub fn input_dim(&self) -> usize {
        self.n_mels * (2 * self.context + 1)
    }
}

/// A validated front end: planned FFT plus filterbank, reusable across clips.
/// Extraction is pure, so one pipeline may be shared across threads.
pub struct FeaturePipeline {
    config: FeatureConfig,
    stft: StftConfig,
    filterbank: MelFilterbank,
    fft: Arc<dyn Fft<f64>>,
}

impl FeaturePipeline {
    pub fn new(config: FeatureConfig) -> Result<Self, FeatureError> {
        let stft = config.stft()?;
        let filterbank = mel_filterbank(
            config.n_mels,
            &stft,
            config.sample_rate,
            config.f_min,
            config.f_max,
        )?;
        let fft = FftPlanner::new().plan_fft_forward(stft.fft_size());
        Ok(FeaturePipeline {
            config,
            stft,
            filterbank,
            fft,
        })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.config
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.filterbank
    }

    pub fn feature_matrix(&self, clip: &AudioClip) -> Result<FeatureMatrix, FeatureError> {
        if clip.sample_rate() != self.config.sample_rate {
            return Err(FeatureError::SampleRate {
                clip: clip.source_name().to_string(),
                found: clip.sample_rate(),
                expected: self.config.sample_rate,
            });
        }
        let power = stft_power_with(clip, &self.stft, self.fft.as_ref())?;
        log_mel(&power, &self.filterbank)
    }

    pub fn context_frames(&self, clip: &AudioClip) -> Result<ContextFrames, FeatureError> {
        Ok(frame_context(&self.feature_matrix(clip)?, self.config.context))
    }
}

/// Writes a log-mel matrix to the flat binary cache format: magic, config
/// hash, `F`/`T`/`P` header, then row-major little-endian f64 values.
pub fn write_feature_cache(
    path: impl AsRef<Path>,
    features: &FeatureMatrix,
    context: usize,
    config_hash: &str,
) -> Result<(), FeatureError> {
    let path = path.as_ref();
    let io_err = |e| FeatureError::Io {
        path: path.display().to_string(),
        source: e,
    };
    let file = File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    let inner = |w: &mut BufWriter<File>| -> io::Result<()> {
        w.write_all(CACHE_MAGIC)?;
        w.write_u32::<LittleEndian>(config_hash.len() as u32)?;
        w.write_all(config_hash.as_bytes())?;
        w.write_u32::<LittleEndian>(features.n_mels() as u32)?;
        w.write_u32::<LittleEndian>(features.n_frames() as u32)?;
        w.write_u32::<LittleEndian>(context as u32)?;
        for value in features.values().iter() {
            w.write_f64::<LittleEndian>(*value)?;
        }
        w.flush()
    };
    inner(&mut w).map_err(io_err)
}

/// Reads a cached log-mel matrix, verifying the config hash when given.
/// Returns the matrix and the context radius it was written for.
pub fn read_feature_cache(
    path: impl AsRef<Path>,
    expected_hash: Option<&str>,
) -> Result<(FeatureMatrix, usize), FeatureError> {
    let path = path.as_ref();
    let cache_err = |detail: String| FeatureError::Cache {
        path: path.display().to_string(),
        detail,
    };
    let file = File::open(path).map_err(|e| FeatureError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|e| cache_err(format!("truncated magic: {e}")))?;
    if &magic != CACHE_MAGIC {
        return Err(cache_err("bad magic, not a feature cache".to_string()));
    }
    let hash_len = r
        .read_u32::<LittleEndian>()
        .map_err(|e| cache_err(e.to_string()))? as usize;
    let mut hash = vec![0u8; hash_len];
    r.read_exact(&mut hash)
        .map_err(|e| cache_err(format!("truncated hash: {e}")))?;
    let hash = String::from_utf8(hash).map_err(|_| cache_err("hash is not UTF-8".to_string()))?;
    if let Some(expected) = expected_hash {
        if hash != expected {
            return Err(cache_err(format!(
                "config hash mismatch: cache was built with {hash}, expected {expected}"
            )));
        }
    }
    let f = r.read_u32::<LittleEndian>().map_err(|e| cache_err(e.to_string()))? as usize;
    let t = r.read_u32::<LittleEndian>().map_err(|e| cache_err(e.to_string()))? as usize;
    let context = r.read_u32::<LittleEndian>().map_err(|e| cache_err(e.to_string()))? as usize;
    let mut values = Vec::with_capacity(f * t);
    for _ in 0..f * t {
        values.push(
            r.read_f64::<LittleEndian>()
                .map_err(|e| cache_err(format!("truncated values: {e}")))?,
        );
    }
    let values = Array2::from_shape_vec((f, t), values)
        .map_err(|e| cache_err(format!("bad shape: {e}")))?;
    Ok((FeatureMatrix::from_values(values), context))
}
