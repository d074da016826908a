//! Corpus layout, file-name grammar, synthetic corpus generation, and
//! submission CSVs.
//!
//! The on-disk grammar, pinned in one place so the toolkit runs unmodified
//! on the public machine-sound corpora:
//!
//! ```text
//! <root>/<machine_type>/<split>/<name>.wav
//!   split  = train | test
//!   name   = normal_id_NN_SSSSSSSS    labeled normal
//!          | anomaly_id_NN_SSSSSSSS   labeled anomalous
//!          | id_NN_SSSSSSSS           unlabeled (evaluation-style)
//! ```
//!
//! Training entries must be normal: an anomaly-labeled file under `train/`
//! fails the scan outright. Files with unparseable names are collected in a
//! rejects report instead of aborting.
//!
//! The synthetic generator writes corpora in this grammar: each machine ID
//! gets a distinct tone mixture plus noise at a chosen SNR, and anomalous
//! clips add one of three effects (an extra harmonic, transient clicks, or
//! a level shift). Everything derives from the spec seed, so equal specs
//! produce byte-identical trees.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use walkdir::WalkDir;

use crate::audio_io::{self, AudioClip, AudioError, PIPELINE_SAMPLE_RATE};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("dataset root '{0}' contains no recognizable clips")]
    EmptyIndex(String),
    #[error("training entry '{0}' is labeled anomalous; training data must be normal only")]
    AnomalyInTrain(String),
    #[error("synthesis spec field '{field}' is invalid: {detail}")]
    SpecInvalid { field: String, detail: String },
    #[error("submission map is empty")]
    EmptySubmission,
    #[error("{path}: line {line}: cannot parse '{content}'")]
    SubmissionParse {
        path: String,
        line: usize,
        content: String,
    },
    #[error(transparent)]
    Audio(#[from] AudioError),
}

fn io_err(path: &Path, source: io::Error) -> DatasetError {
    DatasetError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// (Machine Type, Machine ID): the unit models are trained and evaluated on.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MachineKey {
    pub machine_type: String,
    pub machine_id: u32,
}

impl MachineKey {
    pub fn new(machine_type: impl Into<String>, machine_id: u32) -> Self {
        MachineKey {
            machine_type: machine_type.into(),
            machine_id,
        }
    }
}

impl fmt::Display for MachineKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}_id_{:02}", self.machine_type, self.machine_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Condition label carried by a file name; evaluation-style files have none.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FileLabel {
    Normal,
    Anomaly,
    Unlabeled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetEntry {
    pub path: PathBuf,
    pub key: MachineKey,
    pub split: Split,
    pub label: FileLabel,
}

impl DatasetEntry {
    /// File name used in score CSVs and truth tables.
    pub fn file_name(&self) -> String {
        self.path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default()
    }
}

/// Every classified clip under a dataset root, plus the rejects report.
#[derive(Debug, Clone, Default)]
pub struct DatasetIndex {
    entries: Vec<DatasetEntry>,
    rejects: Vec<String>,
}

impl DatasetIndex {
    /// Builds an index, enforcing that no training entry is anomalous.
    pub fn new(mut entries: Vec<DatasetEntry>, rejects: Vec<String>) -> Result<Self, DatasetError> {
        for entry in &entries {
            if entry.split == Split::Train && entry.label == FileLabel::Anomaly {
                return Err(DatasetError::AnomalyInTrain(entry.path.display().to_string()));
            }
        }
        entries.sort_by(|a, b| a.path.cmp(&b.path));
        Ok(DatasetIndex { entries, rejects })
    }

    pub fn entries(&self) -> &[DatasetEntry] {
        &self.entries
    }

    pub fn rejects(&self) -> &[String] {
        &self.rejects
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn machine_keys(&self) -> BTreeSet<MachineKey> {
        self.entries.iter().map(|e| e.key.clone()).collect()
    }

    pub fn machine_types(&self) -> BTreeSet<String> {
        self.entries.iter().map(|e| e.key.machine_type.clone()).collect()
    }

    pub fn split_entries(&self, key: &MachineKey, split: Split) -> Vec<&DatasetEntry> {
        self.entries
            .iter()
            .filter(|e| &e.key == key && e.split == split)
            .collect()
    }

    pub fn keys_of_type(&self, machine_type: &str) -> BTreeSet<MachineKey> {
        self.entries
            .iter()
            .filter(|e| e.key.machine_type == machine_type)
            .map(|e| e.key.clone())
            .collect()
    }
}

/// Parses a clip file name (without directories) into label, machine ID.
fn parse_clip_name(stem: &str) -> Option<(FileLabel, u32)> {
    let (label, rest) = if let Some(rest) = stem.strip_prefix("normal_") {
        (FileLabel::Normal, rest)
    } else if let Some(rest) = stem.strip_prefix("anomaly_") {
        (FileLabel::Anomaly, rest)
    } else {
        (FileLabel::Unlabeled, stem)
    };
    let rest = rest.strip_prefix("id_")?;
    let digits: String = rest.chars().take_while(|c| c.is_ascii_digit()).collect();
    if digits.is_empty() {
        return None;
    }
    match rest.as_bytes().get(digits.len()) {
        None | Some(b'_') => digits.parse().ok().map(|id| (label, id)),
        _ => None,
    }
}

/// Walks `<root>/<type>/<split>/*.wav` and classifies every clip.
/// Unparseable WAV names go to the rejects report; an index with no entries
/// at all is an error.
pub fn scan_dataset(root: impl AsRef<Path>) -> Result<DatasetIndex, DatasetError> {
    let root = root.as_ref();
    if !root.is_dir() {
        return Err(io_err(
            root,
            io::Error::new(io::ErrorKind::NotFound, "dataset root is not a directory"),
        ));
    }
    let mut entries = Vec::new();
    let mut rejects = Vec::new();
    for item in WalkDir::new(root).sort_by_file_name() {
        let item = item.map_err(|e| DatasetError::Io {
            path: root.display().to_string(),
            source: e.into(),
        })?;
        if !item.file_type().is_file() {
            continue;
        }
        let path = item.path();
        if path.extension().and_then(|e| e.to_str()) != Some("wav") {
            continue;
        }
        let relative = path.strip_prefix(root).expect("walked file is under root");
        let components: Vec<String> = relative
            .components()
            .map(|c| c.as_os_str().to_string_lossy().into_owned())
            .collect();
        if components.len() != 3 {
            rejects.push(format!(
                "{}: expected <machine_type>/<split>/<name>.wav layout",
                path.display()
            ));
            continue;
        }
        let machine_type = components[0].clone();
        let split = match components[1].as_str() {
            "train" => Split::Train,
            "test" => Split::Test,
            other => {
                rejects.push(format!("{}: unknown split '{other}'", path.display()));
                continue;
            }
        };
        let stem = match path.file_stem().and_then(|s| s.to_str()) {
            Some(s) => s,
            None => {
                rejects.push(format!("{}: non-UTF-8 name", path.display()));
                continue;
            }
        };
        match parse_clip_name(stem) {
            Some((label, machine_id)) => entries.push(DatasetEntry {
                path: path.to_path_buf(),
                key: MachineKey::new(machine_type, machine_id),
                split,
                label,
            }),
            None => rejects.push(format!(
                "{}: file name does not match the clip grammar",
                path.display()
            )),
        }
    }
    if entries.is_empty() {
        return Err(DatasetError::EmptyIndex(root.display().to_string()));
    }
    DatasetIndex::new(entries, rejects)
}

/// What anomalous clips add on top of the normal recipe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    /// A tone at twice the ID's lowest tone frequency.
    AddedHarmonic,
    /// Short broadband clicks scattered through the clip.
    TransientClicks,
    /// The whole clip scaled by `level_shift_db`.
    LevelShift,
}

/// Tone recipe for one synthetic machine ID.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdSpec {
    pub id: u32,
    pub tones_hz: Vec<f64>,
    /// Per-tone amplitude range `[lo, hi]`, drawn per clip.
    pub amp_range: [f64; 2],
}

/// Deterministic synthetic corpus description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub machine_type: String,
    pub seed: u64,
    pub clip_seconds: f64,
    /// Signal-to-noise ratio of the tone mixture against white noise, dB.
    pub snr_db: f64,
    pub train_per_id: usize,
    pub test_normal_per_id: usize,
    pub test_anomaly_per_id: usize,
    pub anomaly: AnomalyKind,
    pub ids: Vec<IdSpec>,
    #[serde(default = "default_harmonic_amplitude")]
    pub harmonic_amplitude: f64,
    #[serde(default = "default_clicks_per_second")]
    pub clicks_per_second: f64,
    #[serde(default = "default_level_shift_db")]
    pub level_shift_db: f64,
}

fn default_harmonic_amplitude() -> f64 {
    0.15
}

fn default_clicks_per_second() -> f64 {
    4.0
}

fn default_level_shift_db() -> f64 {
    6.0
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let invalid = |field: &str, detail: String| DatasetError::SpecInvalid {
            field: field.to_string(),
            detail,
        };
        if self.machine_type.is_empty()
            || !self
                .machine_type
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
        {
            return Err(invalid(
                "machine_type",
                format!("'{}' is not a safe directory name", self.machine_type),
            ));
        }
        if !(self.clip_seconds > 0.0 && self.clip_seconds <= 60.0) {
            return Err(invalid(
                "clip_seconds",
                format!("{} must lie in (0, 60]", self.clip_seconds),
            ));
        }
        if !self.snr_db.is_finite() {
            return Err(invalid("snr_db", "must be finite".to_string()));
        }
        if !(0.0..=1.0).contains(&self.harmonic_amplitude) {
            return Err(invalid(
                "harmonic_amplitude",
                format!("{} must lie in [0, 1]", self.harmonic_amplitude),
            ));
        }
        if !(self.clicks_per_second > 0.0 && self.clicks_per_second <= 100.0) {
            return Err(invalid(
                "clicks_per_second",
                format!("{} must lie in (0, 100]", self.clicks_per_second),
            ));
        }
        if !(-24.0..=24.0).contains(&self.level_shift_db) {
            return Err(invalid(
                "level_shift_db",
                format!("{} must lie in [-24, 24]", self.level_shift_db),
            ));
        }
        let nyquist = PIPELINE_SAMPLE_RATE as f64 / 2.0;
        let mut seen = BTreeSet::new();
        for (i, id_spec) in self.ids.iter().enumerate() {
            if !seen.insert(id_spec.id) {
                return Err(invalid(
                    &format!("ids[{i}].id"),
                    format!("duplicate machine id {}", id_spec.id),
                ));
            }
            if id_spec.tones_hz.is_empty() {
                return Err(invalid(
                    &format!("ids[{i}].tones_hz"),
                    "needs at least one tone".to_string(),
                ));
            }
            for &tone in &id_spec.tones_hz {
                if !(tone > 0.0 && tone < nyquist) {
                    return Err(invalid(
                        &format!("ids[{i}].tones_hz"),
                        format!("tone {tone} Hz must lie in (0, {nyquist})"),
                    ));
                }
            }
            if self.anomaly == AnomalyKind::AddedHarmonic {
                // The anomaly doubles the lowest tone; that harmonic must
                // stay below Nyquist.
                let base = id_spec.tones_hz.iter().cloned().fold(f64::INFINITY, f64::min);
                if 2.0 * base >= nyquist {
                    return Err(invalid(
                        &format!("ids[{i}].tones_hz"),
                        format!("harmonic 2×{base} Hz would exceed the Nyquist limit {nyquist}"),
                    ));
                }
            }
            let [lo, hi] = id_spec.amp_range;
            if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
                return Err(invalid(
                    &format!("ids[{i}].amp_range"),
                    format!("[{lo}, {hi}] must satisfy 0 <= lo <= hi <= 1"),
                ));
            }
        }
        Ok(())
    }

    fn clip_samples(&self) -> usize {
        (self.clip_seconds * PIPELINE_SAMPLE_RATE as f64).round() as usize
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-clip seed derived from (spec seed, id, clip kind, index) so output
/// bytes do not depend on generation order.
fn clip_seed(base: u64, machine_id: u32, kind: u8, index: u32) -> u64 {
    let packed = ((machine_id as u64) << 40) | ((kind as u64) << 32) | index as u64;
    splitmix64(base ^ splitmix64(packed))
}

fn synthesize_clip(
    spec: &SynthSpec,
    id_spec: &IdSpec,
    anomalous: bool,
    seed: u64,
    name: &str,
) -> Result<AudioClip, DatasetError> {
    let n = spec.clip_samples();
    let sr = PIPELINE_SAMPLE_RATE as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut tones: Vec<(f64, f64, f64)> = Vec::with_capacity(id_spec.tones_hz.len());
    let [lo, hi] = id_spec.amp_range;
    for &freq in &id_spec.tones_hz {
        let amp = if lo == hi { lo } else { rng.gen_range(lo..hi) };
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        tones.push((freq, amp, phase));
    }
    if anomalous && spec.anomaly == AnomalyKind::AddedHarmonic {
        let base = id_spec.tones_hz.iter().cloned().fold(f64::INFINITY, f64::min);
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        tones.push((2.0 * base, spec.harmonic_amplitude, phase));
    }

    let signal_power: f64 = tones.iter().map(|(_, a, _)| a * a / 2.0).sum();
    let noise_sigma = (signal_power / 10f64.powf(spec.snr_db / 10.0)).sqrt();
    let noise = Normal::new(0.0, noise_sigma.max(1e-12)).expect("sigma is finite");

    let mut samples = vec![0.0f64; n];
    for (i, s) in samples.iter_mut().enumerate() {
        let t = i as f64 / sr;
        let mut v = 0.0;
        for &(freq, amp, phase) in &tones {
            v += amp * (std::f64::consts::TAU * freq * t + phase).sin();
        }
        *s = v + noise.sample(&mut rng);
    }

    if anomalous {
        match spec.anomaly {
            AnomalyKind::AddedHarmonic => {} // already in the tone set
            AnomalyKind::TransientClicks => {
                let clicks = ((spec.clicks_per_second * spec.clip_seconds).round() as usize).max(1);
                let click_len = 64.min(n);
                for _ in 0..clicks {
                    let pos = rng.gen_range(0..n.saturating_sub(click_len).max(1));
                    for j in 0..click_len {
                        let polarity = if j % 2 == 0 { 1.0 } else { -1.0 };
                        samples[pos + j] += 0.6 * polarity * (-(j as f64) / 12.0).exp();
                    }
                }
            }
            AnomalyKind::LevelShift => {
                let gain = 10f64.powf(spec.level_shift_db / 20.0);
                for s in samples.iter_mut() {
                    *s *= gain;
                }
            }
        }
    }

    // Headroom is the spec author's job; clamp so rare noise peaks still
    // quantize instead of failing the clip invariant.
    for s in samples.iter_mut() {
        *s = s.clamp(-1.0, 1.0);
    }
    Ok(AudioClip::new(samples, PIPELINE_SAMPLE_RATE, name)?)
}

/// Writes a synthetic corpus under `root` and returns its index.
/// Deterministic: equal specs produce byte-identical trees.
pub fn generate_synth_corpus(
    spec: &SynthSpec,
    root: impl AsRef<Path>,
) -> Result<DatasetIndex, DatasetError> {
    spec.validate()?;
    let root = root.as_ref();
    let train_dir = root.join(&spec.machine_type).join("train");
    let test_dir = root.join(&spec.machine_type).join("test");
    fs::create_dir_all(&train_dir).map_err(|e| io_err(&train_dir, e))?;
    fs::create_dir_all(&test_dir).map_err(|e| io_err(&test_dir, e))?;

    // Kind codes keep the per-clip seed streams of the three groups apart.
    const KIND_TRAIN: u8 = 0;
    const KIND_TEST_NORMAL: u8 = 1;
    const KIND_TEST_ANOMALY: u8 = 2;

    let mut entries = Vec::new();
    for id_spec in &spec.ids {
        let groups = [
            (KIND_TRAIN, Split::Train, FileLabel::Normal, spec.train_per_id, &train_dir),
            (KIND_TEST_NORMAL, Split::Test, FileLabel::Normal, spec.test_normal_per_id, &test_dir),
            (KIND_TEST_ANOMALY, Split::Test, FileLabel::Anomaly, spec.test_anomaly_per_id, &test_dir),
        ];
        for (kind, split, label, count, dir) in groups {
            let prefix = match label {
                FileLabel::Normal => "normal",
                FileLabel::Anomaly => "anomaly",
                FileLabel::Unlabeled => unreachable!(),
            };
            for index in 0..count {
                let name = format!("{prefix}_id_{:02}_{index:08}.wav", id_spec.id);
                let seed = clip_seed(spec.seed, id_spec.id, kind, index as u32);
                let clip = synthesize_clip(
                    spec,
                    id_spec,
                    label == FileLabel::Anomaly,
                    seed,
                    &name,
                )?;
                let path = dir.join(&name);
                audio_io::write_wav(&clip, &path)?;
                entries.push(DatasetEntry {
                    path,
                    key: MachineKey::new(spec.machine_type.clone(), id_spec.id),
                    split,
                    label,
                });
            }
        }
    }
    DatasetIndex::new(entries, Vec::new())
}

/// Formats a value with `digits` significant digits, the precision used in
/// score CSVs.
pub fn format_significant(value: f64, digits: u32) -> String {
    if value == 0.0 {
        return format!("{:.*}", digits as usize - 1, 0.0);
    }
    let magnitude = value.abs().log10().floor() as i32;
    if magnitude < -4 || magnitude >= digits as i32 {
        format!("{:.*e}", digits as usize - 1, value)
    } else {
        let decimals = (digits as i32 - 1 - magnitude).max(0) as usize;
        format!("{:.*}", decimals, value)
    }
}

/// Submission file name for one machine: `anomaly_score_<type>_id_<id>.csv`.
pub fn submission_file_name(key: &MachineKey) -> String {
    format!("anomaly_score_{}.csv", key)
}

/// Recovers the machine key from a submission file name.
pub fn parse_submission_file_name(name: &str) -> Option<MachineKey> {
    let stem = name.strip_prefix("anomaly_score_")?.strip_suffix(".csv")?;
    let split_at = stem.rfind("_id_")?;
    let machine_type = &stem[..split_at];
    let id: u32 = stem[split_at + 4..].parse().ok()?;
    if machine_type.is_empty() {
        return None;
    }
    Some(MachineKey::new(machine_type, id))
}

/// Writes one machine's scores as headerless `filename,score` rows, sorted
/// by filename, at 6 significant digits, via a temp file + rename.
pub fn write_submission(
    scores: &BTreeMap<String, f64>,
    machine: &MachineKey,
    out_dir: impl AsRef<Path>,
) -> Result<PathBuf, DatasetError> {
    if scores.is_empty() {
        return Err(DatasetError::EmptySubmission);
    }
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let path = out_dir.join(submission_file_name(machine));
    let tmp = path.with_extension("csv.tmp");
    let mut body = String::new();
    for (name, score) in scores {
        body.push_str(name);
        body.push(',');
        body.push_str(&format_significant(*score, 6));
        body.push('\n');
    }
    fs::write(&tmp, body).map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, &path).map_err(|e| io_err(&path, e))?;
    Ok(path)
}

/// Parses a `filename,score` submission CSV.
pub fn read_submission(path: impl AsRef<Path>) -> Result<Vec<(String, f64)>, DatasetError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed = line
            .split_once(',')
            .and_then(|(name, score)| score.trim().parse::<f64>().ok().map(|s| (name, s)));
        match parsed {
            Some((name, score)) => rows.push((name.to_string(), score)),
            None => {
                return Err(DatasetError::SubmissionParse {
                    path: path.display().to_string(),
                    line: i + 1,
                    content: line.to_string(),
                })
            }
        }
    }
    Ok(rows)
}
