//! The `asdkit` command line: `synth`, `train`, `score`, `evaluate`, `rank`.
//!
//! Exit codes are a stable contract for scripting:
//! - `0` success
//! - `1` usage or configuration error (bad flags, bad config/spec fields,
//!   degenerate setups like a single-ID classifier)
//! - `2` data error (unreadable datasets, missing clips or models, stray or
//!   mismatched score files, hash mismatches)
//! - `3` numeric failure (non-finite gradients or scores)
//!
//! Commands are idempotent: rerunning with identical inputs and seeds
//! rewrites byte-identical models, score CSVs, and reports. Per-machine
//! work inside `train` and `score` runs on worker threads; outputs land via
//! temp file + rename.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rayon::prelude::*;
use thiserror::Error;

use crate::audio_io::{self, AudioClip, AudioError};
use crate::baseline_ae::train_baseline;
use crate::classifier_asd::{train_id_classifier, ClassifierMode};
use crate::conditioned_ae::train_conditioned_ae;
use crate::config::{
    feature_config_hash, load_run_config, load_synth_spec, ClassifierModeName, ConfigError,
    Method, RunConfig,
};
use crate::dataset::{
    self, generate_synth_corpus, scan_dataset, DatasetError, DatasetIndex, FileLabel, MachineKey,
    Split,
};
use crate::manifest::{
    load_models, save_model, write_loss_log, AnyModel, ManifestError, ModelManifest,
};
use crate::metrics::{
    evaluate_samples, rank_systems, Label, Leaderboard, MetricError, MetricReport, RankWeighting,
    ScoredSample,
};
use crate::nn::{NnError, TrainConfig};
use crate::pipeline::{subseed, ModelError};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
}

fn nn_exit_code(e: &NnError) -> i32 {
    match e {
        NnError::Io { .. } | NnError::Checkpoint { .. } => 2,
        _ => 3,
    }
}

fn model_exit_code(e: &ModelError) -> i32 {
    match e {
        ModelError::Config(_) => 1,
        ModelError::Nn(inner) => nn_exit_code(inner),
        _ => 2,
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 1,
            CliError::Dataset(DatasetError::SpecInvalid { .. }) => 1,
            CliError::Metric(MetricError::InvalidFraction(_))
            | CliError::Metric(MetricError::InvalidWeighting) => 1,
            CliError::Metric(MetricError::NonFiniteScore { .. }) => 3,
            CliError::Metric(_) => 2,
            CliError::Model(e) => model_exit_code(e),
            CliError::Manifest(ManifestError::Model(e)) => model_exit_code(e),
            CliError::Manifest(ManifestError::Nn(e)) => nn_exit_code(e),
            CliError::Data(_)
            | CliError::Dataset(_)
            | CliError::Audio(_)
            | CliError::Manifest(_)
            | CliError::Io { .. } => 2,
        }
    }
}

fn io_err(path: &Path, source: io::Error) -> CliError {
    CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))?;
    Ok(())
}

#[derive(Parser, Debug)]
#[command(
    name = "asdkit",
    version,
    about = "Anomalous-sound-detection toolkit: synthetic corpora, model training, scoring, and exact AUC/pAUC evaluation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a deterministic synthetic corpus from a spec file.
    Synth {
        /// Synthesis spec (TOML).
        #[arg(long)]
        spec: PathBuf,
        /// Output dataset root.
        #[arg(long)]
        out: PathBuf,
        /// Override the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train models for every machine in a dataset.
    Train {
        /// Run config (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Dataset root.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for model files.
        #[arg(long)]
        out: PathBuf,
        /// Override the config's training seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config's method (baseline_ae | classifier | conditioned_ae).
        #[arg(long)]
        method: Option<String>,
    },
    /// Score a dataset's test clips with trained models.
    Score {
        /// Directory of trained models.
        #[arg(long)]
        models: PathBuf,
        /// Dataset root.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for score CSVs.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate score CSVs against ground truth.
    Evaluate {
        /// Directory of anomaly_score_*.csv files.
        #[arg(long)]
        scores: PathBuf,
        /// Dataset root providing ground truth (labeled test file names).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Label CSV providing ground truth: `filename,label` or
        /// `machine_type,filename,label` rows, label in {normal, anomaly, 0, 1}.
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Partial-AUC false-positive-rate fraction.
        #[arg(long, default_value_t = 0.1)]
        p: f64,
        /// Output directory for metric reports.
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank systems by average per-type rank from their metric reports.
    Rank {
        /// One results directory per system (metrics_*.json files).
        #[arg(long, num_args = 1.., required = true)]
        results: Vec<PathBuf>,
        /// Comma-separated system names (defaults to directory names).
        #[arg(long)]
        names: Option<String>,
        #[arg(long, default_value_t = 0.5)]
        auc_weight: f64,
        #[arg(long, default_value_t = 0.5)]
        pauc_weight: f64,
        /// Output directory for the leaderboard.
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses argv and runs; returns the process exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap's rendered help/error text; usage problems are exit 1.
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Synth { spec, out, seed } => cmd_synth(&spec, &out, seed),
        Command::Train {
            config,
            data,
            out,
            seed,
            method,
        } => cmd_train(&config, &data, &out, seed, method.as_deref()),
        Command::Score { models, data, out } => cmd_score(&models, &data, &out),
        Command::Evaluate {
            scores,
            data,
            labels,
            p,
            out,
        } => cmd_evaluate(&scores, data.as_deref(), labels.as_deref(), p, &out),
        Command::Rank {
            results,
            names,
            auc_weight,
            pauc_weight,
            out,
        } => cmd_rank(&results, names.as_deref(), auc_weight, pauc_weight, &out),
    }
}

pub fn cmd_synth(spec_path: &Path, out: &Path, seed: Option<u64>) -> Result<(), CliError> {
    let mut spec = load_synth_spec(spec_path)?;
    if let Some(seed) = seed {
        spec.seed = seed;
    }
    let index = generate_synth_corpus(&spec, out)?;
    if index.is_empty() {
        eprintln!("warning: spec requests zero clips; wrote an empty corpus");
    }
    println!(
        "wrote {} clips for {} machine id(s) under {}",
        index.len(),
        spec.ids.len(),
        out.display()
    );
    Ok(())
}

fn load_clips(entries: &[&dataset::DatasetEntry]) -> Result<Vec<AudioClip>, CliError> {
    entries
        .iter()
        .map(|e| audio_io::read_wav(&e.path).map_err(CliError::from))
        .collect()
}

/// Training clips per machine: the train split (normal premise enforced at
/// scan time; unlabeled additional-training files count as normal).
fn load_train_clips(
    index: &DatasetIndex,
) -> Result<BTreeMap<MachineKey, Vec<AudioClip>>, CliError> {
    let mut map: BTreeMap<MachineKey, Vec<AudioClip>> = BTreeMap::new();
    for key in index.machine_keys() {
        let entries = index.split_entries(&key, Split::Train);
        if entries.is_empty() {
            continue;
        }
        map.insert(key, load_clips(&entries)?);
    }
    Ok(map)
}

pub fn cmd_train(
    config_path: &Path,
    data_root: &Path,
    out_dir: &Path,
    seed_override: Option<u64>,
    method_override: Option<&str>,
) -> Result<(), CliError> {
    let mut config = load_run_config(config_path)?;
    if let Some(seed) = seed_override {
        config.training.seed = seed;
    }
    if let Some(method) = method_override {
        config.method = method.parse()?;
    }
    let index = scan_dataset(data_root)?;
    for reject in index.rejects() {
        eprintln!("warning: skipped {reject}");
    }
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;

    let hash = feature_config_hash(&config.features);
    let train_cfg = config.train_config();
    let clips = load_train_clips(&index)?;
    if clips.is_empty() {
        return Err(CliError::Data(format!(
            "{}: no training clips for any machine",
            data_root.display()
        )));
    }

    let lines = match config.method {
        Method::BaselineAe => train_all_baselines(&config, &index, &clips, &train_cfg, out_dir, &hash)?,
        Method::Classifier => train_all_classifiers(&config, &clips, &train_cfg, out_dir, &hash)?,
        Method::ConditionedAe => train_all_conditioned(&config, &clips, &train_cfg, out_dir, &hash)?,
    };
    for line in lines {
        println!("{line}");
    }
    Ok(())
}

fn train_all_baselines(
    config: &RunConfig,
    index: &DatasetIndex,
    clips: &BTreeMap<MachineKey, Vec<AudioClip>>,
    train_cfg: &TrainConfig,
    out_dir: &Path,
    hash: &str,
) -> Result<Vec<String>, CliError> {
    let missing: Vec<String> = index
        .machine_keys()
        .iter()
        .filter(|k| !clips.contains_key(*k))
        .map(|k| k.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(CliError::Data(format!(
            "no training clips for machine(s): {}",
            missing.join(", ")
        )));
    }
    let jobs: Vec<&MachineKey> = clips.keys().collect();
    jobs.par_iter()
        .map(|key| {
            let cfg = TrainConfig {
                seed: subseed(train_cfg.seed, &format!("baseline/{key}")),
                ..*train_cfg
            };
            let (model, history) = train_baseline(
                &clips[key],
                (*key).clone(),
                config.features.clone(),
                config.baseline.reading,
                &cfg,
            )?;
            let stem = format!("baseline_{key}");
            let manifest = ModelManifest::BaselineAe {
                machine: (*key).clone(),
                feature: config.features.clone(),
                reading: config.baseline.reading,
                config_hash: hash.to_string(),
            };
            save_model(out_dir, &stem, &manifest, model.network())?;
            write_loss_log(out_dir, &stem, &history)?;
            Ok(format!(
                "trained {stem} ({} clips, final loss {:.6})",
                clips[key].len(),
                history.last().copied().unwrap_or(f64::NAN)
            ))
        })
        .collect()
}

fn train_all_classifiers(
    config: &RunConfig,
    clips: &BTreeMap<MachineKey, Vec<AudioClip>>,
    train_cfg: &TrainConfig,
    out_dir: &Path,
    hash: &str,
) -> Result<Vec<String>, CliError> {
    let types: BTreeSet<String> = clips.keys().map(|k| k.machine_type.clone()).collect();
    let jobs: Vec<&String> = types.iter().collect();
    jobs.par_iter()
        .map(|machine_type| {
            let (mode, data, stem): (ClassifierMode, BTreeMap<MachineKey, Vec<AudioClip>>, String) =
                match config.classifier.mode {
                    ClassifierModeName::WithinType => (
                        ClassifierMode::WithinType,
                        clips
                            .iter()
                            .filter(|(k, _)| &k.machine_type == *machine_type)
                            .map(|(k, v)| (k.clone(), v.clone()))
                            .collect(),
                        format!("classifier_{machine_type}"),
                    ),
                    ClassifierModeName::OutlierExposed => (
                        ClassifierMode::OutlierExposed {
                            target_type: (*machine_type).clone(),
                        },
                        clips.clone(),
                        format!("classifier_oe_{machine_type}"),
                    ),
                };
            let cfg = TrainConfig {
                seed: subseed(train_cfg.seed, &format!("classifier/{machine_type}")),
                ..*train_cfg
            };
            let (model, history) = train_id_classifier(
                &data,
                mode.clone(),
                &config.classifier.hidden,
                config.features.clone(),
                &cfg,
            )?;
            let manifest = ModelManifest::Classifier {
                mode,
                id_index: model.id_index().to_vec(),
                feature: config.features.clone(),
                config_hash: hash.to_string(),
            };
            save_model(out_dir, &stem, &manifest, model.network())?;
            write_loss_log(out_dir, &stem, &history)?;
            Ok(format!(
                "trained {stem} ({} classes, final loss {:.6})",
                model.n_classes(),
                history.last().copied().unwrap_or(f64::NAN)
            ))
        })
        .collect()
}

fn train_all_conditioned(
    config: &RunConfig,
    clips: &BTreeMap<MachineKey, Vec<AudioClip>>,
    train_cfg: &TrainConfig,
    out_dir: &Path,
    hash: &str,
) -> Result<Vec<String>, CliError> {
    let types: BTreeSet<String> = clips.keys().map(|k| k.machine_type.clone()).collect();
    for machine_type in &types {
        let ids = clips.keys().filter(|k| &k.machine_type == machine_type).count();
        if ids < 2 {
            eprintln!(
                "warning: machine type '{machine_type}' has a single ID; conditioning is vacuous"
            );
        }
    }
    let cond = config.conditioned.to_config();
    let jobs: Vec<&String> = types.iter().collect();
    jobs.par_iter()
        .map(|machine_type| {
            let data: BTreeMap<MachineKey, Vec<AudioClip>> = clips
                .iter()
                .filter(|(k, _)| &k.machine_type == *machine_type)
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect();
            let cfg = TrainConfig {
                seed: subseed(train_cfg.seed, &format!("conditioned/{machine_type}")),
                ..*train_cfg
            };
            let (model, history) =
                train_conditioned_ae(&data, &cond, config.features.clone(), &cfg)?;
            let variant_tag = match cond.variant {
                crate::conditioned_ae::ConditionedVariant::ConstantTarget => "constant_target",
                crate::conditioned_ae::ConditionedVariant::IdRegression => "id_regression",
            };
            let stem = format!("conditioned_{variant_tag}_{machine_type}");
            let manifest = ModelManifest::ConditionedAe {
                variant: cond.variant,
                id_index: model.id_index().to_vec(),
                lambda: model.lambda(),
                mismatch_probability: model.mismatch_probability(),
                constant_vector: model.constant_vector().map(|c| c.to_vec()),
                feature: config.features.clone(),
                config_hash: hash.to_string(),
            };
            save_model(out_dir, &stem, &manifest, model.network())?;
            write_loss_log(out_dir, &stem, &history)?;
            Ok(format!(
                "trained {stem} ({} ids, final loss {:.6})",
                model.id_index().len(),
                history.last().copied().unwrap_or(f64::NAN)
            ))
        })
        .collect()
}

pub fn cmd_score(models_dir: &Path, data_root: &Path, out_dir: &Path) -> Result<(), CliError> {
    let models = load_models(models_dir)?;
    if models.is_empty() {
        return Err(CliError::Data(format!(
            "{}: no model manifests found",
            models_dir.display()
        )));
    }
    let index = scan_dataset(data_root)?;
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;

    // Every machine key must be scored by exactly one model.
    let mut tasks: Vec<(usize, MachineKey)> = Vec::new();
    let mut claimed: BTreeMap<MachineKey, String> = BTreeMap::new();
    for (i, loaded) in models.iter().enumerate() {
        let keys: Vec<MachineKey> = match &loaded.model {
            AnyModel::Baseline(m) => vec![m.machine().clone()],
            AnyModel::Classifier(c) => c.id_index().to_vec(),
            AnyModel::Conditioned(c) => c.id_index().to_vec(),
        };
        for key in keys {
            if let Some(previous) = claimed.insert(key.clone(), loaded.stem.clone()) {
                return Err(CliError::Data(format!(
                    "both '{previous}' and '{}' produce scores for {key}",
                    loaded.stem
                )));
            }
            if index.split_entries(&key, Split::Test).is_empty() {
                eprintln!("warning: no test clips for {key}; skipping");
                continue;
            }
            tasks.push((i, key));
        }
    }
    if tasks.is_empty() {
        return Err(CliError::Data(
            "no test clips found for any model's machines".to_string(),
        ));
    }

    let lines: Vec<String> = tasks
        .par_iter()
        .map(|(i, key)| {
            let mut scores = BTreeMap::new();
            for entry in index.split_entries(key, Split::Test) {
                let clip = audio_io::read_wav(&entry.path)?;
                let score = match &models[*i].model {
                    AnyModel::Baseline(m) => m.anomaly_score(&clip)?,
                    AnyModel::Classifier(c) => c.anomaly_score(&clip, key)?,
                    AnyModel::Conditioned(c) => c.anomaly_score(&clip, key)?,
                };
                scores.insert(entry.file_name(), score);
            }
            let path = dataset::write_submission(&scores, key, out_dir)?;
            Ok(format!(
                "scored {} clips for {key} -> {}",
                scores.len(),
                path.display()
            ))
        })
        .collect::<Result<Vec<String>, CliError>>()?;
    for line in lines {
        println!("{line}");
    }
    Ok(())
}

enum Truth {
    Index(DatasetIndex),
    Csv {
        global: BTreeMap<String, Label>,
        typed: BTreeMap<(String, String), Label>,
    },
}

fn parse_label(text: &str) -> Option<Label> {
    match text.trim() {
        "normal" | "0" => Some(Label::Normal),
        "anomaly" | "anomalous" | "1" => Some(Label::Anomalous),
        _ => None,
    }
}

fn load_truth_csv(path: &Path) -> Result<Truth, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut global = BTreeMap::new();
    let mut typed = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let parsed = match fields.as_slice() {
            [name, label] => parse_label(label).map(|l| (None, name.to_string(), l)),
            [machine_type, name, label] => {
                parse_label(label).map(|l| (Some(machine_type.to_string()), name.to_string(), l))
            }
            _ => None,
        };
        match parsed {
            Some((None, name, label)) => {
                global.insert(name, label);
            }
            Some((Some(machine_type), name, label)) => {
                typed.insert((machine_type, name), label);
            }
            None => {
                return Err(CliError::Data(format!(
                    "{}: line {}: cannot parse label row '{line}'",
                    path.display(),
                    i + 1
                )))
            }
        }
    }
    Ok(Truth::Csv { global, typed })
}

impl Truth {
    /// Ground-truth labels for one machine's test clips, plus the names of
    /// unlabeled entries (which cannot be evaluated).
    fn labels_for(&self, key: &MachineKey) -> (BTreeMap<String, Label>, Vec<String>) {
        match self {
            Truth::Index(index) => {
                let mut labels = BTreeMap::new();
                let mut unlabeled = Vec::new();
                for entry in index.split_entries(key, Split::Test) {
                    match entry.label {
                        FileLabel::Normal => {
                            labels.insert(entry.file_name(), Label::Normal);
                        }
                        FileLabel::Anomaly => {
                            labels.insert(entry.file_name(), Label::Anomalous);
                        }
                        FileLabel::Unlabeled => unlabeled.push(entry.file_name()),
                    }
                }
                (labels, unlabeled)
            }
            Truth::Csv { .. } => (BTreeMap::new(), Vec::new()),
        }
    }

    fn lookup(&self, key: &MachineKey, name: &str) -> Option<Label> {
        match self {
            Truth::Index(_) => None, // resolved via labels_for
            Truth::Csv { global, typed } => typed
                .get(&(key.machine_type.clone(), name.to_string()))
                .or_else(|| global.get(name))
                .copied(),
        }
    }
}

fn list_cap(names: &[String]) -> String {
    const CAP: usize = 10;
    if names.len() <= CAP {
        names.join(", ")
    } else {
        format!("{}, ... ({} total)", names[..CAP].join(", "), names.len())
    }
}

pub fn cmd_evaluate(
    scores_dir: &Path,
    data_root: Option<&Path>,
    labels_path: Option<&Path>,
    p: f64,
    out_dir: &Path,
) -> Result<(), CliError> {
    let truth = match (data_root, labels_path) {
        (Some(root), None) => Truth::Index(scan_dataset(root)?),
        (None, Some(path)) => load_truth_csv(path)?,
        _ => {
            return Err(CliError::Usage(
                "evaluate needs exactly one of --data or --labels".to_string(),
            ))
        }
    };
    let mut score_files: Vec<(MachineKey, PathBuf)> = Vec::new();
    for entry in fs::read_dir(scores_dir).map_err(|e| io_err(scores_dir, e))? {
        let path = entry.map_err(|e| io_err(scores_dir, e))?.path();
        let name = match path.file_name().and_then(|n| n.to_str()) {
            Some(n) if n.starts_with("anomaly_score_") && n.ends_with(".csv") => n.to_string(),
            _ => continue,
        };
        match dataset::parse_submission_file_name(&name) {
            Some(key) => score_files.push((key, path)),
            None => {
                return Err(CliError::Data(format!(
                    "{}: not a valid submission file name",
                    path.display()
                )))
            }
        }
    }
    if score_files.is_empty() {
        return Err(CliError::Data(format!(
            "{}: no anomaly_score_*.csv files found",
            scores_dir.display()
        )));
    }
    score_files.sort();
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;

    let mut reports: Vec<MetricReport> = Vec::new();
    for (key, path) in score_files {
        let rows = dataset::read_submission(&path)?;
        let (index_labels, unlabeled) = truth.labels_for(&key);
        let mut samples = Vec::with_capacity(rows.len());
        let mut strays: Vec<String> = Vec::new();
        let mut scored_names: BTreeSet<String> = BTreeSet::new();
        for (name, score) in rows {
            scored_names.insert(name.clone());
            let label = index_labels
                .get(&name)
                .copied()
                .or_else(|| truth.lookup(&key, &name));
            match label {
                Some(label) => samples.push(ScoredSample::new(score, label, name)),
                None => strays.push(name),
            }
        }
        if !strays.is_empty() {
            let note = if unlabeled.iter().any(|u| strays.contains(u)) {
                " (unlabeled evaluation-style clips cannot be evaluated)"
            } else {
                ""
            };
            return Err(CliError::Data(format!(
                "{key}: scored clips without ground truth{note}: {}",
                list_cap(&strays)
            )));
        }
        let unscored: Vec<String> = index_labels
            .keys()
            .filter(|name| !scored_names.contains(*name))
            .cloned()
            .collect();
        if !unscored.is_empty() {
            return Err(CliError::Data(format!(
                "{key}: ground-truth clips missing from the score file: {}",
                list_cap(&unscored)
            )));
        }
        let report = evaluate_samples(key.clone(), &samples, p)?;
        let json = serde_json::to_string_pretty(&report).expect("report serializes");
        write_atomic(&out_dir.join(format!("metrics_{key}.json")), json.as_bytes())?;
        reports.push(report);
    }

    let mut summary = String::from("machine_type,machine_id,auc,pauc,p,n_normal,n_anomalous\n");
    println!("machine            AUC      pAUC");
    for report in &reports {
        summary.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            report.machine.machine_type,
            report.machine.machine_id,
            report.auc,
            report.pauc,
            report.p,
            report.n_normal,
            report.n_anomalous
        ));
        println!(
            "{:<18} {:.4}   {:.4}",
            report.machine.to_string(),
            report.auc,
            report.pauc
        );
    }
    write_atomic(&out_dir.join("metrics_summary.csv"), summary.as_bytes())?;
    Ok(())
}

fn read_reports_dir(dir: &Path) -> Result<BTreeMap<MachineKey, MetricReport>, CliError> {
    let mut reports = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| io_err(dir, e))? {
        let path = entry.map_err(|e| io_err(dir, e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if !(name.starts_with("metrics_") && name.ends_with(".json")) {
            continue;
        }
        let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
        let report: MetricReport = serde_json::from_str(&text).map_err(|e| {
            CliError::Data(format!("{}: bad metric report: {e}", path.display()))
        })?;
        reports.insert(report.machine.clone(), report);
    }
    if reports.is_empty() {
        return Err(CliError::Data(format!(
            "{}: no metrics_*.json reports found",
            dir.display()
        )));
    }
    Ok(reports)
}

fn leaderboard_csv(board: &Leaderboard) -> String {
    let mut header = String::from("system,average_rank");
    for machine_type in &board.machine_types {
        header.push_str(&format!(",{machine_type}_score,{machine_type}_rank"));
    }
    header.push('\n');
    let mut body = header;
    for entry in &board.entries {
        body.push_str(&format!("{},{}", entry.system, entry.average_rank));
        for machine_type in &board.machine_types {
            let standing = &entry.per_type[machine_type];
            body.push_str(&format!(",{},{}", standing.score, standing.rank));
        }
        body.push('\n');
    }
    body
}

pub fn cmd_rank(
    results: &[PathBuf],
    names: Option<&str>,
    auc_weight: f64,
    pauc_weight: f64,
    out_dir: &Path,
) -> Result<(), CliError> {
    let system_names: Vec<String> = match names {
        Some(list) => {
            let parsed: Vec<String> = list.split(',').map(|s| s.trim().to_string()).collect();
            if parsed.len() != results.len() {
                return Err(CliError::Usage(format!(
                    "{} names given for {} results directories",
                    parsed.len(),
                    results.len()
                )));
            }
            parsed
        }
        None => results
            .iter()
            .map(|dir| {
                dir.file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_else(|| dir.display().to_string())
            })
            .collect(),
    };
    let mut systems: BTreeMap<String, BTreeMap<MachineKey, MetricReport>> = BTreeMap::new();
    for (name, dir) in system_names.iter().zip(results) {
        if systems.insert(name.clone(), read_reports_dir(dir)?).is_some() {
            return Err(CliError::Usage(format!("duplicate system name '{name}'")));
        }
    }
    let board = rank_systems(
        &systems,
        RankWeighting {
            auc_weight,
            pauc_weight,
        },
    )?;
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let json = serde_json::to_string_pretty(&board).expect("leaderboard serializes");
    write_atomic(&out_dir.join("leaderboard.json"), json.as_bytes())?;
    write_atomic(
        &out_dir.join("leaderboard.csv"),
        leaderboard_csv(&board).as_bytes(),
    )?;
    println!("rank  avg   system");
    for (position, entry) in board.entries.iter().enumerate() {
        println!(
            "{:<5} {:<5.2} {}",
            position + 1,
            entry.average_rank,
            entry.system
        );
    }
    Ok(())
}
