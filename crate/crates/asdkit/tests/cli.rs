//! End-to-end checks of the `asdkit` binary: argument handling, the exit
//! code contract, and byte-identical reruns of each subcommand.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn asdkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_asdkit"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn assert_exit(output: &Output, code: i32, context: &str) {
    assert_eq!(
        output.status.code(),
        Some(code),
        "{context}: expected exit {code}\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr),
    );
}

fn write_spec(dir: &Path, tones_a: &str, tones_b: &str) -> PathBuf {
    let path = dir.join("spec.toml");
    fs::write(
        &path,
        format!(
            r#"
machine_type = "widget"
seed = 42
clip_seconds = 1.0
snr_db = 18.0
train_per_id = 4
test_normal_per_id = 3
test_anomaly_per_id = 3
anomaly = "added_harmonic"

[[ids]]
id = 1
tones_hz = {tones_a}
amp_range = [0.15, 0.25]

[[ids]]
id = 2
tones_hz = {tones_b}
amp_range = [0.15, 0.25]
"#
        ),
    )
    .unwrap();
    path
}

fn write_train_config(dir: &Path, method: &str) -> PathBuf {
    let path = dir.join(format!("config_{method}.toml"));
    fs::write(
        &path,
        format!(
            r#"
method = "{method}"

[training]
epochs = 3
batch_size = 128
learning_rate = 0.001
seed = 5
"#
        ),
    )
    .unwrap();
    path
}

fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = walkdir::WalkDir::new(root)
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_file())
        .map(|e| {
            (
                e.path().strip_prefix(root).unwrap().to_string_lossy().into_owned(),
                fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    files.sort_by(|a, b| a.0.cmp(&b.0));
    files
}

#[test]
fn synth_succeeds_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), "[500.0, 1200.0]", "[2100.0, 3000.0]");
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    let run_a = asdkit(&["synth", "--spec", spec.to_str().unwrap(), "--out", out_a.to_str().unwrap()]);
    assert_exit(&run_a, 0, "synth");
    let run_b = asdkit(&["synth", "--spec", spec.to_str().unwrap(), "--out", out_b.to_str().unwrap()]);
    assert_exit(&run_b, 0, "synth rerun");
    assert_eq!(tree(&out_a), tree(&out_b), "synth trees differ");
    assert!(out_a.join("widget/train/normal_id_01_00000000.wav").exists());
}

#[test]
fn synth_rejects_bad_spec_naming_field() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), "[9000.0]", "[2100.0]");
    let out = dir.path().join("out");
    let run = asdkit(&["synth", "--spec", spec.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_exit(&run, 1, "bad spec");
    let stderr = String::from_utf8_lossy(&run.stderr);
    assert!(stderr.contains("tones_hz"), "stderr should name the field: {stderr}");
}

#[test]
fn unknown_flag_is_usage_error() {
    let run = asdkit(&["synth", "--nonsense", "x"]);
    assert_exit(&run, 1, "unknown flag");
}

#[test]
fn unknown_config_key_is_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), "[500.0]", "[2100.0]");
    let data = dir.path().join("data");
    assert_exit(
        &asdkit(&["synth", "--spec", spec.to_str().unwrap(), "--out", data.to_str().unwrap()]),
        0,
        "synth",
    );
    let config = dir.path().join("config.toml");
    fs::write(&config, "method = \"baseline_ae\"\nepochz = 3\n").unwrap();
    let models = dir.path().join("models");
    let run = asdkit(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        models.to_str().unwrap(),
    ]);
    assert_exit(&run, 1, "unknown config key");
}

/// Full train -> score -> evaluate flow, exercising the model registry
/// contract (one model file set per machine) and byte-identical retrains.
#[test]
fn train_score_evaluate_flow() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), "[500.0, 1200.0]", "[2100.0, 3000.0]");
    let data = dir.path().join("data");
    assert_exit(
        &asdkit(&["synth", "--spec", spec.to_str().unwrap(), "--out", data.to_str().unwrap()]),
        0,
        "synth",
    );
    let config = write_train_config(dir.path(), "baseline_ae");

    let models = dir.path().join("models");
    let run = asdkit(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        models.to_str().unwrap(),
    ]);
    assert_exit(&run, 0, "train");
    for id in [1, 2] {
        assert!(models.join(format!("baseline_widget_id_{id:02}.ckpt")).exists());
        assert!(models.join(format!("baseline_widget_id_{id:02}.json")).exists());
        assert!(models.join(format!("baseline_widget_id_{id:02}.loss.csv")).exists());
    }

    // Retraining with the same config and seed is byte-identical.
    let models_again = dir.path().join("models_again");
    assert_exit(
        &asdkit(&[
            "train",
            "--config",
            config.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--out",
            models_again.to_str().unwrap(),
        ]),
        0,
        "retrain",
    );
    assert_eq!(tree(&models), tree(&models_again), "model trees differ");

    let scores = dir.path().join("scores");
    assert_exit(
        &asdkit(&[
            "score",
            "--models",
            models.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--out",
            scores.to_str().unwrap(),
        ]),
        0,
        "score",
    );
    let scores_again = dir.path().join("scores_again");
    assert_exit(
        &asdkit(&[
            "score",
            "--models",
            models.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--out",
            scores_again.to_str().unwrap(),
        ]),
        0,
        "rescore",
    );
    assert_eq!(tree(&scores), tree(&scores_again), "score trees differ");
    assert!(scores.join("anomaly_score_widget_id_01.csv").exists());
    assert!(scores.join("anomaly_score_widget_id_02.csv").exists());

    // p = 0.5: three test normals per id keep floor(p·N) at 1.
    let metrics = dir.path().join("metrics");
    assert_exit(
        &asdkit(&[
            "evaluate",
            "--scores",
            scores.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--p",
            "0.5",
            "--out",
            metrics.to_str().unwrap(),
        ]),
        0,
        "evaluate",
    );
    assert!(metrics.join("metrics_widget_id_01.json").exists());
    assert!(metrics.join("metrics_summary.csv").exists());

    // p too small for three normals: floor(0.1 * 3) = 0.
    let run = asdkit(&[
        "evaluate",
        "--scores",
        scores.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--p",
        "0.1",
        "--out",
        dir.path().join("m2").to_str().unwrap(),
    ]);
    assert_exit(&run, 2, "undersized pauc");
}

#[test]
fn single_id_classifier_training_fails() {
    let dir = tempfile::tempdir().unwrap();
    let spec_path = dir.path().join("spec.toml");
    fs::write(
        &spec_path,
        r#"
machine_type = "widget"
seed = 1
clip_seconds = 1.0
snr_db = 18.0
train_per_id = 3
test_normal_per_id = 1
test_anomaly_per_id = 1
anomaly = "level_shift"

[[ids]]
id = 1
tones_hz = [700.0]
amp_range = [0.2, 0.3]
"#,
    )
    .unwrap();
    let data = dir.path().join("data");
    assert_exit(
        &asdkit(&["synth", "--spec", spec_path.to_str().unwrap(), "--out", data.to_str().unwrap()]),
        0,
        "synth",
    );
    let config = write_train_config(dir.path(), "classifier");
    let run = asdkit(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        dir.path().join("models").to_str().unwrap(),
    ]);
    assert_exit(&run, 1, "degenerate class count");
}

#[test]
fn score_detects_hash_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), "[500.0]", "[2100.0]");
    let data = dir.path().join("data");
    assert_exit(
        &asdkit(&["synth", "--spec", spec.to_str().unwrap(), "--out", data.to_str().unwrap()]),
        0,
        "synth",
    );
    let config = write_train_config(dir.path(), "baseline_ae");
    let models = dir.path().join("models");
    assert_exit(
        &asdkit(&[
            "train",
            "--config",
            config.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--out",
            models.to_str().unwrap(),
        ]),
        0,
        "train",
    );

    // Tamper with one manifest's hash: the checkpoint no longer matches.
    let manifest_path = models.join("baseline_widget_id_01.json");
    let tampered = fs::read_to_string(&manifest_path)
        .unwrap()
        .replace("\"config_hash\": \"", "\"config_hash\": \"f00d");
    fs::write(&manifest_path, tampered).unwrap();
    let run = asdkit(&[
        "score",
        "--models",
        models.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        dir.path().join("scores").to_str().unwrap(),
    ]);
    assert_exit(&run, 2, "hash mismatch");
    let stderr = String::from_utf8_lossy(&run.stderr);
    assert!(stderr.contains("hash"), "stderr: {stderr}");
}

#[test]
fn evaluate_perfect_and_random_scores() {
    let dir = tempfile::tempdir().unwrap();
    let scores_dir = dir.path().join("scores");
    fs::create_dir_all(&scores_dir).unwrap();

    // Truth CSV and a perfectly separating score file for one machine.
    let mut truth = String::new();
    let mut perfect = String::new();
    for i in 0..200 {
        truth.push_str(&format!("normal_id_01_{i:08}.wav,normal\n"));
        perfect.push_str(&format!("normal_id_01_{i:08}.wav,{}\n", i as f64 / 1000.0));
    }
    for i in 0..200 {
        truth.push_str(&format!("anomaly_id_01_{i:08}.wav,anomaly\n"));
        perfect.push_str(&format!("anomaly_id_01_{i:08}.wav,{}\n", 10.0 + i as f64));
    }
    let labels = dir.path().join("labels.csv");
    fs::write(&labels, truth).unwrap();
    fs::write(scores_dir.join("anomaly_score_widget_id_01.csv"), perfect).unwrap();

    let metrics = dir.path().join("metrics");
    assert_exit(
        &asdkit(&[
            "evaluate",
            "--scores",
            scores_dir.to_str().unwrap(),
            "--labels",
            labels.to_str().unwrap(),
            "--out",
            metrics.to_str().unwrap(),
        ]),
        0,
        "evaluate perfect",
    );
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(metrics.join("metrics_widget_id_01.json")).unwrap())
            .unwrap();
    assert_eq!(report["auc"], 1.0);
    assert_eq!(report["pauc"], 1.0);

    // Random scores over the same truth: AUC must sit near 1/2.
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut random = String::new();
    for i in 0..200 {
        random.push_str(&format!("normal_id_01_{i:08}.wav,{}\n", rng.gen_range(0.0..1.0)));
    }
    for i in 0..200 {
        random.push_str(&format!("anomaly_id_01_{i:08}.wav,{}\n", rng.gen_range(0.0..1.0)));
    }
    fs::write(scores_dir.join("anomaly_score_widget_id_01.csv"), random).unwrap();
    let metrics2 = dir.path().join("metrics2");
    assert_exit(
        &asdkit(&[
            "evaluate",
            "--scores",
            scores_dir.to_str().unwrap(),
            "--labels",
            labels.to_str().unwrap(),
            "--out",
            metrics2.to_str().unwrap(),
        ]),
        0,
        "evaluate random",
    );
    let report: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(metrics2.join("metrics_widget_id_01.json")).unwrap(),
    )
    .unwrap();
    let auc = report["auc"].as_f64().unwrap();
    assert!((auc - 0.5).abs() < 0.08, "null-distribution AUC {auc}");
}

#[test]
fn evaluate_rejects_stray_scores() {
    let dir = tempfile::tempdir().unwrap();
    let scores_dir = dir.path().join("scores");
    fs::create_dir_all(&scores_dir).unwrap();
    fs::write(
        scores_dir.join("anomaly_score_widget_id_01.csv"),
        "normal_id_01_00000000.wav,1.0\nmystery.wav,2.0\n",
    )
    .unwrap();
    let labels = dir.path().join("labels.csv");
    fs::write(&labels, "normal_id_01_00000000.wav,normal\n").unwrap();
    let run = asdkit(&[
        "evaluate",
        "--scores",
        scores_dir.to_str().unwrap(),
        "--labels",
        labels.to_str().unwrap(),
        "--out",
        dir.path().join("metrics").to_str().unwrap(),
    ]);
    assert_exit(&run, 2, "stray scores");
    let stderr = String::from_utf8_lossy(&run.stderr);
    assert!(stderr.contains("mystery.wav"), "stderr: {stderr}");
}

fn write_report(dir: &Path, machine_type: &str, id: u32, auc: f64, pauc: f64) {
    fs::create_dir_all(dir).unwrap();
    let body = format!(
        r#"{{"machine_type":"{machine_type}","machine_id":{id},"auc":{auc},"pauc":{pauc},"p":0.1,"n_normal":10,"n_anomalous":10}}"#
    );
    fs::write(dir.join(format!("metrics_{machine_type}_id_{id:02}.json")), body).unwrap();
}

#[test]
fn rank_matches_hand_enumeration() {
    let dir = tempfile::tempdir().unwrap();
    // fan: A 0.9, B 0.8, C 0.7 -> ranks 1, 2, 3
    // pump: A 0.6, B 0.9, C 0.9 -> A 3, B and C tie at 1.5
    for (system, fan, pump) in [("sysA", 0.9, 0.6), ("sysB", 0.8, 0.9), ("sysC", 0.7, 0.9)] {
        let sub = dir.path().join(system);
        write_report(&sub, "fan", 1, fan, fan);
        write_report(&sub, "pump", 1, pump, pump);
    }
    let out = dir.path().join("board");
    let run = asdkit(&[
        "rank",
        "--results",
        dir.path().join("sysA").to_str().unwrap(),
        dir.path().join("sysB").to_str().unwrap(),
        dir.path().join("sysC").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_exit(&run, 0, "rank");
    let board: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("leaderboard.json")).unwrap()).unwrap();
    let entries = board["entries"].as_array().unwrap();
    assert_eq!(entries[0]["system"], "sysB");
    assert_eq!(entries[0]["average_rank"], (2.0 + 1.5) / 2.0);
    assert_eq!(entries[1]["system"], "sysA");
    assert_eq!(entries[1]["average_rank"], 2.0);
    assert_eq!(entries[2]["system"], "sysC");
    assert_eq!(entries[2]["average_rank"], (3.0 + 1.5) / 2.0);
    let csv = fs::read_to_string(out.join("leaderboard.csv")).unwrap();
    assert!(csv.starts_with("system,average_rank,fan_score,fan_rank,pump_score,pump_rank"));

    // Single system ranks first everywhere.
    let solo_out = dir.path().join("solo_board");
    let run = asdkit(&[
        "rank",
        "--results",
        dir.path().join("sysA").to_str().unwrap(),
        "--out",
        solo_out.to_str().unwrap(),
    ]);
    assert_exit(&run, 0, "solo rank");
    let board: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(solo_out.join("leaderboard.json")).unwrap())
            .unwrap();
    assert_eq!(board["entries"][0]["average_rank"], 1.0);
}

#[test]
fn rank_rejects_coverage_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let full = dir.path().join("full");
    write_report(&full, "fan", 1, 0.9, 0.8);
    write_report(&full, "pump", 1, 0.9, 0.8);
    let partial = dir.path().join("partial");
    write_report(&partial, "fan", 1, 0.7, 0.6);
    let run = asdkit(&[
        "rank",
        "--results",
        full.to_str().unwrap(),
        partial.to_str().unwrap(),
        "--out",
        dir.path().join("board").to_str().unwrap(),
    ]);
    assert_exit(&run, 2, "coverage mismatch");
    let stderr = String::from_utf8_lossy(&run.stderr);
    assert!(stderr.contains("pump"), "stderr: {stderr}");
}
