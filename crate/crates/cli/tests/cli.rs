//! End-to-end tests driving the `oaid` binary on a miniature corpus.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use oaid_core::corpus::{self, SplitCounts};
use oaid_core::inpaint::PixelDatasetConfig;
use tempfile::TempDir;

fn oaid(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_oaid")).args(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Two fingerprinted sources, a handful of 64px images per split.
fn write_tiny_manifest(dir: &Path) -> PathBuf {
    let mut manifest = corpus::default_manifest();
    manifest.image_size = 64;
    manifest.sources.truncate(2);
    let counts = SplitCounts { train: 6, val: 1, test: 2 };
    manifest.real.counts = counts;
    for source in &mut manifest.sources {
        source.counts = counts;
    }
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest).unwrap()).unwrap();
    path
}

fn read_log(out_dir: &Path) -> Vec<serde_json::Value> {
    let text = fs::read_to_string(out_dir.join("log.jsonl")).expect("log exists");
    text.lines().map(|line| serde_json::from_str(line).expect("log line is JSON")).collect()
}

#[test]
fn corpus_gen_is_seed_reproducible() {
    let tmp = TempDir::new().unwrap();
    let manifest = write_tiny_manifest(tmp.path());
    let manifest = manifest.to_str().unwrap();
    let out_a = tmp.path().join("a");
    let out_b = tmp.path().join("b");
    let out_c = tmp.path().join("c");

    for out in [&out_a, &out_b] {
        let run = oaid(&[
            "--out",
            out.to_str().unwrap(),
            "--seed",
            "99",
            "corpus",
            "gen",
            "--manifest",
            manifest,
        ]);
        assert!(run.status.success(), "stderr: {}", stderr(&run));
    }
    let sample = "corpus/specnoise-v1/train/000000.png";
    let bytes_a = fs::read(out_a.join(sample)).unwrap();
    let bytes_b = fs::read(out_b.join(sample)).unwrap();
    assert_eq!(bytes_a, bytes_b, "same seed must produce identical files");

    let run = oaid(&[
        "--out",
        out_c.to_str().unwrap(),
        "--seed",
        "100",
        "corpus",
        "gen",
        "--manifest",
        manifest,
    ]);
    assert!(run.status.success());
    let bytes_c = fs::read(out_c.join(sample)).unwrap();
    assert_ne!(bytes_a, bytes_c, "different seed must change the corpus");

    let events = read_log(&out_a);
    assert_eq!(events.first().unwrap()["event"], "command_start");
    assert_eq!(events.last().unwrap()["event"], "command_end");
    assert!(events.iter().all(|e| e["ts"].is_f64()));
}

#[test]
fn missing_manifest_names_the_path_and_fails() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("out");
    let run = oaid(&[
        "--out",
        out.to_str().unwrap(),
        "corpus",
        "gen",
        "--manifest",
        "/no/such/manifest.json",
    ]);
    assert_eq!(run.status.code(), Some(2));
    assert!(stderr(&run).contains("/no/such/manifest.json"));
}

#[test]
fn invalid_settings_exit_one_without_artifacts() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("out");
    let run = oaid(&[
        "--out",
        out.to_str().unwrap(),
        "train",
        "online",
        "--batch-size",
        "3",
    ]);
    assert_eq!(run.status.code(), Some(1), "stderr: {}", stderr(&run));
    assert!(stderr(&run).contains("batch_size"));
    assert!(!out.exists(), "failed validation must not create outputs");

    let unknown = oaid(&["--out", out.to_str().unwrap(), "frobnicate"]);
    assert_eq!(unknown.status.code(), Some(1));
    assert!(!out.exists());

    let help = oaid(&["--help"]);
    assert_eq!(help.status.code(), Some(0));
    assert!(stdout(&help).contains("corpus"));
}

#[test]
fn online_pipeline_trains_resumes_and_reports() {
    let tmp = TempDir::new().unwrap();
    let manifest = write_tiny_manifest(tmp.path());
    let out = tmp.path().join("out");
    let out_s = out.to_str().unwrap();

    let gen = oaid(&["--out", out_s, "corpus", "gen", "--manifest", manifest.to_str().unwrap()]);
    assert!(gen.status.success(), "stderr: {}", stderr(&gen));

    let train = oaid(&[
        "--out", out_s, "train", "online", "--epochs", "1", "--batch-size", "4",
    ]);
    assert!(train.status.success(), "stderr: {}", stderr(&train));
    let run_dir = out.join("runs/default");
    assert!(run_dir.join("stage_1_specnoise-v1.ckpt").is_file());
    assert!(run_dir.join("stage_2_quantnoise-v1.ckpt").is_file());
    assert!(run_dir.join("run_manifest.json").is_file());

    let stages: Vec<serde_json::Value> =
        read_log(&out).into_iter().filter(|e| e["event"] == "stage_complete").collect();
    assert_eq!(stages.len(), 2);
    assert_eq!(stages[0]["cumulative_sources"].as_array().unwrap().len(), 2);
    assert_eq!(stages[1]["cumulative_sources"].as_array().unwrap().len(), 3);
    assert_eq!(stages[0]["retrained"], true);
    assert_eq!(stages[0]["epoch_losses"].as_array().unwrap().len(), 1);

    // A second invocation must reuse the finished checkpoints.
    let resume = oaid(&[
        "--out", out_s, "train", "online", "--epochs", "1", "--batch-size", "4",
    ]);
    assert!(resume.status.success());
    assert!(stdout(&resume).contains("reused checkpoint"));

    let eval = oaid(&["--out", out_s, "eval", "matrix"]);
    assert!(eval.status.success(), "stderr: {}", stderr(&eval));
    let reports = out.join("reports");
    for name in
        ["accuracy.csv", "auc.csv", "ap.csv", "accuracy.ppm", "auc.ppm", "ap.ppm", "matrix.json"]
    {
        assert!(reports.join(name).is_file(), "missing report {name}");
    }
    let csv = fs::read_to_string(reports.join("accuracy.csv")).unwrap();
    assert!(csv.starts_with("test_source,stage_1,stage_2\n"));
    assert!(csv.lines().last().unwrap().starts_with("real,"));
    let cells: Vec<serde_json::Value> =
        read_log(&out).into_iter().filter(|e| e["event"] == "metric_cell").collect();
    assert_eq!(cells.len(), 4);
    assert!(cells.iter().all(|c| c["auc"].is_f64()));
}

#[test]
fn pixel_pipeline_trains_and_prints_metric_table() {
    let tmp = TempDir::new().unwrap();
    let manifest = write_tiny_manifest(tmp.path());
    let out = tmp.path().join("out");
    let out_s = out.to_str().unwrap();

    let mut pixel_data = PixelDatasetConfig::default();
    pixel_data.counts = SplitCounts { train: 4, val: 1, test: 2 };
    let config_path = tmp.path().join("config.json");
    fs::write(
        &config_path,
        serde_json::to_string(&serde_json::json!({ "pixel_data": pixel_data })).unwrap(),
    )
    .unwrap();
    let config_s = config_path.to_str().unwrap();

    let gen = oaid(&[
        "--out", out_s, "corpus", "gen", "--manifest", manifest.to_str().unwrap(),
    ]);
    assert!(gen.status.success(), "stderr: {}", stderr(&gen));

    let inpaint = oaid(&["--out", out_s, "--config", config_s, "inpaint", "gen"]);
    assert!(inpaint.status.success(), "stderr: {}", stderr(&inpaint));
    for source in ["inpaint_specnoise-v1", "cutmix_specnoise-v1", "inpaint_quantnoise-v1"] {
        assert!(out.join("pixel").join(source).join("train/images/000000.png").is_file());
        assert!(out.join("pixel").join(source).join("train/masks/000003.png").is_file());
    }
    assert!(out.join("pixel/pixel_manifest.json").is_file());

    // `whole` without a corpus path is a usage error.
    let bad = oaid(&["--out", out_s, "train", "pixel", "--kinds", "whole"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(stderr(&bad).contains("--corpus"));

    let train = oaid(&[
        "--out", out_s, "train", "pixel", "--epochs", "1", "--batch-size", "4",
        "--sources", "specnoise-v1",
    ]);
    assert!(train.status.success(), "stderr: {}", stderr(&train));
    assert!(out.join("pixel_model.ckpt").is_file());
    let meta: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("pixel_model.json")).unwrap()).unwrap();
    assert_eq!(meta["kinds"], serde_json::json!(["inpaint", "cutmix"]));
    assert_eq!(meta["sample_count"], 8);
    assert_eq!(meta["epochs"], 1);

    let eval = oaid(&["--out", out_s, "eval", "pixel"]);
    assert!(eval.status.success(), "stderr: {}", stderr(&eval));
    let table = stdout(&eval);
    let header = table.lines().next().unwrap();
    for column in ["accuracy", "precision", "recall", "f1"] {
        assert!(header.contains(column), "header missing {column}: {header}");
    }
    assert!(table.contains("inpaint_specnoise-v1"));
    assert!(table.lines().any(|l| l.starts_with("overall")));
    let rows: Vec<serde_json::Value> =
        read_log(&out).into_iter().filter(|e| e["event"] == "pixel_metrics").collect();
    assert_eq!(rows.len(), 5, "four sources plus overall");
}
