use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use spike_saliency::cli::{build_net, RunConfig, CONFIG_FILE, MODEL_FILE};
use spike_saliency::metrics::MetricsReport;
use spike_saliency::params::ParamStore;
use spike_saliency::spike::dataset::{prepare_all, Dataset};
use spike_saliency::train::{evaluate, Trainer};

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spike-saliency"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = bin(args);
    assert!(
        out.status.success(),
        "`{}` failed: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A small dataset plus the flags of a small model.
fn small_dataset(dir: &Path) -> PathBuf {
    let ds = dir.join("ds");
    ok(&["gen-data", "--count", "8", "--size", "32", "--ticks", "24", "--seed", "11", "--out", s(&ds)]);
    ds
}

const SMALL: &[&str] = &["--time-steps", "2", "--base-channels", "2", "--heads", "2"];

fn train_args<'a>(ds: &'a Path, out: &'a Path, epochs: &'a str) -> Vec<&'a str> {
    let mut a = vec!["--deterministic", "train", "--dataset", s(ds), "--out", s(out), "--epochs", epochs];
    a.extend_from_slice(SMALL);
    a
}

#[test]
fn zero_epochs_saves_the_initialisation() {
    let dir = tempfile::tempdir().unwrap();
    let ds = small_dataset(dir.path());
    let out = dir.path().join("run");
    ok(&train_args(&ds, &out, "0"));
    let rc: RunConfig = serde_json::from_slice(&std::fs::read(out.join(CONFIG_FILE)).unwrap()).unwrap();
    assert_eq!(rc.train.epochs, 0);
    let fresh = Trainer::new(rc.train.clone(), 32 * 32).unwrap();
    let saved = std::fs::read(out.join(MODEL_FILE)).unwrap();
    assert_eq!(saved, fresh.gen.to_bytes());
    assert_eq!(std::fs::read_to_string(out.join("log.jsonl")).unwrap(), "");
}

#[test]
fn eval_matches_the_library_bit_for_bit() {
    let dir = tempfile::tempdir().unwrap();
    let ds = small_dataset(dir.path());
    let run = dir.path().join("run");
    ok(&train_args(&ds, &run, "1"));
    let report_path = dir.path().join("eval/report.json");
    let ckpt = run.join(MODEL_FILE);
    ok(&[
        "--deterministic",
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--dataset",
        s(&ds),
        "--out",
        s(&report_path),
        "--split",
        "val",
    ]);
    let cli_report: MetricsReport = serde_json::from_slice(&std::fs::read(&report_path).unwrap()).unwrap();

    let rc: RunConfig = serde_json::from_slice(&std::fs::read(run.join(CONFIG_FILE)).unwrap()).unwrap();
    let store = ParamStore::load(&ckpt).unwrap();
    let net = build_net(&rc.train, &store).unwrap();
    let data = Dataset::load(&ds).unwrap();
    let (_, val) = data.split();
    let prepared = prepare_all(&val, rc.train.time_steps).unwrap();
    let lib_report = evaluate(&net, &store, &prepared, false).unwrap().report;
    assert_eq!(cli_report, lib_report);
    assert!(dir.path().join("eval/eval_config.json").is_file());
}

#[test]
fn ablation_is_deterministic_and_has_a_row_per_fusion() {
    let dir = tempfile::tempdir().unwrap();
    let ds = small_dataset(dir.path());
    let mut csvs = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let mut args = vec!["--deterministic", "ablate", "--grid", "fusion", "--dataset", s(&ds), "--out", s(&out), "--epochs", "1"];
        args.extend_from_slice(SMALL);
        ok(&args);
        csvs.push(std::fs::read_to_string(out.join("ablation.csv")).unwrap());
        assert!(out.join("ablation.md").is_file());
    }
    assert_eq!(csvs[0], csvs[1]);
    let rows: Vec<&str> = csvs[0].lines().skip(1).collect();
    assert_eq!(rows.len(), 3);
    for (row, variant) in rows.iter().zip(["or", "add", "sota"]) {
        assert!(row.starts_with(&format!("fusion,{variant},")), "{row}");
    }
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let ds = small_dataset(dir.path());
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"train": {"epochs": 0, "lr": 0.5, "time_steps": 2, "model": {"base_channels": 2, "attention": {"heads": 2}}}}"#).unwrap();
    let out = dir.path().join("run");
    ok(&["train", "--config", s(&cfg), "--dataset", s(&ds), "--out", s(&out), "--lr", "0.25"]);
    let rc: RunConfig = serde_json::from_slice(&std::fs::read(out.join(CONFIG_FILE)).unwrap()).unwrap();
    assert_eq!(rc.train.lr, 0.25);
    assert_eq!(rc.train.epochs, 0);
    assert_eq!(rc.train.model.base_channels, 2);
    assert_eq!(rc.dataset.as_deref(), Some(ds.as_path()));
}

fn error_json(out: &Output) -> serde_json::Value {
    let line = String::from_utf8_lossy(&out.stderr);
    let line = line.lines().last().unwrap_or_default();
    serde_json::from_str(line).unwrap_or_else(|e| panic!("stderr is not one JSON line ({e}): {line}"))
}

#[test]
fn failures_are_one_json_line_with_nonzero_exit() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere");
    let out = bin(&["train", "--dataset", s(&missing), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_json(&out)["error"], "input");

    let out = bin(&["train", "--fusion", "xor"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["error"], "usage");

    let bad = dir.path().join("bad.spk");
    std::fs::write(&bad, b"NOPE0000000000000000").unwrap();
    let out = bin(&["reconstruct", "--spk", s(&bad), "--tick", "0", "--out", s(dir.path())]);
    assert_eq!(error_json(&out)["error"], "decode");

    let cfg = dir.path().join("typo.json");
    std::fs::write(&cfg, r#"{"train": {"epoch": 3}}"#).unwrap();
    let out = bin(&["train", "--config", s(&cfg)]);
    assert_eq!(error_json(&out)["error"], "json");
}

#[test]
fn help_exits_zero() {
    let out = bin(&["--help"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("gen-data"));
}

#[test]
fn simulate_then_reconstruct() {
    let dir = tempfile::tempdir().unwrap();
    let frames = dir.path().join("frames");
    std::fs::create_dir(&frames).unwrap();
    // 64/255 per tick against a threshold of 1 fires every fourth tick
    for t in 0..16 {
        spike_saliency::spike::image_io::write_gray(&frames.join(format!("f{t:03}.pgm")), 3, 2, vec![64; 6]).unwrap();
    }
    let spk = dir.path().join("s.spk");
    ok(&["simulate", "--input", s(&frames), "--theta", "1.0", "--out", s(&spk)]);
    let rec = dir.path().join("rec");
    ok(&["reconstruct", "--spk", s(&spk), "--tick", "6,9", "--out", s(&rec)]);
    for t in [6, 9] {
        let (w, h, px) = spike_saliency::spike::image_io::read_gray(&rec.join(format!("tfi_{t:04}.pgm"))).unwrap();
        assert_eq!((w, h), (3, 2));
        assert!(px.iter().all(|&v| v == px[0] && v > 0), "{px:?}");
    }
}

#[test]
fn energy_and_plot_write_their_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let ds = small_dataset(dir.path());
    let run = dir.path().join("run");
    ok(&train_args(&ds, &run, "2"));
    let energy = dir.path().join("energy/energy.json");
    ok(&["energy", "--checkpoint", s(&run.join(MODEL_FILE)), "--dataset", s(&ds), "--time-steps", "1,2", "--samples", "2", "--out", s(&energy)]);
    let rows: serde_json::Value = serde_json::from_slice(&std::fs::read(&energy).unwrap()).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 2);

    let plots = dir.path().join("plots");
    ok(&["plot", "--log", s(&run.join("log.jsonl")), "--report", s(&run.join("metrics.json")), "--out", s(&plots)]);
    for f in ["loss.png", "loss.svg", "val_mae.png", "pixel_ratio.svg"] {
        assert!(plots.join(f).is_file(), "{f}");
    }
}
