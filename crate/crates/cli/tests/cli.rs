use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use cpcl_core::dataio::{load_dataset, save_dataset, Dataset, DatasetSpec, Sample};
use cpcl_core::network::{NetworkConfig, SegNetwork};
use cpcl_core::{GridTensor, LabelMap};
use serde_json::Value;

fn cpcl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cpcl"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

const TINY: &[&str] = &[
    "--set",
    "data.train_samples=16",
    "--set",
    "data.val_samples=4",
    "--set",
    "data.height=12",
    "--set",
    "data.width=12",
    "--set",
    "network.hidden=4",
    "--set",
    "labeled_batch=2",
    "--set",
    "unlabeled_batch=2",
    "--set",
    "eval_every=3",
    "--max-iter",
    "6",
];

fn train(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--out", out.to_str().unwrap()];
    args.extend_from_slice(TINY);
    if !extra.contains(&"--fraction") {
        args.extend_from_slice(&["--fraction", "1/4"]);
    }
    args.extend_from_slice(extra);
    cpcl(&args)
}

#[test]
fn gen_data_writes_loadable_deterministic_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for d in [&a, &b] {
        let out = cpcl(&["gen-data", "--out", d.to_str().unwrap(), "--num-samples", "12"]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    let ds = load_dataset(&a).unwrap();
    assert_eq!(ds.len(), 12);
    assert!(a.join("gen_config.json").is_file());
    for sub in ["manifest.json", "images/s00003.f64", "labels/s00003.u8"] {
        assert_eq!(fs::read(a.join(sub)).unwrap(), fs::read(b.join(sub)).unwrap(), "{sub}");
    }
}

#[test]
fn gen_data_with_fraction_strips_unlabelled_labels() {
    let dir = tempfile::tempdir().unwrap();
    let out = cpcl(&["gen-data", "--out", dir.path().to_str().unwrap(), "--num-samples", "160", "--fraction", "1/16"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let ds = load_dataset(dir.path()).unwrap();
    assert_eq!(ds.samples.iter().filter(|s| s.label.is_some()).count(), 10);
}

#[test]
fn invalid_fraction_is_a_config_error_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let out = cpcl(&["gen-data", "--out", dir.path().to_str().unwrap(), "--fraction", "1/3"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("fraction"), "{}", stderr(&out));
}

#[test]
fn unknown_override_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = train(dir.path(), &["--set", "optim.learning_rate=0.1"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("optim.learning_rate"));
    let out = cpcl(&["gen-data", "--out", dir.path().to_str().unwrap(), "--set", "sigma=0"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn equal_branch_seeds_are_rejected_for_cpcl() {
    let dir = tempfile::tempdir().unwrap();
    let out = train(dir.path(), &["--seed-net-c", "3", "--seed-net-p", "3"]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn supervised_train_echoes_mode() {
    let dir = tempfile::tempdir().unwrap();
    let out = train(dir.path(), &["--mode", "supervised-only", "--fraction", "1/8", "--set", "data.train_samples=32"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report = read_json(&dir.path().join("report.json"));
    assert_eq!(report["config"]["mode"], "supervised-only");
    assert_eq!(report["config"]["fraction"], "1/8");
    assert_eq!(read_json(&dir.path().join("config.json"))["mode"], "supervised-only");
    assert!(dir.path().join("checkpoints/final/conservative.json").is_file());
    assert!(!dir.path().join("checkpoints/final/progressive.json").exists());
}

#[test]
fn explicit_default_strategy_reproduces_default_run() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("default");
    let b = dir.path().join("explicit");
    assert_eq!(code(&train(&a, &[])), 0);
    assert_eq!(code(&train(&b, &["--mode", "cpcl", "--strategy", "class-confusion-higher"])), 0);
    assert_eq!(fs::read(a.join("metrics.csv")).unwrap(), fs::read(b.join("metrics.csv")).unwrap());
}

#[test]
fn gamma_flag_is_reflected_in_logged_totals() {
    let dir = tempfile::tempdir().unwrap();
    let out = train(dir.path(), &["--gamma", "5"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report = read_json(&dir.path().join("report.json"));
    for step in report["steps"].as_array().unwrap() {
        let l = &step["loss"];
        assert_eq!(l["gamma"], 5.0);
        let (t, s, u) = (l["total"].as_f64().unwrap(), l["supervised"].as_f64().unwrap(), l["unsupervised"].as_f64().unwrap());
        assert_eq!(t, s + 5.0 * u);
    }
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"gamma": 2.0, "mode": "union-only"}"#).unwrap();
    let run = dir.path().join("run");
    let out = train(&run, &["--config", cfg.to_str().unwrap(), "--gamma", "0.5"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let echoed = read_json(&run.join("config.json"));
    assert_eq!(echoed["gamma"], 0.5);
    assert_eq!(echoed["mode"], "union-only");
}

/// Two-class toy: class 1 wherever the red channel is 1. A one-unit network
/// thresholds red at 0.5, so it is exact on noiseless data.
fn oracle_fixture(dir: &Path) {
    let (h, w) = (6, 6);
    let mut samples = Vec::new();
    for i in 0..3 {
        let labels: Vec<u8> = (0..h * w).map(|p| u8::from((p + i) % 3 == 0 || p % 7 == i)).collect();
        let mut image = vec![0.2; 3 * h * w];
        for (p, &l) in labels.iter().enumerate() {
            image[p] = f64::from(l);
        }
        samples.push(Sample {
            id: format!("s{i:05}"),
            image: GridTensor::new(vec![3, h, w], image).unwrap(),
            label: Some(LabelMap::new(h, w, labels).unwrap()),
        });
    }
    let spec = DatasetSpec {
        num_samples: 3,
        height: h,
        width: w,
        num_classes: 2,
        noise_sigma: 0.0,
        rng_seed: 0,
    };
    save_dataset(&Dataset { spec, samples }, &dir.join("data")).unwrap();

    let cfg = NetworkConfig {
        in_channels: 3,
        hidden: vec![1],
        num_classes: 2,
        kernel: 3,
    };
    let mut net = SegNetwork::new(cfg, 0).unwrap();
    // w0: 1×3×3×3, b0: 1, 1×1 classifier w1: 2×1, b1: 2
    let mut p = vec![0.0; net.num_parameters()];
    p[4] = 1.0; // hidden = relu(red at the centre tap)
    p[29] = 20.0; // class-1 logit = 20·hidden − 10
    p[31] = -10.0;
    net.set_flat_params(&p).unwrap();
    net.save_checkpoint(&dir.join("ckpt"), "conservative").unwrap();
    net.save_checkpoint(&dir.join("ckpt"), "progressive").unwrap();
}

#[test]
fn eval_of_oracle_checkpoint_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    oracle_fixture(dir.path());
    let out_dir = dir.path().join("eval");
    let out = cpcl(&[
        "eval",
        "--checkpoint",
        dir.path().join("ckpt").to_str().unwrap(),
        "--other",
        "progressive",
        "--dataset",
        dir.path().join("data").to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let m = read_json(&out_dir.join("metrics.json"));
    assert_eq!(m["miou"], 1.0);
    assert_eq!(m["overlap_ratio"], 1.0);
    assert!(out_dir.join("per_class.csv").is_file());
    assert!(out_dir.join("eval_config.json").is_file());
}

#[test]
fn eval_missing_checkpoint_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    oracle_fixture(dir.path());
    let missing = dir.path().join("nowhere");
    let out = cpcl(&[
        "eval",
        "--checkpoint",
        missing.to_str().unwrap(),
        "--dataset",
        dir.path().join("data").to_str().unwrap(),
        "--out",
        dir.path().join("eval").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("nowhere"), "{}", stderr(&out));
}

#[test]
fn ablate_emits_one_row_per_variant_with_identical_default_rows() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["ablate", "--out", dir.path().to_str().unwrap(), "--fraction", "1/4"];
    args.extend_from_slice(TINY);
    let out = cpcl(&args);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let mut rdr = csv::Reader::from_path(dir.path().join("ablation.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 10);
    let variants: Vec<&str> = rows.iter().map(|r| &r[1]).collect();
    for v in [
        "supervised-only",
        "intersection-only",
        "union-only",
        "cpcl-no-dynamic-loss",
        "mutual-direct",
        "cpcl",
        "pixel-confidence-higher",
        "pixel-confidence-lower",
        "class-confusion-lower",
        "class-confusion-higher",
    ] {
        assert!(variants.contains(&v), "{v}");
    }
    assert!(rows.iter().all(|r| &r[6] == "ok" && !r[4].is_empty()));
    let find = |v: &str| rows.iter().find(|r| &r[1] == v).unwrap().clone();
    let (a, b) = (find("cpcl"), find("class-confusion-higher"));
    assert_eq!((&a[4], &a[5]), (&b[4], &b[5]));
    assert_eq!(
        fs::read(dir.path().join("ablation-cpcl/metrics.csv")).unwrap(),
        fs::read(dir.path().join("strategy-class-confusion-higher/metrics.csv")).unwrap()
    );
}

#[test]
fn labeling_bench_and_report_summarise_a_run() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    assert_eq!(code(&train(&run, &[])), 0);

    let bench = dir.path().join("bench");
    let out = cpcl(&["labeling-bench", "--run", run.to_str().unwrap(), "--out", bench.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let mut rdr = csv::Reader::from_path(bench.join("labeling_bench.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    let coverage = |scheme: &str| -> f64 {
        rows.iter().find(|r| &r[0] == scheme).unwrap()[1].parse().unwrap()
    };
    assert!(coverage("intersection") <= coverage("union/class-confusion-higher"));
    assert_eq!(coverage("union/class-confusion-higher"), 1.0);

    let rep = dir.path().join("rep");
    let out = cpcl(&["report", run.to_str().unwrap(), "--out", rep.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let summary = fs::read_to_string(rep.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 2);
    assert!(summary.lines().nth(1).unwrap().contains(",cpcl,"));

    let out = cpcl(&["report", dir.path().join("missing").to_str().unwrap(), "--out", rep.to_str().unwrap()]);
    assert_eq!(code(&out), 3);
}

#[test]
fn train_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_eq!(code(&train(&a, &["--seed", "3"])), 0);
    assert_eq!(code(&train(&b, &["--seed", "3"])), 0);
    assert_eq!(fs::read(a.join("metrics.csv")).unwrap(), fs::read(b.join("metrics.csv")).unwrap());
}
