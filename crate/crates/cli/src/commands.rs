use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use cpcl_core::config::{load_dataset_spec, load_train_config, set_dataset, set_train, split_assignment};
use cpcl_core::dataio::{
    generate_dataset, load_dataset, partition, save_dataset, Dataset, DatasetSpec, Sample,
};
use cpcl_core::grid::{LabelMap, IGNORE};
use cpcl_core::loss::prediction_entropy;
use cpcl_core::metrics::{default_groups, overlap_ratio, ConfusionMatrix, MetricsSummary};
use cpcl_core::network::{confidence_map, predict_argmax, softmax_probs, SegNetwork};
use cpcl_core::pseudo::{
    compose_union, label_agreement, label_by_threshold, label_disagreement_baseline,
    AgreementMatrix, Branch, PseudoLabels, Strategy,
};
use cpcl_core::trainer::{infer, run_experiment, ExperimentReport, Mode, TrainConfig};
use cpcl_core::Error;
use serde::Serialize;
use serde_json::json;

use crate::{BenchArgs, EvalArgs, GenDataArgs, Overrides, ReportArgs, TrainArgs};

pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::InvalidInput(_) => 2,
            Error::Format { .. } | Error::Io { .. } => 3,
            Error::State(_) | Error::Consistency(_) => 4,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T = ()> = std::result::Result<T, CliError>;

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError {
        code: 3,
        message: format!("{}: {e}", path.display()),
    }
}

fn create_dir(dir: &Path) -> CliResult {
    fs::create_dir_all(dir).map_err(|e| io_error(dir, e))
}

fn write_text(path: &Path, text: &str) -> CliResult {
    fs::write(path, text).map_err(|e| io_error(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult {
    write_text(path, &serde_json::to_string_pretty(value).expect("serializable"))
}

/// Writes CSV rows; the first row is the header.
fn write_csv(path: &Path, rows: &[Vec<String>]) -> CliResult {
    let mut wtr = csv::Writer::from_path(path).map_err(|e| io_error(path, std::io::Error::other(e)))?;
    for r in rows {
        wtr.write_record(r).map_err(|e| io_error(path, std::io::Error::other(e)))?;
    }
    wtr.flush().map_err(|e| io_error(path, e))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn gen_data(args: GenDataArgs) -> CliResult {
    let mut spec = match &args.overrides.config {
        Some(path) => load_dataset_spec(path)?,
        None => DatasetSpec::default(),
    };
    for a in &args.overrides.set {
        let (k, v) = split_assignment(a)?;
        set_dataset(&mut spec, k, v)?;
    }
    if let Some(s) = args.seed {
        spec.rng_seed = s;
    }
    if let Some(s) = args.noise_sigma {
        spec.noise_sigma = s;
    }
    if let Some(n) = args.num_samples {
        spec.num_samples = n;
    }
    spec.validate()?;
    create_dir(&args.out)?;
    write_json(
        &args.out.join("gen_config.json"),
        &json!({ "spec": spec, "fraction": args.fraction }),
    )?;

    let mut dataset = generate_dataset(&spec)?;
    if let Some(f) = args.fraction {
        let (labeled, _) = partition(&dataset.samples, f, spec.rng_seed)?;
        let keep: std::collections::HashSet<&str> = labeled.iter().map(|s| s.id.as_str()).collect();
        for s in &mut dataset.samples {
            if !keep.contains(s.id.as_str()) {
                s.label = None;
            }
        }
    }
    save_dataset(&dataset, &args.out)?;
    let labeled = dataset.samples.iter().filter(|s| s.label.is_some()).count();
    println!(
        "wrote {} samples ({} labelled) of {}×{}, {} classes, noise σ={} to {}",
        dataset.len(),
        labeled,
        spec.height,
        spec.width,
        spec.num_classes,
        spec.noise_sigma,
        args.out.display()
    );
    Ok(())
}

fn resolve_train_config(args: &TrainArgs) -> CliResult<TrainConfig> {
    let mut cfg = match &args.overrides.config {
        Some(path) => load_train_config(path)?,
        None => TrainConfig::default(),
    };
    apply_sets(&mut cfg, &args.overrides)?;
    if let Some(s) = args.seed {
        set_train(&mut cfg, "seed", &s.to_string())?;
    }
    let flags: [(&str, Option<String>); 9] = [
        ("mode", args.mode.map(|m| m.to_string())),
        ("strategy", args.strategy.map(|s| s.to_string())),
        ("fraction", args.fraction.map(|f| f.to_string())),
        ("gamma", args.gamma.map(|g| g.to_string())),
        ("max_iter", args.max_iter.map(|n| n.to_string())),
        ("seed.net_c", args.seed_net_c.map(|s| s.to_string())),
        ("seed.net_p", args.seed_net_p.map(|s| s.to_string())),
        ("seed.data", args.seed_data.map(|s| s.to_string())),
        ("seed.augment", args.seed_augment.map(|s| s.to_string())),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            set_train(&mut cfg, k, &v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn apply_sets(cfg: &mut TrainConfig, overrides: &Overrides) -> CliResult {
    for a in &overrides.set {
        let (k, v) = split_assignment(a)?;
        set_train(cfg, k, v)?;
    }
    Ok(())
}

fn experiment_error(e: Error) -> CliError {
    match e {
        Error::InvalidInput(m) => CliError {
            code: 2,
            message: m,
        },
        Error::Format { .. } | Error::Io { .. } => e.into(),
        other => CliError {
            code: 4,
            message: format!("experiment failed: {other}"),
        },
    }
}

pub fn train(args: TrainArgs) -> CliResult {
    let cfg = resolve_train_config(&args)?;
    let report = run_experiment(&cfg, Some(&args.out)).map_err(experiment_error)?;
    println!(
        "{} ({}, fraction {}): final mIoU {:.4}{}; wrote {}",
        cfg.mode,
        cfg.strategy,
        cfg.fraction,
        report.final_miou,
        report
            .final_overlap_ratio
            .map(|o| format!(", branch overlap {o:.4}"))
            .unwrap_or_default(),
        args.out.display()
    );
    Ok(())
}

pub fn eval(args: EvalArgs) -> CliResult {
    create_dir(&args.out)?;
    write_json(
        &args.out.join("eval_config.json"),
        &json!({
            "checkpoint": args.checkpoint,
            "name": args.name,
            "other": args.other,
            "dataset": args.dataset,
        }),
    )?;
    let net = SegNetwork::load_checkpoint(&args.checkpoint, &args.name)?;
    let other = args
        .other
        .as_deref()
        .map(|n| SegNetwork::load_checkpoint(&args.checkpoint, n))
        .transpose()?;
    let dataset = load_dataset(&args.dataset)?;
    let num_classes = net.num_classes();
    if dataset.spec.num_classes != num_classes {
        return Err(CliError {
            code: 2,
            message: format!(
                "checkpoint predicts {num_classes} classes but the dataset has {}",
                dataset.spec.num_classes
            ),
        });
    }
    let mut cm = ConfusionMatrix::new(num_classes);
    let mut overlap = 0.0;
    let mut evaluated = 0usize;
    for s in dataset.samples.iter().filter(|s| s.label.is_some()) {
        let pred = infer(&net, &s.image)?;
        cm.accumulate(s.label.as_ref().expect("filtered"), &pred)?;
        if let Some(o) = &other {
            overlap += overlap_ratio(&pred, &infer(o, &s.image)?)?;
        }
        evaluated += 1;
    }
    if evaluated == 0 {
        return Err(CliError {
            code: 2,
            message: format!("dataset {} has no labelled samples", args.dataset.display()),
        });
    }
    let overlap = other.as_ref().map(|_| overlap / evaluated as f64);
    let summary = MetricsSummary::from_confusion(&cm, &default_groups(num_classes), overlap)?;
    summary.write(&args.out)?;
    println!(
        "mIoU {:.4} over {evaluated} labelled images; wrote {}",
        summary.miou,
        args.out.display()
    );
    Ok(())
}

struct AblationRow {
    table: &'static str,
    variant: String,
    mode: Mode,
    strategy: Option<Strategy>,
}

fn ablation_rows() -> Vec<AblationRow> {
    let mut rows: Vec<AblationRow> = Mode::ALL
        .into_iter()
        .map(|mode| AblationRow {
            table: "ablation",
            variant: mode.to_string(),
            mode,
            strategy: None,
        })
        .collect();
    rows.extend(Strategy::ALL.into_iter().map(|s| AblationRow {
        table: "strategy",
        variant: s.to_string(),
        mode: Mode::Cpcl,
        strategy: Some(s),
    }));
    rows
}

pub fn ablate(args: TrainArgs) -> CliResult {
    let mut base = resolve_train_config(&args)?;
    if args.mode.is_some() {
        return Err(CliError {
            code: 2,
            message: "ablate runs every mode; --mode is not accepted".into(),
        });
    }
    base.mode = Mode::Cpcl;
    create_dir(&args.out)?;
    write_json(&args.out.join("config.json"), &base)?;

    let mut table = vec![[
        "table",
        "variant",
        "mode",
        "strategy",
        "final_miou",
        "overlap_ratio",
        "status",
        "error",
    ]
    .map(String::from)
    .to_vec()];
    let mut failures = 0;
    for row in ablation_rows() {
        let mut cfg = base.clone();
        cfg.mode = row.mode;
        if let Some(s) = row.strategy {
            cfg.strategy = s;
        }
        let dir = args.out.join(format!("{}-{}", row.table, row.variant));
        let result = run_experiment(&cfg, Some(&dir));
        let strategy = if row.mode.uses_pair() {
            cfg.strategy.to_string()
        } else {
            String::new()
        };
        let (miou, overlap, status, error) = match result {
            Ok(r) => (r.final_miou.to_string(), opt(r.final_overlap_ratio), "ok", String::new()),
            Err(e) => {
                failures += 1;
                (String::new(), String::new(), "failed", e.to_string())
            }
        };
        println!("{:<8} {:<24} {} {}", row.table, row.variant, status, miou);
        table.push(vec![
            row.table.to_string(),
            row.variant,
            row.mode.to_string(),
            strategy,
            miou,
            overlap,
            status.to_string(),
            error,
        ]);
    }
    write_csv(&args.out.join("ablation.csv"), &table)?;
    if failures > 0 {
        return Err(CliError {
            code: 4,
            message: format!("{failures} ablation row(s) failed; see ablation.csv"),
        });
    }
    Ok(())
}

#[derive(Default, Clone, Copy)]
struct Tally {
    pixels: u64,
    labelled: u64,
    correct: u64,
}

impl Tally {
    fn add(&mut self, labels: &LabelMap, gt: &LabelMap) {
        for (&y, &g) in labels.data().iter().zip(gt.data()) {
            self.pixels += 1;
            if y != IGNORE {
                self.labelled += 1;
                self.correct += u64::from(y == g);
            }
        }
    }

    fn row(&self, scheme: &str) -> Vec<String> {
        let ratio = |a: u64, b: u64| if b == 0 { String::new() } else { (a as f64 / b as f64).to_string() };
        vec![
            scheme.to_string(),
            ratio(self.labelled, self.pixels),
            ratio(self.correct, self.labelled),
            self.labelled.to_string(),
        ]
    }
}

/// Recovers ground truth for the unlabelled training samples of a run.
fn unlabeled_with_truth(cfg: &TrainConfig) -> CliResult<Vec<Sample>> {
    let dataset: Dataset = generate_dataset(&cfg.dataset_spec())?;
    let train = &dataset.samples[..cfg.data.train_samples];
    let (_, unlabeled) = partition(train, cfg.fraction, cfg.seeds.data)?;
    let by_id: BTreeMap<&str, &Sample> = train.iter().map(|s| (s.id.as_str(), s)).collect();
    Ok(unlabeled.iter().map(|s| by_id[s.id.as_str()].clone()).collect())
}

pub fn labeling_bench(args: BenchArgs) -> CliResult {
    let cfg = load_train_config(&args.run.join("config.json"))?;
    let ckpt = args
        .checkpoint
        .clone()
        .unwrap_or_else(|| args.run.join("checkpoints").join("final"));
    if args.thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(CliError {
            code: 2,
            message: "thresholds must lie in [0, 1]".into(),
        });
    }
    create_dir(&args.out)?;
    write_json(
        &args.out.join("bench_config.json"),
        &json!({
            "run": args.run,
            "checkpoint": ckpt,
            "thresholds": args.thresholds,
            "threshold_branch": args.threshold_branch,
        }),
    )?;
    let net_c = SegNetwork::load_checkpoint(&ckpt, "conservative")?;
    let net_p = SegNetwork::load_checkpoint(&ckpt, "progressive")?;
    let samples = unlabeled_with_truth(&cfg)?;

    struct Weak {
        y_c: LabelMap,
        y_p: LabelMap,
        conf_c: cpcl_core::GridTensor,
        conf_p: cpcl_core::GridTensor,
        probs_thr: cpcl_core::GridTensor,
        gt: LabelMap,
    }
    let mut matrix = AgreementMatrix::new(cfg.data.num_classes);
    let mut entropy_sum = 0.0;
    let mut entropy_px = 0usize;
    let mut weak = Vec::with_capacity(samples.len());
    for s in &samples {
        let pc = softmax_probs(&net_c.predict_logits(&s.image)?)?;
        let pp = softmax_probs(&net_p.predict_logits(&s.image)?)?;
        let ent = prediction_entropy(&pc)?;
        entropy_sum += ent.data().iter().sum::<f64>();
        entropy_px += ent.len();
        let w = Weak {
            y_c: predict_argmax(&pc)?,
            y_p: predict_argmax(&pp)?,
            conf_c: confidence_map(&pc)?,
            conf_p: confidence_map(&pp)?,
            probs_thr: match args.threshold_branch {
                Branch::Conservative => pc,
                Branch::Progressive => pp,
            },
            gt: s.label.clone().expect("ground truth kept"),
        };
        matrix.accumulate(&w.y_c, &w.y_p)?;
        weak.push(w);
    }
    let indicator = cpcl_core::pseudo::disagreement_indicator(&matrix);

    let mut rows = vec![["scheme", "coverage", "accuracy", "labelled_pixels"].map(String::from).to_vec()];
    let mut tallies: Vec<(String, Tally)> = Vec::new();
    let mut tally = |name: String, labels: &PseudoLabels, gt: &LabelMap| {
        match tallies.iter_mut().find(|(n, _)| *n == name) {
            Some((_, t)) => t.add(&labels.labels, gt),
            None => {
                let mut t = Tally::default();
                t.add(&labels.labels, gt);
                tallies.push((name, t));
            }
        }
    };
    for w in &weak {
        tally("conservative".into(), &PseudoLabels::unweighted(w.y_c.clone()), &w.gt);
        tally("progressive".into(), &PseudoLabels::unweighted(w.y_p.clone()), &w.gt);
        let l_a = label_agreement(&w.y_c, &w.y_p)?;
        tally("intersection".into(), &l_a, &w.gt);
        for s in Strategy::ALL {
            let l_d = label_disagreement_baseline(&w.y_c, &w.y_p, &w.conf_c, &w.conf_p, &indicator, s)?;
            tally(format!("union/{s}"), &compose_union(&l_a, &l_d.pseudo)?, &w.gt);
        }
        for &t in &args.thresholds {
            tally(format!("threshold/{}/{t}", args.threshold_branch), &label_by_threshold(&w.probs_thr, t)?, &w.gt);
        }
    }
    for (name, t) in &tallies {
        rows.push(t.row(name));
    }
    write_csv(&args.out.join("labeling_bench.csv"), &rows)?;
    write_json(
        &args.out.join("labeling_bench.json"),
        &json!({
            "images": samples.len(),
            "mean_entropy_conservative": if entropy_px == 0 { 0.0 } else { entropy_sum / entropy_px as f64 },
            "disagreement_indicator": indicator.values(),
            "agreement_matrix": matrix.counts(),
        }),
    )?;
    for r in &rows[1..] {
        println!("{:<40} coverage {:>8} accuracy {}", r[0], short(&r[1]), short(&r[2]));
    }
    Ok(())
}

fn short(v: &str) -> String {
    v.parse::<f64>().map(|x| format!("{x:.4}")).unwrap_or_else(|_| "-".into())
}

fn read_report(dir: &Path) -> CliResult<ExperimentReport> {
    let path = dir.join("report.json");
    let text = fs::read_to_string(&path).map_err(|e| io_error(&path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError {
        code: 3,
        message: format!("{}: {e}", path.display()),
    })
}

pub fn report(args: ReportArgs) -> CliResult {
    create_dir(&args.out)?;
    write_json(&args.out.join("report_config.json"), &json!({ "runs": args.runs }))?;
    let mut rows = vec![[
        "run",
        "mode",
        "strategy",
        "fraction",
        "gamma",
        "seed_data",
        "steps",
        "final_miou",
        "overlap_ratio",
    ]
    .map(String::from)
    .to_vec()];
    let mut by_mode: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for dir in &args.runs {
        let r = read_report(dir)?;
        let c = &r.config;
        let key = if c.mode == Mode::Cpcl {
            format!("cpcl/{}", c.strategy)
        } else {
            c.mode.to_string()
        };
        by_mode.entry(key).or_default().push(r.final_miou);
        rows.push(vec![
            dir.display().to_string(),
            c.mode.to_string(),
            c.strategy.to_string(),
            c.fraction.to_string(),
            c.gamma.to_string(),
            c.seeds.data.to_string(),
            r.steps.len().to_string(),
            r.final_miou.to_string(),
            opt(r.final_overlap_ratio),
        ]);
    }
    write_csv(&args.out.join("summary.csv"), &rows)?;

    let mut grouped = vec![["variant", "runs", "mean_miou", "std_miou"].map(String::from).to_vec()];
    for (variant, v) in &by_mode {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        println!("{variant:<40} runs {:>3}  mIoU {mean:.4} ± {std:.4}", v.len());
        grouped.push(vec![variant.clone(), v.len().to_string(), mean.to_string(), std.to_string()]);
    }
    write_csv(&args.out.join("summary_by_variant.csv"), &grouped)?;
    Ok(())
}
