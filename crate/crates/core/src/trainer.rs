//! Training orchestration: the supervised baseline, CPCL, its ablations, and a
//! deterministic experiment runner that writes `config.json`, `metrics.csv`,
//! `report.json` and checkpoints.
//!
//! One CPCL iteration, per unlabeled pair `(X_1, X_2)`:
//! 1. sample a CutMix mask and build `X_s`;
//! 2. run both nets on the weak images, mix their argmax maps and confidences
//!    with the same mask (`Y_cw`, `Y_pw`, `b_c`, `b_p`);
//! 3. build the batch agreement matrix and disagreement indicator;
//! 4. derive `L_a`, `L_d`, `L_inter`, `L_union` and the dynamic weights;
//! 5. supervise the conservative strong prediction with `L_inter` and the
//!    progressive one with `L_union`;
//!
//! then add the supervised loss of both nets on the labeled batch and take one
//! SGD step per net. Pseudo labels and weights are constants.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{make_strong_image, sample_mask, CutMixConfig};
use crate::dataio::{generate_dataset, partition, DatasetSpec, Fraction, Sample, IMAGE_CHANNELS};
use crate::error::{Error, Result};
use crate::grid::{label_mix, elementwise_mix, GridTensor, LabelMap, MixMask};
use crate::loss::{dynamic_weight, sup_loss, total_loss, unsup_loss, weighted_cross_entropy, LossReport};
use crate::metrics::{default_groups, overlap_ratio, ConfusionMatrix};
use crate::network::{
    confidence_map, predict_argmax, sgd_step, softmax_probs, Gradients, NetworkConfig,
    OptimizerHyper, OptimizerState, SegNetwork,
};
use crate::pseudo::{
    agreement_map, compose_intersection, compose_union, disagreement_indicator,
    label_agreement, label_disagreement_baseline, AgreementMatrix, Branch, PseudoLabels, Strategy,
};
use crate::rng::{seeded, stream, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    SupervisedOnly,
    Cpcl,
    IntersectionOnly,
    UnionOnly,
    MutualDirect,
    CpclNoDynamicLoss,
}

impl Mode {
    pub const ALL: [Mode; 6] = [
        Mode::SupervisedOnly,
        Mode::IntersectionOnly,
        Mode::UnionOnly,
        Mode::CpclNoDynamicLoss,
        Mode::MutualDirect,
        Mode::Cpcl,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::SupervisedOnly => "supervised-only",
            Mode::Cpcl => "cpcl",
            Mode::IntersectionOnly => "intersection-only",
            Mode::UnionOnly => "union-only",
            Mode::MutualDirect => "mutual-direct",
            Mode::CpclNoDynamicLoss => "cpcl-no-dynamic-loss",
        }
    }

    pub fn uses_pair(self) -> bool {
        self != Mode::SupervisedOnly
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown mode '{s}' (expected one of: {})",
                    Mode::ALL.map(Mode::as_str).join(", ")
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub net_c: u64,
    pub net_p: u64,
    pub data: u64,
    pub augment: u64,
}

impl Seeds {
    /// Distinct seeds for every role, derived from one base seed.
    pub fn from_base(base: u64) -> Self {
        Self {
            net_c: base.wrapping_mul(4),
            net_p: base.wrapping_mul(4) + 1,
            data: base.wrapping_mul(4) + 2,
            augment: base.wrapping_mul(4) + 3,
        }
    }
}

impl Default for Seeds {
    fn default() -> Self {
        Self::from_base(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub train_samples: usize,
    pub val_samples: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub noise_sigma: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_samples: 160,
            val_samples: 40,
            height: 32,
            width: 32,
            num_classes: 4,
            noise_sigma: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: Mode,
    pub strategy: Strategy,
    pub gamma: f64,
    pub fraction: Fraction,
    pub labeled_batch: usize,
    pub unlabeled_batch: usize,
    pub eval_every: usize,
    /// Branch used for evaluation and inference.
    pub infer_branch: Branch,
    pub optim: OptimizerHyper,
    pub seeds: Seeds,
    pub data: DataConfig,
    pub hidden: Vec<usize>,
    pub cutmix: CutMixConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Cpcl,
            strategy: Strategy::ClassConfusionHigher,
            gamma: 1.0,
            fraction: Fraction::Eighth,
            labeled_batch: 8,
            unlabeled_batch: 8,
            eval_every: 250,
            infer_branch: Branch::Conservative,
            optim: OptimizerHyper::default(),
            seeds: Seeds::default(),
            data: DataConfig::default(),
            hidden: NetworkConfig::default().hidden,
            cutmix: CutMixConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn network(&self) -> NetworkConfig {
        NetworkConfig {
            in_channels: IMAGE_CHANNELS,
            hidden: self.hidden.clone(),
            num_classes: self.data.num_classes,
            kernel: 3,
        }
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            num_samples: self.data.train_samples + self.data.val_samples,
            height: self.data.height,
            width: self.data.width,
            num_classes: self.data.num_classes,
            noise_sigma: self.data.noise_sigma,
            rng_seed: self.seeds.data,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::invalid(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if self.labeled_batch == 0 || self.unlabeled_batch == 0 {
            return Err(Error::invalid("batch sizes must be positive"));
        }
        if self.eval_every == 0 {
            return Err(Error::invalid("eval_every must be positive"));
        }
        if self.data.train_samples == 0 || self.data.val_samples == 0 {
            return Err(Error::invalid("train and validation sets must be nonempty"));
        }
        if self.mode.uses_pair() && self.seeds.net_c == self.seeds.net_p {
            return Err(Error::invalid(format!(
                "mode {} needs differently initialised networks: seed.net_c == seed.net_p == {}",
                self.mode, self.seeds.net_c
            )));
        }
        if self.mode == Mode::SupervisedOnly && self.infer_branch == Branch::Progressive {
            return Err(Error::invalid("supervised-only trains no progressive branch"));
        }
        self.network().validate()?;
        self.dataset_spec().validate()?;
        self.cutmix.validate()?;
        if self.data.height < 4 || self.data.width < 4 {
            return Err(Error::invalid("images are too small for cutmix"));
        }
        OptimizerState::new(&SegNetwork::new(self.network(), 0)?, self.optim.clone())?;
        Ok(())
    }
}

/// The two co-trained networks and their independent optimizer states.
#[derive(Debug, Clone)]
pub struct BranchPair {
    pub conservative: SegNetwork,
    pub progressive: SegNetwork,
    pub opt_c: OptimizerState,
    pub opt_p: OptimizerState,
}

impl BranchPair {
    pub fn new(network: NetworkConfig, seed_c: u64, seed_p: u64, hyper: OptimizerHyper) -> Result<Self> {
        if seed_c == seed_p {
            return Err(Error::invalid("branches must be initialised with different seeds"));
        }
        Self::from_networks(
            SegNetwork::new(network.clone(), seed_c)?,
            SegNetwork::new(network, seed_p)?,
            hyper,
        )
    }

    /// Pairs two existing networks without the distinct-initialisation check.
    pub fn from_networks(conservative: SegNetwork, progressive: SegNetwork, hyper: OptimizerHyper) -> Result<Self> {
        if conservative.config() != progressive.config() {
            return Err(Error::invalid("branches must share one architecture"));
        }
        let opt_c = OptimizerState::new(&conservative, hyper.clone())?;
        let opt_p = OptimizerState::new(&progressive, hyper)?;
        Ok(Self {
            conservative,
            progressive,
            opt_c,
            opt_p,
        })
    }

    pub fn branch(&self, branch: Branch) -> &SegNetwork {
        match branch {
            Branch::Conservative => &self.conservative,
            Branch::Progressive => &self.progressive,
        }
    }

    pub fn infer(&self, image: &GridTensor, branch: Branch) -> Result<LabelMap> {
        infer(self.branch(branch), image)
    }
}

/// Argmax segmentation of `image`.
pub fn infer(net: &SegNetwork, image: &GridTensor) -> Result<LabelMap> {
    predict_argmax(&softmax_probs(&net.predict_logits(image)?)?)
}

pub type LabeledBatch<'a> = [(&'a GridTensor, &'a LabelMap)];
pub type UnlabeledBatch<'a> = [(&'a GridTensor, &'a GridTensor)];

/// Mean supervised loss over the batch; adds `(1/B)·∇` into `grads`.
fn accumulate_supervised(net: &mut SegNetwork, batch: &LabeledBatch<'_>, grads: &mut Gradients) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("labeled batch is empty"));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for (image, gt) in batch {
        let probs = softmax_probs(&net.forward(image)?)?;
        let (loss, mut grad) = sup_loss(gt, &probs)?;
        grad.scale(scale);
        grads.add_assign(&net.backward(&grad)?)?;
        total += loss;
    }
    Ok(total * scale)
}

/// Plain cross-entropy step on labeled data only.
pub fn supervised_step(
    net: &mut SegNetwork,
    state: &mut OptimizerState,
    batch: &LabeledBatch<'_>,
    iter: usize,
) -> Result<LossReport> {
    let mut grads = Gradients::zeros_like(net);
    let sup = accumulate_supervised(net, batch, &mut grads)?;
    sgd_step(net, &grads, state, iter)?;
    total_loss(sup, 0.0, 0.0)
}

/// Weak-view predictions of both branches, already mixed with the pair's mask.
#[derive(Debug, Clone)]
pub struct WeakView {
    pub mask: MixMask,
    pub strong: GridTensor,
    pub y_cw: LabelMap,
    pub y_pw: LabelMap,
    pub conf_c: GridTensor,
    pub conf_p: GridTensor,
}

fn weak_prediction(net: &SegNetwork, image: &GridTensor) -> Result<(LabelMap, GridTensor)> {
    let probs = softmax_probs(&net.predict_logits(image)?)?;
    Ok((predict_argmax(&probs)?, confidence_map(&probs)?))
}

/// Steps 1–2 for one unlabeled pair.
pub fn weak_view(pair: &BranchPair, x1: &GridTensor, x2: &GridTensor, mask: MixMask) -> Result<WeakView> {
    let strong = make_strong_image(x1, x2, &mask)?;
    let (yc1, bc1) = weak_prediction(&pair.conservative, x1)?;
    let (yc2, bc2) = weak_prediction(&pair.conservative, x2)?;
    let (yp1, bp1) = weak_prediction(&pair.progressive, x1)?;
    let (yp2, bp2) = weak_prediction(&pair.progressive, x2)?;
    Ok(WeakView {
        y_cw: label_mix(&yc1, &yc2, &mask)?,
        y_pw: label_mix(&yp1, &yp2, &mask)?,
        conf_c: elementwise_mix(&bc1, &bc2, &mask)?,
        conf_p: elementwise_mix(&bp1, &bp2, &mask)?,
        mask,
        strong,
    })
}

/// Targets and weights for the two strong predictions of one pair.
#[derive(Debug, Clone)]
pub struct PairTargets {
    pub target_c: PseudoLabels,
    pub target_p: PseudoLabels,
    /// `Some` when both branches share one weight map.
    pub shared_weight: Option<GridTensor>,
}

/// Pseudo targets for one pair under `mode` (any mode except supervised-only).
pub fn pair_targets(
    view: &WeakView,
    indicator: &crate::pseudo::DisagreementIndicator,
    mode: Mode,
    strategy: Strategy,
) -> Result<PairTargets> {
    let (h, w) = view.y_cw.dims();
    if mode == Mode::MutualDirect {
        let target_c = PseudoLabels::unweighted(view.y_pw.clone()).with_weights(&view.conf_p)?;
        let target_p = PseudoLabels::unweighted(view.y_cw.clone()).with_weights(&view.conf_c)?;
        return Ok(PairTargets {
            target_c,
            target_p,
            shared_weight: None,
        });
    }
    if mode == Mode::SupervisedOnly {
        return Err(Error::invalid("supervised-only has no pseudo targets"));
    }
    let agree = agreement_map(&view.y_cw, &view.y_pw)?;
    let l_a = label_agreement(&view.y_cw, &view.y_pw)?;
    let l_d = label_disagreement_baseline(
        &view.y_cw,
        &view.y_pw,
        &view.conf_c,
        &view.conf_p,
        indicator,
        strategy,
    )?;
    let omega = if mode == Mode::CpclNoDynamicLoss {
        GridTensor::filled(&[h, w], 1.0)
    } else {
        dynamic_weight(&agree, &view.conf_c, &view.conf_p, &l_d.source)?
    };
    let l_a = l_a.with_weights(&omega)?;
    let l_d = l_d.pseudo.with_weights(&omega)?;
    let inter = compose_intersection(&l_a);
    let union = compose_union(&l_a, &l_d)?;
    let (target_c, target_p) = match mode {
        Mode::IntersectionOnly => (inter.clone(), inter),
        Mode::UnionOnly => (union.clone(), union),
        _ => (inter, union),
    };
    Ok(PairTargets {
        target_c,
        target_p,
        shared_weight: Some(omega),
    })
}

/// Batch agreement matrix over all pairs' mixed weak predictions.
pub fn batch_indicator(views: &[WeakView], num_classes: usize) -> Result<crate::pseudo::DisagreementIndicator> {
    let mut m = AgreementMatrix::new(num_classes);
    for v in views {
        m.accumulate(&v.y_cw, &v.y_pw)?;
    }
    Ok(disagreement_indicator(&m))
}

/// One iteration for any two-branch mode. `rng` drives the CutMix masks.
pub fn collaborative_step(
    pair: &mut BranchPair,
    labeled: &LabeledBatch<'_>,
    unlabeled: &UnlabeledBatch<'_>,
    cfg: &TrainConfig,
    iter: usize,
    rng: &mut SeededRng,
) -> Result<LossReport> {
    if !cfg.mode.uses_pair() {
        return Err(Error::invalid("collaborative_step needs a two-branch mode"));
    }
    if unlabeled.is_empty() {
        return Err(Error::invalid("unlabeled batch is empty"));
    }
    let num_classes = pair.conservative.num_classes();

    let mut views = Vec::with_capacity(unlabeled.len());
    for (x1, x2) in unlabeled {
        let (_, h, w) = x1.chw()?;
        let mask = sample_mask(&cfg.cutmix, h, w, rng)?;
        views.push(weak_view(pair, x1, x2, mask)?);
    }
    let indicator = batch_indicator(&views, num_classes)?;

    let scale = 1.0 / unlabeled.len() as f64;
    let mut unsup_c = Gradients::zeros_like(&pair.conservative);
    let mut unsup_p = Gradients::zeros_like(&pair.progressive);
    let mut unsup_total = 0.0;
    let mut weight_sum = 0.0;
    let mut weight_count = 0usize;
    for view in &views {
        let targets = pair_targets(view, &indicator, cfg.mode, cfg.strategy)?;
        let probs_cs = softmax_probs(&pair.conservative.forward(&view.strong)?)?;
        let probs_ps = softmax_probs(&pair.progressive.forward(&view.strong)?)?;
        let (value, mut grad_cs, mut grad_ps) = match &targets.shared_weight {
            Some(omega) => {
                let u = unsup_loss(&targets.target_c, &targets.target_p, &probs_cs, &probs_ps, omega)?;
                (u.value, u.grad_cs, u.grad_ps)
            }
            None => {
                let n = view.y_cw.data().len() as f64;
                let (lc, gc) = weighted_cross_entropy(&targets.target_c.labels, &probs_cs, &targets.target_c.weights, n)?;
                let (lp, gp) = weighted_cross_entropy(&targets.target_p.labels, &probs_ps, &targets.target_p.weights, n)?;
                (lc + lp, gc, gp)
            }
        };
        unsup_total += value;
        for t in [&targets.target_c, &targets.target_p] {
            weight_sum += t.weights.data().iter().sum::<f64>();
            weight_count += t.support();
        }
        grad_cs.scale(scale);
        unsup_c.add_assign(&pair.conservative.backward(&grad_cs)?)?;
        grad_ps.scale(scale);
        unsup_p.add_assign(&pair.progressive.backward(&grad_ps)?)?;
    }
    let unsup = unsup_total * scale;

    let mut grads_c = Gradients::zeros_like(&pair.conservative);
    let mut grads_p = Gradients::zeros_like(&pair.progressive);
    let sup_c = accumulate_supervised(&mut pair.conservative, labeled, &mut grads_c)?;
    let sup_p = accumulate_supervised(&mut pair.progressive, labeled, &mut grads_p)?;
    unsup_c.scale(cfg.gamma);
    unsup_p.scale(cfg.gamma);
    grads_c.add_assign(&unsup_c)?;
    grads_p.add_assign(&unsup_p)?;
    sgd_step(&mut pair.conservative, &grads_c, &mut pair.opt_c, iter)?;
    sgd_step(&mut pair.progressive, &grads_p, &mut pair.opt_p, iter)?;

    let mut report = total_loss(sup_c + sup_p, unsup, cfg.gamma)?;
    report.mean_weight = if weight_count == 0 {
        0.0
    } else {
        weight_sum / weight_count as f64
    };
    Ok(report)
}

/// One CPCL iteration (`cfg.mode` must be `cpcl`).
pub fn cpcl_step(
    pair: &mut BranchPair,
    labeled: &LabeledBatch<'_>,
    unlabeled: &UnlabeledBatch<'_>,
    cfg: &TrainConfig,
    iter: usize,
    rng: &mut SeededRng,
) -> Result<LossReport> {
    if cfg.mode != Mode::Cpcl {
        return Err(Error::invalid(format!("cpcl_step called with mode {}", cfg.mode)));
    }
    collaborative_step(pair, labeled, unlabeled, cfg, iter, rng)
}

/// One iteration of an ablation variant selected by `cfg.mode`.
pub fn ablation_step(
    pair: &mut BranchPair,
    labeled: &LabeledBatch<'_>,
    unlabeled: &UnlabeledBatch<'_>,
    cfg: &TrainConfig,
    iter: usize,
    rng: &mut SeededRng,
) -> Result<LossReport> {
    match cfg.mode {
        Mode::IntersectionOnly | Mode::UnionOnly | Mode::MutualDirect | Mode::CpclNoDynamicLoss => {
            collaborative_step(pair, labeled, unlabeled, cfg, iter, rng)
        }
        other => Err(Error::invalid(format!("{other} is not an ablation mode"))),
    }
}

/// Cycles through a dataset in reshuffled epochs.
#[derive(Debug, Clone)]
pub struct EpochSampler {
    order: Vec<usize>,
    cursor: usize,
    rng: SeededRng,
}

impl EpochSampler {
    pub fn new(len: usize, rng: SeededRng) -> Result<Self> {
        if len == 0 {
            return Err(Error::invalid("cannot sample from an empty set"));
        }
        let mut s = Self {
            order: (0..len).collect(),
            cursor: 0,
            rng,
        };
        s.order.shuffle(&mut s.rng);
        Ok(s)
    }

    pub fn next_index(&mut self) -> usize {
        if self.cursor == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        self.cursor += 1;
        self.order[self.cursor - 1]
    }

    pub fn next_batch(&mut self, n: usize) -> Vec<usize> {
        (0..n).map(|_| self.next_index()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub miou: f64,
    pub per_class_iou: Vec<Option<f64>>,
    /// Agreement between the branches' predictions, for two-branch modes.
    pub overlap_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: LossReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: TrainConfig,
    pub labeled_count: usize,
    pub unlabeled_count: usize,
    pub evals: Vec<EvalRecord>,
    pub steps: Vec<StepRecord>,
    pub final_miou: f64,
    pub final_per_class_iou: Vec<Option<f64>>,
    pub final_group_miou: std::collections::BTreeMap<String, Option<f64>>,
    pub final_overlap_ratio: Option<f64>,
}

enum Model {
    Single {
        net: SegNetwork,
        opt: OptimizerState,
    },
    Pair(Box<BranchPair>),
}

impl Model {
    fn inference_net(&self, branch: Branch) -> &SegNetwork {
        match self {
            Model::Single { net, .. } => net,
            Model::Pair(p) => p.branch(branch),
        }
    }

    fn save(&self, dir: &Path) -> Result<()> {
        match self {
            Model::Single { net, .. } => net.save_checkpoint(dir, "conservative"),
            Model::Pair(p) => {
                p.conservative.save_checkpoint(dir, "conservative")?;
                p.progressive.save_checkpoint(dir, "progressive")
            }
        }
    }
}

/// Evaluates the selected branch against ground truth, plus inter-branch
/// overlap when a second network is given.
pub fn evaluate(
    net: &SegNetwork,
    other: Option<&SegNetwork>,
    val: &[Sample],
    num_classes: usize,
) -> Result<(ConfusionMatrix, Option<f64>)> {
    let mut cm = ConfusionMatrix::new(num_classes);
    let mut overlap = 0.0;
    for s in val {
        let gt = s
            .label
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("validation sample {} has no label", s.id)))?;
        let pred = infer(net, &s.image)?;
        cm.accumulate(gt, &pred)?;
        if let Some(o) = other {
            overlap += overlap_ratio(&pred, &infer(o, &s.image)?)?;
        }
    }
    let overlap = other.map(|_| overlap / val.len().max(1) as f64);
    Ok((cm, overlap))
}

fn eval_model(model: &Model, cfg: &TrainConfig, val: &[Sample], step: usize) -> Result<(EvalRecord, ConfusionMatrix)> {
    let net = model.inference_net(cfg.infer_branch);
    let other = match model {
        Model::Single { .. } => None,
        Model::Pair(p) => Some(match cfg.infer_branch {
            Branch::Conservative => &p.progressive,
            Branch::Progressive => &p.conservative,
        }),
    };
    let (cm, overlap) = evaluate(net, other, val, cfg.data.num_classes)?;
    Ok((
        EvalRecord {
            step,
            miou: cm.miou(),
            per_class_iou: cm.iou_per_class(),
            overlap_ratio: overlap,
        },
        cm,
    ))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::io(path, std::io::Error::other(e))
}

/// `metrics.csv`: one row per step; `miou` is filled on evaluation steps.
pub fn write_metrics_csv(path: &Path, report: &ExperimentReport) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path).map_err(csv_err(path))?;
    wtr.write_record(["step", "loss_sup", "loss_unsup", "loss_total", "mean_weight", "miou"])
        .map_err(csv_err(path))?;
    for rec in &report.steps {
        let miou = report
            .evals
            .iter()
            .find(|e| e.step == rec.step)
            .map(|e| e.miou.to_string())
            .unwrap_or_default();
        wtr.write_record([
            rec.step.to_string(),
            rec.loss.supervised.to_string(),
            rec.loss.unsupervised.to_string(),
            rec.loss.total.to_string(),
            rec.loss.mean_weight.to_string(),
            miou,
        ])
        .map_err(csv_err(path))?;
    }
    wtr.flush().map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Generates the data, trains according to `cfg`, evaluates every
/// `cfg.eval_every` steps (and at step 0 and the end). With `out_dir`, writes
/// `config.json` first, then checkpoints, `metrics.csv` and `report.json`.
pub fn run_experiment(cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<ExperimentReport> {
    cfg.validate()?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_json(&dir.join("config.json"), cfg)?;
    }

    let dataset = generate_dataset(&cfg.dataset_spec())?;
    let (train, val) = dataset.samples.split_at(cfg.data.train_samples);
    let (labeled, unlabeled) = partition(train, cfg.fraction, cfg.seeds.data)?;
    if cfg.mode.uses_pair() && unlabeled.is_empty() {
        return Err(Error::invalid("no unlabeled samples left for semi-supervised training"));
    }

    let mut labeled_sampler = EpochSampler::new(labeled.len(), seeded(cfg.seeds.data, stream::LABELED_BATCHES))?;
    let mut unlabeled_sampler = if unlabeled.is_empty() {
        None
    } else {
        Some(EpochSampler::new(unlabeled.len(), seeded(cfg.seeds.data, stream::UNLABELED_BATCHES))?)
    };
    let mut aug_rng = seeded(cfg.seeds.augment, stream::CUTMIX);

    let network = cfg.network();
    let mut model = if cfg.mode.uses_pair() {
        Model::Pair(Box::new(BranchPair::new(
            network,
            cfg.seeds.net_c,
            cfg.seeds.net_p,
            cfg.optim.clone(),
        )?))
    } else {
        let net = SegNetwork::new(network, cfg.seeds.net_c)?;
        let opt = OptimizerState::new(&net, cfg.optim.clone())?;
        Model::Single { net, opt }
    };

    let checkpoint_root: Option<PathBuf> = out_dir.map(|d| d.join("checkpoints"));
    let max_iter = cfg.optim.max_iter;
    let mut evals = vec![eval_model(&model, cfg, val, 0)?.0];
    let mut steps = Vec::with_capacity(max_iter);
    let mut last_cm = None;

    for iter in 0..max_iter {
        let lb_idx = labeled_sampler.next_batch(cfg.labeled_batch);
        let lb: Vec<(&GridTensor, &LabelMap)> = lb_idx
            .iter()
            .map(|&i| {
                let s = &labeled[i];
                (&s.image, s.label.as_ref().expect("labeled sample"))
            })
            .collect();
        let loss = match &mut model {
            Model::Single { net, opt } => supervised_step(net, opt, &lb, iter)?,
            Model::Pair(pair) => {
                let sampler = unlabeled_sampler.as_mut().expect("unlabeled data present");
                let ub_idx = sampler.next_batch(2 * cfg.unlabeled_batch);
                let ub: Vec<(&GridTensor, &GridTensor)> = ub_idx
                    .chunks(2)
                    .map(|c| (&unlabeled[c[0]].image, &unlabeled[c[1]].image))
                    .collect();
                collaborative_step(pair, &lb, &ub, cfg, iter, &mut aug_rng)?
            }
        };
        if !loss.total.is_finite() {
            return Err(Error::Consistency(format!("loss diverged at step {}", iter + 1)));
        }
        let step = iter + 1;
        steps.push(StepRecord { step, loss });
        if step % cfg.eval_every == 0 || step == max_iter {
            let (rec, cm) = eval_model(&model, cfg, val, step)?;
            evals.push(rec);
            last_cm = Some(cm);
            if let Some(root) = &checkpoint_root {
                model.save(&root.join(format!("step_{step:06}")))?;
            }
        }
    }

    let cm = match last_cm {
        Some(cm) => cm,
        None => eval_model(&model, cfg, val, 0)?.1,
    };
    let last = evals.last().expect("at least the initial evaluation");
    let report = ExperimentReport {
        config: cfg.clone(),
        labeled_count: labeled.len(),
        unlabeled_count: unlabeled.len(),
        final_miou: last.miou,
        final_per_class_iou: last.per_class_iou.clone(),
        final_group_miou: cm.group_miou(&default_groups(cfg.data.num_classes))?,
        final_overlap_ratio: last.overlap_ratio,
        evals,
        steps,
    };

    if let (Some(dir), Some(root)) = (out_dir, &checkpoint_root) {
        model.save(&root.join("final"))?;
        write_metrics_csv(&dir.join("metrics.csv"), &report)?;
        write_json(&dir.join("report.json"), &report)?;
    }
    Ok(report)
}
