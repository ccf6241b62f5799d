//! Entropy, confidence-based dynamic weights and the cross-entropy objectives.
//!
//! All cross-entropy functions take softmax probabilities and return the
//! gradient with respect to the *logits* that produced them (`p − onehot`),
//! which is what [`crate::network::SegNetwork::backward`] consumes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BinaryMap, GridTensor, LabelMap, IGNORE};
use crate::pseudo::{Branch, PseudoLabels};

/// Floor applied to probabilities inside the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub supervised: f64,
    pub unsupervised: f64,
    pub gamma: f64,
    /// Mean dynamic weight over pseudo-labelled pixels (0 when there are none).
    pub mean_weight: f64,
}

/// Shannon entropy `−Σ p log p` per pixel, with `0·log 0 = 0`.
pub fn prediction_entropy(probs: &GridTensor) -> Result<GridTensor> {
    let (c, h, w) = probs.chw()?;
    let hw = h * w;
    let src = probs.data();
    let ent = (0..hw)
        .map(|p| {
            let s: f64 = (0..c)
                .map(|k| src[k * hw + p])
                .filter(|&v| v > 0.0)
                .map(|v| v * v.ln())
                .sum();
            (-s).max(0.0)
        })
        .collect();
    GridTensor::new(vec![h, w], ent)
}

/// Per-pixel weights: the mean of both confidences where the branches agree,
/// otherwise the confidence of the branch whose label was taken.
pub fn dynamic_weight(
    agree: &BinaryMap,
    conf_c: &GridTensor,
    conf_p: &GridTensor,
    source: &[Option<Branch>],
) -> Result<GridTensor> {
    let (h, w) = agree.dims();
    if conf_c.shape() != [h, w] || conf_p.shape() != [h, w] || source.len() != h * w {
        return Err(Error::invalid(format!(
            "dynamic weight inputs disagree on shape: agreement {h}×{w}, confidences {:?}/{:?}, {} source flags",
            conf_c.shape(),
            conf_p.shape(),
            source.len()
        )));
    }
    let mut out = Vec::with_capacity(h * w);
    for (i, &agrees) in agree.data().iter().enumerate() {
        let (bc, bp) = (conf_c.data()[i], conf_p.data()[i]);
        let omega = match (agrees, source[i]) {
            (true, _) => 0.5 * (bc + bp),
            (false, Some(Branch::Conservative)) => bc,
            (false, Some(Branch::Progressive)) => bp,
            (false, None) => {
                return Err(Error::Consistency(format!(
                    "disagreement pixel {i} has no label source"
                )))
            }
        };
        out.push(omega);
    }
    GridTensor::new(vec![h, w], out)
}

/// `(1/normalizer) Σ_i w_i · CE(label_i, probs_i)` over non-IGNORE pixels,
/// with its gradient on the logits.
pub fn weighted_cross_entropy(
    labels: &LabelMap,
    probs: &GridTensor,
    weights: &GridTensor,
    normalizer: f64,
) -> Result<(f64, GridTensor)> {
    let (c, h, w) = probs.chw()?;
    if labels.dims() != (h, w) || weights.shape() != [h, w] {
        return Err(Error::invalid(format!(
            "cross-entropy shapes disagree: probs {:?}, labels {:?}, weights {:?}",
            probs.shape(),
            labels.dims(),
            weights.shape()
        )));
    }
    if normalizer <= 0.0 {
        return Err(Error::invalid("cross-entropy normalizer must be positive"));
    }
    let hw = h * w;
    let p = probs.data();
    let mut grad = vec![0.0; p.len()];
    let mut loss = 0.0;
    for (i, (&y, &wt)) in labels.data().iter().zip(weights.data()).enumerate() {
        if y == IGNORE {
            continue;
        }
        let y = y as usize;
        if y >= c {
            return Err(Error::invalid(format!(
                "label {y} at pixel {i} out of range for {c} classes"
            )));
        }
        if wt == 0.0 {
            continue;
        }
        loss -= wt * p[y * hw + i].max(PROB_FLOOR).ln();
        let scale = wt / normalizer;
        for k in 0..c {
            grad[k * hw + i] = scale * p[k * hw + i];
        }
        grad[y * hw + i] -= scale;
    }
    Ok((loss / normalizer, GridTensor::new(vec![c, h, w], grad)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnsupLoss {
    /// Sum of both terms.
    pub value: f64,
    /// Intersection term on the conservative branch's strong prediction.
    pub conservative: f64,
    /// Union term on the progressive branch's strong prediction.
    pub progressive: f64,
    pub grad_cs: GridTensor,
    pub grad_ps: GridTensor,
}

/// Re-weighted unsupervised loss: intersection labels supervise the
/// conservative strong prediction, union labels the progressive one, both
/// weighted by `w` and normalised by the full pixel count.
pub fn unsup_loss(
    l_inter: &PseudoLabels,
    l_union: &PseudoLabels,
    probs_cs: &GridTensor,
    probs_ps: &GridTensor,
    w: &GridTensor,
) -> Result<UnsupLoss> {
    if probs_cs.shape() != probs_ps.shape() {
        return Err(Error::invalid(format!(
            "strong predictions differ in shape: {:?} vs {:?}",
            probs_cs.shape(),
            probs_ps.shape()
        )));
    }
    let (h, w_px) = probs_cs.spatial()?;
    let n = (h * w_px) as f64;
    let (lc, grad_cs) = weighted_cross_entropy(&l_inter.labels, probs_cs, w, n)?;
    let (lp, grad_ps) = weighted_cross_entropy(&l_union.labels, probs_ps, w, n)?;
    Ok(UnsupLoss {
        value: lc + lp,
        conservative: lc,
        progressive: lp,
        grad_cs,
        grad_ps,
    })
}

/// Mean cross-entropy against ground truth over non-IGNORE pixels.
pub fn sup_loss(gt: &LabelMap, probs: &GridTensor) -> Result<(f64, GridTensor)> {
    let counted = gt.support();
    if counted == 0 {
        return Err(Error::invalid("ground truth has no labelled pixels"));
    }
    let (h, w) = gt.dims();
    let ones = GridTensor::filled(&[h, w], 1.0);
    weighted_cross_entropy(gt, probs, &ones, counted as f64)
}

/// `L = L_S + γ·L_U`.
pub fn total_loss(sup: f64, unsup: f64, gamma: f64) -> Result<LossReport> {
    if !(gamma >= 0.0) || !gamma.is_finite() {
        return Err(Error::invalid(format!("gamma must be >= 0, got {gamma}")));
    }
    Ok(LossReport {
        total: sup + gamma * unsup,
        supervised: sup,
        unsupervised: unsup,
        gamma,
        mean_weight: 0.0,
    })
}
