//! Pseudo-label generation from two branches' weak-view predictions.
//!
//! Pixels where the conservative and progressive predictions agree form the
//! agreement labels `L_a`, which are the whole intersection supervision. Pixels
//! where they disagree are resolved per pixel by comparing the two candidate
//! classes' disagreement indicators, computed from the batch agreement matrix;
//! agreement plus resolved disagreement gives the union supervision.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BinaryMap, GridTensor, LabelMap, IGNORE};

/// Which branch produced a disagreement pseudo label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Branch {
    Conservative,
    Progressive,
}

impl Branch {
    pub fn as_str(self) -> &'static str {
        match self {
            Branch::Conservative => "conservative",
            Branch::Progressive => "progressive",
        }
    }
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Branch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conservative" => Ok(Branch::Conservative),
            "progressive" => Ok(Branch::Progressive),
            _ => Err(Error::invalid(format!(
                "unknown branch '{s}' (expected conservative or progressive)"
            ))),
        }
    }
}

/// Per-pixel labels and loss weights for one flavour of pseudo supervision.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabels {
    pub labels: LabelMap,
    /// `H×W`; zero wherever `labels` is IGNORE.
    pub weights: GridTensor,
}

impl PseudoLabels {
    /// Labels with all weights zero, to be filled by the dynamic weighting.
    pub fn unweighted(labels: LabelMap) -> Self {
        let (h, w) = labels.dims();
        Self {
            labels,
            weights: GridTensor::zeros(&[h, w]),
        }
    }

    /// Copies `weights` onto supported pixels, zeroing IGNORE pixels.
    pub fn with_weights(mut self, weights: &GridTensor) -> Result<Self> {
        let (h, w) = self.labels.dims();
        if weights.shape() != [h, w] {
            return Err(Error::invalid(format!(
                "weights of shape {:?} do not match labels {h}×{w}",
                weights.shape()
            )));
        }
        for ((dst, &src), &l) in self
            .weights
            .data_mut()
            .iter_mut()
            .zip(weights.data())
            .zip(self.labels.data())
        {
            *dst = if l == IGNORE { 0.0 } else { src };
        }
        Ok(self)
    }

    pub fn support(&self) -> usize {
        self.labels.support()
    }
}

/// Disagreement labels `L_d` with the branch each label was taken from.
#[derive(Debug, Clone, PartialEq)]
pub struct DisagreementLabels {
    pub pseudo: PseudoLabels,
    /// `Some` exactly at disagreement pixels.
    pub source: Vec<Option<Branch>>,
}

/// `m[j][k]`: pixels where the conservative branch predicts `j` and the progressive branch `k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgreementMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl AgreementMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn from_counts(num_classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != num_classes * num_classes {
            return Err(Error::invalid(format!(
                "{num_classes} classes need {} counts, got {}",
                num_classes * num_classes,
                counts.len()
            )));
        }
        Ok(Self {
            num_classes,
            counts,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, j: usize, k: usize) -> u64 {
        self.counts[j * self.num_classes + k]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn row_sum(&self, j: usize) -> u64 {
        self.counts[j * self.num_classes..(j + 1) * self.num_classes]
            .iter()
            .sum()
    }

    pub fn col_sum(&self, k: usize) -> u64 {
        (0..self.num_classes).map(|j| self.get(j, k)).sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one prediction pair's co-occurrence counts.
    pub fn accumulate(&mut self, y_c: &LabelMap, y_p: &LabelMap) -> Result<()> {
        check_same_dims(y_c, y_p)?;
        let c = self.num_classes;
        for (&a, &b) in y_c.data().iter().zip(y_p.data()) {
            if a as usize >= c || b as usize >= c {
                return Err(Error::invalid(format!(
                    "label pair ({a}, {b}) out of range for {c} classes"
                )));
            }
        }
        for (&a, &b) in y_c.data().iter().zip(y_p.data()) {
            self.counts[a as usize * c + b as usize] += 1;
        }
        Ok(())
    }
}

pub fn build_agreement_matrix(
    y_c: &LabelMap,
    y_p: &LabelMap,
    num_classes: usize,
) -> Result<AgreementMatrix> {
    let mut m = AgreementMatrix::new(num_classes);
    m.accumulate(y_c, y_p)?;
    Ok(m)
}

/// Class-wise disagreement indicator, one value in `[0, 2]` per class.
#[derive(Debug, Clone, PartialEq)]
pub struct DisagreementIndicator(pub Vec<f64>);

impl DisagreementIndicator {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn get(&self, class: usize) -> f64 {
        self.0[class]
    }
}

/// `I_c = 2 − m_cc/rowsum(c) − m_cc/colsum(c)`; a fraction with a zero
/// denominator counts as 0, so a class never predicted by one branch scores 2.
pub fn disagreement_indicator(m: &AgreementMatrix) -> DisagreementIndicator {
    let frac = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    DisagreementIndicator(
        (0..m.num_classes())
            .map(|c| {
                let diag = m.get(c, c);
                2.0 - frac(diag, m.row_sum(c)) - frac(diag, m.col_sum(c))
            })
            .collect(),
    )
}

pub fn agreement_map(y_c: &LabelMap, y_p: &LabelMap) -> Result<BinaryMap> {
    check_same_dims(y_c, y_p)?;
    let (h, w) = y_c.dims();
    BinaryMap::new(
        h,
        w,
        y_c.data()
            .iter()
            .zip(y_p.data())
            .map(|(a, b)| a == b)
            .collect(),
    )
}

/// `L_a`: the shared prediction on agreement pixels, IGNORE elsewhere.
pub fn label_agreement(y_c: &LabelMap, y_p: &LabelMap) -> Result<PseudoLabels> {
    check_same_dims(y_c, y_p)?;
    let (h, w) = y_c.dims();
    let labels = y_c
        .data()
        .iter()
        .zip(y_p.data())
        .map(|(&a, &b)| if a == b { a } else { IGNORE })
        .collect();
    Ok(PseudoLabels::unweighted(LabelMap::new(h, w, labels)?))
}

/// `L_d` by the disagreement indicator: each disagreement pixel takes the
/// candidate class with the higher indicator; ties go to the conservative class.
pub fn label_disagreement_cpcl(
    y_c: &LabelMap,
    y_p: &LabelMap,
    ind: &DisagreementIndicator,
) -> Result<DisagreementLabels> {
    check_same_dims(y_c, y_p)?;
    let lookup = |class: u8| -> Result<f64> {
        ind.0.get(class as usize).copied().ok_or_else(|| {
            Error::invalid(format!(
                "label {class} has no indicator value ({} classes)",
                ind.0.len()
            ))
        })
    };
    resolve_disagreement(y_c, y_p, |_, j, k| {
        Ok(if lookup(k)? > lookup(j)? {
            Branch::Progressive
        } else {
            Branch::Conservative
        })
    })
}

/// Rules for labelling disagreement pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    PixelConfidenceHigher,
    PixelConfidenceLower,
    ClassConfusionLower,
    ClassConfusionHigher,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::PixelConfidenceLower,
        Strategy::PixelConfidenceHigher,
        Strategy::ClassConfusionLower,
        Strategy::ClassConfusionHigher,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::PixelConfidenceHigher => "pixel-confidence-higher",
            Strategy::PixelConfidenceLower => "pixel-confidence-lower",
            Strategy::ClassConfusionLower => "class-confusion-lower",
            Strategy::ClassConfusionHigher => "class-confusion-higher",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown strategy '{s}' (expected one of: {})",
                    Strategy::ALL.map(Strategy::as_str).join(", ")
                ))
            })
    }
}

/// `L_d` under any of the four rules. Every rule breaks exact ties toward the
/// conservative branch; `ClassConfusionHigher` is [`label_disagreement_cpcl`].
pub fn label_disagreement_baseline(
    y_c: &LabelMap,
    y_p: &LabelMap,
    conf_c: &GridTensor,
    conf_p: &GridTensor,
    ind: &DisagreementIndicator,
    strategy: Strategy,
) -> Result<DisagreementLabels> {
    let (h, w) = y_c.dims();
    if conf_c.shape() != [h, w] || conf_p.shape() != [h, w] {
        return Err(Error::invalid(format!(
            "confidence maps {:?}/{:?} do not match labels {h}×{w}",
            conf_c.shape(),
            conf_p.shape()
        )));
    }
    match strategy {
        Strategy::ClassConfusionHigher => label_disagreement_cpcl(y_c, y_p, ind),
        Strategy::ClassConfusionLower => {
            let n = ind.0.len();
            resolve_disagreement(y_c, y_p, |_, j, k| {
                if j as usize >= n || k as usize >= n {
                    return Err(Error::invalid(format!(
                        "labels ({j}, {k}) out of range for {n} indicator values"
                    )));
                }
                Ok(if ind.0[k as usize] < ind.0[j as usize] {
                    Branch::Progressive
                } else {
                    Branch::Conservative
                })
            })
        }
        Strategy::PixelConfidenceHigher => resolve_disagreement(y_c, y_p, |i, _, _| {
            Ok(if conf_c.data()[i] < conf_p.data()[i] {
                Branch::Progressive
            } else {
                Branch::Conservative
            })
        }),
        Strategy::PixelConfidenceLower => resolve_disagreement(y_c, y_p, |i, _, _| {
            Ok(if conf_c.data()[i] > conf_p.data()[i] {
                Branch::Progressive
            } else {
                Branch::Conservative
            })
        }),
    }
}

fn resolve_disagreement<F>(y_c: &LabelMap, y_p: &LabelMap, mut pick: F) -> Result<DisagreementLabels>
where
    F: FnMut(usize, u8, u8) -> Result<Branch>,
{
    check_same_dims(y_c, y_p)?;
    let (h, w) = y_c.dims();
    let mut labels = vec![IGNORE; h * w];
    let mut source = vec![None; h * w];
    for (i, (&j, &k)) in y_c.data().iter().zip(y_p.data()).enumerate() {
        if j == k {
            continue;
        }
        let branch = pick(i, j, k)?;
        labels[i] = match branch {
            Branch::Conservative => j,
            Branch::Progressive => k,
        };
        source[i] = Some(branch);
    }
    Ok(DisagreementLabels {
        pseudo: PseudoLabels::unweighted(LabelMap::new(h, w, labels)?),
        source,
    })
}

/// `L_union = L_a ∪ L_d`; the two supports must be disjoint.
pub fn compose_union(l_a: &PseudoLabels, l_d: &PseudoLabels) -> Result<PseudoLabels> {
    check_same_dims(&l_a.labels, &l_d.labels)?;
    let mut out = l_a.clone();
    let d_labels = l_d.labels.data();
    let d_weights = l_d.weights.data();
    let labels = out.labels.data_mut();
    let weights = out.weights.data_mut();
    for i in 0..labels.len() {
        match (labels[i] != IGNORE, d_labels[i] != IGNORE) {
            (true, true) => {
                return Err(Error::Consistency(format!(
                    "agreement and disagreement labels overlap at pixel {i}"
                )))
            }
            (false, true) => {
                labels[i] = d_labels[i];
                weights[i] = d_weights[i];
            }
            _ => {}
        }
    }
    Ok(out)
}

/// `L_inter` is the agreement labels unchanged.
pub fn compose_intersection(l_a: &PseudoLabels) -> PseudoLabels {
    l_a.clone()
}

/// Threshold pseudo-labelling: the argmax class where its probability exceeds
/// `threshold`, IGNORE elsewhere. Weights are the max probability on kept pixels.
pub fn label_by_threshold(probs: &GridTensor, threshold: f64) -> Result<PseudoLabels> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::invalid(format!(
            "threshold {threshold} outside [0, 1]"
        )));
    }
    let labels = crate::network::predict_argmax(probs)?;
    let conf = crate::network::confidence_map(probs)?;
    let (h, w) = labels.dims();
    let kept: Vec<u8> = labels
        .data()
        .iter()
        .zip(conf.data())
        .map(|(&l, &c)| if c > threshold { l } else { IGNORE })
        .collect();
    PseudoLabels::unweighted(LabelMap::new(h, w, kept)?).with_weights(&conf)
}

fn check_same_dims(a: &LabelMap, b: &LabelMap) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::invalid(format!(
            "label maps differ in shape: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}
