//! Segmentation metrics: confusion matrix, per-class IoU, mIoU, class-group
//! scores and the inter-branch overlap ratio.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{LabelMap, IGNORE};

/// Rows are ground truth, columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
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

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Counts every pixel whose ground truth is not IGNORE. The matrix is left
    /// untouched if any label is out of range.
    pub fn accumulate(&mut self, gt: &LabelMap, pred: &LabelMap) -> Result<()> {
        if gt.dims() != pred.dims() {
            return Err(Error::invalid(format!(
                "ground truth {:?} and prediction {:?} differ in shape",
                gt.dims(),
                pred.dims()
            )));
        }
        let c = self.num_classes;
        for (&g, &p) in gt.data().iter().zip(pred.data()) {
            if g != IGNORE && (g as usize >= c || p as usize >= c) {
                return Err(Error::invalid(format!(
                    "label pair (gt {g}, pred {p}) out of range for {c} classes"
                )));
            }
        }
        for (&g, &p) in gt.data().iter().zip(pred.data()) {
            if g != IGNORE {
                self.counts[g as usize * c + p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::invalid("cannot merge matrices of different class counts"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// `IoU_c = m_cc / (row_c + col_c − m_cc)`; `None` when the union is empty.
    pub fn iou_per_class(&self) -> Vec<Option<f64>> {
        let c = self.num_classes;
        (0..c)
            .map(|k| {
                let tp = self.get(k, k);
                let row: u64 = (0..c).map(|j| self.get(k, j)).sum();
                let col: u64 = (0..c).map(|j| self.get(j, k)).sum();
                let union = row + col - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    /// Mean IoU over classes with a nonempty union (0 if there are none).
    pub fn miou(&self) -> f64 {
        mean_present(self.iou_per_class())
    }

    /// Mean IoU of each group's present member classes. `groups` maps every
    /// class index to a group name.
    pub fn group_miou(&self, groups: &BTreeMap<usize, String>) -> Result<BTreeMap<String, Option<f64>>> {
        if let Some(missing) = (0..self.num_classes).find(|c| !groups.contains_key(c)) {
            return Err(Error::invalid(format!("class {missing} is not assigned to a group")));
        }
        if let Some(extra) = groups.keys().find(|&&c| c >= self.num_classes) {
            return Err(Error::invalid(format!(
                "group assignment names class {extra}, beyond {} classes",
                self.num_classes
            )));
        }
        let iou = self.iou_per_class();
        let mut members: BTreeMap<String, Vec<Option<f64>>> = BTreeMap::new();
        for (&class, name) in groups {
            members.entry(name.clone()).or_default().push(iou[class]);
        }
        Ok(members
            .into_iter()
            .map(|(name, scores)| {
                let present: Vec<f64> = scores.into_iter().flatten().collect();
                let score = (!present.is_empty())
                    .then(|| present.iter().sum::<f64>() / present.len() as f64);
                (name, score)
            })
            .collect())
    }
}

fn mean_present(values: Vec<Option<f64>>) -> f64 {
    let present: Vec<f64> = values.into_iter().flatten().collect();
    if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    }
}

/// Fraction of pixels where two predictions agree.
pub fn overlap_ratio(y_c: &LabelMap, y_p: &LabelMap) -> Result<f64> {
    if y_c.dims() != y_p.dims() {
        return Err(Error::invalid(format!(
            "predictions differ in shape: {:?} vs {:?}",
            y_c.dims(),
            y_p.dims()
        )));
    }
    let n = y_c.data().len();
    if n == 0 {
        return Ok(1.0);
    }
    let same = y_c
        .data()
        .iter()
        .zip(y_p.data())
        .filter(|(a, b)| a == b)
        .count();
    Ok(same as f64 / n as f64)
}

/// Summary written as `metrics.json`, with per-class rows in `per_class.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub miou: f64,
    pub per_class_iou: Vec<Option<f64>>,
    pub group_scores: BTreeMap<String, Option<f64>>,
    pub overlap_ratio: Option<f64>,
    pub evaluated_pixels: u64,
}

impl MetricsSummary {
    pub fn from_confusion(
        cm: &ConfusionMatrix,
        groups: &BTreeMap<usize, String>,
        overlap_ratio: Option<f64>,
    ) -> Result<Self> {
        Ok(Self {
            miou: cm.miou(),
            per_class_iou: cm.iou_per_class(),
            group_scores: cm.group_miou(groups)?,
            overlap_ratio,
            evaluated_pixels: cm.total(),
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json_path = dir.join("metrics.json");
        let text = serde_json::to_string_pretty(self).expect("summary serializes");
        fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;

        let csv_path = dir.join("per_class.csv");
        let mut wtr = csv::Writer::from_path(&csv_path)
            .map_err(|e| Error::io(&csv_path, std::io::Error::other(e)))?;
        let to_io = |e: csv::Error| Error::io(&csv_path, std::io::Error::other(e));
        wtr.write_record(["class", "iou"]).map_err(to_io)?;
        for (class, iou) in self.per_class_iou.iter().enumerate() {
            let cell = iou.map(|v| v.to_string()).unwrap_or_default();
            wtr.write_record([class.to_string(), cell]).map_err(to_io)?;
        }
        wtr.flush().map_err(|e| Error::io(&csv_path, e))?;
        Ok(())
    }
}

/// Default grouping for the synthetic shapes task.
pub fn default_groups(num_classes: usize) -> BTreeMap<usize, String> {
    (0..num_classes)
        .map(|c| {
            let name = if c == 0 { "background" } else { "shapes" };
            (c, name.to_string())
        })
        .collect()
}
