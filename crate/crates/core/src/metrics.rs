//! Confusion counting, IoU / Dice, and evaluation reports.

use std::fmt::Write as _;

use crate::affinity::{cosine_affinity, NeighborhoodSpec};
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::losses::{argmax_labels, LabelMap, IGNORE};
use crate::nets::{ParamSet, SegNet};
use crate::tensor::Tensor;
use crate::train::PREDICT_CHUNK;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub fn_: Vec<u64>,
    pub ignored: u64,
    pub total: u64,
}

impl ConfusionCounts {
    pub fn new(num_classes: usize) -> Self {
        ConfusionCounts {
            tp: vec![0; num_classes],
            fp: vec![0; num_classes],
            fn_: vec![0; num_classes],
            ignored: 0,
            total: 0,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.tp.len()
    }

    /// Add one prediction / ground-truth pair. Ignore-labelled ground truth
    /// is skipped.
    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if pred.height() != gt.height() || pred.width() != gt.width() {
            return Err(Error::Shape(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.height(),
                pred.width(),
                gt.height(),
                gt.width()
            )));
        }
        let c = self.num_classes();
        for (&p, &g) in pred.values().iter().zip(gt.values()) {
            self.total += 1;
            if g == IGNORE {
                self.ignored += 1;
                continue;
            }
            let (p, g) = (p as usize, g as usize);
            if p >= c || g >= c {
                return Err(Error::InvalidArgument(format!("label {} outside {c} classes", p.max(g))));
            }
            if p == g {
                self.tp[g] += 1;
            } else {
                self.fp[p] += 1;
                self.fn_[g] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionCounts) -> Result<()> {
        if other.num_classes() != self.num_classes() {
            return Err(Error::Shape("confusion counts over different class sets".into()));
        }
        for c in 0..self.num_classes() {
            self.tp[c] += other.tp[c];
            self.fp[c] += other.fp[c];
            self.fn_[c] += other.fn_[c];
        }
        self.ignored += other.ignored;
        self.total += other.total;
        Ok(())
    }

    fn denom(&self, class: usize) -> u64 {
        self.tp[class] + self.fp[class] + self.fn_[class]
    }

    /// `TP / (TP + FP + FN)`, or `None` for a class absent from both maps.
    pub fn iou(&self, class: usize) -> Option<f64> {
        let d = self.denom(class);
        (d > 0).then(|| self.tp[class] as f64 / d as f64)
    }

    /// `2TP / (2TP + FP + FN)`.
    pub fn dsc(&self, class: usize) -> Option<f64> {
        let d = self.denom(class) + self.tp[class];
        (self.denom(class) > 0).then(|| 2.0 * self.tp[class] as f64 / d as f64)
    }

    /// Mean IoU over `classes`, skipping absent ones.
    pub fn miou(&self, classes: impl IntoIterator<Item = usize>) -> Result<f64> {
        let ious: Vec<f64> = classes.into_iter().filter_map(|c| self.iou(c)).collect();
        if ious.is_empty() {
            return Err(Error::InvalidArgument("mIoU over classes that are all absent".into()));
        }
        Ok(ious.iter().sum::<f64>() / ious.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub counts: ConfusionCounts,
    pub iou: Vec<Option<f64>>,
    pub dsc: Vec<Option<f64>>,
    pub miou: f64,
    pub mean_affinity: f64,
}

impl Report {
    pub fn from_counts(counts: ConfusionCounts, mean_affinity: f64) -> Result<Self> {
        let c = counts.num_classes();
        Ok(Report {
            iou: (0..c).map(|k| counts.iou(k)).collect(),
            dsc: (0..c).map(|k| counts.dsc(k)).collect(),
            miou: counts.miou(0..c)?,
            mean_affinity,
            counts,
        })
    }

    /// `class,iou,dsc` rows (empty cells for absent classes), then
    /// `miou,<v>` and `mean_affinity,<v>`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,iou,dsc\n");
        let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for k in 0..self.iou.len() {
            let _ = writeln!(s, "{k},{},{}", cell(self.iou[k]), cell(self.dsc[k]));
        }
        let _ = writeln!(s, "miou,{}", self.miou);
        let _ = writeln!(s, "mean_affinity,{}", self.mean_affinity);
        s
    }
}

/// Predict every image of a labelled split, accumulate confusion counts and
/// the mean per-image cosine affinity.
pub fn evaluate(
    net: &SegNet,
    params: &ParamSet<f32>,
    dataset: &Dataset,
    split: Split,
    spec: &NeighborhoodSpec,
) -> Result<Report> {
    let n = dataset.len(split);
    if n == 0 {
        return Err(Error::InvalidArgument(format!("split {} has no labelled samples", split.dir_name())));
    }
    let classes = dataset.config().classes;
    if net.config().num_classes != classes {
        return Err(Error::InvalidArgument(format!(
            "model predicts {} classes, dataset has {classes}",
            net.config().num_classes
        )));
    }
    let mut counts = ConfusionCounts::new(classes);
    let mut affinity = 0.0;
    for start in (0..n).step_by(PREDICT_CHUNK) {
        let end = (start + PREDICT_CHUNK).min(n);
        let images: Vec<Tensor<f32>> = (start..end).map(|i| dataset.image(split, i).clone()).collect();
        let p = net.predict(params, &Tensor::stack(&images)?)?;
        affinity += cosine_affinity(&p, spec)?.iter().map(|m| m.mean()).sum::<f64>();
        for (k, pred) in argmax_labels(&p)?.iter().enumerate() {
            counts.accumulate(pred, dataset.labels(split, start + k))?;
        }
    }
    Report::from_counts(counts, affinity / n as f64)
}
