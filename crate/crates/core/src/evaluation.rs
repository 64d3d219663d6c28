//! Segmentation and detection metrics, ROC analysis, threshold sweeps and
//! per-region reports.

use std::fmt::Write as _;
use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{BinaryMask, FloatMap};
use crate::pipeline::{image_score, MIN_ANOMALOUS_PIXELS};

pub const DEFAULT_THRESHOLDS: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Add for ConfusionCounts {
    type Output = ConfusionCounts;

    fn add(self, o: ConfusionCounts) -> ConfusionCounts {
        ConfusionCounts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            tn: self.tn + o.tn,
            fn_: self.fn_ + o.fn_,
        }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: ConfusionCounts) {
        *self = *self + o;
    }
}

fn ratio(num: u64, den: u64, what: &'static str) -> Result<f64> {
    if den == 0 {
        Err(Error::UndefinedMetric(what))
    } else {
        Ok(num as f64 / den as f64)
    }
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// `tp / (tp + fp)`
    pub fn precision(&self) -> Result<f64> {
        ratio(self.tp, self.tp + self.fp, "precision")
    }

    /// `tp / (tp + fn)`, also the true positive rate.
    pub fn recall(&self) -> Result<f64> {
        ratio(self.tp, self.tp + self.fn_, "recall")
    }

    pub fn f_score(&self) -> Result<f64> {
        f_score(self.precision()?, self.recall()?)
    }

    /// `fp / (fp + tn)`
    pub fn fpr(&self) -> Result<f64> {
        ratio(self.fp, self.fp + self.tn, "fpr")
    }

    /// `tp / (tp + fn + fp)`
    pub fn iou(&self) -> Result<f64> {
        ratio(self.tp, self.tp + self.fn_ + self.fp, "iou")
    }

    /// Metrics with the zero-denominator conventions applied.
    pub fn metrics(&self) -> Metrics {
        let truth_empty = self.tp + self.fn_ == 0;
        let precision = self
            .precision()
            .unwrap_or(if truth_empty { 1.0 } else { 0.0 });
        let recall = self.recall().unwrap_or(1.0);
        Metrics {
            precision,
            recall,
            f_score: f_score(precision, recall).unwrap_or(0.0),
            fpr: self.fpr().unwrap_or(0.0),
            iou: self.iou().unwrap_or(1.0),
        }
    }
}

/// Harmonic mean of precision and recall.
pub fn f_score(precision: f64, recall: f64) -> Result<f64> {
    if precision + recall == 0.0 {
        return Err(Error::UndefinedMetric("f_score"));
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

/// Metric values after resolving empty denominators: precision is 1 when
/// nothing is predicted and nothing is true (0 if something is true), recall
/// and IoU are 1 with no positives, FPR is 0 with no negatives, and F is 0
/// when precision and recall are both 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
    pub fpr: f64,
    pub iou: f64,
}

pub fn confusion(pred: &BinaryMask, truth: &BinaryMask) -> Result<ConfusionCounts> {
    if (pred.height(), pred.width()) != (truth.height(), truth.width()) {
        return Err(Error::mismatch(
            format!("{}x{}", truth.height(), truth.width()),
            format!("{}x{}", pred.height(), pred.width()),
        ));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.pixels().iter().zip(truth.pixels()) {
        match (p != 0, t != 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// Scores `>= threshold` are called positive.
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

impl RocCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold,fpr,tpr\n");
        for p in &self.points {
            let _ = writeln!(s, "{},{},{}", p.threshold, p.fpr, p.tpr);
        }
        s
    }
}

/// ROC curve over every distinct score plus the `+inf`/`-inf` endpoints,
/// with the trapezoidal area (tied scores contribute half credit).
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<RocCurve> {
    if scores.len() != labels.len() {
        return Err(Error::mismatch(
            format!("{} labels", scores.len()),
            labels.len(),
        ));
    }
    if let Some(bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Argument(format!("label {bad} is not 0 or 1")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Argument("NaN score".into()));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count() as f64;
    let neg = labels.len() as f64 - pos;
    if pos == 0.0 || neg == 0.0 {
        return Err(Error::SingleClass {
            label: if pos == 0.0 { 0 } else { 1 },
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut auc = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let prev = *points.last().unwrap();
        let p = RocPoint {
            threshold: s,
            fpr: fp as f64 / neg,
            tpr: tp as f64 / pos,
        };
        auc += (p.fpr - prev.fpr) * (p.tpr + prev.tpr) / 2.0;
        points.push(p);
    }
    points.push(RocPoint {
        threshold: f64::NEG_INFINITY,
        fpr: 1.0,
        tpr: 1.0,
    });
    Ok(RocCurve { points, auc })
}

/// `n` evenly spaced thresholds covering `[0, 1]`.
pub fn threshold_grid(n: usize) -> Result<Vec<f32>> {
    if n < 2 {
        return Err(Error::Argument("need at least two thresholds".into()));
    }
    Ok((0..n).map(|k| (k as f64 / (n - 1) as f64) as f32).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub best_iou: f64,
    pub best_threshold: f32,
    pub counts: ConfusionCounts,
    pub metrics: Metrics,
}

/// Pooled confusion counts of `map >= t` against the truths at every threshold.
pub fn pooled_counts(
    maps: &[FloatMap],
    truths: &[BinaryMask],
    thresholds: &[f32],
) -> Result<Vec<ConfusionCounts>> {
    if maps.len() != truths.len() {
        return Err(Error::mismatch(
            format!("{} truths", maps.len()),
            truths.len(),
        ));
    }
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (m, t) in maps.iter().zip(truths) {
        if (m.height(), m.width()) != (t.height(), t.width()) {
            return Err(Error::mismatch(
                format!("{}x{}", t.height(), t.width()),
                format!("{}x{}", m.height(), m.width()),
            ));
        }
        for (&v, &l) in m.values().iter().zip(t.pixels()) {
            if l != 0 {
                pos.push(v);
            } else {
                neg.push(v);
            }
        }
    }
    pos.sort_by(f32::total_cmp);
    neg.sort_by(f32::total_cmp);
    let at_least =
        |sorted: &[f32], t: f32| (sorted.len() - sorted.partition_point(|&v| v < t)) as u64;
    Ok(thresholds
        .iter()
        .map(|&t| {
            let tp = at_least(&pos, t);
            let fp = at_least(&neg, t);
            ConfusionCounts {
                tp,
                fp,
                tn: neg.len() as u64 - fp,
                fn_: pos.len() as u64 - tp,
            }
        })
        .collect())
}

/// Threshold with the highest pooled IoU; ties go to the lowest threshold.
pub fn best_iou_over(
    maps: &[FloatMap],
    truths: &[BinaryMask],
    thresholds: &[f32],
) -> Result<SweepResult> {
    if truths.iter().all(BinaryMask::is_empty) {
        return Err(Error::NoPositives);
    }
    if thresholds.is_empty() {
        return Err(Error::Argument("no thresholds to sweep".into()));
    }
    let counts = pooled_counts(maps, truths, thresholds)?;
    let mut best = 0;
    for (k, c) in counts.iter().enumerate() {
        if c.metrics().iou > counts[best].metrics().iou {
            best = k;
        }
    }
    let metrics = counts[best].metrics();
    Ok(SweepResult {
        best_iou: metrics.iou,
        best_threshold: thresholds[best],
        counts: counts[best],
        metrics,
    })
}

/// [`best_iou_over`] on `n_thresholds` evenly spaced values in `[0, 1]`.
pub fn best_iou_sweep(
    maps: &[FloatMap],
    truths: &[BinaryMask],
    n_thresholds: usize,
) -> Result<SweepResult> {
    best_iou_over(maps, truths, &threshold_grid(n_thresholds)?)
}

/// One evaluated image of a region: normalized map and ground truth.
#[derive(Debug, Clone)]
pub struct EvalSample {
    pub map: FloatMap,
    pub truth: BinaryMask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionMetrics {
    pub region_id: String,
    pub best_iou: f64,
    pub best_iou_threshold: f32,
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
    pub seg_auc: f64,
    /// Absent when the region's test set holds a single class.
    pub det_auc: Option<f64>,
    /// Image-level accuracy of the pixel-count rule at the best-IoU threshold.
    pub det_accuracy: f64,
    pub n_images: usize,
    #[serde(skip)]
    pub seg_roc: Option<RocCurve>,
    #[serde(skip)]
    pub det_roc: Option<RocCurve>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AverageMetrics {
    pub best_iou: f64,
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
    pub seg_auc: f64,
    pub det_auc: Option<f64>,
    pub det_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub regions: Vec<RegionMetrics>,
    pub average: AverageMetrics,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

pub fn evaluate_region(
    region_id: &str,
    samples: &[EvalSample],
    n_thresholds: usize,
) -> Result<RegionMetrics> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "no evaluation samples for {region_id}"
        )));
    }
    let maps: Vec<FloatMap> = samples.iter().map(|s| s.map.clone()).collect();
    let truths: Vec<BinaryMask> = samples.iter().map(|s| s.truth.clone()).collect();
    let sweep = best_iou_sweep(&maps, &truths, n_thresholds)?;

    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for s in samples {
        scores.extend(s.map.values().iter().map(|&v| v as f64));
        labels.extend(s.truth.pixels().iter().map(|&l| (l != 0) as u8));
    }
    let seg = roc_auc(&scores, &labels)?;

    let det_scores: Vec<f64> = samples.iter().map(|s| image_score(&s.map) as f64).collect();
    let det_labels: Vec<u8> = samples.iter().map(|s| !s.truth.is_empty() as u8).collect();
    let det = match roc_auc(&det_scores, &det_labels) {
        Ok(c) => Some(c),
        Err(Error::SingleClass { .. }) => None,
        Err(e) => return Err(e),
    };
    let correct = samples
        .iter()
        .filter(|s| {
            let fired = s.map.threshold(sweep.best_threshold).count_ones() >= MIN_ANOMALOUS_PIXELS;
            fired == !s.truth.is_empty()
        })
        .count();
    Ok(RegionMetrics {
        region_id: region_id.to_string(),
        best_iou: sweep.best_iou,
        best_iou_threshold: sweep.best_threshold,
        precision: sweep.metrics.precision,
        recall: sweep.metrics.recall,
        f_score: sweep.metrics.f_score,
        seg_auc: seg.auc,
        det_auc: det.as_ref().map(|c| c.auc),
        det_accuracy: correct as f64 / samples.len() as f64,
        n_images: samples.len(),
        seg_roc: Some(seg),
        det_roc: det,
    })
}

/// Per-region metrics plus their arithmetic means.
pub fn evaluate_regions(
    regions: &[(String, Vec<EvalSample>)],
    n_thresholds: usize,
) -> Result<EvalReport> {
    let regions = regions
        .iter()
        .map(|(id, s)| evaluate_region(id, s, n_thresholds))
        .collect::<Result<Vec<_>>>()?;
    let avg = |f: fn(&RegionMetrics) -> f64| mean(regions.iter().map(f)).unwrap_or(0.0);
    let average = AverageMetrics {
        best_iou: avg(|r| r.best_iou),
        precision: avg(|r| r.precision),
        recall: avg(|r| r.recall),
        f_score: avg(|r| r.f_score),
        seg_auc: avg(|r| r.seg_auc),
        det_auc: mean(regions.iter().filter_map(|r| r.det_auc)),
        det_accuracy: avg(|r| r.det_accuracy),
    };
    Ok(EvalReport { regions, average })
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Plain-text table: one row per region and a closing average row.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<10} {:>7} {:>9} {:>7} {:>7} {:>7} {:>7} {:>7}",
            "Region", "IoU", "Precision", "Recall", "F-score", "SegAUC", "DetAUC", "DetAcc"
        );
        let det = |d: Option<f64>| d.map_or("-".to_string(), |v| format!("{v:.3}"));
        for r in &self.regions {
            let _ = writeln!(
                s,
                "{:<10} {:>7.3} {:>9.3} {:>7.3} {:>7.3} {:>7.3} {:>7} {:>7.3}",
                r.region_id,
                r.best_iou,
                r.precision,
                r.recall,
                r.f_score,
                r.seg_auc,
                det(r.det_auc),
                r.det_accuracy
            );
        }
        let a = &self.average;
        let _ = writeln!(
            s,
            "{:<10} {:>7.3} {:>9.3} {:>7.3} {:>7.3} {:>7.3} {:>7} {:>7.3}",
            "Average",
            a.best_iou,
            a.precision,
            a.recall,
            a.f_score,
            a.seg_auc,
            det(a.det_auc),
            a.det_accuracy
        );
        s
    }
}
