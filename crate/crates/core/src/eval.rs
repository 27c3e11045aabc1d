//! Histograms, localization improvement, COCO-style AP, recall curves and IoU
//! correlation reports.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::boxgeom::BBox;
use crate::error::{Error, Result};
use crate::sampler::{assign_interval, IntervalConfig};

/// COCO matching thresholds `0.50, 0.55, ..., 0.95`.
pub fn coco_thresholds() -> Vec<f64> {
    (10..20).map(|k| k as f64 / 20.0).collect()
}

/// Recall-curve matching IoUs `0.50, 0.55, ..., 1.00`.
pub fn recall_thresholds() -> Vec<f64> {
    (10..=20).map(|k| k as f64 / 20.0).collect()
}

/// Counts per half-open bin `[edges[i], edges[i+1])`; a value equal to the last edge
/// lands in the last bin. Values outside the edges are ignored.
pub fn iou_histogram(values: &[f64], edges: &[f64]) -> Result<Vec<usize>> {
    if edges.len() < 2 || edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("histogram edges must be strictly ascending".into()));
    }
    let nb = edges.len() - 1;
    let last = edges[nb];
    let mut counts = vec![0; nb];
    for &v in values {
        if !(v >= edges[0] && v <= last) {
            continue;
        }
        let k = edges.partition_point(|&e| e <= v).saturating_sub(1).min(nb - 1);
        counts[k] += 1;
    }
    Ok(counts)
}

/// Mean `IoU(post, gt) - IoU(pre, gt)` per input-IoU interval; `None` for empty intervals.
/// Pre-boxes below the first boundary are skipped.
pub fn localization_improvement(
    pre: &[BBox],
    post: &[BBox],
    gts: &[BBox],
    cfg: &IntervalConfig,
) -> Result<Vec<Option<f64>>> {
    if pre.len() != post.len() || pre.len() != gts.len() {
        return Err(Error::LengthMismatch {
            what: "pre/post/gt boxes",
            left: pre.len(),
            right: post.len().min(gts.len()),
        });
    }
    let n = cfg.num_intervals();
    let mut sums = vec![0.0; n];
    let mut counts = vec![0usize; n];
    for ((a, b), g) in pre.iter().zip(post).zip(gts) {
        let before = a.iou_unchecked(g);
        let Ok(j) = assign_interval(before, cfg) else { continue };
        sums[j] += b.iou_unchecked(g) - before;
        counts[j] += 1;
    }
    Ok(sums
        .into_iter()
        .zip(counts)
        .map(|(s, c)| (c > 0).then(|| s / c as f64))
        .collect())
}

/// A scored detection for evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalDetection {
    pub scene: usize,
    pub class_id: usize,
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalGt {
    pub scene: usize,
    pub class_id: usize,
    pub bbox: BBox,
}

/// Greedy COCO matching for one class: true/false-positive flags in score order.
fn match_class(dets: &[&EvalDetection], gts: &[&EvalGt], thr: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut taken = vec![false; gts.len()];
    order
        .into_iter()
        .map(|i| {
            let d = dets[i];
            let mut best: Option<(usize, f64)> = None;
            for (gi, g) in gts.iter().enumerate() {
                if taken[gi] || g.scene != d.scene {
                    continue;
                }
                let v = d.bbox.iou_unchecked(&g.bbox);
                if v >= thr && best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((gi, v));
                }
            }
            match best {
                Some((gi, _)) => {
                    taken[gi] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// 101-point interpolated AP from TP flags in score order.
fn interpolated_ap(tp: &[bool], n_gt: usize) -> f64 {
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let (mut ctp, mut cfp) = (0usize, 0usize);
    for &t in tp {
        if t {
            ctp += 1;
        } else {
            cfp += 1;
        }
        precision.push(ctp as f64 / (ctp + cfp) as f64);
        recall.push(ctp as f64 / n_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        let idx = recall.partition_point(|&x| x < r);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    sum / 101.0
}

/// AP at one matching threshold, averaged over classes that have GTs. `None` when no
/// class has any GT.
pub fn average_precision(dets: &[EvalDetection], gts: &[EvalGt], iou_threshold: f64) -> Option<f64> {
    let mut classes: BTreeMap<usize, (Vec<&EvalDetection>, Vec<&EvalGt>)> = BTreeMap::new();
    for g in gts {
        classes.entry(g.class_id).or_default().1.push(g);
    }
    for d in dets {
        if let Some(e) = classes.get_mut(&d.class_id) {
            e.0.push(d);
        }
    }
    if classes.is_empty() {
        return None;
    }
    let aps: Vec<f64> = classes
        .values()
        .map(|(d, g)| interpolated_ap(&match_class(d, g, iou_threshold), g.len()))
        .collect();
    Some(aps.iter().sum::<f64>() / aps.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApResult {
    /// `(threshold, AP)` for `0.50..=0.95` step `0.05`.
    pub per_threshold: Vec<(f64, f64)>,
    pub mean_ap: f64,
}

impl ApResult {
    pub fn at(&self, threshold: f64) -> Option<f64> {
        self.per_threshold
            .iter()
            .find(|(t, _)| (t - threshold).abs() < 1e-9)
            .map(|&(_, ap)| ap)
    }
}

pub fn ap_range(dets: &[EvalDetection], gts: &[EvalGt]) -> Option<ApResult> {
    let per_threshold = coco_thresholds()
        .into_iter()
        .map(|t| average_precision(dets, gts, t).map(|ap| (t, ap)))
        .collect::<Option<Vec<_>>>()?;
    let mean_ap = per_threshold.iter().map(|(_, ap)| ap).sum::<f64>() / per_threshold.len() as f64;
    Some(ApResult { per_threshold, mean_ap })
}

/// Fraction of GTs covered by a kept detection of the same class and scene at each
/// matching IoU.
pub fn recall_curve(kept: &[EvalDetection], gts: &[EvalGt], thresholds: &[f64]) -> Vec<f64> {
    if gts.is_empty() {
        return vec![0.0; thresholds.len()];
    }
    let best: Vec<f64> = gts
        .iter()
        .map(|g| {
            kept.iter()
                .filter(|d| d.scene == g.scene && d.class_id == g.class_id)
                .map(|d| d.bbox.iou_unchecked(&g.bbox))
                .fold(0.0, f64::max)
        })
        .collect();
    thresholds
        .iter()
        .map(|&t| best.iter().filter(|&&v| v >= t).count() as f64 / gts.len() as f64)
        .collect()
}

/// Pearson correlation. Errors on fewer than two points or zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch {
            what: "correlation inputs",
            left: x.len(),
            right: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(Error::Undefined("correlation needs at least two points"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Undefined("correlation with zero variance"));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub pearson: f64,
    pub mae: f64,
    /// `(true_iou, predicted_iou)` pairs that passed the `true > 0.5` filter.
    pub rows: Vec<(f64, f64)>,
}

/// Correlation and MAE between predicted and true IoU over boxes with true IoU > 0.5.
pub fn correlation_report(pred: &[f64], truth: &[f64]) -> Result<CorrelationReport> {
    if pred.len() != truth.len() {
        return Err(Error::LengthMismatch {
            what: "predicted vs true IoU",
            left: pred.len(),
            right: truth.len(),
        });
    }
    let rows: Vec<(f64, f64)> = truth
        .iter()
        .zip(pred)
        .filter(|(t, _)| **t > 0.5)
        .map(|(&t, &p)| (t, p))
        .collect();
    let (t, p): (Vec<f64>, Vec<f64>) = rows.iter().copied().unzip();
    let r = pearson(&t, &p)?;
    let mae = t.iter().zip(&p).map(|(a, b)| (a - b).abs()).sum::<f64>() / t.len() as f64;
    Ok(CorrelationReport { pearson: r, mae, rows })
}

/// Mean absolute error, `None` for empty input.
pub fn mae(pred: &[f64], truth: &[f64]) -> Option<f64> {
    (!pred.is_empty()).then(|| pred.iter().zip(truth).map(|(a, b)| (a - b).abs()).sum::<f64>() / pred.len() as f64)
}
