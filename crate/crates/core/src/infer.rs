//! Refinement, IoU prediction with and without feature re-extraction, score fusion, NMS.

use serde::{Deserialize, Serialize};

use crate::boxgeom::{apply_deltas, BBox};
use crate::error::{Error, Result};
use crate::rpn_sim::Scene;
use crate::toyhead::{FeatureExtractor, FeatureVector, HeadModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IouMode {
    /// Predict from the features extracted at the source proposal.
    OnePass,
    /// Re-extract features at the refined box, then predict.
    TwoPass,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ranking {
    /// Classification score only.
    Cls,
    /// Classification score times predicted IoU.
    Fused,
}

/// A refined proposal with its scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub source_proposal: BBox,
    pub class_id: usize,
    pub cls_score: f64,
    pub iou_pred: f64,
    pub fused_score: f64,
    /// False when the proposal matched no GT and passed through unrefined.
    pub refined: bool,
}

impl Detection {
    pub fn score(&self, ranking: Ranking) -> f64 {
        match ranking {
            Ranking::Cls => self.cls_score,
            Ranking::Fused => self.fused_score,
        }
    }

    /// Sets `iou_pred` and recomputes the fused score.
    pub fn with_iou(mut self, iou_pred: f64, ranking: Ranking) -> Self {
        self.iou_pred = iou_pred;
        self.fused_score = match ranking {
            Ranking::Cls => self.cls_score,
            Ranking::Fused => self.cls_score * iou_pred,
        };
        self
    }
}

/// Output of [`refine`] for one proposal: the refined box and the features it was
/// refined from.
#[derive(Debug, Clone, PartialEq)]
pub struct Refined {
    pub bbox: BBox,
    pub source: BBox,
    pub source_features: Option<FeatureVector>,
}

/// `apply_deltas(p, regressor(featurize(p)))` for every proposal. Unmatched proposals
/// pass through unchanged with no features.
pub fn refine(proposals: &[BBox], regressor: &HeadModel, scene: &Scene, extractor: &FeatureExtractor) -> Vec<Refined> {
    proposals
        .iter()
        .map(|p| match extractor.featurize(p, scene) {
            Ok(f) => Refined {
                bbox: apply_deltas(p, &regressor.predict_deltas(&f)),
                source: *p,
                source_features: Some(f),
            },
            Err(_) => Refined {
                bbox: *p,
                source: *p,
                source_features: None,
            },
        })
        .collect()
}

/// Predicted IoU of `refined.bbox`. `OnePass` reuses the source features; `TwoPass`
/// extracts features again at the refined box. Unmatched boxes predict 0.
pub fn predict_iou(
    refined: &Refined,
    iou_model: &HeadModel,
    scene: &Scene,
    extractor: &FeatureExtractor,
    mode: IouMode,
) -> f64 {
    let Some(src) = &refined.source_features else {
        return 0.0;
    };
    match mode {
        IouMode::OnePass => iou_model.predict_iou(src),
        IouMode::TwoPass if refined.bbox == refined.source => iou_model.predict_iou(src),
        IouMode::TwoPass => match extractor.featurize(&refined.bbox, scene) {
            Ok(f) => iou_model.predict_iou(&f),
            Err(_) => 0.0,
        },
    }
}

fn rank_order(dets: &[Detection], ranking: Ranking) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    // descending score, ties by lower index; NaN sorts last
    order.sort_by(|&a, &b| {
        let (sa, sb) = (dets[a].score(ranking), dets[b].score(ranking));
        sb.partial_cmp(&sa)
            .unwrap_or_else(|| sa.is_nan().cmp(&sb.is_nan()))
            .then(a.cmp(&b))
    });
    order
}

/// Greedy class-wise NMS. Returns indices of kept detections in rank order; a detection
/// is suppressed when its IoU with a kept detection of the same class exceeds
/// `iou_threshold`.
pub fn nms_indices(dets: &[Detection], iou_threshold: f64, ranking: Ranking) -> Result<Vec<usize>> {
    if !(iou_threshold > 0.0 && iou_threshold < 1.0) {
        return Err(Error::Config(format!(
            "NMS threshold {iou_threshold} must be in (0, 1)"
        )));
    }
    let mut keep: Vec<usize> = Vec::new();
    for i in rank_order(dets, ranking) {
        let d = &dets[i];
        let suppressed = keep.iter().any(|&k| {
            let kd = &dets[k];
            kd.class_id == d.class_id && kd.bbox.iou_unchecked(&d.bbox) > iou_threshold
        });
        if !suppressed {
            keep.push(i);
        }
    }
    Ok(keep)
}

pub fn nms(dets: &[Detection], iou_threshold: f64, ranking: Ranking) -> Result<Vec<Detection>> {
    Ok(nms_indices(dets, iou_threshold, ranking)?
        .into_iter()
        .map(|i| dets[i])
        .collect())
}

/// Builds detections for one scene: refine every proposal, score IoU in `mode`, fuse.
#[allow(clippy::too_many_arguments)]
pub fn detect(
    proposals: &[BBox],
    cls_scores: &[f64],
    regressor: &HeadModel,
    iou_model: Option<&HeadModel>,
    scene: &Scene,
    extractor: &FeatureExtractor,
    mode: IouMode,
    ranking: Ranking,
) -> Result<Vec<Detection>> {
    if proposals.len() != cls_scores.len() {
        return Err(Error::LengthMismatch {
            what: "proposals vs classification scores",
            left: proposals.len(),
            right: cls_scores.len(),
        });
    }
    let refined = refine(proposals, regressor, scene, extractor);
    Ok(refined
        .iter()
        .zip(cls_scores)
        .map(|(r, &cls)| {
            let class_id = r.source_features.as_ref().map_or(0, |f| scene.gts[f.gt_index].class_id);
            let iou_pred = iou_model.map_or(1.0, |m| predict_iou(r, m, scene, extractor, mode));
            Detection {
                bbox: r.bbox,
                source_proposal: r.source,
                class_id,
                cls_score: cls,
                iou_pred,
                fused_score: cls,
                refined: r.source_features.is_some(),
            }
            .with_iou(iou_pred, if iou_model.is_some() { ranking } else { Ranking::Cls })
        })
        .collect())
}
