//! Synthetic scenes and an RPN-like proposal source.
//!
//! Positive proposals follow a geometric decay over 0.1-wide IoU bins starting at 0.5,
//! so high-IoU proposals are scarce the way they are in a real first stage. Negatives
//! are loosely overlapping jitters. Classification scores are simulated from the
//! proposal IoU with Gaussian noise, giving a score channel that tracks localization
//! quality only imperfectly.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::boxgeom::{argmax_iou, BBox};
use crate::error::{Error, Result};
use crate::sampler::{jitter_once, IntervalConfig, JitterRange, LabeledSample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub bbox: BBox,
    pub class_id: usize,
    pub appearance: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub id: u64,
    pub width: f64,
    pub height: f64,
    pub gts: Vec<GroundTruth>,
}

impl Scene {
    pub fn gt_boxes(&self) -> Vec<BBox> {
        self.gts.iter().map(|g| g.bbox).collect()
    }

    /// Best-overlapping GT for `b`, if any overlaps at all.
    pub fn best_match(&self, b: &BBox) -> Option<(usize, f64)> {
        argmax_iou(b, self.gts.iter().map(|g| &g.bbox)).filter(|&(_, v)| v > 0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub width: f64,
    pub height: f64,
    pub n_gts: usize,
    /// Side lengths are log-uniform in `[min_size, max_size]`.
    pub min_size: f64,
    pub max_size: f64,
    /// Largest IoU allowed between two placed GTs; `0` forces disjoint boxes.
    pub max_pairwise_iou: f64,
    pub appearance_dim: usize,
    pub num_classes: usize,
    pub placement_attempts: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 640.0,
            height: 480.0,
            n_gts: 4,
            min_size: 32.0,
            max_size: 160.0,
            max_pairwise_iou: 0.0,
            appearance_dim: 8,
            num_classes: 1,
            placement_attempts: 1000,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_gts == 0 {
            return Err(Error::Config("n_gts must be at least 1".into()));
        }
        if !(self.min_size > 0.0 && self.min_size <= self.max_size) {
            return Err(Error::Config("need 0 < min_size <= max_size".into()));
        }
        if self.max_size > self.width.min(self.height) {
            return Err(Error::Config("max_size does not fit in the scene".into()));
        }
        if !(0.0..=1.0).contains(&self.max_pairwise_iou) {
            return Err(Error::Config("max_pairwise_iou must be in [0, 1]".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be at least 1".into()));
        }
        Ok(())
    }
}

/// Reported when fewer GTs than requested could be placed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlacementShortfall {
    pub requested: usize,
    pub placed: usize,
}

pub fn simulate_scene<R: Rng + ?Sized>(
    id: u64,
    cfg: &SceneConfig,
    rng: &mut R,
) -> Result<(Scene, Option<PlacementShortfall>)> {
    cfg.validate()?;
    let (ln_lo, ln_hi) = (cfg.min_size.ln(), cfg.max_size.ln());
    let mut gts: Vec<GroundTruth> = Vec::with_capacity(cfg.n_gts);
    let mut attempts = 0;
    while gts.len() < cfg.n_gts && attempts < cfg.placement_attempts {
        attempts += 1;
        let w = (ln_lo + (ln_hi - ln_lo) * rng.random::<f64>()).exp();
        let h = (ln_lo + (ln_hi - ln_lo) * rng.random::<f64>()).exp();
        let cx = 0.5 * w + (cfg.width - w) * rng.random::<f64>();
        let cy = 0.5 * h + (cfg.height - h) * rng.random::<f64>();
        let b = BBox::new(cx, cy, w, h);
        if gts.iter().any(|g| g.bbox.iou_unchecked(&b) > cfg.max_pairwise_iou) {
            continue;
        }
        let class_id = if cfg.num_classes > 1 {
            rng.random_range(0..cfg.num_classes)
        } else {
            0
        };
        let appearance = (0..cfg.appearance_dim).map(|_| StandardNormal.sample(rng)).collect();
        gts.push(GroundTruth {
            bbox: b,
            class_id,
            appearance,
        });
    }
    let shortfall = (gts.len() < cfg.n_gts).then_some(PlacementShortfall {
        requested: cfg.n_gts,
        placed: gts.len(),
    });
    Ok((
        Scene {
            id,
            width: cfg.width,
            height: cfg.height,
            gts,
        },
        shortfall,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RpnSimConfig {
    pub proposals_per_gt: usize,
    /// Count multiplier from one 0.1-wide IoU bin to the next.
    pub decay: f64,
    /// Fraction of all proposals that are negatives (IoU < 0.5).
    pub negative_fraction: f64,
    pub cls_noise_sigma: f64,
    pub cls_slope: f64,
    pub cls_bias: f64,
    /// Positives kept per scene.
    pub positive_cap: usize,
    /// Jitter bounds used to hit each 0.1-wide bin in `[0.5, 1.0]`.
    pub bin_ranges: Vec<JitterRange>,
    pub negative_range: JitterRange,
    /// Negatives overlap their nearest GT with IoU in `[negative_min_iou, 0.5)`.
    pub negative_min_iou: f64,
    /// Attempt budget per proposal.
    pub max_attempts: usize,
}

impl Default for RpnSimConfig {
    fn default() -> Self {
        Self {
            proposals_per_gt: 24,
            decay: 0.5,
            negative_fraction: 0.25,
            cls_noise_sigma: 0.6,
            cls_slope: 4.0,
            cls_bias: -2.0,
            positive_cap: 100,
            bin_ranges: vec![
                JitterRange::new(0.35, 0.6, 1.5),
                JitterRange::new(0.25, 0.7, 1.35),
                JitterRange::new(0.15, 0.8, 1.2),
                JitterRange::new(0.08, 0.9, 1.1),
                JitterRange::new(0.04, 0.95, 1.05),
            ],
            negative_range: JitterRange::new(0.6, 0.5, 2.0),
            negative_min_iou: 0.1,
            max_attempts: 2000,
        }
    }
}

impl RpnSimConfig {
    pub const BIN_WIDTH: f64 = 0.1;
    pub const FIRST_BIN: f64 = 0.5;

    pub fn num_bins(&self) -> usize {
        self.bin_ranges.len()
    }

    pub fn bin_edges(&self) -> Vec<f64> {
        (0..=self.num_bins())
            .map(|k| (Self::FIRST_BIN + Self::BIN_WIDTH * k as f64).min(1.0))
            .collect()
    }

    /// Expected share of positives per bin, proportional to `decay^k`.
    pub fn bin_probabilities(&self) -> Vec<f64> {
        let raw: Vec<f64> = (0..self.num_bins()).map(|k| self.decay.powi(k as i32)).collect();
        let z: f64 = raw.iter().sum();
        raw.into_iter().map(|p| p / z).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::Config(format!("decay {} must be in (0, 1]", self.decay)));
        }
        if !(0.0..1.0).contains(&self.negative_fraction) {
            return Err(Error::Config("negative_fraction must be in [0, 1)".into()));
        }
        if self.cls_noise_sigma < 0.0 {
            return Err(Error::Config("cls_noise_sigma must be >= 0".into()));
        }
        if self.num_bins() != 5 {
            return Err(Error::Config(
                "bin_ranges must cover the five 0.1-wide bins in [0.5, 1.0]".into(),
            ));
        }
        for r in self.bin_ranges.iter().chain([&self.negative_range]) {
            r.validate()?;
        }
        if !(0.0..0.5).contains(&self.negative_min_iou) || self.negative_min_iou <= 0.0 {
            return Err(Error::Config("negative_min_iou must be in (0, 0.5)".into()));
        }
        if self.max_attempts == 0 {
            return Err(Error::Config("max_attempts must be at least 1".into()));
        }
        Ok(())
    }
}

/// A proposal with its best-matching GT. `iou < 0.5` for negatives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub bbox: BBox,
    pub gt_index: usize,
    pub iou: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ProposalSet {
    pub positives: Vec<LabeledSample>,
    pub negatives: Vec<Proposal>,
    /// Proposals that could not be placed within their attempt budget.
    pub shortfall: usize,
}

impl ProposalSet {
    /// Positives then negatives, as plain proposals.
    pub fn all(&self) -> Vec<Proposal> {
        self.positives
            .iter()
            .map(|s| Proposal {
                bbox: s.bbox,
                gt_index: s.gt_index,
                iou: s.iou,
            })
            .chain(self.negatives.iter().copied())
            .collect()
    }
}

fn draw_bin<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    probs.len() - 1
}

/// Positives with a decaying IoU histogram plus loosely overlapping negatives.
///
/// The per-scene positive cap is split evenly over GTs, so `positives.len()` never
/// exceeds `cfg.positive_cap`.
pub fn simulate_rpn_proposals<R: Rng + ?Sized>(
    scene: &Scene,
    cfg: &RpnSimConfig,
    intervals: &IntervalConfig,
    rng: &mut R,
) -> Result<ProposalSet> {
    cfg.validate()?;
    intervals.validate()?;
    let gts = scene.gt_boxes();
    let k = gts.len();
    let mut out = ProposalSet::default();
    if k == 0 {
        return Ok(out);
    }
    let probs = cfg.bin_probabilities();
    let edges = cfg.bin_edges();
    let last = cfg.num_bins() - 1;

    for (gi, gt) in gts.iter().enumerate() {
        let quota = (cfg.positive_cap / k + usize::from(gi < cfg.positive_cap % k)).min(cfg.proposals_per_gt);
        for _ in 0..quota {
            let bin = draw_bin(&probs, rng);
            let (lo, hi) = (edges[bin], edges[bin + 1]);
            let mut placed = false;
            for _ in 0..cfg.max_attempts {
                let b = jitter_once(gt, &cfg.bin_ranges[bin], rng);
                let Some((best, v)) = argmax_iou(&b, &gts) else {
                    continue;
                };
                if best != gi || v < lo || (v >= hi && !(bin == last && v <= 1.0)) {
                    continue;
                }
                out.positives.push(LabeledSample {
                    bbox: b,
                    gt_index: gi,
                    iou: v,
                    interval: intervals.assign_interval(v)?,
                });
                placed = true;
                break;
            }
            if !placed {
                out.shortfall += 1;
            }
        }
    }

    let n_neg = if cfg.negative_fraction > 0.0 {
        (out.positives.len() as f64 * cfg.negative_fraction / (1.0 - cfg.negative_fraction)).round() as usize
    } else {
        0
    };
    for _ in 0..n_neg {
        let src = rng.random_range(0..k);
        let mut placed = false;
        for _ in 0..cfg.max_attempts {
            let b = jitter_once(&gts[src], &cfg.negative_range, rng);
            let Some((best, v)) = argmax_iou(&b, &gts) else {
                continue;
            };
            if v >= cfg.negative_min_iou && v < 0.5 {
                out.negatives.push(Proposal {
                    bbox: b,
                    gt_index: best,
                    iou: v,
                });
                placed = true;
                break;
            }
        }
        if !placed {
            out.shortfall += 1;
        }
    }
    Ok(out)
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `sigmoid(slope * iou + bias + noise)`, `noise ~ N(0, cls_noise_sigma)`.
pub fn simulate_cls_score<R: Rng + ?Sized>(iou: f64, cfg: &RpnSimConfig, rng: &mut R) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    let s = sigmoid(cfg.cls_slope * iou + cfg.cls_bias + cfg.cls_noise_sigma * z);
    // keep strictly inside (0, 1)
    s.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON)
}
