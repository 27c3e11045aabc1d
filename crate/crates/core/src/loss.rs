//! Smooth-L1 and the interval-weighted regression loss.

use serde::{Deserialize, Serialize};

use crate::boxgeom::Deltas;
use crate::error::{Error, Result};
use crate::sampler::IntervalConfig;

pub const DEFAULT_BETA: f64 = 1.0;

/// Smooth-L1 value and derivative at `x`.
pub fn smooth_l1(x: f64, beta: f64) -> (f64, f64) {
    debug_assert!(beta > 0.0);
    let ax = x.abs();
    if ax < beta {
        (0.5 * x * x / beta, x / beta)
    } else {
        (ax - 0.5 * beta, x.signum())
    }
}

/// Sum with a fixed pairwise reduction tree.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    match v.len() {
        0 => 0.0,
        1 => v[0],
        n if n <= 8 => v.iter().sum(),
        n => {
            let (a, b) = v.split_at(n / 2);
            pairwise_sum(a) + pairwise_sum(b)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub per_interval: Vec<f64>,
    pub per_interval_share: Vec<f64>,
}

impl LossReport {
    /// `(interval, loss, share)` rows.
    pub fn rows(&self) -> impl Iterator<Item = (usize, f64, f64)> + '_ {
        self.per_interval
            .iter()
            .zip(&self.per_interval_share)
            .enumerate()
            .map(|(i, (l, s))| (i, *l, *s))
    }
}

/// Per-sample smooth-L1 summed over the four delta components, and its gradient
/// with respect to the prediction.
pub fn sample_loss(pred: &Deltas, target: &Deltas, beta: f64) -> (f64, [f64; 4]) {
    let p = pred.to_array();
    let t = target.to_array();
    let mut value = 0.0;
    let mut grad = [0.0; 4];
    for k in 0..4 {
        let (v, g) = smooth_l1(p[k] - t[k], beta);
        value += v;
        grad[k] = g;
    }
    (value, grad)
}

/// `sum_i w_{interval(i)} * L(pred_i - target_i)`, broken down by interval.
pub fn weighted_reg_loss(
    preds: &[Deltas],
    targets: &[Deltas],
    intervals: &[usize],
    cfg: &IntervalConfig,
    beta: f64,
) -> Result<LossReport> {
    if preds.len() != targets.len() {
        return Err(Error::LengthMismatch {
            what: "predictions vs targets",
            left: preds.len(),
            right: targets.len(),
        });
    }
    if preds.len() != intervals.len() {
        return Err(Error::LengthMismatch {
            what: "predictions vs intervals",
            left: preds.len(),
            right: intervals.len(),
        });
    }
    if !(beta > 0.0) {
        return Err(Error::Config(format!("smooth-L1 beta {beta} must be positive")));
    }
    let n = cfg.num_intervals();
    let mut buckets: Vec<Vec<f64>> = vec![Vec::new(); n];
    for ((p, t), &j) in preds.iter().zip(targets).zip(intervals) {
        let w = *cfg
            .weights
            .get(j)
            .ok_or_else(|| Error::Config(format!("interval index {j} out of range")))?;
        buckets[j].push(w * sample_loss(p, t, beta).0);
    }
    let per_interval: Vec<f64> = buckets.iter().map(|b| pairwise_sum(b)).collect();
    let total = pairwise_sum(&per_interval);
    let per_interval_share = if total > 0.0 {
        per_interval.iter().map(|l| l / total).collect()
    } else {
        vec![0.0; n]
    };
    Ok(LossReport {
        total,
        per_interval,
        per_interval_share,
    })
}

/// Share of the (optionally weighted) regression loss contributed by each interval.
pub fn loss_composition(
    preds: &[Deltas],
    targets: &[Deltas],
    intervals: &[usize],
    cfg: &IntervalConfig,
    weighted: bool,
) -> Result<Vec<f64>> {
    if preds.is_empty() {
        return Err(Error::Empty("loss composition batch"));
    }
    let cfg = if weighted { cfg.clone() } else { cfg.unweighted() };
    Ok(weighted_reg_loss(preds, targets, intervals, &cfg, DEFAULT_BETA)?.per_interval_share)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng;

    #[test]
    fn smooth_l1_values() {
        assert_eq!(smooth_l1(0.0, 1.0), (0.0, 0.0));
        assert_eq!(smooth_l1(0.5, 1.0).0, 0.125);
        assert_eq!(smooth_l1(2.0, 1.0), (1.5, 1.0));
        assert_eq!(smooth_l1(-2.0, 1.0), (1.5, -1.0));
        // continuity at the kink
        let (l, r) = (smooth_l1(1.0 - 1e-12, 1.0), smooth_l1(1.0, 1.0));
        assert!((l.0 - r.0).abs() < 1e-11 && (l.1 - r.1).abs() < 1e-11);
    }

    #[test]
    fn smooth_l1_gradient_matches_differences() {
        let mut rng = seeded(17);
        let eps = 1e-6;
        for _ in 0..1000 {
            let beta = rng.random_range(0.2..2.0);
            let mut x: f64 = rng.random_range(-4.0..4.0);
            if (x.abs() - beta).abs() < 10.0 * eps {
                x += 20.0 * eps;
            }
            let fd = (smooth_l1(x + eps, beta).0 - smooth_l1(x - eps, beta).0) / (2.0 * eps);
            let g = smooth_l1(x, beta).1;
            assert!((g - fd).abs() / g.abs().max(1.0) < 1e-6, "x={x} beta={beta}");
        }
        for x in [1.0 + 1e-3, 1.0 - 1e-3, -1.0 + 1e-3, -1.0 - 1e-3] {
            let fd = (smooth_l1(x + 1e-5, 1.0).0 - smooth_l1(x - 1e-5, 1.0).0) / 2e-5;
            assert!((smooth_l1(x, 1.0).1 - fd).abs() < 1e-4);
        }
    }

    #[test]
    fn default_weights_scale_each_interval() {
        let cfg = IntervalConfig::default();
        let preds = vec![Deltas::new(2.0, -2.0, 2.0, -2.0); 4];
        let targets = vec![Deltas::ZERO; 4];
        let r = weighted_reg_loss(&preds, &targets, &[0, 1, 2, 3], &cfg, 1.0).unwrap();
        assert_eq!(r.per_interval, vec![6.0, 9.0, 18.0, 18.0]);
        assert_eq!(r.total, 51.0);
        assert!((r.per_interval_share.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn exact_predictions_cost_nothing() {
        let cfg = IntervalConfig::default();
        let d = vec![Deltas::new(0.1, 0.2, -0.3, 0.05); 3];
        let r = weighted_reg_loss(&d, &d, &[0, 2, 3], &cfg, 1.0).unwrap();
        assert_eq!(r.total, 0.0);
        assert_eq!(r.per_interval_share, vec![0.0; 4]);
    }

    #[test]
    fn length_mismatch() {
        let cfg = IntervalConfig::default();
        let d = vec![Deltas::ZERO; 2];
        assert!(matches!(
            weighted_reg_loss(&d, &d[..1], &[0, 0], &cfg, 1.0),
            Err(Error::LengthMismatch { .. })
        ));
        assert!(matches!(
            weighted_reg_loss(&d, &d, &[0], &cfg, 1.0),
            Err(Error::LengthMismatch { .. })
        ));
    }

    fn random_batch(seed: u64, n: usize) -> (Vec<Deltas>, Vec<Deltas>, Vec<usize>) {
        let mut rng = seeded(seed);
        let mut d = || {
            Deltas::new(
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
            )
        };
        let preds: Vec<_> = (0..n).map(|_| d()).collect();
        let targets: Vec<_> = (0..n).map(|_| d()).collect();
        let mut rng = seeded(seed + 1);
        let intervals = (0..n).map(|_| rng.random_range(0..4)).collect();
        (preds, targets, intervals)
    }

    #[test]
    fn matches_scalar_oracle() {
        let cfg = IntervalConfig::default();
        let (p, t, iv) = random_batch(3, 777);
        let r = weighted_reg_loss(&p, &t, &iv, &cfg, 1.0).unwrap();
        let mut oracle = 0.0;
        for i in 0..p.len() {
            let (a, b) = (p[i].to_array(), t[i].to_array());
            for k in 0..4 {
                let e = (a[k] - b[k]).abs();
                let l = if e < 1.0 { 0.5 * e * e } else { e - 0.5 };
                oracle += cfg.weights[iv[i]] * l;
            }
        }
        assert!((r.total - oracle).abs() <= 1e-9 * oracle);
        assert!((r.total - r.per_interval.iter().sum::<f64>()).abs() <= 1e-9 * r.total);
    }

    #[test]
    fn linear_in_weights_and_unweighted_reduction() {
        let cfg = IntervalConfig::default();
        let (p, t, iv) = random_batch(4, 300);
        let base = weighted_reg_loss(&p, &t, &iv, &cfg, 1.0).unwrap();
        let doubled = IntervalConfig {
            weights: cfg.weights.iter().map(|w| 2.0 * w).collect(),
            ..cfg.clone()
        };
        let d = weighted_reg_loss(&p, &t, &iv, &doubled, 1.0).unwrap();
        assert_eq!(d.total, 2.0 * base.total);
        let flat = weighted_reg_loss(&p, &t, &iv, &cfg.unweighted(), 1.0).unwrap();
        let plain: f64 = p.iter().zip(&t).map(|(a, b)| sample_loss(a, b, 1.0).0).sum();
        assert!((flat.total - plain).abs() <= 1e-9 * plain);
    }

    #[test]
    fn pairwise_sum_is_exact_on_integers() {
        let v: Vec<f64> = (1..=1000).map(f64::from).collect();
        assert_eq!(pairwise_sum(&v), 500_500.0);
        assert_eq!(pairwise_sum(&[]), 0.0);
    }
}
