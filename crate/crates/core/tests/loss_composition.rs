//! Regression-loss composition of an untrained (zero-output) head across IoU intervals.

use iou_uniform::boxgeom::{encode_deltas, Deltas};
use iou_uniform::experiment::{build_dataset, ExperimentConfig};
use iou_uniform::loss::loss_composition;
use iou_uniform::rpn_sim::Scene;
use iou_uniform::toyhead::SceneSample;

fn shares(samples: &[SceneSample], scenes: &[Scene], cfg: &ExperimentConfig, weighted: bool) -> Vec<f64> {
    let targets: Vec<Deltas> = samples
        .iter()
        .map(|s| encode_deltas(&s.sample.bbox, &scenes[s.scene].gts[s.sample.gt_index].bbox).unwrap())
        .collect();
    let intervals: Vec<usize> = samples.iter().map(|s| s.sample.interval).collect();
    let zeros = vec![Deltas::default(); samples.len()];
    loss_composition(&zeros, &targets, &intervals, &cfg.sampler.intervals, weighted).unwrap()
}

#[test]
fn skewed_loss_is_dominated_by_low_iou_and_weights_rebalance_it() {
    let mut cfg = ExperimentConfig::default();
    cfg.scenes.train = 10;
    cfg.scenes.test = 0;
    let data = build_dataset(&cfg).unwrap();
    let rpn = shares(&data.skewed, &data.train, &cfg, false);
    let uni = shares(&data.uniform, &data.train, &cfg, false);
    let uw = shares(&data.uniform, &data.train, &cfg, true);
    for s in [&rpn, &uni, &uw] {
        assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    // RPN positives: the lowest interval carries most of the loss, the top one almost none
    assert!(rpn[0] > 0.5, "{rpn:?}");
    assert!(rpn.windows(2).all(|w| w[0] > w[1]), "{rpn:?}");

    // equal counts per interval: the share still falls with IoU, but far less steeply
    assert!(uni.windows(2).all(|w| w[0] > w[1]), "{uni:?}");
    assert!(uni[0] < rpn[0]);
    assert!(uni[3] > rpn[3]);

    // up-weighting the high-IoU intervals moves loss toward them
    assert!(uw[0] < uni[0]);
    assert!(uw[2] > uni[2] && uw[3] > uni[3]);
    let spread = |s: &[f64]| s.iter().cloned().fold(0.0, f64::max) - s.iter().cloned().fold(1.0, f64::min);
    assert!(spread(&uw) < spread(&uni), "{uw:?} vs {uni:?}");
}
