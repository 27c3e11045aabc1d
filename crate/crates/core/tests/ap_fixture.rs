use iou_uniform::eval::{average_precision, EvalDetection, EvalGt};
use serde::Deserialize;

#[derive(Deserialize)]
struct Expected {
    threshold: f64,
    numerator: u32,
    denominator: u32,
}

#[derive(Deserialize)]
struct Fixture {
    gts: Vec<EvalGt>,
    detections: Vec<EvalDetection>,
    expected: Vec<Expected>,
}

fn fixture() -> Fixture {
    serde_json::from_str(include_str!("fixtures/ap_fixture.json")).unwrap()
}

#[test]
fn matches_hand_computed_values() {
    let f = fixture();
    for e in &f.expected {
        let ap = average_precision(&f.detections, &f.gts, e.threshold).unwrap();
        let want = f64::from(e.numerator) / f64::from(e.denominator);
        assert!((ap - want).abs() < 1e-12, "AP@{}: {ap} vs {want}", e.threshold);
    }
}

#[test]
fn only_ranks_matter() {
    let f = fixture();
    let squashed: Vec<EvalDetection> = f
        .detections
        .iter()
        .map(|d| EvalDetection {
            score: (5.0 * d.score).exp() - 3.0,
            ..*d
        })
        .collect();
    for e in &f.expected {
        assert_eq!(
            average_precision(&f.detections, &f.gts, e.threshold),
            average_precision(&squashed, &f.gts, e.threshold)
        );
    }
}
