//! Axis-aligned boxes, IoU and the regression-delta parameterization.
//!
//! Boxes are stored center-based, `(cx, cy, w, h)`, in real-valued scene units.
//! Corner form only exists for conversion.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bound on `|dw|` and `|dh|` before exponentiation.
pub const DELTA_SIZE_CLAMP: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

static CLAMP_EVENTS: AtomicU64 = AtomicU64::new(0);

/// Number of times [`apply_deltas`] has clamped a size delta in this process.
pub fn clamp_events() -> u64 {
    CLAMP_EVENTS.load(Ordering::Relaxed)
}

/// An axis-aligned box in center form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub const fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    /// Builds a box and rejects non-positive or non-finite sizes.
    pub fn try_new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let b = Self { cx, cy, w, h };
        b.validate()?;
        Ok(b)
    }

    pub fn is_valid(&self) -> bool {
        self.w > 0.0
            && self.h > 0.0
            && self.cx.is_finite()
            && self.cy.is_finite()
            && self.w.is_finite()
            && self.h.is_finite()
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_valid() {
            Ok(())
        } else {
            Err(Error::InvalidBox(*self))
        }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// `(x1, y1, x2, y2)`.
    pub fn to_corners(&self) -> [f64; 4] {
        let hw = 0.5 * self.w;
        let hh = 0.5 * self.h;
        [self.cx - hw, self.cy - hh, self.cx + hw, self.cy + hh]
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self {
            cx: 0.5 * (x1 + x2),
            cy: 0.5 * (y1 + y2),
            w: x2 - x1,
            h: y2 - y1,
        }
    }

    /// Area of overlap with `other`; zero when disjoint.
    pub fn intersection(&self, other: &BBox) -> f64 {
        let [ax1, ay1, ax2, ay2] = self.to_corners();
        let [bx1, by1, bx2, by2] = other.to_corners();
        let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
        let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
        iw * ih
    }

    /// IoU without validation. Callers must guarantee both boxes are valid.
    pub fn iou_unchecked(&self, other: &BBox) -> f64 {
        if self == other {
            return 1.0;
        }
        let inter = self.intersection(other);
        if inter <= 0.0 {
            return 0.0;
        }
        let union = self.area() + other.area() - inter;
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Regression offsets between a reference box and a target box.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Deltas {
    pub dx: f64,
    pub dy: f64,
    pub dw: f64,
    pub dh: f64,
}

impl Deltas {
    pub const ZERO: Deltas = Deltas {
        dx: 0.0,
        dy: 0.0,
        dw: 0.0,
        dh: 0.0,
    };

    pub const fn new(dx: f64, dy: f64, dw: f64, dh: f64) -> Self {
        Self { dx, dy, dw, dh }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.dx, self.dy, self.dw, self.dh]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self {
            dx: v[0],
            dy: v[1],
            dw: v[2],
            dh: v[3],
        }
    }
}

/// Intersection over union of two valid boxes. Symmetric, in `[0, 1]`.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    Ok(a.iou_unchecked(b))
}

/// Standard R-CNN offsets taking `proposal` onto `gt`.
pub fn encode_deltas(proposal: &BBox, gt: &BBox) -> Result<Deltas> {
    proposal.validate()?;
    gt.validate()?;
    Ok(encode_unchecked(proposal, gt))
}

pub(crate) fn encode_unchecked(p: &BBox, g: &BBox) -> Deltas {
    Deltas {
        dx: (g.cx - p.cx) / p.w,
        dy: (g.cy - p.cy) / p.h,
        dw: (g.w / p.w).ln(),
        dh: (g.h / p.h).ln(),
    }
}

/// Inverse of [`encode_deltas`]. Size deltas beyond [`DELTA_SIZE_CLAMP`] are clamped
/// and counted in [`clamp_events`].
pub fn apply_deltas(b: &BBox, d: &Deltas) -> BBox {
    apply_deltas_flagged(b, d).0
}

/// Like [`apply_deltas`], also reporting whether a clamp happened.
pub fn apply_deltas_flagged(b: &BBox, d: &Deltas) -> (BBox, bool) {
    let dw = d.dw.clamp(-DELTA_SIZE_CLAMP, DELTA_SIZE_CLAMP);
    let dh = d.dh.clamp(-DELTA_SIZE_CLAMP, DELTA_SIZE_CLAMP);
    let clamped = dw != d.dw || dh != d.dh;
    if clamped {
        CLAMP_EVENTS.fetch_add(1, Ordering::Relaxed);
    }
    let out = BBox {
        cx: b.cx + d.dx * b.w,
        cy: b.cy + d.dy * b.h,
        w: b.w * dw.exp(),
        h: b.h * dh.exp(),
    };
    (out, clamped)
}

/// Index and IoU of the box in `gts` that best overlaps `b`. Ties go to the lower index.
pub fn argmax_iou<'a, I>(b: &BBox, gts: I) -> Option<(usize, f64)>
where
    I: IntoIterator<Item = &'a BBox>,
{
    let mut best: Option<(usize, f64)> = None;
    for (i, g) in gts.into_iter().enumerate() {
        let v = b.iou_unchecked(g);
        match best {
            Some((_, bv)) if bv >= v => {}
            _ => best = Some((i, v)),
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Counts grid cells whose centers fall inside both / either box.
    fn grid_iou(a: &BBox, b: &BBox, step: f64) -> f64 {
        let [ax1, ay1, ax2, ay2] = a.to_corners();
        let [bx1, by1, bx2, by2] = b.to_corners();
        let x0 = ax1.min(bx1);
        let y0 = ay1.min(by1);
        let nx = ((ax2.max(bx2) - x0) / step).ceil() as usize;
        let ny = ((ay2.max(by2) - y0) / step).ceil() as usize;
        let (mut inter, mut union) = (0u64, 0u64);
        for i in 0..nx {
            let x = x0 + (i as f64 + 0.5) * step;
            let in_ax = x >= ax1 && x < ax2;
            let in_bx = x >= bx1 && x < bx2;
            if !in_ax && !in_bx {
                continue;
            }
            for j in 0..ny {
                let y = y0 + (j as f64 + 0.5) * step;
                let ina = in_ax && y >= ay1 && y < ay2;
                let inb = in_bx && y >= by1 && y < by2;
                inter += (ina && inb) as u64;
                union += (ina || inb) as u64;
            }
        }
        inter as f64 / union as f64
    }

    #[test]
    fn identical_and_disjoint() {
        let a = BBox::new(5.0, 5.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        let c = BBox::new(0.0, 0.0, 2.0, 2.0);
        let d = BBox::new(100.0, 100.0, 2.0, 2.0);
        assert_eq!(iou(&c, &d).unwrap(), 0.0);
    }

    #[test]
    fn half_shifted_square() {
        let a = BBox::new(5.0, 5.0, 10.0, 10.0);
        let b = BBox::new(10.0, 5.0, 10.0, 10.0);
        // Grid oracle at 1/1000 units gives 50/150 to within counting error.
        let oracle = grid_iou(&a, &b, 1e-3);
        assert!((oracle - 1.0 / 3.0).abs() < 1e-4, "{oracle}");
        assert!((iou(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_degenerate() {
        let a = BBox::new(0.0, 0.0, 0.0, 1.0);
        let b = BBox::new(0.0, 0.0, 1.0, 1.0);
        assert!(matches!(iou(&a, &b), Err(Error::InvalidBox(_))));
        assert!(BBox::try_new(0.0, 0.0, 1.0, -1.0).is_err());
        assert!(encode_deltas(&b, &a).is_err());
    }

    #[test]
    fn grid_oracle_agreement() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let a = BBox::new(
                rng.random_range(0.0..6.0),
                rng.random_range(0.0..6.0),
                rng.random_range(0.5..4.0),
                rng.random_range(0.5..4.0),
            );
            let b = BBox::new(
                rng.random_range(0.0..6.0),
                rng.random_range(0.0..6.0),
                rng.random_range(0.5..4.0),
                rng.random_range(0.5..4.0),
            );
            let got = iou(&a, &b).unwrap();
            assert!((got - grid_iou(&a, &b, 5e-3)).abs() < 2e-3);
        }
    }

    #[test]
    fn delta_examples() {
        let g = BBox::new(3.0, -2.0, 7.0, 4.0);
        assert_eq!(encode_deltas(&g, &g).unwrap(), Deltas::ZERO);
        let d = encode_deltas(&BBox::new(0.0, 0.0, 10.0, 10.0), &BBox::new(1.0, 0.0, 10.0, 10.0)).unwrap();
        assert_eq!(d, Deltas::new(0.1, 0.0, 0.0, 0.0));
        assert_eq!(apply_deltas(&g, &Deltas::ZERO), g);
        let wide = apply_deltas(&BBox::new(0.0, 0.0, 10.0, 10.0), &Deltas::new(0.0, 0.0, 2f64.ln(), 0.0));
        assert!((wide.w - 20.0).abs() < 1e-12);
        assert_eq!((wide.cx, wide.cy, wide.h), (0.0, 0.0, 10.0));
    }

    #[test]
    fn clamp_is_counted() {
        let before = clamp_events();
        let (b, clamped) = apply_deltas_flagged(&BBox::new(0.0, 0.0, 1.0, 1.0), &Deltas::new(0.0, 0.0, 50.0, -50.0));
        assert!(clamped);
        assert!(b.is_valid());
        assert!((b.w - 1000.0 / 16.0).abs() < 1e-9);
        assert!(clamp_events() > before);
    }

    #[test]
    fn argmax_prefers_lower_index_on_ties() {
        let g = [BBox::new(0.0, 0.0, 2.0, 2.0), BBox::new(0.0, 0.0, 2.0, 2.0)];
        assert_eq!(argmax_iou(&g[0], &g), Some((0, 1.0)));
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (-50.0..50.0f64, -50.0..50.0f64, 1.0..30.0f64, 1.0..30.0f64).prop_map(|(cx, cy, w, h)| BBox::new(cx, cy, w, h))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(2000))]

        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou(&a, &b).unwrap();
            prop_assert_eq!(ab, iou(&b, &a).unwrap());
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(iou(&a, &a).unwrap(), 1.0);
        }

        #[test]
        fn corners_round_trip(a in arb_box()) {
            let [x1, y1, x2, y2] = a.to_corners();
            let r = BBox::from_corners(x1, y1, x2, y2);
            for (u, v) in [(a.cx, r.cx), (a.cy, r.cy), (a.w, r.w), (a.h, r.h)] {
                prop_assert!((u - v).abs() <= 1e-12 * u.abs().max(1.0));
            }
        }

        #[test]
        fn deltas_round_trip(p in arb_box(), g in arb_box()) {
            let back = apply_deltas(&p, &encode_deltas(&p, &g).unwrap());
            for (u, v) in [(g.cx, back.cx), (g.cy, back.cy), (g.w, back.w), (g.h, back.h)] {
                prop_assert!((u - v).abs() <= 1e-9 * u.abs().max(1.0));
            }
        }
    }
}
