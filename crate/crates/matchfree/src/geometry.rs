//! Bounding boxes and the IoU/GIoU machinery behind the geometric cost
//! terms, with analytic gradients with respect to the predicted box.
//!
//! Boxes are stored center-format `(cx, cy, w, h)` in normalized
//! coordinates, matching the DETR convention. The L1 cost is computed in
//! center format as well.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Center-format bounding box. Width and height must be non-negative and all
/// fields finite; construction validates this.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        if !(cx.is_finite() && cy.is_finite() && w.is_finite() && h.is_finite()) {
            return Err(Error::validation(format!("non-finite box ({cx},{cy},{w},{h})")));
        }
        if w < 0.0 || h < 0.0 {
            return Err(Error::validation(format!("negative box extent w={w} h={h}")));
        }
        Ok(BBox { cx, cy, w, h })
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        BBox::new((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)
    }

    /// `(x1, y1, x2, y2)` with `x1 ≤ x2` and `y1 ≤ y2`.
    pub fn to_corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }
}

/// Sum of absolute coordinate differences in center format.
pub fn l1_cost(b: &BBox, g: &BBox) -> f64 {
    (b.cx - g.cx).abs() + (b.cy - g.cy).abs() + (b.w - g.w).abs() + (b.h - g.h).abs()
}

/// Subgradient of `l1_cost` with respect to `b` (sign convention: 0 at ties).
pub fn l1_grad(b: &BBox, g: &BBox) -> [f64; 4] {
    let s = |a: f64, c: f64| {
        if a > c {
            1.0
        } else if a < c {
            -1.0
        } else {
            0.0
        }
    };
    [s(b.cx, g.cx), s(b.cy, g.cy), s(b.w, g.w), s(b.h, g.h)]
}

/// Plain intersection-over-union. Two zero-area boxes yield 0.
pub fn iou(b: &BBox, g: &BBox) -> f64 {
    let (inter, union, _) = overlap_terms(b, g);
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU: `IoU − (area(enclosing) − area(union)) / area(enclosing)`,
/// always in `[-1, 1]`. Coincident zero-area boxes are defined to have
/// GIoU 0; distinct zero-area boxes approach the disjoint limit −1.
pub fn giou(b: &BBox, g: &BBox) -> f64 {
    let (inter, union, enclose) = overlap_terms(b, g);
    if union <= 0.0 {
        return if enclose <= 0.0 { 0.0 } else { -1.0 };
    }
    inter / union - (enclose - union) / enclose
}

/// `1 − giou`, in `[0, 2]`.
pub fn giou_loss(b: &BBox, g: &BBox) -> f64 {
    1.0 - giou(b, g)
}

fn overlap_terms(b: &BBox, g: &BBox) -> (f64, f64, f64) {
    let (bx1, by1, bx2, by2) = b.to_corners();
    let (gx1, gy1, gx2, gy2) = g.to_corners();
    let iw = (bx2.min(gx2) - bx1.max(gx1)).max(0.0);
    let ih = (by2.min(gy2) - by1.max(gy1)).max(0.0);
    let inter = iw * ih;
    let union = b.area() + g.area() - inter;
    let cw = bx2.max(gx2) - bx1.min(gx1);
    let ch = by2.max(gy2) - by1.min(gy1);
    (inter, union, cw * ch)
}

/// Analytic gradient of `giou_loss(b, g)` with respect to `(cx, cy, w, h)`
/// of `b`. Requires `b` non-degenerate (positive area). At the piecewise
/// boundaries (touching edges) the one-sided subgradient is returned.
pub fn giou_grad(b: &BBox, g: &BBox) -> Result<[f64; 4]> {
    if b.area() <= 0.0 {
        return Err(Error::validation("giou_grad requires a non-degenerate predicted box"));
    }
    let (bx1, by1, bx2, by2) = b.to_corners();
    let (gx1, gy1, gx2, gy2) = g.to_corners();

    let iw = bx2.min(gx2) - bx1.max(gx1);
    let ih = by2.min(gy2) - by1.max(gy1);
    let has_inter = iw > 0.0 && ih > 0.0;
    let inter = if has_inter { iw * ih } else { 0.0 };
    let union = b.area() + g.area() - inter;
    let cw = bx2.max(gx2) - bx1.min(gx1);
    let ch = by2.max(gy2) - by1.min(gy1);
    let enclose = cw * ch;

    // Partials with respect to b's corners (x1, y1, x2, y2).
    let w = bx2 - bx1;
    let h = by2 - by1;
    let d_area = [-h, -w, h, w];

    let mut d_inter = [0.0; 4];
    if has_inter {
        if bx1 > gx1 {
            d_inter[0] = -ih;
        }
        if by1 > gy1 {
            d_inter[1] = -iw;
        }
        if bx2 < gx2 {
            d_inter[2] = ih;
        }
        if by2 < gy2 {
            d_inter[3] = iw;
        }
    }

    let mut d_enclose = [0.0; 4];
    if bx1 < gx1 {
        d_enclose[0] = -ch;
    }
    if by1 < gy1 {
        d_enclose[1] = -cw;
    }
    if bx2 > gx2 {
        d_enclose[2] = ch;
    }
    if by2 > gy2 {
        d_enclose[3] = cw;
    }

    // giou = inter/union + union/enclose − 1
    let mut d_corners = [0.0; 4];
    for k in 0..4 {
        let d_union = d_area[k] - d_inter[k];
        let d_giou = (d_inter[k] * union - inter * d_union) / (union * union)
            + (d_union * enclose - union * d_enclose[k]) / (enclose * enclose);
        d_corners[k] = -d_giou; // loss = 1 − giou
    }

    // Chain corners back to center format.
    Ok([
        d_corners[0] + d_corners[2],
        d_corners[1] + d_corners[3],
        (d_corners[2] - d_corners[0]) / 2.0,
        (d_corners[3] - d_corners[1]) / 2.0,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::rel_error;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit() -> BBox {
        BBox::new(0.5, 0.5, 1.0, 1.0).unwrap()
    }

    #[test]
    fn corners_of_unit_box() {
        assert_eq!(unit().to_corners(), (0.0, 0.0, 1.0, 1.0));
    }

    #[test]
    fn degenerate_point_corners() {
        let b = BBox::new(0.5, 0.5, 0.0, 0.0).unwrap();
        assert_eq!(b.to_corners(), (0.5, 0.5, 0.5, 0.5));
    }

    #[test]
    fn corner_center_roundtrip() {
        let b = BBox::new(0.31, 0.72, 0.13, 0.27).unwrap();
        let (x1, y1, x2, y2) = b.to_corners();
        let back = BBox::from_corners(x1, y1, x2, y2).unwrap();
        assert!((back.cx - b.cx).abs() < 1e-12);
        assert!((back.cy - b.cy).abs() < 1e-12);
        assert!((back.w - b.w).abs() < 1e-12);
        assert!((back.h - b.h).abs() < 1e-12);
    }

    #[test]
    fn negative_extent_rejected() {
        assert!(BBox::new(0.5, 0.5, -0.1, 0.2).is_err());
        assert!(BBox::new(0.5, 0.5, 0.1, f64::NAN).is_err());
    }

    #[test]
    fn l1_identical_is_zero() {
        assert_eq!(l1_cost(&unit(), &unit()), 0.0);
    }

    #[test]
    fn l1_single_coordinate_shift() {
        let a = BBox::new(0.5, 0.5, 0.2, 0.2).unwrap();
        let b = BBox::new(0.6, 0.5, 0.2, 0.2).unwrap();
        assert!((l1_cost(&a, &b) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn l1_matches_per_coordinate_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let r = |rng: &mut ChaCha8Rng| rng.gen_range(0.0..1.0);
            let a = BBox::new(r(&mut rng), r(&mut rng), r(&mut rng), r(&mut rng)).unwrap();
            let b = BBox::new(r(&mut rng), r(&mut rng), r(&mut rng), r(&mut rng)).unwrap();
            let oracle: f64 = a
                .as_array()
                .iter()
                .zip(b.as_array().iter())
                .map(|(x, y)| (x - y).abs())
                .sum();
            assert_eq!(l1_cost(&a, &b), oracle);
        }
    }

    #[test]
    fn giou_identical_boxes() {
        assert!((giou(&unit(), &unit()) - 1.0).abs() < 1e-15);
        assert!(giou_loss(&unit(), &unit()).abs() < 1e-15);
    }

    #[test]
    fn giou_disjoint_hand_case() {
        // corners (0,0,1,1) vs (2,2,3,3): IoU 0, union 2, enclosing 9
        let a = BBox::from_corners(0.0, 0.0, 1.0, 1.0).unwrap();
        let b = BBox::from_corners(2.0, 2.0, 3.0, 3.0).unwrap();
        assert!((giou(&a, &b) - (-7.0 / 9.0)).abs() < 1e-12);
    }

    #[test]
    fn giou_nested_quarter_area() {
        // inner box is a quarter of the outer area and fully contained:
        // IoU = 0.25, enclosing = union → giou = 0.25
        let outer = BBox::from_corners(0.0, 0.0, 1.0, 1.0).unwrap();
        let inner = BBox::from_corners(0.0, 0.0, 0.5, 0.5).unwrap();
        assert!((giou(&outer, &inner) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn giou_coincident_degenerate_is_zero() {
        let p = BBox::new(0.3, 0.3, 0.0, 0.0).unwrap();
        assert_eq!(giou(&p, &p), 0.0);
    }

    #[test]
    fn giou_grad_identical_boxes_zero_translation_gradient() {
        let g = giou_grad(&unit(), &unit()).unwrap();
        assert!(g[0].abs() < 1e-12);
        assert!(g[1].abs() < 1e-12);
    }

    #[test]
    fn giou_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = 1e-6;
        let mut checked = 0;
        while checked < 50 {
            let b = BBox::new(
                rng.gen_range(0.2..0.8),
                rng.gen_range(0.2..0.8),
                rng.gen_range(0.05..0.4),
                rng.gen_range(0.05..0.4),
            )
            .unwrap();
            let g = BBox::new(
                rng.gen_range(0.2..0.8),
                rng.gen_range(0.2..0.8),
                rng.gen_range(0.05..0.4),
                rng.gen_range(0.05..0.4),
            )
            .unwrap();
            // skip boundary configurations where the subgradient is one-sided
            let (bx1, by1, bx2, by2) = b.to_corners();
            let (gx1, gy1, gx2, gy2) = g.to_corners();
            let margin = 1e-4;
            if [bx1 - gx1, by1 - gy1, bx2 - gx2, by2 - gy2]
                .iter()
                .any(|d| d.abs() < margin)
            {
                continue;
            }
            let iw = bx2.min(gx2) - bx1.max(gx1);
            let ih = by2.min(gy2) - by1.max(gy1);
            if iw.abs() < margin || ih.abs() < margin {
                continue;
            }
            checked += 1;

            let analytic = giou_grad(&b, &g).unwrap();
            let fields = [0, 1, 2, 3];
            for k in fields {
                let mut plus = b.as_array();
                let mut minus = b.as_array();
                plus[k] += h;
                minus[k] -= h;
                let bp = BBox::new(plus[0], plus[1], plus[2], plus[3]).unwrap();
                let bm = BBox::new(minus[0], minus[1], minus[2], minus[3]).unwrap();
                let numeric = (giou_loss(&bp, &g) - giou_loss(&bm, &g)) / (2.0 * h);
                let err = rel_error(analytic[k], numeric);
                assert!(err <= 1e-5, "field {k}: analytic {} numeric {}", analytic[k], numeric);
            }
        }
    }

    #[test]
    fn approaching_a_disjoint_target_reduces_loss() {
        let g = BBox::new(0.8, 0.5, 0.1, 0.1).unwrap();
        let near = BBox::new(0.3, 0.5, 0.1, 0.1).unwrap();
        let far = BBox::new(0.1, 0.5, 0.1, 0.1).unwrap();
        assert!(giou_loss(&near, &g) < giou_loss(&far, &g));
    }

    proptest! {
        #[test]
        fn giou_is_symmetric_and_bounded(
            acx in 0.0f64..1.0, acy in 0.0f64..1.0, aw in 0.0f64..1.0, ah in 0.0f64..1.0,
            bcx in 0.0f64..1.0, bcy in 0.0f64..1.0, bw in 0.0f64..1.0, bh in 0.0f64..1.0,
        ) {
            let a = BBox::new(acx, acy, aw, ah).unwrap();
            let b = BBox::new(bcx, bcy, bw, bh).unwrap();
            let ab = giou(&a, &b);
            let ba = giou(&b, &a);
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&ab));
            prop_assert!(ab <= iou(&a, &b) + 1e-12);
        }
    }
}
