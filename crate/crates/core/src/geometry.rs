//! Normalized center-format boxes and the overlap kernels built on them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest width or height a box may have.
pub const MIN_EXTENT: f64 = 1e-6;

/// Bounding box in normalized center format `(cx, cy, w, h)`.
///
/// Centers lie in `[0, 1]` and extents in `[MIN_EXTENT, 1]`. The corner form
/// may extend past the image border; only the center and extent are bounded.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(into = "[f64; 4]")]
pub struct BBox {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CornerBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl CornerBox {
    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let invalid = |reason| Error::InvalidBox {
            cx,
            cy,
            w,
            h,
            reason,
        };
        if ![cx, cy, w, h].iter().all(|v| v.is_finite()) {
            return Err(invalid("non-finite coordinate"));
        }
        if !(0.0..=1.0).contains(&cx) || !(0.0..=1.0).contains(&cy) {
            return Err(invalid("center outside [0, 1]"));
        }
        if w < MIN_EXTENT || h < MIN_EXTENT {
            return Err(invalid("degenerate extent"));
        }
        if w > 1.0 || h > 1.0 {
            return Err(invalid("extent larger than the image"));
        }
        Ok(Self { cx, cy, w, h })
    }

    pub fn from_array(v: [f64; 4]) -> Result<Self> {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn cx(&self) -> f64 {
        self.cx
    }

    pub fn cy(&self) -> f64 {
        self.cy
    }

    pub fn w(&self) -> f64 {
        self.w
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn to_corners(&self) -> CornerBox {
        CornerBox {
            x1: self.cx - self.w / 2.0,
            y1: self.cy - self.h / 2.0,
            x2: self.cx + self.w / 2.0,
            y2: self.cy + self.h / 2.0,
        }
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

impl<'de> Deserialize<'de> for BBox {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = <[f64; 4]>::deserialize(d)?;
        BBox::from_array(v).map_err(serde::de::Error::custom)
    }
}

fn intersection(a: &CornerBox, b: &CornerBox) -> (f64, f64) {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    (iw, ih)
}

fn enclosure(a: &CornerBox, b: &CornerBox) -> (f64, f64) {
    (
        a.x2.max(b.x2) - a.x1.min(b.x1),
        a.y2.max(b.y2) - a.y1.min(b.y1),
    )
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let (ca, cb) = (a.to_corners(), b.to_corners());
    let (iw, ih) = intersection(&ca, &cb);
    let inter = iw * ih;
    let union = ca.area() + cb.area() - inter;
    inter / union
}

pub fn giou(a: &BBox, b: &BBox) -> f64 {
    let (ca, cb) = (a.to_corners(), b.to_corners());
    let (iw, ih) = intersection(&ca, &cb);
    let inter = iw * ih;
    let union = ca.area() + cb.area() - inter;
    let (ew, eh) = enclosure(&ca, &cb);
    let hull = ew * eh;
    inter / union - (hull - union) / hull
}

/// Sum of absolute coordinate differences in center format.
pub fn l1(a: &BBox, b: &BBox) -> f64 {
    a.to_array()
        .iter()
        .zip(b.to_array())
        .map(|(x, y)| (x - y).abs())
        .sum()
}

/// Subgradient of [`l1`] with respect to the first box's `(cx, cy, w, h)`.
pub fn l1_grad(a: &BBox, b: &BBox) -> [f64; 4] {
    let (pa, pb) = (a.to_array(), b.to_array());
    std::array::from_fn(|i| {
        let d = pa[i] - pb[i];
        if d > 0.0 {
            1.0
        } else if d < 0.0 {
            -1.0
        } else {
            0.0
        }
    })
}

/// GIoU together with its gradient with respect to `a`'s `(cx, cy, w, h)`.
///
/// At the kinks of the min/max operators the derivative of one branch is
/// taken; callers checking gradients must stay away from those points.
pub fn giou_with_grad(a: &BBox, b: &BBox) -> (f64, [f64; 4]) {
    let (ca, cb) = (a.to_corners(), b.to_corners());
    let (aw, ah) = (ca.x2 - ca.x1, ca.y2 - ca.y1);

    // Partials below are ordered (x1, y1, x2, y2) of box a.
    let d_area_a = [-ah, -aw, ah, aw];

    let (iw, ih) = intersection(&ca, &cb);
    let inter = iw * ih;
    let d_inter = if iw > 0.0 && ih > 0.0 {
        [
            if ca.x1 >= cb.x1 { -ih } else { 0.0 },
            if ca.y1 >= cb.y1 { -iw } else { 0.0 },
            if ca.x2 <= cb.x2 { ih } else { 0.0 },
            if ca.y2 <= cb.y2 { iw } else { 0.0 },
        ]
    } else {
        [0.0; 4]
    };

    let (ew, eh) = enclosure(&ca, &cb);
    let hull = ew * eh;
    let d_hull = [
        if ca.x1 <= cb.x1 { -eh } else { 0.0 },
        if ca.y1 <= cb.y1 { -ew } else { 0.0 },
        if ca.x2 >= cb.x2 { eh } else { 0.0 },
        if ca.y2 >= cb.y2 { ew } else { 0.0 },
    ];

    let union = ca.area() + cb.area() - inter;
    let value = inter / union - (hull - union) / hull;

    let d_corner: [f64; 4] = std::array::from_fn(|i| {
        let d_union = d_area_a[i] - d_inter[i];
        d_inter[i] / union - inter / (union * union) * d_union + d_union / hull
            - union / (hull * hull) * d_hull[i]
    });

    // x1 = cx - w/2, x2 = cx + w/2 (same for y).
    let grad = [
        d_corner[0] + d_corner[2],
        d_corner[1] + d_corner[3],
        0.5 * (d_corner[2] - d_corner[0]),
        0.5 * (d_corner[3] - d_corner[1]),
    ];
    (value, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn bx(cx: f64, cy: f64, w: f64, h: f64) -> BBox {
        BBox::new(cx, cy, w, h).unwrap()
    }

    #[test]
    fn corners() {
        let c = bx(0.5, 0.5, 0.4, 0.4).to_corners();
        assert_abs_diff_eq!(c.x1, 0.3, epsilon = 1e-15);
        assert_abs_diff_eq!(c.y1, 0.3, epsilon = 1e-15);
        assert_abs_diff_eq!(c.x2, 0.7, epsilon = 1e-15);
        assert_abs_diff_eq!(c.y2, 0.7, epsilon = 1e-15);

        let c = bx(0.5, 0.5, 1.0, 1.0).to_corners();
        assert_eq!((c.x1, c.y1, c.x2, c.y2), (0.0, 0.0, 1.0, 1.0));

        let c = bx(0.2, 0.2, 0.2, 0.2).to_corners();
        assert_abs_diff_eq!(c.x1, 0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(c.x2, 0.3, epsilon = 1e-15);
    }

    #[test]
    fn rejects_degenerate() {
        assert!(BBox::new(0.5, 0.5, 0.0, 0.1).is_err());
        assert!(BBox::new(0.5, 0.5, 1e-7, 0.1).is_err());
        assert!(BBox::new(0.5, 0.5, MIN_EXTENT, 0.1).is_ok());
        assert!(BBox::new(1.2, 0.5, 0.1, 0.1).is_err());
        assert!(BBox::new(f64::NAN, 0.5, 0.1, 0.1).is_err());
        assert!(BBox::new(0.5, 0.5, 1.5, 0.1).is_err());
    }

    #[test]
    fn iou_examples() {
        let b = bx(0.31, 0.62, 0.2, 0.15);
        assert_abs_diff_eq!(iou(&b, &b), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(
            iou(&bx(0.5, 0.5, 0.4, 0.4), &bx(0.5, 0.5, 0.2, 0.2)),
            0.25,
            epsilon = 1e-12
        );
        assert_eq!(iou(&bx(0.2, 0.2, 0.2, 0.2), &bx(0.8, 0.8, 0.2, 0.2)), 0.0);
    }

    #[test]
    fn giou_examples() {
        let b = bx(0.31, 0.62, 0.2, 0.15);
        assert_abs_diff_eq!(giou(&b, &b), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(
            giou(&bx(0.2, 0.2, 0.2, 0.2), &bx(0.8, 0.8, 0.2, 0.2)),
            -0.875,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            giou(&bx(0.5, 0.5, 0.4, 0.4), &bx(0.5, 0.5, 0.2, 0.2)),
            0.25,
            epsilon = 1e-12
        );
    }

    #[test]
    fn l1_of_nested_pair() {
        let d = l1(&bx(0.5, 0.5, 0.4, 0.4), &bx(0.5, 0.5, 0.2, 0.2));
        assert_abs_diff_eq!(d, 0.4, epsilon = 1e-12);
    }

    #[test]
    fn giou_grad_matches_value() {
        let a = bx(0.42, 0.55, 0.3, 0.22);
        let b = bx(0.5, 0.5, 0.25, 0.35);
        let (v, g) = giou_with_grad(&a, &b);
        assert_abs_diff_eq!(v, giou(&a, &b), epsilon = 1e-15);
        let h = 1e-6;
        for i in 0..4 {
            let mut p = a.to_array();
            let mut m = a.to_array();
            p[i] += h;
            m[i] -= h;
            let fd = (giou(&BBox::from_array(p).unwrap(), &b)
                - giou(&BBox::from_array(m).unwrap(), &b))
                / (2.0 * h);
            assert_abs_diff_eq!(g[i], fd, epsilon = 1e-7);
        }
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    fn bbox() -> impl Strategy<Value = BBox> {
        (0.2..0.8f64, 0.2..0.8f64, 0.01..0.4f64, 0.01..0.4f64)
            .prop_map(|(cx, cy, w, h)| BBox::new(cx, cy, w, h).unwrap())
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in bbox(), b in bbox()) {
            let u = iou(&a, &b);
            prop_assert!((0.0..=1.0).contains(&u));
            prop_assert!((u - iou(&b, &a)).abs() < 1e-12);
            prop_assert!((giou(&a, &b) - giou(&b, &a)).abs() < 1e-12);
        }

        #[test]
        fn giou_below_iou(a in bbox(), b in bbox()) {
            let g = giou(&a, &b);
            prop_assert!(g <= iou(&a, &b) + 1e-12);
            prop_assert!(g >= -1.0 - 1e-12);
        }

        #[test]
        fn self_overlap_is_one(a in bbox()) {
            prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
            prop_assert!((giou(&a, &a) - 1.0).abs() < 1e-12);
            prop_assert_eq!(l1(&a, &a), 0.0);
        }

        #[test]
        fn translation_invariant(a in bbox(), b in bbox(), dx in -0.1..0.1f64, dy in -0.1..0.1f64) {
            let shift = |x: &BBox| BBox::new(x.cx() + dx, x.cy() + dy, x.w(), x.h()).unwrap();
            let (sa, sb) = (shift(&a), shift(&b));
            prop_assert!((iou(&a, &b) - iou(&sa, &sb)).abs() < 1e-9);
            prop_assert!((giou(&a, &b) - giou(&sa, &sb)).abs() < 1e-9);
        }

        #[test]
        fn scale_invariant(a in bbox(), b in bbox(), f in 0.3..1.0f64) {
            let scale = |x: &BBox| BBox::new(x.cx() * f, x.cy() * f, x.w() * f, x.h() * f).unwrap();
            let (sa, sb) = (scale(&a), scale(&b));
            prop_assert!((iou(&a, &b) - iou(&sa, &sb)).abs() < 1e-9);
            prop_assert!((giou(&a, &b) - giou(&sa, &sb)).abs() < 1e-9);
        }

        #[test]
        fn giou_gradient_value_agrees(a in bbox(), b in bbox()) {
            prop_assert!((giou_with_grad(&a, &b).0 - giou(&a, &b)).abs() < 1e-12);
        }
    }
}
