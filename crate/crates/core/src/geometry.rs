//! Boxes, points, IoU and 2-D affine transforms.
//!
//! Boxes use the MOTChallenge top-left + size convention. Center form is
//! only used inside the motion model.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("transform is singular (det = {0})")]
    SingularTransform(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point2D {
    pub x: f64,
    pub y: f64,
}

impl Point2D {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

/// Axis-aligned box: `(x, y)` is the top-left corner, `(w, h)` the size.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Box2D {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl Box2D {
    pub const fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    /// Builds a box from its center and size. Negative sizes clamp to zero.
    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        let w = w.max(0.0);
        let h = h.max(0.0);
        Self::new(cx - w / 2.0, cy - h / 2.0, w, h)
    }

    pub fn center(&self) -> Point2D {
        Point2D::new(self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn is_valid(&self) -> bool {
        self.x.is_finite()
            && self.y.is_finite()
            && self.w.is_finite()
            && self.h.is_finite()
            && self.w >= 0.0
            && self.h >= 0.0
    }

    /// Componentwise linear interpolation; `t = 0` gives `self`.
    pub fn lerp(&self, other: &Box2D, t: f64) -> Box2D {
        Box2D::new(
            self.x + (other.x - self.x) * t,
            self.y + (other.y - self.y) * t,
            self.w + (other.w - self.w) * t,
            self.h + (other.h - self.h) * t,
        )
    }
}

/// Intersection over union. Zero when the union is empty.
pub fn iou(a: &Box2D, b: &Box2D) -> f64 {
    let iw = (a.right().min(b.right()) - a.x.max(b.x)).max(0.0);
    let ih = (a.bottom().min(b.bottom()) - a.y.max(b.y)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// `p ↦ m·p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineTransform2D {
    pub m: [[f64; 2]; 2],
    pub t: [f64; 2],
}

impl Default for AffineTransform2D {
    fn default() -> Self {
        Self::identity()
    }
}

impl AffineTransform2D {
    pub const fn new(m: [[f64; 2]; 2], t: [f64; 2]) -> Self {
        Self { m, t }
    }

    pub const fn identity() -> Self {
        Self::new([[1.0, 0.0], [0.0, 1.0]], [0.0, 0.0])
    }

    pub const fn translation(tx: f64, ty: f64) -> Self {
        Self::new([[1.0, 0.0], [0.0, 1.0]], [tx, ty])
    }

    pub fn scale(s: f64) -> Self {
        Self::new([[s, 0.0], [0.0, s]], [0.0, 0.0])
    }

    /// Rotation by `angle` radians about `center`.
    pub fn rotation_about(angle: f64, center: Point2D) -> Self {
        let (s, c) = angle.sin_cos();
        let m = [[c, -s], [s, c]];
        let t = [center.x - (c * center.x - s * center.y), center.y - (s * center.x + c * center.y)];
        Self::new(m, t)
    }

    pub fn det(&self) -> f64 {
        self.m[0][0] * self.m[1][1] - self.m[0][1] * self.m[1][0]
    }

    pub fn is_finite(&self) -> bool {
        self.m.iter().flatten().chain(self.t.iter()).all(|v| v.is_finite())
    }

    /// Applies the linear part only.
    pub fn apply_linear(&self, x: f64, y: f64) -> (f64, f64) {
        (self.m[0][0] * x + self.m[0][1] * y, self.m[1][0] * x + self.m[1][1] * y)
    }

    pub fn apply_point(&self, p: Point2D) -> Point2D {
        let (x, y) = self.apply_linear(p.x, p.y);
        Point2D::new(x + self.t[0], y + self.t[1])
    }

    /// Maps the box center through the full transform and the `(w, h)` pair
    /// through the linear part. Matches the state compensation in
    /// [`crate::motion`]; sizes that come out negative clamp to zero.
    pub fn apply_box(&self, b: &Box2D) -> Box2D {
        let c = self.apply_point(b.center());
        let (w, h) = self.apply_linear(b.w, b.h);
        Box2D::from_center(c.x, c.y, w, h)
    }

    /// `self ∘ other`: the result applies `other` first.
    pub fn compose(&self, other: &AffineTransform2D) -> AffineTransform2D {
        let a = &self.m;
        let b = &other.m;
        let m = [
            [a[0][0] * b[0][0] + a[0][1] * b[1][0], a[0][0] * b[0][1] + a[0][1] * b[1][1]],
            [a[1][0] * b[0][0] + a[1][1] * b[1][0], a[1][0] * b[0][1] + a[1][1] * b[1][1]],
        ];
        let (tx, ty) = self.apply_linear(other.t[0], other.t[1]);
        AffineTransform2D::new(m, [tx + self.t[0], ty + self.t[1]])
    }

    pub fn invert(&self) -> Result<AffineTransform2D, GeometryError> {
        let det = self.det();
        if det == 0.0 || !det.is_finite() {
            return Err(GeometryError::SingularTransform(det));
        }
        let m = [[self.m[1][1] / det, -self.m[0][1] / det], [-self.m[1][0] / det, self.m[0][0] / det]];
        let inv = AffineTransform2D::new(m, [0.0, 0.0]);
        let (tx, ty) = inv.apply_linear(self.t[0], self.t[1]);
        Ok(AffineTransform2D::new(m, [-tx, -ty]))
    }

    /// Largest absolute entrywise difference, used by tests and the CMC checks.
    pub fn max_abs_diff(&self, other: &AffineTransform2D) -> f64 {
        let mut d: f64 = 0.0;
        for r in 0..2 {
            for c in 0..2 {
                d = d.max((self.m[r][c] - other.m[r][c]).abs());
            }
            d = d.max((self.t[r] - other.t[r]).abs());
        }
        d
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn iou_examples() {
        let a = Box2D::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        let b = Box2D::new(0.0, 0.0, 1.0, 1.0);
        let c = Box2D::new(5.0, 5.0, 1.0, 1.0);
        assert_eq!(iou(&b, &c), 0.0);
        // intersection 1, union 4 + 4 - 1 = 7
        let d = Box2D::new(0.0, 0.0, 2.0, 2.0);
        let e = Box2D::new(1.0, 1.0, 2.0, 2.0);
        assert!(close(iou(&d, &e), 1.0 / 7.0, 1e-12));
    }

    #[test]
    fn degenerate_boxes_have_zero_iou() {
        let z = Box2D::new(3.0, 3.0, 0.0, 0.0);
        assert_eq!(iou(&z, &z), 0.0);
        assert_eq!(iou(&z, &Box2D::new(0.0, 0.0, 10.0, 10.0)), 0.0);
    }

    #[test]
    fn affine_point_examples() {
        let p = Point2D::new(3.0, 4.0);
        assert_eq!(AffineTransform2D::identity().apply_point(p), p);
        let t = AffineTransform2D::translation(1.0, -2.0);
        assert_eq!(t.apply_point(Point2D::default()), Point2D::new(1.0, -2.0));
        let rot = AffineTransform2D::new([[0.0, -1.0], [1.0, 0.0]], [0.0, 0.0]);
        assert_eq!(rot.apply_point(Point2D::new(1.0, 0.0)), Point2D::new(0.0, 1.0));
    }

    #[test]
    fn affine_box_examples() {
        let b = Box2D::new(0.0, 0.0, 4.0, 4.0);
        assert_eq!(AffineTransform2D::identity().apply_box(&b), b);
        assert_eq!(AffineTransform2D::translation(10.0, 0.0).apply_box(&b), Box2D::new(10.0, 0.0, 4.0, 4.0));
        // center (2,2) size (4,4) -> center (4,4) size (8,8)
        let out = AffineTransform2D::scale(2.0).apply_box(&b);
        assert_eq!(out.center(), Point2D::new(4.0, 4.0));
        assert_eq!((out.w, out.h), (8.0, 8.0));
    }

    #[test]
    fn compose_and_invert_examples() {
        let t = AffineTransform2D::new([[1.2, 0.1], [-0.3, 0.9]], [4.0, -1.0]);
        assert_eq!(AffineTransform2D::identity().compose(&t), t);
        let inv = AffineTransform2D::translation(3.0, -5.0).invert().unwrap();
        assert_eq!(inv, AffineTransform2D::translation(-3.0, 5.0));
        let inv = AffineTransform2D::scale(2.0).invert().unwrap();
        assert_eq!(inv, AffineTransform2D::scale(0.5));
    }

    #[test]
    fn invert_singular_fails() {
        let s = AffineTransform2D::new([[1.0, 2.0], [2.0, 4.0]], [0.0, 0.0]);
        assert!(matches!(s.invert(), Err(GeometryError::SingularTransform(_))));
    }

    fn arb_box() -> impl Strategy<Value = Box2D> {
        (-100.0..100.0f64, -100.0..100.0f64, 0.0..50.0f64, 0.0..50.0f64).prop_map(|(x, y, w, h)| Box2D::new(x, y, w, h))
    }

    fn arb_affine() -> impl Strategy<Value = AffineTransform2D> {
        (prop::array::uniform4(-2.0..2.0f64), prop::array::uniform2(-50.0..50.0f64))
            .prop_filter("invertible", |(m, _)| (m[0] * m[3] - m[1] * m[2]).abs() > 0.1)
            .prop_map(|(m, t)| AffineTransform2D::new([[m[0], m[1]], [m[2], m[3]]], t))
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou(&a, &b);
            prop_assert_eq!(ab, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
            if a.area() > 0.0 {
                prop_assert!(close(iou(&a, &a), 1.0, 1e-12));
            }
        }

        #[test]
        fn invert_roundtrip(t in arb_affine(), x in -100.0..100.0f64, y in -100.0..100.0f64) {
            let p = Point2D::new(x, y);
            let back = t.invert().unwrap().apply_point(t.apply_point(p));
            prop_assert!(close(back.x, x, 1e-9) && close(back.y, y, 1e-9));
        }

        #[test]
        fn compose_is_associative(a in arb_affine(), b in arb_affine(), c in arb_affine()) {
            let left = a.compose(&b).compose(&c);
            let right = a.compose(&b.compose(&c));
            prop_assert!(left.max_abs_diff(&right) <= 1e-9);
        }

        #[test]
        fn compose_matches_sequential_application(a in arb_affine(), b in arb_affine(), x in -100.0..100.0f64, y in -100.0..100.0f64) {
            let p = Point2D::new(x, y);
            let direct = a.compose(&b).apply_point(p);
            let seq = a.apply_point(b.apply_point(p));
            prop_assert!(close(direct.x, seq.x, 1e-9) && close(direct.y, seq.y, 1e-9));
        }
    }
}
