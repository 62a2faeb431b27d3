use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Axis-aligned box given by its left/top/right/bottom sides.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SideBox<T> {
    pub l: T,
    pub t: T,
    pub r: T,
    pub b: T,
}

impl<T: Scalar> SideBox<T> {
    pub fn new(l: T, t: T, r: T, b: T) -> Result<Self> {
        let bx = Self { l, t, r, b };
        if !bx.sides().iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("box".into()));
        }
        if !(l < r && t < b) {
            return Err(Error::DegenerateBox);
        }
        Ok(bx)
    }

    pub fn from_sides(s: [T; 4]) -> Result<Self> {
        Self::new(s[0], s[1], s[2], s[3])
    }

    pub fn sides(&self) -> [T; 4] {
        [self.l, self.t, self.r, self.b]
    }

    pub fn width(&self) -> T {
        self.r - self.l
    }

    pub fn height(&self) -> T {
        self.b - self.t
    }

    pub fn area(&self) -> T {
        (self.width().max(T::zero())) * (self.height().max(T::zero()))
    }

    pub fn center(&self) -> (T, T) {
        let half = T::lit(0.5);
        ((self.l + self.r) * half, (self.t + self.b) * half)
    }

    pub fn translate(&self, dx: T, dy: T) -> Self {
        Self {
            l: self.l + dx,
            t: self.t + dy,
            r: self.r + dx,
            b: self.b + dy,
        }
    }

    pub fn intersection_area(&self, other: &Self) -> T {
        let w = self.r.min(other.r) - self.l.max(other.l);
        let h = self.b.min(other.b) - self.t.max(other.t);
        if w <= T::zero() || h <= T::zero() {
            T::zero()
        } else {
            w * h
        }
    }

    /// Clips to the unit canvas; `None` if nothing of positive area remains.
    pub fn clip_unit(&self) -> Option<Self> {
        let c = |v: T| v.max(T::zero()).min(T::one());
        Self::new(c(self.l), c(self.t), c(self.r), c(self.b)).ok()
    }

    pub fn contains_point(&self, x: T, y: T) -> bool {
        x >= self.l && x < self.r && y >= self.t && y < self.b
    }
}

/// Intersection over union; 0 for disjoint boxes.
pub fn iou<T: Scalar>(a: &SideBox<T>, b: &SideBox<T>) -> T {
    let inter = a.intersection_area(b);
    if inter <= T::zero() {
        return T::zero();
    }
    let union = a.area() + b.area() - inter;
    (inter / union).min(T::one())
}

/// Per-side residual `target − proposal`, divided by the proposal's width for
/// the left/right sides and by its height for the top/bottom sides.
pub fn encode_offsets<T: Scalar>(proposal: &SideBox<T>, target: &SideBox<T>) -> Result<[T; 4]> {
    let (w, h) = (proposal.width(), proposal.height());
    if w <= T::zero() || h <= T::zero() {
        return Err(Error::DegenerateBox);
    }
    Ok([
        (target.l - proposal.l) / w,
        (target.t - proposal.t) / h,
        (target.r - proposal.r) / w,
        (target.b - proposal.b) / h,
    ])
}

pub fn decode_offsets<T: Scalar>(proposal: &SideBox<T>, offsets: &[T; 4]) -> Result<SideBox<T>> {
    let (w, h) = (proposal.width(), proposal.height());
    if w <= T::zero() || h <= T::zero() {
        return Err(Error::DegenerateBox);
    }
    SideBox::new(
        proposal.l + offsets[0] * w,
        proposal.t + offsets[1] * h,
        proposal.r + offsets[2] * w,
        proposal.b + offsets[3] * h,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn bx(l: f64, t: f64, r: f64, b: f64) -> SideBox<f64> {
        SideBox::new(l, t, r, b).unwrap()
    }

    #[test]
    fn iou_examples() {
        let a = bx(0.1, 0.2, 0.5, 0.6);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bx(0.6, 0.6, 0.9, 0.9)), 0.0);
        assert_abs_diff_eq!(iou(&bx(0.0, 0.0, 2.0, 2.0), &bx(1.0, 1.0, 3.0, 3.0)), 1.0 / 7.0, epsilon = 1e-15);
        // touching edges
        assert_eq!(iou(&bx(0.0, 0.0, 1.0, 1.0), &bx(1.0, 0.0, 2.0, 1.0)), 0.0);
    }

    #[test]
    fn offsets_examples() {
        let p = bx(0.0, 0.0, 1.0, 1.0);
        assert_eq!(encode_offsets(&p, &p).unwrap(), [0.0; 4]);
        let shifted = bx(0.1, 0.0, 1.0, 1.0);
        let o = encode_offsets(&p, &shifted).unwrap();
        assert_abs_diff_eq!(o[0], 0.1, epsilon = 1e-15);
        assert_eq!(&o[1..], &[0.0; 3]);

        let p = bx(0.2, 0.3, 0.45, 0.9);
        let t = bx(0.18, 0.35, 0.5, 0.82);
        let d = decode_offsets(&p, &encode_offsets(&p, &t).unwrap()).unwrap();
        for (x, y) in d.sides().iter().zip(t.sides()) {
            assert_abs_diff_eq!(*x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn degenerate_boxes_rejected() {
        assert!(SideBox::new(0.5, 0.1, 0.5, 0.3).is_err());
        let flat = SideBox { l: 0.0, t: 0.0, r: 0.0, b: 1.0 };
        assert!(encode_offsets(&flat, &bx(0.0, 0.0, 1.0, 1.0)).is_err());
        assert!(decode_offsets(&flat, &[0.0; 4]).is_err());
    }
}
