//! Axis-aligned boxes and the overlap measures built on them.
//!
//! A [`BBox`] stores the top-left corner plus width and height, in whatever
//! unit the caller works in (pixels or normalized coordinates). Ground-truth
//! annotations may mark absent frames with NaN fields; [`BBox::is_valid`]
//! distinguishes those.

/// Axis-aligned box: top-left `(x, y)`, extent `(w, h)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox { x, y, w, h }
    }

    /// Builds a box from its center point and extent.
    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox { x: cx - w / 2.0, y: cy - h / 2.0, w, h }
    }

    /// A box whose fields are all NaN, marking an absent annotation.
    pub fn absent() -> Self {
        BBox { x: f64::NAN, y: f64::NAN, w: f64::NAN, h: f64::NAN }
    }

    /// Center point.
    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Finite fields and strictly positive extent.
    pub fn is_valid(&self) -> bool {
        self.x.is_finite()
            && self.y.is_finite()
            && self.w.is_finite()
            && self.h.is_finite()
            && self.w > 0.0
            && self.h > 0.0
    }

    /// Intersection area with another box.
    pub fn intersection(&self, o: &BBox) -> f64 {
        let iw = (self.x + self.w).min(o.x + o.w) - self.x.max(o.x);
        let ih = (self.y + self.h).min(o.y + o.h) - self.y.max(o.y);
        if iw <= 0.0 || ih <= 0.0 {
            0.0
        } else {
            iw * ih
        }
    }

    /// Intersection over union. Degenerate pairs (zero union) score 0.
    pub fn iou(&self, o: &BBox) -> f64 {
        let inter = self.intersection(o);
        let union = self.area() + o.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Generalized IoU in `[-1, 1]`: IoU minus the fraction of the enclosing
    /// hull not covered by the union. Degenerate pairs: 0 when the hull is
    /// also empty, -1 otherwise (maximally wrong by convention).
    pub fn giou(&self, o: &BBox) -> f64 {
        let inter = self.intersection(o);
        let union = self.area() + o.area() - inter;
        let hull_w = (self.x + self.w).max(o.x + o.w) - self.x.min(o.x);
        let hull_h = (self.y + self.h).max(o.y + o.h) - self.y.min(o.y);
        let hull = hull_w * hull_h;
        if union <= 0.0 {
            if hull <= 0.0 {
                return 0.0;
            }
            return -1.0;
        }
        inter / union - (hull - union) / hull
    }

    /// Euclidean distance between centers.
    pub fn center_error(&self, o: &BBox) -> f64 {
        let (ax, ay) = self.center();
        let (bx, by) = o.center();
        ((ax - bx).powi(2) + (ay - by).powi(2)).sqrt()
    }

    /// Clamps the box into an image of extent `w x h`, preserving size where
    /// possible (the box is shifted first, then shrunk if it still overflows).
    pub fn clip_to(&self, img_w: f64, img_h: f64) -> BBox {
        let w = self.w.min(img_w).max(1.0);
        let h = self.h.min(img_h).max(1.0);
        let x = self.x.max(0.0).min(img_w - w);
        let y = self.y.max(0.0).min(img_h - h);
        BBox { x, y, w, h }
    }

    /// Uniformly scales all four fields (unit conversion).
    pub fn scaled(&self, s: f64) -> BBox {
        BBox { x: self.x * s, y: self.y * s, w: self.w * s, h: self.h * s }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn iou_of_identical_boxes_is_one() {
        let b = BBox::new(3.0, 4.0, 10.0, 5.0);
        assert_eq!(b.iou(&b), 1.0);
        assert_eq!(b.giou(&b), 1.0);
    }

    #[test]
    fn iou_of_disjoint_boxes_is_zero() {
        let a = BBox::new(0.0, 0.0, 1.0, 1.0);
        let b = BBox::new(5.0, 5.0, 1.0, 1.0);
        assert_eq!(a.iou(&b), 0.0);
        assert!(a.giou(&b) < 0.0);
    }

    #[test]
    fn worked_overlap_pair() {
        // unit squares offset by half: inter 0.5, union 1.5.
        let a = BBox::new(0.0, 0.0, 1.0, 1.0);
        let b = BBox::new(0.5, 0.0, 1.0, 1.0);
        assert!((a.iou(&b) - 1.0 / 3.0).abs() < 1e-12);
        // Hull is 1.5 x 1, fully covered by the union, so GIoU == IoU.
        assert!((a.giou(&b) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn giou_degenerate_conventions() {
        let zero = BBox::new(1.0, 1.0, 0.0, 0.0);
        assert_eq!(zero.giou(&zero), 0.0);
        let other = BBox::new(5.0, 5.0, 0.0, 0.0);
        assert_eq!(zero.giou(&other), -1.0);
        assert_eq!(zero.iou(&other), 0.0);
    }

    #[test]
    fn analytic_matches_pixel_count_oracle() {
        // analytic IoU/GIoU vs independent pixel rasterization on
        // integer boxes, where counting is exact.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..200 {
            let a = BBox::new(
                rng.gen_range(0..20) as f64,
                rng.gen_range(0..20) as f64,
                rng.gen_range(1..15) as f64,
                rng.gen_range(1..15) as f64,
            );
            let b = BBox::new(
                rng.gen_range(0..20) as f64,
                rng.gen_range(0..20) as f64,
                rng.gen_range(1..15) as f64,
                rng.gen_range(1..15) as f64,
            );
            assert!((a.iou(&b) - reference::iou_pixels(&a, &b, 1.0)).abs() < 1e-9);
            assert!((a.giou(&b) - reference::giou_pixels(&a, &b, 1.0)).abs() < 1e-9);
        }
    }

    #[test]
    fn center_error_is_euclidean() {
        let a = BBox::from_center(0.0, 0.0, 2.0, 2.0);
        let b = BBox::from_center(3.0, 4.0, 1.0, 1.0);
        assert!((a.center_error(&b) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn clip_keeps_box_inside_image() {
        let b = BBox::new(-5.0, 90.0, 20.0, 20.0).clip_to(100.0, 100.0);
        assert!(b.x >= 0.0 && b.y >= 0.0);
        assert!(b.x + b.w <= 100.0 && b.y + b.h <= 100.0);
        assert_eq!(b.w, 20.0);
    }

    #[test]
    fn absent_is_invalid() {
        assert!(!BBox::absent().is_valid());
        assert!(!BBox::new(0.0, 0.0, 0.0, 1.0).is_valid());
        assert!(BBox::new(0.0, 0.0, 1.0, 1.0).is_valid());
    }
}
