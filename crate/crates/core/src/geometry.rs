//! Axis-aligned boxes, IoU and the letterbox resize/pad transform.
//!
//! Boxes are stored in corner form `(x1, y1, x2, y2)`; center-form accessors
//! are provided for anchor decoding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned rectangle in corner form. Invariant: `x1 <= x2`, `y1 <= y2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    /// Builds a box from corners. The caller guarantees the ordering invariant.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        debug_assert!(x1 <= x2 && y1 <= y2, "unordered box corners");
        BBox { x1, y1, x2, y2 }
    }

    /// Checked constructor for untrusted input.
    pub fn try_new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let finite = [x1, y1, x2, y2].iter().all(|v| v.is_finite());
        if !finite || x1 > x2 || y1 > y2 {
            return Err(Error::invalid(format!(
                "box [{x1}, {y1}, {x2}, {y2}] violates x1 <= x2, y1 <= y2"
            )));
        }
        Ok(BBox { x1, y1, x2, y2 })
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn cx(&self) -> f64 {
        0.5 * (self.x1 + self.x2)
    }

    pub fn cy(&self) -> f64 {
        0.5 * (self.y1 + self.y2)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn is_degenerate(&self) -> bool {
        self.area() <= 0.0
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    /// Clips the box to `[0, w] x [0, h]`.
    pub fn clip(&self, w: f64, h: f64) -> BBox {
        let x1 = self.x1.clamp(0.0, w);
        let y1 = self.y1.clamp(0.0, h);
        BBox::new(x1, y1, self.x2.clamp(x1, w), self.y2.clamp(y1, h))
    }

    /// Mirrors the box about the vertical center line of an image `width` wide.
    pub fn flip_horizontal(&self, width: f64) -> BBox {
        BBox::new(width - self.x2, self.y1, width - self.x1, self.y2)
    }
}

/// Intersection over union. Two zero-area boxes have IoU 0, never NaN.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        log::warn!("iou of two degenerate boxes {a:?} / {b:?}; defined as 0");
        return 0.0;
    }
    inter / union
}

/// Aspect-preserving resize of the long edge to `target`, padding the short
/// edge so the result is `target x target`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LetterboxTransform {
    pub scale: f64,
    pub pad_x: f64,
    pub pad_y: f64,
    pub target_size: u32,
}

impl LetterboxTransform {
    pub fn identity(target_size: u32) -> Self {
        LetterboxTransform {
            scale: 1.0,
            pad_x: 0.0,
            pad_y: 0.0,
            target_size,
        }
    }

    /// Maps a box from the original image frame into the network input frame.
    pub fn apply_box(&self, b: &BBox) -> BBox {
        BBox::new(
            b.x1 * self.scale + self.pad_x,
            b.y1 * self.scale + self.pad_y,
            b.x2 * self.scale + self.pad_x,
            b.y2 * self.scale + self.pad_y,
        )
    }

    /// Inverse of [`apply_box`](Self::apply_box).
    pub fn invert_box(&self, b: &BBox) -> BBox {
        BBox::new(
            (b.x1 - self.pad_x) / self.scale,
            (b.y1 - self.pad_y) / self.scale,
            (b.x2 - self.pad_x) / self.scale,
            (b.y2 - self.pad_y) / self.scale,
        )
    }

    /// Size in pixels of the resized (unpadded) image content.
    pub fn content_size(&self, image_w: u32, image_h: u32) -> (u32, u32) {
        (
            (image_w as f64 * self.scale).round() as u32,
            (image_h as f64 * self.scale).round() as u32,
        )
    }
}

/// Computes the letterbox transform for an image of `image_w x image_h`.
///
/// The short edge is padded evenly; when the padding is odd the extra pixel
/// goes to the trailing side.
pub fn letterbox(image_w: u32, image_h: u32, target: u32) -> Result<LetterboxTransform> {
    if image_w == 0 || image_h == 0 || target == 0 {
        return Err(Error::invalid(format!(
            "letterbox needs positive sizes, got image {image_w}x{image_h}, target {target}"
        )));
    }
    let scale = target as f64 / image_w.max(image_h) as f64;
    let new_w = (image_w as f64 * scale).round();
    let new_h = (image_h as f64 * scale).round();
    let t = target as f64;
    Ok(LetterboxTransform {
        scale,
        pad_x: ((t - new_w) / 2.0).floor().max(0.0),
        pad_y: ((t - new_h) / 2.0).floor().max(0.0),
        target_size: target,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn iou_identity_disjoint_and_partial() {
        let b = BBox::new(3.0, 4.0, 10.0, 12.0);
        assert_eq!(iou(&b, &b), 1.0);
        let a = BBox::new(0.0, 0.0, 1.0, 1.0);
        let c = BBox::new(2.0, 2.0, 3.0, 3.0);
        assert_eq!(iou(&a, &c), 0.0);
        let p = BBox::new(0.0, 0.0, 2.0, 2.0);
        let q = BBox::new(1.0, 1.0, 3.0, 3.0);
        // inter 1, union 4 + 4 - 1
        assert!((iou(&p, &q) - 1.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn iou_of_degenerate_pair_is_zero() {
        let a = BBox::new(1.0, 1.0, 1.0, 1.0);
        let b = BBox::new(1.0, 1.0, 1.0, 5.0);
        let v = iou(&a, &b);
        assert_eq!(v, 0.0);
        assert!(!v.is_nan());
    }

    #[test]
    fn letterbox_examples() {
        let t = letterbox(512, 256, 256).unwrap();
        assert_eq!((t.scale, t.pad_x, t.pad_y), (0.5, 0.0, 64.0));
        let t = letterbox(256, 256, 256).unwrap();
        assert_eq!((t.scale, t.pad_x, t.pad_y), (1.0, 0.0, 0.0));
        let t = letterbox(100, 400, 256).unwrap();
        assert_eq!((t.scale, t.pad_x, t.pad_y), (0.64, 96.0, 0.0));
        assert!(letterbox(0, 10, 256).is_err());
    }

    #[test]
    fn apply_box_examples() {
        let id = LetterboxTransform::identity(256);
        let b = BBox::new(1.5, 2.0, 30.0, 40.0);
        assert_eq!(id.apply_box(&b), b);
        let t = LetterboxTransform {
            scale: 0.5,
            pad_x: 0.0,
            pad_y: 64.0,
            target_size: 256,
        };
        assert_eq!(
            t.apply_box(&BBox::new(0.0, 0.0, 100.0, 100.0)),
            BBox::new(0.0, 64.0, 50.0, 114.0)
        );
    }

    #[test]
    fn try_new_rejects_unordered() {
        assert!(BBox::try_new(2.0, 0.0, 1.0, 1.0).is_err());
        assert!(BBox::try_new(0.0, 0.0, f64::NAN, 1.0).is_err());
    }

    #[test]
    fn iou_monotone_on_nested_family() {
        let outer = BBox::new(0.0, 0.0, 10.0, 10.0);
        let mut last = 1.0;
        for k in 1..10 {
            let inner = BBox::new(0.0, 0.0, 10.0 - k as f64, 10.0);
            let v = iou(&outer, &inner);
            assert!(v < last);
            last = v;
        }
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (-50.0..50.0f64, -50.0..50.0f64, 0.1..40.0f64, 0.1..40.0f64)
            .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h))
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou(&a, &b);
            prop_assert_eq!(ab, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
        }

        #[test]
        fn iou_one_only_for_equal(a in arb_box(), b in arb_box()) {
            if a != b {
                prop_assert!(iou(&a, &b) < 1.0);
            }
        }

        #[test]
        fn letterbox_round_trip_and_aspect(
            w in 1u32..2000, h in 1u32..2000, target in 16u32..512, b in arb_box()
        ) {
            let t = letterbox(w, h, target).unwrap();
            let back = t.invert_box(&t.apply_box(&b));
            prop_assert!((back.x1 - b.x1).abs() < 1e-9);
            prop_assert!((back.y1 - b.y1).abs() < 1e-9);
            prop_assert!((back.x2 - b.x2).abs() < 1e-9);
            prop_assert!((back.y2 - b.y2).abs() < 1e-9);
            let m = t.apply_box(&b);
            let r0 = b.width() / b.height();
            let r1 = m.width() / m.height();
            prop_assert!((r0 - r1).abs() <= 1e-9 * r0.max(1.0));
            prop_assert!(t.scale > 0.0 && t.pad_x >= 0.0 && t.pad_y >= 0.0);
        }
    }
}
