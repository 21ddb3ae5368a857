//! Axis-aligned box arithmetic: IoU, anchor-relative box deltas and greedy NMS.
//!
//! Boxes are stored in corner form (`x_min, y_min, x_max, y_max`) in pixel
//! units with the origin at the top-left of the image. Center/size form only
//! appears inside [`encode_box`] and [`decode_box`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An axis-aligned rectangle with strictly positive area.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    /// Builds a box, rejecting non-finite coordinates and empty extents.
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = BBox { x_min, y_min, x_max, y_max };
        if b.is_valid() {
            Ok(b)
        } else {
            Err(Error::InvalidBox { x_min, y_min, x_max, y_max })
        }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    pub fn is_valid(&self) -> bool {
        [self.x_min, self.y_min, self.x_max, self.y_max]
            .iter()
            .all(|v| v.is_finite())
            && self.x_min < self.x_max
            && self.y_min < self.y_max
    }

    #[inline]
    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    #[inline]
    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    #[inline]
    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    #[inline]
    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))
    }

    /// Area of the overlap with `other`, zero when disjoint.
    #[inline]
    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = (self.x_max.min(other.x_max) - self.x_min.max(other.x_min)).max(0.0);
        let h = (self.y_max.min(other.y_max) - self.y_min.max(other.y_min)).max(0.0);
        w * h
    }

    /// Clamps to `[0, width] x [0, height]`. Returns `None` when nothing with
    /// positive area is left.
    pub fn clip(&self, frame: Frame) -> Option<BBox> {
        let b = BBox {
            x_min: self.x_min.clamp(0.0, frame.width),
            y_min: self.y_min.clamp(0.0, frame.height),
            x_max: self.x_max.clamp(0.0, frame.width),
            y_max: self.y_max.clamp(0.0, frame.height),
        };
        b.is_valid().then_some(b)
    }

    pub fn within(&self, frame: Frame) -> bool {
        self.x_min >= 0.0
            && self.y_min >= 0.0
            && self.x_max <= frame.width
            && self.y_max <= frame.height
    }
}

/// Image extent used for clipping.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub width: f64,
    pub height: f64,
}

impl Frame {
    pub const fn new(width: f64, height: f64) -> Self {
        Frame { width, height }
    }
}

/// Anchor-relative offsets: center shift in anchor units plus log size ratios.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BoxDelta {
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
}

impl BoxDelta {
    pub fn as_array(&self) -> [f64; 4] {
        [self.tx, self.ty, self.tw, self.th]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        BoxDelta { tx: v[0], ty: v[1], tw: v[2], th: v[3] }
    }

    pub fn is_finite(&self) -> bool {
        self.as_array().iter().all(|v| v.is_finite())
    }
}

/// Intersection over union. Symmetric; exactly 1 for identical boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    if a == b {
        return 1.0;
    }
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

pub fn encode_box(anchor: &BBox, target: &BBox) -> BoxDelta {
    let (ax, ay) = anchor.center();
    let (tx, ty) = target.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    BoxDelta {
        tx: (tx - ax) / aw,
        ty: (ty - ay) / ah,
        tw: (target.width() / aw).ln(),
        th: (target.height() / ah).ln(),
    }
}

/// Inverse of [`encode_box`]. With a clip frame the result is clamped to it;
/// `None` means the decoded box was rejected (non-finite or empty).
pub fn decode_box(anchor: &BBox, delta: &BoxDelta, clip: Option<Frame>) -> Option<BBox> {
    if !delta.is_finite() {
        return None;
    }
    let (ax, ay) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let cx = ax + delta.tx * aw;
    let cy = ay + delta.ty * ah;
    let w = aw * delta.tw.exp();
    let h = ah * delta.th.exp();
    let b = BBox {
        x_min: cx - 0.5 * w,
        y_min: cy - 0.5 * h,
        x_max: cx + 0.5 * w,
        y_max: cy + 0.5 * h,
    };
    match clip {
        Some(frame) => b.clip(frame),
        None => b.is_valid().then_some(b),
    }
}

/// Greedy NMS returning indices into the input, ordered by descending score
/// with ties broken by the lower input index.
pub fn nms_indices(boxes: &[BBox], scores: &[f64], iou_threshold: f64) -> Vec<usize> {
    debug_assert_eq!(boxes.len(), scores.len());
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.iter().all(|&k| iou(&boxes[k], &boxes[i]) < iou_threshold) {
            kept.push(i);
        }
    }
    kept
}

/// Greedy NMS over `(box, score)` pairs.
pub fn nms(detections: &[(BBox, f64)], iou_threshold: f64) -> Vec<(BBox, f64)> {
    let boxes: Vec<BBox> = detections.iter().map(|d| d.0).collect();
    let scores: Vec<f64> = detections.iter().map(|d| d.1).collect();
    nms_indices(&boxes, &scores, iou_threshold)
        .into_iter()
        .map(|i| detections[i])
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn b(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    #[test]
    fn iou_worked_values() {
        let a = b(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &b(20.0, 20.0, 30.0, 30.0)), 0.0);
        assert_abs_diff_eq!(iou(&a, &b(5.0, 0.0, 15.0, 10.0)), 1.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn touching_boxes_do_not_overlap() {
        assert_eq!(iou(&b(0.0, 0.0, 10.0, 10.0), &b(10.0, 0.0, 20.0, 10.0)), 0.0);
    }

    #[test]
    fn invalid_boxes_rejected() {
        assert!(BBox::new(1.0, 0.0, 1.0, 5.0).is_err());
        assert!(BBox::new(0.0, 5.0, 1.0, 4.0).is_err());
        assert!(BBox::new(0.0, 0.0, f64::NAN, 4.0).is_err());
        assert!(BBox::new(0.0, 0.0, f64::INFINITY, 4.0).is_err());
    }

    #[test]
    fn encode_worked_example() {
        let anchor = BBox::from_center(10.0, 10.0, 10.0, 10.0).unwrap();
        let target = BBox::from_center(12.0, 10.0, 20.0, 10.0).unwrap();
        let d = encode_box(&anchor, &target);
        assert_abs_diff_eq!(d.tx, 0.2, epsilon = 1e-12);
        assert_abs_diff_eq!(d.ty, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(d.tw, std::f64::consts::LN_2, epsilon = 1e-12);
        assert_abs_diff_eq!(d.th, 0.0, epsilon = 1e-12);
        assert_eq!(encode_box(&anchor, &anchor), BoxDelta::default());
    }

    #[test]
    fn decode_worked_example() {
        let anchor = BBox::from_center(10.0, 10.0, 10.0, 10.0).unwrap();
        assert_eq!(decode_box(&anchor, &BoxDelta::default(), None), Some(anchor));
        let d = BoxDelta { tx: 0.2, ty: 0.0, tw: std::f64::consts::LN_2, th: 0.0 };
        let out = decode_box(&anchor, &d, None).unwrap();
        let (cx, cy) = out.center();
        assert_abs_diff_eq!(cx, 12.0, epsilon = 1e-12);
        assert_abs_diff_eq!(cy, 10.0, epsilon = 1e-12);
        assert_abs_diff_eq!(out.width(), 20.0, epsilon = 1e-12);
        assert_abs_diff_eq!(out.height(), 10.0, epsilon = 1e-12);
    }

    #[test]
    fn decode_clips_to_frame() {
        let anchor = b(200.0, 10.0, 240.0, 50.0);
        let out = decode_box(&anchor, &BoxDelta::default(), Some(Frame::new(225.0, 225.0))).unwrap();
        assert_eq!(out.x_max, 225.0);
        assert_eq!(out.x_min, 200.0);
    }

    #[test]
    fn decode_rejects_degenerate_after_clip() {
        let anchor = b(230.0, 10.0, 240.0, 50.0);
        assert!(decode_box(&anchor, &BoxDelta::default(), Some(Frame::new(225.0, 225.0))).is_none());
        let nan = BoxDelta { tx: f64::NAN, ..Default::default() };
        assert!(decode_box(&b(0.0, 0.0, 5.0, 5.0), &nan, None).is_none());
    }

    #[test]
    fn nms_examples() {
        let a = b(0.0, 0.0, 10.0, 10.0);
        let c = b(50.0, 50.0, 60.0, 60.0);
        assert_eq!(nms(&[(c, 0.7), (a, 0.9)], 0.5), vec![(a, 0.9), (c, 0.7)]);

        // IoU(a, shifted) = 90 / 110 ~ 0.818
        let shifted = b(0.0, 0.0, 10.0, 9.0);
        assert!(iou(&a, &shifted) > 0.8);
        assert_eq!(nms(&[(shifted, 0.7), (a, 0.9)], 0.5), vec![(a, 0.9)]);
        assert!(nms(&[], 0.5).is_empty());
    }

    #[test]
    fn nms_ties_prefer_lower_index() {
        let a = b(0.0, 0.0, 10.0, 10.0);
        let a2 = b(0.0, 0.0, 10.0, 9.5);
        let kept = nms_indices(&[a2, a], &[0.5, 0.5], 0.5);
        assert_eq!(kept, vec![0]);
    }
}
