//! Second-stage target assignment over the fixed anchor grid.

use crate::geometry::{iou, BBox};
use crate::synthdata::LabeledBox;

pub const POSITIVE_IOU: f64 = 0.5;
pub const NEGATIVE_IOU: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorLabel {
    Background,
    Ignore,
    /// Dataset (merged) class index of the matched ground truth.
    Object(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorTarget {
    pub label: AnchorLabel,
    /// Index of the matched ground truth for positive anchors.
    pub gt: Option<usize>,
    pub max_iou: f64,
}

/// Labels every anchor: positive at IoU >= 0.5 with its best ground truth,
/// background below 0.3, ignored in between. Each ground truth also claims
/// its highest-IoU anchor (distinct per ground truth), ties going to the
/// lower anchor index.
pub fn assign_targets(anchors: &[BBox], annotations: &[LabeledBox]) -> Vec<AnchorTarget> {
    let ious: Vec<Vec<f64>> = anchors
        .iter()
        .map(|a| annotations.iter().map(|g| iou(a, &g.bbox)).collect())
        .collect();

    let mut targets: Vec<AnchorTarget> = ious
        .iter()
        .map(|row| {
            let mut best: Option<(usize, f64)> = None;
            for (g, &v) in row.iter().enumerate() {
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((g, v));
                }
            }
            match best {
                Some((g, v)) if v >= POSITIVE_IOU => {
                    AnchorTarget { label: AnchorLabel::Object(annotations[g].class), gt: Some(g), max_iou: v }
                }
                Some((_, v)) if v >= NEGATIVE_IOU => AnchorTarget { label: AnchorLabel::Ignore, gt: None, max_iou: v },
                other => AnchorTarget {
                    label: AnchorLabel::Background,
                    gt: None,
                    max_iou: other.map_or(0.0, |(_, v)| v),
                },
            }
        })
        .collect();

    let mut claimed = vec![false; anchors.len()];
    for (g, gt) in annotations.iter().enumerate() {
        let mut pick: Option<usize> = None;
        for a in 0..anchors.len() {
            if claimed[a] {
                continue;
            }
            if pick.is_none_or(|p| ious[a][g] > ious[p][g]) {
                pick = Some(a);
            }
        }
        if let Some(a) = pick {
            claimed[a] = true;
            targets[a] = AnchorTarget { label: AnchorLabel::Object(gt.class), gt: Some(g), max_iou: ious[a][g] };
        }
    }
    targets
}
