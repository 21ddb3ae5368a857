use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::descriptor::FeatureMap;
use super::model::{softmax_rows, DetectorModel};
use crate::error::Result;
use crate::geometry::{decode_box, nms_indices, BBox, BoxDelta};

/// Post-processing thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectConfig {
    pub score_floor: f64,
    pub nms_iou: f64,
    /// Per-image cap applied after NMS; 0 disables it.
    pub max_detections: usize,
}

impl Default for DetectConfig {
    fn default() -> Self {
        DetectConfig { score_floor: 0.05, nms_iou: 0.5, max_detections: 100 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    /// Index into the model's `class_names`.
    pub class: usize,
    pub score: f64,
    pub anchor: usize,
}

/// Scores every anchor, decodes class-specific boxes, drops scores below the
/// floor and runs NMS per class. Output is ordered by score (descending),
/// then anchor index, then class.
pub fn detect_with_map(model: &DetectorModel, features: &FeatureMap, cfg: &DetectConfig) -> Result<Vec<Detection>> {
    let anchors = &model.grid.anchors;
    let descriptors = features.describe_all(anchors);
    let (logits, deltas) = model.heads.forward(&descriptors)?;
    let probs = softmax_rows(&logits);
    let frame = model.grid.config.frame();

    let mut out = Vec::new();
    for c in 0..model.num_classes() {
        let mut boxes = Vec::new();
        let mut scores = Vec::new();
        let mut owners = Vec::new();
        for (a, anchor) in anchors.iter().enumerate() {
            let score = probs[[a, c + 1]];
            if score < cfg.score_floor {
                continue;
            }
            let d = deltas.row(a);
            let delta = BoxDelta::from_slice(&d.as_slice().expect("standard layout")[4 * c..4 * c + 4]);
            if let Some(b) = decode_box(anchor, &delta, Some(frame)) {
                boxes.push(b);
                scores.push(score);
                owners.push(a);
            }
        }
        for i in nms_indices(&boxes, &scores, cfg.nms_iou) {
            out.push(Detection { bbox: boxes[i], class: c, score: scores[i], anchor: owners[i] });
        }
    }
    out.sort_by(|x, y| y.score.total_cmp(&x.score).then(x.anchor.cmp(&y.anchor)).then(x.class.cmp(&y.class)));
    if cfg.max_detections > 0 {
        out.truncate(cfg.max_detections);
    }
    Ok(out)
}

pub fn detect(model: &DetectorModel, image: &RgbImage, cfg: &DetectConfig) -> Result<Vec<Detection>> {
    detect_with_map(model, &FeatureMap::for_regions(image, &model.grid.anchors), cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::grid::GridConfig;
    use crate::detector::model::LinearHeads;
    use crate::geometry::iou;
    use image::Rgb;

    fn image() -> RgbImage {
        RgbImage::from_fn(225, 225, |x, y| Rgb([(x % 256) as u8, (y % 256) as u8, 90]))
    }

    #[test]
    fn zero_model_output_is_structurally_sound() {
        let mut m = DetectorModel::new(vec!["ndbe".into(), "neoplasia".into(), "polyp".into()], &GridConfig::default(), 0)
            .unwrap();
        m.heads = LinearHeads::zeros(3, m.heads.dim());
        let cfg = DetectConfig { max_detections: 0, ..Default::default() };
        let dets = detect(&m, &image(), &cfg).unwrap();
        assert!(!dets.is_empty());
        assert!(dets.iter().all(|d| d.score == 0.25));
        for w in dets.windows(2) {
            assert!(w[0].score >= w[1].score);
        }
        for (i, a) in dets.iter().enumerate() {
            for b in &dets[i + 1..] {
                if a.class == b.class {
                    assert!(iou(&a.bbox, &b.bbox) < cfg.nms_iou);
                }
            }
        }
        assert_eq!(dets, detect(&m, &image(), &cfg).unwrap());
    }

    #[test]
    fn floor_of_one_gives_nothing() {
        let m = DetectorModel::new(vec!["polyp".into()], &GridConfig::default(), 0).unwrap();
        let cfg = DetectConfig { score_floor: 1.0, ..Default::default() };
        assert!(detect(&m, &image(), &cfg).unwrap().is_empty());
    }

    #[test]
    fn hand_built_single_detection() {
        // 3x3 grid of 60px anchors; the foreground logit grows with the
        // anchor's normalized center, so only the bottom-right anchor clears the floor.
        let grid = GridConfig { stride: 75.0, scales: vec![60.0], ratios: vec![1.0], ..Default::default() };
        let mut m = DetectorModel::new(vec!["polyp".into()], &grid, 0).unwrap();
        m.heads = LinearHeads::zeros(1, m.heads.dim());
        let slope = 20.0;
        m.heads.cls_w[[1, 34]] = slope;
        m.heads.cls_w[[1, 35]] = slope;
        m.heads.cls_b[1] = 9f64.ln() - slope * (5.0 / 3.0);
        let dets = detect(&m, &image(), &DetectConfig::default()).unwrap();
        assert_eq!(dets.len(), 1);
        assert_eq!(dets[0].anchor, 8);
        assert!((dets[0].score - 0.9).abs() < 1e-12);
        assert_eq!(dets[0].bbox, m.grid.anchors[8]);
    }
}
