//! Brute-force average precision. For every cut k of the ranked detections
//! the matching is recomputed from scratch on the top-k alone; the envelope
//! is then integrated numerically over every distinct recall level.

use kdetect::geometry::{iou, BBox};

/// One class, many images: `dets[i]` are (box, score) in image i, `gts[i]`
/// the ground-truth boxes of image i.
pub fn brute_force_ap(dets: &[Vec<(BBox, f64)>], gts: &[Vec<BBox>], threshold: f64) -> f64 {
    let num_gt: usize = gts.iter().map(Vec::len).sum();
    if num_gt == 0 {
        return 0.0;
    }
    let mut ranked: Vec<(usize, usize, BBox, f64)> = dets
        .iter()
        .enumerate()
        .flat_map(|(i, d)| d.iter().enumerate().map(move |(j, &(b, s))| (i, j, b, s)))
        .collect();
    ranked.sort_by(|a, b| b.3.partial_cmp(&a.3).unwrap().then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));

    let mut points = Vec::new();
    for k in 1..=ranked.len() {
        let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
        let mut tp = 0usize;
        for &(img, _, bbox, _) in &ranked[..k] {
            let mut best = None;
            let mut best_iou = -1.0;
            for (g, gt) in gts[img].iter().enumerate() {
                let v = iou(&bbox, gt);
                if !used[img][g] && v > best_iou {
                    best_iou = v;
                    best = Some(g);
                }
            }
            if let Some(g) = best {
                if best_iou >= threshold {
                    used[img][g] = true;
                    tp += 1;
                }
            }
        }
        points.push((tp as f64 / num_gt as f64, tp as f64 / k as f64));
    }

    let mut levels: Vec<f64> = points.iter().map(|p| p.0).collect();
    levels.push(0.0);
    levels.sort_by(|a, b| a.partial_cmp(b).unwrap());
    levels.dedup();
    let envelope = |r: f64| points.iter().filter(|p| p.0 >= r).map(|p| p.1).fold(0.0, f64::max);
    levels.windows(2).map(|w| (w[1] - w[0]) * envelope(w[1])).sum()
}
