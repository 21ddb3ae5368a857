//! Detection evaluation: greedy matching against ground truth, all-point
//! interpolated average precision and mAP over a fixed IoU threshold grid.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector::{detect, DetectConfig, DetectorModel};
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::synthdata::{DataSet, LabeledBox};

pub const REPORT_FORMAT: &str = "kdetect-eval";

/// IoU thresholds 0.25, 0.30, ..., 0.75, computed from integer percentages so
/// that every value is the nearest double to its decimal.
pub fn standard_thresholds() -> Vec<f64> {
    (0..11).map(|k| (25 + 5 * k) as f64 / 100.0).collect()
}

/// One scored box, with the class given as a merged dataset class index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub bbox: BBox,
    pub class: usize,
    pub score: f64,
}

/// Outcome of matching one class at one threshold over a whole dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// TP/FP flag per detection of the class, in ranked order.
    pub flags: Vec<bool>,
    /// Scores in the same order.
    pub scores: Vec<f64>,
    pub gt_count: usize,
}

/// Pools the detections of `class` across images, ranks them by descending
/// score (ties: image index, then detection index) and greedily matches each
/// to the highest-IoU unmatched ground truth of the class in its image.
pub fn match_detections(
    detections: &[Vec<Prediction>],
    ground_truth: &[Vec<LabeledBox>],
    class: usize,
    threshold: f64,
) -> MatchResult {
    let mut ranked: Vec<(usize, usize, &Prediction)> = detections
        .iter()
        .enumerate()
        .flat_map(|(img, dets)| dets.iter().enumerate().filter(|(_, d)| d.class == class).map(move |(j, d)| (img, j, d)))
        .collect();
    ranked.sort_by(|a, b| b.2.score.total_cmp(&a.2.score).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));

    let gts: Vec<Vec<&BBox>> = ground_truth
        .iter()
        .map(|g| g.iter().filter(|l| l.class == class).map(|l| &l.bbox).collect())
        .collect();
    let gt_count = gts.iter().map(Vec::len).sum();
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();

    let mut flags = Vec::with_capacity(ranked.len());
    let mut scores = Vec::with_capacity(ranked.len());
    for (img, _, det) in ranked {
        let mut best: Option<(usize, f64)> = None;
        if let Some(candidates) = gts.get(img) {
            for (g, gt) in candidates.iter().enumerate() {
                if used[img][g] {
                    continue;
                }
                let v = iou(&det.bbox, gt);
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((g, v));
                }
            }
        }
        let tp = match best {
            Some((g, v)) if v >= threshold => {
                used[img][g] = true;
                true
            }
            _ => false,
        };
        flags.push(tp);
        scores.push(det.score);
    }
    MatchResult { flags, scores, gt_count }
}

/// Cumulative (recall, precision) after each ranked detection.
pub fn pr_points(flags: &[bool], gt_count: usize) -> Vec<(f64, f64)> {
    let mut tp = 0usize;
    flags
        .iter()
        .enumerate()
        .map(|(k, &f)| {
            tp += f as usize;
            let recall = if gt_count == 0 { 0.0 } else { tp as f64 / gt_count as f64 };
            (recall, tp as f64 / (k + 1) as f64)
        })
        .collect()
}

/// All-point interpolated AP: the area under the precision envelope, where
/// precision at recall `r` is the maximum precision at any recall `>= r`.
/// Zero when there is no ground truth.
pub fn average_precision(flags: &[bool], gt_count: usize) -> f64 {
    if gt_count == 0 {
        return 0.0;
    }
    let points = pr_points(flags, gt_count);
    let mut envelope: Vec<f64> = points.iter().map(|p| p.1).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (i, &(r, _)) in points.iter().enumerate() {
        if r > prev_recall {
            ap += (r - prev_recall) * envelope[i];
            prev_recall = r;
        }
    }
    ap
}

/// PR curve kept only at true-positive points plus the final point, which is
/// enough to redraw the precision envelope.
fn compress_curve(points: &[(f64, f64)], flags: &[bool]) -> Vec<[f64; 2]> {
    let mut out: Vec<[f64; 2]> =
        points.iter().zip(flags).filter(|(_, &f)| f).map(|(&(r, p), _)| [r, p]).collect();
    if let Some(&(r, p)) = points.last() {
        if out.last() != Some(&[r, p]) {
            out.push([r, p]);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub threshold: f64,
    /// `[recall, precision]` pairs.
    pub points: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub name: String,
    pub gt_count: usize,
    pub detections: usize,
    /// AP per threshold, aligned with `EvalReport::thresholds`.
    pub ap: Vec<f64>,
    /// Whether the class enters the mAP means (it has ground truth).
    pub in_map: bool,
    pub pr_curves: Vec<PrCurve>,
}

/// Per-class AP and mAP over the threshold grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format: String,
    pub dataset: String,
    pub images: usize,
    pub thresholds: Vec<f64>,
    pub classes: Vec<ClassReport>,
    /// Mean AP over classes present in the ground truth, per threshold.
    pub map_at: Vec<f64>,
    pub map_25: f64,
    pub map_50: f64,
    pub map_75: f64,
    /// Mean of `map_at` over the whole grid.
    pub map_25_75: f64,
    pub excluded_classes: Vec<String>,
}

impl EvalReport {
    fn threshold_index(&self, t: f64) -> Option<usize> {
        self.thresholds.iter().position(|&x| (x - t).abs() < 1e-12)
    }

    pub fn map_at(&self, t: f64) -> Option<f64> {
        self.threshold_index(t).map(|i| self.map_at[i])
    }

    pub fn ap(&self, class: &str, t: f64) -> Option<f64> {
        let i = self.threshold_index(t)?;
        self.classes.iter().find(|c| c.name == class).map(|c| c.ap[i])
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Single-row table: mAP25, mAP50, mAP25:75 and AP50 per class.
    pub fn to_csv(&self) -> String {
        let mut header = vec!["mAP25".to_string(), "mAP50".to_string(), "mAP25:75".to_string()];
        let mut row = vec![fmt_metric(self.map_25), fmt_metric(self.map_50), fmt_metric(self.map_25_75)];
        for c in &self.classes {
            header.push(format!("AP50_{}", c.name));
            row.push(fmt_metric(self.ap(&c.name, 0.5).unwrap_or(0.0)));
        }
        format!("{}\n{}\n", header.join(","), row.join(","))
    }

    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join(format!("{stem}.json"));
        std::fs::write(&json, self.to_json()?).map_err(|e| Error::io(&json, e))?;
        let csv = dir.join(format!("{stem}.csv"));
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<EvalReport> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let report: EvalReport = serde_json::from_str(&text)?;
        if report.format != REPORT_FORMAT {
            return Err(Error::format("evaluation report", format!("unexpected format tag `{}`", report.format)));
        }
        Ok(report)
    }
}

pub(crate) fn fmt_metric(v: f64) -> String {
    format!("{v:.6}")
}

/// Evaluates per-image predictions against per-image ground truth. `classes`
/// lists `(name, merged class index)` for every class to report.
pub fn evaluate(
    dataset_name: &str,
    predictions: &[Vec<Prediction>],
    ground_truth: &[Vec<LabeledBox>],
    classes: &[(String, usize)],
) -> Result<EvalReport> {
    if predictions.len() != ground_truth.len() {
        return Err(Error::Dimension { expected: ground_truth.len(), got: predictions.len() });
    }
    let thresholds = standard_thresholds();
    let cells: Vec<(usize, usize)> =
        (0..classes.len()).flat_map(|c| (0..thresholds.len()).map(move |t| (c, t))).collect();
    let matched: Vec<MatchResult> = cells
        .par_iter()
        .map(|&(c, t)| match_detections(predictions, ground_truth, classes[c].1, thresholds[t]))
        .collect();

    let mut class_reports = Vec::with_capacity(classes.len());
    for (c, (name, _)) in classes.iter().enumerate() {
        let results = &matched[c * thresholds.len()..(c + 1) * thresholds.len()];
        let gt_count = results[0].gt_count;
        let ap = results.iter().map(|m| average_precision(&m.flags, m.gt_count)).collect();
        let pr_curves = thresholds
            .iter()
            .zip(results)
            .map(|(&threshold, m)| PrCurve { threshold, points: compress_curve(&pr_points(&m.flags, m.gt_count), &m.flags) })
            .collect();
        class_reports.push(ClassReport {
            name: name.clone(),
            gt_count,
            detections: results[0].flags.len(),
            ap,
            in_map: gt_count > 0,
            pr_curves,
        });
    }

    let present: Vec<&ClassReport> = class_reports.iter().filter(|c| c.in_map).collect();
    let map_at: Vec<f64> = (0..thresholds.len())
        .map(|t| {
            if present.is_empty() {
                0.0
            } else {
                present.iter().map(|c| c.ap[t]).sum::<f64>() / present.len() as f64
            }
        })
        .collect();
    let at = |t: f64| map_at[thresholds.iter().position(|&x| x == t).expect("threshold on grid")];
    Ok(EvalReport {
        format: REPORT_FORMAT.to_string(),
        dataset: dataset_name.to_string(),
        images: ground_truth.len(),
        map_25: at(0.25),
        map_50: at(0.5),
        map_75: at(0.75),
        map_25_75: map_at.iter().sum::<f64>() / map_at.len() as f64,
        map_at,
        excluded_classes: class_reports.iter().filter(|c| !c.in_map).map(|c| c.name.clone()).collect(),
        classes: class_reports,
        thresholds,
    })
}

/// Maps each model head to a merged dataset class, rejecting class names the
/// dataset does not know and ground truth the model cannot predict.
pub fn model_class_map(model: &DetectorModel, dataset: &DataSet) -> Result<Vec<(String, usize)>> {
    let mismatch = || Error::ClassMismatch {
        model: model.class_names.clone(),
        dataset: dataset.catalog.merged_classes.clone(),
    };
    let map: Vec<(String, usize)> = model
        .class_names
        .iter()
        .map(|n| dataset.catalog.merged_index(n).map(|i| (n.clone(), i)).ok_or_else(mismatch))
        .collect::<Result<_>>()?;
    let counts = dataset.class_counts();
    for (class, &count) in counts.iter().enumerate() {
        if count > 0 && !map.iter().any(|m| m.1 == class) {
            return Err(mismatch());
        }
    }
    Ok(map)
}

/// Runs the detector on every image of the dataset, with classes expressed as
/// merged dataset indices.
pub fn predict_dataset(model: &DetectorModel, dataset: &DataSet, cfg: &DetectConfig) -> Result<Vec<Vec<Prediction>>> {
    let map = model_class_map(model, dataset)?;
    dataset
        .samples
        .par_iter()
        .map(|s| {
            Ok(detect(model, &s.image, cfg)?
                .into_iter()
                .map(|d| Prediction { bbox: d.bbox, class: map[d.class].1, score: d.score })
                .collect())
        })
        .collect()
}

/// Detection followed by evaluation over the model's classes.
pub fn evaluate_model(model: &DetectorModel, dataset: &DataSet, cfg: &DetectConfig) -> Result<EvalReport> {
    let classes = model_class_map(model, dataset)?;
    let preds = predict_dataset(model, dataset, cfg)?;
    let gts: Vec<Vec<LabeledBox>> = dataset.samples.iter().map(|s| s.annotations.clone()).collect();
    evaluate(&dataset.name, &preds, &gts, &classes)
}

/// One line of a prediction file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionRecord {
    pub image: String,
    pub class: String,
    pub score: f64,
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

/// Writes predictions as line-delimited JSON keyed by image source id.
pub fn write_predictions(path: &Path, dataset: &DataSet, predictions: &[Vec<Prediction>]) -> Result<()> {
    let mut out = Vec::new();
    for (sample, preds) in dataset.samples.iter().zip(predictions) {
        for p in preds {
            let rec = PredictionRecord {
                image: sample.source_id.clone(),
                class: dataset.catalog.merged_name(p.class).unwrap_or("?").to_string(),
                score: p.score,
                x_min: p.bbox.x_min,
                y_min: p.bbox.y_min,
                x_max: p.bbox.x_max,
                y_max: p.bbox.y_max,
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.push(b'\n');
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Reads a prediction file and groups records by dataset image. Unknown
/// images, unknown classes and invalid boxes are errors naming the line.
pub fn read_predictions(path: &Path, dataset: &DataSet) -> Result<Vec<Vec<Prediction>>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let index: HashMap<&str, usize> =
        dataset.samples.iter().enumerate().map(|(i, s)| (s.source_id.as_str(), i)).collect();
    let mut grouped = vec![Vec::new(); dataset.len()];
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let context = format!("{}:{}", path.display(), n + 1);
        let rec: PredictionRecord =
            serde_json::from_str(&line).map_err(|e| Error::format("prediction record", format!("{context}: {e}")))?;
        let class = dataset
            .catalog
            .merged_index(&rec.class)
            .ok_or_else(|| Error::UnknownClass { name: rec.class.clone(), context: context.clone() })?;
        let img = *index
            .get(rec.image.as_str())
            .ok_or_else(|| Error::format("prediction record", format!("{context}: unknown image `{}`", rec.image)))?;
        let bbox = BBox::new(rec.x_min, rec.y_min, rec.x_max, rec.y_max)
            .map_err(|e| Error::format("prediction record", format!("{context}: {e}")))?;
        if !rec.score.is_finite() {
            return Err(Error::format("prediction record", format!("{context}: non-finite score")));
        }
        grouped[img].push(Prediction { bbox, class, score: rec.score });
    }
    Ok(grouped)
}

/// Classes to report when evaluating a prediction file: every merged class.
pub fn dataset_classes(dataset: &DataSet) -> Vec<(String, usize)> {
    dataset.catalog.merged_classes.iter().cloned().enumerate().map(|(i, n)| (n, i)).collect()
}

/// Mean of per-fold values, as reported in the cross-validation table.
pub fn fold_mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// Summary keyed by class name, used in comparison tables.
pub fn ap50_by_class(report: &EvalReport) -> BTreeMap<String, f64> {
    report.classes.iter().map(|c| (c.name.clone(), report.ap(&c.name, 0.5).unwrap_or(0.0))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::POLYP;

    fn b(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    fn p(bbox: BBox, score: f64) -> Prediction {
        Prediction { bbox, class: POLYP, score }
    }

    #[test]
    fn thresholds_grid() {
        let t = standard_thresholds();
        assert_eq!(t.len(), 11);
        assert_eq!(t[0], 0.25);
        assert_eq!(t[5], 0.5);
        assert_eq!(t[10], 0.75);
        assert_eq!(t[1], 0.3);
    }

    #[test]
    fn ap_worked_values() {
        assert_eq!(average_precision(&[true], 1), 1.0);
        assert_eq!(average_precision(&[true, false], 2), 0.5);
        assert_eq!(average_precision(&[false, true], 1), 0.5);
        assert_eq!(average_precision(&[], 3), 0.0);
        assert_eq!(average_precision(&[true], 0), 0.0);
    }

    #[test]
    fn matching_worked_values() {
        let gt = vec![vec![LabeledBox { bbox: b(0.0, 0.0, 10.0, 10.0), class: POLYP }]];
        let m = match_detections(&[vec![p(b(0.0, 0.0, 10.0, 10.0), 0.9)]], &gt, POLYP, 0.5);
        assert_eq!((m.flags, m.gt_count), (vec![true], 1));

        let dets = vec![vec![p(b(0.0, 0.0, 10.0, 9.0), 0.8), p(b(0.0, 0.0, 10.0, 10.0), 0.9)]];
        assert_eq!(match_detections(&dets, &gt, POLYP, 0.5).flags, vec![true, false]);

        let empty = vec![vec![]];
        let m = match_detections(&[vec![p(b(0.0, 0.0, 10.0, 10.0), 0.9)]], &empty, POLYP, 0.5);
        assert_eq!((m.flags, m.gt_count), (vec![false], 0));
    }

    #[test]
    fn map_excludes_absent_classes() {
        let gts = vec![vec![
            LabeledBox { bbox: b(0.0, 0.0, 10.0, 10.0), class: 0 },
            LabeledBox { bbox: b(50.0, 50.0, 60.0, 60.0), class: 1 },
        ]];
        let preds = vec![vec![Prediction { bbox: b(0.0, 0.0, 10.0, 10.0), class: 0, score: 0.9 }]];
        let classes: Vec<(String, usize)> =
            vec![("ndbe".into(), 0), ("neoplasia".into(), 1), ("polyp".into(), 2)];
        let r = evaluate("t", &preds, &gts, &classes).unwrap();
        assert_eq!(r.excluded_classes, vec!["polyp".to_string()]);
        assert_eq!(r.map_50, 0.5);
        assert_eq!(r.map_25_75, 0.5);
        assert!(r.to_csv().starts_with("mAP25,mAP50,mAP25:75,AP50_ndbe,AP50_neoplasia,AP50_polyp\n"));
    }

    #[test]
    fn empty_predictions_score_zero() {
        let gts = vec![vec![LabeledBox { bbox: b(0.0, 0.0, 10.0, 10.0), class: POLYP }]];
        let r = evaluate("t", &[vec![]], &gts, &[("polyp".into(), POLYP)]).unwrap();
        assert!(r.classes[0].ap.iter().all(|&a| a == 0.0));
        assert_eq!(r.map_25_75, 0.0);
    }

    #[test]
    fn curve_compression_keeps_tp_and_tail() {
        let flags = [true, false, true, false, false];
        let pts = pr_points(&flags, 4);
        let c = compress_curve(&pts, &flags);
        assert_eq!(c, vec![[0.25, 1.0], [0.5, 2.0 / 3.0], [0.5, 0.4]]);
    }
}
