//! Random instance builders shared by the oracle tests and the acceptance
//! suite, so every target checks the same populations.

use kdetect::detector::LinearHeads;
use kdetect::distill::{Batch, KdConfig, RegTarget};
use kdetect::eval::{average_precision, match_detections, Prediction};
use kdetect::geometry::{BBox, BoxDelta};
use kdetect::synthdata::{LabeledBox, POLYP};
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::loss::Instance;

pub const N: usize = 6;
pub const D: usize = 5;
/// Denominator floor for the relative error, so coordinates whose true
/// derivative is ~0 are compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-6;

pub fn random_instance(rng: &mut ChaCha8Rng, normalize: bool, kd: bool) -> (Instance, LinearHeads) {
    let x: Vec<Vec<f64>> = (0..N).map(|_| (0..D).map(|_| rng.random::<f64>()).collect()).collect();
    let mut labels: Vec<Option<usize>> = (0..N).map(|_| Some(rng.random_range(0..4))).collect();
    labels[rng.random_range(0..N)] = None;
    if labels.iter().all(|l| l.is_none()) {
        labels[0] = Some(0);
    }
    let reg = labels
        .iter()
        .map(|l| match l {
            Some(y) if *y > 0 => Some((*y - 1, [0.0; 4].map(|_: f64| rng.random_range(-1.5..1.5)))),
            _ => None,
        })
        .collect();
    let teacher_fg = (0..N).map(|_| rng.random_range(0.02..0.98)).collect();
    let mut heads = LinearHeads::zeros(3, D);
    for t in heads.tensors_mut() {
        for v in t.iter_mut() {
            *v = rng.random_range(-0.8..0.8);
        }
    }
    let inst = Instance {
        x,
        labels,
        reg,
        teacher_fg,
        lambdas: [0.165, 0.33, 0.33],
        eps: 1e-7,
        normalize,
        kd,
        reg_weight: 1.0,
    };
    (inst, heads)
}

pub fn to_batch(inst: &Instance) -> Batch {
    let descriptors = Array2::from_shape_fn((N, D), |(i, j)| inst.x[i][j]);
    let teacher = Array2::from_shape_fn((N, 2), |(i, c)| if c == 1 { inst.teacher_fg[i] } else { 1.0 - inst.teacher_fg[i] });
    Batch {
        descriptors,
        labels: inst.labels.clone(),
        reg_targets: inst
            .reg
            .iter()
            .map(|r| r.map(|(class, t)| RegTarget { class, delta: BoxDelta::from_slice(&t) }))
            .collect(),
        teacher_probs: Some(teacher),
    }
}

pub fn kd_cfg(inst: &Instance) -> KdConfig {
    KdConfig { enabled: inst.kd, normalize_over_batch: inst.normalize, ..Default::default() }
}

pub fn max_rel_error(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(REL_FLOOR))
        .fold(0.0, f64::max)
}

pub fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    // Small canvas so overlaps are common.
    let x = rng.random_range(0.0..30.0);
    let y = rng.random_range(0.0..30.0);
    BBox::new(x, y, x + rng.random_range(4.0..20.0), y + rng.random_range(4.0..20.0)).unwrap()
}

pub fn random_ap_instance(rng: &mut ChaCha8Rng) -> (Vec<Vec<(BBox, f64)>>, Vec<Vec<BBox>>) {
    let images = rng.random_range(1..=3);
    let mut dets = vec![Vec::new(); images];
    let mut gts = vec![Vec::new(); images];
    for _ in 0..rng.random_range(0..=10) {
        let i = rng.random_range(0..images);
        // Quantized scores produce ties on purpose.
        dets[i].push((random_box(rng), rng.random_range(0..6) as f64 / 5.0));
    }
    for _ in 0..rng.random_range(0..=5) {
        let i = rng.random_range(0..images);
        gts[i].push(random_box(rng));
    }
    (dets, gts)
}

pub fn library_ap(dets: &[Vec<(BBox, f64)>], gts: &[Vec<BBox>], t: f64) -> f64 {
    let preds: Vec<Vec<Prediction>> =
        dets.iter().map(|d| d.iter().map(|&(bbox, score)| Prediction { bbox, class: POLYP, score }).collect()).collect();
    let labeled: Vec<Vec<LabeledBox>> =
        gts.iter().map(|g| g.iter().map(|&bbox| LabeledBox { bbox, class: POLYP }).collect()).collect();
    let m = match_detections(&preds, &labeled, POLYP, t);
    average_precision(&m.flags, m.gt_count)
}
