//! SGD-with-momentum training of teacher and student heads, teacher
//! freezing, k-fold orchestration and resumable checkpoints.
//!
//! All randomness is drawn from named streams keyed by the run seed:
//! shuffling by epoch, augmentation and anchor sampling by (epoch, image),
//! initialization by the seed alone. Switching the distillation penalty off
//! therefore changes nothing but the loss.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::{index, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{self, AugmentPolicy};
use crate::detector::{
    assign_targets, softmax_rows, AnchorLabel, DetectConfig, DetectorModel, FeatureMap, GridConfig, LinearHeads,
    ModelFile,
};
use crate::distill::{loss_gradient, Batch, KdConfig, LossBreakdown, RegTarget};
use crate::error::{Error, Result};
use crate::eval::{evaluate_model, fold_mean};
use crate::geometry::{encode_box, BBox};
use crate::rng::{self, Domain};
use crate::synthdata::{DataSet, ImageSample, MERGED_CLASSES, POLYP};

/// Background anchors overlapping an object at least this much count as hard negatives.
pub const HARD_NEGATIVE_IOU: f64 = 0.1;

/// Optimizer, batching and loss settings for one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_images: usize,
    pub anchors_per_image: usize,
    /// Upper bound on the positive share of sampled anchors (0.25 = 1:3).
    pub positive_fraction: f64,
    /// Share of the negative budget drawn from background anchors that touch
    /// an object (IoU at least [`HARD_NEGATIVE_IOU`]); the rest, and any
    /// shortfall, come from the remaining background.
    pub hard_negative_fraction: f64,
    pub reg_weight: f64,
    pub seed: u64,
    pub kd: KdConfig,
    pub augment: AugmentPolicy,
    pub grid: GridConfig,
    /// Post-processing used for the per-epoch validation pass.
    pub detect: DetectConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs: 60,
            batch_images: 4,
            anchors_per_image: 64,
            positive_fraction: 0.25,
            hard_negative_fraction: 0.5,
            reg_weight: 1.0,
            seed: 0,
            kd: KdConfig::default(),
            augment: AugmentPolicy::none(),
            grid: GridConfig::default(),
            detect: DetectConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if self.epochs < 1 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch_images < 1 || self.anchors_per_image < 2 {
            return bad("batch_images must be >= 1 and anchors_per_image >= 2".into());
        }
        if !(self.positive_fraction > 0.0 && self.positive_fraction < 1.0) {
            return bad(format!("positive_fraction must be in (0, 1), got {}", self.positive_fraction));
        }
        if !(0.0..=1.0).contains(&self.hard_negative_fraction) {
            return bad(format!("hard_negative_fraction must be in [0, 1], got {}", self.hard_negative_fraction));
        }
        if !(self.reg_weight >= 0.0 && self.reg_weight.is_finite()) {
            return bad(format!("reg_weight must be >= 0, got {}", self.reg_weight));
        }
        if self.kd.enabled {
            self.kd.validate()?;
        }
        self.augment.validate()
    }

    fn max_positives(&self) -> usize {
        ((self.anchors_per_image as f64 * self.positive_fraction).floor() as usize).max(1)
    }
}

/// `v <- m v + g + wd w; w <- w - lr v`, applied tensor by tensor. A
/// non-finite gradient aborts the step before anything is modified.
pub fn sgd_step(
    params: &mut LinearHeads,
    grads: &LinearHeads,
    velocity: &mut LinearHeads,
    learning_rate: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if !grads.is_finite() {
        return Err(Error::Diverged { epoch: 0, iter: 0, reason: "non-finite gradient".into() });
    }
    for ((w, g), v) in params.tensors_mut().into_iter().zip(grads.tensors()).zip(velocity.tensors_mut()) {
        for ((w, g), v) in w.iter_mut().zip(g).zip(v.iter_mut()) {
            *v = momentum * *v + g + weight_decay * *w;
            *w -= learning_rate * *v;
        }
    }
    Ok(())
}

/// A trained teacher that can only be queried. There is no mutable access to
/// its parameters, so no optimizer step can reach it.
#[derive(Debug, Clone)]
pub struct FrozenTeacher {
    model: DetectorModel,
    hash: String,
}

impl FrozenTeacher {
    pub fn model(&self) -> &DetectorModel {
        &self.model
    }

    /// Parameter hash recorded at freezing time.
    pub fn frozen_hash(&self) -> &str {
        &self.hash
    }

    /// Hash of the parameters as they are now; equals [`Self::frozen_hash`].
    pub fn current_hash(&self) -> String {
        self.model.param_hash()
    }

    /// Teacher class probabilities (background, polyp) on the given descriptors.
    pub fn probabilities(&self, descriptors: &Array2<f64>) -> Result<Array2<f64>> {
        let (logits, _) = self.model.heads.forward(descriptors)?;
        Ok(softmax_rows(&logits))
    }
}

/// Wraps a single-class polyp model as a read-only teacher.
pub fn freeze(model: DetectorModel) -> Result<FrozenTeacher> {
    if model.class_names != [MERGED_CLASSES[POLYP]] {
        return Err(Error::ClassMismatch {
            model: model.class_names.clone(),
            dataset: vec![MERGED_CLASSES[POLYP].to_string()],
        });
    }
    let hash = model.param_hash();
    Ok(FrozenTeacher { model, hash })
}

/// One line of the per-iteration metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub epoch: usize,
    pub iter: usize,
    pub loss: f64,
    pub ce: f64,
    pub kd: f64,
    pub reg: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_ce: f64,
    pub mean_kd: f64,
    pub mean_reg: f64,
    pub val_map50: f64,
}

/// Result of a training run: the best-validation model and the history.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: DetectorModel,
    pub best_epoch: usize,
    pub best_val_map50: f64,
    pub history: Vec<EpochRecord>,
    /// Hash of the resolved configuration and data identity.
    pub config_hash: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    format: String,
    config_hash: String,
    /// Number of finished epochs; together with the seed this fixes every
    /// random stream of the remaining epochs.
    epochs_done: usize,
    model: ModelFile,
    velocity: [Vec<f64>; 4],
    best: Option<ModelFile>,
    best_epoch: usize,
    best_val_map50: f64,
    history: Vec<EpochRecord>,
    /// Length of the metrics stream at the time of the checkpoint.
    metrics_bytes: u64,
}

const CHECKPOINT_FORMAT: &str = "kdetect-checkpoint-v1";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const EPOCHS_FILE: &str = "epochs.jsonl";
pub const MODEL_FILE: &str = "model.json";

/// Which head each merged dataset class trains, or an error when the dataset
/// holds ground truth the model has no head for.
fn head_map(class_names: &[String], data: &DataSet) -> Result<[Option<usize>; 3]> {
    let mut map = [None; 3];
    for (c, name) in data.catalog.merged_classes.iter().enumerate().take(3) {
        map[c] = class_names.iter().position(|n| n == name).map(|i| i + 1);
    }
    let counts = data.class_counts();
    if (0..3).any(|c| counts[c] > 0 && map[c].is_none()) || class_names.iter().any(|n| data.catalog.merged_index(n).is_none())
    {
        return Err(Error::ClassMismatch {
            model: class_names.to_vec(),
            dataset: data.catalog.merged_classes.clone(),
        });
    }
    Ok(map)
}

struct Prepared {
    descriptors: Array2<f64>,
    labels: Vec<Option<usize>>,
    reg_targets: Vec<Option<RegTarget>>,
}

/// Augments one image, assigns targets and samples at most
/// `anchors_per_image` anchors with a bounded positive share.
fn prepare_image(
    sample: &ImageSample,
    model: &DetectorModel,
    heads_of: &[Option<usize>; 3],
    cfg: &TrainConfig,
    policy: &AugmentPolicy,
    draw: u64,
) -> Prepared {
    let augmented;
    let sample = if policy.is_identity() {
        sample
    } else {
        augmented = augment::apply(sample, policy, draw);
        &augmented
    };
    let anchors = &model.grid.anchors;
    let targets = assign_targets(anchors, &sample.annotations);
    let positives: Vec<usize> =
        (0..anchors.len()).filter(|&a| matches!(targets[a].label, AnchorLabel::Object(_))).collect();
    let (hard, easy): (Vec<usize>, Vec<usize>) = (0..anchors.len())
        .filter(|&a| targets[a].label == AnchorLabel::Background)
        .partition(|&a| targets[a].max_iou >= HARD_NEGATIVE_IOU);

    let mut rng = rng::stream(cfg.seed, Domain::AnchorSampling, draw);
    let n_pos = positives.len().min(cfg.max_positives());
    let budget = cfg.anchors_per_image - n_pos;
    let n_hard = hard.len().min((budget as f64 * cfg.hard_negative_fraction).round() as usize);
    let n_easy = easy.len().min(budget - n_hard);
    let n_hard = hard.len().min(budget - n_easy);
    let mut pick = |pool: &[usize], k: usize| {
        let mut chosen: Vec<usize> = index::sample(&mut rng, pool.len(), k).into_iter().map(|i| pool[i]).collect();
        chosen.sort_unstable();
        chosen
    };
    let mut selection = pick(&positives, n_pos);
    selection.extend(pick(&hard, n_hard));
    selection.extend(pick(&easy, n_easy));
    selection.sort_unstable();

    let chosen: Vec<BBox> = selection.iter().map(|&i| anchors[i]).collect();
    let features = FeatureMap::for_regions(&sample.image, &chosen);
    let descriptors = features.describe_rows(anchors, &selection);
    let mut labels = Vec::with_capacity(selection.len());
    let mut reg_targets = Vec::with_capacity(selection.len());
    for &a in &selection {
        match (targets[a].label, targets[a].gt) {
            (AnchorLabel::Object(class), Some(g)) => {
                let head = heads_of[class].expect("dataset classes checked against the model");
                labels.push(Some(head));
                reg_targets.push(Some(RegTarget {
                    class: head - 1,
                    delta: encode_box(&anchors[a], &sample.annotations[g].bbox),
                }));
            }
            _ => {
                labels.push(Some(0));
                reg_targets.push(None);
            }
        }
    }
    Prepared { descriptors, labels, reg_targets }
}

fn build_batch(parts: Vec<Prepared>, dim: usize) -> Batch {
    let rows: usize = parts.iter().map(|p| p.labels.len()).sum();
    let mut descriptors = Array2::zeros((rows, dim));
    let mut labels = Vec::with_capacity(rows);
    let mut reg_targets = Vec::with_capacity(rows);
    let mut at = 0;
    for p in parts {
        let n = p.labels.len();
        descriptors.slice_mut(ndarray::s![at..at + n, ..]).assign(&p.descriptors);
        at += n;
        labels.extend(p.labels);
        reg_targets.extend(p.reg_targets);
    }
    Batch { descriptors, labels, reg_targets, teacher_probs: None }
}

fn config_hash(role: &str, class_names: &[String], cfg: &TrainConfig, train: &DataSet, val: &DataSet, teacher: Option<&str>) -> String {
    let mut h = Sha256::new();
    h.update(role.as_bytes());
    h.update(serde_json::to_vec(class_names).expect("names serialize"));
    h.update(serde_json::to_vec(cfg).expect("config serializes"));
    for d in [train, val] {
        h.update(d.name.as_bytes());
        h.update((d.len() as u64).to_le_bytes());
        for s in &d.samples {
            h.update(s.source_id.as_bytes());
        }
    }
    if let Some(t) = teacher {
        h.update(t.as_bytes());
    }
    hex::encode(h.finalize())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn append_line<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut line = serde_json::to_vec(value)?;
    line.push(b'\n');
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&line).map_err(|e| Error::io(path, e))
}

/// Where a run keeps its checkpoint, logs and final model.
#[derive(Debug, Clone, Default)]
pub struct RunDir(pub Option<PathBuf>);

impl RunDir {
    pub fn none() -> Self {
        RunDir(None)
    }

    pub fn at(path: impl Into<PathBuf>) -> Self {
        RunDir(Some(path.into()))
    }
}

fn train_loop(
    role: &str,
    class_names: Vec<String>,
    train: &DataSet,
    val: &DataSet,
    teacher: Option<&FrozenTeacher>,
    cfg: &TrainConfig,
    run: &RunDir,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::TooFewSamples { needed: 1, got: train.len().min(val.len()) });
    }
    let heads_of = head_map(&class_names, train)?;
    head_map(&class_names, val)?;
    let use_teacher = cfg.kd.enabled;
    let teacher = if use_teacher {
        let t = teacher.ok_or_else(|| Error::Config("distillation enabled but no teacher was supplied".into()))?;
        Some(t)
    } else {
        None
    };
    let hash = config_hash(role, &class_names, cfg, train, val, teacher.map(|t| t.frozen_hash()));

    let mut model = DetectorModel::new(class_names, &cfg.grid, cfg.seed)?;
    if let Some(t) = teacher {
        if !t.model().aligned_with(&model) {
            return Err(Error::Config("teacher and student must share the anchor grid and descriptor".into()));
        }
    }
    let mut velocity = LinearHeads::zeros(model.num_classes(), model.heads.dim());
    let mut best: Option<DetectorModel> = None;
    let mut best_epoch = 0;
    let mut best_val = f64::NEG_INFINITY;
    let mut history = Vec::new();
    let mut start_epoch = 0;

    if let Some(dir) = &run.0 {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let ckpt_path = dir.join(CHECKPOINT_FILE);
        let metrics_path = dir.join(METRICS_FILE);
        if ckpt_path.exists() {
            let text = std::fs::read(&ckpt_path).map_err(|e| Error::io(&ckpt_path, e))?;
            let ckpt: Checkpoint = serde_json::from_slice(&text)?;
            if ckpt.format != CHECKPOINT_FORMAT {
                return Err(Error::format("checkpoint", format!("unknown format `{}`", ckpt.format)));
            }
            if ckpt.config_hash != hash {
                return Err(Error::Config(format!(
                    "{} was written by a different configuration; use a fresh output directory",
                    ckpt_path.display()
                )));
            }
            model = DetectorModel::from_file(ckpt.model)?;
            for (dst, src) in velocity.tensors_mut().into_iter().zip(ckpt.velocity.iter()) {
                if dst.len() != src.len() {
                    return Err(Error::format("checkpoint", "velocity shape mismatch"));
                }
                dst.copy_from_slice(src);
            }
            best = ckpt.best.map(DetectorModel::from_file).transpose()?;
            best_epoch = ckpt.best_epoch;
            best_val = ckpt.best_val_map50;
            history = ckpt.history;
            start_epoch = ckpt.epochs_done;
            // Drop metrics written after the checkpoint by an interrupted epoch.
            let f = OpenOptions::new().write(true).create(true).truncate(false).open(&metrics_path)
                .map_err(|e| Error::io(&metrics_path, e))?;
            f.set_len(ckpt.metrics_bytes).map_err(|e| Error::io(&metrics_path, e))?;
            // The epoch log may likewise hold a record past the checkpoint.
            let mut epochs_text = Vec::new();
            for record in &history {
                epochs_text.extend(serde_json::to_vec(record)?);
                epochs_text.push(b'\n');
            }
            write_atomic(&dir.join(EPOCHS_FILE), &epochs_text)?;
            log::info!("{role}: resuming from epoch {start_epoch}");
        } else {
            for name in [METRICS_FILE, EPOCHS_FILE] {
                let p = dir.join(name);
                if p.exists() {
                    std::fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
                }
            }
        }
    }

    let policy = cfg.augment.clone().with_seed(cfg.seed ^ cfg.augment.seed);
    let dim = model.heads.dim();
    for epoch in start_epoch..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng::stream(cfg.seed, Domain::Shuffle, epoch as u64));
        let mut sums = [0.0; 4];
        let mut iters = 0usize;
        for (iter, chunk) in order.chunks(cfg.batch_images).enumerate() {
            let parts: Vec<Prepared> = chunk
                .par_iter()
                .map(|&i| prepare_image(&train.samples[i], &model, &heads_of, cfg, &policy, rng::pair(epoch as u64, i as u64)))
                .collect();
            let mut batch = build_batch(parts, dim);
            if let Some(t) = teacher {
                batch.teacher_probs = Some(t.probabilities(&batch.descriptors)?);
            }
            let diverged = |reason: String| Error::Diverged { epoch, iter, reason };
            let (loss, grads): (LossBreakdown, LinearHeads) =
                loss_gradient(&model.heads, &batch, &cfg.kd, cfg.reg_weight).map_err(|e| diverged(e.to_string()))?;
            if !loss.is_finite() {
                return Err(diverged(format!("non-finite loss {loss:?}")));
            }
            sgd_step(&mut model.heads, &grads, &mut velocity, cfg.learning_rate, cfg.momentum, cfg.weight_decay)
                .map_err(|_| diverged("non-finite gradient".into()))?;
            if !model.heads.is_finite() {
                return Err(diverged("non-finite parameters after update".into()));
            }
            sums[0] += loss.total;
            sums[1] += loss.ce;
            sums[2] += loss.kd;
            sums[3] += loss.reg;
            iters += 1;
            if let Some(dir) = &run.0 {
                let rec = IterRecord {
                    epoch,
                    iter,
                    loss: loss.total,
                    ce: loss.ce,
                    kd: loss.kd,
                    reg: loss.reg,
                    lr: cfg.learning_rate,
                };
                append_line(&dir.join(METRICS_FILE), &rec)?;
            }
        }

        let val_map50 = evaluate_model(&model, val, &cfg.detect)?.map_50;
        let n = iters.max(1) as f64;
        let record = EpochRecord {
            epoch,
            mean_loss: sums[0] / n,
            mean_ce: sums[1] / n,
            mean_kd: sums[2] / n,
            mean_reg: sums[3] / n,
            val_map50,
        };
        log::info!(
            "{role} epoch {epoch}: loss {:.4} (ce {:.4}, kd {:.4}, reg {:.4}) val mAP50 {:.4}",
            record.mean_loss,
            record.mean_ce,
            record.mean_kd,
            record.mean_reg,
            val_map50
        );
        history.push(record.clone());
        if val_map50 > best_val {
            best_val = val_map50;
            best_epoch = epoch;
            best = Some(model.clone());
        }

        if let Some(dir) = &run.0 {
            append_line(&dir.join(EPOCHS_FILE), &record)?;
            let metrics_path = dir.join(METRICS_FILE);
            let metrics_bytes = std::fs::metadata(&metrics_path).map(|m| m.len()).unwrap_or(0);
            let [a, b, c, d] = velocity.tensors();
            let ckpt = Checkpoint {
                format: CHECKPOINT_FORMAT.to_string(),
                config_hash: hash.clone(),
                epochs_done: epoch + 1,
                model: model.to_file(),
                velocity: [a.to_vec(), b.to_vec(), c.to_vec(), d.to_vec()],
                best: best.as_ref().map(DetectorModel::to_file),
                best_epoch,
                best_val_map50: best_val,
                history: history.clone(),
                metrics_bytes,
            };
            let mut bytes = serde_json::to_vec(&ckpt)?;
            bytes.push(b'\n');
            write_atomic(&dir.join(CHECKPOINT_FILE), &bytes)?;
        }
    }

    let best = best.unwrap_or(model);
    if let Some(dir) = &run.0 {
        best.save(&dir.join(MODEL_FILE))?;
    }
    Ok(TrainOutcome { model: best, best_epoch, best_val_map50: best_val, history, config_hash: hash })
}

/// Trains the single-class teacher. The penalty is never applied here.
pub fn train_teacher(train: &DataSet, val: &DataSet, cfg: &TrainConfig, run: &RunDir) -> Result<TrainOutcome> {
    let cfg = TrainConfig { kd: KdConfig { enabled: false, ..cfg.kd.clone() }, ..cfg.clone() };
    train_loop("teacher", vec![MERGED_CLASSES[POLYP].to_string()], train, val, None, &cfg, run)
}

/// Trains the three-class student. With `cfg.kd.enabled` the teacher is
/// evaluated on every batch; otherwise it is never touched and may be absent.
pub fn train_student(
    train: &DataSet,
    val: &DataSet,
    teacher: Option<&FrozenTeacher>,
    cfg: &TrainConfig,
    run: &RunDir,
) -> Result<TrainOutcome> {
    let names = MERGED_CLASSES.iter().map(|s| s.to_string()).collect();
    train_loop("student", names, train, val, teacher, cfg, run)
}

/// Trains a detector for `class_names` without distillation.
pub fn train_detector(
    class_names: Vec<String>,
    train: &DataSet,
    val: &DataSet,
    cfg: &TrainConfig,
    run: &RunDir,
) -> Result<TrainOutcome> {
    let cfg = TrainConfig { kd: KdConfig { enabled: false, ..cfg.kd.clone() }, ..cfg.clone() };
    train_loop("detector", class_names, train, val, None, &cfg, run)
}

/// Per-fold validation mAP50 and their arithmetic mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KfoldResult {
    pub per_fold: Vec<f64>,
    pub mean: f64,
    pub best_epochs: Vec<usize>,
}

impl KfoldResult {
    pub fn from_folds(per_fold: Vec<f64>, best_epochs: Vec<usize>) -> Self {
        let mean = fold_mean(&per_fold);
        KfoldResult { per_fold, mean, best_epochs }
    }
}

/// Trains one model per fold of `data` (classes present in the data) and
/// reports each fold's best validation mAP50. Folds run in parallel.
pub fn run_kfold(data: &DataSet, k: usize, cfg: &TrainConfig, seed: u64, run: &RunDir) -> Result<KfoldResult> {
    let counts = data.class_counts();
    let names: Vec<String> =
        (0..3).filter(|&c| counts[c] > 0).map(|c| data.catalog.merged_classes[c].clone()).collect();
    let folds = crate::synthdata::kfold_partitions(data, k, seed)?;
    let outcomes: Vec<TrainOutcome> = folds
        .par_iter()
        .enumerate()
        .map(|(f, (tr, va))| {
            let dir = RunDir(run.0.as_ref().map(|d| d.join(format!("fold{}", f + 1))));
            train_detector(names.clone(), tr, va, cfg, &dir)
        })
        .collect::<Result<_>>()?;
    Ok(KfoldResult::from_folds(
        outcomes.iter().map(|o| o.best_val_map50).collect(),
        outcomes.iter().map(|o| o.best_epoch).collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn scalar_heads(w: f64) -> LinearHeads {
        let mut h = LinearHeads::zeros(1, 1);
        for t in h.tensors_mut() {
            t.fill(w);
        }
        h
    }

    #[test]
    fn sgd_zero_gradient_no_decay_is_identity() {
        let mut w = LinearHeads::init(3, 4, 1);
        let before = w.clone();
        let mut v = LinearHeads::zeros(3, 4);
        sgd_step(&mut w, &LinearHeads::zeros(3, 4), &mut v, 1e-3, 0.9, 0.0).unwrap();
        assert_eq!(w, before);
    }

    #[test]
    fn sgd_worked_steps() {
        let mut w = scalar_heads(1.0);
        let g = scalar_heads(1.0);
        let mut v = scalar_heads(0.0);
        sgd_step(&mut w, &g, &mut v, 1e-3, 0.9, 5e-4).unwrap();
        assert_abs_diff_eq!(v.cls_w[[0, 0]], 1.0005, epsilon = 1e-15);
        assert_abs_diff_eq!(w.cls_w[[0, 0]], 0.9989995, epsilon = 1e-15);
        // Hand trace of the second step.
        let v2 = 0.9 * 1.0005 + 1.0 + 5e-4 * 0.9989995;
        let w2 = 0.9989995 - 1e-3 * v2;
        sgd_step(&mut w, &g, &mut v, 1e-3, 0.9, 5e-4).unwrap();
        assert_abs_diff_eq!(v.reg_b[0], v2, epsilon = 1e-15);
        assert_abs_diff_eq!(w.reg_b[0], w2, epsilon = 1e-15);
    }

    #[test]
    fn sgd_rejects_non_finite_gradient() {
        let mut w = scalar_heads(1.0);
        let mut g = scalar_heads(1.0);
        g.cls_b[0] = f64::NAN;
        let mut v = scalar_heads(0.0);
        assert!(matches!(sgd_step(&mut w, &g, &mut v, 1e-3, 0.9, 5e-4), Err(Error::Diverged { .. })));
        assert_eq!(w, scalar_heads(1.0));
    }

    #[test]
    fn config_invariants() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { epochs: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { momentum: 1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { learning_rate: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { weight_decay: -1.0, ..Default::default() }.validate().is_err());
        let toml_text = "epochs = 3\n[kd]\nlambda_polyp = 0.5\n";
        let cfg: TrainConfig = toml::from_str(toml_text).unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.kd.lambda_polyp, 0.5);
        assert_eq!(cfg.kd.lambda_ndbe, 0.165);
        assert!(toml::from_str::<TrainConfig>("epochz = 3\n").is_err());
    }

    #[test]
    fn freeze_requires_single_polyp_head() {
        let student = DetectorModel::new(MERGED_CLASSES.iter().map(|s| s.to_string()).collect(), &GridConfig::default(), 0)
            .unwrap();
        assert!(freeze(student).is_err());
        let teacher = DetectorModel::new(vec!["polyp".into()], &GridConfig::default(), 0).unwrap();
        let t = freeze(teacher.clone()).unwrap();
        assert_eq!(t.frozen_hash(), t.current_hash());
        let x = Array2::from_elem((3, teacher.heads.dim()), 0.5);
        let (logits, _) = teacher.heads.forward(&x).unwrap();
        assert_eq!(t.probabilities(&x).unwrap(), softmax_rows(&logits));
    }

    #[test]
    fn kfold_mean_fixture() {
        let r = KfoldResult::from_folds(vec![82.4, 85.5, 85.1], vec![0, 0, 0]);
        assert_abs_diff_eq!(r.mean, 84.333333333333, epsilon = 1e-9);
        assert_eq!(format!("{:.1}", r.mean), "84.3");
    }
}
