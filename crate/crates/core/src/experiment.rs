//! Experiment drivers behind the command-line tool: configuration files,
//! dataset materialization, the teacher → student comparison and the k-fold
//! augmentation table.
//!
//! Every driver writes the fully resolved configuration into its output
//! directory and derives all randomness from the seeds in that
//! configuration, so rerunning a command reproduces its files byte for byte.
//! Training stages resume from their checkpoints.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentPolicy;
use crate::detector::{DetectConfig, DetectorModel, ModelFile};
use crate::error::{Error, Result};
use crate::eval::{evaluate, evaluate_model, fmt_metric, fold_mean, model_class_map, predict_dataset, write_predictions, EvalReport};
use crate::plot;
use crate::synthdata::{
    edd_proxy_plan, generate_split, load_dataset, load_split, polyp_proxy_plan, save_dataset, unseen_plan, CorpusKind,
    DataSet, RenderParams, Split,
};
use crate::train::{freeze, run_kfold, train_student, train_teacher, FrozenTeacher, RunDir, TrainConfig, MODEL_FILE};

/// Name of the resolved configuration echoed into output directories.
pub const CONFIG_FILE: &str = "config.toml";
/// Marker left in an experiment directory when a stage fails.
pub const FAILURE_FILE: &str = "FAILED.json";

/// Seeds and rendering of the three synthetic corpora.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub polyp_seed: u64,
    pub edd_seed: u64,
    pub unseen_seed: u64,
    /// Rendering of the three-class corpus, including the share of
    /// ellipse-like neoplasia.
    pub edd_render: RenderParams,
    /// Shifted rendering of the unseen test set.
    pub unseen_render: RenderParams,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            polyp_seed: 1,
            edd_seed: 2,
            unseen_seed: 3,
            edd_render: RenderParams::default(),
            unseen_render: RenderParams::shifted(),
        }
    }
}

/// Augmentation settings compared in the cross-validation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AugmentVariant {
    None,
    Geometric,
    Photometric,
    Combined,
}

impl AugmentVariant {
    pub const ALL: [AugmentVariant; 4] =
        [AugmentVariant::None, AugmentVariant::Geometric, AugmentVariant::Photometric, AugmentVariant::Combined];

    pub fn name(self) -> &'static str {
        match self {
            AugmentVariant::None => "none",
            AugmentVariant::Geometric => "geometric",
            AugmentVariant::Photometric => "photometric",
            AugmentVariant::Combined => "combined",
        }
    }

    /// The variant's ops applied on top of `base` (probability, ranges, seed).
    pub fn policy(self, base: &AugmentPolicy) -> AugmentPolicy {
        let ops = match self {
            AugmentVariant::None => AugmentPolicy::none(),
            AugmentVariant::Geometric => AugmentPolicy::geometric(),
            AugmentVariant::Photometric => AugmentPolicy::photometric(),
            AugmentVariant::Combined => AugmentPolicy::combined(),
        };
        AugmentPolicy { geometric: ops.geometric, photometric: ops.photometric, ..base.clone() }
    }
}

/// Cross-validation settings; the training settings come from the teacher
/// section with the augmentation and epoch count replaced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KfoldConfig {
    pub k: usize,
    pub seed: u64,
    pub epochs: usize,
    pub variants: Vec<AugmentVariant>,
}

impl Default for KfoldConfig {
    fn default() -> Self {
        KfoldConfig { k: 3, seed: 0, epochs: 20, variants: AugmentVariant::ALL.to_vec() }
    }
}

/// Everything a command needs, stored as one TOML file. Missing keys take
/// the defaults below; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Student seeds of the comparison; one kd-off and one kd-on run each.
    pub seeds: Vec<u64>,
    pub data: DataConfig,
    /// Single-class teacher on the polyp corpus.
    pub teacher: TrainConfig,
    /// Three-class student on the three-class corpus; `kd.enabled` is set
    /// per run by the comparison and honored as given by `train`.
    pub student: TrainConfig,
    pub kfold: KfoldConfig,
    /// Post-processing for test-set evaluation.
    pub eval: DetectConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seeds: vec![0, 1, 2, 3, 4],
            data: DataConfig::default(),
            teacher: TrainConfig { augment: AugmentPolicy::combined(), ..TrainConfig::default() },
            student: TrainConfig::default(),
            kfold: KfoldConfig::default(),
            eval: DetectConfig::default(),
        }
    }
}

/// Overlays `patch` onto `base`, descending into tables present in both.
fn merge(base: &mut toml::Table, patch: toml::Table) {
    for (key, value) in patch {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(p)) => merge(b, p),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

impl ExperimentConfig {
    /// Parses a configuration file's text. Keys are resolved against the
    /// defaults of their own section, so `[teacher] epochs = 5` keeps the
    /// teacher's combined augmentation.
    pub fn parse(text: &str) -> Result<Self> {
        let patch: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let mut table = toml::Table::try_from(ExperimentConfig::default())
            .map_err(|e| Error::Config(format!("default configuration does not serialize: {e}")))?;
        merge(&mut table, patch);
        let cfg: ExperimentConfig = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must list at least one student seed".into()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(Error::Config("seeds must be distinct".into()));
        }
        self.teacher.validate()?;
        let student_kd = TrainConfig { kd: crate::distill::KdConfig { enabled: true, ..self.student.kd.clone() }, ..self.student.clone() };
        student_kd.validate()?;
        if self.kfold.k < 2 {
            return Err(Error::Config(format!("kfold.k must be >= 2, got {}", self.kfold.k)));
        }
        if self.kfold.epochs < 1 {
            return Err(Error::Config("kfold.epochs must be >= 1".into()));
        }
        if self.kfold.variants.is_empty() {
            return Err(Error::Config("kfold.variants must not be empty".into()));
        }
        for (name, p) in [("edd_render", &self.data.edd_render), ("unseen_render", &self.data.unseen_render)] {
            if !(0.0..=1.0).contains(&p.neoplasia_ellipse_fraction) {
                return Err(Error::Config(format!("data.{name}.neoplasia_ellipse_fraction must be in [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("configuration does not serialize: {e}")))
    }

    /// The teacher settings used for one cross-validation row.
    pub fn kfold_train_config(&self, variant: AugmentVariant) -> TrainConfig {
        TrainConfig { epochs: self.kfold.epochs, augment: variant.policy(&self.teacher.augment), ..self.teacher.clone() }
    }

    /// The student settings of one comparison cell.
    pub fn student_config(&self, seed: u64, kd_enabled: bool) -> TrainConfig {
        let mut cfg = TrainConfig { seed, ..self.student.clone() };
        cfg.kd.enabled = kd_enabled;
        cfg
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_file(path, serde_json::to_string_pretty(value)? + "\n")
}

/// Writes `value` as TOML to `dir/config.toml`.
pub fn echo_config<T: Serialize>(dir: &Path, value: &T) -> Result<()> {
    let text = toml::to_string_pretty(value).map_err(|e| Error::Config(format!("configuration does not serialize: {e}")))?;
    write_file(&dir.join(CONFIG_FILE), text)
}

// ─── datasets ──────────────────────────────────────────────────────────────

/// Every split of one corpus, rendered in memory.
pub fn generate_corpus(kind: CorpusKind, seed: u64, params: &RenderParams) -> Vec<DataSet> {
    let plans = match kind {
        CorpusKind::PolypProxy => polyp_proxy_plan(),
        CorpusKind::EddProxy => edd_proxy_plan(),
        CorpusKind::Unseen => vec![unseen_plan()],
    };
    plans.iter().map(|p| generate_split(kind, p, seed, params)).collect()
}

/// Renders a corpus into `out/<split>/`.
pub fn write_corpus(kind: CorpusKind, seed: u64, params: &RenderParams, out: &Path) -> Result<Vec<DataSet>> {
    let sets = generate_corpus(kind, seed, params);
    for ds in &sets {
        save_dataset(ds, &out.join(ds.split.name()))?;
    }
    Ok(sets)
}

/// Loads a split directory, or the split named `want` of a corpus directory.
pub fn load_split_or_corpus(path: &Path, want: Split) -> Result<DataSet> {
    if path.join("manifest.json").is_file() {
        return load_split(path);
    }
    let mut splits = load_dataset(path)?;
    splits
        .remove(&want)
        .ok_or_else(|| Error::format(path.display().to_string(), format!("no `{want}` split")))
}

/// Train and validation splits of a corpus directory.
pub fn load_train_val(path: &Path) -> Result<(DataSet, DataSet)> {
    let mut splits = load_dataset(path)?;
    let missing = |s: Split| Error::format(path.display().to_string(), format!("no `{s}` split"));
    let train = splits.remove(&Split::Train).ok_or_else(|| missing(Split::Train))?;
    let val = splits.remove(&Split::Val).ok_or_else(|| missing(Split::Val))?;
    Ok((train, val))
}

/// The corpora of one experiment.
#[derive(Debug, Clone)]
pub struct Corpora {
    pub polyp: [DataSet; 3],
    pub edd: [DataSet; 3],
    pub unseen: DataSet,
}

fn three(sets: Vec<DataSet>) -> [DataSet; 3] {
    sets.try_into().expect("three-split corpus")
}

const DATA_COMPLETE: &str = "complete.json";

/// Generates the corpora under `root`, or reloads them when a previous run
/// finished writing them.
pub fn materialize_corpora(root: &Path, cfg: &DataConfig) -> Result<Corpora> {
    let load_or_make = |kind: CorpusKind, seed: u64, params: &RenderParams| -> Result<Vec<DataSet>> {
        let dir = root.join(kind.name());
        let marker = dir.join(DATA_COMPLETE);
        let expected = serde_json::json!({ "corpus": kind, "seed": seed, "render": params });
        if marker.is_file() {
            let recorded: serde_json::Value = serde_json::from_slice(&std::fs::read(&marker).map_err(|e| Error::io(&marker, e))?)?;
            if recorded == expected {
                let splits = load_dataset(&dir)?;
                return Ok(splits.into_values().collect());
            }
            return Err(Error::Config(format!(
                "{} holds a corpus generated with different settings; use a fresh output directory",
                dir.display()
            )));
        }
        let sets = write_corpus(kind, seed, params, &dir)?;
        write_json(&marker, &expected)?;
        Ok(sets)
    };
    let polyp = load_or_make(CorpusKind::PolypProxy, cfg.polyp_seed, &RenderParams::default())?;
    let edd = load_or_make(CorpusKind::EddProxy, cfg.edd_seed, &cfg.edd_render)?;
    let mut unseen = load_or_make(CorpusKind::Unseen, cfg.unseen_seed, &cfg.unseen_render)?;
    Ok(Corpora { polyp: three(polyp), edd: three(edd), unseen: unseen.remove(0) })
}

// ─── evaluation outputs ────────────────────────────────────────────────────

/// Writes `<stem>.json`, `<stem>.csv` and the SVG plots of a report into `dir`.
pub fn write_report_with_plots(report: &EvalReport, dir: &Path, stem: &str) -> Result<()> {
    report.write(dir, stem)?;
    let plots = dir.join(format!("{stem}-plots"));
    create_dir(&plots)?;
    for class in &report.classes {
        write_file(&plots.join(format!("pr-{}.svg", class.name)), plot::pr_curve_svg(class, report))?;
    }
    write_file(&plots.join("ap-by-class.svg"), plot::class_ap_svg(report))
}

/// Loads a model from `model.json`, or the best model of a `checkpoint.json`.
pub fn load_model(path: &Path) -> Result<DetectorModel> {
    #[derive(Deserialize)]
    struct CheckpointModels {
        model: ModelFile,
        best: Option<ModelFile>,
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value = serde_json::from_slice(&bytes)?;
    if value.get("velocity").is_some() {
        let ckpt: CheckpointModels = serde_json::from_value(value)?;
        return DetectorModel::from_file(ckpt.best.unwrap_or(ckpt.model));
    }
    DetectorModel::load(path)
}

/// Detection on `data` with `model`, writing predictions, report and plots.
pub fn eval_checkpoint(model: &DetectorModel, data: &DataSet, detect: &DetectConfig, out: &Path) -> Result<EvalReport> {
    create_dir(out)?;
    echo_config(out, &EvalEcho { source: "checkpoint", dataset: data.name.clone(), detect: detect.clone() })?;
    let preds = predict_dataset(model, data, detect)?;
    write_predictions(&out.join("predictions.jsonl"), data, &preds)?;
    let classes = model_class_map(model, data)?;
    let gts: Vec<_> = data.samples.iter().map(|s| s.annotations.clone()).collect();
    let report = evaluate(&data.name, &preds, &gts, &classes)?;
    write_report_with_plots(&report, out, "report")?;
    Ok(report)
}

/// Evaluation of a prediction file against `data`.
pub fn eval_predictions(pred_path: &Path, data: &DataSet, out: &Path) -> Result<EvalReport> {
    create_dir(out)?;
    echo_config(out, &EvalEcho { source: "predictions", dataset: data.name.clone(), detect: DetectConfig::default() })?;
    let preds = crate::eval::read_predictions(pred_path, data)?;
    let classes = crate::eval::dataset_classes(data);
    let gts: Vec<_> = data.samples.iter().map(|s| s.annotations.clone()).collect();
    let report = evaluate(&data.name, &preds, &gts, &classes)?;
    write_report_with_plots(&report, out, "report")?;
    Ok(report)
}

#[derive(Serialize)]
struct EvalEcho {
    source: &'static str,
    dataset: String,
    /// Post-processing applied to checkpoint predictions (unused for files).
    detect: DetectConfig,
}

// ─── teacher → student comparison ──────────────────────────────────────────

/// Hashes of the teacher parameters recorded around one student run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherHashRecord {
    pub frozen: String,
    pub before: String,
    pub after: String,
    pub unchanged: bool,
}

/// Headline numbers of one evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub map_25: f64,
    pub map_50: f64,
    pub map_25_75: f64,
    /// AP at IoU 0.5 keyed by class name.
    pub ap50: BTreeMap<String, f64>,
}

impl Summary {
    pub fn of(report: &EvalReport) -> Self {
        Summary {
            map_25: report.map_25,
            map_50: report.map_50,
            map_25_75: report.map_25_75,
            ap50: crate::eval::ap50_by_class(report),
        }
    }

    fn mean(items: &[&Summary]) -> Summary {
        let avg = |f: &dyn Fn(&Summary) -> f64| fold_mean(&items.iter().map(|s| f(s)).collect::<Vec<_>>());
        let classes: Vec<String> = items.first().map(|s| s.ap50.keys().cloned().collect()).unwrap_or_default();
        Summary {
            map_25: avg(&|s| s.map_25),
            map_50: avg(&|s| s.map_50),
            map_25_75: avg(&|s| s.map_25_75),
            ap50: classes.iter().map(|c| (c.clone(), avg(&|s| s.ap50.get(c).copied().unwrap_or(0.0)))).collect(),
        }
    }

    fn minus(&self, other: &Summary) -> Summary {
        Summary {
            map_25: self.map_25 - other.map_25,
            map_50: self.map_50 - other.map_50,
            map_25_75: self.map_25_75 - other.map_25_75,
            ap50: self.ap50.iter().map(|(c, v)| (c.clone(), v - other.ap50.get(c).copied().unwrap_or(0.0))).collect(),
        }
    }
}

/// Test sets of the comparison, in report order.
pub const TEST_SETS: [&str; 2] = ["heldout", "unseen"];
/// Student configurations of the comparison, in report order.
pub const CONFIGURATIONS: [&str; 2] = ["kd-off", "kd-on"];

/// One (configuration, seed, test set) evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub configuration: String,
    pub seed: u64,
    pub test_set: String,
    /// Report file this row was read from, relative to the experiment root.
    pub report: String,
    pub best_epoch: usize,
    pub summary: Summary,
}

/// Mean over seeds of one (configuration, test set).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanResult {
    pub configuration: String,
    pub test_set: String,
    pub summary: Summary,
}

/// kd-on minus kd-off, per seed and for the means, on one test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaResult {
    pub test_set: String,
    pub per_seed: BTreeMap<u64, Summary>,
    pub mean: Summary,
}

/// The comparison table of the experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub seeds: Vec<u64>,
    pub teacher_best_epoch: usize,
    pub teacher_val_map50: f64,
    pub teacher_hash: String,
    pub cells: Vec<CellResult>,
    pub means: Vec<MeanResult>,
    pub deltas: Vec<DeltaResult>,
}

impl ComparisonReport {
    pub fn mean(&self, configuration: &str, test_set: &str) -> Option<&Summary> {
        self.means.iter().find(|m| m.configuration == configuration && m.test_set == test_set).map(|m| &m.summary)
    }

    pub fn delta(&self, test_set: &str) -> Option<&DeltaResult> {
        self.deltas.iter().find(|d| d.test_set == test_set)
    }

    pub fn cells_for<'a>(&'a self, configuration: &'a str, test_set: &'a str) -> impl Iterator<Item = &'a CellResult> + 'a {
        self.cells.iter().filter(move |c| c.configuration == configuration && c.test_set == test_set)
    }

    /// Aggregates per-cell summaries into means and deltas.
    pub fn assemble(
        seeds: Vec<u64>,
        teacher_best_epoch: usize,
        teacher_val_map50: f64,
        teacher_hash: String,
        cells: Vec<CellResult>,
    ) -> Self {
        let mut means = Vec::new();
        for test_set in TEST_SETS {
            for configuration in CONFIGURATIONS {
                let items: Vec<&Summary> = cells
                    .iter()
                    .filter(|c| c.configuration == configuration && c.test_set == test_set)
                    .map(|c| &c.summary)
                    .collect();
                means.push(MeanResult {
                    configuration: configuration.to_string(),
                    test_set: test_set.to_string(),
                    summary: Summary::mean(&items),
                });
            }
        }
        let find = |conf: &str, seed: u64, set: &str| {
            cells.iter().find(|c| c.configuration == conf && c.seed == seed && c.test_set == set).map(|c| &c.summary)
        };
        let deltas = TEST_SETS
            .iter()
            .map(|&test_set| {
                let per_seed = seeds
                    .iter()
                    .filter_map(|&s| Some((s, find("kd-on", s, test_set)?.minus(find("kd-off", s, test_set)?))))
                    .collect();
                let mean_of = |conf: &str| {
                    means.iter().find(|m| m.configuration == conf && m.test_set == test_set).map(|m| m.summary.clone())
                };
                let mean = mean_of("kd-on").expect("mean row").minus(&mean_of("kd-off").expect("mean row"));
                DeltaResult { test_set: test_set.to_string(), per_seed, mean }
            })
            .collect();
        ComparisonReport { seeds, teacher_best_epoch, teacher_val_map50, teacher_hash, cells, means, deltas }
    }

    /// Table with one row per cell, mean and delta: mAP25, mAP50, mAP25:75
    /// and AP50 per class.
    pub fn to_csv(&self) -> String {
        let classes: Vec<String> = self.cells.first().map(|c| c.summary.ap50.keys().cloned().collect()).unwrap_or_default();
        let mut out = String::from("test_set,configuration,seed,mAP25,mAP50,mAP25:75");
        for c in &classes {
            let _ = write!(out, ",AP50_{c}");
        }
        out.push('\n');
        let mut row = |set: &str, conf: &str, seed: &str, s: &Summary| {
            let _ = write!(out, "{set},{conf},{seed},{},{},{}", fmt_metric(s.map_25), fmt_metric(s.map_50), fmt_metric(s.map_25_75));
            for c in &classes {
                let _ = write!(out, ",{}", fmt_metric(s.ap50.get(c).copied().unwrap_or(0.0)));
            }
            out.push('\n');
        };
        for set in TEST_SETS {
            for conf in CONFIGURATIONS {
                for cell in self.cells_for(conf, set) {
                    row(set, conf, &cell.seed.to_string(), &cell.summary);
                }
                if let Some(m) = self.mean(conf, set) {
                    row(set, conf, "mean", m);
                }
            }
            if let Some(d) = self.delta(set) {
                for (seed, s) in &d.per_seed {
                    row(set, "delta", &seed.to_string(), s);
                }
                row(set, "delta", "mean", &d.mean);
            }
        }
        out
    }

    /// Plain-text rendering of the table, in percent.
    pub fn to_text(&self) -> String {
        let classes: Vec<String> = self.cells.first().map(|c| c.summary.ap50.keys().cloned().collect()).unwrap_or_default();
        let pct = |v: f64| format!("{:>7.1}", 100.0 * v);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "teacher: best epoch {}, val mAP50 {:.1}, parameter hash {}",
            self.teacher_best_epoch + 1,
            100.0 * self.teacher_val_map50,
            &self.teacher_hash[..16.min(self.teacher_hash.len())]
        );
        for set in TEST_SETS {
            let _ = writeln!(out, "\n[{set}]");
            let mut header = format!("{:<8} {:>6} {:>7} {:>7} {:>8}", "config", "seed", "mAP25", "mAP50", "mAP25:75");
            for c in &classes {
                let _ = write!(header, " {:>10}", format!("AP50 {}", &c[..c.len().min(5)]));
            }
            let _ = writeln!(out, "{header}");
            let line = |out: &mut String, conf: &str, seed: &str, s: &Summary| {
                let _ = write!(out, "{conf:<8} {seed:>6} {} {} {} ", pct(s.map_25), pct(s.map_50), pct(s.map_25_75));
                for c in &classes {
                    let _ = write!(out, "   {}", pct(s.ap50.get(c).copied().unwrap_or(0.0)));
                }
                out.push('\n');
            };
            for conf in CONFIGURATIONS {
                for cell in self.cells_for(conf, set) {
                    line(&mut out, conf, &cell.seed.to_string(), &cell.summary);
                }
            }
            for conf in CONFIGURATIONS {
                if let Some(m) = self.mean(conf, set) {
                    line(&mut out, conf, "mean", m);
                }
            }
            if let Some(d) = self.delta(set) {
                line(&mut out, "delta", "mean", &d.mean);
            }
        }
        out
    }
}

fn cell_dir(root: &Path, configuration: &str, seed: u64) -> PathBuf {
    root.join("students").join(configuration).join(format!("seed-{seed}"))
}

fn relative(root: &Path, path: &Path) -> String {
    path.strip_prefix(root).unwrap_or(path).to_string_lossy().replace('\\', "/")
}

#[derive(Debug, Serialize, Deserialize)]
struct FailureRecord {
    stage: String,
    kind: String,
    message: String,
}

/// Runs `body`, leaving a failure marker in `out` if it errs and clearing
/// any stale marker when it succeeds.
fn with_failure_marker<T>(out: &Path, stage: &mut String, body: impl FnOnce(&mut String) -> Result<T>) -> Result<T> {
    let marker = out.join(FAILURE_FILE);
    match body(stage) {
        Ok(v) => {
            if marker.exists() {
                std::fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))?;
            }
            Ok(v)
        }
        Err(e) => {
            let record = FailureRecord { stage: stage.clone(), kind: e.kind().to_string(), message: e.to_string() };
            // The original error matters more than a failure to record it.
            let _ = write_json(&marker, &record);
            Err(e)
        }
    }
}

/// Trains the teacher (or resumes it) under `dir`.
fn teacher_stage(corpora: &Corpora, cfg: &ExperimentConfig, dir: &Path) -> Result<(FrozenTeacher, usize, f64)> {
    create_dir(dir)?;
    echo_config(dir, &cfg.teacher)?;
    let [train, val, test] = &corpora.polyp;
    let outcome = train_teacher(train, val, &cfg.teacher, &RunDir::at(dir))?;
    let report = evaluate_model(&outcome.model, test, &cfg.eval)?;
    write_report_with_plots(&report, &dir.join("eval"), "test")?;
    let frozen = freeze(outcome.model)?;
    write_json(&dir.join("frozen.json"), &serde_json::json!({ "param_hash": frozen.frozen_hash() }))?;
    Ok((frozen, outcome.best_epoch, outcome.best_val_map50))
}

/// Full comparison: corpora → teacher → frozen teacher → kd-off and kd-on
/// students for every seed → held-out and unseen evaluation → comparison
/// table. The table is assembled from the report files on disk.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<ComparisonReport> {
    cfg.validate()?;
    create_dir(out)?;
    write_file(&out.join(CONFIG_FILE), cfg.to_toml()?)?;
    let mut stage = String::from("data");
    with_failure_marker(out, &mut stage, |stage| {
        let corpora = materialize_corpora(&out.join("data"), &cfg.data)?;

        *stage = "teacher".into();
        let (teacher, teacher_epoch, teacher_val) = teacher_stage(&corpora, cfg, &out.join("teacher"))?;

        let [train, val, heldout] = &corpora.edd;
        let mut cells = Vec::new();
        for &seed in &cfg.seeds {
            for (configuration, kd) in CONFIGURATIONS.iter().zip([false, true]) {
                *stage = format!("student {configuration} seed {seed}");
                let dir = cell_dir(out, configuration, seed);
                create_dir(&dir)?;
                let scfg = cfg.student_config(seed, kd);
                echo_config(&dir, &scfg)?;
                let before = teacher.current_hash();
                let outcome = train_student(train, val, Some(&teacher), &scfg, &RunDir::at(&dir))?;
                let after = teacher.current_hash();
                let record = TeacherHashRecord {
                    frozen: teacher.frozen_hash().to_string(),
                    unchanged: before == teacher.frozen_hash() && after == teacher.frozen_hash(),
                    before,
                    after,
                };
                write_json(&dir.join("teacher-hash.json"), &record)?;
                if !record.unchanged {
                    return Err(Error::Config(format!("teacher parameters changed during {configuration} seed {seed}")));
                }
                for (test_set, data) in TEST_SETS.iter().zip([heldout, &corpora.unseen]) {
                    let report = evaluate_model(&outcome.model, data, &cfg.eval)?;
                    let eval_dir = dir.join("eval");
                    write_report_with_plots(&report, &eval_dir, test_set)?;
                    let path = eval_dir.join(format!("{test_set}.json"));
                    // Read back, so the table holds exactly what the files hold.
                    let stored = EvalReport::read(&path)?;
                    cells.push(CellResult {
                        configuration: configuration.to_string(),
                        seed,
                        test_set: test_set.to_string(),
                        report: relative(out, &path),
                        best_epoch: outcome.best_epoch,
                        summary: Summary::of(&stored),
                    });
                }
            }
        }

        *stage = "report".into();
        let report =
            ComparisonReport::assemble(cfg.seeds.clone(), teacher_epoch, teacher_val, teacher.frozen_hash().to_string(), cells);
        write_comparison(&report, &out.join("report"))?;
        Ok(report)
    })
}

/// Writes the comparison as JSON, CSV, text and per-test-set bar charts.
pub fn write_comparison(report: &ComparisonReport, dir: &Path) -> Result<()> {
    write_json(&dir.join("comparison.json"), report)?;
    write_file(&dir.join("comparison.csv"), report.to_csv())?;
    write_file(&dir.join("comparison.txt"), report.to_text())?;
    for set in TEST_SETS {
        let (Some(off), Some(on)) = (report.mean("kd-off", set), report.mean("kd-on", set)) else { continue };
        let mut categories = vec!["mAP25".to_string(), "mAP50".to_string()];
        categories.extend(off.ap50.keys().map(|c| format!("AP50 {c}")));
        let values = |s: &Summary| {
            let mut v = vec![s.map_25, s.map_50];
            v.extend(s.ap50.values().copied());
            v
        };
        let svg = plot::bar_chart_svg(
            &format!("{set}: mean over {} seeds", report.seeds.len()),
            "AP",
            &categories,
            &[("kd-off".into(), values(off)), ("kd-on".into(), values(on))],
        );
        write_file(&dir.join(format!("{set}.svg")), svg)?;
    }
    Ok(())
}

/// Reassembles the comparison from the per-cell report files of a finished
/// experiment directory.
pub fn reassemble_comparison(out: &Path) -> Result<ComparisonReport> {
    let cfg = ExperimentConfig::load(&out.join(CONFIG_FILE))?;
    let stored: ComparisonReport = serde_json::from_slice(
        &std::fs::read(out.join("report").join("comparison.json")).map_err(|e| Error::io(out.join("report"), e))?,
    )?;
    let mut cells = Vec::new();
    for cell in &stored.cells {
        let report = EvalReport::read(&out.join(&cell.report))?;
        cells.push(CellResult { summary: Summary::of(&report), ..cell.clone() });
    }
    Ok(ComparisonReport::assemble(
        cfg.seeds.clone(),
        stored.teacher_best_epoch,
        stored.teacher_val_map50,
        stored.teacher_hash.clone(),
        cells,
    ))
}

// ─── k-fold augmentation table ─────────────────────────────────────────────

/// One row of the cross-validation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KfoldRow {
    pub variant: String,
    /// Validation mAP50 per fold (K1, K2, ...).
    pub folds: Vec<f64>,
    /// Arithmetic mean of `folds`.
    pub average: f64,
}

impl KfoldRow {
    pub fn new(variant: impl Into<String>, folds: Vec<f64>) -> Self {
        let average = fold_mean(&folds);
        KfoldRow { variant: variant.into(), folds, average }
    }
}

/// Per-fold validation mAP50 for each augmentation variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KfoldTable {
    pub k: usize,
    pub epochs: usize,
    pub rows: Vec<KfoldRow>,
}

impl KfoldTable {
    pub fn row(&self, variant: &str) -> Option<&KfoldRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    fn header(&self) -> Vec<String> {
        let mut h = vec!["augmentation".to_string(), "epochs".to_string()];
        h.extend((1..=self.k).map(|i| format!("K{i}")));
        h.push("Average".into());
        h
    }

    /// Values as stored (fractions in [0, 1]).
    pub fn to_csv(&self) -> String {
        let mut out = self.header().join(",") + "\n";
        for r in &self.rows {
            let mut cells = vec![r.variant.clone(), self.epochs.to_string()];
            cells.extend(r.folds.iter().map(|&v| fmt_metric(v)));
            cells.push(fmt_metric(r.average));
            out += &(cells.join(",") + "\n");
        }
        out
    }

    /// Table with every value given as a one-decimal percentage, the way the
    /// cross-validation results are usually printed. Values are interpreted
    /// as fractions unless `percent` is set.
    pub fn to_text(&self, percent: bool) -> String {
        let scale = if percent { 1.0 } else { 100.0 };
        let mut out = String::new();
        let header = self.header();
        let _ = write!(out, "{:<14}{:>7}", header[0], header[1]);
        for h in &header[2..] {
            let _ = write!(out, "{h:>9}");
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{:<14}{:>7}", r.variant, self.epochs);
            for v in r.folds.iter().chain([&r.average]) {
                let _ = write!(out, "{:>9.1}", v * scale);
            }
            out.push('\n');
        }
        out
    }
}

/// Cross-validates the teacher settings under each configured augmentation
/// variant on the train + val splits of `data`, writing one run directory
/// per (variant, fold) and the table.
pub fn run_kfold_table(cfg: &ExperimentConfig, data: &DataSet, out: &Path) -> Result<KfoldTable> {
    cfg.validate()?;
    create_dir(out)?;
    write_file(&out.join(CONFIG_FILE), cfg.to_toml()?)?;
    let mut rows = Vec::new();
    for &variant in &cfg.kfold.variants {
        let dir = out.join(variant.name());
        let tcfg = cfg.kfold_train_config(variant);
        create_dir(&dir)?;
        echo_config(&dir, &tcfg)?;
        let result = run_kfold(data, cfg.kfold.k, &tcfg, cfg.kfold.seed, &RunDir::at(&dir))?;
        rows.push(KfoldRow::new(variant.name(), result.per_fold));
    }
    let table = KfoldTable { k: cfg.kfold.k, epochs: cfg.kfold.epochs, rows };
    write_json(&out.join("kfold.json"), &table)?;
    write_file(&out.join("kfold.csv"), table.to_csv())?;
    write_file(&out.join("kfold.txt"), table.to_text(false))?;
    Ok(table)
}

/// Reads `model.json` from a finished training directory.
pub fn trained_model(dir: &Path) -> Result<DetectorModel> {
    DetectorModel::load(&dir.join(MODEL_FILE))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::parse(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_sections_keep_their_own_defaults() {
        let cfg = ExperimentConfig::parse("[teacher]\nepochs = 5\n[student.kd]\nlambda_ndbe = 0.2\n").unwrap();
        assert_eq!(cfg.teacher.epochs, 5);
        assert_eq!(cfg.teacher.augment, AugmentPolicy::combined());
        assert_eq!(cfg.student.kd.lambda_ndbe, 0.2);
        assert_eq!(cfg.student.kd.lambda_polyp, 0.33);
        assert_eq!(cfg.seeds, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in ["sedes = [1]\n", "[teacher]\nepoch = 3\n", "[student.kd]\nlambda = 1.0\n", "[bogus]\n"] {
            let err = ExperimentConfig::parse(text).unwrap_err();
            assert_eq!(err.kind(), "config", "{text}");
        }
    }

    #[test]
    fn invalid_values_are_rejected() {
        for text in ["seeds = []\n", "seeds = [1, 1]\n", "[teacher]\nlearning_rate = 0.0\n", "[kfold]\nk = 1\n"] {
            assert!(ExperimentConfig::parse(text).is_err(), "{text}");
        }
    }

    #[test]
    fn defaults_follow_the_protocol() {
        let cfg = ExperimentConfig::default();
        assert_eq!(cfg.seeds.len(), 5);
        assert_eq!(cfg.teacher.augment, AugmentPolicy::combined());
        assert_eq!(cfg.student.augment, AugmentPolicy::none());
        assert_eq!(cfg.student.epochs, 60);
        assert_eq!(cfg.kfold.epochs, 20);
        assert_eq!(cfg.kfold.k, 3);
        assert_eq!(cfg.data.edd_render.neoplasia_ellipse_fraction, 0.3);
        assert_ne!(cfg.data.unseen_render, cfg.data.edd_render);
        assert!(!cfg.student_config(3, false).kd.enabled);
        assert!(cfg.student_config(3, true).kd.enabled);
        assert_eq!(cfg.student_config(3, true).seed, 3);
    }

    #[test]
    fn kfold_average_is_the_arithmetic_mean() {
        let row = KfoldRow::new("geometric", vec![0.824, 0.855, 0.851]);
        let oracle = (0.824 + 0.855 + 0.851) / 3.0;
        assert!((row.average - oracle).abs() < 1e-12);
        let table = KfoldTable { k: 3, epochs: 20, rows: vec![row] };
        assert!(table.to_text(false).contains("84.3"));
        assert!(table.to_csv().starts_with("augmentation,epochs,K1,K2,K3,Average\n"));
    }

    fn summary(m: f64) -> Summary {
        Summary {
            map_25: m,
            map_50: m / 2.0,
            map_25_75: m / 4.0,
            ap50: [("ndbe".to_string(), m), ("polyp".to_string(), 1.0 - m)].into_iter().collect(),
        }
    }

    #[test]
    fn comparison_means_and_deltas() {
        let mut cells = Vec::new();
        for (seed, off, on) in [(0, 0.2, 0.5), (1, 0.4, 0.3)] {
            for (conf, v) in [("kd-off", off), ("kd-on", on)] {
                for set in TEST_SETS {
                    cells.push(CellResult {
                        configuration: conf.into(),
                        seed,
                        test_set: set.into(),
                        report: String::new(),
                        best_epoch: 0,
                        summary: summary(v),
                    });
                }
            }
        }
        let r = ComparisonReport::assemble(vec![0, 1], 0, 0.9, "h".into(), cells);
        assert_eq!(r.means.len(), 4);
        let off = r.mean("kd-off", "heldout").unwrap();
        assert!((off.map_25 - 0.3).abs() < 1e-12);
        let d = r.delta("unseen").unwrap();
        assert!((d.mean.map_25 - 0.1).abs() < 1e-12);
        assert!((d.per_seed[&0].map_25 - 0.3).abs() < 1e-12);
        assert!((d.per_seed[&1].map_25 + 0.1).abs() < 1e-12);
        assert!((d.mean.ap50["polyp"] + 0.1).abs() < 1e-12);
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 1 + 2 * (2 * 2 + 2 + 2 + 1));
    }
}
