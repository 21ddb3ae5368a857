//! Deterministic synthetic detection corpora.
//!
//! Two corpora are produced: a large single-class polyp corpus used to train
//! the teacher, and a small, imbalanced three-class corpus (ndbe, neoplasia,
//! polyp) used for the student. A third, distribution-shifted set serves as
//! an unseen test split. Per-split image and instance counts are fixed by
//! [`CorpusPlan`] and reproduced exactly.

mod io;
mod render;
mod split;

use std::collections::BTreeMap;
use std::fmt;

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{BBox, Frame};
use crate::rng::{self, Domain};

pub use io::{load_dataset, load_split, save_dataset, tree_digest};
pub use render::{RenderParams, Shape};
pub use split::{kfold_partitions, split_dataset};

pub const IMAGE_SIZE: u32 = 225;
pub const FRAME: Frame = Frame::new(IMAGE_SIZE as f64, IMAGE_SIZE as f64);
pub const MIN_BOX_AREA: f64 = 16.0;
pub const GENERATOR_VERSION: &str = "synth-1";

pub const RAW_CLASSES: [&str; 5] = ["NDBE", "suspicious", "HGD", "cancer", "polyp"];
pub const MERGED_CLASSES: [&str; 3] = ["ndbe", "neoplasia", "polyp"];
pub const NDBE: usize = 0;
pub const NEOPLASIA: usize = 1;
pub const POLYP: usize = 2;

/// Raw lesion categories and their merge onto the three detection classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCatalog {
    pub raw_classes: Vec<String>,
    pub merged_classes: Vec<String>,
    pub merge_map: BTreeMap<String, String>,
}

impl Default for ClassCatalog {
    fn default() -> Self {
        let merge_map = [
            ("NDBE", "ndbe"),
            ("suspicious", "neoplasia"),
            ("HGD", "neoplasia"),
            ("cancer", "neoplasia"),
            ("polyp", "polyp"),
        ]
        .into_iter()
        .map(|(r, m)| (r.to_string(), m.to_string()))
        .collect();
        ClassCatalog {
            raw_classes: RAW_CLASSES.iter().map(|s| s.to_string()).collect(),
            merged_classes: MERGED_CLASSES.iter().map(|s| s.to_string()).collect(),
            merge_map,
        }
    }
}

impl ClassCatalog {
    pub fn merged_index(&self, name: &str) -> Option<usize> {
        self.merged_classes.iter().position(|c| c == name)
    }

    pub fn merged_name(&self, index: usize) -> Option<&str> {
        self.merged_classes.get(index).map(String::as_str)
    }

    /// Merged class index for a raw category.
    pub fn merge(&self, raw: &str) -> Option<usize> {
        self.merge_map.get(raw).and_then(|m| self.merged_index(m))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledBox {
    pub bbox: BBox,
    /// Merged class index into [`ClassCatalog::merged_classes`].
    pub class: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub image: RgbImage,
    pub annotations: Vec<LabeledBox>,
    pub source_id: String,
}

impl ImageSample {
    /// Boxes inside the frame with at least [`MIN_BOX_AREA`], and at least one of them.
    pub fn is_valid(&self) -> bool {
        let frame = Frame::new(self.image.width() as f64, self.image.height() as f64);
        !self.annotations.is_empty()
            && self
                .annotations
                .iter()
                .all(|a| a.bbox.is_valid() && a.bbox.within(frame) && a.bbox.area() >= MIN_BOX_AREA)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorpusKind {
    PolypProxy,
    EddProxy,
    Unseen,
}

impl CorpusKind {
    pub fn name(self) -> &'static str {
        match self {
            CorpusKind::PolypProxy => "polyp-proxy",
            CorpusKind::EddProxy => "edd-proxy",
            CorpusKind::Unseen => "unseen",
        }
    }

    fn domain(self) -> Domain {
        match self {
            CorpusKind::PolypProxy => Domain::PolypProxy,
            CorpusKind::EddProxy => Domain::EddProxy,
            CorpusKind::Unseen => Domain::Unseen,
        }
    }
}

impl std::str::FromStr for CorpusKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "polyp-proxy" => Ok(CorpusKind::PolypProxy),
            "edd-proxy" => Ok(CorpusKind::EddProxy),
            "unseen" => Ok(CorpusKind::Unseen),
            other => Err(format!("unknown dataset kind `{other}`")),
        }
    }
}

/// Image count and per-class instance counts of one split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitPlan {
    pub split: Split,
    pub images: usize,
    /// Instances per merged class (ndbe, neoplasia, polyp).
    pub instances: [usize; 3],
    pub max_per_image: usize,
}

impl SplitPlan {
    fn total_instances(&self) -> usize {
        self.instances.iter().sum()
    }
}

/// Polyp corpus: 800/100/100 images, 858/111/102 polyps.
pub fn polyp_proxy_plan() -> Vec<SplitPlan> {
    [(Split::Train, 800, 858), (Split::Val, 100, 111), (Split::Test, 100, 102)]
        .into_iter()
        .map(|(split, images, polyps)| SplitPlan { split, images, instances: [0, 0, polyps], max_per_image: 2 })
        .collect()
}

/// Three-class corpus: 376/38/38 images with the merged-class counts of the
/// source challenge data.
pub fn edd_proxy_plan() -> Vec<SplitPlan> {
    vec![
        SplitPlan { split: Split::Train, images: 376, instances: [239, 183, 172], max_per_image: 3 },
        SplitPlan { split: Split::Val, images: 38, instances: [28, 21, 24], max_per_image: 3 },
        SplitPlan { split: Split::Test, images: 38, instances: [19, 31, 32], max_per_image: 3 },
    ]
}

pub fn unseen_plan() -> SplitPlan {
    SplitPlan { split: Split::Test, images: 38, instances: [19, 31, 32], max_per_image: 3 }
}

/// Everything needed to regenerate a split, written next to it on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub generator_version: String,
    pub corpus: CorpusKind,
    pub split: Split,
    pub seed: u64,
    pub width: u32,
    pub height: u32,
    pub image_count: usize,
    pub counts: BTreeMap<String, usize>,
    pub catalog: ClassCatalog,
    pub render: RenderParams,
    pub multiplicity: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSet {
    pub name: String,
    pub samples: Vec<ImageSample>,
    pub catalog: ClassCatalog,
    pub split: Split,
    pub manifest: Manifest,
}

impl DataSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Instance histogram over merged classes.
    pub fn class_counts(&self) -> [usize; 3] {
        count_classes(&self.samples)
    }

    /// A dataset holding `samples` with a manifest rewritten for them.
    pub fn with_samples(&self, name: &str, split: Split, samples: Vec<ImageSample>) -> DataSet {
        let mut manifest = self.manifest.clone();
        manifest.split = split;
        manifest.image_count = samples.len();
        manifest.counts = counts_map(&self.catalog, count_classes(&samples));
        DataSet { name: name.to_string(), samples, catalog: self.catalog.clone(), split, manifest }
    }

    /// Concatenation of two datasets from the same corpus (e.g. train + val).
    pub fn concat(&self, other: &DataSet, name: &str) -> DataSet {
        let samples = self.samples.iter().chain(&other.samples).cloned().collect();
        self.with_samples(name, self.split, samples)
    }
}

pub(crate) fn count_classes(samples: &[ImageSample]) -> [usize; 3] {
    let mut counts = [0; 3];
    for a in samples.iter().flat_map(|s| &s.annotations) {
        counts[a.class] += 1;
    }
    counts
}

fn counts_map(catalog: &ClassCatalog, counts: [usize; 3]) -> BTreeMap<String, usize> {
    catalog.merged_classes.iter().cloned().zip(counts).collect()
}

const MULTIPLICITY_RULE: &str = "every image receives one instance; the remaining instances of the shuffled \
     class list are assigned to uniformly drawn images below the per-image cap";

/// Per-image class lists realizing the plan's counts exactly.
fn assign_instances<R: Rng>(rng: &mut R, plan: &SplitPlan) -> Vec<Vec<usize>> {
    assert!(plan.total_instances() >= plan.images);
    assert!(plan.total_instances() <= plan.images * plan.max_per_image);
    let mut labels: Vec<usize> = plan
        .instances
        .iter()
        .enumerate()
        .flat_map(|(c, &n)| std::iter::repeat_n(c, n))
        .collect();
    labels.shuffle(rng);
    let mut per_image: Vec<Vec<usize>> = labels[..plan.images].iter().map(|&c| vec![c]).collect();
    for &c in &labels[plan.images..] {
        let open: Vec<usize> = (0..plan.images).filter(|&i| per_image[i].len() < plan.max_per_image).collect();
        let i = open[rng.random_range(0..open.len())];
        per_image[i].push(c);
    }
    per_image
}

fn shape_of(class: usize) -> Shape {
    match class {
        NDBE => Shape::Ndbe,
        NEOPLASIA => Shape::Neoplasia,
        _ => Shape::Polyp,
    }
}

fn split_index(split: Split) -> u64 {
    match split {
        Split::Train => 0,
        Split::Val => 1,
        Split::Test => 2,
    }
}

/// Renders a split according to `plan`. Each image draws from its own stream
/// keyed by `(seed, corpus, split, index)`, so the output does not depend on
/// scheduling.
pub fn generate_split(kind: CorpusKind, plan: &SplitPlan, seed: u64, params: &RenderParams) -> DataSet {
    let catalog = ClassCatalog::default();
    let domain = kind.domain();
    let mut plan_rng = rng::stream(seed, Domain::Plan, rng::pair(domain as u64, split_index(plan.split)));
    let layout = assign_instances(&mut plan_rng, plan);

    let samples: Vec<ImageSample> = layout
        .par_iter()
        .enumerate()
        .map(|(i, classes)| {
            let mut rng = rng::stream(seed, domain, rng::pair(split_index(plan.split), i as u64));
            let shapes: Vec<Shape> = classes.iter().map(|&c| shape_of(c)).collect();
            let (image, boxes) = render::render_scene(&mut rng, IMAGE_SIZE, IMAGE_SIZE, &shapes, params);
            let annotations = boxes.into_iter().zip(classes).map(|(bbox, &class)| LabeledBox { bbox, class }).collect();
            ImageSample { image, annotations, source_id: format!("{}/{}/{:06}", kind.name(), plan.split, i) }
        })
        .collect();

    let manifest = Manifest {
        generator_version: GENERATOR_VERSION.to_string(),
        corpus: kind,
        split: plan.split,
        seed,
        width: IMAGE_SIZE,
        height: IMAGE_SIZE,
        image_count: samples.len(),
        counts: counts_map(&catalog, count_classes(&samples)),
        catalog: catalog.clone(),
        render: params.clone(),
        multiplicity: format!("{MULTIPLICITY_RULE} (cap {})", plan.max_per_image),
    };
    DataSet { name: format!("{}-{}", kind.name(), plan.split), samples, catalog, split: plan.split, manifest }
}

fn generate_three(kind: CorpusKind, plans: Vec<SplitPlan>, seed: u64, params: &RenderParams) -> (DataSet, DataSet, DataSet) {
    let mut sets = plans.iter().map(|p| generate_split(kind, p, seed, params));
    let train = sets.next().expect("train plan");
    let val = sets.next().expect("val plan");
    let test = sets.next().expect("test plan");
    (train, val, test)
}

pub fn generate_polyp_proxy(seed: u64) -> (DataSet, DataSet, DataSet) {
    generate_three(CorpusKind::PolypProxy, polyp_proxy_plan(), seed, &RenderParams::default())
}

pub fn generate_edd_proxy(seed: u64) -> (DataSet, DataSet, DataSet) {
    generate_edd_proxy_with(seed, &RenderParams::default())
}

/// Three-class corpus with custom rendering (e.g. a different confusion fraction).
pub fn generate_edd_proxy_with(seed: u64, params: &RenderParams) -> (DataSet, DataSet, DataSet) {
    generate_three(CorpusKind::EddProxy, edd_proxy_plan(), seed, params)
}

/// 38 test images with the three-class mix under shifted rendering ranges.
pub fn generate_unseen_test(seed: u64) -> DataSet {
    generate_split(CorpusKind::Unseen, &unseen_plan(), seed, &RenderParams::shifted())
}
