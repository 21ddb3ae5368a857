use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::descriptor::{DESCRIPTOR_DIM, DESCRIPTOR_VERSION};
use super::grid::{build_grid, GridConfig, ProposalGrid};
use crate::error::{Error, Result};
use crate::rng::{self, Domain};

/// Probabilities over `K + 1` classes, index 0 being background.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(pub Vec<f64>);

impl std::ops::Deref for ProbVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Max-shifted softmax.
pub fn softmax(logits: &[f64]) -> ProbVector {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    ProbVector(exps.into_iter().map(|e| e / sum).collect())
}

/// Row-wise softmax of an `n x (K+1)` logit matrix.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let p = softmax(row.as_slice().expect("standard layout"));
        row.assign(&Array1::from(p.0));
    }
    out
}

/// Affine classification and box-regression heads.
///
/// `cls_w` is `(K+1) x d`, `reg_w` is `4K x d`; class `c` (1-based) owns
/// regression rows `4(c-1)..4c`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHeads {
    pub cls_w: Array2<f64>,
    pub cls_b: Array1<f64>,
    pub reg_w: Array2<f64>,
    pub reg_b: Array1<f64>,
}

impl LinearHeads {
    pub fn zeros(num_classes: usize, dim: usize) -> Self {
        LinearHeads {
            cls_w: Array2::zeros((num_classes + 1, dim)),
            cls_b: Array1::zeros(num_classes + 1),
            reg_w: Array2::zeros((4 * num_classes, dim)),
            reg_b: Array1::zeros(4 * num_classes),
        }
    }

    /// Weights uniform in `[-0.01, 0.01]` from the init stream, biases zero.
    pub fn init(num_classes: usize, dim: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, Domain::Init, 0);
        let mut h = Self::zeros(num_classes, dim);
        h.cls_w.mapv_inplace(|_| r.random_range(-0.01..=0.01));
        h.reg_w.mapv_inplace(|_| r.random_range(-0.01..=0.01));
        h
    }

    pub fn num_classes(&self) -> usize {
        self.cls_b.len() - 1
    }

    pub fn dim(&self) -> usize {
        self.cls_w.ncols()
    }

    /// `(logits, deltas)` for each descriptor row.
    pub fn forward(&self, descriptors: &Array2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        if descriptors.ncols() != self.dim() {
            return Err(Error::Dimension { expected: self.dim(), got: descriptors.ncols() });
        }
        let logits = descriptors.dot(&self.cls_w.t()) + &self.cls_b;
        let deltas = descriptors.dot(&self.reg_w.t()) + &self.reg_b;
        Ok((logits, deltas))
    }

    /// Parameter tensors in a fixed order: cls_w, cls_b, reg_w, reg_b.
    pub fn tensors(&self) -> [&[f64]; 4] {
        [
            self.cls_w.as_slice().expect("standard layout"),
            self.cls_b.as_slice().expect("standard layout"),
            self.reg_w.as_slice().expect("standard layout"),
            self.reg_b.as_slice().expect("standard layout"),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.cls_w.as_slice_mut().expect("standard layout"),
            self.cls_b.as_slice_mut().expect("standard layout"),
            self.reg_w.as_slice_mut().expect("standard layout"),
            self.reg_b.as_slice_mut().expect("standard layout"),
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Flattened copy of all parameters in tensor order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let mut off = 0;
        for t in self.tensors_mut() {
            t.copy_from_slice(&flat[off..off + t.len()]);
            off += t.len();
        }
    }
}

/// A region detector: anchor grid, descriptor spec and linear heads.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorModel {
    /// Foreground class names; head index `c + 1` scores `class_names[c]`.
    pub class_names: Vec<String>,
    pub heads: LinearHeads,
    pub grid: ProposalGrid,
    pub descriptor_version: u32,
}

impl DetectorModel {
    pub fn new(class_names: Vec<String>, grid_config: &GridConfig, seed: u64) -> Result<Self> {
        let grid = build_grid(grid_config)?;
        let heads = LinearHeads::init(class_names.len(), DESCRIPTOR_DIM, seed);
        Ok(DetectorModel { class_names, heads, grid, descriptor_version: DESCRIPTOR_VERSION })
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Head index for a class name.
    pub fn head_index(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|c| c == name).map(|i| i + 1)
    }

    /// True when per-anchor outputs of both models refer to the same regions.
    pub fn aligned_with(&self, other: &DetectorModel) -> bool {
        self.grid.config == other.grid.config
            && self.descriptor_version == other.descriptor_version
            && self.heads.dim() == other.heads.dim()
    }

    /// SHA-256 over the class names, grid config and raw parameter bits.
    pub fn param_hash(&self) -> String {
        let mut h = Sha256::new();
        for name in &self.class_names {
            h.update(name.as_bytes());
            h.update([0]);
        }
        h.update(serde_json::to_vec(&self.grid.config).expect("grid config serializes"));
        for t in self.heads.tensors() {
            for v in t {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn to_file(&self) -> ModelFile {
        let mat = |m: &Array2<f64>| Matrix { rows: m.nrows(), cols: m.ncols(), data: m.iter().copied().collect() };
        ModelFile {
            format: MODEL_FORMAT.to_string(),
            version: MODEL_FILE_VERSION,
            class_names: self.class_names.clone(),
            grid: self.grid.config.clone(),
            descriptor_version: self.descriptor_version,
            cls_weights: mat(&self.heads.cls_w),
            cls_bias: self.heads.cls_b.to_vec(),
            reg_weights: mat(&self.heads.reg_w),
            reg_bias: self.heads.reg_b.to_vec(),
        }
    }

    pub fn from_file(file: ModelFile) -> Result<Self> {
        if file.format != MODEL_FORMAT || file.version != MODEL_FILE_VERSION {
            return Err(Error::format("model", format!("unsupported format {} v{}", file.format, file.version)));
        }
        let k = file.class_names.len();
        let mat = |m: Matrix, rows: usize, what: &str| -> Result<Array2<f64>> {
            if m.rows != rows || m.data.len() != m.rows * m.cols {
                return Err(Error::format("model", format!("{what} has inconsistent dimensions")));
            }
            Array2::from_shape_vec((m.rows, m.cols), m.data).map_err(|e| Error::format("model", e.to_string()))
        };
        let cls_w = mat(file.cls_weights, k + 1, "cls_weights")?;
        let reg_w = mat(file.reg_weights, 4 * k, "reg_weights")?;
        if cls_w.ncols() != reg_w.ncols() || file.cls_bias.len() != k + 1 || file.reg_bias.len() != 4 * k {
            return Err(Error::format("model", "head shapes disagree"));
        }
        let heads = LinearHeads { cls_w, cls_b: Array1::from(file.cls_bias), reg_w, reg_b: Array1::from(file.reg_bias) };
        if !heads.is_finite() {
            return Err(Error::format("model", "non-finite parameter"));
        }
        Ok(DetectorModel {
            class_names: file.class_names,
            heads,
            grid: build_grid(&file.grid)?,
            descriptor_version: file.descriptor_version,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(&self.to_file())?;
        bytes.push(b'\n');
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let file: ModelFile =
            serde_json::from_slice(&bytes).map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
        Self::from_file(file)
    }
}

const MODEL_FORMAT: &str = "kdetect-model";
const MODEL_FILE_VERSION: u32 = 1;

/// Row-major matrix with explicit dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

/// Serialized form of a [`DetectorModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub format: String,
    pub version: u32,
    pub class_names: Vec<String>,
    pub grid: GridConfig,
    pub descriptor_version: u32,
    pub cls_weights: Matrix,
    pub cls_bias: Vec<f64>,
    pub reg_weights: Matrix,
    pub reg_bias: Vec<f64>,
}
