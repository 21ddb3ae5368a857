use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, Frame};

/// Anchor grid parameters. Anchors are `scale / sqrt(ratio)` wide and
/// `scale * sqrt(ratio)` tall (ratio = height / width).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub frame_width: f64,
    pub frame_height: f64,
    pub stride: f64,
    pub scales: Vec<f64>,
    pub ratios: Vec<f64>,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            frame_width: 225.0,
            frame_height: 225.0,
            stride: 15.0,
            scales: vec![30.0, 60.0, 120.0],
            ratios: vec![0.5, 1.0, 2.0],
        }
    }
}

impl GridConfig {
    pub fn frame(&self) -> Frame {
        Frame::new(self.frame_width, self.frame_height)
    }
}

/// Fixed proposal set shared by teacher and student.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalGrid {
    pub config: GridConfig,
    pub anchors: Vec<BBox>,
    /// Anchor count before degenerate anchors were removed.
    pub enumerated: usize,
}

impl ProposalGrid {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

fn centers(extent: f64, stride: f64) -> Vec<f64> {
    let n = ((extent / stride).floor() as usize).max(1);
    let offset = 0.5 * (extent - (n - 1) as f64 * stride);
    (0..n).map(|i| offset + i as f64 * stride).collect()
}

/// Enumerates anchors center-major (rows, then columns), then scale, then
/// ratio; clips them to the frame and drops the empty ones.
pub fn build_grid(config: &GridConfig) -> Result<ProposalGrid> {
    if !(config.stride >= 1.0) || config.scales.is_empty() || config.ratios.is_empty() {
        return Err(Error::Config("grid needs stride >= 1 and nonempty scales and ratios".into()));
    }
    if config.scales.iter().chain(&config.ratios).any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(Error::Config("grid scales and ratios must be positive".into()));
    }
    let frame = config.frame();
    let mut anchors = Vec::new();
    let mut enumerated = 0;
    for &cy in &centers(config.frame_height, config.stride) {
        for &cx in &centers(config.frame_width, config.stride) {
            for &s in &config.scales {
                for &r in &config.ratios {
                    enumerated += 1;
                    let (w, h) = (s / r.sqrt(), s * r.sqrt());
                    let raw = BBox { x_min: cx - 0.5 * w, y_min: cy - 0.5 * h, x_max: cx + 0.5 * w, y_max: cy + 0.5 * h };
                    if let Some(b) = raw.clip(frame) {
                        anchors.push(b);
                    }
                }
            }
        }
    }
    if anchors.is_empty() {
        return Err(Error::EmptyGrid);
    }
    Ok(ProposalGrid { config: config.clone(), anchors, enumerated })
}
