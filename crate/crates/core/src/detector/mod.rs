//! Minimal region detector: fixed anchor grid, fixed descriptors and linear
//! classification / box-regression heads.

mod descriptor;
mod detect;
mod grid;
mod model;
mod targets;

pub use descriptor::{describe, Descriptor, FeatureMap, DESCRIPTOR_DIM, DESCRIPTOR_VERSION};
pub use detect::{detect, detect_with_map, DetectConfig, Detection};
pub use grid::{build_grid, GridConfig, ProposalGrid};
pub use model::{softmax, softmax_rows, DetectorModel, LinearHeads, Matrix, ModelFile, ProbVector};
pub use targets::{assign_targets, AnchorLabel, AnchorTarget, NEGATIVE_IOU, POSITIVE_IOU};
