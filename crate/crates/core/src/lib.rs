//! Class-aware teacher/student distillation for a desk-scale region detector.
//!
//! A frozen single-class teacher supplies per-anchor foreground probabilities;
//! a three-class student is trained with cross-entropy, smooth-L1 box
//! regression and a weighted Bhattacharyya penalty between each student class
//! column and the teacher column. The crate also ships the synthetic corpora,
//! augmentations, evaluation (AP/mAP) and the experiment drivers.

pub mod augment;
pub mod detector;
pub mod distill;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod geometry;
pub mod plot;
pub mod rng;
pub mod synthdata;
pub mod train;

pub use error::{Error, Result};
