//! Reference implementations written independently of the library code paths,
//! used as oracles by the integration tests.
#![allow(dead_code)]

pub mod ap;
pub mod fixtures;
pub mod loss;
