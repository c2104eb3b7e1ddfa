//! Deterministic desk-scale multi-modal 3D detection: 2D-prior lifting with
//! frustum attention, BEV fusion, proposal refinement, frustum-constrained
//! set matching and long-tailed detection metrics, verified end-to-end on
//! synthetic scenes with brute-force oracles.

pub mod attention;
pub mod bev;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod matching;
pub mod pipeline;
pub mod priors;
pub mod selftest;

pub use error::{Error, Result};
