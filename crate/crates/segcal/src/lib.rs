//! Calibration-aware segmentation at desk scale.
//!
//! A framework-free toolkit around selective entropy regularization for
//! per-pixel softmax segmentation: the masked entropy / masked
//! KL-to-uniform training terms, the usual baseline losses, post-hoc
//! calibrators (Platt scaling and isotonic regression), calibration
//! metrics, and a synthetic 2-D segmentation task whose true Bayes
//! posterior is known — so calibration claims can be checked against a
//! ground-truth floor instead of eyeballed.

pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod posthoc;
pub mod report;
pub mod rng;
pub mod runner;
pub mod sgt1;
pub mod synthdata;
pub mod tensor;

pub use error::{Error, FormatError, Result};
pub use rng::Rng;
pub use tensor::{LabelMap, LogitMap, ProbMap, Tensor, PROB_FLOOR};
