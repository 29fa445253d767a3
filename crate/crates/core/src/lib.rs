//! Geometric quality assurance for organ contours: overlap and distance
//! metrics, quality labelling, synthetic contour errors, a one-class SVM
//! classifier and its evaluation.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod error;
pub mod eval;
pub mod features;
pub mod metrics;
pub mod ocsvm;
pub mod perturb;
pub mod phantom;
pub mod pipeline;
pub mod quality;
pub mod rng;
pub mod volume;

pub use error::{QaError, Result};
