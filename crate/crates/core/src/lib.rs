//! IoU-uniform training samples, interval-weighted box regression, IoU prediction with
//! feature re-extraction and fused-score NMS, exercised on a synthetic detection
//! simulator.
//!
//! Module map:
//! - [`boxgeom`]: boxes, IoU, regression deltas
//! - [`sampler`]: IoU-stratified jitter sampling around GT boxes
//! - [`loss`]: smooth-L1 and the interval-weighted regression loss
//! - [`rpn_sim`]: synthetic scenes, skewed proposals, simulated classification scores
//! - [`toyhead`]: features and the gradient-trained regressor / IoU heads
//! - [`infer`]: refinement, one-/two-pass IoU prediction, NMS
//! - [`eval`]: AP, recall curves, histograms, correlation
//! - [`experiment`]: end-to-end runs behind the command line
//! - [`cli`]: configuration, subcommands and output files

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod boxgeom;
pub mod cli;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod infer;
pub mod loss;
pub mod rng;
pub mod rpn_sim;
pub mod sampler;
pub mod toyhead;

pub use boxgeom::{apply_deltas, encode_deltas, iou, BBox, Deltas};
pub use error::{Error, Result};
pub use sampler::{IntervalConfig, JitterRange, JitterRanges, LabeledSample};
