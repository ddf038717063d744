//! Mutual prompt learning for density-based crowd counting.
//!
//! A segmenter and a density regressor share a backbone and supervise each
//! other: point annotations refine the segmenter's target masks (the offline
//! and online point prompts), and the segmenter's predicted mask constrains
//! where the regressor may place density (the context prompt).
//!
//! Module map:
//!
//! - [`geometry`]: grids, mask algebra, dilation, K-NN, enclosing circles
//! - [`targets`]: density maps, pseudo masks, box maps, box noise
//! - [`prompt`]: offline/online prompts, context masks, the target store
//! - [`losses`]: density, segmentation and context losses
//! - [`model`]: the two-branch network and its backward pass
//! - [`trainer`]: Adam, segmenter pretraining, the ablation variants
//! - [`bench`]: synthetic scenes, metrics, experiment harnesses
//! - [`io`] and [`config`]: file formats and run configuration

// Negated float comparisons are used on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod config;
pub mod error;
pub mod geometry;
pub mod io;
pub mod losses;
pub mod model;
pub mod prompt;
pub mod targets;
pub mod trainer;

pub use error::{Error, Result};
