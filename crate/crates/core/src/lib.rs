//! Nested-region semantic segmentation from scratch.
//!
//! A small reverse-mode tensor engine ([`autodiff`]), FCN-8s / U-Net style
//! network builders ([`arch`]), cross-entropy, bootstrapping, sensitivity-
//! specificity, dice and hierarchical dice losses ([`losses`]), the
//! hierarchical per-pixel decision rule ([`classifier`]), region metrics
//! ([`metrics`]), a synthetic phantom generator with its binary volume format
//! ([`data`]), a data-parallel Adam trainer ([`train`]) and the flat key/value
//! run configuration shared by the command-line tool ([`config`]).

pub mod arch;
pub mod autodiff;
pub mod classifier;
pub mod config;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod real;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use real::Real;
pub use tensor::Tensor;

/// Number of label classes: background, necrosis, edema, non-enhancing, enhancing.
pub const NUM_CLASSES: usize = 5;
/// Input modalities: T1, T1c, T2, FLAIR.
pub const NUM_MODALITIES: usize = 4;
