//! Gated fusion of two feature views of the same sequence, trained with
//! gradient-conflict-aware gate targets and multi-stage branch dropout.
//!
//! The crate is organized bottom-up:
//!
//! - [`autodiff`]: a small reverse-mode tape over [`Tensor`]s.
//! - [`model`]: a residual encoder–decoder run position-wise.
//! - [`gsgn`]: per-view gates, Hadamard fusion, the concat baseline and
//!   the gate loss.
//! - [`gradprobe`]: per-view gradients, conflict statistics and the
//!   deconfliction projection that defines the gate target.
//! - [`branch`]: epoch-staged sampling among fbank, unit and fusion inputs.
//! - [`datagen`]: the synthetic two-view corpus, k-means quantizer and
//!   noise ablations.
//! - [`trainer`]: Adam with warmup, the training loop, checkpoints.
//! - [`config`] and [`report`]: the run-config file and CSV/SVG outputs
//!   used by the `mvfuse` command-line tool.

pub mod autodiff;
pub mod branch;
pub mod config;
pub mod datagen;
pub mod error;
pub mod gradprobe;
pub mod gsgn;
pub mod model;
pub mod params;
pub mod report;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
