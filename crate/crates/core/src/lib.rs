//! Panel-based understanding of 360° indoor panoramas.
//!
//! The crate covers the full pipeline: equirectangular geometry and panel
//! partitioning, a reverse-mode autodiff tensor engine, the panel
//! encoder/transformer/decoder network, training losses and evaluation
//! metrics, a procedural cuboid-room renderer for ground truth, and the
//! training/evaluation harness behind the `panelnet` CLI.

pub mod config;
pub mod erp;
pub mod error;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod panel;
pub mod scene;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Dtype, Element, Tensor};
