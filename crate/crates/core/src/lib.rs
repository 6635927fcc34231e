//! Bifurcated-backbone network for RGB-D salient object detection.
//!
//! The crate is organised the way the data flows:
//!
//! - [`data_io`] loads `RGB/ depth/ GT/` datasets, materialises splits and
//!   reads/writes saliency maps; [`synth`] procedurally generates RGB-D corpora
//!   with controllable distribution shift.
//! - [`backbone`] extracts five-level feature pyramids from both modalities
//!   (plus the depth adapter used by the shared-weight variant), [`dem`] fuses
//!   them with channel/spatial attention and [`decoder`] turns a group of three
//!   levels into a saliency map.
//! - [`model`] wires the teacher/student cascade together and hosts the
//!   ablation-variant factory; [`trainer`] runs the optimisation loop.
//! - [`metrics`], [`postproc`] and [`bench`] evaluate, binarise and compare
//!   trained models.
//!
//! Tensors follow the NCHW layout throughout.

pub mod backbone;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod data_io;
pub mod decoder;
pub mod dem;
mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod postproc;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
