//! CPU inference engine and analysis toolkit for DFM-Net, a lightweight
//! RGB-D salient object detection architecture built around depth
//! quality-inspired feature manipulation: a depth quality weight (DQW)
//! gates how much each hierarchy trusts the depth stream, a depth holistic
//! attention map (DHA) focuses it spatially, and a tailored depth backbone
//! (TDB) keeps the depth encoder under a megabyte.
//!
//! The crate provides dense f32 tensors with just enough kernels for the
//! graph, the two-stream encoder and two-stage decoder, a deterministic
//! weight container (DFMW), image I/O with the usual normalization, a
//! boundary-alignment depth quality analyzer, and saliency metrics. The
//! `dfmnet` binary exposes all of it on the command line.

pub mod backbone;
pub mod decoder;
pub mod dqfm;
pub mod error;
pub mod image_io;
pub mod loader;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod quality;
pub mod tensor;
pub mod weights;

pub use error::{Error, Result};
