//! Remote-photoplethysmography (rPPG) toolkit built around a small
//! reverse-mode autodiff engine.
//!
//! The crate is organised as a stack: [`diffcore`] provides dense tensors and
//! a gradient tape; [`losses`] builds differentiable alignment losses on top
//! of it; [`models`] defines temporal-shift student networks and a 3-D
//! convolutional teacher trained by [`distill`]; [`signal`] turns predicted
//! pulse traces into heart-rate estimates and error metrics; [`dataio`]
//! covers synthetic data generation, preprocessing, and the on-disk formats.

pub mod dataio;
pub mod diffcore;
pub mod distill;
pub mod error;
pub mod losses;
pub mod models;
pub mod signal;

pub use error::{Error, FormatError, Result};
