//! Camera-adaptive color constancy framed as few-shot regression over
//! camera × color-temperature tasks.
//!
//! The pipeline: [`synthcam`] renders multi-camera datasets (or real data is
//! ingested through [`dataio`]); [`tasks`] groups each camera's images by
//! correlated color temperature; [`meta`] trains MAML-family learners on top
//! of the small differentiable network in [`nn`]; [`eval`] runs the K-shot
//! multi-draw protocol and summarises angular errors.

pub mod colorsci;
pub mod config;
pub mod dataio;
pub mod eval;
pub mod error;
pub mod image;
pub mod meta;
pub mod nn;

pub use error::{Error, Result};
pub mod seed;
pub mod svg;
pub mod synthcam;
pub mod tasks;
