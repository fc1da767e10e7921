//! Multi-task speech processing built from shared, composable modules.

pub mod checkpoint;
pub mod config;
pub mod ctc;
pub mod data;
pub mod error;
pub mod features;
pub mod evaluation;
pub mod graph;
pub mod infer;
pub mod matrix;
pub mod modules;
pub mod mtl;
pub mod nn;
pub mod params;
pub mod tasks;
pub mod train;

pub use error::{Error, Result};
