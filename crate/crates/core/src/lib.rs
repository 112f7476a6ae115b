//! Knowledge-distillation information sharing between manufacturing units.
//!
//! A teacher classifier is trained on a data-rich unit's windowed sensor
//! streams; students on data-poor units are trained against a mix of their
//! own hard labels and the teacher's temperature-softened outputs.

pub mod cli;
pub mod config;
pub mod data;
pub mod distillation;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod network;
pub mod numerics;
pub mod orchestrator;
pub mod parallel;
pub mod synthesizer;

pub use error::{KdisError, Result};
