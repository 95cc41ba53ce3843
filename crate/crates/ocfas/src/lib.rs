//! One-class face anti-spoofing: prompt-grammar supervision, pseudo spoof
//! cue maps, contrastive / regression objectives, a two-stage alternating
//! trainer, spoof-cue-map scoring, and the evaluation protocol suite.

pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod prompt;
pub mod objectives;
pub mod scm;
pub mod scoring;
pub mod synthetic;
pub mod train;

pub use error::{Error, Result};
