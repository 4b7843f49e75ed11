//! Streaming single-object tracker with temporally adaptive convolutions and
//! an attention-based temporal memory, plus the tooling around it.

pub mod archive;
pub mod backbone;
pub mod bbox;
pub mod bench;
pub mod config;
pub mod error;
pub mod eval;
pub mod image;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod run;
pub mod selftest;
pub mod synth;
pub mod transformer;
mod wire;

pub use error::{Error, Result};
