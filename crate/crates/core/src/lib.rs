//! Fixed-size KV caches for segment-level attention: learned convolutional
//! token merging alongside eviction baselines, a small byte-level
//! transformer to host them, and the training and accounting around it.

#![allow(clippy::needless_range_loop)]

pub mod attention;
pub mod cache;
pub mod compressor;
pub mod corpus;
pub mod error;
pub mod exec;
pub mod instrumentation;
pub mod model;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
