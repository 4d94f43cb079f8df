//! Early-stage cross-channel attention fusion for RGB+IR small-object
//! detection, with a conv-augmented shifted-window backbone, an anchor-based
//! detection head, training, evaluation and synthetic data.

pub mod backbone;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod fusion;
pub mod gradsuite;
pub mod head;
pub mod model;
pub mod nn;
pub mod numerics;
pub mod train;

pub use error::{Error, Result};
