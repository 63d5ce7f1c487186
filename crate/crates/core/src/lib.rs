//! Text-to-audio grounding with weak supervision.
//!
//! A phrase-level model scores every (frame, phrase) pair of a clip. It is
//! trained from clip captions alone by pooling frame scores into clip scores,
//! sampling negative phrases from a shared pool, and optionally distilling
//! frame targets from a frozen teacher.

pub mod blob;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod matrix;
pub mod model;
pub mod pipeline;
pub mod pooling;
pub mod rng;
pub mod sampling;
pub mod selfsup;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use rng::Rng;
