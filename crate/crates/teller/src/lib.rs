//! Streaming audio-driven motion generation.
//!
//! Two trainable stages plus a real-time pipeline:
//!
//! 1. A residual vector quantizer ([`rvq`]) maps 4-frame windows of 25×3
//!    motion latents to 32 discrete tokens and back, and an audio-conditioned
//!    autoregressive transformer ([`ar`]) predicts those tokens two at a time
//!    from 200ms chunk embeddings ([`audio`]).
//! 2. A single-pass temporal self-attention refiner ([`etm`]) cleans up
//!    feature volumes under a landmark-driven region mask.
//!
//! The [`pipeline`] module chains everything per 200ms chunk with explicit
//! latency accounting against the real-time budget, [`synth`] provides a
//! procedural corpus with known ground truth, and [`train`]/[`nn`] hold the
//! shared optimizer and autodiff machinery. See the crate examples for
//! runnable walkthroughs of each capability, or the `teller` binary for the
//! command-line surface.

pub mod ar;
pub mod audio;
pub mod cli;
pub mod error;
pub mod etm;
pub mod io;
pub mod motion;
pub mod nn;
pub mod pipeline;
pub mod rvq;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
