//! Speech restoration by parametric re-synthesis.
//!
//! Degraded speech is mapped to self-supervised-style speech features, those features
//! are cleaned by a conditioned network, and a vocoder re-synthesizes a 24 kHz waveform.
//! The crate also manufactures paired training corpora and evaluates restorations.

pub mod audio;
pub mod error;
pub mod nn;
pub mod pipeline;
pub mod tensor_io;

pub use error::{Error, Result};
pub mod cleaner;
pub mod cli;
pub mod degrade;
pub mod features;
pub mod seed;
pub mod vocoder;
