//! Core library for the CGTrack visual tracker.
//!
//! Everything is built on a small dense-array kernel ([`tensor`]) and a
//! reverse-mode autodiff tape ([`tape`]). On top of those sit the LeViT-style
//! one-stream backbone ([`backbone`]), the hierarchical feature cascade
//! ([`hfc`]), the lightweight gated center head ([`lgch`]), the training
//! objective ([`objective`]), the one-pass-evaluation metrics toolkit
//! ([`metrics`]) and a static cost profiler ([`profiler`]). The remaining
//! modules provide the glue a desk-scale experiment needs: parameter storage
//! and checkpoints, synthetic sequences, the tracking loop, the optimizer and
//! finite-difference gradient checking.
//!
//! Arrays are generic over [`tensor::Elem`]; `f32` is the working precision
//! and `f64` exists for verification (gradient checks, oracles).

pub mod backbone;
pub mod boxes;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod hfc;
pub mod init;
pub mod layers;
pub mod lgch;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod params;
pub mod profiler;
pub mod reference;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod track;
pub mod train;

pub use boxes::BBox;
pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::{Elem, NdArray};
