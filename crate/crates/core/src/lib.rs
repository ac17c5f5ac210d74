//! Segment-retrieval stack for long feature streams.
//!
//! A long stream of per-frame token grids is split into segments
//! ([`segmenter`]), each segment is resampled to a fixed latent grid
//! ([`connector`]), a cross-attention router scores every segment against a
//! text query ([`router`]), and the top-scoring segments plus a global summary
//! feed a small readout head ([`focusfast`]). [`trainer`] fits the whole stack
//! and [`harness`] runs needle-retrieval and ablation evaluations.

mod error;
mod layers;

pub mod connector;
pub mod focusfast;
pub mod harness;
pub mod ingest;
pub mod model;
pub mod numerics;
pub mod router;
pub mod segmenter;
pub mod supervision;
pub mod trainer;

pub use error::{Error, ErrorKind};
