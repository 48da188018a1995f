//! Task-specific feature coding for split inference.
//!
//! The crate quantizes the intermediate features of a layered model with a
//! residual vector quantizer (RVQ), accounts for their raw and entropy-bound
//! bitrates, codes them into a compact bitstream and moves them between a
//! device endpoint and a cloud endpoint.
//!
//! * [`rvq`]: codebooks, residual quantization, k-means initialization and
//!   the VQ training losses.
//! * [`coding`]: codeword histograms, empirical entropy, bitrates, canonical
//!   Huffman codes and the `ACOM` bitstream.
//! * [`model`]: the split layer stack, task losses (CTC, label smoothing,
//!   cross-entropy), MAC accounting, synthetic data and finetuning.
//! * [`pipeline`]: the framed device/cloud wire protocol and sessions.
//! * [`config`]: the run configuration consumed by the command-line tool.

pub mod coding;
pub mod config;
mod error;
mod features;
mod hash;
pub mod model;
pub mod pipeline;
pub mod rvq;
mod scalar;

pub use error::{Error, ErrorClass, Result};
pub use features::FeatureSequence;
pub use hash::fnv1a64;
pub use scalar::Scalar;
