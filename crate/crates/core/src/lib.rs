//! Compressed neural-field feature grids with learned vector quantization.
//!
//! A model is a multiresolution grid of feature vectors decoded by a small
//! shared MLP. In quantized form every grid vertex stores a `b`-bit index
//! into a per-level codebook; indices are learned end to end through a
//! straight-through softmax and baked to integers for storage. The stored
//! bitstream is ordered coarse to fine, so any prefix of whole levels
//! decodes to a usable lower level of detail.

pub mod baselines;
pub mod cli;
pub mod codec;
pub mod data;
pub mod diffcore;
pub mod eval;
pub mod field;
pub mod grid;
pub mod oracle;
pub mod raster;
pub mod train;
pub mod vq;
