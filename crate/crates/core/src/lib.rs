//! Training-free open-vocabulary segmentation with global-local aligned
//! sliding-window attention.
//!
//! The engine consumes precomputed per-window token features (VFM keys and
//! queries, CLIP value tokens, a projection head and text embeddings) and
//! produces a full-resolution label map:
//!
//! 1. [`grid`] tiles the image into overlapping windows.
//! 2. [`attention`] lets each window attend over the tokens of every window,
//!    anchored on proxy queries and normalized per query.
//! 3. [`segmenter`] classifies the resulting tokens against text embeddings,
//!    upsamples and averages the logits across windows, and labels pixels.
//! 4. [`metrics`] scores label maps with mIoU and the boundary error rate.
//!
//! [`tensor`] holds the dense tensor type and the `.glat` container,
//! [`synthetic`] builds bundles with a known answer, and [`cli`] wires it all
//! into the `glaclip` binary. See `examples/` for one runnable program per
//! capability.

pub mod attention;
pub mod cli;
pub mod error;
pub mod grid;
pub mod metrics;
pub mod segmenter;
pub mod synthetic;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::TensorF32;
