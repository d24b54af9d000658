//! Dense visual correspondence at desk scale.
//!
//! The network estimates a per-pixel flow between an image pair by
//! building a 4D cost volume of feature similarities and refining both
//! the features and the volume with interleaved self- and
//! cross-attention in a coarse-to-fine pyramid. Everything runs on a
//! small reverse-mode tensor core in this crate — no external ML
//! framework — so gradients are checked against finite differences and
//! the heavy 4D kernels against brute-force oracles.
//!
//! Module map:
//! - [`tensor`]: ND arrays, the fixed op set, backward, gradient checks
//! - [`params`]: named parameter registry shared by all modules
//! - [`backbone`]: toy multi-level feature extractor
//! - [`costvol`]: 4D cost volumes, separable 4D conv, 4D resize
//! - [`attention`]: joint feature/cost self-attention, matching
//!   cross-attention, block wiring
//! - [`pyramid`]: coarse-to-fine orchestration and checkpoints
//! - [`flowhead`]: soft-argmax flow, AEPE, PCK, warping
//! - [`harness`]: synthetic data, AdamW, training/eval loops, file I/O

pub mod attention;
pub mod backbone;
pub mod check;
pub mod costvol;
pub mod error;
pub mod flowhead;
pub mod harness;
pub mod params;
pub mod pyramid;
pub mod tensor;

pub use error::{Error, Result};
