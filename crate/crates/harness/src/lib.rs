//! Synthetic-pair harness around `winmatch-core`: pair generation with known
//! homographies, tiny-scale training, robust homography fitting, metrics,
//! rendering and the self-check suites behind the `winmatch` binary.

pub mod checks;
pub mod error;
pub mod eval;
pub mod homography;
pub mod image_io;
pub mod render;
pub mod synth;
pub mod train;

pub use error::{HarnessError, Result};
