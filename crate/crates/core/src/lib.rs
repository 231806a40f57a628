//! Top-k window attention and a coarse-to-fine (window, patch, pixel)
//! feature matcher, built on a small dense tensor kernel with reverse-mode
//! differentiation.

pub mod attention;
pub mod config;
pub mod error;
pub mod feature_map;
pub mod loss;
pub mod matcher;
pub mod param;
pub mod reference;
pub mod stem;
pub mod tensor;

pub use error::{Error, Result};
pub use feature_map::FeatureMap;
pub use param::Parameterized;
pub use tensor::{no_grad, Tensor};
