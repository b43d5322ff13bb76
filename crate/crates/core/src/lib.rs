//! Adversarial attacks and the deviations they induce in a classifier's
//! intermediate representations.
//!
//! The crate covers a small tensor library with reverse-mode differentiation,
//! a residual convolutional classifier with checkpoint taps, FGSM/BIM/CW-L2
//! attacks, normalized representation distances with kernel density
//! summaries, and the file formats used by the `advdev` command line tool.

pub mod attacks;
pub mod autodiff;
pub mod deviation;
pub mod error;
pub mod io;
pub mod network;
pub mod ops;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
