//! Network architecture, forward pass with checkpoint taps, and training.

pub mod arch;
pub mod model;
pub mod train;

pub use arch::{ArchitectureSpec, Checkpoint, LayerKind, LayerSpec};
pub use model::{InputGradient, Model, Objective};
pub use train::{augment, evaluate_accuracy, train, LossKind, TrainConfig, TrainHistory};
