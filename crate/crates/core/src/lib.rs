//! Gradient-based meta-learning with a task-specific key-value memory and a
//! locally adapted value predictor.
//!
//! * [`numgrad`]: tensors and reverse-mode differentiation, including
//!   gradients through a recorded inner update.
//! * [`nets`]: frozen key network, base model heads and value predictor.
//! * [`memory`]: fixed-capacity per-task memory with diversity-based writes.
//! * [`imitation`]: global training and per-query local adaptation of the
//!   value predictor.
//! * [`metalearn`]: MAML, the memory-imitation training loop, meta-testing,
//!   baselines and ablations.
//! * [`tasks`]: synthetic episodic task families and the episode file format.

pub mod checkpoint;
pub mod imitation;
pub mod memory;
pub mod metalearn;
pub mod nets;
pub mod numgrad;
pub mod tasks;

pub use numgrad::{DiffOrder, GradError, ParamSet, Tensor};
