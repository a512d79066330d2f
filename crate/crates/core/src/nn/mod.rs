//! A small reverse-mode toolkit: tensors, parameter storage, dense and
//! convolutional layers, pointwise ops, Adam, finite-difference checking
//! and checkpoint files. Every layer exposes a forward function and a
//! backward function that accumulates parameter gradients and returns the
//! input gradient; models chain them by hand.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod ops;
pub mod params;
pub mod tensor;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{load_checkpoint, read_manifest, save_checkpoint};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use layers::{Conv1d, Dense};
pub use params::{Gradients, Init, ParamId, ParamStore};
pub use tensor::Tensor;
