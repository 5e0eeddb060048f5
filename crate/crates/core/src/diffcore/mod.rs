//! Dense tensors with reverse-mode gradients.
//!
//! A [`Tape`] records one forward pass; parameters live in a
//! [`ParamStore`] and are bound onto each fresh tape. All sequence tensors
//! are `[frames, channels]`.

mod batch;
mod gradcheck;
mod layers;
mod optim;
mod params;
mod tape;
mod tensor;

pub use batch::{batch_gradients, batch_gradients_with};
pub use gradcheck::{check_params, finite_difference_check, finite_difference_check_with_step, relative_error, FdReport, FD_STEP};
pub use layers::Conv1dLayer;
pub use optim::Adam;
pub use params::{Bound, ParamId, ParamStore, Parameter};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
