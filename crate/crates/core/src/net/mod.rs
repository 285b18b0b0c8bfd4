//! Dense `[channels, time]` kernels, a reverse-mode tape and optimisation.

mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod kernels;
mod param;
mod tape;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::Checkpoint;
pub use kernels::{Dilation, GatherIndex, NO_SOURCE};
pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{previous_tokens, Tape, Var, NO_TOKEN};
pub use tensor::{Real, Tensor};
