//! Token-dropout training for video transformers.
//!
//! The encoder sees only a random subset of spatio-temporal patch tokens, a
//! light decoder reconstructs a (possibly smaller) subset of the hidden ones,
//! and the reconstruction loss is trained jointly with a downstream
//! cross-entropy or contrastive loss.

pub mod cost;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod model;
pub mod objectives;
pub mod partition;
pub mod patch;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Result, TurboError};
pub use model::{Task, TurboConfig, TurboNet};
pub use tensor::{Graph, OpKind, Real, Tensor, Var};
