//! The video transformer: patch embedding, encoder, reconstruction decoder
//! and the classification / contrastive heads.

mod config;
mod net;
mod params;

pub use config::{LongPreset, Task, TurboConfig};
pub use net::{check_inference_ratio, normalize_row, pmae_targets, TurboNet, VisualOutput};
pub use params::{trunc_normal, ParamId, ParamStore, Session};
