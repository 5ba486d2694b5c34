//! Joint per-pixel height and semantic-class prediction from single aerial
//! images: a shared-trunk encoder-decoder with two task heads, loss-balancing
//! strategies for the joint objective, Gaussian-blended tiled inference, and
//! MC-dropout uncertainty maps. Everything runs on the CPU in f32 and is
//! bitwise deterministic for a fixed seed.

pub mod error;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor};
