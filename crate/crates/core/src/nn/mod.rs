//! Minimal CPU neural-network toolkit: convolutions, dense layers, batch
//! normalization, activations and Adam, each with a hand-written backward pass.

mod adam;
pub mod conv;
mod layers;

pub use adam::{Adam, AdamConfig};
pub use conv::ConvGeometry;
pub(crate) use layers::he_uniform;
pub use layers::{Activation, BatchNorm, Conv2d, ConvTranspose2d, Linear, Param};
