//! Minimal neural-network toolkit: autodiff tape, parameter storage,
//! layers and optimizers.

pub mod layers;
pub mod optim;
pub mod params;
pub mod tape;

pub use layers::{Conv2d, LayerNorm, Linear};
pub use optim::{Adam, Sgd};
pub use params::ParamSet;
pub use tape::{composite_ray, Gradients, Tape, Tensor, Var};
