pub mod attacks;
pub mod diffusion;
pub mod error;
pub mod guidance;
pub mod harness;
pub mod purifier;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{Graph, Tensor, Var};
