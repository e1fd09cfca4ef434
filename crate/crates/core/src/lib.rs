pub mod blocks;
pub mod detection;
pub mod encoding;
pub mod energy;
pub mod error;
pub mod gne;
pub mod spiking;
pub mod tensor;
pub mod train;

pub use error::{Error, ErrorClass, Result};
pub use tensor::{Graph, NodeId, Scalar, Tensor};
