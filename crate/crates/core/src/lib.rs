pub mod error;
pub mod graph;
pub mod layers;
pub mod data;
pub mod encdec;
pub mod models;
pub mod search;
pub mod training;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Element, Shape, Tensor};
