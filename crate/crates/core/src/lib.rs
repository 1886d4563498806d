pub mod autograd;
pub mod codec;
pub mod commands;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod generator;
pub mod model;
pub mod sru;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
pub use model::SruNer;
