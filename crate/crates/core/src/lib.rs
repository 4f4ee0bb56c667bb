pub mod autograd;
pub mod corpus;
pub mod edits;
pub mod encoders;
pub mod error;
pub mod explain;
pub mod model;
pub mod parsing;
pub mod protonet;
pub mod synthetic;
pub mod tensor;
pub mod training;

pub use error::{Diagnostic, Error, Result};
