pub mod corpus;
pub mod decode;
pub mod error;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod synth;
pub mod tokenizer;

pub use error::{Error, Result};
