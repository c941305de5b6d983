//! Dialogue relation extraction as relation-name-conditioned binary
//! classification with a trigger-span head.

pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod evaluate;
pub mod inference;
pub mod model;
pub mod optim;
pub mod reformulate;
pub mod relation_head;
pub mod synthetic;
pub mod text;
pub mod tokenizer;
pub mod trainer;
pub mod trigger_head;

pub use error::{Error, Result};
