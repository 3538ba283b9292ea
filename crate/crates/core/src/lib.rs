//! Weakly-supervised vision-language pre-training from category labels.

pub mod autograd;
pub mod checkpoint;
pub mod corpus;
pub mod demo;
pub mod error;
pub mod evalkit;
pub mod gradcheck;
pub mod images;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod promptgen;
pub mod rng;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
