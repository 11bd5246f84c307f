pub mod checkpoint;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod filter;
pub mod harness;
pub mod index;
pub(crate) mod linalg;
pub mod numerics;
pub mod optim;
pub mod packaging;
pub mod reader;
pub mod retriever;
pub mod rng;
pub mod unification;
pub(crate) mod wire;

pub use error::{Error, FormatError, Result};
