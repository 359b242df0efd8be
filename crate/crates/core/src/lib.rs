//! Logit-separability based organization of in-context learning
//! demonstrations: class-word pool refinement, demonstration scoring and
//! ordering, and greedy multi-word label construction.

pub mod backend;
pub mod corpus;
pub mod error;
pub mod evaluator;
pub mod labeler;
pub mod pipeline;
pub mod planted;
pub mod refiner;
pub mod sampler;

pub use error::{Error, ErrorKind, Result};
