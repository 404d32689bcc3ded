//! Two-stage question generation: key-phrase extraction followed by a
//! pointer-softmax question generator.

pub mod corpus;
pub mod error;
pub mod gradcheck;
pub mod keyphrase;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod qgen;

pub use error::{Error, Result};
