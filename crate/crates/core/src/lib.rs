//! Hard-negative phrase mining for context-aware transducer speech recognition.
//!
//! The crate contains a character-level phrase encoder, a random-projection
//! forest for inner-product search over phrase embeddings, the training-time
//! sampler that mixes nearest-neighbour negatives into batch-shared context
//! lists, a miniature biasing transducer, and the training / evaluation /
//! sweep harness that ties them together.

pub mod ann;
pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod context_encoder;
pub mod corpus;
pub mod error;
pub mod exec;
pub mod inventory;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod rnnt;
pub mod sampler;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
