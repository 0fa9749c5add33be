//! gendba: a goal-conditioned transformer agent that learns spatial
//! scheduling policies (index slice -> core assignments) for a sliced
//! main-memory index on simulated NUMA servers, evaluated closed-loop
//! against OS scheduling baselines.

pub mod baselines;
pub mod error;
pub mod experience;
pub mod infer;
pub mod manifest;
pub mod model;
pub mod plot;
pub mod rng;
pub mod sim;
pub mod tensor;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
