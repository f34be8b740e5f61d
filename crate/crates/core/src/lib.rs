//! Class-anchor alignment head for paired video/text embeddings.
//!
//! Video and caption features are each turned into a probability
//! distribution over a fixed set of class anchors; a small variational
//! autoencoder learns to reconstruct the caption distribution from the video
//! distribution, and that objective is trained jointly with a contrastive
//! retrieval loss. Everything runs on a dense `f64` tape with reverse-mode
//! gradients so each formula can be checked against finite differences.

pub mod ablation;
pub mod anchors;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod cvae;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod objective;
pub mod optim;
pub mod retrieval;
pub mod rng;
pub mod store;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{CalmError, Result};
pub use tape::{Tape, Var};
pub use tensor::{ParamId, ParamStore, Tensor};
