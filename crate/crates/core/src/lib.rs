//! Structured flow generative models for cross-lingual syntactic transfer.
//!
//! A structured prior over syntax (a Markov chain over tags, or a dependency
//! model with valence over trees) generates latent embeddings through
//! per-category Gaussians; an invertible projection maps those latents to
//! pre-trained word embeddings. The crate covers exact inference for both
//! priors, hand-derived gradients for every objective, supervised source
//! training, anchored unsupervised fine-tuning on a target language, and
//! evaluation.

pub mod checkpoint;
pub mod cli;
pub mod corpus;
pub mod dmv;
pub mod emission;
pub mod error;
pub mod eval;
pub mod flow;
pub mod markov;
pub mod math;
pub mod model;
pub mod optim;
pub mod params;
pub mod transfer;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use corpus::{ObservedSequence, Sentence};
pub use error::{CheckpointError, Error, Result};
pub use model::{ModelParams, ModelSpec, Objective, Prior, Task};
pub use params::{Group, Tensors};
pub use transfer::TransferConfig;
