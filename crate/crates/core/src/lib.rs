//! Prototype-guided synthetic data generation for computational pathology.
//!
//! The crate covers the whole desk-scale flow: cluster patch embeddings into
//! per-cohort prototypes, train a latent autoencoder and a classifier-guided
//! diffusion model over its latents, synthesize balanced per-prototype
//! corpora, and evaluate attention-MIL slide models with the usual metrics
//! and paired significance tests.
//!
//! Every learned component is built on the small reverse-mode autodiff in
//! [`autodiff`] and trained with [`optim::AdamW`].

pub mod autodiff;
pub mod autoencoder;
pub mod checkpoint;
pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod io;
pub mod mil;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod prototypes;
pub mod rng;
pub mod stats;
pub mod tensor;
pub mod toy;

pub use autodiff::{Tape, Var};
pub use checkpoint::Checkpoint;
pub use error::{Error, Result};
pub use io::{EmbeddingCollection, SampleSet};
pub use tensor::Tensor;
