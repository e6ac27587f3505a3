//! Cluster-class cross-entropy (CCE+) training for weakly labeled bags.
//!
//! The pipeline synthesizes bags of MNIST digits whose label only a majority of members
//! share, learns unsupervised latent features with a VAE, clusters the latents with
//! K-means, labels every cluster by majority vote of its members' bag labels, and trains a
//! CNN on a mix of the bag-label and cluster-class cross-entropies.

pub mod clustering;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod models;
pub mod pipeline;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
