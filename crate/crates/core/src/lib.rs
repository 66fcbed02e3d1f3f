//! Unsupervised separation of pack-level *domain* and image-level *content*
//! factors with a two-latent variational autoencoder.
//!
//! A pack is a set of images known to share one domain. The model encodes a
//! pack into a single domain posterior (a mean-pooled set encoder), every
//! image into a content posterior conditioned on the domain sample, and
//! decodes with a spatial-broadcast generator. An adversarial set
//! discriminator on content codes (the domain-confusion loss) pushes content
//! codes to be distributed identically across packs.
//!
//! Modules:
//! - [`pack_data`]: datasets, pack sampling, on-disk format
//! - [`silhouettes`]: procedural voxel-shape benchmark with ground truth
//! - [`model`]: encoders, decoder, Gaussian posteriors
//! - [`dc_loss`]: the set discriminator and domain-confusion loss
//! - [`training`]: objective, optimisation loop, metrics
//! - [`checkpoint`]: binary checkpoint container
//! - [`evaluation`]: fusion, grids, linear probes
//! - [`config`] and [`cli`]: run configuration and command implementations

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dc_loss;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod nn;
pub mod optim;
pub mod pack_data;
pub mod rng;
pub mod silhouettes;
pub mod training;

pub use error::{Error, Result};
