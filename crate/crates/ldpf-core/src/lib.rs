//! Latent domain prompt fusion over a frozen vision-language encoder pair.
//!
//! The pipeline discovers latent domains in unlabeled training images
//! (adversarially-trained domain features clustered with k-means, labels
//! stabilized across rounds), learns a shared domain-agnostic soft prompt
//! plus one domain-specific soft prompt per latent domain in two interleaved
//! stages, and at inference fuses per-domain text features weighted by the
//! image's similarity to each latent domain. A selection-oracle analysis
//! bounds what prompt selection could achieve on the same predictions.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod latent;
pub mod math;
pub mod oracle;
pub mod prompts;
pub mod report;
pub mod rng;
pub mod training;

pub use error::{LdpfError, Result};
