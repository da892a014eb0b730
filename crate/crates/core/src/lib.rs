//! Hierarchical vector quantization for unsupervised temporal action
//! segmentation: a temporal convolutional autoencoder whose latent frames are
//! clustered by a two- (or three-) level codebook, an ordered decoding step
//! that turns soft cluster assignments into segmentations, and the evaluation
//! protocol (Hungarian matching, MoF, segment F1 and a segment-length
//! Jensen-Shannon distance).

pub mod error;
pub mod hvq;
pub mod metrics;
pub mod numerics;
pub mod pipeline;
pub mod tcn;
pub mod training;
pub mod data;
pub mod decode;

pub use error::{HvqError, Result};
