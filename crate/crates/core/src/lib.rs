//! Two-stream patch classification of speckled single-channel radar images:
//! a lightweight convolutional encoder for spatial context and a covariance
//! descriptor of Gabor-domain statistics, joined by a small fusion network.

pub mod dscen;
pub mod fusion;
pub mod gabor;
pub mod gradsuite;
pub mod linalg;
pub mod nsjsm;
pub mod pipeline;
pub mod stats;
pub mod train;
pub mod workflow;
