//! Outlier-robust semi-supervised classification for spectra.
//!
//! The pipeline: a Kohonen self-organizing map with a hybrid
//! Mahalanobis/spectral-angle distance feeds trainable sigmoid memberships
//! into a dual-path semi-supervised GAN discriminator, evaluated with a
//! two-stage reject/classify protocol.
//!
//! Modules follow the pipeline order:
//!
//! - [`data`]: spectra, labels, datasets, CSV I/O, standardization
//! - [`som`]: SOM training, per-node covariances, hybrid distance
//! - [`membership`]: trainable sigmoids turning distances into memberships
//! - [`nn`]: dense/weight-norm/batch-norm layers, Adam, gradient checking
//! - [`ssgan`]: generator, dual-path discriminator, training loop
//! - [`eval`]: reject/classify decisions, ROC/AUC, reliability, trial CIs
//! - [`synth`]: synthetic scene generator and the experiment sampling protocol
//! - [`experiment`]: end-to-end trial driver used by the CLI and tests

pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod membership;
pub mod nn;
pub mod seed;
pub mod som;
pub mod ssgan;
pub mod synth;

pub use data::{Dataset, Label, Spectrum, Standardizer};
pub use error::{Error, Result};
