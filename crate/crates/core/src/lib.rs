//! End-to-end personalized BCI pipeline at desk scale.
//!
//! The crate decodes multichannel EEG epochs two ways — which enrolled user
//! produced the signal, and which imagery class they performed — and turns
//! the pair into a preference-conditioned action. Around those models sit
//! the pieces a reproducible experiment needs: a bit-exact epoch file
//! format, band-pass preprocessing, a seeded synthetic dataset generator,
//! split/cross-validation planning, a deterministic training loop, and
//! table-style report emission.
//!
//! Modules follow the pipeline order:
//!
//! - [`data`]: domain types, the EEGD epoch file, dataset manifests.
//! - [`signal`]: Butterworth band-pass design, zero-phase filtering,
//!   amplitude rescaling, imagery-window extraction.
//! - [`synth`]: seeded synthetic EEG with subject signatures and
//!   class-specific oscillatory bursts.
//! - [`decoder`]: the shallow convolutional decoder for both tasks.
//! - [`train`]: splits, five-fold cross-validation, training, metrics,
//!   experiment runners.
//! - [`dispatch`]: user identification + intent classification fused into a
//!   personalized API action.

pub mod data;
pub mod decoder;
pub mod dispatch;
pub mod signal;
pub mod synth;
pub mod train;

pub use pbci_nn as nn;
