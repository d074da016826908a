//! Anomalous-sound-detection toolkit for machine condition monitoring.
//!
//! The pipeline turns single-channel 16 kHz machine recordings into log-mel
//! context frames, trains one of three detector families on normal sounds
//! only, and evaluates anomaly scores with exact pairwise AUC / partial AUC:
//!
//! - [`baseline_ae`]: one autoencoder per machine type/ID, scored by
//!   reconstruction error.
//! - [`classifier_asd`]: a machine-ID classifier over pooled normals, scored
//!   by the negative log-probability of the claimed ID.
//! - [`conditioned_ae`]: one autoencoder per machine type conditioned on the
//!   machine ID, in a constant-target and an ID-regression variant.
//!
//! [`dataset`] handles the on-disk corpus layout and ships a deterministic
//! synthetic-corpus generator so the whole pipeline can be exercised at desk
//! scale. The `asdkit` binary exposes everything as batch subcommands.

pub mod audio_io;
pub mod baseline_ae;
pub mod classifier_asd;
pub mod cli;
pub mod conditioned_ae;
pub mod config;
pub mod dataset;
pub mod features;
pub mod manifest;
pub mod metrics;
pub mod nn;
pub mod pipeline;

pub use audio_io::AudioClip;
pub use dataset::MachineKey;
