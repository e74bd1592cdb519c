//! Core library for a spiking convolutional classifier with pluggable
//! memory readouts (attractor cleanup and a gated recurrent head).
//!
//! The crate is organised bottom-up:
//!
//! - [`autodiff`] — a small define-by-run reverse-mode tape over `f64`
//!   tensors, including the surrogate-gradient spike op.
//! - [`snn`] — leaky integrate-and-fire dynamics and the convolutional
//!   spiking encoder.
//! - [`scl`] — supervised contrastive loss on normalised rate features,
//!   plus the rate cross-entropy term.
//! - [`hopfield`] — binary attractor memory used as a feature-cleanup
//!   layer with straight-through gradients.
//! - [`hgrn`] — a two-gate recurrent head integrating per-timestep
//!   features into a single read-out state.
//! - [`cluster`] — silhouette scoring of the learned feature space.
//! - [`energy`] — synaptic-operation counting and energy estimates.
//! - [`data`] — event-camera record parsing, time binning, augmentation
//!   and a synthetic event-stream generator.
//! - [`train`] — optimiser, schedules, model wiring and the run loop.

pub mod autodiff;
pub mod cluster;
pub mod data;
pub mod energy;
pub mod error;
pub mod hgrn;
pub mod hopfield;
pub mod scl;
pub mod snn;
pub mod train;

pub use autodiff::{Arr, SurrogateSpec, Value};
pub use error::{Error, Result};
