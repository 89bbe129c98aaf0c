//! Desk-scale volumetric single-image super-resolution.
//!
//! The crate builds a densely connected 3-d convolutional generator, a
//! k-space truncation degradation simulator for making LR/HR training pairs,
//! WGAN-GP adversarial machinery, patch-based tiled inference, and the image
//! quality metrics needed to evaluate all of it. Everything runs on a
//! from-scratch reverse-mode autodiff engine in [`tensor`].
//!
//! The `examples/` directory demonstrates each capability end to end; the
//! `volsr` binary exposes the same flows as subcommands.

pub mod adversary;
pub mod degrade;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod patchwork;
pub mod phantom;
pub mod tensor;
pub mod volume;

pub use error::{Error, Result};
