//! Rotation-equivariant variational autoencoder for spherical HDR
//! illumination.
//!
//! Encoder: a Vector Neuron vision transformer over vertical-stripe patches
//! of an equirectangular map, made SO(2)-equivariant about the up axis by
//! SO(2)-equivariant fully connected projections. Decoder: a conditional
//! neural field that sees the latent code and query direction only through
//! rotation-invariant encodings, so rotating the code rotates the sky.

#![cfg_attr(test, allow(clippy::needless_range_loop, clippy::type_complexity))]

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod decoder;
pub mod encoder;
pub mod envio;
pub mod envmap;
mod error;
pub mod eval;
pub mod layers;
pub mod losses;
pub mod model;
pub mod optim;
pub mod params;
pub mod sphere;
pub mod trainer;

pub use envmap::{EnvMapError, EnvironmentMap};
pub use error::{Error, Result};
