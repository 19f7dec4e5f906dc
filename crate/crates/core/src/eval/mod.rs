//! Reconstruction metrics, latent-space diagnostics, and equivariance
//! checks.

pub mod equivariance;
mod latent;
mod metrics;
mod report;

pub use equivariance::{equivariance_suite, EquivarianceCheck};
pub use latent::{
    average_ranks, build_field, interpolate, reconstruction_consistency, spearman, uniqueness, uniqueness_from_codes,
    ImageSpace, LatentField, LinearToyField, TrainedField, Uniqueness, LATENT_FIELDS, MIN_PAIRS,
};
pub use metrics::{
    align_log_scale, image_metrics, ldr_from_log, mse, psnr, sin_weights, ssim, tone_map, ImageMetrics, Psnr,
};
pub use report::{evaluate, reconstruct, EvalOptions, EvalReport};
