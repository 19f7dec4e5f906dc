use std::fmt::Write as _;

use crate::config::TrainConfig;
use crate::envmap::EnvironmentMap;
use crate::error::Result;
use crate::model::Model;
use crate::trainer::{derive_seed, fit_latent};

use super::latent::{reconstruction_consistency, uniqueness, ImageSpace, TrainedField};
use super::metrics::{image_metrics, ImageMetrics, Psnr};

const STREAM_UNIQUENESS: u64 = 11;
const STREAM_CONSISTENCY: u64 = 12;
const STREAM_FIT: u64 = 13;

/// Log-radiance reconstruction of `map`: the encoder mean when the model
/// has an encoder, otherwise a latent fit.
pub fn reconstruct(
    model: &Model<f32>,
    map: &EnvironmentMap,
    config: &TrainConfig,
    seed: u64,
) -> Result<ndarray::Array3<f64>> {
    let z = if model.has_encoder() {
        crate::encoder::LatentCode(model.encode(map)?.mu)
    } else {
        fit_latent(model, map, config, seed)?.code
    };
    Ok(model.render(&z, map.height(), map.width())?.mapv(|v| v as f64))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    /// Number of target images for the uniqueness diagnostic; 0 disables it.
    pub uniqueness_targets: usize,
    /// Latent pairs for reconstruction consistency; 0 disables it.
    pub consistency_pairs: usize,
    pub space: ImageSpace,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            uniqueness_targets: 0,
            consistency_pairs: 0,
            space: ImageSpace::Ldr,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub seed: u64,
    pub images: Vec<ImageMetrics>,
    pub uniqueness: Option<f64>,
    pub reconstruction_consistency: Option<f64>,
}

fn mean_psnr(values: impl Iterator<Item = Psnr>) -> Psnr {
    let finite: Vec<f64> = values.filter_map(Psnr::db).collect();
    if finite.is_empty() {
        Psnr::Identical
    } else {
        Psnr::Db(finite.iter().sum::<f64>() / finite.len() as f64)
    }
}

impl EvalReport {
    /// Mean over images with finite PSNR; `Identical` only if every image is.
    pub fn psnr_ldr(&self) -> Psnr {
        mean_psnr(self.images.iter().map(|m| m.psnr_ldr))
    }

    pub fn psnr_hdr(&self) -> Psnr {
        mean_psnr(self.images.iter().map(|m| m.psnr_hdr))
    }

    pub fn ssim(&self) -> f64 {
        self.images.iter().map(|m| m.ssim).sum::<f64>() / self.images.len().max(1) as f64
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "images = {}", self.images.len());
        let _ = writeln!(s, "psnr_ldr = {}", self.psnr_ldr());
        let _ = writeln!(s, "ssim = {}", self.ssim());
        let _ = writeln!(s, "psnr_hdr = {}", self.psnr_hdr());
        if let Some(u) = self.uniqueness {
            let _ = writeln!(s, "uniqueness = {u}");
        }
        if let Some(c) = self.reconstruction_consistency {
            let _ = writeln!(s, "reconstruction_consistency = {c}");
        }
        for (i, m) in self.images.iter().enumerate() {
            let _ = writeln!(
                s,
                "image.{i:05} = psnr_ldr {} ssim {} psnr_hdr {}",
                m.psnr_ldr, m.ssim, m.psnr_hdr
            );
        }
        s
    }
}

/// Reconstruction metrics on `maps` plus the optional latent diagnostics.
pub fn evaluate(
    model: &Model<f32>,
    maps: &[EnvironmentMap],
    config: &TrainConfig,
    seed: u64,
    options: &EvalOptions,
) -> Result<EvalReport> {
    let mut images = Vec::with_capacity(maps.len());
    for (i, map) in maps.iter().enumerate() {
        let pred = reconstruct(model, map, config, derive_seed(seed, STREAM_FIT, i as u64))?;
        let gt = map.log_data().mapv(|v| v as f64);
        images.push(image_metrics(&pred, &gt)?);
    }
    let uniq = if options.uniqueness_targets > 0 {
        let n = options.uniqueness_targets.min(maps.len());
        let mut total = 0.0;
        for (t, map) in maps.iter().take(n).enumerate() {
            let a = derive_seed(seed, STREAM_UNIQUENESS, 2 * t as u64);
            let b = derive_seed(seed, STREAM_UNIQUENESS, 2 * t as u64 + 1);
            total += uniqueness(model, map, a, b, config, options.space)?.mse;
        }
        Some(total / n as f64)
    } else {
        None
    };
    let consistency = if options.consistency_pairs > 0 {
        let (h, w) = (model.config().height, model.config().width);
        let field = TrainedField {
            model,
            height: h,
            width: w,
        };
        Some(reconstruction_consistency(
            &field,
            options.consistency_pairs,
            derive_seed(seed, STREAM_CONSISTENCY, 0),
            options.space,
        )?)
    } else {
        None
    };
    Ok(EvalReport {
        seed,
        images,
        uniqueness: uniq,
        reconstruction_consistency: consistency,
    })
}
