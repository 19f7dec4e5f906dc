#![allow(dead_code)]

use eqillum::autodiff::{grad_check_inputs, GradCheckOptions, Tape};
use eqillum::config::ModelConfig;
use eqillum::encoder::standard_noise;
use eqillum::envio::{render_skies, sample_skies};
use eqillum::model::Model;
use eqillum::params::Bound;
use eqillum::trainer::vae_loss;
use eqillum::EnvironmentMap;
use ndarray::ArrayD;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A small but complete model for fast tests.
pub fn small_config(height: usize, width: usize, patches: usize, encoder: &str) -> ModelConfig {
    ModelConfig {
        height,
        width,
        patches,
        channels: 4,
        blocks: 1,
        latent_dim: 6,
        encoder: encoder.into(),
        decoder_embed: 8,
        decoder_attention: 8,
        decoder_hidden: 16,
        decoder_res_blocks: 1,
        frame_hidden: 4,
    }
}

pub fn skies(n: usize, height: usize, width: usize, seed: u64) -> Vec<EnvironmentMap> {
    render_skies(&sample_skies(n, seed), height, width)
}

pub fn grad_error(e: eqillum::Error) -> eqillum::autodiff::GradError {
    match e {
        eqillum::Error::Grad(g) => g,
        other => panic!("{other}"),
    }
}

/// Max relative finite-difference error of the full VAE loss with respect
/// to every parameter tensor (at most `coords` entries each) in 64-bit.
/// Gradients smaller than `min_scale` are compared in absolute terms
/// against it.
pub fn full_loss_gradient_error(
    cfg: &ModelConfig,
    map: &EnvironmentMap,
    coords: usize,
    seed: u64,
    min_scale: f64,
) -> f64 {
    let model = Model::<f64>::vae(cfg, seed).unwrap();
    let input = model.encoder_input(map).unwrap();
    let gt = map.log_data().mapv(|v| v as f64);
    let noise = standard_noise(cfg.latent_dim, &mut ChaCha8Rng::seed_from_u64(seed));
    let values: Vec<ArrayD<f64>> = model.params.iter().map(|p| p.value.clone()).collect();
    let f = |tape: &Tape<f64>, vars: &[eqillum::autodiff::Var]| {
        let p = Bound::from_vars(vars.to_vec());
        let loss = vae_loss(&model, tape, &p, &input, &gt, &noise).map_err(grad_error)?;
        Ok(loss.combined)
    };
    let opts = GradCheckOptions {
        eps: 1e-5,
        max_coords_per_input: Some(coords),
        seed,
        min_scale,
    };
    grad_check_inputs(f, &values, &opts).unwrap()
}
