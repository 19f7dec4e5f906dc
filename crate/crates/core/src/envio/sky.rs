//! Procedural outdoor skies.
//!
//! Every term depends on the polar angle and on the azimuth relative to the
//! sun, so moving the sun by `2 pi k / W` rolls the rendered map by `k`
//! columns.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::envmap::EnvironmentMap;
use crate::sphere::EquirectGrid;
use crate::trainer::rng_for;

const STREAM_SKY: u64 = 101;
const STREAM_JITTER: u64 = 102;

#[derive(Clone, Debug, PartialEq)]
pub struct SkyParams {
    pub sun_azimuth: f64,
    /// Radians above the horizon, in `[0, pi/2]`.
    pub sun_elevation: f64,
    /// Gaussian angular radius of the sun disk, radians.
    pub sun_radius: f64,
    pub sun_intensity: f64,
    pub horizon: [f64; 3],
    pub zenith: [f64; 3],
    pub ground_albedo: [f64; 3],
    pub noise_seed: u64,
    /// Relative amplitude of the value noise on sky radiance.
    pub noise_amplitude: f64,
}

pub const SUN_INTENSITY_RANGE: (f64, f64) = (2e3, 5e4);
const NOISE_KNOTS: usize = 16;

impl SkyParams {
    /// Draws parameters from the dataset distribution.
    pub fn sample(rng: &mut impl Rng) -> Self {
        let (lo, hi) = SUN_INTENSITY_RANGE;
        let zenith_blue = rng.random_range(0.6..1.2);
        let haze = rng.random_range(0.0..0.6);
        Self {
            sun_azimuth: rng.random_range(0.0..TAU),
            sun_elevation: rng.random_range(0.05..1.4),
            sun_radius: rng.random_range(0.06..0.12),
            sun_intensity: (rng.random_range(lo.ln()..hi.ln())).exp(),
            horizon: [0.8 + haze, 0.85 + haze, 0.9 + 0.5 * haze],
            zenith: [0.15 * zenith_blue, 0.35 * zenith_blue, zenith_blue],
            ground_albedo: [
                rng.random_range(0.1..0.35),
                rng.random_range(0.1..0.3),
                rng.random_range(0.05..0.25),
            ],
            noise_seed: rng.random(),
            noise_amplitude: rng.random_range(0.0..0.15),
        }
    }

    /// A near-duplicate: every continuous parameter moved by a small
    /// relative amount, same noise pattern.
    pub fn jittered(&self, rng: &mut impl Rng, amount: f64) -> Self {
        let shift = rng.random_range(-amount..amount) * TAU;
        let mut j = |v: f64| v * (1.0 + rng.random_range(-amount..amount));
        let mut out = self.clone();
        out.sun_azimuth = (self.sun_azimuth + shift).rem_euclid(TAU);
        out.sun_elevation = j(self.sun_elevation).clamp(0.0, FRAC_PI_2);
        out.sun_radius = j(self.sun_radius);
        out.sun_intensity = j(self.sun_intensity);
        for c in 0..3 {
            out.horizon[c] = j(self.horizon[c]);
            out.zenith[c] = j(self.zenith[c]);
            out.ground_albedo[c] = j(self.ground_albedo[c]);
        }
        out
    }

    pub fn sun_direction(&self) -> [f64; 3] {
        let theta = FRAC_PI_2 - self.sun_elevation;
        [
            theta.sin() * self.sun_azimuth.cos(),
            theta.sin() * self.sun_azimuth.sin(),
            theta.cos(),
        ]
    }
}

/// Smooth 1-D value noise over the polar angle, in `[-1, 1]`.
fn noise_profile(seed: u64) -> impl Fn(f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let knots: Vec<f64> = (0..=NOISE_KNOTS).map(|_| rng.random_range(-1.0..1.0)).collect();
    move |theta: f64| {
        let x = (theta / PI).clamp(0.0, 1.0) * NOISE_KNOTS as f64;
        let i = (x.floor() as usize).min(NOISE_KNOTS - 1);
        let t = x - i as f64;
        let s = t * t * (3.0 - 2.0 * t);
        knots[i] * (1.0 - s) + knots[i + 1] * s
    }
}

pub fn generate_sky(params: &SkyParams, height: usize, width: usize) -> EnvironmentMap {
    let grid = EquirectGrid::new(height, width);
    let noise = noise_profile(params.noise_seed);
    let (st, ct) = {
        let t = FRAC_PI_2 - params.sun_elevation;
        (t.sin(), t.cos())
    };
    let ground: Vec<f64> = (0..3)
        .map(|c| params.ground_albedo[c] * 0.5 * (params.horizon[c] + params.zenith[c]))
        .collect();
    let two_r2 = 2.0 * params.sun_radius * params.sun_radius;
    let glow_r2 = 2.0 * (4.0 * params.sun_radius).powi(2);
    let mut data = Array3::<f32>::zeros((height, width, 3));
    for i in 0..height {
        let theta = grid.theta(i);
        let elevation = FRAC_PI_2 - theta;
        let bump = 1.0 + params.noise_amplitude * noise(theta);
        for j in 0..width {
            let dphi = grid.phi(j) - params.sun_azimuth;
            let cos_gamma = (theta.sin() * st * dphi.cos() + theta.cos() * ct).clamp(-1.0, 1.0);
            let gamma = cos_gamma.acos();
            let sun =
                params.sun_intensity * ((-gamma * gamma / two_r2).exp() + 0.01 * (-gamma * gamma / glow_r2).exp());
            for c in 0..3 {
                let v = if elevation >= 0.0 {
                    let t = elevation.sin().sqrt();
                    let sky = params.horizon[c] + (params.zenith[c] - params.horizon[c]) * t;
                    sky * bump + sun
                } else {
                    ground[c]
                };
                data[[i, j, c]] = v as f32;
            }
        }
    }
    EnvironmentMap::new(data).expect("sky radiance is finite and non-negative")
}

/// `n` independent skies; image `i` draws from its own seed stream.
pub fn sample_skies(n: usize, seed: u64) -> Vec<SkyParams> {
    (0..n)
        .map(|i| SkyParams::sample(&mut rng_for(seed, STREAM_SKY, i as u64)))
        .collect()
}

/// Each base sky followed by `copies - 1` jittered near-duplicates.
pub fn with_near_duplicates(base: &[SkyParams], copies: usize, amount: f64, seed: u64) -> Vec<SkyParams> {
    let mut out = Vec::with_capacity(base.len() * copies);
    for (i, p) in base.iter().enumerate() {
        out.push(p.clone());
        let mut rng = rng_for(seed, STREAM_JITTER, i as u64);
        out.extend((1..copies).map(|_| p.jittered(&mut rng, amount)));
    }
    out
}

/// Renders in parallel; every sky depends only on its own parameters, so the
/// result does not depend on the thread count.
pub fn render_skies(params: &[SkyParams], height: usize, width: usize) -> Vec<EnvironmentMap> {
    params.par_iter().map(|p| generate_sky(p, height, width)).collect()
}
