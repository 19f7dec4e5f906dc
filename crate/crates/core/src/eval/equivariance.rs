//! Numerical equivariance checks on layers and whole models.

use std::f64::consts::TAU;

use ndarray::{Array2, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::Real;
use crate::encoder::LatentCode;
use crate::envio::{render_skies, sample_skies};
use crate::envmap::EnvironmentMap;
use crate::error::{Error, Result};
use crate::layers::{check_equivariance, eval_on_tape, so2_fc, vn_attention, vn_linear, OrthogonalAction, RotZAction};
use crate::model::Model;
use crate::sphere::{random_rotation, roll_columns, roll_envmap, rotation_z};

#[derive(Clone, Debug, PartialEq)]
pub struct EquivarianceCheck {
    pub name: &'static str,
    pub deviation: f64,
    pub tolerance: f64,
}

impl EquivarianceCheck {
    pub fn passed(&self) -> bool {
        self.deviation < self.tolerance
    }
}

pub const SUITE_TOLERANCE: f64 = 1e-4;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.sample::<f64, _>(StandardNormal))
}

fn max_abs_diff<'a>(a: impl IntoIterator<Item = &'a f64>, b: impl IntoIterator<Item = &'a f64>) -> f64 {
    a.into_iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Worst `|f(R x) - R f(x)|` of the SO(2) FC layer over `samples` random
/// inputs, weights, and rotations about the up axis, evaluated in `R`.
pub fn so2_fc_deviation<R: Real>(samples: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for s in 0..samples {
        let d_in = rng.random_range(1..6);
        let d_out = rng.random_range(1..6);
        let c_inv = rng.random_range(0..5);
        let c_out = rng.random_range(1..5);
        let w_eq = randn(&mut rng, &[d_out, c_inv + 1, d_in]);
        let w_inv = randn(&mut rng, &[d_out, c_out, d_in, c_inv + 1]);
        let b_inv = randn(&mut rng, &[d_out, c_out]);
        let t = rng.random_range(1..5);
        let layer = |x: &ArrayD<f64>| {
            eval_on_tape::<R>(x, |tape, xv| {
                let we = tape.constant(w_eq.mapv(R::lit));
                let wi = tape.constant(w_inv.mapv(R::lit));
                let bi = tape.constant(b_inv.mapv(R::lit));
                so2_fc(tape, xv, Some(we), wi, bi)
            })
            .expect("shapes are consistent")
        };
        let dev = check_equivariance(
            layer,
            &RotZAction,
            |r| randn(r, &[t, d_in, 2 + c_inv]),
            1,
            seed.wrapping_add(s as u64),
        );
        worst = worst.max(dev);
    }
    worst
}

/// Vector-neuron linear map and attention under random orthogonal actions.
pub fn vn_layer_deviation(samples: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = randn(&mut rng, &[5, 4]);
    let lin = check_equivariance(
        |x| eval_on_tape::<f64>(x, |t, xv| vn_linear(t, xv, t.constant(w.clone()))).expect("vn_linear"),
        &OrthogonalAction { dim: 3 },
        |r| randn(r, &[3, 4, 3]),
        samples,
        seed,
    );
    let att = check_equivariance(
        |x| {
            eval_on_tape::<f64>(x, |t, xv| {
                let q = t.narrow(xv, 0, 0, 2)?;
                let k = t.narrow(xv, 0, 2, 3)?;
                let v = t.narrow(xv, 0, 5, 3)?;
                vn_attention(t, q, k, v)
            })
            .expect("vn_attention")
        },
        &OrthogonalAction { dim: 3 },
        |r| randn(r, &[8, 4, 3]),
        samples,
        seed.wrapping_add(1),
    );
    lin.max(att)
}

/// Worst deviations `(mean, variance)` of `mu(roll(m, k W / P)) = Rz(2 pi k / P) mu(m)`
/// over all `k` in `1..=P`.
pub fn encoder_roll_deviation<R: Real>(model: &Model<R>, maps: &[EnvironmentMap]) -> Result<(f64, f64)> {
    let cfg = model.config();
    let (p, w) = (cfg.patches, cfg.width);
    let (mut mu_dev, mut var_dev) = (0.0f64, 0.0f64);
    for map in maps {
        let base = model.encode(map)?;
        let base_var = base.variance();
        for k in 1..=p {
            let shifted = model.encode(&roll_envmap(map, (k * w / p) as isize))?;
            let rot = LatentCode(base.mu.clone()).rotated(&rotation_z(TAU * k as f64 / p as f64).matrix3());
            mu_dev = mu_dev.max(max_abs_diff(&shifted.mu, &rot.0));
            var_dev = var_dev.max(max_abs_diff(&shifted.variance(), &base_var));
        }
    }
    Ok((mu_dev, var_dev))
}

/// Worst `|D(d, R Z) - D(R^T d, Z)|` over random rotations, codes, and
/// directions.
pub fn decoder_rotation_deviation<R: Real>(model: &Model<R>, rotations: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = model.config().latent_dim;
    let mut worst = 0.0f64;
    for _ in 0..rotations {
        let z = LatentCode::standard_normal(d, &mut rng);
        let mut dirs = Array2::from_shape_fn((64, 3), |_| rng.sample::<f64, _>(StandardNormal));
        for mut row in dirs.rows_mut() {
            let n = row.dot(&row).sqrt();
            row.mapv_inplace(|v| v / n);
        }
        let r = random_rotation(&mut rng);
        let rm = Array2::from_shape_fn((3, 3), |(i, j)| r[i][j]);
        let lhs = model.decode(&z.rotated(&r), &dirs)?;
        // Rows are directions, so `R^T d` is `d R` in row form.
        let rhs = model.decode(&z, &dirs.dot(&rm))?;
        worst = worst.max(max_abs_diff(&lhs, &rhs));
    }
    Ok(worst)
}

/// Worst `|render(Rz(2 pi k / W) Z) - roll(render(Z), k)|` over random `k`.
pub fn render_roll_deviation<R: Real>(model: &Model<R>, trials: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = model.config();
    let (h, w) = (cfg.height, cfg.width);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let z = LatentCode::standard_normal(cfg.latent_dim, &mut rng);
        let k = rng.random_range(1..w) as isize;
        let rotated = model.render(&z.rotated(&rotation_z(TAU * k as f64 / w as f64).matrix3()), h, w)?;
        let rolled = roll_columns(&model.render(&z, h, w)?.view(), k);
        let dev = rotated
            .iter()
            .zip(rolled.iter())
            .map(|(a, b)| (*a as f64 - *b as f64).abs())
            .fold(0.0, f64::max);
        worst = worst.max(dev);
    }
    Ok(worst)
}

/// The full property suite on `model`, evaluated in 64-bit. Encoder checks
/// run on `sky_count` synthetic skies at the model resolution.
pub fn equivariance_suite(model: &Model<f32>, sky_count: usize, seed: u64) -> Result<Vec<EquivarianceCheck>> {
    let m64: Model<f64> = model.cast();
    let check = |name, deviation: f64| {
        if deviation.is_nan() {
            return Err(Error::Invalid(format!("{name} produced NaN")));
        }
        Ok(EquivarianceCheck {
            name,
            deviation,
            tolerance: SUITE_TOLERANCE,
        })
    };
    let mut out = vec![
        check("so2-fc", so2_fc_deviation::<f64>(100, seed))?,
        check("vn-layers", vn_layer_deviation(20, seed))?,
        check("decoder-so3", decoder_rotation_deviation(&m64, 50, seed)?)?,
        check("render-roll", render_roll_deviation(&m64, 5, seed)?)?,
    ];
    if m64.has_encoder() {
        let cfg = m64.config();
        let maps = render_skies(&sample_skies(sky_count, seed), cfg.height, cfg.width);
        let (mu, var) = encoder_roll_deviation(&m64, &maps)?;
        out.push(check("encoder-mean-roll", mu)?);
        out.push(check("encoder-variance-roll", var)?);
    }
    Ok(out)
}
