use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::TrainConfig;
use crate::encoder::LatentCode;
use crate::envmap::EnvironmentMap;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::trainer::fit_latent;

use super::metrics::{align_log_scale, ldr_from_log, mse, sin_weights};

/// `(1 - t) Z1 + t Z2`, evaluated from the nearer endpoint so that both
/// endpoints and equal codes are reproduced exactly.
pub fn interpolate(z1: &LatentCode, z2: &LatentCode, t: f64) -> LatentCode {
    if t <= 0.5 {
        LatentCode(&z1.0 + &((&z2.0 - &z1.0) * t))
    } else {
        LatentCode(&z2.0 + &((&z1.0 - &z2.0) * (1.0 - t)))
    }
}

/// Where image distances are measured.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImageSpace {
    /// Tone-mapped LDR.
    Ldr,
    /// Log radiance.
    LogHdr,
}

impl std::str::FromStr for ImageSpace {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ldr" => Ok(Self::Ldr),
            "log-hdr" => Ok(Self::LogHdr),
            _ => Err(Error::Config(format!(
                "image space must be `ldr` or `log-hdr`, got `{s}`"
            ))),
        }
    }
}

fn to_space(log: &Array3<f64>, space: ImageSpace) -> Array3<f64> {
    match space {
        ImageSpace::Ldr => ldr_from_log(log),
        ImageSpace::LogHdr => log.clone(),
    }
}

/// Something that turns a latent code into a log-radiance map.
pub trait LatentField {
    fn name(&self) -> &'static str;
    fn latent_dim(&self) -> usize;
    fn render_log(&self, z: &LatentCode) -> Result<Array3<f64>>;
}

/// A trained decoder rendered at a fixed resolution.
pub struct TrainedField<'a> {
    pub model: &'a Model<f32>,
    pub height: usize,
    pub width: usize,
}

impl LatentField for TrainedField<'_> {
    fn name(&self) -> &'static str {
        "trained"
    }

    fn latent_dim(&self) -> usize {
        self.model.config().latent_dim
    }

    fn render_log(&self, z: &LatentCode) -> Result<Array3<f64>> {
        Ok(self.model.render(z, self.height, self.width)?.mapv(|v| v as f64))
    }
}

/// `vec(map) = A vec(Z)` with orthonormal columns, so image distances equal
/// latent distances up to a constant factor.
pub struct LinearToyField {
    matrix: Array2<f64>,
    latent_dim: usize,
    height: usize,
    width: usize,
}

impl LinearToyField {
    pub fn orthonormal(latent_dim: usize, height: usize, width: usize, seed: u64) -> Result<Self> {
        let (rows, cols) = (height * width * 3, latent_dim * 3);
        if cols > rows {
            return Err(Error::Invalid(format!(
                "toy field needs at least {cols} pixels values, got {rows}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut a = Array2::from_shape_fn((rows, cols), |_| rng.sample::<f64, _>(StandardNormal));
        for j in 0..cols {
            for k in 0..j {
                let proj = a.column(j).dot(&a.column(k));
                let ck = a.column(k).to_owned();
                a.column_mut(j).scaled_add(-proj, &ck);
            }
            let n = a.column(j).dot(&a.column(j)).sqrt();
            a.column_mut(j).mapv_inplace(|v| v / n);
        }
        Ok(Self {
            matrix: a,
            latent_dim,
            height,
            width,
        })
    }
}

impl LatentField for LinearToyField {
    fn name(&self) -> &'static str {
        "toy-linear"
    }

    fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    fn render_log(&self, z: &LatentCode) -> Result<Array3<f64>> {
        let flat = z.0.flatten();
        let out = self.matrix.dot(&flat);
        Ok(out
            .into_shape_with_order((self.height, self.width, 3))
            .expect("matrix rows match the grid"))
    }
}

pub const LATENT_FIELDS: [&str; 2] = ["trained", "toy-linear"];

/// Looks up a field by name. `trained` needs `model`.
pub fn build_field<'a>(
    name: &str,
    model: Option<&'a Model<f32>>,
    latent_dim: usize,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<Box<dyn LatentField + 'a>> {
    match name {
        "trained" => {
            let model = model.ok_or_else(|| Error::Invalid("the trained field needs a model".into()))?;
            Ok(Box::new(TrainedField { model, height, width }))
        }
        "toy-linear" => Ok(Box::new(LinearToyField::orthonormal(latent_dim, height, width, seed)?)),
        _ => Err(Error::UnknownStrategy {
            kind: "latent field",
            name: name.to_string(),
            known: LATENT_FIELDS.join(", "),
        }),
    }
}

/// Midpoint divergence of two independent fits to one image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Uniqueness {
    /// Image MSE between the render of the first fit and the midpoint.
    pub mse: f64,
    /// Same against the second fit.
    pub mse_reverse: f64,
}

/// Image distance between two renders of `target`, after aligning each to
/// the target's exposure.
fn aligned_distance(a: &Array3<f64>, b: &Array3<f64>, target_log: &Array3<f64>, space: ImageSpace) -> f64 {
    let w = sin_weights(target_log.dim().0);
    let a = align_log_scale(a, target_log, &w);
    let b = align_log_scale(b, target_log, &w);
    mse(&to_space(&a, space), &to_space(&b, space))
}

pub fn uniqueness_from_codes(
    field: &dyn LatentField,
    target: &EnvironmentMap,
    za: &LatentCode,
    zb: &LatentCode,
    space: ImageSpace,
) -> Result<Uniqueness> {
    let gt = target.log_data().mapv(|v| v as f64);
    let mid = interpolate(za, zb, 0.5);
    let (ra, rb, rm) = (field.render_log(za)?, field.render_log(zb)?, field.render_log(&mid)?);
    Ok(Uniqueness {
        mse: aligned_distance(&ra, &rm, &gt, space),
        mse_reverse: aligned_distance(&rb, &rm, &gt, space),
    })
}

/// Fits two codes to `target` from seeds `seed_a` and `seed_b` with the
/// decoder frozen and measures how far their midpoint render drifts.
pub fn uniqueness(
    model: &Model<f32>,
    target: &EnvironmentMap,
    seed_a: u64,
    seed_b: u64,
    config: &TrainConfig,
    space: ImageSpace,
) -> Result<Uniqueness> {
    let za = fit_latent(model, target, config, seed_a)?.code;
    let zb = fit_latent(model, target, config, seed_b)?.code;
    let field = TrainedField {
        model,
        height: target.height(),
        width: target.width(),
    };
    uniqueness_from_codes(&field, target, &za, &zb, space)
}

pub const MIN_PAIRS: usize = 10;

/// Spearman correlation between latent MSE and render MSE over `n_pairs`
/// pairs drawn from `N(0, I)`.
pub fn reconstruction_consistency(
    field: &dyn LatentField,
    n_pairs: usize,
    seed: u64,
    space: ImageSpace,
) -> Result<f64> {
    if n_pairs < MIN_PAIRS {
        return Err(Error::Invalid(format!(
            "need at least {MIN_PAIRS} pairs, got {n_pairs}"
        )));
    }
    let d = field.latent_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut latent = Vec::with_capacity(n_pairs);
    let mut image = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let a = LatentCode::standard_normal(d, &mut rng);
        let b = LatentCode::standard_normal(d, &mut rng);
        let diff = &a.0 - &b.0;
        latent.push(diff.mapv(|v| v * v).mean().unwrap_or(0.0));
        let (ra, rb) = (field.render_log(&a)?, field.render_log(&b)?);
        image.push(mse(&to_space(&ra, space), &to_space(&rb, space)));
    }
    spearman(&latent, &image)
}

/// Ranks starting at 1; ties share their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Invalid(format!(
            "spearman needs two equal-length samples of size >= 2, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    pearson(&average_ranks(xs), &average_ranks(ys))
        .ok_or_else(|| Error::Invalid("spearman correlation is undefined for constant input".into()))
}
