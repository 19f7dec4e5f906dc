//! Equivariant vision transformer over vertical-stripe patches.
//!
//! A map is cut into `P` azimuthal stripes. Every sample in a stripe becomes
//! a 6-vector `(dx, dy | dz, log r, log g, log b)`: the horizontal direction
//! components rotate with `Rz`, the rest are invariant. Rolling the map by a
//! whole stripe permutes the tokens and rotates their equivariant parts, and
//! the trunk is permutation invariant on the output token, so the latent
//! mean rotates with the map while the variance stays put.
//!
//! Three encoder variants are registered by name (see [`ENCODER_MODES`]):
//!
//! * `so2-projections`: SO(2) layers at the input and output projections,
//!   Vector Neuron trunk.
//! * `full-so2`: SO(2) layers and SO(2)-ReLU throughout, with the trunk
//!   width reduced until its parameter count fits under the VN trunk.
//! * `full-vn`: Vector Neuron layers everywhere.

use std::fmt;

use ndarray::{Array1, Array2, Array3, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Real, Tape, Var};
use crate::envmap::EnvironmentMap;
use crate::error::{Error, Result};
use crate::layers::{so2_fc, vn_attention, So2Fc, So2Relu, VnLayerNorm, VnLinear, VnRelu, EQ_DIMS};
use crate::params::{Bound, ParamBuilder, ParamId, ParamStore};
use crate::sphere::{equal_area_rows, sample_column, Direction, EquirectGrid};

/// Components per sample: two equivariant, four invariant.
pub const FEATURE_DIM: usize = 6;
pub const INV_DIMS: usize = FEATURE_DIM - EQ_DIMS;

pub const ENCODER_MODES: [&str; 3] = ["so2-projections", "full-so2", "full-vn"];

/// Patch tokens `[P, S, 6]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    tokens: Array3<f32>,
}

impl PatchSet {
    pub fn tokens(&self) -> &Array3<f32> {
        &self.tokens
    }

    pub fn patches(&self) -> usize {
        self.tokens.dim().0
    }

    pub fn samples(&self) -> usize {
        self.tokens.dim().1
    }

    /// Subtracts the mean log color over all samples. Samples sit on
    /// equal-area rows, so this is the solid-angle mean; it is unchanged by
    /// any azimuthal roll of the map.
    pub fn exposure_normalized(&self) -> (PatchSet, f64) {
        let colors = self.tokens.slice(ndarray::s![.., .., 3..]);
        let mean = colors.iter().map(|&v| v as f64).sum::<f64>() / colors.len() as f64;
        let mut tokens = self.tokens.clone();
        tokens
            .slice_mut(ndarray::s![.., .., 3..])
            .mapv_inplace(|v| (v as f64 - mean) as f32);
        (PatchSet { tokens }, mean)
    }
}

/// Splits `map` into `patches` vertical stripes sampled at `rows`
/// equal-area polar angles and every pixel column of the stripe.
pub fn patchify(map: &EnvironmentMap, patches: usize, rows: usize) -> Result<PatchSet> {
    let (h, w) = (map.height(), map.width());
    if patches == 0 || w % patches != 0 {
        return Err(Error::PatchCount { width: w, patches });
    }
    if rows == 0 {
        return Err(Error::Config("rows per patch must be positive".into()));
    }
    let cols = w / patches;
    let thetas = equal_area_rows(rows);
    let grid = EquirectGrid::new(h, w);
    let log = map.log_data();
    let mut tokens = Array3::zeros((patches, rows * cols, FEATURE_DIM));
    for p in 0..patches {
        for (r, &theta) in thetas.iter().enumerate() {
            for c in 0..cols {
                let col = p * cols + c;
                let d = Direction::from_angles(theta, grid.phi(col)).xyz();
                let rgb = sample_column(&log.view(), theta, col);
                let s = r * cols + c;
                for k in 0..3 {
                    tokens[[p, s, k]] = d[k] as f32;
                    tokens[[p, s, 3 + k]] = rgb[k] as f32;
                }
            }
        }
    }
    Ok(PatchSet { tokens })
}

/// Per-channel isotropic Gaussian over 3D latent vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentDistribution {
    pub mu: Array2<f64>,
    pub log_var: Array1<f64>,
}

impl LatentDistribution {
    pub fn latent_dim(&self) -> usize {
        self.mu.nrows()
    }

    pub fn variance(&self) -> Array1<f64> {
        self.log_var.mapv(f64::exp)
    }
}

/// A `[D, 3]` latent code.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode(pub Array2<f64>);

impl LatentCode {
    pub fn zeros(latent_dim: usize) -> Self {
        Self(Array2::zeros((latent_dim, 3)))
    }

    pub fn latent_dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn standard_normal(latent_dim: usize, rng: &mut impl Rng) -> Self {
        Self(standard_noise(latent_dim, rng))
    }

    /// One row per line, three whitespace-separated numbers.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for row in self.0.rows() {
            out.push_str(&format!("{} {} {}\n", row[0], row[1], row[2]));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut values = Vec::new();
        let mut rows = 0;
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let row: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Invalid(format!("latent line {}: {e}", n + 1)))?;
            if row.len() != 3 || row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Invalid(format!(
                    "latent line {} must hold 3 finite numbers",
                    n + 1
                )));
            }
            values.extend(row);
            rows += 1;
        }
        if rows == 0 {
            return Err(Error::Invalid("latent file is empty".into()));
        }
        Ok(Self(Array2::from_shape_vec((rows, 3), values).expect("rows of 3")))
    }

    /// Rotates every row: `Z -> Z R^T`.
    pub fn rotated(&self, r: &[[f64; 3]; 3]) -> Self {
        let m = Array2::from_shape_fn((3, 3), |(i, j)| r[i][j]);
        Self(self.0.dot(&m.t()))
    }
}

pub fn standard_noise(latent_dim: usize, rng: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_fn((latent_dim, 3), |_| rng.sample(StandardNormal))
}

/// `Z_d = mu_d + sqrt(v_d) eps_d`.
pub fn reparameterize(dist: &LatentDistribution, noise: &Array2<f64>) -> LatentCode {
    let sd = dist.log_var.mapv(|lv| (0.5 * lv).exp());
    let mut z = noise * &sd.insert_axis(ndarray::Axis(1));
    z += &dist.mu;
    LatentCode(z)
}

/// Tape version of [`reparameterize`]; `log_var` is `[D]`.
pub fn reparameterize_var<R: Real>(
    tape: &Tape<R>,
    mu: Var,
    log_var: Var,
    noise: &Array2<f64>,
) -> crate::autodiff::Result<Var> {
    let d = tape.shape(log_var)[0];
    let lv = tape.reshape(log_var, &[d, 1])?;
    let half = tape.scale(lv, R::lit(0.5));
    let sd = tape.exp(half);
    let eps = tape.constant(noise.mapv(R::lit).into_dyn());
    let spread = tape.mul(sd, eps)?;
    tape.add(mu, spread)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub height: usize,
    pub width: usize,
    pub patches: usize,
    pub channels: usize,
    pub blocks: usize,
    pub latent_dim: usize,
}

impl EncoderConfig {
    pub fn samples_per_patch(&self) -> usize {
        self.height * self.width / self.patches
    }
}

/// One encoder variant. `patches` is `[P, S, 6]`; returns the latent mean
/// `[D, 3]` and log-variance `[D]`.
pub trait EncoderArch<R: Real>: fmt::Debug + Send + Sync {
    fn mode(&self) -> &'static str;

    /// Vector channels in the trunk.
    fn width(&self) -> usize;

    fn forward(&self, tape: &Tape<R>, params: &Bound, patches: Var) -> crate::autodiff::Result<(Var, Var)>;
}

pub type EncoderCtor<R> = fn(&mut ParamBuilder<'_, R, ChaCha8Rng>, &EncoderConfig) -> Box<dyn EncoderArch<R>>;

pub fn encoder_registry<R: Real>() -> Vec<(&'static str, EncoderCtor<R>)> {
    vec![
        (ENCODER_MODES[0], So2ProjectionEncoder::build::<R>),
        (ENCODER_MODES[1], FullSo2Encoder::build::<R>),
        (ENCODER_MODES[2], FullVnEncoder::build::<R>),
    ]
}

pub fn build_encoder<R: Real>(
    mode: &str,
    builder: &mut ParamBuilder<'_, R, ChaCha8Rng>,
    config: &EncoderConfig,
) -> Result<Box<dyn EncoderArch<R>>> {
    if config.patches == 0 || !config.width.is_multiple_of(config.patches) {
        return Err(Error::PatchCount {
            width: config.width,
            patches: config.patches,
        });
    }
    let registry = encoder_registry::<R>();
    let ctor = registry
        .iter()
        .find(|(name, _)| *name == mode)
        .map(|(_, c)| *c)
        .ok_or_else(|| Error::UnknownStrategy {
            kind: "encoder mode",
            name: mode.to_string(),
            known: ENCODER_MODES.join(", "),
        })?;
    Ok(ctor(builder, config))
}

#[derive(Clone, Debug)]
enum Mixer {
    Vn(VnLinear),
    So2(So2Fc),
}

impl Mixer {
    fn new<R: Real>(b: &mut ParamBuilder<'_, R, ChaCha8Rng>, so2: bool, c_in: usize, c_out: usize) -> Self {
        if so2 {
            Mixer::So2(So2Fc::new(b, c_in, c_out, INV_DIMS, INV_DIMS))
        } else {
            Mixer::Vn(VnLinear::new(b, c_in, c_out))
        }
    }

    fn forward<R: Real>(&self, tape: &Tape<R>, p: &Bound, x: Var) -> crate::autodiff::Result<Var> {
        match self {
            Mixer::Vn(l) => l.forward(tape, p, x),
            Mixer::So2(l) => l.forward(tape, p, x),
        }
    }
}

#[derive(Clone, Debug)]
enum Activation {
    Vn(VnRelu),
    So2(So2Relu),
}

impl Activation {
    fn forward<R: Real>(&self, tape: &Tape<R>, p: &Bound, x: Var) -> crate::autodiff::Result<Var> {
        match self {
            Activation::Vn(a) => a.forward(tape, p, x),
            Activation::So2(a) => a.forward(tape, p, x),
        }
    }
}

/// Pre-norm transformer block: attention then a 2x feed-forward, both
/// residual.
#[derive(Clone, Debug)]
struct TrunkBlock {
    norm_attn: VnLayerNorm,
    query: Mixer,
    key: Mixer,
    value: Mixer,
    out: Mixer,
    norm_ff: VnLayerNorm,
    expand: Mixer,
    act: Activation,
    contract: Mixer,
}

impl TrunkBlock {
    fn new<R: Real>(b: &mut ParamBuilder<'_, R, ChaCha8Rng>, so2: bool, c: usize) -> Self {
        let act = if so2 {
            Activation::So2(So2Relu::new(&mut b.scope("act"), 2 * c))
        } else {
            Activation::Vn(VnRelu::new(&mut b.scope("act"), 2 * c))
        };
        Self {
            norm_attn: VnLayerNorm::new(&mut b.scope("norm_attn"), c),
            query: Mixer::new(&mut b.scope("query"), so2, c, c),
            key: Mixer::new(&mut b.scope("key"), so2, c, c),
            value: Mixer::new(&mut b.scope("value"), so2, c, c),
            out: Mixer::new(&mut b.scope("out"), so2, c, c),
            norm_ff: VnLayerNorm::new(&mut b.scope("norm_ff"), c),
            expand: Mixer::new(&mut b.scope("expand"), so2, c, 2 * c),
            act,
            contract: Mixer::new(&mut b.scope("contract"), so2, 2 * c, c),
        }
    }

    fn forward<R: Real>(&self, tape: &Tape<R>, p: &Bound, x: Var) -> crate::autodiff::Result<Var> {
        let h = self.norm_attn.forward(tape, p, x)?;
        let q = self.query.forward(tape, p, h)?;
        let k = self.key.forward(tape, p, h)?;
        let v = self.value.forward(tape, p, h)?;
        let a = vn_attention(tape, q, k, v)?;
        let a = self.out.forward(tape, p, a)?;
        let x = tape.add(x, a)?;
        let h = self.norm_ff.forward(tape, p, x)?;
        let h = self.expand.forward(tape, p, h)?;
        let h = self.act.forward(tape, p, h)?;
        let h = self.contract.forward(tape, p, h)?;
        tape.add(x, h)
    }
}

/// Learnable output token plus transformer blocks. The token's equivariant
/// components are masked to zero.
#[derive(Clone, Debug)]
struct Trunk {
    token: ParamId,
    blocks: Vec<TrunkBlock>,
    channels: usize,
}

impl Trunk {
    fn new<R: Real>(b: &mut ParamBuilder<'_, R, ChaCha8Rng>, so2: bool, channels: usize, blocks: usize) -> Self {
        let token = b.uniform("token", &[1, channels, FEATURE_DIM], channels);
        let mask = ArrayD::from_shape_fn(IxDyn(&[1, channels, FEATURE_DIM]), |ix| {
            if ix[2] < EQ_DIMS {
                R::zero()
            } else {
                R::one()
            }
        });
        b.mask(token, mask);
        let blocks = (0..blocks)
            .map(|i| TrunkBlock::new(&mut b.scope(&format!("block{i}")), so2, channels))
            .collect();
        Self {
            token,
            blocks,
            channels,
        }
    }

    /// Runs the trunk over `[P, C, 6]` embeddings and returns the output
    /// token `[1, C, 6]`.
    fn forward<R: Real>(&self, tape: &Tape<R>, p: &Bound, embedded: Var) -> crate::autodiff::Result<Var> {
        let mut x = tape.concat(&[p[self.token], embedded], 0)?;
        for block in &self.blocks {
            x = block.forward(tape, p, x)?;
        }
        tape.narrow(x, 0, 0, 1)
    }
}

/// Output-token projections to `(mu [D, 3], log_var [D])` built from SO(2)
/// layers emitting one invariant component.
#[derive(Clone, Debug)]
struct So2Heads {
    mu: So2Fc,
    log_var: So2Fc,
    latent_dim: usize,
}

impl So2Heads {
    fn new<R: Real>(b: &mut ParamBuilder<'_, R, ChaCha8Rng>, channels: usize, latent_dim: usize) -> Self {
        Self {
            mu: So2Fc::new(&mut b.scope("mu"), channels, latent_dim, INV_DIMS, 1),
            log_var: So2Fc::invariant_only(&mut b.scope("log_var"), channels, latent_dim, INV_DIMS, 1),
            latent_dim,
        }
    }

    fn forward<R: Real>(&self, tape: &Tape<R>, p: &Bound, token: Var) -> crate::autodiff::Result<(Var, Var)> {
        let mu = self.mu.forward(tape, p, token)?;
        let mu = tape.reshape(mu, &[self.latent_dim, 3])?;
        let lv = so2_fc(tape, token, None, p[self.log_var.w_inv], p[self.log_var.b_inv])?;
        let lv = tape.reshape(lv, &[self.latent_dim])?;
        Ok((mu, lv))
    }
}

#[derive(Clone, Debug)]
pub struct So2ProjectionEncoder {
    embed: So2Fc,
    trunk: Trunk,
    heads: So2Heads,
}

impl So2ProjectionEncoder {
    pub fn build<R: Real>(b: &mut ParamBuilder<'_, R, ChaCha8Rng>, cfg: &EncoderConfig) -> Box<dyn EncoderArch<R>> {
        let s = cfg.samples_per_patch();
        Box::new(Self {
            embed: So2Fc::new(&mut b.scope("embed"), s, cfg.channels, INV_DIMS, INV_DIMS),
            trunk: Trunk::new(&mut b.scope("trunk"), false, cfg.channels, cfg.blocks),
            heads: So2Heads::new(&mut b.scope("heads"), cfg.channels, cfg.latent_dim),
        })
    }
}

impl<R: Real> EncoderArch<R> for So2ProjectionEncoder {
    fn mode(&self) -> &'static str {
        ENCODER_MODES[0]
    }

    fn width(&self) -> usize {
        self.trunk.channels
    }

    fn forward(&self, tape: &Tape<R>, p: &Bound, patches: Var) -> crate::autodiff::Result<(Var, Var)> {
        let x = self.embed.forward(tape, p, patches)?;
        let token = self.trunk.forward(tape, p, x)?;
        self.heads.forward(tape, p, token)
    }
}

#[derive(Clone, Debug)]
pub struct FullSo2Encoder {
    embed: So2Fc,
    trunk: Trunk,
    heads: So2Heads,
}

/// Parameter count of a trunk with the given layer family and width.
pub fn trunk_param_count(so2: bool, channels: usize, blocks: usize) -> usize {
    let mut store = ParamStore::<f32>::new();
    let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let mut b = ParamBuilder::new(&mut store, &mut rng);
    Trunk::new(&mut b, so2, channels, blocks);
    store.count("")
}

/// Widest SO(2) trunk whose parameter count does not exceed the VN trunk
/// of width `channels`.
pub fn matched_so2_width(channels: usize, blocks: usize) -> usize {
    let budget = trunk_param_count(false, channels, blocks);
    (1..=channels)
        .rev()
        .find(|&c| trunk_param_count(true, c, blocks) <= budget)
        .unwrap_or(1)
}

impl FullSo2Encoder {
    pub fn build<R: Real>(b: &mut ParamBuilder<'_, R, ChaCha8Rng>, cfg: &EncoderConfig) -> Box<dyn EncoderArch<R>> {
        let s = cfg.samples_per_patch();
        let c = matched_so2_width(cfg.channels, cfg.blocks);
        Box::new(Self {
            embed: So2Fc::new(&mut b.scope("embed"), s, c, INV_DIMS, INV_DIMS),
            trunk: Trunk::new(&mut b.scope("trunk"), true, c, cfg.blocks),
            heads: So2Heads::new(&mut b.scope("heads"), c, cfg.latent_dim),
        })
    }
}

impl<R: Real> EncoderArch<R> for FullSo2Encoder {
    fn mode(&self) -> &'static str {
        ENCODER_MODES[1]
    }

    fn width(&self) -> usize {
        self.trunk.channels
    }

    fn forward(&self, tape: &Tape<R>, p: &Bound, patches: Var) -> crate::autodiff::Result<(Var, Var)> {
        let x = self.embed.forward(tape, p, patches)?;
        let token = self.trunk.forward(tape, p, x)?;
        self.heads.forward(tape, p, token)
    }
}

/// VN layers everywhere. The mean takes the first three components of a
/// channel-mixed output token; the log-variance is an affine function of
/// each output channel's norm.
#[derive(Clone, Debug)]
pub struct FullVnEncoder {
    embed: VnLinear,
    trunk: Trunk,
    mu: VnLinear,
    lv_scale: ParamId,
    lv_bias: ParamId,
    latent_dim: usize,
}

impl FullVnEncoder {
    pub fn build<R: Real>(b: &mut ParamBuilder<'_, R, ChaCha8Rng>, cfg: &EncoderConfig) -> Box<dyn EncoderArch<R>> {
        let s = cfg.samples_per_patch();
        let mut heads = b.scope("heads");
        let mu = VnLinear::new(&mut heads.scope("mu"), cfg.channels, cfg.latent_dim);
        let lv_scale = heads.uniform("lv_scale", &[cfg.latent_dim], 1);
        let lv_bias = heads.zeros("lv_bias", &[cfg.latent_dim]);
        Box::new(Self {
            embed: VnLinear::new(&mut b.scope("embed"), s, cfg.channels),
            trunk: Trunk::new(&mut b.scope("trunk"), false, cfg.channels, cfg.blocks),
            mu,
            lv_scale,
            lv_bias,
            latent_dim: cfg.latent_dim,
        })
    }
}

impl<R: Real> EncoderArch<R> for FullVnEncoder {
    fn mode(&self) -> &'static str {
        ENCODER_MODES[2]
    }

    fn width(&self) -> usize {
        self.trunk.channels
    }

    fn forward(&self, tape: &Tape<R>, p: &Bound, patches: Var) -> crate::autodiff::Result<(Var, Var)> {
        let x = self.embed.forward(tape, p, patches)?;
        let token = self.trunk.forward(tape, p, x)?;
        let y = self.mu.forward(tape, p, token)?;
        let mu = tape.narrow(y, 2, 0, 3)?;
        let mu = tape.reshape(mu, &[self.latent_dim, 3])?;
        let n = tape.norm_axis(y, 2)?;
        let n = tape.reshape(n, &[self.latent_dim])?;
        let lv = tape.mul(n, p[self.lv_scale])?;
        let lv = tape.add(lv, p[self.lv_bias])?;
        Ok((mu, lv))
    }
}
