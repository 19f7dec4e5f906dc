//! Conditional neural field decoder.
//!
//! The decoder never sees the latent code or the query direction directly.
//! It sees `d' = Z d` (per-channel projections of the direction onto the
//! code) and `Z' = Z T^T` from [`VnInvariant`]; both are unchanged when the
//! code and the direction are rotated together, so `D(d, Z R^T) = D(R^T d,
//! Z)`. Direction features attend over `D` latent tokens `(d'_k, Z'_k)`.

use ndarray::{Array2, Array3};
use rand::Rng;

use crate::autodiff::{Real, Result, Tape, Var};
use crate::encoder::LatentCode;
use crate::layers::VnInvariant;
use crate::params::{Bound, ParamBuilder, ParamId, ParamStore};
use crate::sphere::EquirectGrid;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecoderConfig {
    pub latent_dim: usize,
    pub embed: usize,
    pub attention: usize,
    pub hidden: usize,
    pub res_blocks: usize,
    pub frame_hidden: usize,
}

impl DecoderConfig {
    pub fn with_latent_dim(latent_dim: usize) -> Self {
        Self {
            latent_dim,
            embed: 64,
            attention: 64,
            hidden: 128,
            res_blocks: 3,
            frame_hidden: 16,
        }
    }
}

#[derive(Clone, Debug)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

impl Dense {
    fn new<R: Real, G: Rng>(b: &mut ParamBuilder<'_, R, G>, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let mut s = b.scope(name);
        Self {
            w: s.uniform("w", &[fan_in, fan_out], fan_in),
            b: s.zeros("b", &[fan_out]),
        }
    }

    fn forward<R: Real>(&self, tape: &Tape<R>, p: &Bound, x: Var) -> Result<Var> {
        tape.linear(x, p[self.w], Some(p[self.b]))
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    config: DecoderConfig,
    frame: VnInvariant,
    embed1: Dense,
    embed2: Dense,
    query: ParamId,
    key_dir: ParamId,
    key_lat: Dense,
    value_dir: ParamId,
    value_lat: Dense,
    fuse: Dense,
    res: Vec<Dense>,
    out: Dense,
}

impl Decoder {
    pub fn new<R: Real, G: Rng>(b: &mut ParamBuilder<'_, R, G>, config: &DecoderConfig) -> Self {
        let (d, e, a, h) = (config.latent_dim, config.embed, config.attention, config.hidden);
        Self {
            frame: VnInvariant::new(&mut b.scope("frame"), d, config.frame_hidden),
            embed1: Dense::new(b, "embed1", d, e),
            embed2: Dense::new(b, "embed2", e, e),
            query: b.uniform("query", &[e, a], e),
            key_dir: b.uniform("key_dir", &[1, a], 1),
            key_lat: Dense::new(b, "key_lat", 3, a),
            value_dir: b.uniform("value_dir", &[1, a], 1),
            value_lat: Dense::new(b, "value_lat", 3, a),
            fuse: Dense::new(b, "fuse", e + a, h),
            res: (0..config.res_blocks)
                .map(|i| Dense::new(b, &format!("res{i}"), h, h))
                .collect(),
            out: Dense::new(b, "out", h, 3),
            config: config.clone(),
        }
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    /// `(d' [N, D], Z' [D, 3])` for code `z [D, 3]` and unit `dirs [N, 3]`.
    pub fn condition<R: Real>(&self, tape: &Tape<R>, p: &Bound, z: Var, dirs: Var) -> Result<(Var, Var)> {
        let zt = tape.transpose(z)?;
        let proj = tape.matmul(dirs, zt)?;
        let (inv, _) = self.frame.forward(tape, p, z)?;
        Ok((proj, inv))
    }

    /// Log-RGB `[N, 3]` at `dirs [N, 3]`.
    pub fn forward<R: Real>(&self, tape: &Tape<R>, p: &Bound, z: Var, dirs: Var) -> Result<Var> {
        let (proj, inv) = self.condition(tape, p, z, dirs)?;
        let e = self.embed1.forward(tape, p, proj)?;
        let e = tape.relu(e);
        let e = self.embed2.forward(tape, p, e)?;

        // Keys and values of latent token k are linear in (d'_k, Z'_k).
        let q = tape.matmul(e, p[self.query])?;
        let key_dir = tape.transpose(p[self.key_dir])?;
        let qk_dir = tape.matmul(q, key_dir)?;
        let s_dir = tape.mul(proj, qk_dir)?;
        let k_lat = self.key_lat.forward(tape, p, inv)?;
        let k_lat_t = tape.transpose(k_lat)?;
        let s_lat = tape.matmul(q, k_lat_t)?;
        let scores = tape.add(s_dir, s_lat)?;
        let scores = tape.scale(scores, R::one() / R::lit((self.config.attention as f64).sqrt()));
        let attn = tape.softmax(scores, 1)?;

        let weighted = tape.mul(attn, proj)?;
        let pooled = tape.sum_axis(weighted, 1)?;
        let v_dir = tape.matmul(pooled, p[self.value_dir])?;
        let v_lat = self.value_lat.forward(tape, p, inv)?;
        let v_lat = tape.matmul(attn, v_lat)?;
        let ctx = tape.add(v_dir, v_lat)?;

        let h = tape.concat(&[e, ctx], 1)?;
        let h = self.fuse.forward(tape, p, h)?;
        let mut h = tape.relu(h);
        for block in &self.res {
            let r = block.forward(tape, p, h)?;
            let r = tape.relu(r);
            h = tape.add(h, r)?;
        }
        self.out.forward(tape, p, h)
    }

    /// Log-RGB at every pixel center of an `H x W` grid, `[H * W, 3]`.
    pub fn render_var<R: Real>(&self, tape: &Tape<R>, p: &Bound, z: Var, height: usize, width: usize) -> Result<Var> {
        let dirs = tape.constant(grid_directions::<R>(height, width).into_dyn());
        let out = self.forward(tape, p, z, dirs)?;
        tape.reshape(out, &[height, width, 3])
    }

    pub fn decode<R: Real>(&self, params: &ParamStore<R>, z: &LatentCode, dirs: &Array2<f64>) -> Result<Array2<f64>> {
        let tape = Tape::<R>::new();
        let p = params.bind(&tape, &[]);
        let zv = tape.constant(z.0.mapv(R::lit).into_dyn());
        let dv = tape.constant(dirs.mapv(R::lit).into_dyn());
        let y = self.forward(&tape, &p, zv, dv)?;
        let out = tape
            .value(y)
            .mapv(|v| v.as_f64())
            .into_dimensionality()
            .expect("decoder output is 2-D");
        Ok(out)
    }

    /// Log-space rendering `[H, W, 3]`.
    pub fn render<R: Real>(
        &self,
        params: &ParamStore<R>,
        z: &LatentCode,
        height: usize,
        width: usize,
    ) -> Result<Array3<f32>> {
        let tape = Tape::<R>::new();
        let p = params.bind(&tape, &[]);
        let zv = tape.constant(z.0.mapv(R::lit).into_dyn());
        let y = self.render_var(&tape, &p, zv, height, width)?;
        let out = tape
            .value(y)
            .mapv(|v| v.as_f64() as f32)
            .into_dimensionality()
            .expect("render output is 3-D");
        Ok(out)
    }

    /// Non-tape `(d', Z')` for inspection.
    pub fn invariant_condition<R: Real>(
        &self,
        params: &ParamStore<R>,
        z: &LatentCode,
        dirs: &Array2<f64>,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        let tape = Tape::<R>::new();
        let p = params.bind(&tape, &[]);
        let zv = tape.constant(z.0.mapv(R::lit).into_dyn());
        let dv = tape.constant(dirs.mapv(R::lit).into_dyn());
        let (proj, inv) = self.condition(&tape, &p, zv, dv)?;
        let to2 = |v: Var| tape.value(v).mapv(|x| x.as_f64()).into_dimensionality().expect("2-D");
        Ok((to2(proj), to2(inv)))
    }
}

pub fn grid_directions<R: Real>(height: usize, width: usize) -> Array2<R> {
    EquirectGrid::new(height, width).directions().mapv(R::lit)
}
