//! Equivariant building blocks.
//!
//! Feature blocks are `[tokens, channels, g]` arrays of `g`-dimensional
//! vector features. The first two of the `g` components are equivariant
//! (they rotate with `Rz`), the remaining `g - 2` are invariant. Vector
//! Neuron layers here mix channels only and never touch the `g` axis, so
//! they commute with every orthogonal action on it, and in particular with
//! `block-diag(Rz, I)`.

use ndarray::{Array2, ArrayD, Axis, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{GradError, Real, Result, Tape, Var};
use crate::params::{Bound, ParamBuilder, ParamId};
use crate::sphere::{random_rotation, rotation_z};

/// Number of equivariant components at the front of every feature vector.
pub const EQ_DIMS: usize = 2;

fn expect_rank3<R: Real>(tape: &Tape<R>, x: Var, op: &'static str) -> Result<[usize; 3]> {
    let s = tape.shape(x);
    if s.len() != 3 {
        return Err(GradError::Rank {
            op,
            expected: 3,
            got: s.len(),
        });
    }
    Ok([s[0], s[1], s[2]])
}

/// SO(2)-equivariant fully connected layer.
///
/// `x` is `[t, d_in, 2 + c_inv]`. With `T = [X_inv, 1]` and
/// `T' = [X_inv, |X_eq|]` per input row:
///
/// ```text
/// Y_eq[o, v]  = sum_{i,k} W_eq[o, k, i]  T[i, k]  X_eq[i, v]
/// Y_inv[o, u] = sum_{i,k} W_inv[o, u, i, k] T'[i, k] + B_inv[o, u]
/// ```
///
/// Shapes: `w_eq [d_out, c_inv + 1, d_in]`, `w_inv [d_out, c_out, d_in,
/// c_inv + 1]`, `b_inv [d_out, c_out]`. Returns `[t, d_out, 2 + c_out]`, or
/// only the invariant part `[t, d_out, c_out]` when `w_eq` is `None`.
pub fn so2_fc<R: Real>(tape: &Tape<R>, x: Var, w_eq: Option<Var>, w_inv: Var, b_inv: Var) -> Result<Var> {
    let [t, d_in, g] = expect_rank3(tape, x, "so2_fc")?;
    if g < EQ_DIMS {
        return Err(GradError::Invalid {
            op: "so2_fc",
            detail: format!("feature dimension {g} has no equivariant part"),
        });
    }
    let c_inv = g - EQ_DIMS;
    let wi = tape.shape(w_inv);
    if wi.len() != 4 {
        return Err(GradError::Rank {
            op: "so2_fc",
            expected: 4,
            got: wi.len(),
        });
    }
    if wi[2] != d_in {
        return Err(GradError::ShapeMismatch {
            op: "so2_fc",
            axis: 1,
            left: d_in,
            right: wi[2],
        });
    }
    if wi[3] != c_inv + 1 {
        return Err(GradError::ShapeMismatch {
            op: "so2_fc",
            axis: 2,
            left: c_inv + 1,
            right: wi[3],
        });
    }

    let x_eq = tape.narrow(x, 2, 0, EQ_DIMS)?;
    let x_inv = tape.narrow(x, 2, EQ_DIMS, c_inv)?;
    let norm = tape.norm_axis(x_eq, 2)?;
    let t_prime = tape.concat(&[x_inv, norm], 2)?;
    let y_inv = tape.contract(t_prime, &[1, 2], w_inv, &[2, 3])?;
    let y_inv = tape.add(y_inv, b_inv)?;

    let Some(w_eq) = w_eq else { return Ok(y_inv) };
    let we = tape.shape(w_eq);
    if we.len() != 3 || we[2] != d_in || we[1] != c_inv + 1 || we[0] != wi[0] {
        return Err(GradError::Invalid {
            op: "so2_fc",
            detail: format!(
                "W_eq shape {we:?} does not match d_in {d_in}, c_inv {c_inv}, d_out {}",
                wi[0]
            ),
        });
    }
    let ones = tape.constant(ArrayD::from_elem(IxDyn(&[t, d_in, 1]), R::one()));
    let t_inv = tape.concat(&[x_inv, ones], 2)?;
    let t4 = tape.reshape(t_inv, &[t, d_in, c_inv + 1, 1])?;
    let x4 = tape.reshape(x_eq, &[t, d_in, 1, EQ_DIMS])?;
    let bilinear = tape.mul(t4, x4)?;
    // [t, v, d_out] -> [t, d_out, v]
    let y_eq = tape.contract(bilinear, &[1, 2], w_eq, &[2, 1])?;
    let y_eq = tape.permute(y_eq, &[0, 2, 1])?;
    tape.concat(&[y_eq, y_inv], 2)
}

/// Parameters of one [`so2_fc`] layer.
#[derive(Clone, Debug)]
pub struct So2Fc {
    pub d_in: usize,
    pub d_out: usize,
    pub c_inv: usize,
    pub c_out: usize,
    pub w_eq: Option<ParamId>,
    pub w_inv: ParamId,
    pub b_inv: ParamId,
}

impl So2Fc {
    pub fn new<R: Real, G: Rng>(
        b: &mut ParamBuilder<'_, R, G>,
        d_in: usize,
        d_out: usize,
        c_inv: usize,
        c_out: usize,
    ) -> Self {
        let fan_in = d_in * (c_inv + 1);
        let w_eq = Some(b.uniform("w_eq", &[d_out, c_inv + 1, d_in], fan_in));
        let w_inv = b.uniform("w_inv", &[d_out, c_out, d_in, c_inv + 1], fan_in);
        let b_inv = b.zeros("b_inv", &[d_out, c_out]);
        Self {
            d_in,
            d_out,
            c_inv,
            c_out,
            w_eq,
            w_inv,
            b_inv,
        }
    }

    /// A layer with only the invariant output path.
    pub fn invariant_only<R: Real, G: Rng>(
        b: &mut ParamBuilder<'_, R, G>,
        d_in: usize,
        d_out: usize,
        c_inv: usize,
        c_out: usize,
    ) -> Self {
        let fan_in = d_in * (c_inv + 1);
        let w_inv = b.uniform("w_inv", &[d_out, c_out, d_in, c_inv + 1], fan_in);
        let b_inv = b.zeros("b_inv", &[d_out, c_out]);
        Self {
            d_in,
            d_out,
            c_inv,
            c_out,
            w_eq: None,
            w_inv,
            b_inv,
        }
    }

    pub fn forward<R: Real>(&self, tape: &Tape<R>, p: &Bound, x: Var) -> Result<Var> {
        so2_fc(tape, x, self.w_eq.map(|id| p[id]), p[self.w_inv], p[self.b_inv])
    }
}

/// Channel mixing `Y = W X` on `[t, c_in, g] -> [t, c_out, g]`.
pub fn vn_linear<R: Real>(tape: &Tape<R>, x: Var, w: Var) -> Result<Var> {
    let [_, c_in, _] = expect_rank3(tape, x, "vn_linear")?;
    let ws = tape.shape(w);
    if ws.len() != 2 || ws[1] != c_in {
        return Err(GradError::ShapeMismatch {
            op: "vn_linear",
            axis: 1,
            left: c_in,
            right: ws.get(1).copied().unwrap_or(0),
        });
    }
    let y = tape.contract(x, &[1], w, &[1])?;
    tape.permute(y, &[0, 2, 1])
}

#[derive(Clone, Debug)]
pub struct VnLinear {
    pub c_in: usize,
    pub c_out: usize,
    pub w: ParamId,
}

impl VnLinear {
    pub fn new<R: Real, G: Rng>(b: &mut ParamBuilder<'_, R, G>, c_in: usize, c_out: usize) -> Self {
        let w = b.uniform("w", &[c_out, c_in], c_in);
        Self { c_in, c_out, w }
    }

    pub fn forward<R: Real>(&self, tape: &Tape<R>, p: &Bound, x: Var) -> Result<Var> {
        vn_linear(tape, x, p[self.w])
    }
}

/// Vector Neuron ReLU with a given direction field `k` (same shape as `x`):
/// channels with `<q, k> < 0` lose their component along `k`; `k = 0`
/// passes `q` through.
pub fn vn_relu<R: Real>(tape: &Tape<R>, x: Var, k: Var) -> Result<Var> {
    let prod = tape.mul(x, k)?;
    let dot = tape.sum_axis(prod, 2)?;
    let k_sq = tape.square(k);
    let kk = tape.sum_axis(k_sq, 2)?;
    let neg = tape.neg_part(dot);
    let coef = tape.safe_div(neg, kk)?;
    let along = tape.mul(coef, k)?;
    tape.sub(x, along)
}

/// VN-ReLU with a learned channel-mixing direction.
#[derive(Clone, Debug)]
pub struct VnRelu {
    pub dir: VnLinear,
}

impl VnRelu {
    pub fn new<R: Real, G: Rng>(b: &mut ParamBuilder<'_, R, G>, channels: usize) -> Self {
        Self {
            dir: VnLinear::new(&mut b.scope("dir"), channels, channels),
        }
    }

    pub fn forward<R: Real>(&self, tape: &Tape<R>, p: &Bound, x: Var) -> Result<Var> {
        let k = self.dir.forward(tape, p, x)?;
        vn_relu(tape, x, k)
    }
}

/// VN-ReLU on the equivariant pair, plain ReLU on the invariant components.
#[derive(Clone, Debug)]
pub struct So2Relu {
    pub dir: VnLinear,
}

impl So2Relu {
    pub fn new<R: Real, G: Rng>(b: &mut ParamBuilder<'_, R, G>, channels: usize) -> Self {
        Self {
            dir: VnLinear::new(&mut b.scope("dir"), channels, channels),
        }
    }

    pub fn forward<R: Real>(&self, tape: &Tape<R>, p: &Bound, x: Var) -> Result<Var> {
        so2_relu(tape, x, p[self.dir.w])
    }
}

pub fn so2_relu<R: Real>(tape: &Tape<R>, x: Var, dir_w: Var) -> Result<Var> {
    let [_, _, g] = expect_rank3(tape, x, "so2_relu")?;
    let eq = tape.narrow(x, 2, 0, EQ_DIMS)?;
    let inv = tape.narrow(x, 2, EQ_DIMS, g - EQ_DIMS)?;
    let k = vn_linear(tape, eq, dir_w)?;
    let eq = vn_relu(tape, eq, k)?;
    let inv = tape.relu(inv);
    tape.concat(&[eq, inv], 2)
}

/// Layer normalization of channel-vector norms. Each vector keeps its
/// direction and takes the normalized norm as its new length; zero vectors
/// stay zero.
#[derive(Clone, Debug)]
pub struct VnLayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl VnLayerNorm {
    pub fn new<R: Real, G: Rng>(b: &mut ParamBuilder<'_, R, G>, channels: usize) -> Self {
        Self {
            gamma: b.filled("gamma", &[channels, 1], 1.0),
            beta: b.zeros("beta", &[channels, 1]),
        }
    }

    pub fn forward<R: Real>(&self, tape: &Tape<R>, p: &Bound, x: Var) -> Result<Var> {
        vn_layernorm(tape, x, p[self.gamma], p[self.beta])
    }
}

pub fn vn_layernorm<R: Real>(tape: &Tape<R>, x: Var, gamma: Var, beta: Var) -> Result<Var> {
    expect_rank3(tape, x, "vn_layernorm")?;
    let n = tape.norm_axis(x, 2)?;
    let mu = tape.mean_axis(n, 1)?;
    let centered = tape.sub(n, mu)?;
    let sq = tape.square(centered);
    let var = tape.mean_axis(sq, 1)?;
    let var = tape.offset(var, R::lit(LAYER_NORM_EPS));
    let sd = tape.sqrt(var);
    let normed = tape.div(centered, sd)?;
    let scaled = tape.mul(normed, gamma)?;
    let target = tape.add(scaled, beta)?;
    let ratio = tape.safe_div(target, n)?;
    tape.mul(x, ratio)
}

/// Single-head attention between feature blocks. Scores are Frobenius inner
/// products of whole `[C, g]` token blocks scaled by `1 / sqrt(C g)`, which
/// are invariant to any orthogonal action shared by queries and keys.
pub fn vn_attention<R: Real>(tape: &Tape<R>, q: Var, k: Var, v: Var) -> Result<Var> {
    let [tq, c, g] = expect_rank3(tape, q, "vn_attention")?;
    let [tk, ck, gk] = expect_rank3(tape, k, "vn_attention")?;
    let [tv, cv, gv] = expect_rank3(tape, v, "vn_attention")?;
    if (ck, gk) != (c, g) {
        return Err(GradError::ShapeMismatch {
            op: "vn_attention",
            axis: if ck != c { 1 } else { 2 },
            left: if ck != c { c } else { g },
            right: if ck != c { ck } else { gk },
        });
    }
    if tv != tk {
        return Err(GradError::ShapeMismatch {
            op: "vn_attention",
            axis: 0,
            left: tk,
            right: tv,
        });
    }
    let q2 = tape.reshape(q, &[tq, c * g])?;
    let k2 = tape.reshape(k, &[tk, c * g])?;
    let v2 = tape.reshape(v, &[tv, cv * gv])?;
    let kt = tape.transpose(k2)?;
    let scores = tape.matmul(q2, kt)?;
    let scores = tape.scale(scores, R::one() / R::lit(((c * g) as f64).sqrt()));
    let attn = tape.softmax(scores, 1)?;
    let out = tape.matmul(attn, v2)?;
    tape.reshape(out, &[tq, cv, gv])
}

/// Rotation-invariant features of a `[D, 3]` latent: a small VN-MLP
/// produces a 3-channel frame `T` that co-rotates with `Z`, and
/// `Z' = Z T^T` is unchanged by any rotation of `Z`.
#[derive(Clone, Debug)]
pub struct VnInvariant {
    pub first: VnLinear,
    pub relu: VnRelu,
    pub frame: VnLinear,
}

impl VnInvariant {
    pub fn new<R: Real, G: Rng>(b: &mut ParamBuilder<'_, R, G>, latent_dim: usize, hidden: usize) -> Self {
        Self {
            first: VnLinear::new(&mut b.scope("first"), latent_dim, hidden),
            relu: VnRelu::new(&mut b.scope("relu"), hidden),
            frame: VnLinear::new(&mut b.scope("frame"), hidden, 3),
        }
    }

    /// Returns `(Z', T)`.
    pub fn forward<R: Real>(&self, tape: &Tape<R>, p: &Bound, z: Var) -> Result<(Var, Var)> {
        let s = tape.shape(z);
        if s.len() != 2 || s[1] != 3 {
            return Err(GradError::Invalid {
                op: "vn_invariant",
                detail: format!("expected a [D, 3] latent, got {s:?}"),
            });
        }
        let z3 = tape.reshape(z, &[1, s[0], 3])?;
        let h = self.first.forward(tape, p, z3)?;
        let h = self.relu.forward(tape, p, h)?;
        let frame = self.frame.forward(tape, p, h)?;
        let frame = tape.reshape(frame, &[3, 3])?;
        let inv = tape.contract(z, &[1], frame, &[1])?;
        Ok((inv, frame))
    }
}

/// Applies `m` to every vector along the last axis: `v -> m v`.
pub fn act_last_axis(x: &ArrayD<f64>, m: &Array2<f64>) -> ArrayD<f64> {
    let g = *x.shape().last().expect("non-scalar");
    assert_eq!(m.nrows(), g);
    let flat = x
        .view()
        .into_shape_with_order((x.len() / g, g))
        .expect("standard layout");
    let out = flat.dot(&m.t());
    out.into_shape_with_order(IxDyn(x.shape())).expect("same size")
}

/// A group acting on layer inputs and outputs.
pub trait GroupAction {
    type Element;

    fn sample(&self, rng: &mut ChaCha8Rng) -> Self::Element;
    fn act_input(&self, g: &Self::Element, x: &ArrayD<f64>) -> ArrayD<f64>;
    fn act_output(&self, g: &Self::Element, y: &ArrayD<f64>) -> ArrayD<f64>;
}

/// Rotations about the up axis acting as `block-diag(Rz, I)` on the last
/// axis of both input and output.
pub struct RotZAction;

impl GroupAction for RotZAction {
    type Element = f64;

    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        rng.random_range(0.0..std::f64::consts::TAU)
    }

    fn act_input(&self, angle: &f64, x: &ArrayD<f64>) -> ArrayD<f64> {
        let g = *x.shape().last().unwrap();
        act_last_axis(x, &rotation_z(*angle).matrix_g(g))
    }

    fn act_output(&self, angle: &f64, y: &ArrayD<f64>) -> ArrayD<f64> {
        self.act_input(angle, y)
    }
}

/// Random orthogonal matrices (Haar, via Gram-Schmidt) on the last axis.
pub struct OrthogonalAction {
    pub dim: usize,
}

pub fn random_orthogonal(rng: &mut ChaCha8Rng, dim: usize) -> Array2<f64> {
    loop {
        let mut m = Array2::from_shape_fn((dim, dim), |_| rng.sample::<f64, _>(StandardNormal));
        let mut ok = true;
        for i in 0..dim {
            for j in 0..i {
                let proj = m.row(i).dot(&m.row(j));
                let rj = m.row(j).to_owned();
                m.row_mut(i).scaled_add(-proj, &rj);
            }
            let n = m.row(i).dot(&m.row(i)).sqrt();
            if n < 1e-6 {
                ok = false;
                break;
            }
            m.row_mut(i).mapv_inplace(|v| v / n);
        }
        if ok {
            return m;
        }
    }
}

impl GroupAction for OrthogonalAction {
    type Element = Array2<f64>;

    fn sample(&self, rng: &mut ChaCha8Rng) -> Array2<f64> {
        random_orthogonal(rng, self.dim)
    }

    fn act_input(&self, m: &Array2<f64>, x: &ArrayD<f64>) -> ArrayD<f64> {
        act_last_axis(x, m)
    }

    fn act_output(&self, m: &Array2<f64>, y: &ArrayD<f64>) -> ArrayD<f64> {
        act_last_axis(y, m)
    }
}

/// SO(3) acting on the last (length 3) axis of the input; the output is
/// expected to be invariant.
pub struct So3Invariance;

impl GroupAction for So3Invariance {
    type Element = Array2<f64>;

    fn sample(&self, rng: &mut ChaCha8Rng) -> Array2<f64> {
        let r = random_rotation(rng);
        Array2::from_shape_fn((3, 3), |(i, j)| r[i][j])
    }

    fn act_input(&self, m: &Array2<f64>, x: &ArrayD<f64>) -> ArrayD<f64> {
        act_last_axis(x, m)
    }

    fn act_output(&self, _: &Array2<f64>, y: &ArrayD<f64>) -> ArrayD<f64> {
        y.clone()
    }
}

/// Max over `n_samples` random inputs and group elements of
/// `|layer(g x) - g layer(x)|_inf`.
pub fn check_equivariance<A: GroupAction>(
    layer: impl Fn(&ArrayD<f64>) -> ArrayD<f64>,
    action: &A,
    mut input: impl FnMut(&mut ChaCha8Rng) -> ArrayD<f64>,
    n_samples: usize,
    seed: u64,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..n_samples {
        let x = input(&mut rng);
        let g = action.sample(&mut rng);
        let lhs = layer(&action.act_input(&g, &x));
        let rhs = action.act_output(&g, &layer(&x));
        assert_eq!(lhs.shape(), rhs.shape(), "layer changed shape under the action");
        let dev = lhs
            .iter()
            .zip(rhs.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        worst = worst.max(dev);
    }
    worst
}

/// Helper for tests and checks: evaluates a forward closure on a fresh tape
/// with the given parameters, in precision `R`, and returns `f64` output.
pub fn eval_on_tape<R: Real>(x: &ArrayD<f64>, f: impl FnOnce(&Tape<R>, Var) -> Result<Var>) -> Result<ArrayD<f64>> {
    let tape = Tape::<R>::new();
    let v = tape.constant(x.mapv(R::lit));
    let y = f(&tape, v)?;
    let out = tape.value(y).mapv(|v| v.as_f64());
    Ok(out)
}

/// Sums over the last axis; used to compare against loop oracles.
pub fn last_axis_dot(a: &ArrayD<f64>, b: &ArrayD<f64>) -> ArrayD<f64> {
    let ax = Axis(a.ndim() - 1);
    (a * b).sum_axis(ax)
}

#[cfg(test)]
mod tests;
