//! Reconstruction and latent losses on `[H, W, 3]` log-radiance maps.
//!
//! Every image loss weights pixels by `sin(theta)` of their row.

use ndarray::{Array1, Array2, Array3, ArrayD, IxDyn};

use crate::autodiff::{GradError, Real, Result, Tape, Var};
use crate::sphere::EquirectGrid;

pub const MAGE_WEIGHT: f64 = 0.5;
pub const KLD_WEIGHT: f64 = 0.01;
pub const MAGE_SCALES: usize = 2;
/// Linear-space floor applied to ground truth in the cosine term.
pub const COSINE_FLOOR: f64 = 1e-8;

/// Horizontal Scharr kernel, normalized.
pub const SCHARR_X: [[f64; 3]; 3] = [
    [3.0 / 16.0, 0.0, -3.0 / 16.0],
    [10.0 / 16.0, 0.0, -10.0 / 16.0],
    [3.0 / 16.0, 0.0, -3.0 / 16.0],
];

pub fn scharr_y() -> [[f64; 3]; 3] {
    let mut k = [[0.0; 3]; 3];
    for (i, row) in k.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = SCHARR_X[j][i];
        }
    }
    k
}

fn kernel<R: Real>(k: [[f64; 3]; 3]) -> [[R; 3]; 3] {
    k.map(|row| row.map(R::lit))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub mage: f64,
    pub scale_inv: f64,
    pub cosine: f64,
    pub kld: f64,
    pub combined: f64,
}

impl LossBreakdown {
    pub fn from_parts(mage: f64, scale_inv: f64, cosine: f64, kld: f64) -> Self {
        Self {
            mage,
            scale_inv,
            cosine,
            kld,
            combined: MAGE_WEIGHT * mage + scale_inv + cosine + KLD_WEIGHT * kld,
        }
    }
}

/// Per-row `sin(theta)` as a `[H, 1, 1]` constant.
pub fn row_weights<R: Real>(tape: &Tape<R>, height: usize) -> Var {
    let w = EquirectGrid::new(height, 1).row_weights();
    tape.constant(ArrayD::from_shape_vec(IxDyn(&[height, 1, 1]), w.into_iter().map(R::lit).collect()).unwrap())
}

fn image_dims<R: Real>(tape: &Tape<R>, x: Var, op: &'static str) -> Result<(usize, usize, usize)> {
    let s = tape.shape(x);
    if s.len() != 3 {
        return Err(GradError::Rank {
            op,
            expected: 3,
            got: s.len(),
        });
    }
    Ok((s[0], s[1], s[2]))
}

fn same_shape<R: Real>(tape: &Tape<R>, a: Var, b: Var, op: &'static str) -> Result<()> {
    let (sa, sb) = (tape.shape(a), tape.shape(b));
    if let Some(axis) = (0..sa.len().max(sb.len())).find(|&i| sa.get(i) != sb.get(i)) {
        return Err(GradError::ShapeMismatch {
            op,
            axis,
            left: sa.get(axis).copied().unwrap_or(0),
            right: sb.get(axis).copied().unwrap_or(0),
        });
    }
    Ok(())
}

/// Scharr derivatives `(gx, gy)` of an `[H, W, C]` image, wrapping
/// horizontally and replicating vertically.
pub fn scharr<R: Real>(tape: &Tape<R>, img: Var) -> Result<(Var, Var)> {
    let (h, w, _) = image_dims(tape, img, "scharr")?;
    if h < 3 || w < 3 {
        return Err(GradError::Invalid {
            op: "scharr",
            detail: format!("image {h}x{w} is smaller than the 3x3 kernel"),
        });
    }
    let gx = tape.correlate3x3(img, kernel(SCHARR_X))?;
    let gy = tape.correlate3x3(img, kernel(scharr_y()))?;
    Ok((gx, gy))
}

/// Multi-scale mean absolute gradient error. Scale `j + 1` is a 2x average
/// pool of scale `j`; scales that are too small for the kernel (or cannot be
/// pooled evenly) are dropped, and the remaining scales are averaged.
pub fn mage_loss<R: Real>(tape: &Tape<R>, pred: Var, gt: Var, scales: usize) -> Result<Var> {
    same_shape(tape, pred, gt, "mage_loss")?;
    if scales == 0 {
        return Err(GradError::Invalid {
            op: "mage_loss",
            detail: "at least one scale required".into(),
        });
    }
    let mut diff = tape.sub(pred, gt)?;
    let mut terms = Vec::new();
    for level in 0..scales {
        let (h, w, _) = image_dims(tape, diff, "mage_loss")?;
        if level > 0 {
            if h % 2 != 0 || w % 2 != 0 || h / 2 < 3 || w / 2 < 3 {
                break;
            }
            diff = tape.avg_pool2(diff)?;
        } else if h < 3 || w < 3 {
            return Err(GradError::Invalid {
                op: "mage_loss",
                detail: format!("image {h}x{w} is smaller than the 3x3 kernel"),
            });
        }
        let (h, w, _) = image_dims(tape, diff, "mage_loss")?;
        let (gx, gy) = scharr(tape, diff)?;
        let ax = tape.abs(gx);
        let ay = tape.abs(gy);
        let both = tape.add(ax, ay)?;
        let weighted = tape.mul(both, row_weights(tape, h))?;
        let total = tape.sum(weighted);
        terms.push(tape.scale(total, R::one() / R::lit((h * w) as f64)));
    }
    let n = terms.len();
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(tape.scale(acc, R::one() / R::lit(n as f64)))
}

/// `(1/N) sum R^2 - (1/N^2) (sum R)^2` with `R = sin(theta) (pred - gt)`
/// per color channel, averaged over channels.
pub fn scale_invariant_loss<R: Real>(tape: &Tape<R>, pred: Var, gt: Var) -> Result<Var> {
    same_shape(tape, pred, gt, "scale_invariant_loss")?;
    let (h, w, c) = image_dims(tape, pred, "scale_invariant_loss")?;
    let diff = tape.sub(pred, gt)?;
    let r = tape.mul(diff, row_weights(tape, h))?;
    let r = tape.reshape(r, &[h * w, c])?;
    let sq = tape.square(r);
    let mean_sq = tape.mean_axis(sq, 0)?;
    let mean = tape.mean_axis(r, 0)?;
    let mean2 = tape.square(mean);
    let per_channel = tape.sub(mean_sq, mean2)?;
    Ok(tape.mean(per_channel))
}

/// `1 - mean(sin(theta) cos(pred, gt))` over RGB vectors in linear space.
/// `pred_lin` must be positive; `gt_lin` is a constant clamped at
/// [`COSINE_FLOOR`].
pub fn cosine_loss<R: Real>(tape: &Tape<R>, pred_lin: Var, gt_lin: &Array3<f64>) -> Result<Var> {
    let (h, w, c) = image_dims(tape, pred_lin, "cosine_loss")?;
    if gt_lin.dim() != (h, w, c) {
        return Err(GradError::ShapeMismatch {
            op: "cosine_loss",
            axis: 0,
            left: h * w * c,
            right: gt_lin.len(),
        });
    }
    let gt = gt_lin.mapv(|v| v.max(COSINE_FLOOR));
    let gt_norm = gt
        .map_axis(ndarray::Axis(2), |v| v.dot(&v).sqrt())
        .insert_axis(ndarray::Axis(2));
    let gt_unit = tape.constant((&gt / &gt_norm).mapv(R::lit).into_dyn());
    let dot = tape.mul(pred_lin, gt_unit)?;
    let dot = tape.sum_axis(dot, 2)?;
    let pn = tape.norm_axis(pred_lin, 2)?;
    let cos = tape.safe_div(dot, pn)?;
    let weighted = tape.mul(cos, row_weights(tape, h))?;
    let m = tape.mean(weighted);
    Ok(tape.affine(m, -R::one(), R::one()))
}

/// `(1/D) sum_i -0.5 (3 + 3 log v_i - |mu_i|^2 - 3 v_i)` with `mu [D, 3]`
/// and `log_var [D]`.
pub fn kld_loss<R: Real>(tape: &Tape<R>, mu: Var, log_var: Var) -> Result<Var> {
    let d = tape.shape(log_var)[0];
    let ms = tape.shape(mu);
    if ms != [d, 3] {
        return Err(GradError::Invalid {
            op: "kld_loss",
            detail: format!("mean {ms:?} does not match {d} variances"),
        });
    }
    let mu_sq = tape.square(mu);
    let mu_sq = tape.sum_axis(mu_sq, 1)?;
    let mu_sq = tape.reshape(mu_sq, &[d])?;
    let var = tape.exp(log_var);
    // 3 + 3 lv - |mu|^2 - 3 v
    let a = tape.affine(log_var, R::lit(3.0), R::lit(3.0));
    let a = tape.sub(a, mu_sq)?;
    let b = tape.scale(var, R::lit(3.0));
    let inner = tape.sub(a, b)?;
    let m = tape.mean(inner);
    Ok(tape.scale(m, R::lit(-0.5)))
}

/// [`kld_loss`] on plain arrays with explicit variances.
pub fn kld_value(mu: &Array2<f64>, variance: &Array1<f64>) -> std::result::Result<f64, GradError> {
    if let Some(v) = variance.iter().find(|v| v.is_nan() || **v <= 0.0) {
        return Err(GradError::Invalid {
            op: "kld_loss",
            detail: format!("variance must be positive, got {v}"),
        });
    }
    let tape = Tape::<f64>::new();
    let m = tape.constant(mu.clone().into_dyn());
    let lv = tape.constant(variance.mapv(f64::ln).into_dyn());
    let k = kld_loss(&tape, m, lv)?;
    Ok(tape.item(k))
}

/// Autodecoder prior `(1/D) sum_i 0.5 |Z_i|^2`.
pub fn latent_prior<R: Real>(tape: &Tape<R>, z: Var) -> Result<Var> {
    let d = tape.shape(z)[0];
    let sq = tape.square(z);
    let s = tape.sum(sq);
    Ok(tape.scale(s, R::lit(0.5 / d as f64)))
}

/// Loss terms on a tape, kept separate so callers can read each value.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub mage: Var,
    pub scale_inv: Var,
    pub cosine: Var,
    /// KLD for the VAE, latent prior for the autodecoder.
    pub latent: Var,
    pub combined: Var,
}

impl LossVars {
    pub fn breakdown<R: Real>(&self, tape: &Tape<R>) -> LossBreakdown {
        let v = |x: Var| tape.item(x).as_f64();
        LossBreakdown {
            mage: v(self.mage),
            scale_inv: v(self.scale_inv),
            cosine: v(self.cosine),
            kld: v(self.latent),
            combined: v(self.combined),
        }
    }
}

/// Reconstruction terms plus a latent regularizer (already on the tape),
/// combined as `0.5 mage + scale_inv + cosine + 0.01 latent`.
pub fn combined_loss<R: Real>(tape: &Tape<R>, pred_log: Var, gt_log: &Array3<f64>, latent: Var) -> Result<LossVars> {
    combined_loss_weighted(tape, pred_log, gt_log, latent, KLD_WEIGHT)
}

/// [`combined_loss`] with a custom weight on the latent term.
pub fn combined_loss_weighted<R: Real>(
    tape: &Tape<R>,
    pred_log: Var,
    gt_log: &Array3<f64>,
    latent: Var,
    latent_weight: f64,
) -> Result<LossVars> {
    let gt = tape.constant(gt_log.mapv(R::lit).into_dyn());
    let mage = mage_loss(tape, pred_log, gt, MAGE_SCALES)?;
    let scale_inv = scale_invariant_loss(tape, pred_log, gt)?;
    let pred_lin = tape.exp(pred_log);
    let cosine = cosine_loss(tape, pred_lin, &gt_log.mapv(f64::exp))?;
    let a = tape.scale(mage, R::lit(MAGE_WEIGHT));
    let b = tape.add(a, scale_inv)?;
    let b = tape.add(b, cosine)?;
    let c = tape.scale(latent, R::lit(latent_weight));
    let combined = tape.add(b, c)?;
    Ok(LossVars {
        mage,
        scale_inv,
        cosine,
        latent,
        combined,
    })
}

/// Evaluates the loss terms for fixed arrays in 64-bit.
pub fn evaluate(
    pred_log: &Array3<f64>,
    gt_log: &Array3<f64>,
    mu: &Array2<f64>,
    log_var: &Array1<f64>,
) -> Result<LossBreakdown> {
    let tape = Tape::<f64>::new();
    let p = tape.constant(pred_log.clone().into_dyn());
    let m = tape.constant(mu.clone().into_dyn());
    let lv = tape.constant(log_var.clone().into_dyn());
    let kld = kld_loss(&tape, m, lv)?;
    let vars = combined_loss(&tape, p, gt_log, kld)?;
    Ok(vars.breakdown(&tape))
}
