use ndarray::ArrayD;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{GradError, Result, Tape, Var};

/// Controls for [`grad_check_inputs`].
#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Check at most this many coordinates per input, chosen with `seed`.
    pub max_coords_per_input: Option<usize>,
    pub seed: u64,
    /// Gradient magnitude below which errors are measured relative to this
    /// floor instead of the gradient itself.
    pub min_scale: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            max_coords_per_input: None,
            seed: 0,
            min_scale: 1e-8,
        }
    }
}

/// Max relative error between the reverse-mode gradient of scalar `f` at `x`
/// and central differences `(f(x+eps) - f(x-eps)) / (2 eps)`. The relative
/// error of each coordinate uses `max(|analytic|, |numeric|, min_scale)` as
/// the denominator.
pub fn grad_check<F>(f: F, x: &ArrayD<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&Tape<f64>, Var) -> Result<Var>,
{
    grad_check_inputs(
        |tape, vars| f(tape, vars[0]),
        std::slice::from_ref(x),
        &GradCheckOptions {
            eps,
            ..Default::default()
        },
    )
}

/// Multi-input form of [`grad_check`]; every input is a leaf.
pub fn grad_check_inputs<F>(f: F, inputs: &[ArrayD<f64>], opts: &GradCheckOptions) -> Result<f64>
where
    F: Fn(&Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[ArrayD<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.constant(v.clone())).collect();
        let y = f(&tape, &vars)?;
        let out = tape.value(y);
        if out.len() != 1 {
            return Err(GradError::NotScalar(out.shape().to_vec()));
        }
        Ok(out.iter().next().copied().unwrap_or(0.0))
    };

    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.leaf(v.clone())).collect();
    let y = f(&tape, &vars)?;
    let grads = tape.backward(y)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut worst = 0.0f64;
    let mut probe: Vec<ArrayD<f64>> = inputs.to_vec();
    for (which, var) in vars.iter().enumerate() {
        let n = inputs[which].len();
        let coords: Vec<usize> = match opts.max_coords_per_input {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        let analytic = grads.get(*var);
        for idx in coords {
            let base = inputs[which].as_slice_memory_order().expect("contiguous")[idx];
            probe[which].as_slice_memory_order_mut().expect("contiguous")[idx] = base + opts.eps;
            let plus = eval(&probe)?;
            probe[which].as_slice_memory_order_mut().expect("contiguous")[idx] = base - opts.eps;
            let minus = eval(&probe)?;
            probe[which].as_slice_memory_order_mut().expect("contiguous")[idx] = base;

            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = analytic
                .map(|g| g.as_slice_memory_order().expect("contiguous")[idx])
                .unwrap_or(0.0);
            let denom = a.abs().max(numeric.abs()).max(opts.min_scale);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
