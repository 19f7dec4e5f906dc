use ndarray::{ArrayD, ArrayViewMutD, IxDyn, Zip};

use crate::autodiff::Real;
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One update of `value` given moments and the 1-based step count.
    pub fn update<R: Real>(
        &self,
        value: ArrayViewMutD<'_, R>,
        grad: &ArrayD<R>,
        m: ArrayViewMutD<'_, R>,
        v: ArrayViewMutD<'_, R>,
        step: u64,
    ) {
        let (b1, b2) = (R::lit(self.beta1), R::lit(self.beta2));
        let c1 = R::lit(1.0 - self.beta1.powi(step as i32));
        let c2 = R::lit(1.0 - self.beta2.powi(step as i32));
        let (lr, eps) = (R::lit(self.lr), R::lit(self.eps));
        let one = R::one();
        Zip::from(value).and(grad).and(m).and(v).for_each(|p, &g, m, v| {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let mh = *m / c1;
            let vh = *v / c2;
            *p -= lr * mh / (vh.sqrt() + eps);
        });
    }
}

/// Moments for every parameter of a store plus the shared step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<R> {
    pub m: Vec<ArrayD<R>>,
    pub v: Vec<ArrayD<R>>,
    pub step: u64,
}

impl<R: Real> AdamState<R> {
    pub fn for_store(store: &ParamStore<R>) -> Self {
        let zeros = || store.iter().map(|p| ArrayD::zeros(p.value.raw_dim())).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    /// Applies one step. Parameters with no gradient are treated as having
    /// a zero gradient. Masks are re-applied afterwards.
    pub fn apply(&mut self, adam: &Adam, store: &mut ParamStore<R>, grads: &[Option<ArrayD<R>>]) {
        assert_eq!(grads.len(), store.len());
        self.step += 1;
        for ((param, g), (m, v)) in store
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let zero;
            let g = match g {
                Some(g) => g,
                None => {
                    zero = ArrayD::zeros(param.value.raw_dim());
                    &zero
                }
            };
            adam.update(param.value.view_mut(), g, m.view_mut(), v.view_mut(), self.step);
        }
        store.apply_masks();
    }
}

/// Per-example latent codes `[n, D, 3]` with row-wise Adam state, so rows
/// outside a batch keep their moments and step counts.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentTable<R> {
    pub codes: ArrayD<R>,
    pub m: ArrayD<R>,
    pub v: ArrayD<R>,
    pub steps: Vec<u64>,
}

impl<R: Real> LatentTable<R> {
    pub fn new(codes: ArrayD<R>) -> Self {
        let n = codes.shape()[0];
        Self {
            m: ArrayD::zeros(codes.raw_dim()),
            v: ArrayD::zeros(codes.raw_dim()),
            codes,
            steps: vec![0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn row(&self, i: usize) -> ArrayD<R> {
        let s = self.codes.shape();
        self.codes
            .index_axis(ndarray::Axis(0), i)
            .to_owned()
            .into_shape_with_order(IxDyn(&s[1..]))
            .expect("row shape")
    }

    pub fn update_row(&mut self, adam: &Adam, i: usize, grad: &ArrayD<R>) {
        self.steps[i] += 1;
        let ax = ndarray::Axis(0);
        adam.update(
            self.codes.index_axis_mut(ax, i),
            grad,
            self.m.index_axis_mut(ax, i),
            self.v.index_axis_mut(ax, i),
            self.steps[i],
        );
    }
}
