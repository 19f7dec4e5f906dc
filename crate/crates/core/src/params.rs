//! Named parameter blocks shared by every model component.

use std::ops::Index;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;

use crate::autodiff::{Gradients, Real, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<R> {
    pub name: String,
    pub value: ArrayD<R>,
    /// Multiplicative 0/1 mask re-applied after every optimizer step.
    pub mask: Option<ArrayD<R>>,
}

/// Ordered collection of named parameter arrays.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<R> {
    params: Vec<Param<R>>,
}

impl<R: Real> ParamStore<R> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<R>) -> ParamId {
        let name = name.into();
        assert!(self.id(&name).is_none(), "duplicate parameter name {name}");
        self.params.push(Param {
            name,
            value,
            mask: None,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn set_mask(&mut self, id: ParamId, mask: ArrayD<R>) {
        assert_eq!(mask.shape(), self.params[id.0].value.shape());
        self.params[id.0].mask = Some(mask);
        self.apply_masks();
    }

    pub fn apply_masks(&mut self) {
        for p in &mut self.params {
            if let Some(m) = &p.mask {
                p.value *= m;
            }
        }
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<R> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<R> {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<R>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<R>> {
        self.params.iter_mut()
    }

    /// Total scalar count, optionally restricted to names with `prefix`.
    pub fn count(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.value.len())
            .sum()
    }

    /// Puts every parameter on `tape`. Parameters whose name starts with one
    /// of `trainable` prefixes become leaves; the rest are constants.
    pub fn bind(&self, tape: &Tape<R>, trainable: &[&str]) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if trainable.iter().any(|t| p.name.starts_with(t)) {
                    tape.leaf(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect();
        Bound(vars)
    }

    /// Gradients for each parameter in store order (`None` when untouched).
    pub fn collect_grads(&self, bound: &Bound, grads: &mut Gradients<R>) -> Vec<Option<ArrayD<R>>> {
        bound.0.iter().map(|&v| grads.take(v)).collect()
    }

    pub fn cast<S: Real>(&self) -> ParamStore<S> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.mapv(|v| S::lit(v.as_f64())),
                    mask: p.mask.as_ref().map(|m| m.mapv(|v| S::lit(v.as_f64()))),
                })
                .collect(),
        }
    }

    /// Copies values for matching names from `other` (shapes must agree).
    pub fn load_values(&mut self, other: &ParamStore<R>) -> Result<(), String> {
        for p in &mut self.params {
            let src = other
                .params
                .iter()
                .find(|q| q.name == p.name)
                .ok_or_else(|| format!("missing parameter {}", p.name))?;
            if src.value.shape() != p.value.shape() {
                return Err(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    p.name,
                    src.value.shape(),
                    p.value.shape()
                ));
            }
            p.value.assign(&src.value);
        }
        self.apply_masks();
        Ok(())
    }
}

/// Parameters placed on a tape, indexed by [`ParamId`].
pub struct Bound(Vec<Var>);

impl Bound {
    /// Wraps tape variables given in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

/// Registers parameters under a name prefix with uniform fan-in scaled
/// initialization.
pub struct ParamBuilder<'a, R, G> {
    store: &'a mut ParamStore<R>,
    rng: &'a mut G,
    prefix: String,
}

impl<'a, R: Real, G: Rng> ParamBuilder<'a, R, G> {
    pub fn new(store: &'a mut ParamStore<R>, rng: &'a mut G) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    /// Builder whose names are prefixed with `scope.`.
    pub fn scope<'b>(&'b mut self, scope: &str) -> ParamBuilder<'b, R, G> {
        let prefix = if self.prefix.is_empty() {
            scope.to_string()
        } else {
            format!("{}.{}", self.prefix, scope)
        };
        ParamBuilder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    /// Uniform in `[-a, a]` with `a = sqrt(1 / fan_in)`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let a = (1.0 / fan_in.max(1) as f64).sqrt();
        let value = ArrayD::from_shape_fn(IxDyn(shape), |_| R::lit(self.rng.random_range(-a..=a)));
        let full = self.full_name(name);
        self.store.add(full, value)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        let full = self.full_name(name);
        self.store.add(full, ArrayD::zeros(IxDyn(shape)))
    }

    pub fn filled(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        let full = self.full_name(name);
        self.store.add(full, ArrayD::from_elem(IxDyn(shape), R::lit(value)))
    }

    pub fn mask(&mut self, id: ParamId, mask: ArrayD<R>) {
        self.store.set_mask(id, mask);
    }
}
