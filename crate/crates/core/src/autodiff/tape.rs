use std::cell::{Ref, RefCell};

use ndarray::{concatenate, ArrayD, ArrayViewD, Axis, Ix2, IxDyn, Slice, Zip};

use super::{GradError, Real, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<R> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    SafeDiv(Var, Var),
    /// `scale * x + shift`
    Affine(Var, R),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Abs(Var),
    Sqrt(Var),
    Square(Var),
    MatMul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Sum(Var),
    Mean(Var, usize),
    SumAll(Var),
    Norm(Var),
    Softmax(Var, usize),
    Concat(Vec<Var>, usize),
    Narrow(Var, usize, usize),
    Correlate3x3(Var, [[R; 3]; 3]),
    AvgPool2(Var),
}

struct Node<R> {
    value: ArrayD<R>,
    op: Op<R>,
    tracked: bool,
}

/// Lower clamp applied before taking logarithms.
pub const LOG_FLOOR: f64 = 1e-8;

/// Operation record for one forward/backward pass.
///
/// Operations take `&self`, so nested expressions such as
/// `tape.relu(tape.add(x, b)?)?` are fine. A tape is not `Sync`; use one per
/// thread.
pub struct Tape<R: Real> {
    nodes: RefCell<Vec<Node<R>>>,
}

impl<R: Real> Default for Tape<R> {
    fn default() -> Self {
        Self::new()
    }
}

fn standard<R: Real>(a: ArrayD<R>) -> ArrayD<R> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            (x, y) => {
                return Err(GradError::ShapeMismatch {
                    op,
                    axis: i,
                    left: x,
                    right: y,
                })
            }
        };
    }
    Ok(out)
}

/// Sums `grad` down to `shape`, undoing numpy-style broadcasting.
fn unbroadcast<R: Real>(grad: ArrayD<R>, shape: &[usize]) -> ArrayD<R> {
    let mut g = grad;
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for (ax, &n) in shape.iter().enumerate() {
        if n == 1 && g.shape()[ax] != 1 {
            g = g.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    g
}

fn check_axis(op: &'static str, axis: usize, rank: usize) -> Result<()> {
    if axis >= rank {
        Err(GradError::AxisOutOfRange { op, axis, rank })
    } else {
        Ok(())
    }
}

fn check_rank(op: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        Err(GradError::Rank { op, expected, got })
    } else {
        Ok(())
    }
}

impl<R: Real> Tape<R> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: ArrayD<R>, op: Op<R>, tracked: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: standard(value),
            op,
            tracked,
        });
        Var(nodes.len() - 1)
    }

    /// A differentiable input.
    pub fn leaf(&self, value: ArrayD<R>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// An input that never receives a gradient.
    pub fn constant(&self, value: ArrayD<R>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, x: R) -> Var {
        self.constant(ArrayD::from_elem(IxDyn(&[]), x))
    }

    pub fn value(&self, v: Var) -> Ref<'_, ArrayD<R>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Value of a single-element var.
    pub fn item(&self, v: Var) -> R {
        let nodes = self.nodes.borrow();
        let a = &nodes[v.0].value;
        a.iter().next().copied().unwrap_or_else(R::zero)
    }

    fn unary(&self, x: Var, f: impl Fn(R) -> R, op: Op<R>) -> Var {
        let (out, tracked) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[x.0];
            (n.value.mapv(f), n.tracked)
        };
        self.push(out, op, tracked)
    }

    fn binary(&self, name: &'static str, a: Var, b: Var, f: impl Fn(R, R) -> R, op: Op<R>) -> Result<Var> {
        let (out, tracked) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.0], &nodes[b.0]);
            let shape = broadcast_shape(name, na.value.shape(), nb.value.shape())?;
            let va = na.value.broadcast(IxDyn(&shape)).expect("checked broadcast");
            let vb = nb.value.broadcast(IxDyn(&shape)).expect("checked broadcast");
            let mut out = ArrayD::zeros(IxDyn(&shape));
            Zip::from(&mut out).and(&va).and(&vb).for_each(|o, &x, &y| *o = f(x, y));
            (out, na.tracked || nb.tracked)
        };
        Ok(self.push(out, op, tracked))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// `a / b` where `b != 0`, and `0` (with zero gradient) where `b == 0`.
    pub fn safe_div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(
            "safe_div",
            a,
            b,
            |x, y| if y == R::zero() { R::zero() } else { x / y },
            Op::SafeDiv(a, b),
        )
    }

    /// `scale * x + shift`.
    pub fn affine(&self, x: Var, scale: R, shift: R) -> Var {
        self.unary(x, |v| scale * v + shift, Op::Affine(x, scale))
    }

    pub fn scale(&self, x: Var, scale: R) -> Var {
        self.affine(x, scale, R::zero())
    }

    pub fn neg(&self, x: Var) -> Var {
        self.affine(x, -R::one(), R::zero())
    }

    pub fn offset(&self, x: Var, shift: R) -> Var {
        self.affine(x, R::one(), shift)
    }

    pub fn exp(&self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), Op::Exp(x))
    }

    /// Natural log with inputs clamped below at [`LOG_FLOOR`].
    pub fn log(&self, x: Var) -> Var {
        let floor = R::lit(LOG_FLOOR);
        self.unary(x, move |v| v.max(floor).ln(), Op::Log(x))
    }

    pub fn relu(&self, x: Var) -> Var {
        self.unary(x, |v| v.max(R::zero()), Op::Relu(x))
    }

    pub fn abs(&self, x: Var) -> Var {
        self.unary(x, |v| v.abs(), Op::Abs(x))
    }

    pub fn sqrt(&self, x: Var) -> Var {
        self.unary(x, |v| v.sqrt(), Op::Sqrt(x))
    }

    pub fn square(&self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    /// Plain 2-D matrix product `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (out, tracked) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.0], &nodes[b.0]);
            check_rank("matmul", 2, na.value.ndim())?;
            check_rank("matmul", 2, nb.value.ndim())?;
            let va = na.value.view().into_dimensionality::<Ix2>().expect("rank 2");
            let vb = nb.value.view().into_dimensionality::<Ix2>().expect("rank 2");
            if va.ncols() != vb.nrows() {
                return Err(GradError::ShapeMismatch {
                    op: "matmul",
                    axis: 1,
                    left: va.ncols(),
                    right: vb.nrows(),
                });
            }
            (va.dot(&vb).into_dyn(), na.tracked || nb.tracked)
        };
        Ok(self.push(out, Op::MatMul(a, b), tracked))
    }

    pub fn permute(&self, x: Var, axes: &[usize]) -> Result<Var> {
        let (out, tracked) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[x.0];
            let rank = n.value.ndim();
            check_rank("permute", rank, axes.len())?;
            let mut seen = vec![false; rank];
            for &a in axes {
                check_axis("permute", a, rank)?;
                if seen[a] {
                    return Err(GradError::Invalid {
                        op: "permute",
                        detail: format!("axis {a} repeated"),
                    });
                }
                seen[a] = true;
            }
            let p = n.value.clone().permuted_axes(IxDyn(axes));
            (p.as_standard_layout().into_owned(), n.tracked)
        };
        Ok(self.push(out, Op::Permute(x, axes.to_vec()), tracked))
    }

    /// 2-D transpose.
    pub fn transpose(&self, x: Var) -> Result<Var> {
        self.permute(x, &[1, 0])
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let (out, tracked) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[x.0];
            let from = n.value.shape().to_vec();
            let out = n
                .value
                .clone()
                .into_shape_with_order(IxDyn(shape))
                .map_err(|_| GradError::Reshape {
                    op: "reshape",
                    from,
                    to: shape.to_vec(),
                })?;
            (out, n.tracked)
        };
        Ok(self.push(out, Op::Reshape(x), tracked))
    }

    /// Sum over `axis`, keeping it with length one.
    pub fn sum_axis(&self, x: Var, axis: usize) -> Result<Var> {
        let (out, tracked) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[x.0];
            check_axis("sum_axis", axis, n.value.ndim())?;
            (n.value.sum_axis(Axis(axis)).insert_axis(Axis(axis)), n.tracked)
        };
        Ok(self.push(out, Op::Sum(x), tracked))
    }

    /// Mean over `axis`, keeping it with length one.
    pub fn mean_axis(&self, x: Var, axis: usize) -> Result<Var> {
        let (out, tracked) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[x.0];
            check_axis("mean_axis", axis, n.value.ndim())?;
            let len = R::from_usize(n.value.shape()[axis]).unwrap();
            ((n.value.sum_axis(Axis(axis)) / len).insert_axis(Axis(axis)), n.tracked)
        };
        Ok(self.push(out, Op::Mean(x, axis), tracked))
    }

    /// Sum of all elements as a rank-0 value.
    pub fn sum(&self, x: Var) -> Var {
        let (out, tracked) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[x.0];
            (ArrayD::from_elem(IxDyn(&[]), n.value.sum()), n.tracked)
        };
        self.push(out, Op::SumAll(x), tracked)
    }

    /// Mean of all elements as a rank-0 value.
    pub fn mean(&self, x: Var) -> Var {
        let count = self.nodes.borrow()[x.0].value.len().max(1);
        let s = self.sum(x);
        self.scale(s, R::one() / R::from_usize(count).unwrap())
    }

    /// Euclidean norm over `axis`, keeping it with length one. The gradient
    /// at a zero vector is defined as zero.
    pub fn norm_axis(&self, x: Var, axis: usize) -> Result<Var> {
        let (out, tracked) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[x.0];
            check_axis("norm_axis", axis, n.value.ndim())?;
            let sq = n.value.mapv(|v| v * v).sum_axis(Axis(axis));
            (sq.mapv(|v| v.sqrt()).insert_axis(Axis(axis)), n.tracked)
        };
        Ok(self.push(out, Op::Norm(x), tracked))
    }

    pub fn softmax(&self, x: Var, axis: usize) -> Result<Var> {
        let (out, tracked) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[x.0];
            check_axis("softmax", axis, n.value.ndim())?;
            let mut out = n.value.clone();
            for mut lane in out.lanes_mut(Axis(axis)) {
                let m = lane.fold(R::neg_infinity(), |a, &b| a.max(b));
                lane.mapv_inplace(|v| (v - m).exp());
                let s = lane.sum();
                lane.mapv_inplace(|v| v / s);
            }
            (out, n.tracked)
        };
        Ok(self.push(out, Op::Softmax(x, axis), tracked))
    }

    pub fn concat(&self, xs: &[Var], axis: usize) -> Result<Var> {
        let (out, tracked) = {
            let nodes = self.nodes.borrow();
            if xs.is_empty() {
                return Err(GradError::Invalid {
                    op: "concat",
                    detail: "no inputs".into(),
                });
            }
            let first = nodes[xs[0].0].value.shape().to_vec();
            check_axis("concat", axis, first.len())?;
            for v in &xs[1..] {
                let s = nodes[v.0].value.shape();
                check_rank("concat", first.len(), s.len())?;
                for (i, (&p, &q)) in first.iter().zip(s).enumerate() {
                    if i != axis && p != q {
                        return Err(GradError::ShapeMismatch {
                            op: "concat",
                            axis: i,
                            left: p,
                            right: q,
                        });
                    }
                }
            }
            let views: Vec<ArrayViewD<R>> = xs.iter().map(|v| nodes[v.0].value.view()).collect();
            let out = concatenate(Axis(axis), &views).expect("checked concat");
            (out, xs.iter().any(|v| nodes[v.0].tracked))
        };
        Ok(self.push(out, Op::Concat(xs.to_vec(), axis), tracked))
    }

    /// `len` entries of `x` along `axis` starting at `start`.
    pub fn narrow(&self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let (out, tracked) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[x.0];
            check_axis("narrow", axis, n.value.ndim())?;
            let dim = n.value.shape()[axis];
            if start + len > dim {
                return Err(GradError::ShapeMismatch {
                    op: "narrow",
                    axis,
                    left: start + len,
                    right: dim,
                });
            }
            let s = n
                .value
                .slice_axis(Axis(axis), Slice::from(start..start + len))
                .as_standard_layout()
                .into_owned();
            (s, n.tracked)
        };
        Ok(self.push(out, Op::Narrow(x, axis, start), tracked))
    }

    /// 3x3 cross-correlation of an `[H, W, C]` image, channel by channel,
    /// wrapping around horizontally and replicating the top and bottom rows.
    pub fn correlate3x3(&self, x: Var, kernel: [[R; 3]; 3]) -> Result<Var> {
        let (out, tracked) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[x.0];
            check_rank("correlate3x3", 3, n.value.ndim())?;
            (correlate_forward(&n.value, &kernel), n.tracked)
        };
        Ok(self.push(out, Op::Correlate3x3(x, kernel), tracked))
    }

    /// 2x2 average pooling of an `[H, W, C]` image with even `H` and `W`.
    pub fn avg_pool2(&self, x: Var) -> Result<Var> {
        let (out, tracked) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[x.0];
            check_rank("avg_pool2", 3, n.value.ndim())?;
            let s = n.value.shape();
            for (ax, &len) in s.iter().take(2).enumerate() {
                if !len.is_multiple_of(2) || len == 0 {
                    return Err(GradError::Invalid {
                        op: "avg_pool2",
                        detail: format!("axis {ax} has odd or zero length {len}"),
                    });
                }
            }
            let (h, w, c) = (s[0] / 2, s[1] / 2, s[2]);
            let quarter = R::lit(0.25);
            let mut out = ArrayD::zeros(IxDyn(&[h, w, c]));
            for i in 0..h {
                for j in 0..w {
                    for k in 0..c {
                        out[[i, j, k]] = (n.value[[2 * i, 2 * j, k]]
                            + n.value[[2 * i, 2 * j + 1, k]]
                            + n.value[[2 * i + 1, 2 * j, k]]
                            + n.value[[2 * i + 1, 2 * j + 1, k]])
                            * quarter;
                    }
                }
            }
            (out, n.tracked)
        };
        Ok(self.push(out, Op::AvgPool2(x), tracked))
    }

    /// Gradients of the scalar `output` with respect to every tracked leaf.
    pub fn backward(&self, output: Var) -> Result<Gradients<R>> {
        let nodes = self.nodes.borrow();
        let out = &nodes[output.0];
        if out.value.len() != 1 {
            return Err(GradError::NotScalar(out.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<ArrayD<R>>> = (0..=output.0).map(|_| None).collect();
        grads[output.0] = Some(ArrayD::from_elem(out.value.raw_dim(), R::one()));

        for i in (0..=output.0).rev() {
            let node = &nodes[i];
            if !node.tracked {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            backprop_node(&nodes, node, g, &mut grads);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate<R: Real>(nodes: &[Node<R>], grads: &mut [Option<ArrayD<R>>], target: Var, contribution: ArrayD<R>) {
    if !nodes[target.0].tracked {
        return;
    }
    match &mut grads[target.0] {
        Some(existing) => *existing += &contribution,
        slot @ None => *slot = Some(standard(contribution)),
    }
}

fn backprop_node<R: Real>(nodes: &[Node<R>], node: &Node<R>, g: ArrayD<R>, grads: &mut [Option<ArrayD<R>>]) {
    let val = |v: Var| &nodes[v.0].value;
    let wants = |v: Var| nodes[v.0].tracked;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if wants(*b) {
                accumulate(nodes, grads, *b, unbroadcast(g.clone(), val(*b).shape()));
            }
            accumulate(nodes, grads, *a, unbroadcast(g, val(*a).shape()));
        }
        Op::Sub(a, b) => {
            if wants(*b) {
                accumulate(nodes, grads, *b, unbroadcast(g.mapv(|x| -x), val(*b).shape()));
            }
            accumulate(nodes, grads, *a, unbroadcast(g, val(*a).shape()));
        }
        Op::Mul(a, b) => {
            if wants(*a) {
                accumulate(nodes, grads, *a, unbroadcast(&g * val(*b), val(*a).shape()));
            }
            if wants(*b) {
                accumulate(nodes, grads, *b, unbroadcast(&g * val(*a), val(*b).shape()));
            }
        }
        Op::Div(a, b) => {
            if wants(*a) {
                accumulate(nodes, grads, *a, unbroadcast(&g / val(*b), val(*a).shape()));
            }
            if wants(*b) {
                // d(a/b)/db = -out / b
                let gb = &g * &node.value / val(*b);
                accumulate(nodes, grads, *b, unbroadcast(gb.mapv(|x| -x), val(*b).shape()));
            }
        }
        Op::SafeDiv(a, b) => {
            let zero = R::zero();
            let shape = node.value.raw_dim();
            let vb = val(*b).broadcast(shape.clone()).expect("forward shape");
            if wants(*a) {
                let mut ga = ArrayD::zeros(shape.clone());
                Zip::from(&mut ga)
                    .and(&g)
                    .and(&vb)
                    .for_each(|o, &gg, &y| *o = if y == zero { zero } else { gg / y });
                accumulate(nodes, grads, *a, unbroadcast(ga, val(*a).shape()));
            }
            if wants(*b) {
                let mut gb = ArrayD::zeros(shape);
                Zip::from(&mut gb)
                    .and(&g)
                    .and(&node.value)
                    .and(&vb)
                    .for_each(|o, &gg, &q, &y| *o = if y == zero { zero } else { -gg * q / y });
                accumulate(nodes, grads, *b, unbroadcast(gb, val(*b).shape()));
            }
        }
        Op::Affine(x, scale) => {
            let s = *scale;
            accumulate(nodes, grads, *x, g.mapv(|v| v * s));
        }
        Op::Exp(x) => accumulate(nodes, grads, *x, &g * &node.value),
        Op::Log(x) => {
            let floor = R::lit(LOG_FLOOR);
            let mut gx = g;
            Zip::from(&mut gx).and(val(*x)).for_each(|o, &v| {
                *o = if v > floor { *o / v } else { R::zero() };
            });
            accumulate(nodes, grads, *x, gx);
        }
        Op::Relu(x) => {
            let mut gx = g;
            Zip::from(&mut gx).and(val(*x)).for_each(|o, &v| {
                if v <= R::zero() {
                    *o = R::zero();
                }
            });
            accumulate(nodes, grads, *x, gx);
        }
        Op::Abs(x) => {
            let mut gx = g;
            Zip::from(&mut gx).and(val(*x)).for_each(|o, &v| {
                *o = if v > R::zero() {
                    *o
                } else if v < R::zero() {
                    -*o
                } else {
                    R::zero()
                };
            });
            accumulate(nodes, grads, *x, gx);
        }
        Op::Sqrt(x) => {
            let mut gx = g;
            let half = R::lit(0.5);
            Zip::from(&mut gx).and(&node.value).for_each(|o, &s| {
                *o = if s > R::zero() { *o * half / s } else { R::zero() };
            });
            accumulate(nodes, grads, *x, gx);
        }
        Op::Square(x) => {
            let two = R::lit(2.0);
            accumulate(nodes, grads, *x, &g * &val(*x).mapv(|v| v * two));
        }
        Op::MatMul(a, b) => {
            let g2 = g.view().into_dimensionality::<Ix2>().expect("rank 2");
            if wants(*a) {
                let vb = val(*b).view().into_dimensionality::<Ix2>().expect("rank 2");
                accumulate(nodes, grads, *a, g2.dot(&vb.t()).into_dyn());
            }
            if wants(*b) {
                let va = val(*a).view().into_dimensionality::<Ix2>().expect("rank 2");
                accumulate(nodes, grads, *b, va.t().dot(&g2).into_dyn());
            }
        }
        Op::Permute(x, axes) => {
            let mut inverse = vec![0; axes.len()];
            for (i, &a) in axes.iter().enumerate() {
                inverse[a] = i;
            }
            let gx = g.permuted_axes(IxDyn(&inverse)).as_standard_layout().into_owned();
            accumulate(nodes, grads, *x, gx);
        }
        Op::Reshape(x) => {
            let gx = g.into_shape_with_order(val(*x).raw_dim()).expect("reshape inverse");
            accumulate(nodes, grads, *x, gx);
        }
        Op::Sum(x) => {
            let gx = g.broadcast(val(*x).raw_dim()).expect("keepdim").to_owned();
            accumulate(nodes, grads, *x, gx);
        }
        Op::Mean(x, axis) => {
            let n = R::from_usize(val(*x).shape()[*axis]).unwrap();
            let gx = g.broadcast(val(*x).raw_dim()).expect("keepdim").mapv(|v| v / n);
            accumulate(nodes, grads, *x, gx);
        }
        Op::SumAll(x) => {
            let s = g.iter().next().copied().unwrap_or_else(R::zero);
            accumulate(nodes, grads, *x, ArrayD::from_elem(val(*x).raw_dim(), s));
        }
        Op::Norm(x) => {
            let xv = val(*x);
            let nb = node.value.broadcast(xv.raw_dim()).expect("keepdim");
            let gb = g.broadcast(xv.raw_dim()).expect("keepdim");
            let mut gx = ArrayD::zeros(xv.raw_dim());
            Zip::from(&mut gx).and(xv).and(&nb).and(&gb).for_each(|o, &v, &n, &gg| {
                *o = if n > R::zero() { gg * v / n } else { R::zero() };
            });
            accumulate(nodes, grads, *x, gx);
        }
        Op::Softmax(x, axis) => {
            let y = &node.value;
            let gy = &g * y;
            let s = gy.sum_axis(Axis(*axis)).insert_axis(Axis(*axis));
            let gx = &gy - &(y * &s);
            accumulate(nodes, grads, *x, gx);
        }
        Op::Concat(xs, axis) => {
            let mut start = 0;
            for v in xs {
                let len = val(*v).shape()[*axis];
                if wants(*v) {
                    let part = g
                        .slice_axis(Axis(*axis), Slice::from(start..start + len))
                        .as_standard_layout()
                        .into_owned();
                    accumulate(nodes, grads, *v, part);
                }
                start += len;
            }
        }
        Op::Narrow(x, axis, start) => {
            let len = node.value.shape()[*axis];
            let mut gx = ArrayD::zeros(val(*x).raw_dim());
            gx.slice_axis_mut(Axis(*axis), Slice::from(*start..*start + len))
                .assign(&g);
            accumulate(nodes, grads, *x, gx);
        }
        Op::Correlate3x3(x, kernel) => {
            accumulate(nodes, grads, *x, correlate_adjoint(&g, kernel));
        }
        Op::AvgPool2(x) => {
            let quarter = R::lit(0.25);
            let mut gx = ArrayD::zeros(val(*x).raw_dim());
            let s = g.shape();
            for i in 0..s[0] {
                for j in 0..s[1] {
                    for k in 0..s[2] {
                        let v = g[[i, j, k]] * quarter;
                        gx[[2 * i, 2 * j, k]] = v;
                        gx[[2 * i, 2 * j + 1, k]] = v;
                        gx[[2 * i + 1, 2 * j, k]] = v;
                        gx[[2 * i + 1, 2 * j + 1, k]] = v;
                    }
                }
            }
            accumulate(nodes, grads, *x, gx);
        }
    }
}

#[inline]
fn clamp_row(i: isize, h: usize) -> usize {
    i.clamp(0, h as isize - 1) as usize
}

#[inline]
fn wrap_col(j: isize, w: usize) -> usize {
    j.rem_euclid(w as isize) as usize
}

fn correlate_forward<R: Real>(x: &ArrayD<R>, k: &[[R; 3]; 3]) -> ArrayD<R> {
    let s = x.shape();
    let (h, w, c) = (s[0], s[1], s[2]);
    let mut out = ArrayD::zeros(IxDyn(&[h, w, c]));
    for i in 0..h {
        for j in 0..w {
            for (di, krow) in k.iter().enumerate() {
                let si = clamp_row(i as isize + di as isize - 1, h);
                for (dj, &kv) in krow.iter().enumerate() {
                    if kv == R::zero() {
                        continue;
                    }
                    let sj = wrap_col(j as isize + dj as isize - 1, w);
                    for ch in 0..c {
                        out[[i, j, ch]] += kv * x[[si, sj, ch]];
                    }
                }
            }
        }
    }
    out
}

fn correlate_adjoint<R: Real>(g: &ArrayD<R>, k: &[[R; 3]; 3]) -> ArrayD<R> {
    let s = g.shape();
    let (h, w, c) = (s[0], s[1], s[2]);
    let mut gx = ArrayD::zeros(IxDyn(&[h, w, c]));
    for i in 0..h {
        for j in 0..w {
            for (di, krow) in k.iter().enumerate() {
                let si = clamp_row(i as isize + di as isize - 1, h);
                for (dj, &kv) in krow.iter().enumerate() {
                    if kv == R::zero() {
                        continue;
                    }
                    let sj = wrap_col(j as isize + dj as isize - 1, w);
                    for ch in 0..c {
                        gx[[si, sj, ch]] += kv * g[[i, j, ch]];
                    }
                }
            }
        }
    }
    gx
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<R> {
    grads: Vec<Option<ArrayD<R>>>,
}

impl<R: Real> Gradients<R> {
    /// Gradient for a tracked leaf; `None` if the output does not depend on it.
    pub fn get(&self, v: Var) -> Option<&ArrayD<R>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<ArrayD<R>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
