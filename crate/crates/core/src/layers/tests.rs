use super::*;
use crate::autodiff::{grad_check_inputs, GradCheckOptions};
use crate::params::ParamStore;
use ndarray::{arr2, Array3};
use proptest::prelude::{any, prop_assert, proptest, ProptestConfig};

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.sample::<f64, _>(StandardNormal))
}

struct So2Weights {
    w_eq: ArrayD<f64>,
    w_inv: ArrayD<f64>,
    b_inv: ArrayD<f64>,
}

fn random_so2(rng: &mut ChaCha8Rng, d_in: usize, d_out: usize, c_inv: usize, c_out: usize) -> So2Weights {
    So2Weights {
        w_eq: randn(rng, &[d_out, c_inv + 1, d_in]),
        w_inv: randn(rng, &[d_out, c_out, d_in, c_inv + 1]),
        b_inv: randn(rng, &[d_out, c_out]),
    }
}

fn run_so2<R: Real>(x: &ArrayD<f64>, w: &So2Weights, eq: bool) -> ArrayD<f64> {
    eval_on_tape::<R>(x, |t, xv| {
        let we = t.constant(w.w_eq.mapv(R::lit));
        let wi = t.constant(w.w_inv.mapv(R::lit));
        let bi = t.constant(w.b_inv.mapv(R::lit));
        so2_fc(t, xv, eq.then_some(we), wi, bi)
    })
    .unwrap()
}

/// Direct loop evaluation of the layer.
fn so2_oracle(x: &ArrayD<f64>, w: &So2Weights) -> ArrayD<f64> {
    let (t, d_in, g) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let c_inv = g - 2;
    let (d_out, c_out) = (w.b_inv.shape()[0], w.b_inv.shape()[1]);
    let mut y = ArrayD::zeros(IxDyn(&[t, d_out, 2 + c_out]));
    for n in 0..t {
        for o in 0..d_out {
            for i in 0..d_in {
                let norm = (x[[n, i, 0]].powi(2) + x[[n, i, 1]].powi(2)).sqrt();
                for k in 0..=c_inv {
                    let tk = if k < c_inv { x[[n, i, 2 + k]] } else { 1.0 };
                    let tpk = if k < c_inv { x[[n, i, 2 + k]] } else { norm };
                    for v in 0..2 {
                        y[[n, o, v]] += w.w_eq[[o, k, i]] * tk * x[[n, i, v]];
                    }
                    for u in 0..c_out {
                        y[[n, o, 2 + u]] += w.w_inv[[o, u, i, k]] * tpk;
                    }
                }
            }
            for u in 0..c_out {
                y[[n, o, 2 + u]] += w.b_inv[[o, u]];
            }
        }
    }
    y
}

fn max_abs(a: &ArrayD<f64>, b: &ArrayD<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn so2_fc_hand_case() {
    let x = ArrayD::from_shape_vec(IxDyn(&[1, 1, 3]), vec![1.0, 0.0, 2.0]).unwrap();
    let w = So2Weights {
        w_eq: ArrayD::from_elem(IxDyn(&[1, 2, 1]), 1.0),
        w_inv: ArrayD::zeros(IxDyn(&[1, 1, 1, 2])),
        b_inv: ArrayD::zeros(IxDyn(&[1, 1])),
    };
    let y = run_so2::<f64>(&x, &w, true);
    assert_eq!(y.as_slice().unwrap(), &[3.0, 0.0, 0.0]);
}

#[test]
fn so2_fc_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..10 {
        let (t, d_in, d_out, c_inv, c_out) = (
            rng.random_range(1..4),
            rng.random_range(1..5),
            rng.random_range(1..5),
            rng.random_range(0..4),
            rng.random_range(1..4),
        );
        let x = randn(&mut rng, &[t, d_in, 2 + c_inv]);
        let w = random_so2(&mut rng, d_in, d_out, c_inv, c_out);
        let err = max_abs(&run_so2::<f64>(&x, &w, true), &so2_oracle(&x, &w));
        assert!(err < 1e-12, "{err}");
    }
}

#[test]
fn so2_fc_zero_equivariant_input_gives_zero_equivariant_output() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut x = randn(&mut rng, &[2, 3, 5]);
    x.slice_mut(ndarray::s![.., .., 0..2]).fill(0.0);
    let w = random_so2(&mut rng, 3, 4, 3, 2);
    let y = run_so2::<f64>(&x, &w, true);
    assert!(y.slice(ndarray::s![.., .., 0..2]).iter().all(|&v| v == 0.0));
}

#[test]
fn so2_fc_rejects_input_width_mismatch() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(ArrayD::zeros(IxDyn(&[1, 3, 4])));
    let we = tape.constant(ArrayD::zeros(IxDyn(&[2, 3, 3])));
    let wi = tape.constant(ArrayD::zeros(IxDyn(&[2, 1, 2, 3])));
    let bi = tape.constant(ArrayD::zeros(IxDyn(&[2, 1])));
    let err = so2_fc(&tape, x, Some(we), wi, bi).unwrap_err();
    assert!(matches!(
        err,
        GradError::ShapeMismatch {
            op: "so2_fc",
            left: 3,
            right: 2,
            ..
        }
    ));
}

#[test]
fn so2_fc_rotation_equivariance_over_many_samples() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst32 = 0.0f64;
    let mut worst64 = 0.0f64;
    for _ in 0..100 {
        let (d_in, d_out, c_inv, c_out) = (
            rng.random_range(1..6),
            rng.random_range(1..6),
            rng.random_range(0..5),
            rng.random_range(1..5),
        );
        let x = randn(&mut rng, &[2, d_in, 2 + c_inv]);
        let w = random_so2(&mut rng, d_in, d_out, c_inv, c_out);
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        let rx = RotZAction.act_input(&angle, &x);
        for (worst, lhs, rhs) in [
            (
                &mut worst64,
                run_so2::<f64>(&rx, &w, true),
                run_so2::<f64>(&x, &w, true),
            ),
            (
                &mut worst32,
                run_so2::<f32>(&rx, &w, true),
                run_so2::<f32>(&x, &w, true),
            ),
        ] {
            let rhs = RotZAction.act_output(&angle, &rhs);
            let scale = rhs.iter().fold(1.0f64, |m, v| m.max(v.abs()));
            *worst = worst.max(max_abs(&lhs, &rhs) / scale);
        }
    }
    assert!(worst64 < 1e-10, "64-bit deviation {worst64}");
    assert!(worst32 < 1e-5, "32-bit deviation {worst32}");
}

#[test]
fn so2_fc_fixed_rotation_example() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = randn(&mut rng, &[3, 4, 5]);
    let w = random_so2(&mut rng, 4, 3, 3, 3);
    let dev = check_equivariance(|x| run_so2::<f32>(x, &w, true), &FixedRotZ(0.7), |_| x.clone(), 1, 0);
    assert!(dev < 1e-5, "{dev}");
}

struct FixedRotZ(f64);

impl GroupAction for FixedRotZ {
    type Element = f64;
    fn sample(&self, _: &mut ChaCha8Rng) -> f64 {
        self.0
    }
    fn act_input(&self, a: &f64, x: &ArrayD<f64>) -> ArrayD<f64> {
        RotZAction.act_input(a, x)
    }
    fn act_output(&self, a: &f64, y: &ArrayD<f64>) -> ArrayD<f64> {
        RotZAction.act_output(a, y)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn so2_fc_invariant_output_sees_only_equivariant_norm(seed in any::<u64>(), angle in 0.0f64..std::f64::consts::TAU) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = randn(&mut rng, &[2, 3, 4]);
        let w = random_so2(&mut rng, 3, 2, 2, 3);
        let rx = RotZAction.act_input(&angle, &x);
        let a = run_so2::<f64>(&x, &w, false);
        let b = run_so2::<f64>(&rx, &w, false);
        prop_assert!(max_abs(&a, &b) < 1e-12);
    }

    #[test]
    fn vn_linear_commutes_with_right_orthogonal(seed in any::<u64>(), g in 2usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = randn(&mut rng, &[2, 3, g]);
        let w = randn(&mut rng, &[4, 3]);
        let q = random_orthogonal(&mut rng, g);
        let f = |x: &ArrayD<f64>| eval_on_tape::<f64>(x, |t, v| {
            let wv = t.constant(w.clone());
            vn_linear(t, v, wv)
        }).unwrap();
        let lhs = f(&act_last_axis(&x, &q));
        let rhs = act_last_axis(&f(&x), &q);
        prop_assert!(max_abs(&lhs, &rhs) < 1e-12);
    }

    #[test]
    fn vn_relu_output_never_points_against_direction(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = randn(&mut rng, &[3, 4, 6]);
        let w = randn(&mut rng, &[4, 4]);
        let tape = Tape::<f64>::new();
        let xv = tape.constant(x);
        let wv = tape.constant(w);
        let k = vn_linear(&tape, xv, wv).unwrap();
        let y = vn_relu(&tape, xv, k).unwrap();
        let dots = last_axis_dot(&tape.value(y), &tape.value(k));
        prop_assert!(dots.iter().all(|&d| d >= -1e-12));
    }
}

#[test]
fn vn_linear_identity_and_loop_oracle() {
    let x = ArrayD::from_shape_vec(IxDyn(&[1, 2, 3]), vec![1.0, 2.0, 3.0, -1.0, 0.5, 4.0]).unwrap();
    let id = eval_on_tape::<f64>(&x, |t, v| {
        let w = t.constant(Array2::<f64>::eye(2).into_dyn());
        vn_linear(t, v, w)
    })
    .unwrap();
    assert_eq!(id, x);

    let w = arr2(&[[2.0, -1.0], [0.5, 3.0]]);
    let y = eval_on_tape::<f64>(&x, |t, v| {
        let wv = t.constant(w.clone().into_dyn());
        vn_linear(t, v, wv)
    })
    .unwrap();
    for o in 0..2 {
        for j in 0..3 {
            let expect: f64 = (0..2).map(|i| w[[o, i]] * x[[0, i, j]]).sum();
            assert!((y[[0, o, j]] - expect).abs() < 1e-15);
        }
    }
}

#[test]
fn vn_linear_rejects_channel_mismatch() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(ArrayD::zeros(IxDyn(&[1, 3, 6])));
    let w = tape.constant(ArrayD::zeros(IxDyn(&[2, 4])));
    assert!(vn_linear(&tape, x, w).is_err());
}

fn relu_with_k(x: &ArrayD<f64>, k: &ArrayD<f64>) -> ArrayD<f64> {
    let tape = Tape::<f64>::new();
    let xv = tape.constant(x.clone());
    let kv = tape.constant(k.clone());
    let y = vn_relu(&tape, xv, kv).unwrap();
    let out = tape.value(y).clone();
    out
}

#[test]
fn vn_relu_cases() {
    let q = ArrayD::from_shape_vec(IxDyn(&[1, 1, 2]), vec![1.0, 1.0]).unwrap();
    let k_pos = ArrayD::from_shape_vec(IxDyn(&[1, 1, 2]), vec![1.0, 0.0]).unwrap();
    assert_eq!(relu_with_k(&q, &k_pos), q);
    let k_neg = ArrayD::from_shape_vec(IxDyn(&[1, 1, 2]), vec![-2.0, 0.0]).unwrap();
    let y = relu_with_k(&q, &k_neg);
    assert!((y[[0, 0, 0]]).abs() < 1e-15 && (y[[0, 0, 1]] - 1.0).abs() < 1e-15);
    let k_zero = ArrayD::zeros(IxDyn(&[1, 1, 2]));
    assert_eq!(relu_with_k(&q, &k_zero), q);
}

fn layer_store(seed: u64, build: impl FnOnce(&mut ParamBuilder<'_, f64, ChaCha8Rng>)) -> ParamStore<f64> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    build(&mut ParamBuilder::new(&mut store, &mut rng));
    store
}

#[test]
fn vn_relu_and_layernorm_equivariant_to_orthogonal_actions() {
    let mut relu = None;
    let mut norm = None;
    let store = layer_store(5, |b| {
        relu = Some(VnRelu::new(&mut b.scope("relu"), 4));
        norm = Some(VnLayerNorm::new(&mut b.scope("norm"), 4));
    });
    let mut store = store;
    // non-trivial affine parameters
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for p in store.iter_mut().filter(|p| p.name.starts_with("norm")) {
        p.value = randn(&mut rng, p.value.shape());
    }
    let (relu, norm) = (relu.unwrap(), norm.unwrap());
    for g in [2, 3, 6] {
        let f = |x: &ArrayD<f64>| {
            eval_on_tape::<f32>(x, |t, v| {
                let s32 = store.cast::<f32>();
                let p = s32.bind(t, &[]);
                let h = relu.forward(t, &p, v)?;
                norm.forward(t, &p, h)
            })
            .unwrap()
        };
        let dev = check_equivariance(f, &OrthogonalAction { dim: g }, |r| randn(r, &[3, 4, g]), 50, 7);
        assert!(dev < 1e-5, "g={g}: {dev}");
    }
}

#[test]
fn so2_relu_cases_and_equivariance() {
    let mut layer = None;
    let store = layer_store(8, |b| layer = Some(So2Relu::new(b, 3)));
    let layer = layer.unwrap();
    let run = |x: &ArrayD<f64>| {
        eval_on_tape::<f32>(x, |t, v| {
            let s = store.cast::<f32>();
            let p = s.bind(t, &[]);
            layer.forward(t, &p, v)
        })
        .unwrap()
    };

    let mut x = randn(&mut ChaCha8Rng::seed_from_u64(9), &[2, 3, 5]);
    x.slice_mut(ndarray::s![.., .., 2..]).fill(-1.0);
    let y = run(&x);
    assert!(y.slice(ndarray::s![.., .., 2..]).iter().all(|&v| v == 0.0));

    // Identity direction weights, aligned equivariant parts, positive invariants.
    let id_store = {
        let mut s = store.clone();
        let id = s.id("dir.w").unwrap();
        *s.get_mut(id) = Array2::<f64>::eye(3).into_dyn();
        s
    };
    let x = Array3::from_shape_fn((1, 3, 4), |(_, c, j)| (c + j) as f64 * 0.5 + 0.1).into_dyn();
    let y = eval_on_tape::<f64>(&x, |t, v| {
        let p = id_store.bind(t, &[]);
        layer.forward(t, &p, v)
    })
    .unwrap();
    assert!(max_abs(&x, &y) < 1e-15);

    let dev = check_equivariance(run, &RotZAction, |r| randn(r, &[3, 3, 5]), 50, 10);
    assert!(dev < 1e-5, "{dev}");
}

#[test]
fn layernorm_single_channel_and_statistics() {
    let mut ln = None;
    let store = layer_store(11, |b| ln = Some(VnLayerNorm::new(b, 1)));
    let ln = ln.unwrap();
    let x = ArrayD::from_shape_vec(IxDyn(&[1, 1, 3]), vec![3.0, 0.0, 4.0]).unwrap();
    let mut beta_store = store.clone();
    let beta = beta_store.id("beta").unwrap();
    beta_store.get_mut(beta).fill(2.0);
    let y = eval_on_tape::<f64>(&x, |t, v| {
        let p = beta_store.bind(t, &[]);
        ln.forward(t, &p, v)
    })
    .unwrap();
    assert!(max_abs(&y, &(&x * (2.0 / 5.0))) < 1e-12);

    let mut ln4 = None;
    let store = layer_store(12, |b| ln4 = Some(VnLayerNorm::new(b, 4)));
    let ln4 = ln4.unwrap();
    let x = randn(&mut ChaCha8Rng::seed_from_u64(13), &[3, 4, 6]);
    let y = eval_on_tape::<f64>(&x, |t, v| {
        let p = store.bind(t, &[]);
        ln4.forward(t, &p, v)
    })
    .unwrap();
    let norms = last_axis_dot(&y, &y).mapv(f64::sqrt);
    let in_norms = last_axis_dot(&x, &x).mapv(f64::sqrt);
    for tok in 0..3 {
        // gamma = 1, beta = 0: output norms are the signed standardized
        // input norms, so they sum to zero once signs are restored.
        let row = in_norms.index_axis(Axis(0), tok);
        let mean = row.mean().unwrap();
        let sd = (row.mapv(|v| (v - mean).powi(2)).mean().unwrap() + LAYER_NORM_EPS).sqrt();
        let signed: f64 = (0..4)
            .map(|c| {
                let expect = (row[c] - mean) / sd;
                assert!((norms[[tok, c]] - expect.abs()).abs() < 1e-12);
                norms[[tok, c]] * expect.signum()
            })
            .sum();
        assert!(signed.abs() < 1e-10);
    }
}

#[test]
fn layernorm_passes_zero_vectors() {
    let mut ln = None;
    let store = layer_store(14, |b| ln = Some(VnLayerNorm::new(b, 3)));
    let ln = ln.unwrap();
    let mut x = randn(&mut ChaCha8Rng::seed_from_u64(15), &[1, 3, 4]);
    x.slice_mut(ndarray::s![0, 1, ..]).fill(0.0);
    let y = eval_on_tape::<f64>(&x, |t, v| {
        let p = store.bind(t, &[]);
        ln.forward(t, &p, v)
    })
    .unwrap();
    assert!(y.slice(ndarray::s![0, 1, ..]).iter().all(|&v| v == 0.0));
    assert!(y.iter().all(|v| v.is_finite()));
}

#[test]
fn attention_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let run = |q: &ArrayD<f64>, k: &ArrayD<f64>, v: &ArrayD<f64>| {
        let tape = Tape::<f64>::new();
        let (qv, kv, vv) = (
            tape.constant(q.clone()),
            tape.constant(k.clone()),
            tape.constant(v.clone()),
        );
        let y = vn_attention(&tape, qv, kv, vv).unwrap();
        let out = tape.value(y).clone();
        out
    };
    let q = randn(&mut rng, &[1, 3, 6]);
    let v = randn(&mut rng, &[1, 3, 6]);
    assert!(max_abs(&run(&q, &q, &v), &v) < 1e-15);

    let q = randn(&mut rng, &[4, 3, 6]);
    let k = randn(&mut rng, &[5, 3, 6]);
    let v = randn(&mut rng, &[5, 3, 6]);
    let m = random_orthogonal(&mut rng, 6);
    let scores = |q: &ArrayD<f64>, k: &ArrayD<f64>| {
        let q2 = q.view().into_shape_with_order((q.shape()[0], 18)).unwrap().to_owned();
        let k2 = k.view().into_shape_with_order((k.shape()[0], 18)).unwrap().to_owned();
        q2.dot(&k2.t())
    };
    let s0 = scores(&q, &k);
    let s1 = scores(&act_last_axis(&q, &m), &act_last_axis(&k, &m));
    assert!(s0.iter().zip(&s1).all(|(a, b)| (a - b).abs() < 1e-12));

    let lhs = run(&act_last_axis(&q, &m), &act_last_axis(&k, &m), &act_last_axis(&v, &m));
    let rhs = act_last_axis(&run(&q, &k, &v), &m);
    assert!(max_abs(&lhs, &rhs) < 1e-10);
}

#[test]
fn vn_invariant_cases() {
    let mut inv = None;
    let store = layer_store(17, |b| inv = Some(VnInvariant::new(b, 8, 8)));
    let inv = inv.unwrap();
    let run = |z: &ArrayD<f64>| {
        let tape = Tape::<f32>::new();
        let p = store.cast::<f32>();
        let p = p.bind(&tape, &[]);
        let zv = tape.constant(z.mapv(|v| v as f32));
        let (zi, frame) = inv.forward(&tape, &p, zv).unwrap();
        let a = tape.value(zi).mapv(|v| v as f64);
        let b = tape.value(frame).mapv(|v| v as f64);
        (a, b)
    };
    let (zero, _) = run(&ArrayD::zeros(IxDyn(&[8, 3])));
    assert!(zero.iter().all(|&v| v == 0.0));

    let dev = check_equivariance(|z| run(z).0, &So3Invariance, |r| randn(r, &[8, 3]), 100, 18);
    assert!(dev < 1e-5, "{dev}");

    let z = randn(&mut ChaCha8Rng::seed_from_u64(19), &[8, 3]);
    let (zi, frame) = run(&z);
    for d in 0..8 {
        for k in 0..3 {
            let dot: f64 = (0..3).map(|j| z[[d, j]] * frame[[k, j]]).sum();
            assert!((zi[[d, k]] - dot).abs() < 1e-4);
        }
    }
}

#[test]
fn checker_detects_identity_and_broken_layers() {
    let dev = check_equivariance(|x| x.clone(), &RotZAction, |r| randn(r, &[2, 3, 4]), 20, 20);
    assert_eq!(dev, 0.0);
    let broken = |x: &ArrayD<f64>| {
        let mut y = x.clone();
        y.slice_mut(ndarray::s![.., .., 0]).mapv_inplace(|v| v + 0.5);
        y
    };
    let dev = check_equivariance(broken, &RotZAction, |r| randn(r, &[2, 3, 4]), 20, 21);
    assert!(dev > 1e-2, "{dev}");
}

#[test]
fn layer_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let opts = GradCheckOptions::default();
    let x = randn(&mut rng, &[2, 3, 5]);
    let w = random_so2(&mut rng, 3, 2, 3, 2);
    let err = grad_check_inputs(
        |t, v| {
            let y = so2_fc(t, v[0], Some(v[1]), v[2], v[3])?;
            let y = t.square(y);
            Ok(t.sum(y))
        },
        &[x.clone(), w.w_eq.clone(), w.w_inv.clone(), w.b_inv.clone()],
        &opts,
    )
    .unwrap();
    assert!(err < 1e-6, "so2_fc {err}");

    let dirw = randn(&mut rng, &[3, 3]);
    let gamma = randn(&mut rng, &[3, 1]);
    let beta = randn(&mut rng, &[3, 1]);
    let err = grad_check_inputs(
        |t, v| {
            let h = so2_relu(t, v[0], v[1])?;
            let k = vn_linear(t, h, v[1])?;
            let h = vn_relu(t, h, k)?;
            let h = vn_layernorm(t, h, v[2], v[3])?;
            let h = vn_attention(t, h, h, h)?;
            let h = t.square(h);
            Ok(t.sum(h))
        },
        &[x, dirw, gamma, beta],
        &opts,
    )
    .unwrap();
    assert!(err < 1e-6, "vn stack {err}");
}
