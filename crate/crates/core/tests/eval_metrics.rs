use eqillum::encoder::LatentCode;
use eqillum::eval::{
    align_log_scale, average_ranks, image_metrics, interpolate, mse, psnr, reconstruction_consistency, sin_weights,
    spearman, ssim, tone_map, ImageSpace, LinearToyField, Psnr,
};
use eqillum::sphere::random_rotation;
use ndarray::Array3;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(seed: u64, h: usize, w: usize) -> Array3<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array3::from_shape_fn((h, w, 3), |_| rng.random_range(-2.0..3.0))
}

fn weighted_mse(a: &Array3<f64>, b: &Array3<f64>, w: &[f64]) -> f64 {
    a.indexed_iter()
        .map(|((r, c, ch), &x)| w[r] * (x - b[[r, c, ch]]).powi(2))
        .sum()
}

#[test]
fn alignment_removes_constant_offset_and_is_idempotent() {
    let gt = random_image(1, 8, 16);
    let w = sin_weights(8);
    let aligned = align_log_scale(&(&gt + 3.0), &gt, &w);
    assert!(aligned.iter().zip(gt.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
    let pred = random_image(2, 8, 16);
    let once = align_log_scale(&pred, &gt, &w);
    let twice = align_log_scale(&once, &gt, &w);
    assert!(once.iter().zip(twice.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
}

#[test]
fn alignment_is_optimal_over_a_shift_grid() {
    let (gt, pred) = (random_image(3, 8, 16), random_image(4, 8, 16));
    let w = sin_weights(8);
    let best = weighted_mse(&align_log_scale(&pred, &gt, &w), &gt, &w);
    for i in -200..=200 {
        let s = i as f64 * 0.01;
        assert!(weighted_mse(&(&pred + s), &gt, &w) >= best - 1e-12);
    }
}

#[test]
fn tone_map_reference_values() {
    let img = Array3::from_shape_vec((1, 3, 1), vec![0.0, 1.0, 1e6]).unwrap();
    let ldr = tone_map(&img.broadcast((1, 3, 3)).unwrap().to_owned());
    assert_eq!(ldr[[0, 0, 0]], 0.0);
    assert!((ldr[[0, 1, 0]] - 0.5f64.powf(1.0 / 2.2)).abs() < 1e-12);
    assert!((ldr[[0, 1, 0]] - 0.7297).abs() < 1e-4);
    assert!(ldr[[0, 2, 0]] <= 1.0);
}

proptest! {
    #[test]
    fn tone_map_is_monotone(a in 0.0f64..1e4, b in 0.0f64..1e4) {
        let x = tone_map(&Array3::from_elem((1, 1, 3), a));
        let y = tone_map(&Array3::from_elem((1, 1, 3), b));
        prop_assert!((a <= b) == (x[[0, 0, 0]] <= y[[0, 0, 0]]) || x[[0, 0, 0]] == y[[0, 0, 0]]);
    }

    #[test]
    fn spearman_is_bounded(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs: Vec<f64> = (0..12).map(|_| rng.random_range(0..5) as f64).collect();
        let ys: Vec<f64> = (0..12).map(|_| rng.random::<f64>()).collect();
        if let Ok(r) = spearman(&xs, &ys) {
            prop_assert!((-1.0..=1.0).contains(&r));
        }
    }
}

#[test]
fn psnr_closed_form_and_sentinel() {
    let a = Array3::<f64>::zeros((4, 4, 3));
    let b = Array3::<f64>::from_elem((4, 4, 3), 0.1);
    match psnr(&a, &b, 1.0) {
        Psnr::Db(v) => assert!((v - 20.0).abs() < 1e-9),
        Psnr::Identical => panic!("distinct images"),
    }
    assert_eq!(psnr(&a, &a, 1.0), Psnr::Identical);
    assert_eq!(Psnr::Identical.to_string(), "identical");
}

#[test]
fn ssim_identity_and_symmetry() {
    let a = tone_map(&random_image(5, 16, 24).mapv(f64::exp));
    let b = tone_map(&random_image(6, 16, 24).mapv(f64::exp));
    assert!((ssim(&a, &a, 1.0).unwrap() - 1.0).abs() < 1e-12);
    let (ab, ba) = (ssim(&a, &b, 1.0).unwrap(), ssim(&b, &a, 1.0).unwrap());
    assert!((ab - ba).abs() < 1e-9);
    assert!(ab < 1.0);
    assert!(ssim(
        &a.slice(ndarray::s![..8, .., ..]).to_owned(),
        &a.slice(ndarray::s![..8, .., ..]).to_owned(),
        1.0
    )
    .is_err());
}

#[test]
fn hdr_psnr_ignores_exposure() {
    let gt = random_image(7, 16, 32);
    let pred = random_image(8, 16, 32) * 0.2 + &gt;
    let base = image_metrics(&pred, &gt).unwrap();
    for k in [1e-3f64, 0.5, 7.0, 1e4] {
        let m = image_metrics(&(&pred + k.ln()), &gt).unwrap();
        let (a, b) = (m.psnr_hdr.db().unwrap(), base.psnr_hdr.db().unwrap());
        assert!((a - b).abs() < 1e-9, "k = {k}: {a} vs {b}");
    }
}

#[test]
fn interpolation_endpoints_and_rotation() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let z1 = LatentCode::standard_normal(27, &mut rng);
    let z2 = LatentCode::standard_normal(27, &mut rng);
    assert_eq!(interpolate(&z1, &z2, 0.0), z1);
    assert_eq!(interpolate(&z1, &z2, 1.0), z2);
    for t in [0.0, 0.3, 1.0] {
        assert_eq!(interpolate(&z1, &z1, t), z1);
    }
    let r = random_rotation(&mut rng);
    let lhs = interpolate(&z1.rotated(&r), &z2.rotated(&r), 0.5);
    let rhs = interpolate(&z1, &z2, 0.5).rotated(&r);
    assert!(lhs.0.iter().zip(rhs.0.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
}

fn permutations(items: Vec<usize>) -> Vec<Vec<usize>> {
    if items.len() <= 1 {
        return vec![items];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.clone();
        let head = rest.remove(i);
        for mut p in permutations(rest) {
            p.insert(0, head);
            out.push(p);
        }
    }
    out
}

/// Mean position over every ordering consistent with sorting `xs`.
fn brute_force_ranks(xs: &[f64]) -> Vec<f64> {
    let mut sums = vec![0.0; xs.len()];
    let mut count = 0.0;
    for p in permutations((0..xs.len()).collect()) {
        if p.windows(2).all(|w| xs[w[0]] <= xs[w[1]]) {
            count += 1.0;
            for (pos, &i) in p.iter().enumerate() {
                sums[i] += pos as f64 + 1.0;
            }
        }
    }
    sums.iter().map(|s| s / count).collect()
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

#[test]
fn spearman_cases() {
    let inc = [1.0, 2.0, 3.0, 4.0, 5.0];
    assert!((spearman(&inc, &[2.0, 4.0, 8.0, 16.0, 32.0]).unwrap() - 1.0).abs() < 1e-12);
    assert!((spearman(&inc, &[5.0, 4.0, 3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
    let (xs, ys) = ([1.0, 2.0, 2.0, 4.0], [1.0, 3.0, 2.0, 4.0]);
    assert_eq!(average_ranks(&xs), brute_force_ranks(&xs));
    let expect = pearson(&brute_force_ranks(&xs), &brute_force_ranks(&ys));
    assert!((spearman(&xs, &ys).unwrap() - expect).abs() < 1e-12);
    assert!(spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
    assert!(spearman(&[1.0], &[1.0]).is_err());
}

#[test]
fn distance_preserving_toy_field_has_perfect_consistency() {
    let field = LinearToyField::orthonormal(4, 8, 16, 1).unwrap();
    let rho = reconstruction_consistency(&field, 200, 3, ImageSpace::LogHdr).unwrap();
    assert!((rho - 1.0).abs() < 1e-12, "rho = {rho}");
    let again = reconstruction_consistency(&field, 200, 3, ImageSpace::LogHdr).unwrap();
    assert_eq!(rho, again);
    assert!(reconstruction_consistency(&field, 5, 3, ImageSpace::Ldr).is_err());
}

#[test]
fn mse_of_identical_is_zero() {
    let a = random_image(10, 4, 8);
    assert_eq!(mse(&a, &a), 0.0);
}
