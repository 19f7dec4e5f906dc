//! Spherical geometry for equirectangular environment maps.
//!
//! Conventions: `z` is the up axis, polar angle `theta` is measured from +z,
//! azimuth `phi` is counterclockwise seen from +z starting at +x. Pixel
//! centers sit at `(i + 0.5) / H` and `(j + 0.5) / W`.

use std::f64::consts::PI;

use ndarray::{Array2, ArrayView3};
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::envmap::EnvironmentMap;

const UNIT_TOLERANCE: f64 = 1e-6;
const SAMPLE_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SphereError {
    #[error("pixel ({row}, {col}) outside a {height}x{width} grid")]
    OutOfRange {
        row: usize,
        col: usize,
        height: usize,
        width: usize,
    },
    #[error("direction is not unit length (norm {0})")]
    NotUnit(f64),
}

/// Unit 3-vector.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Direction([f64; 3]);

impl Direction {
    pub fn new(v: [f64; 3]) -> Result<Self, SphereError> {
        let n = norm3(v);
        if (n - 1.0).abs() > UNIT_TOLERANCE {
            return Err(SphereError::NotUnit(n));
        }
        Ok(Self(v))
    }

    /// Normalizes any non-zero vector.
    pub fn normalize(v: [f64; 3]) -> Result<Self, SphereError> {
        let n = norm3(v);
        if n == 0.0 || !n.is_finite() {
            return Err(SphereError::NotUnit(n));
        }
        Ok(Self([v[0] / n, v[1] / n, v[2] / n]))
    }

    pub fn from_angles(theta: f64, phi: f64) -> Self {
        let (st, ct) = theta.sin_cos();
        let (sp, cp) = phi.sin_cos();
        Self([st * cp, st * sp, ct])
    }

    pub fn xyz(&self) -> [f64; 3] {
        self.0
    }

    pub fn theta(&self) -> f64 {
        self.0[2].clamp(-1.0, 1.0).acos()
    }

    /// Azimuth in `[0, 2 pi)`.
    pub fn phi(&self) -> f64 {
        self.0[1].atan2(self.0[0]).rem_euclid(2.0 * PI)
    }

    pub fn dot(&self, other: &Direction) -> f64 {
        self.0.iter().zip(other.0).map(|(a, b)| a * b).sum()
    }

    /// Applies a 3x3 rotation (row-major).
    pub fn rotated(&self, m: &[[f64; 3]; 3]) -> Direction {
        Direction(mat3_vec(m, self.0))
    }
}

pub(crate) fn norm3(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

pub fn mat3_vec(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    let mut out = [0.0; 3];
    for (o, row) in out.iter_mut().zip(m) {
        *o = row[0] * v[0] + row[1] * v[1] + row[2] * v[2];
    }
    out
}

pub fn mat3_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn mat3_transpose(a: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[j][i];
        }
    }
    out
}

/// Uniformly random rotation in SO(3), via a normalized Gaussian quaternion.
pub fn random_rotation<G: Rng + ?Sized>(rng: &mut G) -> [[f64; 3]; 3] {
    let mut q = [0.0f64; 4];
    loop {
        for x in q.iter_mut() {
            *x = rng.sample(StandardNormal);
        }
        let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            q.iter_mut().for_each(|x| *x /= n);
            break;
        }
    }
    let [w, x, y, z] = q;
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

/// Rotation about the up axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RotationZ {
    pub angle: f64,
}

impl RotationZ {
    pub fn identity() -> Self {
        Self { angle: 0.0 }
    }

    /// The 2x2 block acting on `(x, y)`.
    pub fn matrix2(&self) -> [[f64; 2]; 2] {
        let (s, c) = self.angle.sin_cos();
        [[c, -s], [s, c]]
    }

    /// `block-diag(R, 1)`.
    pub fn matrix3(&self) -> [[f64; 3]; 3] {
        let [[a, b], [c, d]] = self.matrix2();
        [[a, b, 0.0], [c, d, 0.0], [0.0, 0.0, 1.0]]
    }

    /// `block-diag(R, I_{g-2})`, the action on a `g`-dimensional feature
    /// whose first two components are equivariant.
    pub fn matrix_g(&self, g: usize) -> Array2<f64> {
        assert!(g >= 2, "feature dimension must be at least 2");
        let mut m = Array2::eye(g);
        let r = self.matrix2();
        for i in 0..2 {
            for j in 0..2 {
                m[[i, j]] = r[i][j];
            }
        }
        m
    }

    pub fn compose(&self, other: &RotationZ) -> RotationZ {
        RotationZ {
            angle: self.angle + other.angle,
        }
    }

    pub fn inverse(&self) -> RotationZ {
        RotationZ { angle: -self.angle }
    }

    pub fn apply(&self, d: Direction) -> Direction {
        d.rotated(&self.matrix3())
    }

    /// Rotates the `(x, y)` part of a 2-vector.
    pub fn apply2(&self, v: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.angle.sin_cos();
        [c * v[0] - s * v[1], s * v[0] + c * v[1]]
    }
}

pub fn rotation_z(angle: f64) -> RotationZ {
    RotationZ { angle }
}

/// Row/column angles of an equirectangular grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EquirectGrid {
    pub height: usize,
    pub width: usize,
}

impl EquirectGrid {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width }
    }

    pub fn theta(&self, row: usize) -> f64 {
        PI * (row as f64 + 0.5) / self.height as f64
    }

    pub fn phi(&self, col: usize) -> f64 {
        2.0 * PI * (col as f64 + 0.5) / self.width as f64
    }

    /// Per-row `sin(theta)`, the solid-angle weight of equirectangular pixels.
    pub fn row_weights(&self) -> Vec<f64> {
        (0..self.height).map(|i| self.theta(i).sin()).collect()
    }

    pub fn direction(&self, row: usize, col: usize) -> Direction {
        Direction::from_angles(self.theta(row), self.phi(col))
    }

    /// All pixel directions in row-major order, as an `[H * W, 3]` array.
    pub fn directions(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.height * self.width, 3));
        for i in 0..self.height {
            for j in 0..self.width {
                let d = self.direction(i, j).xyz();
                for k in 0..3 {
                    out[[i * self.width + j, k]] = d[k];
                }
            }
        }
        out
    }
}

pub fn equirect_direction(row: usize, col: usize, height: usize, width: usize) -> Result<Direction, SphereError> {
    if row >= height || col >= width {
        return Err(SphereError::OutOfRange {
            row,
            col,
            height,
            width,
        });
    }
    Ok(EquirectGrid::new(height, width).direction(row, col))
}

/// Polar angles of `h` rows whose cosines are the midpoints of `h` equal bins
/// of `[-1, 1]`, listed from the top: `theta_i = arccos(1 - (2i + 1) / h)`.
pub fn equal_area_rows(h: usize) -> Vec<f64> {
    (0..h)
        .map(|i| (1.0 - (2 * i + 1) as f64 / h as f64).clamp(-1.0, 1.0).acos())
        .collect()
}

/// Cyclic column shift: `out[row, col] = map[row, col - k mod W]`. Equals
/// resampling the map under `Rz(2 pi k / W)`.
pub fn roll_envmap(map: &EnvironmentMap, k: isize) -> EnvironmentMap {
    let data = roll_columns(&map.data().view(), k);
    EnvironmentMap::new(data).expect("roll preserves validity")
}

/// [`roll_envmap`] for any `[H, W, C]` grid.
pub fn roll_columns<T: Copy + Default>(grid: &ArrayView3<T>, k: isize) -> ndarray::Array3<T> {
    let (h, w, c) = grid.dim();
    let shift = k.rem_euclid(w as isize) as usize;
    ndarray::Array3::from_shape_fn((h, w, c), |(i, j, ch)| grid[[i, (j + w - shift) % w, ch]])
}

/// Bilinear lookup with horizontal wraparound and vertical clamping.
pub fn sample_bilinear(map: &EnvironmentMap, d: Direction) -> Result<[f64; 3], SphereError> {
    sample_grid(&map.data().view(), d)
}

/// [`sample_bilinear`] on any `[H, W, 3]` grid (e.g. log radiance).
pub fn sample_grid(grid: &ArrayView3<f32>, d: Direction) -> Result<[f64; 3], SphereError> {
    let n = norm3(d.xyz());
    if (n - 1.0).abs() > SAMPLE_TOLERANCE {
        return Err(SphereError::NotUnit(n));
    }
    let (h, w, _) = grid.dim();
    let u = d.phi() / (2.0 * PI) * w as f64 - 0.5;
    let v = d.theta() / PI * h as f64 - 0.5;
    let c0 = u.floor();
    let fu = u - c0;
    let c0 = (c0 as isize).rem_euclid(w as isize) as usize;
    let c1 = (c0 + 1) % w;
    let vc = v.clamp(0.0, (h - 1) as f64);
    let r0 = vc.floor() as usize;
    let r1 = (r0 + 1).min(h - 1);
    let fv = vc - r0 as f64;
    let mut out = [0.0; 3];
    for (ch, o) in out.iter_mut().enumerate() {
        let top = (1.0 - fu) * grid[[r0, c0, ch]] as f64 + fu * grid[[r0, c1, ch]] as f64;
        let bottom = (1.0 - fu) * grid[[r1, c0, ch]] as f64 + fu * grid[[r1, c1, ch]] as f64;
        *o = (1.0 - fv) * top + fv * bottom;
    }
    Ok(out)
}

/// Vertical-only interpolation at an exact column, used where the azimuth
/// is known to fall on a pixel center.
pub fn sample_column(grid: &ArrayView3<f32>, theta: f64, col: usize) -> [f64; 3] {
    let (h, _, _) = grid.dim();
    let v = (theta / PI * h as f64 - 0.5).clamp(0.0, (h - 1) as f64);
    let r0 = v.floor() as usize;
    let r1 = (r0 + 1).min(h - 1);
    let fv = v - r0 as f64;
    let mut out = [0.0; 3];
    for (ch, o) in out.iter_mut().enumerate() {
        *o = (1.0 - fv) * grid[[r0, col, ch]] as f64 + fv * grid[[r1, col, ch]] as f64;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn smooth_sky(h: usize, w: usize) -> EnvironmentMap {
        let grid = EquirectGrid::new(h, w);
        let data = Array3::from_shape_fn((h, w, 3), |(i, j, c)| {
            let t = grid.theta(i);
            let p = grid.phi(j);
            (1.5 + t.cos() + 0.3 * p.sin() * t.sin() + 0.1 * c as f64) as f32
        });
        EnvironmentMap::new(data).unwrap()
    }

    #[test]
    fn equirect_direction_examples() {
        let d = equirect_direction(0, 0, 2, 4).unwrap();
        assert!((d.theta() - PI / 4.0).abs() < 1e-12);
        assert!((d.xyz()[2] - (PI / 4.0).cos()).abs() < 1e-12);

        let d = equirect_direction(1, 0, 2, 4).unwrap();
        assert!((d.theta() - 3.0 * PI / 4.0).abs() < 1e-12);
        assert!((d.phi() - PI / 4.0).abs() < 1e-12);

        assert!(matches!(
            equirect_direction(2, 0, 2, 4),
            Err(SphereError::OutOfRange { .. })
        ));
        assert!(equirect_direction(0, 4, 2, 4).is_err());
    }

    #[test]
    fn equirect_directions_are_unit() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let h = rng.random_range(1..200);
            let w = rng.random_range(1..400);
            let d = equirect_direction(rng.random_range(0..h), rng.random_range(0..w), h, w).unwrap();
            assert!((norm3(d.xyz()) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn equal_area_examples() {
        let t = equal_area_rows(2);
        assert!((t[0] - PI / 3.0).abs() < 1e-12);
        assert!((t[1] - 2.0 * PI / 3.0).abs() < 1e-12);
        let t = equal_area_rows(1);
        assert!((t[0] - PI / 2.0).abs() < 1e-12);
        for h in 1..50 {
            let t = equal_area_rows(h);
            let mean: f64 = t.iter().map(|x| x.cos()).sum::<f64>() / h as f64;
            assert!(mean.abs() < 1e-12);
            assert!(mean.abs() < 1.0 / h as f64);
            assert!(t.windows(2).all(|p| p[0] < p[1]));
        }
    }

    #[test]
    fn rotation_examples() {
        let r = rotation_z(0.0).matrix3();
        assert_eq!(r, [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        let x = Direction::new([1.0, 0.0, 0.0]).unwrap();
        let y = rotation_z(PI / 2.0).apply(x).xyz();
        assert!((y[0]).abs() < 1e-15 && (y[1] - 1.0).abs() < 1e-15 && y[2] == 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let a: f64 = rng.random_range(-10.0..10.0);
            let m = mat3_mul(&rotation_z(a).matrix3(), &rotation_z(-a).matrix3());
            for i in 0..3 {
                for j in 0..3 {
                    let e = if i == j { 1.0 } else { 0.0 };
                    assert!((m[i][j] - e).abs() < 1e-12);
                }
            }
            let b: f64 = rng.random_range(-10.0..10.0);
            let ab = mat3_mul(&rotation_z(a).matrix3(), &rotation_z(b).matrix3());
            let c = rotation_z(a).compose(&rotation_z(b)).matrix3();
            for i in 0..3 {
                for j in 0..3 {
                    assert!((ab[i][j] - c[i][j]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn rotation_g_is_orthogonal() {
        let m = rotation_z(0.9).matrix_g(6);
        let p = m.dot(&m.t());
        for i in 0..6 {
            for j in 0..6 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((p[[i, j]] - e).abs() < 1e-12);
            }
        }
        assert!((m[[0, 0]] * m[[1, 1]] - m[[0, 1]] * m[[1, 0]] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn random_rotation_is_proper() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let r = random_rotation(&mut rng);
            let p = mat3_mul(&r, &mat3_transpose(&r));
            for i in 0..3 {
                for j in 0..3 {
                    let e = if i == j { 1.0 } else { 0.0 };
                    assert!((p[i][j] - e).abs() < 1e-12);
                }
            }
            let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
                - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
                + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
            assert!((det - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn roll_examples() {
        let m = smooth_sky(8, 16);
        assert_eq!(roll_envmap(&m, 0), m);
        assert_eq!(roll_envmap(&m, 16), m);
        assert_eq!(roll_envmap(&m, -16), m);
        for (a, b) in [(3, 5), (-7, 2), (15, 15)] {
            assert_eq!(roll_envmap(&roll_envmap(&m, a), b), roll_envmap(&m, a + b));
        }
        let r = roll_envmap(&m, 1);
        assert_eq!(r.pixel(2, 1), m.pixel(2, 0));
        assert_eq!(r.pixel(2, 0), m.pixel(2, 15));
    }

    #[test]
    fn sample_exact_pixel_center() {
        let m = smooth_sky(8, 16);
        let grid = EquirectGrid::new(8, 16);
        for i in 0..8 {
            for j in 0..16 {
                let v = sample_bilinear(&m, grid.direction(i, j)).unwrap();
                let p = m.pixel(i, j);
                for c in 0..3 {
                    assert!((v[c] - p[c] as f64).abs() < 1e-5, "{i} {j}");
                }
            }
        }
    }

    #[test]
    fn sample_constant_and_non_unit() {
        let m = EnvironmentMap::constant(5, 10, [0.25, 0.5, 2.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let d = Direction::from_angles(rng.random_range(0.0..PI), rng.random_range(0.0..2.0 * PI));
            let v = sample_bilinear(&m, d).unwrap();
            assert!((v[0] - 0.25).abs() < 1e-7 && (v[1] - 0.5).abs() < 1e-7 && (v[2] - 2.0).abs() < 1e-6);
        }
        assert!(matches!(
            sample_bilinear(&m, Direction([1.1, 0.0, 0.0])),
            Err(SphereError::NotUnit(_))
        ));
    }

    #[test]
    fn bilinear_close_to_nearest_neighbor_on_smooth_sky() {
        let (h, w) = (32, 64);
        let m = smooth_sky(h, w);
        // Largest color change between adjacent pixels (including the wrap seam).
        let mut max_delta = 0.0f64;
        for i in 0..h {
            for j in 0..w {
                let p = m.pixel(i, j);
                for q in [m.pixel((i + 1).min(h - 1), j), m.pixel(i, (j + 1) % w)] {
                    for c in 0..3 {
                        max_delta = max_delta.max((p[c] - q[c]).abs() as f64);
                    }
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..500 {
            let d = Direction::from_angles(rng.random_range(0.0..PI), rng.random_range(0.0..2.0 * PI));
            let v = sample_bilinear(&m, d).unwrap();
            let row = ((d.theta() / PI * h as f64) as usize).min(h - 1);
            let col = ((d.phi() / (2.0 * PI) * w as f64) as usize).min(w - 1);
            let p = m.pixel(row, col);
            for c in 0..3 {
                assert!((v[c] - p[c] as f64).abs() <= max_delta + 1e-9);
            }
        }
    }

    #[test]
    fn roll_matches_rotated_sampling() {
        let m = smooth_sky(16, 32);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..200 {
            let k = rng.random_range(-40i64..40) as isize;
            let d = Direction::from_angles(rng.random_range(0.0..PI), rng.random_range(0.0..2.0 * PI));
            let lhs = sample_bilinear(&roll_envmap(&m, k), d).unwrap();
            let rot = rotation_z(-2.0 * PI * k as f64 / 32.0);
            let rhs = sample_bilinear(&m, rot.apply(d)).unwrap();
            for c in 0..3 {
                assert!((lhs[c] - rhs[c]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn row_weights_are_symmetric_and_nonnegative() {
        for h in [1, 2, 7, 32, 64] {
            let w = EquirectGrid::new(h, 2 * h).row_weights();
            for i in 0..h {
                assert!(w[i] >= 0.0);
                assert!((w[i] - w[h - 1 - i]).abs() < 1e-12);
            }
        }
    }
}
