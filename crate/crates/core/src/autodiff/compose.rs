//! Operations assembled from the primitive set.

use super::{GradError, Real, Result, Tape, Var};

impl<R: Real> Tape<R> {
    /// Tensor contraction over paired axes. The result carries the free axes
    /// of `a` in order, followed by the free axes of `b` in order.
    pub fn contract(&self, a: Var, a_axes: &[usize], b: Var, b_axes: &[usize]) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if a_axes.len() != b_axes.len() {
            return Err(GradError::Invalid {
                op: "contract",
                detail: format!("{} axes paired with {}", a_axes.len(), b_axes.len()),
            });
        }
        for (&i, &j) in a_axes.iter().zip(b_axes) {
            if i >= sa.len() {
                return Err(GradError::AxisOutOfRange {
                    op: "contract",
                    axis: i,
                    rank: sa.len(),
                });
            }
            if j >= sb.len() {
                return Err(GradError::AxisOutOfRange {
                    op: "contract",
                    axis: j,
                    rank: sb.len(),
                });
            }
            if sa[i] != sb[j] {
                return Err(GradError::ShapeMismatch {
                    op: "contract",
                    axis: i,
                    left: sa[i],
                    right: sb[j],
                });
            }
        }
        let free_a: Vec<usize> = (0..sa.len()).filter(|i| !a_axes.contains(i)).collect();
        let free_b: Vec<usize> = (0..sb.len()).filter(|j| !b_axes.contains(j)).collect();
        let k: usize = a_axes.iter().map(|&i| sa[i]).product();
        let m: usize = free_a.iter().map(|&i| sa[i]).product();
        let n: usize = free_b.iter().map(|&j| sb[j]).product();

        let perm_a: Vec<usize> = free_a.iter().chain(a_axes).copied().collect();
        let perm_b: Vec<usize> = b_axes.iter().chain(&free_b).copied().collect();
        let pa = self.permute_if_needed(a, &perm_a)?;
        let pb = self.permute_if_needed(b, &perm_b)?;
        let ma = self.reshape(pa, &[m, k])?;
        let mb = self.reshape(pb, &[k, n])?;
        let prod = self.matmul(ma, mb)?;
        let out_shape: Vec<usize> = free_a
            .iter()
            .map(|&i| sa[i])
            .chain(free_b.iter().map(|&j| sb[j]))
            .collect();
        self.reshape(prod, &out_shape)
    }

    fn permute_if_needed(&self, x: Var, perm: &[usize]) -> Result<Var> {
        if perm.iter().enumerate().all(|(i, &p)| i == p) {
            Ok(x)
        } else {
            self.permute(x, perm)
        }
    }

    /// Dense layer `x [n, in] · w [in, out] + b [out]`.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    /// `min(x, 0)`.
    pub fn neg_part(&self, x: Var) -> Var {
        let n = self.neg(x);
        let r = self.relu(n);
        self.neg(r)
    }
}
