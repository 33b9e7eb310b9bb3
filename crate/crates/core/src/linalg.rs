//! Dense factorizations used for basis extraction: a one-sided Jacobi SVD
//! and a Householder QR with column pivoting.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const JACOBI_MAX_SWEEPS: usize = 80;

/// Thin singular value decomposition `a = u * diag(s) * vt`.
///
/// For an `m x n` input with `k = min(m, n)`: `u` is `m x k`, `s` has `k`
/// non-increasing entries and `vt` is `k x n`.
#[derive(Clone, Debug)]
pub struct Svd {
    pub u: Tensor,
    pub s: Vec<f64>,
    pub vt: Tensor,
}

pub fn svd(a: &Tensor) -> Result<Svd> {
    let [m, n] = a.dims2()?;
    if m >= n {
        let (u, s, v) = jacobi_tall(a.data(), m, n);
        Ok(Svd {
            u: Tensor::from_vec(&[m, n], u)?,
            s,
            vt: Tensor::from_vec(&[n, n], v)?.transpose()?,
        })
    } else {
        // a^T = u' s v'^T, so a = v' s u'^T.
        let at = a.transpose()?;
        let (u, s, v) = jacobi_tall(at.data(), n, m);
        Ok(Svd {
            u: Tensor::from_vec(&[m, m], v)?,
            s,
            vt: Tensor::from_vec(&[n, m], u)?.transpose()?,
        })
    }
}

/// Hestenes one-sided Jacobi on a row-major `m x n` matrix with `m >= n`.
///
/// Returns row-major `u` (`m x n`), singular values and row-major `v`
/// (`n x n`), sorted by decreasing singular value.
fn jacobi_tall(a: &[f64], m: usize, n: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    // Column-major working copies.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| a[i * n + j]).collect()).collect();
    let mut vcols: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    let eps = f64::EPSILON;

    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let (alpha, beta, gamma) = {
                    let (cp, cq) = (&cols[p], &cols[q]);
                    let mut al = 0.0;
                    let mut be = 0.0;
                    let mut ga = 0.0;
                    for i in 0..m {
                        al += cp[i] * cp[i];
                        be += cq[i] * cq[i];
                        ga += cp[i] * cq[i];
                    }
                    (al, be, ga)
                };
                if gamma == 0.0 || gamma.abs() <= eps * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut vcols, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = cols
        .iter()
        .map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));

    let mut u = vec![0.0; m * n];
    let mut v = vec![0.0; n * n];
    let mut s = Vec::with_capacity(n);
    for (k, &j) in order.iter().enumerate() {
        let sigma = norms[j];
        s.push(sigma);
        if sigma > 0.0 {
            for i in 0..m {
                u[i * n + k] = cols[j][i] / sigma;
            }
        }
        for i in 0..n {
            v[i * n + k] = vcols[j][i];
        }
    }
    (u, s, v)
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let cp = &mut left[p];
    let cq = &mut right[0];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let xp = *x;
        let xq = *y;
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Householder QR with column pivoting, `a * P = Q * R`.
#[derive(Clone, Debug)]
pub struct ColPivQr {
    m: usize,
    n: usize,
    /// Column-major factored matrix: `R` on and above the diagonal.
    cols: Vec<Vec<f64>>,
    /// Householder vectors, one per step, acting on rows `j..m`.
    reflectors: Vec<Vec<f64>>,
    perm: Vec<usize>,
}

impl ColPivQr {
    pub fn new(a: &Tensor) -> Result<Self> {
        let [m, n] = a.dims2()?;
        let data = a.data();
        let mut cols: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| data[i * n + j]).collect()).collect();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut reflectors = Vec::new();

        for j in 0..m.min(n) {
            // Largest remaining column norm; ties go to the lower index.
            let mut best = j;
            let mut best_norm = -1.0;
            for (c, col) in cols.iter().enumerate().skip(j) {
                let norm: f64 = col[j..].iter().map(|x| x * x).sum();
                if norm > best_norm {
                    best_norm = norm;
                    best = c;
                }
            }
            cols.swap(j, best);
            perm.swap(j, best);

            let x = &cols[j][j..];
            let xnorm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let mut v = x.to_vec();
            if xnorm > 0.0 {
                let alpha = if x[0] >= 0.0 { -xnorm } else { xnorm };
                v[0] -= alpha;
                let vnorm = v.iter().map(|t| t * t).sum::<f64>().sqrt();
                if vnorm > 0.0 {
                    v.iter_mut().for_each(|t| *t /= vnorm);
                }
                for col in cols.iter_mut().skip(j + 1) {
                    apply_reflector(&v, &mut col[j..]);
                }
                cols[j][j] = alpha;
                cols[j][(j + 1)..].iter_mut().for_each(|t| *t = 0.0);
            } else {
                v.iter_mut().for_each(|t| *t = 0.0);
            }
            reflectors.push(v);
        }
        Ok(Self {
            m,
            n,
            cols,
            reflectors,
            perm,
        })
    }

    /// Column order chosen by pivoting: `perm()[i]` is the original index of
    /// the `i`-th pivot column.
    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    /// `|R[i][i]|` for each pivot step.
    pub fn r_diagonal(&self) -> Vec<f64> {
        (0..self.reflectors.len()).map(|j| self.cols[j][j].abs()).collect()
    }

    /// Numerical rank with the usual `max(m, n) * eps * |R00|` cutoff.
    pub fn rank(&self) -> usize {
        let diag = self.r_diagonal();
        let Some(&first) = diag.first() else {
            return 0;
        };
        let tol = self.m.max(self.n) as f64 * f64::EPSILON * first;
        diag.iter().take_while(|&&d| d > tol && d > 0.0).count()
    }

    /// Basic least-squares solution of `min ||a x - b||` for one right-hand
    /// side of length `m`. Components beyond the numerical rank are zero.
    pub fn solve_least_squares(&self, b: &[f64]) -> Result<Vec<f64>> {
        if b.len() != self.m {
            return Err(Error::dim(format!(
                "least squares rhs has {} rows, matrix has {}",
                b.len(),
                self.m
            )));
        }
        let mut qtb = b.to_vec();
        for (j, v) in self.reflectors.iter().enumerate() {
            apply_reflector(v, &mut qtb[j..]);
        }
        let rank = self.rank();
        let mut z = vec![0.0; self.n];
        for i in (0..rank).rev() {
            let mut acc = qtb[i];
            for (k, zk) in z.iter().enumerate().take(rank).skip(i + 1) {
                acc -= self.cols[k][i] * zk;
            }
            z[i] = acc / self.cols[i][i];
        }
        let mut x = vec![0.0; self.n];
        for (i, &p) in self.perm.iter().enumerate() {
            x[p] = z[i];
        }
        Ok(x)
    }
}

fn apply_reflector(v: &[f64], x: &mut [f64]) {
    let dot: f64 = v.iter().zip(x.iter()).map(|(a, b)| a * b).sum();
    if dot != 0.0 {
        for (xi, vi) in x.iter_mut().zip(v) {
            *xi -= 2.0 * vi * dot;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reconstruct(f: &Svd) -> Tensor {
        let [m, k] = f.u.dims2().unwrap();
        let mut us = f.u.clone();
        for i in 0..m {
            for j in 0..k {
                us.data_mut()[i * k + j] *= f.s[j];
            }
        }
        us.matmul(&f.vt).unwrap()
    }

    #[test]
    fn svd_reconstructs_wide_and_tall() {
        for (shape, seed) in [([5, 3], 1u64), ([3, 7], 2), ([4, 4], 3)] {
            let a = Tensor::randn(&shape, seed);
            let f = svd(&a).unwrap();
            assert!(reconstruct(&f).max_abs_diff(&a) < 1e-12);
            assert!(f.s.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn svd_of_zero_matrix() {
        let f = svd(&Tensor::zeros(&[3, 2])).unwrap();
        assert_eq!(f.s, vec![0.0, 0.0]);
    }

    #[test]
    fn qr_pivots_largest_column_first() {
        let a = Tensor::from_vec(&[2, 3], vec![1.0, 0.0, 3.0, 0.0, 1.0, 0.0]).unwrap();
        let qr = ColPivQr::new(&a).unwrap();
        assert_eq!(qr.perm()[0], 2);
        assert_eq!(qr.rank(), 2);
    }

    #[test]
    fn least_squares_recovers_exact_solution() {
        let a = Tensor::randn(&[6, 3], 5);
        let x = [0.5, -1.0, 2.0];
        let b: Vec<f64> = (0..6)
            .map(|i| (0..3).map(|j| a.data()[i * 3 + j] * x[j]).sum())
            .collect();
        let sol = ColPivQr::new(&a).unwrap().solve_least_squares(&b).unwrap();
        for (s, e) in sol.iter().zip(x) {
            assert!((s - e).abs() < 1e-12);
        }
    }

    #[test]
    fn rank_deficient_input_is_detected() {
        // Third column is the sum of the first two.
        let a = Tensor::from_vec(&[3, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 9.0, 7.0, 8.0, 15.0]).unwrap();
        assert_eq!(ColPivQr::new(&a).unwrap().rank(), 2);
    }
}
