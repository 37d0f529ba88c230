//! Dense column-pivoted Householder QR with a full orthogonal factor.
//!
//! The solver factors the transposed constraint Jacobian `E^T = Q R P^T`
//! once per iteration and reuses it three ways:
//!
//! * null-space basis of `E`: trailing columns of `Q`,
//! * minimum-norm particular solution of `E x = b`,
//! * least-squares multiplier recovery from `E^T lam ~ g`.
//!
//! Problem sizes are tens of variables, so no blocking or norm downdating;
//! column norms are recomputed exactly at each step.

use nalgebra::{DMatrix, DVector};

/// QR factorization `A P = Q R` with `Q` full (m x m) and column pivoting.
#[derive(Debug, Clone)]
pub struct ColPivQr {
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    /// `perm[k]` is the original column moved to pivot position k.
    perm: Vec<usize>,
}

impl ColPivQr {
    pub fn factor(a: &DMatrix<f64>) -> Self {
        let (m, n) = a.shape();
        let mut r = a.clone();
        let mut q = DMatrix::identity(m, m);
        let mut perm: Vec<usize> = (0..n).collect();
        for k in 0..m.min(n) {
            // Pivot: bring the column with the largest remaining norm to k.
            let mut best = k;
            let mut best_norm = r.view((k, k), (m - k, 1)).norm_squared();
            for j in (k + 1)..n {
                let nj = r.view((k, j), (m - k, 1)).norm_squared();
                if nj > best_norm {
                    best = j;
                    best_norm = nj;
                }
            }
            if best != k {
                r.swap_columns(k, best);
                perm.swap(k, best);
            }
            if best_norm == 0.0 {
                break;
            }
            // Householder reflector for column k below the diagonal.
            let x0 = r[(k, k)];
            let alpha = -x0.signum() * best_norm.sqrt();
            let mut v = DVector::zeros(m - k);
            for i in 0..(m - k) {
                v[i] = r[(k + i, k)];
            }
            v[0] -= alpha;
            let vn2 = v.norm_squared();
            if vn2 > 0.0 {
                let beta = 2.0 / vn2;
                // R[k:, k:] -= beta v (v^T R[k:, k:])
                for j in k..n {
                    let mut dot = 0.0;
                    for i in 0..(m - k) {
                        dot += v[i] * r[(k + i, j)];
                    }
                    let s = beta * dot;
                    for i in 0..(m - k) {
                        r[(k + i, j)] -= s * v[i];
                    }
                }
                // Q[:, k:] -= beta (Q[:, k:] v) v^T
                for i in 0..m {
                    let mut dot = 0.0;
                    for j in 0..(m - k) {
                        dot += q[(i, k + j)] * v[j];
                    }
                    let s = beta * dot;
                    for j in 0..(m - k) {
                        q[(i, k + j)] -= s * v[j];
                    }
                }
            }
            r[(k, k)] = alpha;
            for i in (k + 1)..m {
                r[(i, k)] = 0.0;
            }
        }
        ColPivQr { q, r, perm }
    }

    /// Numerical rank from the pivoted diagonal of `R`.
    #[cfg_attr(not(test), allow(dead_code))]
    pub fn rank(&self, rel_tol: f64) -> usize {
        let k = self.r.nrows().min(self.r.ncols());
        if k == 0 {
            return 0;
        }
        let scale = self.r[(0, 0)].abs();
        if scale == 0.0 {
            return 0;
        }
        (0..k)
            .take_while(|&i| self.r[(i, i)].abs() > rel_tol * scale)
            .count()
    }

    /// Original column indices pivoted beyond the given rank.
    pub fn trailing_columns(&self, rank: usize) -> Vec<usize> {
        let mut cols: Vec<usize> = self.perm[rank..].to_vec();
        cols.sort_unstable();
        cols
    }

    /// Columns `from..` of `Q`; for a factorization of `E^T` with full row
    /// rank r, `columns_from(r)` spans the null space of `E`.
    pub fn columns_from(&self, from: usize) -> DMatrix<f64> {
        let m = self.q.nrows();
        self.q.view((0, from), (m, m - from)).into_owned()
    }

    /// Minimum-norm solution of `E x = b` where `self` factors `E^T`
    /// (m x r, full column rank r): solves the lower-triangular system
    /// `R^T y = P^T b`, then `x = Q[:, :r] y`.
    pub fn min_norm_row_solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let r = self.r.ncols();
        let mut pb = DVector::zeros(r);
        for j in 0..r {
            pb[j] = b[self.perm[j]];
        }
        // forward substitution on R^T (lower triangular)
        let mut y = DVector::zeros(r);
        for i in 0..r {
            let mut s = pb[i];
            for j in 0..i {
                s -= self.r[(j, i)] * y[j];
            }
            y[i] = s / self.r[(i, i)];
        }
        let m = self.q.nrows();
        let mut x = DVector::zeros(m);
        for j in 0..r {
            for i in 0..m {
                x[i] += self.q[(i, j)] * y[j];
            }
        }
        x
    }

    /// Least-squares solution of `E^T lam ~ g` where `self` factors `E^T`:
    /// `lam = P R1^{-1} (Q^T g)[:rank]`, zero on any rank-deficient tail.
    pub fn least_squares(&self, g: &DVector<f64>, rank: usize) -> DVector<f64> {
        let r = self.r.ncols();
        let mut qtg = DVector::zeros(rank);
        for j in 0..rank {
            let mut s = 0.0;
            for i in 0..self.q.nrows() {
                s += self.q[(i, j)] * g[i];
            }
            qtg[j] = s;
        }
        // back substitution on the leading rank x rank block of R
        let mut mu = DVector::zeros(r);
        for i in (0..rank).rev() {
            let mut s = qtg[i];
            for j in (i + 1)..rank {
                s -= self.r[(i, j)] * mu[j];
            }
            mu[i] = s / self.r[(i, i)];
        }
        let mut lam = DVector::zeros(r);
        for j in 0..r {
            lam[self.perm[j]] = mu[j];
        }
        lam
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference(m: usize, n: usize, seed: u64) -> DMatrix<f64> {
        // Small deterministic LCG; values in [-1, 1).
        let mut state = seed.wrapping_mul(2862933555777941757).wrapping_add(3037000493);
        DMatrix::from_fn(m, n, |_, _| {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        })
    }

    fn permuted(a: &DMatrix<f64>, perm: &[usize]) -> DMatrix<f64> {
        let mut ap = DMatrix::zeros(a.nrows(), a.ncols());
        for (k, &j) in perm.iter().enumerate() {
            ap.set_column(k, &a.column(j));
        }
        ap
    }

    #[test]
    fn factorization_reconstructs_input() {
        for seed in 0..5 {
            let a = reference(7, 4, seed);
            let f = ColPivQr::factor(&a);
            let qr = &f.q * &f.r;
            let ap = permuted(&a, &f.perm);
            assert!((qr - ap).amax() < 1e-12);
            // Q orthogonal
            let qtq = f.q.transpose() * &f.q;
            assert!((qtq - DMatrix::identity(7, 7)).amax() < 1e-12);
        }
    }

    #[test]
    fn null_space_annihilates_rows() {
        let et = reference(9, 3, 11);
        let f = ColPivQr::factor(&et);
        assert_eq!(f.rank(1e-12), 3);
        let z = f.columns_from(3);
        let ez = et.transpose() * z;
        assert!(ez.amax() < 1e-12);
    }

    #[test]
    fn min_norm_solve_satisfies_and_minimizes() {
        let et = reference(8, 3, 5);
        let e = et.transpose();
        let f = ColPivQr::factor(&et);
        let b = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let x = f.min_norm_row_solve(&b);
        assert!((&e * &x - &b).amax() < 1e-12);
        // Minimum-norm solutions are orthogonal to the null space.
        let z = f.columns_from(3);
        assert!((z.transpose() * &x).amax() < 1e-12);
    }

    #[test]
    fn least_squares_matches_normal_equations() {
        let et = reference(8, 3, 21);
        let f = ColPivQr::factor(&et);
        let g = reference(8, 1, 3).column(0).into_owned();
        let lam = f.least_squares(&g, 3);
        // normal equations: E E^T lam = E g
        let lhs = et.transpose() * &et * &lam;
        let rhs = et.transpose() * &g;
        assert!((lhs - rhs).amax() < 1e-11);
    }

    #[test]
    fn rank_detects_duplicate_columns() {
        let mut et = reference(6, 3, 9);
        let c0 = et.column(0).into_owned();
        et.set_column(2, &c0);
        let f = ColPivQr::factor(&et);
        assert_eq!(f.rank(1e-10), 2);
        assert_eq!(f.trailing_columns(2).len(), 1);
    }
}
