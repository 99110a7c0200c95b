//! Small dense symmetric solver used by the model fitter.
//!
//! The design matrices in this crate have at most eight columns, so the
//! normal equations are tiny. A pivoted Cholesky factorization is enough:
//! it is rank-revealing for positive semi-definite matrices, which is how
//! collinear designs are detected.

/// Relative pivot threshold below which a matrix is declared singular.
const PIVOT_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SingularMatrix {
    /// Number of independent columns found before the factorization stalled.
    pub rank: usize,
}

/// Cholesky factorization with diagonal pivoting: `P * A * P^T = L * L^T`.
#[derive(Debug, Clone)]
pub struct PivotedCholesky {
    dim: usize,
    /// Lower triangle of `L`, row-major, full storage.
    factor: Vec<f64>,
    /// `perm[k]` is the original index moved to position `k`.
    perm: Vec<usize>,
}

impl PivotedCholesky {
    /// Factorizes a symmetric positive definite matrix given in row-major
    /// full storage. Fails with the achieved rank when a pivot falls below
    /// the relative tolerance.
    pub fn new(matrix: &[f64], dim: usize) -> Result<Self, SingularMatrix> {
        assert_eq!(matrix.len(), dim * dim, "matrix storage mismatch");
        let mut a = matrix.to_vec();
        let mut perm: Vec<usize> = (0..dim).collect();

        let max_diag = (0..dim)
            .map(|i| a[i * dim + i])
            .fold(0.0_f64, |acc, v| acc.max(v));
        if !(max_diag > 0.0) || !max_diag.is_finite() {
            return Err(SingularMatrix { rank: 0 });
        }
        let threshold = max_diag * PIVOT_TOL;

        for k in 0..dim {
            // Largest remaining diagonal entry becomes the pivot.
            let mut pivot = k;
            for j in (k + 1)..dim {
                if a[j * dim + j] > a[pivot * dim + pivot] {
                    pivot = j;
                }
            }
            if pivot != k {
                swap_sym(&mut a, dim, k, pivot);
                perm.swap(k, pivot);
            }
            let d = a[k * dim + k];
            if !(d > threshold) || !d.is_finite() {
                return Err(SingularMatrix { rank: k });
            }
            let l_kk = d.sqrt();
            a[k * dim + k] = l_kk;
            for i in (k + 1)..dim {
                a[i * dim + k] /= l_kk;
            }
            // The trailing submatrix must stay symmetric in full storage:
            // later pivot swaps exchange whole rows and columns, so stale
            // upper-triangle entries would otherwise leak into the factor.
            for j in (k + 1)..dim {
                let l_jk = a[j * dim + k];
                for i in j..dim {
                    a[i * dim + j] -= a[i * dim + k] * l_jk;
                    a[j * dim + i] = a[i * dim + j];
                }
            }
        }

        Ok(Self {
            dim,
            factor: a,
            perm,
        })
    }

    /// Solves `A * x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        assert_eq!(b.len(), self.dim);
        let n = self.dim;
        // Forward substitution on P * b.
        let mut y = vec![0.0; n];
        for i in 0..n {
            let mut s = b[self.perm[i]];
            for j in 0..i {
                s -= self.factor[i * n + j] * y[j];
            }
            y[i] = s / self.factor[i * n + i];
        }
        // Back substitution, then undo the permutation.
        for i in (0..n).rev() {
            let mut s = y[i];
            for j in (i + 1)..n {
                s -= self.factor[j * n + i] * y[j];
            }
            y[i] = s / self.factor[i * n + i];
        }
        let mut x = vec![0.0; n];
        for i in 0..n {
            x[self.perm[i]] = y[i];
        }
        x
    }

    /// Returns `A^{-1}` in row-major full storage.
    pub fn inverse(&self) -> Vec<f64> {
        let n = self.dim;
        let mut out = vec![0.0; n * n];
        let mut e = vec![0.0; n];
        for col in 0..n {
            e.fill(0.0);
            e[col] = 1.0;
            let x = self.solve(&e);
            for row in 0..n {
                out[row * n + col] = x[row];
            }
        }
        // Symmetrize to wash out round-off asymmetry from column solves.
        for i in 0..n {
            for j in (i + 1)..n {
                let v = 0.5 * (out[i * n + j] + out[j * n + i]);
                out[i * n + j] = v;
                out[j * n + i] = v;
            }
        }
        out
    }
}

/// Unpivoted Cholesky lower factor (`A = L * L^T`), or `None` when the
/// matrix is not positive definite. Column order is preserved, which the
/// synthetic generator relies on.
pub(crate) fn plain_cholesky(matrix: &[f64], dim: usize) -> Option<Vec<f64>> {
    assert_eq!(matrix.len(), dim * dim, "matrix storage mismatch");
    let mut l = vec![0.0; dim * dim];
    for i in 0..dim {
        for j in 0..=i {
            let mut s = matrix[i * dim + j];
            for k in 0..j {
                s -= l[i * dim + k] * l[j * dim + k];
            }
            if i == j {
                if !(s > 0.0) || !s.is_finite() {
                    return None;
                }
                l[i * dim + j] = s.sqrt();
            } else {
                l[i * dim + j] = s / l[j * dim + j];
            }
        }
    }
    Some(l)
}

fn swap_sym(a: &mut [f64], n: usize, i: usize, j: usize) {
    for c in 0..n {
        a.swap(i * n + c, j * n + c);
    }
    for r in 0..n {
        a.swap(r * n + i, r * n + j);
    }
}
