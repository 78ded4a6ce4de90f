//! Dense Cholesky factorization and the triangular-solve helpers built on it.
//!
//! Every "inverse" in the model is realized as a pair of triangular solves
//! against a cached lower factor `L` with `A = L Lᵀ`.

use nalgebra::DMatrix;

use crate::error::{dim_err, Error, Result};

/// Diagonal load added once when a correlation matrix without nugget fails
/// to factor (duplicate or near-duplicate locations).
pub const CORRELATION_JITTER: f64 = 1e-10;

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
#[derive(Clone, Debug)]
pub struct Cholesky {
    l: DMatrix<f64>,
}

impl Cholesky {
    /// Factor `a`; only the lower triangle is read.
    pub fn new(a: &DMatrix<f64>) -> Result<Self> {
        if !a.is_square() {
            return Err(dim_err(format!(
                "Cholesky needs a square matrix, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        let n = a.nrows();
        // Build the upper factor U (A = UᵀU) column by column so the inner
        // products run over contiguous column-major storage, then transpose.
        let mut u = DMatrix::<f64>::zeros(n, n);
        {
            let us = u.as_mut_slice();
            for j in 0..n {
                for i in 0..=j {
                    // A is symmetric; read its lower triangle as (j, i).
                    let mut s = a[(j, i)];
                    let (ci, cj) = (i * n, j * n);
                    s -= dot(&us[ci..ci + i], &us[cj..cj + i]);
                    if i == j {
                        if !(s > 0.0) || !s.is_finite() {
                            return Err(Error::NonSpdMatrix { minor: j + 1 });
                        }
                        us[cj + j] = s.sqrt();
                    } else {
                        us[cj + i] = s / us[ci + i];
                    }
                }
            }
        }
        Ok(Self { l: u.transpose() })
    }

    /// Factor `a`; on failure retry once with [`CORRELATION_JITTER`] on the
    /// diagonal before reporting the error.
    pub fn with_jitter(a: &DMatrix<f64>) -> Result<Self> {
        match Self::new(a) {
            Ok(c) => Ok(c),
            Err(Error::NonSpdMatrix { .. }) => {
                let mut loaded = a.clone();
                for i in 0..loaded.nrows() {
                    loaded[(i, i)] += CORRELATION_JITTER;
                }
                log::debug!("Cholesky failed; retrying with diagonal jitter");
                Self::new(&loaded)
            }
            Err(e) => Err(e),
        }
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    pub fn l(&self) -> &DMatrix<f64> {
        &self.l
    }

    /// log |A|
    pub fn log_det(&self) -> f64 {
        2.0 * self.l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// L⁻¹ B
    pub fn solve_lower(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        self.solve_lower_mut(&mut x);
        x
    }

    pub fn solve_lower_mut(&self, b: &mut DMatrix<f64>) {
        assert_eq!(b.nrows(), self.dim(), "solve_lower: row mismatch");
        let ok = self.l.solve_lower_triangular_mut(b);
        debug_assert!(ok);
    }

    /// L⁻ᵀ B
    pub fn solve_upper(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        self.solve_upper_mut(&mut x);
        x
    }

    pub fn solve_upper_mut(&self, b: &mut DMatrix<f64>) {
        assert_eq!(b.nrows(), self.dim(), "solve_upper: row mismatch");
        let ok = self.l.tr_solve_lower_triangular_mut(b);
        debug_assert!(ok);
    }

    /// A⁻¹ B
    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        self.solve_lower_mut(&mut x);
        self.solve_upper_mut(&mut x);
        x
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        let mut inv = self.solve(&DMatrix::identity(self.dim(), self.dim()));
        symmetrize(&mut inv);
        inv
    }

    /// L Z
    pub fn mul_lower(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        lower_mul(&self.l, z)
    }

    /// Reconstruct A = L Lᵀ.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.l * self.l.transpose()
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four accumulators let the compiler vectorize without reassociating.
    let n = a.len().min(b.len());
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    let chunks = n / 4;
    for c in 0..chunks {
        let k = 4 * c;
        s0 += a[k] * b[k];
        s1 += a[k + 1] * b[k + 1];
        s2 += a[k + 2] * b[k + 2];
        s3 += a[k + 3] * b[k + 3];
    }
    let mut s = (s0 + s1) + (s2 + s3);
    for k in 4 * chunks..n {
        s += a[k] * b[k];
    }
    s
}

/// Product of a lower-triangular matrix with a dense matrix, skipping the
/// structural zeros.
pub fn lower_mul(l: &DMatrix<f64>, z: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(l.ncols(), z.nrows());
    let n = l.nrows();
    let mut out = DMatrix::<f64>::zeros(n, z.ncols());
    for c in 0..z.ncols() {
        for k in 0..l.ncols() {
            let zk = z[(k, c)];
            if zk == 0.0 {
                continue;
            }
            let col = l.column(k);
            let mut oc = out.column_mut(c);
            for i in k..n {
                oc[i] += col[i] * zk;
            }
        }
    }
    out
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Numerical rank of a symmetric positive semidefinite Gram matrix.
pub fn gram_rank(gram: &DMatrix<f64>, rel_tol: f64) -> usize {
    if gram.nrows() == 0 {
        return 0;
    }
    let eig = gram.clone().symmetric_eigen();
    let max = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
    if max <= 0.0 {
        return 0;
    }
    eig.eigenvalues
        .iter()
        .filter(|&&v| v > rel_tol * max)
        .count()
}

/// Relative Frobenius distance ‖a − b‖ / max(‖b‖, tiny).
pub fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let denom = b.norm().max(f64::MIN_POSITIVE);
    (a - b).norm() / denom
}

/// Select the listed rows of `m`, in order.
pub fn select_rows(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), m.ncols(), |i, j| m[(rows[i], j)])
}

/// log Σ exp(x), −∞ for an empty or all −∞ input.
pub fn log_sum_exp(xs: impl IntoIterator<Item = f64> + Clone) -> f64 {
    let max = xs
        .clone()
        .into_iter()
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + xs.into_iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}
