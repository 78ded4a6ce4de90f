//! Matrix-normal, inverse-Wishart and matrix-variate Student-t families.
//!
//! Densities are returned on the log scale only. Row and column matrices of
//! the matrix-normal are covariances (not precisions); each parameter struct
//! caches the Cholesky factors it needs so repeated evaluation and sampling
//! cost only triangular solves.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use statrs::function::gamma::ln_gamma;

use crate::error::{dim_err, Error, Result};
use crate::linalg::Cholesky;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// log Γ_q(x) = q(q−1)/4 · log π + Σ_{j=1..q} log Γ(x + (1−j)/2).
pub fn ln_multigamma(q: usize, x: f64) -> f64 {
    let qf = q as f64;
    qf * (qf - 1.0) / 4.0 * PI.ln()
        + (1..=q)
            .map(|j| ln_gamma(x + (1.0 - j as f64) / 2.0))
            .sum::<f64>()
}

pub fn standard_normal_matrix<R: rand::Rng + ?Sized>(
    rows: usize,
    cols: usize,
    rng: &mut R,
) -> DMatrix<f64> {
    // Column-major fill order is part of the determinism contract.
    DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// mean + L_row · Z · L_colᵀ
pub(crate) fn mn_transform(
    mean: &DMatrix<f64>,
    row_chol: &Cholesky,
    col_chol: &Cholesky,
    z: &DMatrix<f64>,
) -> DMatrix<f64> {
    let lz = row_chol.mul_lower(z);
    mean + lz * col_chol.l().transpose()
}

#[derive(Clone, Debug)]
pub struct MatrixNormalParams {
    mean: DMatrix<f64>,
    row_cov: DMatrix<f64>,
    col_cov: DMatrix<f64>,
    row_chol: Cholesky,
    col_chol: Cholesky,
}

impl MatrixNormalParams {
    pub fn new(mean: DMatrix<f64>, row_cov: DMatrix<f64>, col_cov: DMatrix<f64>) -> Result<Self> {
        if row_cov.nrows() != mean.nrows() || col_cov.nrows() != mean.ncols() {
            return Err(dim_err(format!(
                "matrix-normal mean {}x{} vs row_cov {}x{} and col_cov {}x{}",
                mean.nrows(),
                mean.ncols(),
                row_cov.nrows(),
                row_cov.ncols(),
                col_cov.nrows(),
                col_cov.ncols()
            )));
        }
        let row_chol = Cholesky::new(&row_cov)?;
        let col_chol = Cholesky::new(&col_cov)?;
        Ok(Self {
            mean,
            row_cov,
            col_cov,
            row_chol,
            col_chol,
        })
    }

    /// Build from already-factored covariances.
    pub fn from_factors(mean: DMatrix<f64>, row_chol: Cholesky, col_chol: Cholesky) -> Result<Self> {
        if row_chol.dim() != mean.nrows() || col_chol.dim() != mean.ncols() {
            return Err(dim_err("matrix-normal factor shapes do not match the mean"));
        }
        Ok(Self {
            row_cov: row_chol.reconstruct(),
            col_cov: col_chol.reconstruct(),
            mean,
            row_chol,
            col_chol,
        })
    }

    pub fn mean(&self) -> &DMatrix<f64> {
        &self.mean
    }
    pub fn row_cov(&self) -> &DMatrix<f64> {
        &self.row_cov
    }
    pub fn col_cov(&self) -> &DMatrix<f64> {
        &self.col_cov
    }

    /// Map a matrix of independent standard normals to a draw. Passing a zero
    /// matrix returns the mean exactly.
    pub fn from_standard(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        mn_transform(&self.mean, &self.row_chol, &self.col_chol, z)
    }
}

pub fn mn_log_density(y: &DMatrix<f64>, params: &MatrixNormalParams) -> Result<f64> {
    if y.shape() != params.mean.shape() {
        return Err(dim_err(format!(
            "observation {}x{} vs mean {}x{}",
            y.nrows(),
            y.ncols(),
            params.mean.nrows(),
            params.mean.ncols()
        )));
    }
    let (n, q) = y.shape();
    // tr{U⁻¹ (Y−M)ᵀ V⁻¹ (Y−M)} = ‖L_V⁻¹ (Y−M) L_U⁻ᵀ‖²_F
    let a = params.row_chol.solve_lower(&(y - &params.mean));
    let b = params.col_chol.solve_lower(&a.transpose());
    let quad = b.norm_squared();
    Ok(-0.5 * (n * q) as f64 * LN_2PI
        - 0.5 * n as f64 * params.col_chol.log_det()
        - 0.5 * q as f64 * params.row_chol.log_det()
        - 0.5 * quad)
}

pub fn mn_sample<R: rand::Rng + ?Sized>(params: &MatrixNormalParams, rng: &mut R) -> DMatrix<f64> {
    let (n, q) = params.mean.shape();
    let z = standard_normal_matrix(n, q, rng);
    params.from_standard(&z)
}

#[derive(Clone, Debug)]
pub struct InverseWishartParams {
    scale: DMatrix<f64>,
    dof: f64,
    scale_chol: Cholesky,
}

impl InverseWishartParams {
    pub fn new(scale: DMatrix<f64>, dof: f64) -> Result<Self> {
        let q = scale.nrows();
        if !(dof > q as f64 - 1.0) || !dof.is_finite() {
            return Err(Error::InvalidDof { dof, q });
        }
        let scale_chol = Cholesky::new(&scale)?;
        Ok(Self {
            scale,
            dof,
            scale_chol,
        })
    }

    pub fn scale(&self) -> &DMatrix<f64> {
        &self.scale
    }
    pub fn dof(&self) -> f64 {
        self.dof
    }
    pub fn dim(&self) -> usize {
        self.scale.nrows()
    }

    /// E[Σ] = Ψ / (ν − q − 1); defined for ν > q + 1.
    pub fn mean(&self) -> Option<DMatrix<f64>> {
        let denom = self.dof - self.dim() as f64 - 1.0;
        (denom > 0.0).then(|| &self.scale / denom)
    }

    /// Draw Σ and return its Cholesky factor alongside, which every caller
    /// needs for the matrix-normal stage.
    pub fn sample_with_factor<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> (DMatrix<f64>, Cholesky) {
        let q = self.dim();
        // Bartlett: Σ⁻¹ = C⁻ᵀ A Aᵀ C⁻¹ ~ W(Ψ⁻¹, ν) with Ψ = C Cᵀ, so
        // Σ = (C A⁻ᵀ)(C A⁻ᵀ)ᵀ.
        let mut a = DMatrix::<f64>::zeros(q, q);
        for i in 0..q {
            let chi = ChiSquared::new(self.dof - i as f64).expect("dof validated at construction");
            a[(i, i)] = chi.sample(rng).sqrt();
            for j in 0..i {
                a[(i, j)] = rng.sample::<f64, _>(StandardNormal);
            }
        }
        let mut a_inv = DMatrix::<f64>::identity(q, q);
        a.solve_lower_triangular_mut(&mut a_inv);
        let g = self.scale_chol.l() * a_inv.transpose();
        let mut sigma = &g * g.transpose();
        crate::linalg::symmetrize(&mut sigma);
        // G is a valid square root but not triangular; refactor.
        let chol = Cholesky::new(&sigma).unwrap_or_else(|_| {
            // G has a positive diagonal product, so GGᵀ is SPD up to rounding.
            Cholesky::with_jitter(&sigma).expect("inverse-Wishart draw is SPD")
        });
        (sigma, chol)
    }
}

pub fn iw_sample<R: rand::Rng + ?Sized>(params: &InverseWishartParams, rng: &mut R) -> DMatrix<f64> {
    params.sample_with_factor(rng).0
}

/// Matrix-variate Student-t T_{m,q}(ν, μ, V, Ψ): Υ | Σ ~ MN(μ, V, Σ) with
/// Σ ~ IW(Ψ, ν) integrated out.
#[derive(Clone, Debug)]
pub struct MatrixTParams {
    dof: f64,
    location: DMatrix<f64>,
    row_scale: DMatrix<f64>,
    col_scale: DMatrix<f64>,
    row_chol: Cholesky,
    col: InverseWishartParams,
}

impl MatrixTParams {
    pub fn new(
        dof: f64,
        location: DMatrix<f64>,
        row_scale: DMatrix<f64>,
        col_scale: DMatrix<f64>,
    ) -> Result<Self> {
        if row_scale.nrows() != location.nrows() || col_scale.nrows() != location.ncols() {
            return Err(dim_err(format!(
                "matrix-t location {}x{} vs row_scale {}x{} and col_scale {}x{}",
                location.nrows(),
                location.ncols(),
                row_scale.nrows(),
                row_scale.ncols(),
                col_scale.nrows(),
                col_scale.ncols()
            )));
        }
        let col = InverseWishartParams::new(col_scale.clone(), dof)?;
        let row_chol = Cholesky::new(&row_scale)?;
        Ok(Self {
            dof,
            location,
            row_scale,
            col_scale,
            row_chol,
            col,
        })
    }

    pub fn dof(&self) -> f64 {
        self.dof
    }
    pub fn location(&self) -> &DMatrix<f64> {
        &self.location
    }
    pub fn row_scale(&self) -> &DMatrix<f64> {
        &self.row_scale
    }
    pub fn col_scale(&self) -> &DMatrix<f64> {
        &self.col_scale
    }
    pub fn nrows(&self) -> usize {
        self.location.nrows()
    }
    pub fn ncols(&self) -> usize {
        self.location.ncols()
    }

    /// Marginal over a subset of rows; matrix-t rows marginalize to a
    /// matrix-t with the same dof and column scale.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let loc = crate::linalg::select_rows(&self.location, rows);
        let rs = DMatrix::from_fn(rows.len(), rows.len(), |i, j| self.row_scale[(rows[i], rows[j])]);
        Self::new(self.dof, loc, rs, self.col_scale.clone())
    }
}

pub fn mt_log_density(y: &DMatrix<f64>, params: &MatrixTParams) -> Result<f64> {
    if y.shape() != params.location.shape() {
        return Err(dim_err(format!(
            "observation {}x{} vs location {}x{}",
            y.nrows(),
            y.ncols(),
            params.location.nrows(),
            params.location.ncols()
        )));
    }
    let (m, q) = y.shape();
    let (mf, qf) = (m as f64, q as f64);
    let nu = params.dof;
    // |I_m + V⁻¹ D Ψ⁻¹ Dᵀ| = |I_q + BᵀB| with B = L_V⁻¹ D L_Ψ⁻ᵀ.
    let a = params.row_chol.solve_lower(&(y - &params.location));
    let bt = params.col.scale_chol.solve_lower(&a.transpose());
    let inner = DMatrix::<f64>::identity(q, q) + &bt * bt.transpose();
    let log_det_inner = Cholesky::new(&inner)?.log_det();
    Ok(ln_multigamma(q, (nu + mf) / 2.0)
        - ln_multigamma(q, nu / 2.0)
        - 0.5 * mf * qf * PI.ln()
        - 0.5 * mf * params.col.scale_chol.log_det()
        - 0.5 * qf * params.row_chol.log_det()
        - 0.5 * (nu + mf) * log_det_inner)
}

pub fn mt_sample<R: rand::Rng + ?Sized>(params: &MatrixTParams, rng: &mut R) -> DMatrix<f64> {
    let (_, sigma_chol) = params.col.sample_with_factor(rng);
    let z = standard_normal_matrix(params.nrows(), params.ncols(), rng);
    mn_transform(&params.location, &params.row_chol, &sigma_chol, &z)
}
