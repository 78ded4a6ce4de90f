//! Synthetic data from the latent spatial model on the unit square.

use nalgebra::DMatrix;
use rand::Rng;

use crate::conjugate_regression::Dataset;
use crate::error::{Error, Result};
use crate::linalg::Cholesky;
use crate::matrix_variate::standard_normal_matrix;
use crate::seed::rng_from_seed;
use crate::spatial_kernel::{self_corr, LocationSet, ModelSpec};

/// Dense generation factors an n×n matrix; refuse beyond this.
pub const MAX_GENERATE_N: usize = 10_000;

#[derive(Clone, Debug)]
pub struct GeneratorSpec {
    pub n: usize,
    /// p×q; p counts the intercept.
    pub beta: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
    pub alpha: f64,
    pub phi: f64,
    pub seed: u64,
}

impl GeneratorSpec {
    /// Two outcomes, intercept plus one covariate, Σ = I₂, α = 0.8, φ = 4.
    pub fn sim3(n: usize, seed: u64) -> Self {
        Self {
            n,
            beta: DMatrix::from_row_slice(2, 2, &[-0.75, 1.85, 0.90, -1.10]),
            sigma: DMatrix::identity(2, 2),
            alpha: 0.8,
            phi: 4.0,
            seed,
        }
    }

    /// Three correlated outcomes.
    pub fn sim4(n: usize, seed: u64) -> Self {
        Self {
            n,
            beta: DMatrix::from_row_slice(2, 3, &[-0.75, 1.05, -0.35, 2.20, -1.10, 0.45]),
            sigma: DMatrix::from_row_slice(3, 3, &[2.0, 0.8, 0.2, 0.8, 2.0, -0.45, 0.2, -0.45, 2.0]),
            alpha: 0.8,
            phi: 4.0,
            seed,
        }
    }

    pub fn p(&self) -> usize {
        self.beta.nrows()
    }
    pub fn q(&self) -> usize {
        self.beta.ncols()
    }
    pub fn model(&self) -> Result<ModelSpec> {
        ModelSpec::new(self.alpha, self.phi)
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub data: Dataset,
    pub omega: DMatrix<f64>,
    pub spec: GeneratorSpec,
}

/// Y = Xβ + Ω + E with Ω ~ MN(0, R_φ, Σ) and E ~ MN(0, (α⁻¹−1)I, Σ).
pub fn generate(spec: &GeneratorSpec) -> Result<SyntheticData> {
    let model = spec.model()?;
    let (n, p, q) = (spec.n, spec.p(), spec.q());
    if n == 0 || p == 0 {
        return Err(Error::InvalidArgument("generator needs n >= 1 and p >= 1".into()));
    }
    if n > MAX_GENERATE_N {
        return Err(Error::InvalidArgument(format!(
            "n = {n} exceeds the dense generation limit of {MAX_GENERATE_N}; generate in batches of independent tiles instead"
        )));
    }
    if spec.sigma.shape() != (q, q) {
        return Err(crate::error::dim_err("Sigma must be q x q"));
    }
    let sigma_chol = Cholesky::new(&spec.sigma)?;
    let mut rng = rng_from_seed(spec.seed);
    let coords = DMatrix::from_fn(n, 2, |_, _| rng.random::<f64>());
    let x = DMatrix::from_fn(n, p, |_, j| if j == 0 { 1.0 } else { rng.random::<f64>() });
    let locations = LocationSet::new(coords)?;
    let r_chol = Cholesky::with_jitter(&self_corr(&locations, &model.kernel))?;
    let lt = sigma_chol.l().transpose();
    let omega = r_chol.mul_lower(&standard_normal_matrix(n, q, &mut rng)) * &lt;
    let noise = standard_normal_matrix(n, q, &mut rng) * &lt * model.noise_ratio().sqrt();
    let y = &x * &spec.beta + &omega + noise;
    Ok(SyntheticData {
        data: Dataset::new(y, x, locations)?,
        omega,
        spec: spec.clone(),
    })
}
