//! Euclidean distances and exponential spatial correlation.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::linalg::Cholesky;

/// Correlation level that defines the practical (effective) range.
pub const RANGE_CORRELATION: f64 = 0.05;

/// A set of planar locations, one per row of an n×2 matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct LocationSet {
    coords: DMatrix<f64>,
}

impl LocationSet {
    pub fn new(coords: DMatrix<f64>) -> Result<Self> {
        if coords.ncols() != 2 {
            return Err(dim_err(format!(
                "locations need 2 coordinate columns, got {}",
                coords.ncols()
            )));
        }
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(Error::DataQuality("non-finite coordinate".into()));
        }
        Ok(Self { coords })
    }

    /// An empty set, used for degenerate prediction requests.
    pub fn empty() -> Self {
        Self {
            coords: DMatrix::zeros(0, 2),
        }
    }

    pub fn from_points(points: &[[f64; 2]]) -> Result<Self> {
        Self::new(DMatrix::from_fn(points.len(), 2, |i, j| points[i][j]))
    }

    pub fn len(&self) -> usize {
        self.coords.nrows()
    }
    pub fn is_empty(&self) -> bool {
        self.coords.nrows() == 0
    }
    pub fn coords(&self) -> &DMatrix<f64> {
        &self.coords
    }
    pub fn point(&self, i: usize) -> [f64; 2] {
        [self.coords[(i, 0)], self.coords[(i, 1)]]
    }
    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            coords: crate::linalg::select_rows(&self.coords, rows),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum KernelFamily {
    #[default]
    Exponential,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    #[serde(default)]
    pub family: KernelFamily,
    pub phi: f64,
}

impl KernelSpec {
    pub fn exponential(phi: f64) -> Result<Self> {
        let k = Self {
            family: KernelFamily::Exponential,
            phi,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.phi > 0.0) || !self.phi.is_finite() {
            return Err(Error::InvalidPhi(self.phi));
        }
        Ok(())
    }

    pub fn correlation(&self, d: f64) -> f64 {
        match self.family {
            KernelFamily::Exponential => (-self.phi * d).exp(),
        }
    }

    /// Distance at which the correlation falls to [`RANGE_CORRELATION`].
    pub fn effective_range(&self) -> f64 {
        match self.family {
            KernelFamily::Exponential => -RANGE_CORRELATION.ln() / self.phi,
        }
    }
}

/// One candidate model: spatial variance proportion and correlation kernel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub alpha: f64,
    pub kernel: KernelSpec,
}

impl ModelSpec {
    pub fn new(alpha: f64, phi: f64) -> Result<Self> {
        let s = Self {
            alpha,
            kernel: KernelSpec::exponential(phi)?,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidAlpha(self.alpha));
        }
        self.kernel.validate()
    }

    pub fn phi(&self) -> f64 {
        self.kernel.phi
    }

    /// Nugget-to-partial-sill ratio τ = α⁻¹ − 1.
    pub fn noise_ratio(&self) -> f64 {
        1.0 / self.alpha - 1.0
    }
}

/// The ordered list of candidate models.
pub type ModelGrid = Vec<ModelSpec>;

/// Cartesian product of α and φ values, α-major.
pub fn grid_product(alphas: &[f64], phis: &[f64]) -> Result<ModelGrid> {
    let mut grid = Vec::with_capacity(alphas.len() * phis.len());
    for &a in alphas {
        for &p in phis {
            grid.push(ModelSpec::new(a, p)?);
        }
    }
    Ok(grid)
}

pub fn pairwise_dist(a: &LocationSet, b: &LocationSet) -> DMatrix<f64> {
    let (ca, cb) = (&a.coords, &b.coords);
    DMatrix::from_fn(a.len(), b.len(), |i, j| {
        let dx = ca[(i, 0)] - cb[(j, 0)];
        let dy = ca[(i, 1)] - cb[(j, 1)];
        dx.hypot(dy)
    })
}

pub fn exp_corr(a: &LocationSet, b: &LocationSet, kernel: &KernelSpec) -> DMatrix<f64> {
    let mut d = pairwise_dist(a, b);
    d.apply(|v| *v = kernel.correlation(*v));
    d
}

/// Correlation of a set with itself; symmetric with an exact unit diagonal.
pub fn self_corr(s: &LocationSet, kernel: &KernelSpec) -> DMatrix<f64> {
    let n = s.len();
    let mut r = DMatrix::<f64>::identity(n, n);
    for j in 0..n {
        let pj = s.point(j);
        for i in (j + 1)..n {
            let pi = s.point(i);
            let v = kernel.correlation((pi[0] - pj[0]).hypot(pi[1] - pj[1]));
            r[(i, j)] = v;
            r[(j, i)] = v;
        }
    }
    r
}

/// V = R_φ + (α⁻¹ − 1) I together with its Cholesky factor.
#[derive(Clone, Debug)]
pub struct NuggetCorr {
    pub matrix: DMatrix<f64>,
    pub chol: Cholesky,
}

pub fn nugget_corr(s: &LocationSet, spec: &ModelSpec) -> Result<NuggetCorr> {
    spec.validate()?;
    let mut v = self_corr(s, &spec.kernel);
    let tau = spec.noise_ratio();
    for i in 0..v.nrows() {
        v[(i, i)] += tau;
    }
    let chol = Cholesky::new(&v)?;
    Ok(NuggetCorr { matrix: v, chol })
}
