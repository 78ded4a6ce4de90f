//! Conjugate matrix-normal / inverse-Wishart regression.
//!
//! Two models share this machinery. The marginal model
//! `Y = Xβ + E, E ~ MN(0, V, Σ)` is updated shard by shard in closed form.
//! The latent spatial model `Y = Xβ + Ω + E` with `Ω ~ MN(0, R_φ, Σ)` and
//! `E ~ MN(0, (α⁻¹−1)I, Σ)` reduces to the marginal model with
//! `V = R_φ + (α⁻¹−1)I` for (β, Σ); Ω and predictions are recovered from
//! the Cholesky factor of that V, so `R_φ` itself is never inverted on the
//! production path. A dense reference path that builds the full
//! `(p+n)`-dimensional posterior is kept for validation.
//!
//! Convention: `m0` is precision weighted, so the prior mean of β is `M0 m0`.

use std::sync::OnceLock;

use nalgebra::DMatrix;

use crate::error::{dim_err, Error, Result};
use crate::linalg::{gram_rank, symmetrize, Cholesky};
use crate::matrix_variate::{
    ln_multigamma, standard_normal_matrix, InverseWishartParams, MatrixTParams,
};
use crate::spatial_kernel::{exp_corr, nugget_corr, self_corr, LocationSet, ModelSpec};

#[derive(Clone, Debug)]
pub struct PriorSpec {
    pub m0: DMatrix<f64>,
    pub big_m0: DMatrix<f64>,
    pub psi0: DMatrix<f64>,
    pub nu0: f64,
}

impl PriorSpec {
    /// m₀ = 0, M₀ = 10·I, Ψ₀ = I, ν₀ = 3.
    pub fn default_for(p: usize, q: usize) -> Self {
        Self {
            m0: DMatrix::zeros(p, q),
            big_m0: DMatrix::identity(p, p) * 10.0,
            psi0: DMatrix::identity(q, q),
            nu0: 3.0,
        }
    }

    pub fn p(&self) -> usize {
        self.m0.nrows()
    }
    pub fn q(&self) -> usize {
        self.m0.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let (p, q) = (self.p(), self.q());
        if self.big_m0.shape() != (p, p) || self.psi0.shape() != (q, q) {
            return Err(dim_err(format!(
                "prior m0 is {p}x{q} but M0 is {}x{} and Psi0 is {}x{}",
                self.big_m0.nrows(),
                self.big_m0.ncols(),
                self.psi0.nrows(),
                self.psi0.ncols()
            )));
        }
        if !(self.nu0 > q as f64 - 1.0) {
            return Err(Error::InvalidDof { dof: self.nu0, q });
        }
        Cholesky::new(&self.big_m0)?;
        Cholesky::new(&self.psi0)?;
        Ok(())
    }

    pub(crate) fn check_shape(&self, p: usize, q: usize) -> Result<()> {
        if self.p() != p || self.q() != q {
            return Err(dim_err(format!(
                "prior is for p={}, q={} but data has p={p}, q={q}",
                self.p(),
                self.q()
            )));
        }
        Ok(())
    }

    /// The prior itself as an MNIW state: mean M₀m₀, precision M₀⁻¹.
    pub fn as_posterior(&self) -> Result<MniwPosterior> {
        self.validate()?;
        let m_chol = Cholesky::new(&self.big_m0)?;
        Ok(MniwPosterior {
            mean: &self.big_m0 * &self.m0,
            row_precision: m_chol.inverse(),
            iw_scale: self.psi0.clone(),
            iw_dof: self.nu0,
            beta_rows: self.p(),
        })
    }
}

/// Outcomes, design and locations for n sites.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub y: DMatrix<f64>,
    pub x: DMatrix<f64>,
    pub locations: LocationSet,
}

impl Dataset {
    pub fn new(y: DMatrix<f64>, x: DMatrix<f64>, locations: LocationSet) -> Result<Self> {
        if y.nrows() != x.nrows() || y.nrows() != locations.len() {
            return Err(dim_err(format!(
                "row counts differ: Y has {}, X has {}, locations have {}",
                y.nrows(),
                x.nrows(),
                locations.len()
            )));
        }
        if y.iter().chain(x.iter()).any(|v| !v.is_finite()) {
            return Err(Error::DataQuality("non-finite value in Y or X".into()));
        }
        Ok(Self { y, x, locations })
    }

    pub fn n(&self) -> usize {
        self.y.nrows()
    }
    pub fn p(&self) -> usize {
        self.x.ncols()
    }
    pub fn q(&self) -> usize {
        self.y.ncols()
    }

    /// Reject designs without full column rank.
    pub fn check_rank(&self) -> Result<()> {
        let p = self.p();
        let rank = gram_rank(&(self.x.transpose() * &self.x), 1e-12);
        if rank < p {
            return Err(Error::RankDeficient { rank, p });
        }
        Ok(())
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            y: crate::linalg::select_rows(&self.y, rows),
            x: crate::linalg::select_rows(&self.x, rows),
            locations: self.locations.select(rows),
        }
    }
}

/// Closed-form MNIW posterior over a d×q coefficient matrix and Σ.
/// The first `beta_rows` rows of the coefficient are β; any remaining rows
/// are the latent Ω.
#[derive(Clone, Debug)]
pub struct MniwPosterior {
    pub mean: DMatrix<f64>,
    pub row_precision: DMatrix<f64>,
    pub iw_scale: DMatrix<f64>,
    pub iw_dof: f64,
    pub beta_rows: usize,
}

impl MniwPosterior {
    pub fn d(&self) -> usize {
        self.mean.nrows()
    }
    pub fn q(&self) -> usize {
        self.mean.ncols()
    }
    pub fn beta_mean(&self) -> DMatrix<f64> {
        self.mean.rows(0, self.beta_rows).into_owned()
    }
    /// Row covariance (the inverse of the stored precision).
    pub fn row_cov(&self) -> Result<DMatrix<f64>> {
        Ok(Cholesky::new(&self.row_precision)?.inverse())
    }
    pub fn sigma_mean(&self) -> Option<DMatrix<f64>> {
        let denom = self.iw_dof - self.q() as f64 - 1.0;
        (denom > 0.0).then(|| &self.iw_scale / denom)
    }
}

/// Natural-parameter accumulator for the marginal model. Shard
/// contributions are plain sums, so the fold order is irrelevant.
#[derive(Clone, Debug)]
pub struct NaturalPosterior {
    /// M⁻¹ = M₀⁻¹ + Σ XᵀV⁻¹X
    pub precision: DMatrix<f64>,
    /// m = m₀ + Σ XᵀV⁻¹Y
    pub weighted_mean: DMatrix<f64>,
    /// Ψ₀ + m₀ᵀM₀m₀ + Σ YᵀV⁻¹Y
    pub quad: DMatrix<f64>,
    pub dof: f64,
}

impl NaturalPosterior {
    pub fn from_prior(prior: &PriorSpec) -> Result<Self> {
        prior.validate()?;
        let m_chol = Cholesky::new(&prior.big_m0)?;
        Ok(Self {
            precision: m_chol.inverse(),
            weighted_mean: prior.m0.clone(),
            quad: &prior.psi0 + prior.m0.transpose() * &prior.big_m0 * &prior.m0,
            dof: prior.nu0,
        })
    }

    pub fn absorb(&mut self, y: &DMatrix<f64>, x: &DMatrix<f64>, v_chol: &Cholesky) -> Result<()> {
        check_shard(y, x, v_chol, self.precision.nrows(), self.quad.nrows())?;
        let ly = v_chol.solve_lower(y);
        let lx = v_chol.solve_lower(x);
        self.precision += lx.transpose() * &lx;
        self.weighted_mean += lx.transpose() * &ly;
        self.quad += ly.transpose() * &ly;
        self.dof += y.nrows() as f64;
        Ok(())
    }

    pub fn to_mniw(&self) -> Result<MniwPosterior> {
        let p_chol = Cholesky::new(&self.precision)?;
        let mean = p_chol.solve(&self.weighted_mean);
        let mut psi = &self.quad - self.weighted_mean.transpose() * &mean;
        symmetrize(&mut psi);
        Ok(MniwPosterior {
            mean,
            row_precision: self.precision.clone(),
            iw_scale: psi,
            iw_dof: self.dof,
            beta_rows: self.precision.nrows(),
        })
    }
}

fn check_shard(y: &DMatrix<f64>, x: &DMatrix<f64>, v_chol: &Cholesky, p: usize, q: usize) -> Result<()> {
    if y.nrows() != x.nrows() || v_chol.dim() != y.nrows() {
        return Err(dim_err(format!(
            "shard rows: Y {}, X {}, V {}",
            y.nrows(),
            x.nrows(),
            v_chol.dim()
        )));
    }
    if x.ncols() != p || y.ncols() != q {
        return Err(dim_err(format!(
            "shard is p={}, q={} but posterior is p={p}, q={q}",
            x.ncols(),
            y.ncols()
        )));
    }
    Ok(())
}

/// Absorb one shard `(Y, X)` with error row covariance `V` (given by its
/// Cholesky factor) into a marginal-model posterior.
pub fn sequential_update(
    post: &MniwPosterior,
    y: &DMatrix<f64>,
    x: &DMatrix<f64>,
    v_chol: &Cholesky,
) -> Result<MniwPosterior> {
    check_shard(y, x, v_chol, post.d(), post.q())?;
    if y.nrows() == 0 {
        return Ok(post.clone());
    }
    let ly = v_chol.solve_lower(y);
    let lx = v_chol.solve_lower(x);
    let precision = &post.row_precision + lx.transpose() * &lx;
    let p_chol = Cholesky::new(&precision)?;
    let rhs = &post.row_precision * &post.mean + lx.transpose() * &ly;
    let mean = p_chol.solve(&rhs);
    // Completed square keeps Ψ a sum of PSD terms:
    // Ψ' = Ψ + (Y−XB')ᵀV⁻¹(Y−XB') + (B'−B)ᵀ M⁻¹ (B'−B)
    let resid = &ly - &lx * &mean;
    let shift = &mean - &post.mean;
    let mut psi = &post.iw_scale
        + resid.transpose() * &resid
        + shift.transpose() * &post.row_precision * &shift;
    symmetrize(&mut psi);
    Ok(MniwPosterior {
        mean,
        row_precision: precision,
        iw_scale: psi,
        iw_dof: post.iw_dof + y.nrows() as f64,
        beta_rows: post.beta_rows,
    })
}

/// Posterior of the marginal model on a single dataset.
pub fn marginal_posterior(
    y: &DMatrix<f64>,
    x: &DMatrix<f64>,
    v_chol: &Cholesky,
    prior: &PriorSpec,
) -> Result<MniwPosterior> {
    prior.check_shape(x.ncols(), y.ncols())?;
    sequential_update(&prior.as_posterior()?, y, x, v_chol)
}

/// One joint draw of the parameters.
#[derive(Clone, Debug)]
pub struct ThetaDraw {
    pub beta: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
    pub omega: Option<DMatrix<f64>>,
}

/// Exact draws from a dense MNIW posterior: Σ ~ IW, then γ ~ MN(μ, P⁻¹, Σ).
pub fn posterior_samples<R: rand::Rng + ?Sized>(
    post: &MniwPosterior,
    draws: usize,
    rng: &mut R,
) -> Result<Vec<ThetaDraw>> {
    if draws == 0 {
        return Err(Error::InvalidArgument("draw count must be at least 1".into()));
    }
    let iw = InverseWishartParams::new(post.iw_scale.clone(), post.iw_dof)?;
    let p_chol = Cholesky::new(&post.row_precision)?;
    let (d, q) = (post.d(), post.q());
    let mut out = Vec::with_capacity(draws);
    for _ in 0..draws {
        let (sigma, s_chol) = iw.sample_with_factor(rng);
        let z = standard_normal_matrix(d, q, rng);
        let gamma = &post.mean + p_chol.solve_upper(&z) * s_chol.l().transpose();
        let beta = gamma.rows(0, post.beta_rows).into_owned();
        let omega = (d > post.beta_rows).then(|| gamma.rows(post.beta_rows, d - post.beta_rows).into_owned());
        out.push(ThetaDraw { beta, sigma, omega });
    }
    Ok(out)
}

/// Memory-lean β | Σ sampler for the marginal model. Keeps only M₀⁻¹,
/// XᵀV⁻¹ and the factor of M_n⁻¹.
#[derive(Clone, Debug)]
pub struct MemleanBetaSampler {
    prior_mean: DMatrix<f64>,
    m0_chol: Cholesky,
    m0_inv: DMatrix<f64>,
    xt_vinv: DMatrix<f64>,
    precision_chol: Cholesky,
    y: DMatrix<f64>,
    v_chol: Cholesky,
}

impl MemleanBetaSampler {
    pub fn new(prior: &PriorSpec, x: &DMatrix<f64>, v_chol: Cholesky, y: &DMatrix<f64>) -> Result<Self> {
        prior.validate()?;
        prior.check_shape(x.ncols(), y.ncols())?;
        check_shard(y, x, &v_chol, x.ncols(), y.ncols())?;
        let m0_chol = Cholesky::new(&prior.big_m0)?;
        let m0_inv = m0_chol.inverse();
        let xt_vinv = v_chol.solve(x).transpose();
        let precision = &m0_inv + &xt_vinv * x;
        let precision_chol = Cholesky::new(&precision)?;
        Ok(Self {
            prior_mean: &prior.big_m0 * &prior.m0,
            m0_chol,
            m0_inv,
            xt_vinv,
            precision_chol,
            y: y.clone(),
            v_chol,
        })
    }

    /// Deterministic map from standard normals: `z_rep` (n×q) perturbs the
    /// replicated outcome and `z_prior` (p×q) the prior draw. Zero inputs
    /// return M_n m_n.
    pub fn from_standard(
        &self,
        sigma_chol: &Cholesky,
        z_rep: &DMatrix<f64>,
        z_prior: &DMatrix<f64>,
    ) -> DMatrix<f64> {
        let lt = sigma_chol.l().transpose();
        let y_rep = &self.y + self.v_chol.mul_lower(z_rep) * &lt;
        let z = &self.prior_mean + self.m0_chol.mul_lower(z_prior) * &lt;
        let rhs = &self.m0_inv * z + &self.xt_vinv * y_rep;
        self.precision_chol.solve(&rhs)
    }

    pub fn sample<R: rand::Rng + ?Sized>(&self, sigma: &DMatrix<f64>, rng: &mut R) -> Result<DMatrix<f64>> {
        let sigma_chol = Cholesky::new(sigma)?;
        let (n, q) = self.y.shape();
        let z_rep = standard_normal_matrix(n, q, rng);
        let z_prior = standard_normal_matrix(self.m0_inv.nrows(), q, rng);
        Ok(self.from_standard(&sigma_chol, &z_rep, &z_prior))
    }
}

/// One β draw given Σ without forming the posterior covariance.
pub fn beta_sample_memlean<R: rand::Rng + ?Sized>(
    prior: &PriorSpec,
    x: &DMatrix<f64>,
    v_chol: &Cholesky,
    y: &DMatrix<f64>,
    sigma: &DMatrix<f64>,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    MemleanBetaSampler::new(prior, x, v_chol.clone(), y)?.sample(sigma, rng)
}

/// Posterior of the latent spatial model for one (α, φ), kept in factored
/// form. The (β, Σ) block is the MNIW of the marginal model with
/// `V = R_φ + τI`, `τ = α⁻¹ − 1`; Ω is conditionally matrix normal given β.
#[derive(Debug)]
pub struct LatentPosterior {
    spec: ModelSpec,
    data: Dataset,
    v_chol: Cholesky,
    ly: DMatrix<f64>,
    lx: DMatrix<f64>,
    beta_mean: DMatrix<f64>,
    beta_precision: DMatrix<f64>,
    beta_prec_chol: Cholesky,
    iw_scale: DMatrix<f64>,
    iw_dof: f64,
    omega_cov_chol: OnceLock<std::result::Result<Cholesky, String>>,
}

impl Clone for LatentPosterior {
    fn clone(&self) -> Self {
        Self {
            spec: self.spec,
            data: self.data.clone(),
            v_chol: self.v_chol.clone(),
            ly: self.ly.clone(),
            lx: self.lx.clone(),
            beta_mean: self.beta_mean.clone(),
            beta_precision: self.beta_precision.clone(),
            beta_prec_chol: self.beta_prec_chol.clone(),
            iw_scale: self.iw_scale.clone(),
            iw_dof: self.iw_dof,
            omega_cov_chol: OnceLock::new(),
        }
    }
}

pub fn latent_posterior(data: &Dataset, spec: &ModelSpec, prior: &PriorSpec) -> Result<LatentPosterior> {
    spec.validate()?;
    prior.validate()?;
    prior.check_shape(data.p(), data.q())?;
    if data.n() == 0 {
        return Err(Error::InvalidArgument("latent posterior needs at least one row".into()));
    }
    let v = nugget_corr(&data.locations, spec)?;
    let post = marginal_posterior(&data.y, &data.x, &v.chol, prior)?;
    let ly = v.chol.solve_lower(&data.y);
    let lx = v.chol.solve_lower(&data.x);
    let beta_prec_chol = Cholesky::new(&post.row_precision)?;
    Ok(LatentPosterior {
        spec: *spec,
        data: data.clone(),
        v_chol: v.chol,
        ly,
        lx,
        beta_mean: post.mean,
        beta_precision: post.row_precision,
        beta_prec_chol,
        iw_scale: post.iw_scale,
        iw_dof: post.iw_dof,
        omega_cov_chol: OnceLock::new(),
    })
}

impl LatentPosterior {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }
    pub fn data(&self) -> &Dataset {
        &self.data
    }
    pub fn beta_mean(&self) -> &DMatrix<f64> {
        &self.beta_mean
    }
    pub fn beta_precision(&self) -> &DMatrix<f64> {
        &self.beta_precision
    }
    pub fn iw_scale(&self) -> &DMatrix<f64> {
        &self.iw_scale
    }
    pub fn iw_dof(&self) -> f64 {
        self.iw_dof
    }
    fn tau(&self) -> f64 {
        self.spec.noise_ratio()
    }

    /// (β, Σ) marginal as an MNIW with d = p.
    pub fn beta_sigma_posterior(&self) -> MniwPosterior {
        MniwPosterior {
            mean: self.beta_mean.clone(),
            row_precision: self.beta_precision.clone(),
            iw_scale: self.iw_scale.clone(),
            iw_dof: self.iw_dof,
            beta_rows: self.beta_mean.nrows(),
        }
    }

    /// E[Ω | Y] = R V⁻¹ (Y − X μ_β) = r − τ V⁻¹ r with r = Y − X μ_β.
    pub fn omega_mean(&self) -> DMatrix<f64> {
        let r = &self.data.y - &self.data.x * &self.beta_mean;
        let vr = self.v_chol.solve(&r);
        r - vr * self.tau()
    }

    /// Factor of Cov(Ω | β, Σ, Y) row part: R − R V⁻¹ R = τ (I − τ V⁻¹).
    fn omega_cov_chol(&self) -> Result<&Cholesky> {
        let cell = self.omega_cov_chol.get_or_init(|| {
            let n = self.data.n();
            let tau = self.tau();
            let mut k = self.v_chol.inverse() * (-tau * tau);
            for i in 0..n {
                k[(i, i)] += tau;
            }
            symmetrize(&mut k);
            Cholesky::with_jitter(&k).map_err(|e| e.to_string())
        });
        cell.as_ref().map_err(|_| Error::NonSpdMatrix { minor: 0 })
    }

    fn draw_beta<R: rand::Rng + ?Sized>(&self, s_chol: &Cholesky, rng: &mut R) -> DMatrix<f64> {
        let z = standard_normal_matrix(self.beta_mean.nrows(), self.beta_mean.ncols(), rng);
        &self.beta_mean + self.beta_prec_chol.solve_upper(&z) * s_chol.l().transpose()
    }

    fn iw(&self) -> Result<InverseWishartParams> {
        InverseWishartParams::new(self.iw_scale.clone(), self.iw_dof)
    }

    /// One exact joint draw of (β, Σ) and optionally Ω at the data locations.
    pub fn sample_theta<R: rand::Rng + ?Sized>(&self, with_omega: bool, rng: &mut R) -> Result<ThetaDraw> {
        let (sigma, s_chol) = self.iw()?.sample_with_factor(rng);
        let beta = self.draw_beta(&s_chol, rng);
        let omega = if with_omega {
            let k_chol = self.omega_cov_chol()?;
            let r = &self.data.y - &self.data.x * &beta;
            let mean = &r - self.v_chol.solve(&r) * self.tau();
            let z = standard_normal_matrix(self.data.n(), self.data.q(), rng);
            Some(mean + k_chol.mul_lower(&z) * s_chol.l().transpose())
        } else {
            None
        };
        Ok(ThetaDraw { beta, sigma, omega })
    }

    fn cross_terms(&self, u: &LocationSet, x_u: &DMatrix<f64>) -> Result<CrossTerms> {
        if x_u.nrows() != u.len() || x_u.ncols() != self.data.p() {
            return Err(dim_err(format!(
                "prediction design is {}x{}, expected {}x{}",
                x_u.nrows(),
                x_u.ncols(),
                u.len(),
                self.data.p()
            )));
        }
        // G = L⁻¹ ρ(S, U)
        let g = self.v_chol.solve_lower(&exp_corr(&self.data.locations, u, &self.spec.kernel));
        let gt = g.transpose();
        let gy = &gt * &self.ly;
        let gx = &gt * &self.lx;
        let a_omega = -&gx;
        let a_y = x_u - &gx;
        Ok(CrossTerms { g, gy, a_omega, a_y })
    }

    /// Joint matrix-t predictive of [Ω_U; Y_U] (2n′ × q).
    pub fn predictive(&self, u: &LocationSet, x_u: &DMatrix<f64>) -> Result<PredictiveMatrixT> {
        let ct = self.cross_terms(u, x_u)?;
        let np = u.len();
        let k = self_corr(u, &self.spec.kernel) - ct.g.transpose() * &ct.g;
        let tau = self.tau();
        let mut a = DMatrix::<f64>::zeros(2 * np, self.data.p());
        a.rows_mut(0, np).copy_from(&ct.a_omega);
        a.rows_mut(np, np).copy_from(&ct.a_y);
        let mut loc = &a * &self.beta_mean;
        for blk in 0..2 {
            let mut rows = loc.rows_mut(blk * np, np);
            rows += &ct.gy;
        }
        // A P⁻¹ Aᵀ via B = L_P⁻¹ Aᵀ
        let b = self.beta_prec_chol.solve_lower(&a.transpose());
        let mut v = b.transpose() * b;
        for i in 0..np {
            for j in 0..np {
                let kij = k[(i, j)];
                v[(i, j)] += kij;
                v[(i, np + j)] += kij;
                v[(np + i, j)] += kij;
                v[(np + i, np + j)] += kij;
            }
            v[(np + i, np + i)] += tau;
        }
        symmetrize(&mut v);
        let params = MatrixTParams::new(self.iw_dof, loc, v, self.iw_scale.clone())?;
        Ok(PredictiveMatrixT { params, n_prime: np })
    }

    /// log p(Y_U,i | data) for each row separately (1×q matrix-t marginals of
    /// the Y block).
    pub fn row_log_densities(
        &self,
        u: &LocationSet,
        x_u: &DMatrix<f64>,
        y_u: &DMatrix<f64>,
    ) -> Result<Vec<f64>> {
        if y_u.nrows() != u.len() || y_u.ncols() != self.data.q() {
            return Err(dim_err("held-out outcome shape does not match locations"));
        }
        let ct = self.cross_terms(u, x_u)?;
        let q = self.data.q();
        let nu = self.iw_dof;
        let tau = self.tau();
        let psi_chol = Cholesky::new(&self.iw_scale)?;
        let constant = ln_multigamma(q, (nu + 1.0) / 2.0)
            - ln_multigamma(q, nu / 2.0)
            - 0.5 * q as f64 * std::f64::consts::PI.ln()
            - 0.5 * psi_chol.log_det();
        let mean = &ct.gy + &ct.a_y * &self.beta_mean;
        let b = self.beta_prec_chol.solve_lower(&ct.a_y.transpose());
        let resid = y_u - mean;
        let w = psi_chol.solve_lower(&resid.transpose());
        let out = (0..u.len())
            .map(|i| {
                let g2 = ct.g.column(i).norm_squared();
                let vi = b.column(i).norm_squared() + (1.0 - g2) + tau;
                let quad = w.column(i).norm_squared() / vi;
                constant - 0.5 * q as f64 * vi.ln() - 0.5 * (nu + 1.0) * quad.ln_1p()
            })
            .collect();
        Ok(out)
    }

    /// Precompute what the conditional-route predictive sampler needs.
    pub fn predictive_sampler(&self, u: &LocationSet, x_u: &DMatrix<f64>) -> Result<PredictiveSampler<'_>> {
        let ct = self.cross_terms(u, x_u)?;
        let mut k = self_corr(u, &self.spec.kernel) - ct.g.transpose() * &ct.g;
        symmetrize(&mut k);
        let k_chol = Cholesky::with_jitter(&k)?;
        Ok(PredictiveSampler {
            post: self,
            iw: self.iw()?,
            gy: ct.gy,
            gx: -ct.a_omega,
            x_u: x_u.clone(),
            k_chol,
        })
    }
}

struct CrossTerms {
    g: DMatrix<f64>,
    gy: DMatrix<f64>,
    a_omega: DMatrix<f64>,
    a_y: DMatrix<f64>,
}

/// Draws of (Ω_U, Y_U) by composition: Σ, then β, then Ω_U | β, then Y_U.
pub struct PredictiveSampler<'a> {
    post: &'a LatentPosterior,
    iw: InverseWishartParams,
    gy: DMatrix<f64>,
    gx: DMatrix<f64>,
    x_u: DMatrix<f64>,
    k_chol: Cholesky,
}

impl PredictiveSampler<'_> {
    pub fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> (DMatrix<f64>, DMatrix<f64>) {
        let (_, s_chol) = self.iw.sample_with_factor(rng);
        let beta = self.post.draw_beta(&s_chol, rng);
        let (np, q) = self.gy.shape();
        let lt = s_chol.l().transpose();
        let z1 = standard_normal_matrix(np, q, rng);
        let omega = &self.gy - &self.gx * &beta + self.k_chol.mul_lower(&z1) * &lt;
        let z2 = standard_normal_matrix(np, q, rng);
        let y = &self.x_u * &beta + &omega + (z2 * &lt) * self.post.tau().sqrt();
        (omega, y)
    }
}

/// Matrix-t predictive of Υ = [Ω_U; Y_U]; rows `0..n′` are Ω_U and rows
/// `n′..2n′` are Y_U.
#[derive(Clone, Debug)]
pub struct PredictiveMatrixT {
    pub params: MatrixTParams,
    pub n_prime: usize,
}

impl PredictiveMatrixT {
    pub fn omega_rows(&self) -> std::ops::Range<usize> {
        0..self.n_prime
    }
    pub fn y_rows(&self) -> std::ops::Range<usize> {
        self.n_prime..2 * self.n_prime
    }
    pub fn omega_block(&self) -> Result<MatrixTParams> {
        self.params.select_rows(&self.omega_rows().collect::<Vec<_>>())
    }
    pub fn y_block(&self) -> Result<MatrixTParams> {
        self.params.select_rows(&self.y_rows().collect::<Vec<_>>())
    }
}

pub fn predictive_params(
    post: &LatentPosterior,
    u: &LocationSet,
    x_u: &DMatrix<f64>,
) -> Result<PredictiveMatrixT> {
    post.predictive(u, x_u)
}

/// Dense reference posterior over γ = [β; Ω] (d = p + n), built from the
/// block precision with an explicit ρ_φ⁻¹.
pub fn latent_posterior_dense(data: &Dataset, spec: &ModelSpec, prior: &PriorSpec) -> Result<MniwPosterior> {
    spec.validate()?;
    prior.validate()?;
    prior.check_shape(data.p(), data.q())?;
    let (n, p) = (data.n(), data.p());
    let a = spec.alpha / (1.0 - spec.alpha);
    let r_chol = Cholesky::with_jitter(&self_corr(&data.locations, &spec.kernel))?;
    let m0_inv = Cholesky::new(&prior.big_m0)?.inverse();
    let (x, y) = (&data.x, &data.y);
    let mut prec = DMatrix::<f64>::zeros(p + n, p + n);
    prec.view_mut((0, 0), (p, p)).copy_from(&(x.transpose() * x * a + &m0_inv));
    prec.view_mut((0, p), (p, n)).copy_from(&(x.transpose() * a));
    prec.view_mut((p, 0), (n, p)).copy_from(&(x * a));
    let mut lower = r_chol.inverse();
    for i in 0..n {
        lower[(i, i)] += a;
    }
    prec.view_mut((p, p), (n, n)).copy_from(&lower);
    symmetrize(&mut prec);
    let mut rhs = DMatrix::<f64>::zeros(p + n, data.q());
    rhs.rows_mut(0, p).copy_from(&(x.transpose() * y * a + &prior.m0));
    rhs.rows_mut(p, n).copy_from(&(y * a));
    let mean = Cholesky::new(&prec)?.solve(&rhs);
    let mut psi = &prior.psi0 + y.transpose() * y * a + prior.m0.transpose() * &prior.big_m0 * &prior.m0
        - mean.transpose() * &prec * &mean;
    symmetrize(&mut psi);
    Ok(MniwPosterior {
        mean,
        row_precision: prec,
        iw_scale: psi,
        iw_dof: prior.nu0 + n as f64,
        beta_rows: p,
    })
}

/// Dense reference predictive: μ* = M μ_γ, V* = M V_γ Mᵀ + V_E with
/// M = [[0, M_U], [X_U, M_U]].
pub fn predictive_params_dense(
    data: &Dataset,
    post: &MniwPosterior,
    spec: &ModelSpec,
    u: &LocationSet,
    x_u: &DMatrix<f64>,
) -> Result<PredictiveMatrixT> {
    let (n, p, np) = (data.n(), data.p(), u.len());
    if post.d() != p + n || x_u.shape() != (np, p) {
        return Err(dim_err("dense predictive shapes do not agree"));
    }
    let r_chol = Cholesky::with_jitter(&self_corr(&data.locations, &spec.kernel))?;
    let c = exp_corr(u, &data.locations, &spec.kernel);
    let m_u = r_chol.solve(&c.transpose()).transpose();
    let v_omega = self_corr(u, &spec.kernel) - &m_u * c.transpose();
    let mut m = DMatrix::<f64>::zeros(2 * np, p + n);
    m.view_mut((0, p), (np, n)).copy_from(&m_u);
    m.view_mut((np, 0), (np, p)).copy_from(x_u);
    m.view_mut((np, p), (np, n)).copy_from(&m_u);
    let tau = spec.noise_ratio();
    let mut v_e = DMatrix::<f64>::zeros(2 * np, 2 * np);
    for blk_i in 0..2 {
        for blk_j in 0..2 {
            v_e.view_mut((blk_i * np, blk_j * np), (np, np)).copy_from(&v_omega);
        }
    }
    for i in 0..np {
        v_e[(np + i, np + i)] += tau;
    }
    let v_gamma = post.row_cov()?;
    let mut v = &m * v_gamma * m.transpose() + v_e;
    symmetrize(&mut v);
    let loc = &m * &post.mean;
    let params = MatrixTParams::new(post.iw_dof, loc, v, post.iw_scale.clone())?;
    Ok(PredictiveMatrixT { params, n_prime: np })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::rel_err;
    use crate::matrix_variate::mt_log_density;
    use crate::seed::rng_from_seed;
    use rand::Rng;

    fn toy(n: usize, p: usize, q: usize, seed: u64) -> Dataset {
        let mut rng = rng_from_seed(seed);
        let coords = DMatrix::from_fn(n, 2, |_, _| rng.random::<f64>());
        let mut x = standard_normal_matrix(n, p, &mut rng);
        x.column_mut(0).fill(1.0);
        let y = standard_normal_matrix(n, q, &mut rng) + &x * DMatrix::from_element(p, q, 0.7);
        Dataset::new(y, x, LocationSet::new(coords).unwrap()).unwrap()
    }

    #[test]
    fn empty_shard_is_identity() {
        let prior = PriorSpec::default_for(2, 2);
        let post = prior.as_posterior().unwrap();
        let out = sequential_update(
            &post,
            &DMatrix::zeros(0, 2),
            &DMatrix::zeros(0, 2),
            &Cholesky::new(&DMatrix::zeros(0, 0)).unwrap(),
        )
        .unwrap();
        assert_eq!(out.mean, post.mean);
        assert_eq!(out.iw_scale, post.iw_scale);
        assert_eq!(out.iw_dof, post.iw_dof);
    }

    #[test]
    fn scalar_normal_inverse_gamma() {
        // p = q = 1, V = I; closed forms by hand.
        let x = DMatrix::from_column_slice(4, 1, &[1.0, 2.0, -1.0, 0.5]);
        let y = DMatrix::from_column_slice(4, 1, &[2.1, 3.9, -2.2, 1.1]);
        let prior = PriorSpec {
            m0: DMatrix::from_element(1, 1, 0.3),
            big_m0: DMatrix::from_element(1, 1, 2.0),
            psi0: DMatrix::from_element(1, 1, 1.5),
            nu0: 3.0,
        };
        let post = marginal_posterior(&y, &x, &Cholesky::new(&DMatrix::identity(4, 4)).unwrap(), &prior).unwrap();
        let sxx: f64 = x.iter().map(|v| v * v).sum();
        let sxy: f64 = x.iter().zip(y.iter()).map(|(a, b)| a * b).sum();
        let syy: f64 = y.iter().map(|v| v * v).sum();
        let prec = 0.5 + sxx;
        let m = 0.3 + sxy;
        let mean = m / prec;
        let psi = 1.5 + 0.3 * 2.0 * 0.3 + syy - m * m / prec;
        assert!((post.mean[(0, 0)] - mean).abs() < 1e-12);
        assert!((post.row_precision[(0, 0)] - prec).abs() < 1e-12);
        assert!((post.iw_scale[(0, 0)] - psi).abs() < 1e-12);
        assert_eq!(post.iw_dof, 7.0);
    }

    #[test]
    fn natural_accumulator_matches_update() {
        let d = toy(40, 2, 2, 1);
        let prior = PriorSpec::default_for(2, 2);
        let v = Cholesky::new(&DMatrix::identity(40, 40)).unwrap();
        let a = marginal_posterior(&d.y, &d.x, &v, &prior).unwrap();
        let mut nat = NaturalPosterior::from_prior(&prior).unwrap();
        nat.absorb(&d.y, &d.x, &v).unwrap();
        let b = nat.to_mniw().unwrap();
        assert!(rel_err(&a.mean, &b.mean) < 1e-10);
        assert!(rel_err(&a.iw_scale, &b.iw_scale) < 1e-10);
    }

    #[test]
    fn latent_beta_block_matches_dense() {
        let d = toy(25, 2, 2, 4);
        let spec = ModelSpec::new(0.7, 3.0).unwrap();
        let prior = PriorSpec::default_for(2, 2);
        let fast = latent_posterior(&d, &spec, &prior).unwrap();
        let dense = latent_posterior_dense(&d, &spec, &prior).unwrap();
        assert!(rel_err(fast.beta_mean(), &dense.beta_mean()) < 1e-8);
        assert!(rel_err(fast.iw_scale(), &dense.iw_scale) < 1e-8);
        let omega_dense = dense.mean.rows(2, 25).into_owned();
        assert!(rel_err(&fast.omega_mean(), &omega_dense) < 1e-8);
        let beta_cov = dense.row_cov().unwrap().view((0, 0), (2, 2)).into_owned();
        let fast_cov = Cholesky::new(fast.beta_precision()).unwrap().inverse();
        assert!(rel_err(&fast_cov, &beta_cov) < 1e-8);
    }

    #[test]
    fn zero_design_keeps_prior_mean() {
        let mut d = toy(15, 2, 2, 2);
        d.x.fill(0.0);
        let mut prior = PriorSpec::default_for(2, 2);
        prior.m0 = DMatrix::from_row_slice(2, 2, &[0.1, -0.2, 0.3, 0.05]);
        let post = latent_posterior(&d, &ModelSpec::new(0.8, 4.0).unwrap(), &prior).unwrap();
        assert!(rel_err(post.beta_mean(), &(&prior.big_m0 * &prior.m0)) < 1e-12);
    }

    #[test]
    fn predictive_matches_dense() {
        let d = toy(20, 2, 2, 6);
        let spec = ModelSpec::new(0.8, 4.0).unwrap();
        let prior = PriorSpec::default_for(2, 2);
        let u = LocationSet::from_points(&[[0.3, 0.3], [0.8, 0.1], [0.5, 0.9]]).unwrap();
        let x_u = DMatrix::from_row_slice(3, 2, &[1.0, 0.2, 1.0, -0.4, 1.0, 1.1]);
        let fast = latent_posterior(&d, &spec, &prior).unwrap().predictive(&u, &x_u).unwrap();
        let dense_post = latent_posterior_dense(&d, &spec, &prior).unwrap();
        let dense = predictive_params_dense(&d, &dense_post, &spec, &u, &x_u).unwrap();
        assert!(rel_err(fast.params.location(), dense.params.location()) < 1e-7);
        assert!(rel_err(fast.params.row_scale(), dense.params.row_scale()) < 1e-7);
        let y = DMatrix::from_row_slice(3, 2, &[0.5, 0.2, -0.3, 1.0, 1.5, 0.1]);
        let a = mt_log_density(&y, &fast.y_block().unwrap()).unwrap();
        let b = mt_log_density(&y, &dense.y_block().unwrap()).unwrap();
        assert!((a - b).abs() < 1e-7);
    }

    #[test]
    fn row_densities_match_marginal_blocks() {
        let d = toy(30, 2, 2, 8);
        let spec = ModelSpec::new(0.75, 2.0).unwrap();
        let post = latent_posterior(&d, &spec, &PriorSpec::default_for(2, 2)).unwrap();
        let u = LocationSet::from_points(&[[0.1, 0.9], [0.6, 0.6]]).unwrap();
        let x_u = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 1.0, -1.2]);
        let y_u = DMatrix::from_row_slice(2, 2, &[1.0, 0.4, -0.7, 0.9]);
        let rows = post.row_log_densities(&u, &x_u, &y_u).unwrap();
        let pred = post.predictive(&u, &x_u).unwrap();
        for (i, r) in rows.iter().enumerate() {
            let block = pred.params.select_rows(&[2 + i]).unwrap();
            let want = mt_log_density(&y_u.rows(i, 1).into_owned(), &block).unwrap();
            assert!((r - want).abs() < 1e-10, "{r} vs {want}");
        }
    }

    #[test]
    fn far_field_prediction_is_regression() {
        let d = toy(20, 2, 2, 9);
        let spec = ModelSpec::new(0.8, 4.0).unwrap();
        let post = latent_posterior(&d, &spec, &PriorSpec::default_for(2, 2)).unwrap();
        let u = LocationSet::from_points(&[[50.0, 50.0]]).unwrap();
        let x_u = DMatrix::from_row_slice(1, 2, &[1.0, 0.5]);
        let pred = post.predictive(&u, &x_u).unwrap();
        let want = &x_u * post.beta_mean();
        let got = pred.params.location().rows(1, 1).into_owned();
        assert!((got - want).amax() < 1e-12);
        assert!(pred.params.location().rows(0, 1).amax() < 1e-12);
    }

    #[test]
    fn empty_prediction_request() {
        let d = toy(10, 2, 2, 3);
        let post = latent_posterior(&d, &ModelSpec::new(0.8, 4.0).unwrap(), &PriorSpec::default_for(2, 2)).unwrap();
        let pred = post.predictive(&LocationSet::empty(), &DMatrix::zeros(0, 2)).unwrap();
        assert_eq!(pred.n_prime, 0);
        assert_eq!(pred.params.nrows(), 0);
    }

    #[test]
    fn memlean_zero_noise_returns_mean() {
        let d = toy(30, 2, 2, 10);
        let prior = PriorSpec::default_for(2, 2);
        let v = Cholesky::new(&DMatrix::identity(30, 30)).unwrap();
        let s = MemleanBetaSampler::new(&prior, &d.x, v.clone(), &d.y).unwrap();
        let sigma = Cholesky::new(&DMatrix::identity(2, 2)).unwrap();
        let b = s.from_standard(&sigma, &DMatrix::zeros(30, 2), &DMatrix::zeros(2, 2));
        let post = marginal_posterior(&d.y, &d.x, &v, &prior).unwrap();
        assert!(rel_err(&b, &post.mean) < 1e-12);
    }

    #[test]
    fn omega_draws_centre_on_mean() {
        let d = toy(12, 2, 2, 11);
        let post = latent_posterior(&d, &ModelSpec::new(0.8, 4.0).unwrap(), &PriorSpec::default_for(2, 2)).unwrap();
        let mut rng = rng_from_seed(1);
        let r = 4000;
        let mut acc = DMatrix::<f64>::zeros(12, 2);
        for _ in 0..r {
            acc += post.sample_theta(true, &mut rng).unwrap().omega.unwrap();
        }
        acc /= r as f64;
        assert!((acc - post.omega_mean()).amax() < 0.1);
    }
}
