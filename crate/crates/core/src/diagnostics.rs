//! Exploratory variography feeding the model grid, and the Monte Carlo
//! upper bound on the KL divergence of the stacked predictive from a
//! reference predictive.

use nalgebra::DMatrix;
use rand::seq::index::sample as sample_indices;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conjugate_regression::{Dataset, LatentPosterior};
use crate::dbps::StackedModel;
use crate::error::{Error, Result};
use crate::linalg::{log_sum_exp, Cholesky};
use crate::matrix_variate::{mt_log_density, mt_sample, MatrixTParams};
use crate::seed::{derive_seed, rng_from_seed, stream};
use crate::spatial_kernel::{LocationSet, ModelGrid, ModelSpec, RANGE_CORRELATION};

#[derive(Clone, Copy, Debug)]
pub struct VariogramOptions {
    pub n_bins: usize,
    pub max_dist_frac: f64,
    /// Rows beyond this are subsampled (pair counting is quadratic).
    pub subsample_cap: usize,
    pub seed: u64,
}

impl Default for VariogramOptions {
    fn default() -> Self {
        Self {
            n_bins: 15,
            max_dist_frac: 0.5,
            subsample_cap: 50_000,
            seed: 0,
        }
    }
}

/// Binned semivariance; only bins that received pairs are kept.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalVariogram {
    pub bin_centers: Vec<f64>,
    pub gamma: Vec<f64>,
    pub counts: Vec<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariogramFit {
    pub nugget: f64,
    pub partial_sill: f64,
    pub practical_range: f64,
    pub alpha: f64,
    pub phi: f64,
}

/// Fit of a cross-variogram; the partial sill carries the sign of the
/// spatial cross-covariance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossVariogramFit {
    pub nugget: f64,
    pub partial_sill: f64,
    pub practical_range: f64,
}

pub const ALPHA_MAX: f64 = 0.99;
pub const ALPHA_MIN: f64 = 0.01;
const MIN_ROWS: usize = 30;
const MIN_BINS: usize = 4;

/// Residuals of the ordinary least-squares fit of every outcome on X.
pub fn ols_residuals(data: &Dataset) -> Result<DMatrix<f64>> {
    data.check_rank()?;
    let xtx = data.x.transpose() * &data.x;
    let coef = Cholesky::new(&xtx)?.solve(&(data.x.transpose() * &data.y));
    Ok(&data.y - &data.x * coef)
}

fn subsample_rows(n: usize, opts: &VariogramOptions) -> Option<Vec<usize>> {
    (n > opts.subsample_cap).then(|| {
        let mut rng = rng_from_seed(derive_seed(opts.seed, stream::SUBSAMPLE, 0));
        let mut idx = sample_indices(&mut rng, n, opts.subsample_cap).into_vec();
        idx.sort_unstable();
        idx
    })
}

const BLOCK: usize = 64;

fn binned(locs: &LocationSet, ra: &[f64], rb: &[f64], opts: &VariogramOptions) -> Result<EmpiricalVariogram> {
    let n = locs.len();
    if opts.n_bins == 0 || !(opts.max_dist_frac > 0.0) {
        return Err(Error::InvalidArgument("variogram needs n_bins >= 1 and max_dist_frac > 0".into()));
    }
    let c = locs.coords();
    let dist = |i: usize, j: usize| (c[(i, 0)] - c[(j, 0)]).hypot(c[(i, 1)] - c[(j, 1)]);
    let blocks: Vec<usize> = (0..n).step_by(BLOCK).collect();
    let max_d = blocks
        .par_iter()
        .map(|&b| {
            let mut m = 0.0_f64;
            for i in b..(b + BLOCK).min(n) {
                for j in (i + 1)..n {
                    m = m.max(dist(i, j));
                }
            }
            m
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold(0.0, f64::max);
    if max_d <= 0.0 {
        return Err(Error::TooFewPairs { bin: 0 });
    }
    let cutoff = opts.max_dist_frac * max_d;
    let width = cutoff / opts.n_bins as f64;
    let nb = opts.n_bins;
    // Per-block partial sums, reduced in block order for reproducibility.
    let partials: Vec<(Vec<f64>, Vec<f64>, Vec<u64>)> = blocks
        .par_iter()
        .map(|&b| {
            let mut sd = vec![0.0; nb];
            let mut sg = vec![0.0; nb];
            let mut cnt = vec![0u64; nb];
            for i in b..(b + BLOCK).min(n) {
                for j in (i + 1)..n {
                    let d = dist(i, j);
                    if d <= 0.0 || d > cutoff {
                        continue;
                    }
                    let bin = ((d / width) as usize).min(nb - 1);
                    sd[bin] += d;
                    sg[bin] += 0.5 * (ra[i] - ra[j]) * (rb[i] - rb[j]);
                    cnt[bin] += 1;
                }
            }
            (sd, sg, cnt)
        })
        .collect();
    let mut sd = vec![0.0; nb];
    let mut sg = vec![0.0; nb];
    let mut cnt = vec![0u64; nb];
    for (a, g, k) in partials {
        for b in 0..nb {
            sd[b] += a[b];
            sg[b] += g[b];
            cnt[b] += k[b];
        }
    }
    let mut v = EmpiricalVariogram {
        bin_centers: Vec::new(),
        gamma: Vec::new(),
        counts: Vec::new(),
    };
    for b in 0..nb {
        if cnt[b] == 0 {
            log::debug!("variogram bin {b} is empty and was dropped");
            continue;
        }
        v.bin_centers.push(sd[b] / cnt[b] as f64);
        v.gamma.push(sg[b] / cnt[b] as f64);
        v.counts.push(cnt[b]);
    }
    if v.counts.is_empty() {
        return Err(Error::TooFewPairs { bin: 0 });
    }
    Ok(v)
}

fn prepare(data: &Dataset, cols: &[usize], opts: &VariogramOptions) -> Result<(LocationSet, Vec<Vec<f64>>)> {
    if data.n() < MIN_ROWS {
        return Err(Error::InvalidArgument(format!(
            "variogram needs at least {MIN_ROWS} rows, got {}",
            data.n()
        )));
    }
    if let Some(&c) = cols.iter().find(|&&c| c >= data.q()) {
        return Err(Error::InvalidArgument(format!("outcome column {c} out of range")));
    }
    let resid = ols_residuals(data)?;
    let rows = subsample_rows(data.n(), opts);
    let locs = match &rows {
        Some(r) => data.locations.select(r),
        None => data.locations.clone(),
    };
    let series = cols
        .iter()
        .map(|&c| match &rows {
            Some(r) => r.iter().map(|&i| resid[(i, c)]).collect(),
            None => resid.column(c).iter().cloned().collect(),
        })
        .collect();
    Ok((locs, series))
}

/// Method-of-moments semivariogram of the OLS residuals of one outcome.
pub fn empirical_variogram(data: &Dataset, col: usize, opts: &VariogramOptions) -> Result<EmpiricalVariogram> {
    let (locs, r) = prepare(data, &[col], opts)?;
    binned(&locs, &r[0], &r[0], opts)
}

/// Cross-semivariogram ½ E[(r_a(s)−r_a(s′))(r_b(s)−r_b(s′))]; may be negative.
pub fn cross_variogram(
    data: &Dataset,
    col_a: usize,
    col_b: usize,
    opts: &VariogramOptions,
) -> Result<EmpiricalVariogram> {
    let (locs, r) = prepare(data, &[col_a, col_b], opts)?;
    binned(&locs, &r[0], &r[1], opts)
}

fn exp_basis(h: f64, rc: f64) -> f64 {
    1.0 - (-h / rc).exp()
}

/// Weighted least squares for (c0, c1) in c0 + c1 f_b with weights w_b.
fn wls2(f: &[f64], y: &[f64], w: &[f64]) -> Option<(f64, f64)> {
    let (mut s00, mut s01, mut s11, mut t0, mut t1) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for b in 0..f.len() {
        s00 += w[b];
        s01 += w[b] * f[b];
        s11 += w[b] * f[b] * f[b];
        t0 += w[b] * y[b];
        t1 += w[b] * f[b] * y[b];
    }
    let det = s00 * s11 - s01 * s01;
    if !(det.abs() > 1e-300) {
        return None;
    }
    Some(((s11 * t0 - s01 * t1) / det, (s00 * t1 - s01 * t0) / det))
}

/// Same with c0 ≥ 0 and c1 ≥ 0 (active-set on the two bounds).
fn nnwls2(f: &[f64], y: &[f64], w: &[f64]) -> (f64, f64) {
    if let Some((c0, c1)) = wls2(f, y, w) {
        if c0 >= 0.0 && c1 >= 0.0 {
            return (c0, c1);
        }
    }
    let sse = |c0: f64, c1: f64| -> f64 { (0..f.len()).map(|b| w[b] * (y[b] - c0 - c1 * f[b]).powi(2)).sum() };
    // c0 = 0
    let num: f64 = (0..f.len()).map(|b| w[b] * f[b] * y[b]).sum();
    let den: f64 = (0..f.len()).map(|b| w[b] * f[b] * f[b]).sum();
    let c1_only = if den > 0.0 { (num / den).max(0.0) } else { 0.0 };
    // c1 = 0
    let wsum: f64 = w.iter().sum();
    let c0_only = ((0..f.len()).map(|b| w[b] * y[b]).sum::<f64>() / wsum).max(0.0);
    if sse(0.0, c1_only) <= sse(c0_only, 0.0) {
        (0.0, c1_only)
    } else {
        (c0_only, 0.0)
    }
}

struct Profile {
    c0: f64,
    c1: f64,
    loss: f64,
}

/// Cressie-weighted fit for a fixed correlation length, by iteratively
/// reweighted least squares.
fn profile(v: &EmpiricalVariogram, rc: f64, nonneg: bool) -> Profile {
    let f: Vec<f64> = v.bin_centers.iter().map(|&h| exp_basis(h, rc)).collect();
    let counts: Vec<f64> = v.counts.iter().map(|&c| c as f64).collect();
    let floor = v.gamma.iter().map(|g| g.abs()).fold(0.0, f64::max) * 1e-8 + f64::MIN_POSITIVE;
    let solve = |w: &[f64]| {
        if nonneg {
            nnwls2(&f, &v.gamma, w)
        } else {
            wls2(&f, &v.gamma, w).unwrap_or((0.0, 0.0))
        }
    };
    if !nonneg {
        // Signed curves: count weights only.
        let (c0, c1) = solve(&counts);
        let loss = (0..f.len()).map(|b| counts[b] * (v.gamma[b] - c0 - c1 * f[b]).powi(2)).sum();
        return Profile { c0, c1, loss };
    }
    let mut w: Vec<f64> = (0..f.len()).map(|b| counts[b] / v.gamma[b].abs().max(floor).powi(2)).collect();
    let (mut c0, mut c1) = solve(&w);
    for _ in 0..50 {
        w = (0..f.len())
            .map(|b| counts[b] / (c0 + c1 * f[b]).max(floor).powi(2))
            .collect();
        let (n0, n1) = solve(&w);
        let done = (n0 - c0).abs() + (n1 - c1).abs() <= 1e-14 * (n0.abs() + n1.abs()).max(f64::MIN_POSITIVE);
        c0 = n0;
        c1 = n1;
        if done {
            break;
        }
    }
    let loss = (0..f.len())
        .map(|b| {
            let m = (c0 + c1 * f[b]).max(floor);
            counts[b] * ((v.gamma[b] - m) / m).powi(2)
        })
        .sum();
    Profile { c0, c1, loss }
}

/// Minimize the profiled loss over log correlation length: coarse grid,
/// then golden-section refinement around the best grid point.
fn fit_range(v: &EmpiricalVariogram, nonneg: bool) -> Result<(f64, Profile)> {
    if v.counts.len() < MIN_BINS {
        return Err(Error::FitDiverged(format!(
            "need at least {MIN_BINS} non-empty bins, got {}",
            v.counts.len()
        )));
    }
    let hmin = v.bin_centers.iter().cloned().fold(f64::INFINITY, f64::min);
    let hmax = v.bin_centers.iter().cloned().fold(0.0, f64::max);
    let (lo, hi) = ((hmin / 20.0).ln(), (hmax * 20.0).ln());
    let steps = 80;
    let grid: Vec<f64> = (0..=steps).map(|i| lo + (hi - lo) * i as f64 / steps as f64).collect();
    let losses: Vec<f64> = grid.iter().map(|&t| profile(v, t.exp(), nonneg).loss).collect();
    let best = (0..grid.len())
        .min_by(|&a, &b| losses[a].total_cmp(&losses[b]))
        .ok_or_else(|| Error::FitDiverged("empty search grid".into()))?;
    let (mut a, mut b) = (grid[best.saturating_sub(1)], grid[(best + 1).min(steps)]);
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = b - g * (b - a);
    let mut x2 = a + g * (b - a);
    let mut f1 = profile(v, x1.exp(), nonneg).loss;
    let mut f2 = profile(v, x2.exp(), nonneg).loss;
    for _ in 0..200 {
        if (b - a).abs() < 1e-12 {
            break;
        }
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - g * (b - a);
            f1 = profile(v, x1.exp(), nonneg).loss;
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + g * (b - a);
            f2 = profile(v, x2.exp(), nonneg).loss;
        }
    }
    let t = 0.5 * (a + b);
    let rc = t.exp();
    let p = profile(v, rc, nonneg);
    if !p.loss.is_finite() || !rc.is_finite() {
        return Err(Error::FitDiverged("non-finite loss".into()));
    }
    Ok((rc, p))
}

/// Exponential variogram fit γ(h) = τ² + σ²(1 − exp(−h/r)) by weighted least
/// squares with Cressie weights N_b / γ_model(h_b)².
pub fn wls_variogram_fit(v: &EmpiricalVariogram) -> Result<VariogramFit> {
    let (rc, p) = fit_range(v, true)?;
    let (nugget, partial_sill) = (p.c0, p.c1);
    if !(partial_sill > 0.0) && !(nugget > 0.0) {
        return Err(Error::FitDiverged("fitted sill is zero".into()));
    }
    let mut alpha = partial_sill / (nugget + partial_sill);
    if alpha > ALPHA_MAX {
        log::warn!("fitted spatial proportion {alpha:.4} clipped to {ALPHA_MAX}");
        alpha = ALPHA_MAX;
    } else if alpha < ALPHA_MIN {
        log::warn!("fitted spatial proportion {alpha:.4} raised to {ALPHA_MIN}");
        alpha = ALPHA_MIN;
    }
    let practical_range = -RANGE_CORRELATION.ln() * rc;
    Ok(VariogramFit {
        nugget,
        partial_sill,
        practical_range,
        alpha,
        phi: -RANGE_CORRELATION.ln() / practical_range,
    })
}

/// Signed fit of a cross-variogram, weighted by pair counts.
pub fn fit_cross_variogram(v: &EmpiricalVariogram) -> Result<CrossVariogramFit> {
    let (rc, p) = fit_range(v, false)?;
    Ok(CrossVariogramFit {
        nugget: p.c0,
        partial_sill: p.c1,
        practical_range: -RANGE_CORRELATION.ln() * rc,
    })
}

fn spread(values: &[f64], count: usize) -> Vec<f64> {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = if count <= 1 || hi - lo <= 1e-12 * hi.abs().max(1.0) {
        vec![if count <= 1 { 0.5 * (lo + hi) } else { lo }]
    } else {
        (0..count)
            .map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64)
            .collect()
    };
    out.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * b.abs().max(1.0));
    out
}

/// Cartesian grid (α-major) of `alpha_count` values spanning the fitted α
/// range and `phi_count` values spanning the fitted φ range.
pub fn auto_grid(fits: &[VariogramFit], alpha_count: usize, phi_count: usize) -> Result<ModelGrid> {
    if fits.is_empty() {
        return Err(Error::InvalidArgument("auto grid needs at least one variogram fit".into()));
    }
    let alphas = spread(&fits.iter().map(|f| f.alpha).collect::<Vec<_>>(), alpha_count);
    let phis = spread(&fits.iter().map(|f| f.phi).collect::<Vec<_>>(), phi_count);
    crate::spatial_kernel::grid_product(&alphas, &phis)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlBound {
    pub estimate: f64,
    pub std_error: f64,
    pub l_mc: usize,
    pub seed: u64,
}

/// Monte Carlo estimate of
/// log Σ_k ŵ_k Σ_j ẑ_kj E_{y ~ p̂_kj}[ Σ_j′ ẑ_kj′ p̂_kj′(y) / p_t(y) ],
/// where every density is the joint matrix-t predictive of Y at the
/// evaluation locations and `truth` supplies p_t.
pub fn kl_upper_bound(
    model: &StackedModel,
    truth: &LatentPosterior,
    eval_locations: &LocationSet,
    eval_x: &nalgebra::DMatrix<f64>,
    l_mc: usize,
    seed: u64,
) -> Result<KlBound> {
    if l_mc < 2 {
        return Err(Error::InvalidArgument("KL bound needs at least 2 Monte Carlo draws".into()));
    }
    if eval_locations.is_empty() {
        return Err(Error::InvalidArgument("KL bound needs evaluation locations".into()));
    }
    let truth_t = truth.predictive(eval_locations, eval_x)?.y_block()?;
    // Visit subsets in id order so that reordering results cannot change
    // the floating-point sums.
    let mut order: Vec<usize> = (0..model.results.len()).collect();
    order.sort_by_key(|&k| model.results[k].subset_id);
    // (log ŵ_k ẑ_kj, log e_kj, relative variance of the ratio)
    let mut terms: Vec<(f64, f64, f64)> = Vec::new();
    for &k in &order {
        let res = &model.results[k];
        let wk = model.w_hat[k];
        if wk <= 0.0 {
            continue;
        }
        let preds: Vec<Option<MatrixTParams>> = res
            .posteriors
            .iter()
            .zip(res.z_hat.as_slice())
            .map(|(post, &z)| {
                if z > 0.0 {
                    post.predictive(eval_locations, eval_x)?.y_block().map(Some)
                } else {
                    Ok(None)
                }
            })
            .collect::<Result<_>>()?;
        let log_z: Vec<f64> = res.z_hat.as_slice().iter().map(|z| z.ln()).collect();
        let kseed = derive_seed(seed, stream::KL, res.subset_id as u64);
        let per_model: Vec<(f64, f64, f64)> = preds
            .par_iter()
            .enumerate()
            .filter_map(|(j, t)| t.as_ref().map(|t| (j, t)))
            .map(|(j, t)| -> Result<(f64, f64, f64)> {
                let mut rng = rng_from_seed(derive_seed(kseed, stream::KL, j as u64));
                let mut log_r = Vec::with_capacity(l_mc);
                for _ in 0..l_mc {
                    let y = mt_sample(t, &mut rng);
                    let mut mix = Vec::with_capacity(preds.len());
                    for (jj, tj) in preds.iter().enumerate() {
                        if let Some(tj) = tj {
                            mix.push(log_z[jj] + mt_log_density(&y, tj)?);
                        }
                    }
                    log_r.push(log_sum_exp(mix) - mt_log_density(&y, &truth_t)?);
                }
                let log_e = log_sum_exp(log_r.iter().cloned()) - (l_mc as f64).ln();
                let rel: Vec<f64> = log_r.iter().map(|lr| (lr - log_e).exp()).collect();
                let var = rel.iter().map(|v| (v - 1.0).powi(2)).sum::<f64>() / (l_mc - 1) as f64;
                Ok((wk.ln() + log_z[j], log_e, var))
            })
            .collect::<Result<_>>()?;
        terms.extend(per_model);
    }
    let log_a = log_sum_exp(terms.iter().map(|(lc, le, _)| lc + le).collect::<Vec<_>>());
    let var: f64 = terms
        .iter()
        .map(|(lc, le, rv)| (lc + le - log_a).exp().powi(2) * rv / l_mc as f64)
        .sum();
    Ok(KlBound {
        estimate: log_a,
        std_error: var.sqrt(),
        l_mc,
        seed,
    })
}

/// Grid models whose (α, φ) equal `spec` to rounding.
pub fn grid_contains(grid: &ModelGrid, spec: &ModelSpec) -> bool {
    grid.iter()
        .any(|m| (m.alpha - spec.alpha).abs() < 1e-12 && (m.phi() - spec.phi()).abs() < 1e-12)
}
