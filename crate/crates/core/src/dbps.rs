//! The two-stage pipeline: random partition, within-subset stacking over the
//! model grid, between-subset stacking, and sampling from the resulting
//! mixture of mixtures.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conjugate_regression::{latent_posterior, Dataset, LatentPosterior, PriorSpec, ThetaDraw};
use crate::error::{dim_err, Error, Result};
use crate::seed::{derive_seed, rng_from_seed, stream};
use crate::spatial_kernel::{LocationSet, ModelGrid};
use crate::stacking::{
    kfold_assign, mixture_columns, softmax_elpd, solve_simplex_logscore, FoldAssignment, LogPredDensityTable,
    RowIndex, SimplexWeights, SolverOptions,
};

pub const DEFAULT_SUBSET_SIZE: usize = 500;
pub const DEFAULT_FOLDS: usize = 10;
pub const DEFAULT_DRAWS: usize = 250;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WeightMethod {
    #[default]
    Bps,
    PseudoBma,
}

/// How the between-subset table is built.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BetweenTable {
    /// Every subset's mixture weights applied to the stacked cross-validation
    /// table of all subsets.
    #[default]
    Pooled,
    /// Experimental: rows of subset k′ ≠ k are scored by subset k's
    /// full-subset posteriors, so every column is evaluated on a common set.
    CommonSet,
}

#[derive(Clone, Debug)]
pub struct DbpsConfig {
    /// Number of subsets; `None` means ceil(n / DEFAULT_SUBSET_SIZE).
    pub subsets: Option<usize>,
    pub folds: usize,
    pub weight_method: WeightMethod,
    pub between_table: BetweenTable,
    pub solver: SolverOptions,
    pub seed: u64,
}

impl DbpsConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            subsets: None,
            folds: DEFAULT_FOLDS,
            weight_method: WeightMethod::Bps,
            between_table: BetweenTable::Pooled,
            solver: SolverOptions::default(),
            seed,
        }
    }
}

pub fn default_subset_count(n: usize, target_size: usize) -> usize {
    n.div_ceil(target_size.max(1)).max(1)
}

/// Row indices of each subset: a seeded shuffle cut into near-equal chunks.
/// With one subset the original order is kept.
pub fn partition_indices(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!("cannot split {n} rows into {k} subsets")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    if k == 1 {
        return Ok(vec![perm]);
    }
    perm.shuffle(&mut rng_from_seed(derive_seed(seed, stream::PARTITION, 0)));
    let (base, extra) = (n / k, n % k);
    let mut out = Vec::with_capacity(k);
    let mut at = 0;
    for i in 0..k {
        let len = base + usize::from(i < extra);
        out.push(perm[at..at + len].to_vec());
        at += len;
    }
    Ok(out)
}

pub fn partition(data: &Dataset, k: usize, folds: usize, seed: u64) -> Result<Vec<Dataset>> {
    let required = (data.p() + 1).max(folds);
    let parts = partition_indices(data.n(), k, seed)?;
    if let Some((i, part)) = parts.iter().enumerate().find(|(_, p)| p.len() < required) {
        return Err(Error::ShardTooSmall {
            subset: i,
            size: part.len(),
            required,
        });
    }
    if parts.len() == 1 {
        return Ok(vec![data.clone()]);
    }
    Ok(parts.iter().map(|rows| data.select(rows)).collect())
}

/// Everything produced by the within-subset stage for one subset.
#[derive(Clone, Debug)]
pub struct SubsetResult {
    pub subset_id: usize,
    pub seed: u64,
    pub z_hat: SimplexWeights,
    pub log_pd_block: LogPredDensityTable,
    pub folds: FoldAssignment,
    /// One full-subset posterior per grid model.
    pub posteriors: Vec<LatentPosterior>,
}

impl SubsetResult {
    pub fn data(&self) -> &Dataset {
        self.posteriors[0].data()
    }
    pub fn n(&self) -> usize {
        self.data().n()
    }
}

/// Cross-validated log predictive densities of `data` under each grid model.
pub fn cv_log_densities(
    data: &Dataset,
    grid: &ModelGrid,
    prior: &PriorSpec,
    folds: &FoldAssignment,
    subset_id: usize,
) -> Result<LogPredDensityTable> {
    let n = data.n();
    let fold_rows: Vec<(Vec<usize>, Vec<usize>)> =
        (0..folds.folds).map(|l| (folds.members(l), folds.complement(l))).collect();
    let columns: Vec<Vec<f64>> = grid
        .par_iter()
        .map(|spec| -> Result<Vec<f64>> {
            let mut col = vec![0.0; n];
            for (test, train) in &fold_rows {
                let held = data.select(test);
                let post = latent_posterior(&data.select(train), spec, prior)?;
                let lpd = post.row_log_densities(&held.locations, &held.x, &held.y)?;
                for (i, v) in test.iter().zip(lpd) {
                    col[*i] = v;
                }
            }
            Ok(col)
        })
        .collect::<Result<_>>()?;
    let values = DMatrix::from_fn(n, grid.len(), |i, j| columns[j][i]);
    let row_index = (0..n)
        .map(|row| RowIndex {
            subset: subset_id,
            row,
            fold: folds.fold_of[row],
        })
        .collect();
    LogPredDensityTable::new(values, row_index, (0..grid.len()).collect())
}

pub fn fit_subset(
    data: &Dataset,
    grid: &ModelGrid,
    prior: &PriorSpec,
    folds: usize,
    seed: u64,
    subset_id: usize,
    solver: SolverOptions,
) -> Result<SubsetResult> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("model grid is empty".into()));
    }
    let assignment = kfold_assign(data.n(), folds, derive_seed(seed, stream::FOLDS, 0))?;
    let log_pd_block = cv_log_densities(data, grid, prior, &assignment, subset_id)?;
    let z_hat = solve_simplex_logscore(&log_pd_block, solver).map_err(|e| with_subset(e, subset_id))?;
    let posteriors = grid
        .par_iter()
        .map(|spec| latent_posterior(data, spec, prior))
        .collect::<Result<Vec<_>>>()?;
    Ok(SubsetResult {
        subset_id,
        seed,
        z_hat,
        log_pd_block,
        folds: assignment,
        posteriors,
    })
}

fn with_subset(e: Error, subset_id: usize) -> Error {
    match e {
        Error::ConvergenceFailure { iterations, best, .. } => Error::ConvergenceFailure {
            iterations,
            best,
            subset: Some(subset_id),
        },
        other => other,
    }
}

/// Between-subset weights from the stored tables and ẑ only.
pub fn stack_between(
    blocks: &[&LogPredDensityTable],
    z_list: &[SimplexWeights],
    method: WeightMethod,
    solver: SolverOptions,
) -> Result<SimplexWeights> {
    if blocks.len() != z_list.len() || blocks.is_empty() {
        return Err(dim_err(format!("{} tables for {} weight vectors", blocks.len(), z_list.len())));
    }
    if blocks.len() == 1 {
        return Ok(SimplexWeights::one_hot(1, 0));
    }
    let stacked = LogPredDensityTable::vstack(blocks)?;
    let epd = mixture_columns(&stacked, z_list)?;
    weights_from_columns(&epd, method, solver)
}

fn weights_from_columns(epd: &LogPredDensityTable, method: WeightMethod, solver: SolverOptions) -> Result<SimplexWeights> {
    match method {
        WeightMethod::Bps => solve_simplex_logscore(epd, solver),
        WeightMethod::PseudoBma => {
            let elpd: Vec<f64> = (0..epd.ncols()).map(|k| epd.values.column(k).sum()).collect();
            softmax_elpd(&elpd)
        }
    }
}

/// Experimental between-subset stage on a common evaluation set: subset k's
/// column uses its own cross-validated densities on its rows and its
/// full-subset posteriors on every other subset's rows.
pub fn stack_between_common(
    results: &[SubsetResult],
    method: WeightMethod,
    solver: SolverOptions,
) -> Result<SimplexWeights> {
    let k_count = results.len();
    if k_count == 1 {
        return Ok(SimplexWeights::one_hot(1, 0));
    }
    let offsets: Vec<usize> = results
        .iter()
        .scan(0, |acc, r| {
            let at = *acc;
            *acc += r.n();
            Some(at)
        })
        .collect();
    let n: usize = results.iter().map(|r| r.n()).sum();
    let columns: Vec<Vec<f64>> = results
        .par_iter()
        .map(|rk| -> Result<Vec<f64>> {
            let mut col = vec![0.0; n];
            for (other, &off) in results.iter().zip(&offsets) {
                let j_count = rk.posteriors.len();
                let table = if other.subset_id == rk.subset_id {
                    rk.log_pd_block.clone()
                } else {
                    let d = other.data();
                    let mut vals = DMatrix::<f64>::zeros(d.n(), j_count);
                    for (j, post) in rk.posteriors.iter().enumerate() {
                        let lpd = post.row_log_densities(&d.locations, &d.x, &d.y)?;
                        vals.column_mut(j).copy_from_slice(&lpd);
                    }
                    LogPredDensityTable::new(vals, other.log_pd_block.row_index.clone(), (0..j_count).collect())?
                };
                let mix = mixture_columns(&table, std::slice::from_ref(&rk.z_hat))?;
                col[off..off + other.n()].copy_from_slice(mix.values.column(0).as_slice());
            }
            Ok(col)
        })
        .collect::<Result<_>>()?;
    let values = DMatrix::from_fn(n, k_count, |i, k| columns[k][i]);
    let row_index = results.iter().flat_map(|r| r.log_pd_block.row_index.clone()).collect();
    let epd = LogPredDensityTable::new(values, row_index, (0..k_count).collect())?;
    weights_from_columns(&epd, method, solver)
}

/// The fitted two-stage model.
#[derive(Clone, Debug)]
pub struct StackedModel {
    pub grid: ModelGrid,
    pub prior: PriorSpec,
    pub results: Vec<SubsetResult>,
    pub w_hat: SimplexWeights,
    pub weight_method: WeightMethod,
}

impl StackedModel {
    /// (k, j, ŵ_k ẑ_kj) for every component with positive weight.
    pub fn mixture_weights(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::new();
        for (k, r) in self.results.iter().enumerate() {
            for (j, z) in r.z_hat.as_slice().iter().enumerate() {
                let w = self.w_hat[k] * z;
                if w > 0.0 {
                    out.push((k, j, w));
                }
            }
        }
        out
    }

    fn draw_component(&self, seed: u64, draw: usize) -> (usize, usize, crate::seed::Rng) {
        let mut rng = rng_from_seed(derive_seed(seed, stream::DRAWS, draw as u64));
        let k = self.w_hat.sample_index(&mut rng);
        let j = self.results[k].z_hat.sample_index(&mut rng);
        (k, j, rng)
    }
}

/// Partition, fit every subset, and stack between subsets.
pub fn fit_dbps(data: &Dataset, grid: &ModelGrid, prior: &PriorSpec, cfg: &DbpsConfig) -> Result<StackedModel> {
    prior.validate()?;
    for spec in grid {
        spec.validate()?;
    }
    let k = cfg
        .subsets
        .unwrap_or_else(|| default_subset_count(data.n(), DEFAULT_SUBSET_SIZE));
    let parts = partition(data, k, cfg.folds, cfg.seed)?;
    let results = fit_subsets(&parts, grid, prior, cfg)?;
    let w_hat = combine(&results, cfg)?;
    Ok(StackedModel {
        grid: grid.clone(),
        prior: prior.clone(),
        results,
        w_hat,
        weight_method: cfg.weight_method,
    })
}

pub fn fit_subsets(parts: &[Dataset], grid: &ModelGrid, prior: &PriorSpec, cfg: &DbpsConfig) -> Result<Vec<SubsetResult>> {
    parts
        .par_iter()
        .enumerate()
        .map(|(k, d)| {
            let seed = derive_seed(cfg.seed, stream::SUBSET, k as u64);
            fit_subset(d, grid, prior, cfg.folds, seed, k, cfg.solver)
        })
        .collect()
}

/// Between-subset weights according to the configured variant.
pub fn combine(results: &[SubsetResult], cfg: &DbpsConfig) -> Result<SimplexWeights> {
    match cfg.between_table {
        BetweenTable::Pooled => {
            let blocks: Vec<&LogPredDensityTable> = results.iter().map(|r| &r.log_pd_block).collect();
            let z: Vec<SimplexWeights> = results.iter().map(|r| r.z_hat.clone()).collect();
            stack_between(&blocks, &z, cfg.weight_method, cfg.solver)
        }
        BetweenTable::CommonSet => stack_between_common(results, cfg.weight_method, cfg.solver),
    }
}

/// A parameter draw labelled with the mixture component it came from.
#[derive(Clone, Debug)]
pub struct ParameterDraw {
    pub subset: usize,
    pub model: usize,
    pub theta: ThetaDraw,
}

pub fn sample_theta(model: &StackedModel, draws: usize, seed: u64, with_omega: bool) -> Result<Vec<ParameterDraw>> {
    if draws == 0 {
        return Err(Error::InvalidArgument("draw count must be at least 1".into()));
    }
    (0..draws)
        .into_par_iter()
        .map(|r| {
            let (k, j, mut rng) = model.draw_component(seed, r);
            let theta = model.results[k].posteriors[j].sample_theta(with_omega, &mut rng)?;
            Ok(ParameterDraw {
                subset: k,
                model: j,
                theta,
            })
        })
        .collect()
}

/// Per-location, per-outcome summaries of a set of draws.
#[derive(Clone, Debug, PartialEq)]
pub struct DrawSummary {
    pub mean: DMatrix<f64>,
    pub sd: DMatrix<f64>,
    pub q025: DMatrix<f64>,
    pub q50: DMatrix<f64>,
    pub q975: DMatrix<f64>,
}

/// Type-7 (linear interpolation) sample quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], prob: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * prob;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn summarize(draws: &[DMatrix<f64>], rows: usize, cols: usize) -> DrawSummary {
    let mut s = DrawSummary {
        mean: DMatrix::zeros(rows, cols),
        sd: DMatrix::zeros(rows, cols),
        q025: DMatrix::zeros(rows, cols),
        q50: DMatrix::zeros(rows, cols),
        q975: DMatrix::zeros(rows, cols),
    };
    let r = draws.len();
    if r == 0 {
        return s;
    }
    let mut buf = vec![0.0; r];
    for i in 0..rows {
        for c in 0..cols {
            for (b, d) in buf.iter_mut().zip(draws) {
                *b = d[(i, c)];
            }
            let mean = buf.iter().sum::<f64>() / r as f64;
            let var = if r > 1 {
                buf.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (r - 1) as f64
            } else {
                0.0
            };
            buf.sort_by(f64::total_cmp);
            s.mean[(i, c)] = mean;
            s.sd[(i, c)] = var.sqrt();
            s.q025[(i, c)] = quantile_sorted(&buf, 0.025);
            s.q50[(i, c)] = quantile_sorted(&buf, 0.5);
            s.q975[(i, c)] = quantile_sorted(&buf, 0.975);
        }
    }
    s
}

#[derive(Clone, Debug)]
pub struct PredictionResult {
    pub y_draws: Vec<DMatrix<f64>>,
    pub omega_draws: Vec<DMatrix<f64>>,
    /// (subset, model) component of each draw.
    pub labels: Vec<(usize, usize)>,
    pub y_summary: DrawSummary,
    pub omega_summary: DrawSummary,
}

/// Predictive draws at `u`. Draw r selects its component from a stream that
/// depends only on (seed, r); `chunk` separates the noise streams of
/// different location batches predicted with the same seed.
pub fn predict_chunk(
    model: &StackedModel,
    u: &LocationSet,
    x_u: &DMatrix<f64>,
    draws: usize,
    seed: u64,
    chunk: u64,
) -> Result<PredictionResult> {
    let p = model.prior.p();
    let q = model.prior.q();
    if x_u.nrows() != u.len() || x_u.ncols() != p {
        return Err(dim_err(format!(
            "prediction design is {}x{}, expected {}x{p}",
            x_u.nrows(),
            x_u.ncols(),
            u.len()
        )));
    }
    if draws == 0 {
        return Err(Error::InvalidArgument("draw count must be at least 1".into()));
    }
    let np = u.len();
    let components: Vec<(usize, usize, crate::seed::Rng)> = (0..draws).map(|r| model.draw_component(seed, r)).collect();
    let labels: Vec<(usize, usize)> = components.iter().map(|(k, j, _)| (*k, *j)).collect();
    let mut needed = labels.clone();
    needed.sort_unstable();
    needed.dedup();
    let samplers = needed
        .par_iter()
        .map(|&(k, j)| model.results[k].posteriors[j].predictive_sampler(u, x_u))
        .collect::<Result<Vec<_>>>()?;
    let pairs: Vec<(DMatrix<f64>, DMatrix<f64>)> = components
        .into_par_iter()
        .map(|(k, j, mut sel_rng)| {
            let at = needed.binary_search(&(k, j)).expect("component was prepared");
            let stream_seed: u64 = rand::Rng::random(&mut sel_rng);
            let mut rng = rng_from_seed(derive_seed(stream_seed, stream::DRAWS, chunk));
            samplers[at].sample(&mut rng)
        })
        .collect();
    let (omega_draws, y_draws): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    let y_summary = summarize(&y_draws, np, q);
    let omega_summary = summarize(&omega_draws, np, q);
    Ok(PredictionResult {
        y_draws,
        omega_draws,
        labels,
        y_summary,
        omega_summary,
    })
}

pub fn predict(
    model: &StackedModel,
    u: &LocationSet,
    x_u: &DMatrix<f64>,
    draws: usize,
    seed: u64,
) -> Result<PredictionResult> {
    predict_chunk(model, u, x_u, draws, seed, 0)
}
