//! Weights on the probability simplex from held-out log predictive densities:
//! log-score stacking and pseudo Bayesian model averaging.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::linalg::log_sum_exp;
use crate::seed::rng_from_seed;

/// Nonnegative weights summing to one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SimplexWeights(Vec<f64>);

impl SimplexWeights {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.is_empty() {
            return Err(Error::InvalidArgument("weight vector is empty".into()));
        }
        if w.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidArgument("weights must be finite and nonnegative".into()));
        }
        let s: f64 = w.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("weights sum to {s}, not 1")));
        }
        Ok(Self(w))
    }

    /// Normalize a nonnegative vector onto the simplex.
    pub fn normalized(mut w: Vec<f64>) -> Result<Self> {
        let s: f64 = w.iter().sum();
        if !(s > 0.0) || !s.is_finite() {
            return Err(Error::InvalidArgument("cannot normalize weights".into()));
        }
        w.iter_mut().for_each(|v| *v /= s);
        Self::new(w)
    }

    pub fn uniform(len: usize) -> Self {
        Self(vec![1.0 / len as f64; len])
    }

    pub fn one_hot(len: usize, at: usize) -> Self {
        let mut w = vec![0.0; len];
        w[at] = 1.0;
        Self(w)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
    pub fn len(&self) -> usize {
        self.0.len()
    }
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// Index drawn with probability equal to its weight.
    pub fn sample_index<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut last = 0;
        for (i, &w) in self.0.iter().enumerate() {
            if w > 0.0 {
                acc += w;
                last = i;
                if u < acc {
                    return i;
                }
            }
        }
        last
    }
}

impl std::ops::Index<usize> for SimplexWeights {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Provenance of one table row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowIndex {
    pub subset: usize,
    pub row: usize,
    pub fold: usize,
}

/// Log predictive density of each held-out row (rows) under each model
/// (columns).
#[derive(Clone, Debug)]
pub struct LogPredDensityTable {
    pub values: DMatrix<f64>,
    pub row_index: Vec<RowIndex>,
    pub col_index: Vec<usize>,
}

impl LogPredDensityTable {
    /// Table with trivial provenance (subset 0, row i, fold 0; column j).
    pub fn from_values(values: DMatrix<f64>) -> Result<Self> {
        let row_index = (0..values.nrows())
            .map(|row| RowIndex { subset: 0, row, fold: 0 })
            .collect();
        let col_index = (0..values.ncols()).collect();
        Self::new(values, row_index, col_index)
    }

    pub fn new(values: DMatrix<f64>, row_index: Vec<RowIndex>, col_index: Vec<usize>) -> Result<Self> {
        if row_index.len() != values.nrows() || col_index.len() != values.ncols() {
            return Err(dim_err("table indices do not match its shape"));
        }
        if values.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(Error::DataQuality("log predictive density is NaN or +inf".into()));
        }
        Ok(Self {
            values,
            row_index,
            col_index,
        })
    }

    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }
    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }

    /// Stack tables with equal column sets vertically.
    pub fn vstack(tables: &[&LogPredDensityTable]) -> Result<Self> {
        let j = tables.first().map_or(0, |t| t.ncols());
        if tables.iter().any(|t| t.ncols() != j) {
            return Err(dim_err("cannot stack tables with different model counts"));
        }
        let n: usize = tables.iter().map(|t| t.nrows()).sum();
        let mut values = DMatrix::<f64>::zeros(n, j);
        let mut row_index = Vec::with_capacity(n);
        let mut at = 0;
        for t in tables {
            values.rows_mut(at, t.nrows()).copy_from(&t.values);
            row_index.extend_from_slice(&t.row_index);
            at += t.nrows();
        }
        let col_index = tables.first().map_or_else(Vec::new, |t| t.col_index.clone());
        Self::new(values, row_index, col_index)
    }

    fn check_rows_supported(&self) -> Result<()> {
        for i in 0..self.nrows() {
            if self.values.row(i).iter().all(|v| *v == f64::NEG_INFINITY) {
                let r = self.row_index[i];
                return Err(Error::DataQuality(format!(
                    "row {} of subset {} has zero predictive density under every model",
                    r.row, r.subset
                )));
            }
        }
        Ok(())
    }
}

/// Fold label (0-based) of each row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldAssignment {
    pub fold_of: Vec<usize>,
    pub folds: usize,
}

impl FoldAssignment {
    pub fn members(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of.len()).filter(|&i| self.fold_of[i] == fold).collect()
    }
    pub fn complement(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of.len()).filter(|&i| self.fold_of[i] != fold).collect()
    }
    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.folds];
        self.fold_of.iter().for_each(|&f| s[f] += 1);
        s
    }
}

/// Random balanced folds: a seeded permutation dealt round-robin.
pub fn kfold_assign(n: usize, folds: usize, seed: u64) -> Result<FoldAssignment> {
    if folds < 2 || folds > n {
        return Err(Error::InvalidFoldCount { folds, n });
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng_from_seed(seed));
    let mut fold_of = vec![0; n];
    for (pos, &i) in perm.iter().enumerate() {
        fold_of[i] = pos % folds;
    }
    Ok(FoldAssignment { fold_of, folds })
}

/// (1/n) Σᵢ log Σⱼ wⱼ exp(ℓᵢⱼ)
pub fn log_score(table: &LogPredDensityTable, w: &SimplexWeights) -> Result<f64> {
    if w.len() != table.ncols() {
        return Err(dim_err(format!("{} weights for {} models", w.len(), table.ncols())));
    }
    let n = table.nrows();
    if n == 0 {
        return Err(Error::InvalidArgument("empty density table".into()));
    }
    let logw: Vec<f64> = w.as_slice().iter().map(|v| v.ln()).collect();
    let total: f64 = (0..n)
        .map(|i| {
            let row = table.values.row(i);
            log_sum_exp(row.iter().zip(&logw).map(|(l, lw)| l + lw).collect::<Vec<_>>())
        })
        .sum();
    Ok(total / n as f64)
}

/// ∂/∂wⱼ of [`log_score`]: (1/n) Σᵢ exp(ℓᵢⱼ) / Σₖ wₖ exp(ℓᵢₖ).
pub fn log_score_gradient(table: &LogPredDensityTable, w: &SimplexWeights) -> Result<Vec<f64>> {
    if w.len() != table.ncols() {
        return Err(dim_err(format!("{} weights for {} models", w.len(), table.ncols())));
    }
    let s = Shifted::new(table);
    Ok(s.eval(w.as_slice()).1)
}

/// Row-max shifted densities: eᵢⱼ = exp(ℓᵢⱼ − maxⱼ ℓᵢⱼ) ∈ [0, 1].
struct Shifted {
    e: DMatrix<f64>,
    mean_shift: f64,
}

impl Shifted {
    fn new(table: &LogPredDensityTable) -> Self {
        let (n, j) = table.values.shape();
        let mut e = DMatrix::<f64>::zeros(n, j);
        let mut shift_sum = 0.0;
        for i in 0..n {
            let row = table.values.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            shift_sum += m;
            for c in 0..j {
                e[(i, c)] = (row[c] - m).exp();
            }
        }
        Self {
            e,
            mean_shift: shift_sum / n as f64,
        }
    }

    /// Objective and gradient.
    fn eval(&self, w: &[f64]) -> (f64, Vec<f64>) {
        let (n, j) = self.e.shape();
        let mut grad = vec![0.0; j];
        let mut obj = 0.0;
        for row in self.e.row_iter() {
            let s: f64 = row.iter().zip(w).map(|(e, wc)| e * wc).sum();
            obj += s.ln();
            let inv = 1.0 / s;
            for (g, e) in grad.iter_mut().zip(row.iter()) {
                *g += e * inv;
            }
        }
        grad.iter_mut().for_each(|g| *g /= n as f64);
        (obj / n as f64 + self.mean_shift, grad)
    }

    /// Negated Hessian of the mean log score restricted to `support`.
    fn neg_hessian(&self, w: &[f64], support: &[usize]) -> DMatrix<f64> {
        let (n, j) = self.e.shape();
        let m = support.len();
        let mut h = DMatrix::<f64>::zeros(m, m);
        for i in 0..n {
            let s: f64 = (0..j).map(|c| self.e[(i, c)] * w[c]).sum();
            let inv2 = 1.0 / (s * s);
            for a in 0..m {
                let ea = self.e[(i, support[a])] * inv2;
                for b in 0..=a {
                    h[(a, b)] += ea * self.e[(i, support[b])];
                }
            }
        }
        for a in 0..m {
            for b in 0..a {
                h[(b, a)] = h[(a, b)];
            }
        }
        h / n as f64
    }

    fn objective(&self, w: &[f64]) -> f64 {
        let n = self.e.nrows();
        let mut obj = 0.0;
        for row in self.e.row_iter() {
            let s: f64 = row.iter().zip(w).map(|(e, wc)| e * wc).sum();
            obj += s.ln();
        }
        obj / n as f64 + self.mean_shift
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 10_000,
        }
    }
}

/// Weights below this are set to zero after convergence.
const PRUNE: f64 = 1e-10;
const ARMIJO_C: f64 = 1e-4;
const WEIGHT_FLOOR: f64 = 1e-300;

/// Maximize the mean log score over the simplex by exponentiated-gradient
/// ascent with Armijo backtracking, from the uniform point.
pub fn solve_simplex_logscore(table: &LogPredDensityTable, opts: SolverOptions) -> Result<SimplexWeights> {
    let j = table.ncols();
    if j == 0 || table.nrows() == 0 {
        return Err(Error::InvalidArgument("empty density table".into()));
    }
    table.check_rows_supported()?;
    if j == 1 {
        return Ok(SimplexWeights::one_hot(1, 0));
    }
    let shifted = Shifted::new(table);
    let mut w = vec![1.0 / j as f64; j];
    let (mut f, mut g) = shifted.eval(&w);
    let mut prev_f = f64::NAN;
    let mut eta = 1.0;
    for iter in 0..opts.max_iter {
        let gmax = g.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let gap = fw_gap(&w, &g);
        let rel = (f - prev_f).abs() / f.abs().max(1.0);
        if gap <= opts.tol && (iter == 0 || rel <= opts.tol) {
            return finish(polish(&shifted, w, f));
        }
        // Backtracking on the mirror step.
        let mut moved = false;
        for _ in 0..60 {
            let mut cand: Vec<f64> = w
                .iter()
                .zip(&g)
                .map(|(wi, gi)| wi * (eta * (gi - gmax)).max(-700.0).exp())
                .collect();
            let s: f64 = cand.iter().sum();
            cand.iter_mut().for_each(|c| *c = (*c / s).max(WEIGHT_FLOOR));
            let s: f64 = cand.iter().sum();
            cand.iter_mut().for_each(|c| *c /= s);
            let fc = shifted.objective(&cand);
            let lin: f64 = cand.iter().zip(&w).zip(&g).map(|((c, wi), gi)| (c - wi) * gi).sum();
            if fc >= f + ARMIJO_C * lin && fc >= f {
                moved = fc > f;
                prev_f = f;
                w = cand;
                (f, g) = shifted.eval(&w);
                eta *= 2.0;
                break;
            }
            eta *= 0.5;
        }
        if let Some((nw, nf, ng)) = newton_refine(&shifted, &w, f, &g) {
            if !moved {
                prev_f = f;
            }
            (w, f, g) = (nw, nf, ng);
            moved = true;
        }
        if !moved {
            // No progress resolvable in floating point: the current point is
            // optimal to machine precision.
            if gap <= opts.tol.sqrt() {
                return finish(polish(&shifted, w, f));
            }
            break;
        }
    }
    Err(Error::ConvergenceFailure {
        iterations: opts.max_iter,
        best: finish(w)?,
        subset: None,
    })
}

/// Frank-Wolfe gap: largest partial derivative minus the weighted mean one.
fn fw_gap(w: &[f64], g: &[f64]) -> f64 {
    let gmax = g.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    gmax - w.iter().zip(g).map(|(a, b)| a * b).sum::<f64>()
}

/// Newton step on the face spanned by the coordinates above `PRUNE`, plus
/// the zero coordinate whose partial derivative most exceeds the multiplier.
/// The sum constraint is eliminated through its multiplier and a small ridge
/// handles nearly collinear models. Exponentiated gradient alone crawls along
/// the flat ridges such models create and cannot revive floored weights.
///
/// Returns the new point with its objective and gradient when the objective
/// rises, or stays level while the gap shrinks (the last digits of f are
/// below floating-point resolution near the optimum).
fn newton_refine(shifted: &Shifted, w: &[f64], f: f64, g: &[f64]) -> Option<(Vec<f64>, f64, Vec<f64>)> {
    let mut support: Vec<usize> = (0..w.len()).filter(|&c| w[c] > PRUNE).collect();
    let lambda: f64 = w.iter().zip(g).map(|(a, b)| a * b).sum();
    let entering = (0..w.len())
        .filter(|&c| w[c] <= PRUNE && g[c] > lambda)
        .max_by(|&a, &b| g[a].total_cmp(&g[b]));
    let gap = fw_gap(w, g);
    if let Some(c) = entering {
        let mut with = support.clone();
        with.push(c);
        with.sort_unstable();
        if let Some(r) = newton_on(shifted, w, f, g, gap, &with) {
            return Some(r);
        }
    }
    support.retain(|&c| w[c] > PRUNE);
    newton_on(shifted, w, f, g, gap, &support)
}

fn newton_on(
    shifted: &Shifted,
    w: &[f64],
    f: f64,
    g: &[f64],
    gap: f64,
    support: &[usize],
) -> Option<(Vec<f64>, f64, Vec<f64>)> {
    if support.len() < 2 {
        return None;
    }
    let mut h = shifted.neg_hessian(w, support);
    let ridge = 1e-10 * h.diagonal().max().max(1e-300);
    for a in 0..support.len() {
        h[(a, a)] += ridge;
    }
    let chol = h.cholesky()?;
    let gs = DVector::from_iterator(support.len(), support.iter().map(|&c| g[c]));
    let ones = DVector::from_element(support.len(), 1.0);
    let hg = chol.solve(&gs);
    let h1 = chol.solve(&ones);
    let mu = hg.sum() / h1.sum();
    let d = hg - h1 * mu;
    // Largest step keeping the support non-negative; floored weights count
    // as zero.
    let base = |c: usize| if w[c] > PRUNE { w[c] } else { 0.0 };
    let mut t_max = f64::INFINITY;
    for (a, &c) in support.iter().enumerate() {
        if d[a] < 0.0 {
            t_max = t_max.min(-base(c) / d[a]);
        }
    }
    let mut t = t_max.min(1.0);
    if t.is_nan() || t <= 0.0 {
        return None;
    }
    for _ in 0..30 {
        let mut cand = w.to_vec();
        for (a, &c) in support.iter().enumerate() {
            cand[c] = (base(c) + t * d[a]).max(WEIGHT_FLOOR);
        }
        let s: f64 = cand.iter().sum();
        cand.iter_mut().for_each(|v| *v /= s);
        let (fc, gc) = shifted.eval(&cand);
        if fc > f || (fc == f && fw_gap(&cand, &gc) < gap) {
            return Some((cand, fc, gc));
        }
        t *= 0.5;
    }
    None
}

/// Drop small weights whose removal strictly raises the objective. At a
/// boundary optimum with a flat partial derivative the multiplicative update
/// only approaches zero slowly; this snaps such coordinates to the face.
fn polish(shifted: &Shifted, mut w: Vec<f64>, mut f: f64) -> Vec<f64> {
    let mut order: Vec<usize> = (0..w.len()).collect();
    order.sort_by(|&a, &b| w[a].total_cmp(&w[b]));
    for j in order {
        if w[j] == 0.0 || w[j] > 1e-2 {
            continue;
        }
        let rest = 1.0 - w[j];
        if rest <= 0.0 {
            continue;
        }
        let cand: Vec<f64> = w
            .iter()
            .enumerate()
            .map(|(i, v)| if i == j { 0.0 } else { v / rest })
            .collect();
        let fc = shifted.objective(&cand);
        if fc > f {
            w = cand;
            f = fc;
        }
    }
    w
}

fn finish(mut w: Vec<f64>) -> Result<SimplexWeights> {
    w.iter_mut().for_each(|v| {
        if *v < PRUNE {
            *v = 0.0
        }
    });
    SimplexWeights::normalized(w)
}

/// Softmax of elpd values, shifted by their maximum.
pub fn softmax_elpd(elpd: &[f64]) -> Result<SimplexWeights> {
    if elpd.is_empty() {
        return Err(Error::InvalidArgument("no elpd values".into()));
    }
    let m = elpd.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return Err(Error::DataQuality("elpd values are not finite".into()));
    }
    SimplexWeights::normalized(elpd.iter().map(|e| (e - m).exp()).collect())
}

/// Per-row log of the ẑ-mixture density for each weight vector: column k is
/// log Σⱼ z_kj exp(ℓᵢⱼ).
pub fn mixture_columns(table: &LogPredDensityTable, z_list: &[SimplexWeights]) -> Result<LogPredDensityTable> {
    let j = table.ncols();
    if z_list.is_empty() || z_list.iter().any(|z| z.len() != j) {
        return Err(dim_err(format!("every weight vector must have {j} entries")));
    }
    let logz: Vec<Vec<f64>> = z_list
        .iter()
        .map(|z| z.as_slice().iter().map(|v| v.ln()).collect())
        .collect();
    let n = table.nrows();
    let mut out = DMatrix::<f64>::zeros(n, z_list.len());
    for i in 0..n {
        let row = table.values.row(i);
        for (k, lz) in logz.iter().enumerate() {
            out[(i, k)] = log_sum_exp(row.iter().zip(lz).map(|(l, w)| l + w).collect::<Vec<_>>());
        }
    }
    LogPredDensityTable::new(out, table.row_index.clone(), (0..z_list.len()).collect())
}

/// Pseudo-BMA weights: softmax over k of elpd_k = Σᵢ log Σⱼ z_kj exp(ℓᵢⱼ).
pub fn pseudo_bma(table: &LogPredDensityTable, z_list: &[SimplexWeights]) -> Result<SimplexWeights> {
    let cols = mixture_columns(table, z_list)?;
    let elpd: Vec<f64> = (0..cols.ncols()).map(|k| cols.values.column(k).sum()).collect();
    softmax_elpd(&elpd)
}
