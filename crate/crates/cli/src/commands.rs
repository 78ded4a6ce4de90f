use std::fs;
use std::path::Path;
use std::time::Instant;

use dbps_core::artifact::{read_model, write_model, ArtifactMeta};
use dbps_core::dbps::{combine, default_subset_count, fit_subsets, partition, predict_chunk, DrawSummary};
use dbps_core::diagnostics::{
    auto_grid, cross_variogram, empirical_variogram, fit_cross_variogram, kl_upper_bound, wls_variogram_fit,
    CrossVariogramFit,
};
use dbps_core::spatial_kernel::grid_product;
use dbps_core::{
    generate, latent_posterior, Dataset, DbpsConfig, EmpiricalVariogram, GeneratorSpec, LocationSet, ModelGrid,
    ModelSpec, PriorSpec, SimplexWeights, StackedModel, VariogramFit, WeightMethod,
};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::config::{Design, GridSource, RunConfig};
use crate::error::{CliError, CliResult};
use crate::table::{design_names, load_dataset, load_prediction_points, write_csv, write_json};

/// Rows per prediction batch.
pub const PREDICT_CHUNK: usize = 1000;

fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn echo_config(cfg: &RunConfig, dir: &Path) -> CliResult<()> {
    let path = dir.join("config.json");
    fs::write(&path, cfg.echo()).map_err(|e| CliError::io(&path, e))
}

fn matrix_or(rows: &Option<Vec<Vec<f64>>>, default: DMatrix<f64>, name: &str) -> CliResult<DMatrix<f64>> {
    let Some(rows) = rows else { return Ok(default) };
    let (r, c) = default.shape();
    if rows.len() != r || rows.iter().any(|row| row.len() != c) {
        return Err(CliError::Config(format!("prior.{name} must be {r}x{c}")));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

pub fn build_prior(cfg: &RunConfig, p: usize, q: usize) -> CliResult<PriorSpec> {
    let d = PriorSpec::default_for(p, q);
    let prior = PriorSpec {
        m0: matrix_or(&cfg.prior.m0, d.m0, "m0")?,
        big_m0: matrix_or(&cfg.prior.big_m0, d.big_m0, "big_m0")?,
        psi0: matrix_or(&cfg.prior.psi0, d.psi0, "psi0")?,
        nu0: cfg.prior.nu0.unwrap_or(d.nu0),
    };
    prior.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(prior)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OutcomeFit {
    pub outcome: String,
    #[serde(flatten)]
    pub fit: VariogramFit,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CrossFit {
    pub outcomes: [String; 2],
    #[serde(flatten)]
    pub fit: CrossVariogramFit,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FitsReport {
    pub config_hash: String,
    pub seed: u64,
    pub variograms: Vec<OutcomeFit>,
    pub cross_variograms: Vec<CrossFit>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GridReport {
    pub config_hash: String,
    pub seed: u64,
    pub source: String,
    pub models: ModelGrid,
}

/// Variogram curves and fits for every outcome and outcome pair.
pub struct EdaResult {
    pub variograms: Vec<EmpiricalVariogram>,
    pub fits: Vec<VariogramFit>,
    pub cross: Vec<((usize, usize), EmpiricalVariogram, CrossVariogramFit)>,
    pub grid: ModelGrid,
}

pub fn run_eda(cfg: &RunConfig, data: &Dataset, alpha_count: usize, phi_count: usize) -> CliResult<EdaResult> {
    let opts = cfg.variogram_options();
    let q = data.q();
    let mut variograms = Vec::with_capacity(q);
    let mut fits = Vec::with_capacity(q);
    for c in 0..q {
        let v = empirical_variogram(data, c, &opts)?;
        fits.push(wls_variogram_fit(&v)?);
        variograms.push(v);
    }
    let mut cross = Vec::new();
    for a in 0..q {
        for b in a + 1..q {
            let v = cross_variogram(data, a, b, &opts)?;
            let f = fit_cross_variogram(&v)?;
            cross.push(((a, b), v, f));
        }
    }
    let grid = auto_grid(&fits, alpha_count, phi_count)?;
    Ok(EdaResult {
        variograms,
        fits,
        cross,
        grid,
    })
}

/// The model grid named by the config; auto grids run the variogram stage.
pub fn resolve_grid(cfg: &RunConfig, data: &Dataset) -> CliResult<ModelGrid> {
    match &cfg.grid {
        GridSource::Explicit { alpha, phi } => Ok(grid_product(alpha, phi).map_err(|e| CliError::Config(e.to_string()))?),
        GridSource::Auto {
            alpha_count,
            phi_count,
        } => Ok(run_eda(cfg, data, *alpha_count, *phi_count)?.grid),
    }
}

fn variogram_rows(v: &EmpiricalVariogram) -> Vec<Vec<f64>> {
    (0..v.gamma.len())
        .map(|i| vec![v.bin_centers[i], v.gamma[i], v.counts[i] as f64])
        .collect()
}

pub fn cmd_eda(cfg: &RunConfig) -> CliResult<()> {
    let out = cfg.output_dir()?;
    let hash = cfg.hash();
    let (source, grid) = match &cfg.grid {
        GridSource::Explicit { alpha, phi } => (
            "explicit",
            grid_product(alpha, phi).map_err(|e| CliError::Config(e.to_string()))?,
        ),
        GridSource::Auto {
            alpha_count,
            phi_count,
        } => {
            let data = load_dataset(cfg)?;
            let eda = run_eda(cfg, &data, *alpha_count, *phi_count)?;
            ensure_dir(&out)?;
            let header: Vec<String> = ["distance", "gamma", "pairs"].iter().map(|s| s.to_string()).collect();
            for (c, v) in eda.variograms.iter().enumerate() {
                let path = out.join(format!("variogram_{}.csv", cfg.outcomes[c]));
                write_csv(&path, &hash, cfg.seed, &header, &variogram_rows(v))?;
            }
            for ((a, b), v, _) in &eda.cross {
                let path = out.join(format!("cross_variogram_{}_{}.csv", cfg.outcomes[*a], cfg.outcomes[*b]));
                write_csv(&path, &hash, cfg.seed, &header, &variogram_rows(v))?;
            }
            let report = FitsReport {
                config_hash: hash.clone(),
                seed: cfg.seed,
                variograms: eda
                    .fits
                    .iter()
                    .enumerate()
                    .map(|(c, f)| OutcomeFit {
                        outcome: cfg.outcomes[c].clone(),
                        fit: *f,
                    })
                    .collect(),
                cross_variograms: eda
                    .cross
                    .iter()
                    .map(|((a, b), _, f)| CrossFit {
                        outcomes: [cfg.outcomes[*a].clone(), cfg.outcomes[*b].clone()],
                        fit: *f,
                    })
                    .collect(),
            };
            write_json(&out.join("variogram_fits.json"), &report)?;
            ("auto", eda.grid)
        }
    };
    ensure_dir(&out)?;
    echo_config(cfg, &out)?;
    write_json(
        &out.join("grid.json"),
        &GridReport {
            config_hash: hash,
            seed: cfg.seed,
            source: source.into(),
            models: grid,
        },
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightsReport {
    pub config_hash: String,
    pub seed: u64,
    pub method: WeightMethod,
    pub grid: ModelGrid,
    /// Within-subset weights, one row per subset in id order.
    pub z: Vec<SimplexWeights>,
    pub w: SimplexWeights,
}

/// Column names a fitted model expects at prediction time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub coords: Vec<String>,
    pub outcomes: Vec<String>,
    pub design: Vec<String>,
}

impl Schema {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            coords: cfg.coords.clone(),
            outcomes: cfg.outcomes.clone(),
            design: design_names(cfg),
        }
    }
}

fn stage(name: &str, t0: Instant) {
    eprintln!("stage {name}: {:.3} s", t0.elapsed().as_secs_f64());
}

pub fn fit_model(cfg: &RunConfig, data: &Dataset) -> CliResult<StackedModel> {
    let t0 = Instant::now();
    let grid = resolve_grid(cfg, data)?;
    stage("grid", t0);
    let prior = build_prior(cfg, data.p(), data.q())?;
    let mut dc = DbpsConfig::new(cfg.seed);
    dc.folds = cfg.folds;
    dc.weight_method = cfg.weight_method;
    dc.between_table = cfg.between_table;
    let k = cfg
        .subsets
        .unwrap_or_else(|| default_subset_count(data.n(), cfg.subset_size));
    dc.subsets = Some(k);

    let t0 = Instant::now();
    let parts = partition(data, k, cfg.folds, cfg.seed)?;
    stage("partition", t0);
    let t0 = Instant::now();
    let results = fit_subsets(&parts, &grid, &prior, &dc)?;
    stage("within-subset stacking", t0);
    let t0 = Instant::now();
    let w_hat = combine(&results, &dc)?;
    stage("between-subset stacking", t0);
    Ok(StackedModel {
        grid,
        prior,
        results,
        w_hat,
        weight_method: cfg.weight_method,
    })
}

pub fn weights_report(cfg: &RunConfig, model: &StackedModel) -> WeightsReport {
    WeightsReport {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        method: model.weight_method,
        grid: model.grid.clone(),
        z: model.results.iter().map(|r| r.z_hat.clone()).collect(),
        w: model.w_hat.clone(),
    }
}

pub fn cmd_fit(cfg: &RunConfig) -> CliResult<()> {
    let out = cfg.output_dir()?;
    let data = load_dataset(cfg)?;
    let model = fit_model(cfg, &data)?;
    let dir = cfg.model_path()?;
    let meta = ArtifactMeta {
        config_hash: cfg.hash(),
        master_seed: cfg.seed,
        folds: cfg.folds,
    };
    let t0 = Instant::now();
    ensure_dir(&out)?;
    if dir.exists() {
        // Stale subset directories from a larger earlier fit would otherwise
        // survive next to the new manifest.
        fs::remove_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    }
    write_model(&dir, &model, &meta)?;
    write_json(&dir.join("schema.json"), &Schema::from_config(cfg))?;
    echo_config(cfg, &dir)?;
    echo_config(cfg, &out)?;
    write_json(&out.join("weights.json"), &weights_report(cfg, &model))?;
    stage("write", t0);
    Ok(())
}

pub fn load_fitted(cfg: &RunConfig) -> CliResult<(StackedModel, Schema)> {
    let dir = cfg.model_path()?;
    if !dir.join("model.json").is_file() {
        return Err(CliError::Data(format!("{}: no fitted model (model.json missing)", dir.display())));
    }
    let (model, _meta) = read_model(&dir).map_err(|e| match CliError::from(e) {
        CliError::Data(m) => CliError::Data(format!("{}: {m}", dir.display())),
        other => other,
    })?;
    let path = dir.join("schema.json");
    let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    let schema: Schema = serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let want = Schema::from_config(cfg);
    if want.design != schema.design {
        return Err(CliError::SchemaMismatch(format!(
            "model was fitted with design columns {:?}, config names {:?}",
            schema.design, want.design
        )));
    }
    if want.outcomes != schema.outcomes || want.coords != schema.coords {
        return Err(CliError::SchemaMismatch(
            "coordinate or outcome columns differ from the fitted model".into(),
        ));
    }
    Ok((model, schema))
}

fn summary_columns(prefix: &str, outcomes: &[String]) -> Vec<String> {
    let mut h = Vec::new();
    for o in outcomes {
        for s in ["mean", "sd", "q2.5", "q50", "q97.5"] {
            h.push(format!("{prefix}{o}_{s}"));
        }
    }
    h
}

fn push_summary(row: &mut Vec<f64>, s: &DrawSummary, i: usize) {
    for c in 0..s.mean.ncols() {
        row.extend([s.mean[(i, c)], s.sd[(i, c)], s.q025[(i, c)], s.q50[(i, c)], s.q975[(i, c)]]);
    }
}

/// Summary rows for prediction points, batched in chunks of
/// [`PREDICT_CHUNK`] with chunk-specific noise streams.
pub fn prediction_rows(
    model: &StackedModel,
    u: &LocationSet,
    x_u: &DMatrix<f64>,
    draws: usize,
    seed: u64,
) -> CliResult<Vec<Vec<f64>>> {
    let mut rows = Vec::with_capacity(u.len());
    let mut start = 0;
    let mut chunk = 0u64;
    while start < u.len() {
        let end = (start + PREDICT_CHUNK).min(u.len());
        let idx: Vec<usize> = (start..end).collect();
        let uc = u.select(&idx);
        let xc = x_u.rows(start, end - start).into_owned();
        let pred = predict_chunk(model, &uc, &xc, draws, seed, chunk)?;
        for i in 0..idx.len() {
            let pt = uc.point(i);
            let mut row = vec![pt[0], pt[1]];
            push_summary(&mut row, &pred.y_summary, i);
            push_summary(&mut row, &pred.omega_summary, i);
            rows.push(row);
        }
        start = end;
        chunk += 1;
    }
    Ok(rows)
}

pub fn cmd_predict(cfg: &RunConfig) -> CliResult<()> {
    let out = cfg.output_dir()?;
    cfg.require_columns()?;
    let input = cfg
        .prediction_input
        .as_deref()
        .ok_or_else(|| CliError::Config("missing \"prediction_input\"".into()))?;
    let (model, schema) = load_fitted(cfg)?;
    let (u, x_u) = load_prediction_points(cfg, input)?;
    let t0 = Instant::now();
    let rows = if u.is_empty() {
        Vec::new()
    } else {
        prediction_rows(&model, &u, &x_u, cfg.draws, cfg.seed)?
    };
    stage("predict", t0);
    let mut header = schema.coords.clone();
    header.extend(summary_columns("", &schema.outcomes));
    header.extend(summary_columns("omega_", &schema.outcomes));
    ensure_dir(&out)?;
    echo_config(cfg, &out)?;
    write_csv(&out.join("predictions.csv"), &cfg.hash(), cfg.seed, &header, &rows)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KlReport {
    pub config_hash: String,
    pub seed: u64,
    pub l_mc: usize,
    pub estimate: f64,
    pub std_error: f64,
    pub truth_alpha: f64,
    pub truth_phi: f64,
}

pub fn cmd_diagnose(cfg: &RunConfig) -> CliResult<()> {
    let out = cfg.output_dir()?;
    let diag = cfg
        .diagnose
        .as_ref()
        .ok_or_else(|| CliError::Config("missing \"diagnose\" section".into()))?;
    let eval = diag
        .eval_input
        .as_deref()
        .or(cfg.prediction_input.as_deref())
        .ok_or_else(|| CliError::Config("diagnose needs \"eval_input\" or \"prediction_input\"".into()))?;
    let truth_spec =
        ModelSpec::new(diag.truth.alpha, diag.truth.phi).map_err(|e| CliError::Config(e.to_string()))?;
    let (model, _) = load_fitted(cfg)?;
    let data = load_dataset(cfg)?;
    let (u, x_u) = load_prediction_points(cfg, eval)?;
    let t0 = Instant::now();
    let truth = latent_posterior(&data, &truth_spec, &model.prior)?;
    let kl = kl_upper_bound(&model, &truth, &u, &x_u, diag.l_mc, cfg.seed)?;
    stage("kl bound", t0);
    ensure_dir(&out)?;
    echo_config(cfg, &out)?;
    write_json(
        &out.join("kl_bound.json"),
        &KlReport {
            config_hash: cfg.hash(),
            seed: cfg.seed,
            l_mc: kl.l_mc,
            estimate: kl.estimate,
            std_error: kl.std_error,
            truth_alpha: diag.truth.alpha,
            truth_phi: diag.truth.phi,
        },
    )
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TruthReport {
    pub config_hash: String,
    pub seed: u64,
    pub design: Design,
    pub n: usize,
    pub alpha: f64,
    pub phi: f64,
    /// p×q rows; the first row is the intercept.
    pub beta: Vec<Vec<f64>>,
    pub sigma: Vec<Vec<f64>>,
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().cloned().collect()).collect()
}

/// Writes `simulated.csv` with columns `s1, s2, y1.., x1.., omega_y1..`.
pub fn cmd_simulate(cfg: &RunConfig) -> CliResult<()> {
    let out = cfg.output_dir()?;
    let sim = cfg
        .simulate
        .as_ref()
        .ok_or_else(|| CliError::Config("missing \"simulate\" section".into()))?;
    let mut spec = match sim.design {
        Design::Sim3 => GeneratorSpec::sim3(sim.n, cfg.seed),
        Design::Sim4 => GeneratorSpec::sim4(sim.n, cfg.seed),
    };
    if let Some(a) = sim.alpha {
        spec.alpha = a;
    }
    if let Some(p) = sim.phi {
        spec.phi = p;
    }
    spec.model().map_err(|e| CliError::Config(e.to_string()))?;
    let s = generate(&spec)?;
    let (n, p, q) = (s.data.n(), s.data.p(), s.data.q());
    let mut header: Vec<String> = vec!["s1".into(), "s2".into()];
    header.extend((1..=q).map(|c| format!("y{c}")));
    header.extend((1..p).map(|c| format!("x{c}")));
    header.extend((1..=q).map(|c| format!("omega_y{c}")));
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let pt = s.data.locations.point(i);
            let mut r = vec![pt[0], pt[1]];
            r.extend(s.data.y.row(i).iter());
            r.extend(s.data.x.row(i).iter().skip(1));
            r.extend(s.omega.row(i).iter());
            r
        })
        .collect();
    let hash = cfg.hash();
    ensure_dir(&out)?;
    echo_config(cfg, &out)?;
    write_csv(&out.join("simulated.csv"), &hash, cfg.seed, &header, &rows)?;
    write_json(
        &out.join("simulated_truth.json"),
        &TruthReport {
            config_hash: hash,
            seed: cfg.seed,
            design: sim.design,
            n,
            alpha: spec.alpha,
            phi: spec.phi,
            beta: rows_of(&spec.beta),
            sigma: rows_of(&spec.sigma),
        },
    )
}
