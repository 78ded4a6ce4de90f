//! On-disk form of a fitted model: a directory holding `model.json` and flat
//! binary matrices.
//!
//! Matrix files are `DBPSMAT1` (8 bytes), then rows and cols as
//! little-endian u64, then rows·cols little-endian f64 in row-major order.
//!
//! ```text
//! model.json
//! subset_<k>/y.bin  x.bin  coords.bin  log_pd.bin
//! subset_<k>/model_<j>_beta_mean.bin  model_<j>_beta_precision.bin  model_<j>_iw_scale.bin
//! ```

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::conjugate_regression::{latent_posterior, Dataset, PriorSpec};
use crate::dbps::{StackedModel, SubsetResult, WeightMethod};
use crate::error::{Error, Result};
use crate::linalg::rel_err;
use crate::spatial_kernel::{LocationSet, ModelSpec};
use crate::stacking::{FoldAssignment, LogPredDensityTable, RowIndex, SimplexWeights};

pub const MATRIX_MAGIC: &[u8; 8] = b"DBPSMAT1";
pub const FORMAT_VERSION: u32 = 1;

pub fn write_matrix(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(MATRIX_MAGIC)?;
    w.write_all(&(m.nrows() as u64).to_le_bytes())?;
    w.write_all(&(m.ncols() as u64).to_le_bytes())?;
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            w.write_all(&m[(i, j)].to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |msg: &str| Error::Artifact(format!("{}: {msg}", path.display()));
    if bytes.len() < 24 || &bytes[..8] != MATRIX_MAGIC {
        return Err(bad("missing matrix header"));
    }
    let word = |at: usize| u64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes"));
    let (rows, cols) = (word(8) as usize, word(16) as usize);
    let expected = rows
        .checked_mul(cols)
        .and_then(|c| c.checked_mul(8))
        .and_then(|c| c.checked_add(24))
        .ok_or_else(|| bad("shape overflows"))?;
    if bytes.len() != expected {
        return Err(bad("payload length does not match shape"));
    }
    let vals: Vec<f64> = bytes[24..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok(DMatrix::from_row_slice(rows, cols, &vals))
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().cloned().collect()).collect()
}

fn from_rows(rows: &[Vec<f64>], ncols: usize) -> Result<DMatrix<f64>> {
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Artifact("ragged matrix in model.json".into()));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorRecord {
    pub m0: Vec<Vec<f64>>,
    pub big_m0: Vec<Vec<f64>>,
    pub psi0: Vec<Vec<f64>>,
    pub nu0: f64,
}

impl PriorRecord {
    pub fn from_prior(p: &PriorSpec) -> Self {
        Self {
            m0: to_rows(&p.m0),
            big_m0: to_rows(&p.big_m0),
            psi0: to_rows(&p.psi0),
            nu0: p.nu0,
        }
    }

    pub fn to_prior(&self) -> Result<PriorSpec> {
        let p = self.m0.len();
        let q = self.psi0.len();
        let prior = PriorSpec {
            m0: from_rows(&self.m0, q)?,
            big_m0: from_rows(&self.big_m0, p)?,
            psi0: from_rows(&self.psi0, q)?,
            nu0: self.nu0,
        };
        prior.validate()?;
        Ok(prior)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelRecord {
    pub alpha: f64,
    pub phi: f64,
    pub iw_dof: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetRecord {
    pub id: usize,
    pub n: usize,
    pub seed: u64,
    pub z_hat: SimplexWeights,
    pub fold_of: Vec<usize>,
    pub models: Vec<ModelRecord>,
}

/// Provenance recorded alongside the fitted parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactMeta {
    pub config_hash: String,
    pub master_seed: u64,
    pub folds: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub format_version: u32,
    #[serde(flatten)]
    pub meta: ArtifactMeta,
    pub grid: Vec<ModelSpec>,
    pub prior: PriorRecord,
    pub weight_method: WeightMethod,
    pub w_hat: SimplexWeights,
    pub subsets: Vec<SubsetRecord>,
}

pub fn write_model(dir: &Path, model: &StackedModel, meta: &ArtifactMeta) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut subsets = Vec::with_capacity(model.results.len());
    for r in &model.results {
        let sub = dir.join(format!("subset_{}", r.subset_id));
        fs::create_dir_all(&sub)?;
        let d = r.data();
        write_matrix(&sub.join("y.bin"), &d.y)?;
        write_matrix(&sub.join("x.bin"), &d.x)?;
        write_matrix(&sub.join("coords.bin"), d.locations.coords())?;
        write_matrix(&sub.join("log_pd.bin"), &r.log_pd_block.values)?;
        let mut models = Vec::with_capacity(r.posteriors.len());
        for (j, post) in r.posteriors.iter().enumerate() {
            write_matrix(&sub.join(format!("model_{j}_beta_mean.bin")), post.beta_mean())?;
            write_matrix(&sub.join(format!("model_{j}_beta_precision.bin")), post.beta_precision())?;
            write_matrix(&sub.join(format!("model_{j}_iw_scale.bin")), post.iw_scale())?;
            models.push(ModelRecord {
                alpha: post.spec().alpha,
                phi: post.spec().phi(),
                iw_dof: post.iw_dof(),
            });
        }
        subsets.push(SubsetRecord {
            id: r.subset_id,
            n: d.n(),
            seed: r.seed,
            z_hat: r.z_hat.clone(),
            fold_of: r.folds.fold_of.clone(),
            models,
        });
    }
    let manifest = ModelManifest {
        format_version: FORMAT_VERSION,
        meta: meta.clone(),
        grid: model.grid.clone(),
        prior: PriorRecord::from_prior(&model.prior),
        weight_method: model.weight_method,
        w_hat: model.w_hat.clone(),
        subsets,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Artifact(e.to_string()))?;
    fs::write(dir.join("model.json"), json + "\n")?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<ModelManifest> {
    let text = fs::read_to_string(dir.join("model.json"))?;
    let m: ModelManifest = serde_json::from_str(&text).map_err(|e| Error::Artifact(format!("model.json: {e}")))?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::Artifact(format!("unsupported format version {}", m.format_version)));
    }
    Ok(m)
}

/// Load a model directory. Posteriors are recomputed from the stored subset
/// data and checked against the stored parameters.
pub fn read_model(dir: &Path) -> Result<(StackedModel, ArtifactMeta)> {
    let m = read_manifest(dir)?;
    let prior = m.prior.to_prior()?;
    for s in &m.grid {
        s.validate()?;
    }
    if m.w_hat.len() != m.subsets.len() {
        return Err(Error::Artifact("w_hat length differs from subset count".into()));
    }
    let mut results = Vec::with_capacity(m.subsets.len());
    for rec in &m.subsets {
        let sub = dir.join(format!("subset_{}", rec.id));
        let y = read_matrix(&sub.join("y.bin"))?;
        let x = read_matrix(&sub.join("x.bin"))?;
        let coords = read_matrix(&sub.join("coords.bin"))?;
        let data = Dataset::new(y, x, LocationSet::new(coords)?)?;
        if data.n() != rec.n || rec.fold_of.len() != rec.n {
            return Err(Error::Artifact(format!("subset {} row count mismatch", rec.id)));
        }
        let values = read_matrix(&sub.join("log_pd.bin"))?;
        let folds = FoldAssignment {
            folds: rec.fold_of.iter().max().map_or(0, |f| f + 1),
            fold_of: rec.fold_of.clone(),
        };
        let row_index = (0..rec.n)
            .map(|row| RowIndex {
                subset: rec.id,
                row,
                fold: rec.fold_of[row],
            })
            .collect();
        let log_pd_block = LogPredDensityTable::new(values, row_index, (0..m.grid.len()).collect())?;
        if rec.models.len() != m.grid.len() || rec.z_hat.len() != m.grid.len() {
            return Err(Error::Artifact(format!("subset {} model count mismatch", rec.id)));
        }
        let mut posteriors = Vec::with_capacity(m.grid.len());
        for (j, spec) in m.grid.iter().enumerate() {
            let post = latent_posterior(&data, spec, &prior)?;
            let stored = read_matrix(&sub.join(format!("model_{j}_beta_mean.bin")))?;
            let scale = read_matrix(&sub.join(format!("model_{j}_iw_scale.bin")))?;
            if stored.shape() != post.beta_mean().shape()
                || rel_err(post.beta_mean(), &stored) > 1e-9
                || rel_err(post.iw_scale(), &scale) > 1e-9
            {
                return Err(Error::Artifact(format!(
                    "subset {} model {j}: stored posterior does not match its data",
                    rec.id
                )));
            }
            posteriors.push(post);
        }
        results.push(SubsetResult {
            subset_id: rec.id,
            seed: rec.seed,
            z_hat: rec.z_hat.clone(),
            log_pd_block,
            folds,
            posteriors,
        });
    }
    let model = StackedModel {
        grid: m.grid.clone(),
        prior,
        results,
        w_hat: m.w_hat.clone(),
        weight_method: m.weight_method,
    };
    Ok((model, m.meta))
}
