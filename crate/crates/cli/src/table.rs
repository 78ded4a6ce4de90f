//! CSV ingestion and output helpers.

use std::fs;
use std::io::Write;
use std::path::Path;

use dbps_core::{Dataset, LocationSet};
use nalgebra::DMatrix;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub const INTERCEPT: &str = "(intercept)";

/// Named numeric columns read from a CSV file.
#[derive(Clone, Debug)]
pub struct NumericTable {
    pub columns: Vec<String>,
    pub data: DMatrix<f64>,
    pub rejected: usize,
}

impl NumericTable {
    pub fn nrows(&self) -> usize {
        self.data.nrows()
    }

    pub fn select(&self, names: &[String]) -> DMatrix<f64> {
        let idx: Vec<usize> = names
            .iter()
            .map(|n| self.columns.iter().position(|c| c == n).expect("column was required at load"))
            .collect();
        DMatrix::from_fn(self.nrows(), idx.len(), |i, j| self.data[(i, idx[j])])
    }
}

/// Read `required` columns. Lines starting with `#` are comments. Rows with
/// an empty required field are skipped and counted; unparsable values are
/// errors carrying their line number.
pub fn read_numeric(path: &Path, required: &[String]) -> CliResult<NumericTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let headers = rdr
        .headers()
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?
        .clone();
    let mut idx = Vec::with_capacity(required.len());
    for name in required {
        let at = headers.iter().position(|h| h == name).ok_or_else(|| CliError::Parse {
            line: 1,
            msg: format!("{}: missing column \"{name}\"", path.display()),
        })?;
        idx.push(at);
    }
    let mut values = Vec::new();
    let mut rows = 0;
    let mut rejected = 0;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| CliError::Parse {
            line: e.position().map_or(0, |p| p.line()),
            msg: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let fields: Vec<&str> = idx.iter().map(|&i| rec.get(i).unwrap_or("")).collect();
        if fields.iter().any(|f| f.is_empty() || f.eq_ignore_ascii_case("na") || f.eq_ignore_ascii_case("nan")) {
            rejected += 1;
            continue;
        }
        for (f, name) in fields.iter().zip(required) {
            let v: f64 = f.parse().map_err(|_| CliError::Parse {
                line,
                msg: format!("column \"{name}\": cannot parse \"{f}\" as a number"),
            })?;
            if !v.is_finite() {
                return Err(CliError::Parse {
                    line,
                    msg: format!("column \"{name}\": non-finite value"),
                });
            }
            values.push(v);
        }
        rows += 1;
    }
    if rejected > 0 {
        log::warn!("{}: rejected {rejected} row(s) with missing required fields", path.display());
    }
    Ok(NumericTable {
        columns: required.to_vec(),
        data: DMatrix::from_row_slice(rows, required.len(), &values),
        rejected,
    })
}

/// Design column names including the intercept when configured.
pub fn design_names(cfg: &RunConfig) -> Vec<String> {
    let mut names = Vec::with_capacity(cfg.predictors.len() + 1);
    if cfg.intercept {
        names.push(INTERCEPT.to_string());
    }
    names.extend(cfg.predictors.iter().cloned());
    names
}

fn design(cfg: &RunConfig, t: &NumericTable) -> DMatrix<f64> {
    let pred = t.select(&cfg.predictors);
    let off = usize::from(cfg.intercept);
    DMatrix::from_fn(t.nrows(), pred.ncols() + off, |i, j| {
        if j < off {
            1.0
        } else {
            pred[(i, j - off)]
        }
    })
}

/// Load the training dataset described by the config.
pub fn load_dataset(cfg: &RunConfig) -> CliResult<Dataset> {
    cfg.require_columns()?;
    let path = cfg.input_path()?;
    let mut required = cfg.coords.clone();
    required.extend(cfg.outcomes.iter().cloned());
    required.extend(cfg.predictors.iter().cloned());
    let t = read_numeric(path, &required)?;
    if t.nrows() == 0 {
        return Err(CliError::Data(format!("{}: no complete rows", path.display())));
    }
    let locs = LocationSet::new(t.select(&cfg.coords))?;
    let d = Dataset::new(t.select(&cfg.outcomes), design(cfg, &t), locs)?;
    d.check_rank()?;
    Ok(d)
}

/// Load prediction locations and their design rows.
pub fn load_prediction_points(cfg: &RunConfig, path: &Path) -> CliResult<(LocationSet, DMatrix<f64>)> {
    let mut required = cfg.coords.clone();
    required.extend(cfg.predictors.iter().cloned());
    let t = read_numeric(path, &required).map_err(|e| match e {
        CliError::Parse { msg, .. } if msg.contains("missing column") => CliError::SchemaMismatch(msg),
        other => other,
    })?;
    let locs = LocationSet::new(t.select(&cfg.coords))?;
    Ok((locs, design(cfg, &t)))
}

/// First line of every CSV output.
pub fn provenance_line(hash: &str, seed: u64) -> String {
    format!("# dbps config_hash={hash} seed={seed}\n")
}

/// Write a CSV with a provenance comment line, header and numeric rows.
pub fn write_csv(path: &Path, hash: &str, seed: u64, header: &[String], rows: &[Vec<f64>]) -> CliResult<()> {
    let mut buf = provenance_line(hash, seed).into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(header).map_err(|e| CliError::Data(e.to_string()))?;
        for r in rows {
            w.write_record(r.iter().map(|v| format!("{v}")))
                .map_err(|e| CliError::Data(e.to_string()))?;
        }
        w.flush().map_err(|e| CliError::Data(e.to_string()))?;
    }
    let mut f = fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    f.write_all(&buf).map_err(|e| CliError::io(path, e))?;
    Ok(())
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Data(e.to_string()))? + "\n";
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}
