//! File formats: CSV matrices with a header row and NDJSON posterior draws,
//! one `{"beta": [...], "sigma": ...}` object per line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{ReferenceKind, ReferenceModel};
use crate::error::{Error, Result};
use crate::glm::{DesignMatrix, Family};
use crate::projection::PosteriorDraws;

/// Header name marking an all-ones intercept column.
pub const INTERCEPT_COLUMN: &str = "_intercept";

/// Shortest representation that parses back to the same value.
pub fn format_f64(v: f64) -> String {
    let s = format!("{v:?}");
    s.strip_suffix(".0").map(str::to_string).unwrap_or(s)
}

/// Reads a numeric CSV with a header row.
pub fn read_matrix_csv(path: &Path) -> Result<(Vec<String>, DMatrix<f64>)> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let mut values = Vec::new();
    let mut rows = 0;
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != header.len() {
            return Err(Error::Parse(format!(
                "{}: row {} has {} fields, header has {}",
                path.display(),
                r + 2,
                record.len(),
                header.len()
            )));
        }
        for (c, field) in record.iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::Parse(format!(
                    "{}: row {} column '{}': not a number: '{field}'",
                    path.display(),
                    r + 2,
                    header[c]
                ))
            })?;
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("{}: row {} column '{}'", path.display(), r + 2, header[c])));
            }
            values.push(v);
        }
        rows += 1;
    }
    let m = DMatrix::from_row_slice(rows, header.len(), &values);
    Ok((header, m))
}

pub fn write_matrix_csv(path: &Path, header: &[String], m: &DMatrix<f64>) -> Result<()> {
    if header.len() != m.ncols() {
        return Err(Error::DimensionMismatch(format!("{} names for {} columns", header.len(), m.ncols())));
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for i in 0..m.nrows() {
        w.write_record((0..m.ncols()).map(|j| format_f64(m[(i, j)])))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a reference design; a first column named `_intercept` marks an
/// intercept (and must hold ones).
pub fn read_design_csv(path: &Path) -> Result<(Vec<String>, DesignMatrix)> {
    let (header, m) = read_matrix_csv(path)?;
    let intercept = header.first().map(String::as_str) == Some(INTERCEPT_COLUMN);
    Ok((header, DesignMatrix::new(m, intercept)?))
}

pub fn write_design_csv(path: &Path, design: &DesignMatrix) -> Result<()> {
    let offset = usize::from(design.has_intercept());
    let header: Vec<String> = (0..design.ncols())
        .map(|j| if j < offset { INTERCEPT_COLUMN.to_string() } else { format!("z{}", j + 1 - offset) })
        .collect();
    write_matrix_csv(path, &header, design.values())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DrawRecord {
    beta: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sigma: Option<f64>,
}

pub fn write_draws_ndjson(path: &Path, draws: &PosteriorDraws) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let betas = draws.betas();
    for s in 0..draws.n_draws() {
        let rec = DrawRecord { beta: betas.row(s).iter().copied().collect(), sigma: draws.sigmas().map(|v| v[s]) };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Parses NDJSON draws; returns `(betas S x q, sigmas)`.
pub fn read_draws_ndjson(path: &Path, family: Family) -> Result<(DMatrix<f64>, Option<Vec<f64>>)> {
    let reader = BufReader::new(File::open(path)?);
    let mut values = Vec::new();
    let mut sigmas = Vec::new();
    let mut q = None;
    let mut rows = 0;
    for (l, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = l + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DrawRecord =
            serde_json::from_str(&line).map_err(|e| Error::Parse(format!("{}: line {lineno}: {e}", path.display())))?;
        match q {
            None => q = Some(rec.beta.len()),
            Some(q) if q != rec.beta.len() => {
                return Err(Error::DimensionMismatch(format!(
                    "{}: line {lineno}: {} coefficients, expected {q}",
                    path.display(),
                    rec.beta.len()
                )))
            }
            _ => {}
        }
        if rec.beta.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{}: line {lineno}: beta", path.display())));
        }
        match (family.has_dispersion(), rec.sigma) {
            (true, None) => return Err(Error::Parse(format!("{}: line {lineno}: missing \"sigma\"", path.display()))),
            (false, Some(_)) => {
                return Err(Error::Parse(format!(
                    "{}: line {lineno}: \"sigma\" given for the {} family",
                    path.display(),
                    family.name()
                )))
            }
            (true, Some(s)) => sigmas.push(s),
            (false, None) => {}
        }
        values.extend(rec.beta);
        rows += 1;
    }
    let q = q.ok_or_else(|| Error::Parse(format!("{}: no draws", path.display())))?;
    let betas = DMatrix::from_row_slice(rows, q, &values);
    Ok((betas, family.has_dispersion().then_some(sigmas)))
}

/// Wraps draws produced elsewhere as a reference model.
pub fn ingest_draws(design_path: &Path, draws_path: &Path, family: Family) -> Result<ReferenceModel> {
    let (_, design) = read_design_csv(design_path)?;
    let (betas, sigmas) = read_draws_ndjson(draws_path, family)?;
    let draws = PosteriorDraws::new(betas, sigmas, design)?;
    draws.check_family(family)?;
    Ok(ReferenceModel { family, draws, kind: ReferenceKind::Ingested })
}

/// Writes `design.csv` and `draws.ndjson` into `dir`.
pub fn export_reference(model: &ReferenceModel, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_design_csv(&dir.join("design.csv"), model.draws.design())?;
    write_draws_ndjson(&dir.join("draws.ndjson"), &model.draws)
}
