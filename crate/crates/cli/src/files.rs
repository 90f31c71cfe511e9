//! Reading inputs and writing result tables and manifests.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use nalgebra::DMatrix;
use serde::Serialize;
use sha2::{Digest, Sha256};

use projkit::reference::io::{format_f64, read_matrix_csv, INTERCEPT_COLUMN};
use projkit::{Error, ProjectedSubmodel, SelectionPath};

/// Provenance record written next to every command's outputs.
#[derive(Debug, Serialize)]
pub struct Manifest<C: Serialize> {
    pub command: &'static str,
    pub tool_version: &'static str,
    pub seed: u64,
    pub config: C,
    pub inputs: Vec<InputDigest>,
}

#[derive(Debug, Serialize)]
pub struct InputDigest {
    pub name: String,
    pub path: String,
    pub sha256: String,
}

pub fn digest(name: &str, path: &Path) -> Result<InputDigest> {
    let bytes = fs::read(path).map_err(Error::from).with_context(|| format!("reading {}", path.display()))?;
    Ok(InputDigest { name: name.to_string(), path: path.display().to_string(), sha256: sha256_hex(&bytes) })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn write_manifest<C: Serialize>(dir: &Path, manifest: &Manifest<C>) -> Result<()> {
    write_json(&dir.join("manifest.json"), manifest)
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(Error::from).with_context(|| format!("writing {}", path.display()))
}

pub fn create_dir(dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(Error::from).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir.to_path_buf())
}

pub fn read_features(path: &Path) -> Result<(Vec<String>, DMatrix<f64>)> {
    read_matrix_csv(path).with_context(|| format!("reading features from {}", path.display()))
}

pub fn read_response(path: &Path) -> Result<Vec<f64>> {
    let (header, m) = read_matrix_csv(path).with_context(|| format!("reading responses from {}", path.display()))?;
    if header.len() != 1 {
        return Err(Error::Parse(format!("{}: expected one column, found {}", path.display(), header.len())).into());
    }
    Ok(m.column(0).iter().copied().collect())
}

pub fn check_rows(x: &DMatrix<f64>, y: &[f64]) -> Result<()> {
    if x.nrows() != y.len() {
        return Err(Error::DimensionMismatch(format!("{} feature rows but {} responses", x.nrows(), y.len())).into());
    }
    Ok(())
}

fn writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(Error::from).with_context(|| format!("writing {}", path.display()))
}

/// Long-format coefficients: one line per size, cluster and term.
pub fn write_coefficients<'a>(
    path: &Path,
    names: &[String],
    submodels: impl IntoIterator<Item = &'a ProjectedSubmodel>,
) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["k", "cluster", "weight", "dispersion", "term", "coef"])?;
    for sub in submodels {
        for c in 0..sub.n_clusters() {
            let disp = sub.dispersions.as_ref().map_or(String::new(), |d| format_f64(d[c]));
            for t in 0..sub.coeffs.ncols() {
                let term = if t == 0 { INTERCEPT_COLUMN } else { names[sub.feature_set[t - 1]].as_str() };
                w.write_record([
                    sub.size().to_string(),
                    c.to_string(),
                    format_f64(sub.weights[c]),
                    disp.clone(),
                    term.to_string(),
                    format_f64(sub.coeffs[(c, t)]),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// `k, feature, loss`: the feature added at each step of the path.
pub fn write_path(path: &Path, names: &[String], sel: &SelectionPath) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["k", "feature", "loss"])?;
    for (k, loss) in sel.losses.iter().enumerate() {
        let feature = if k == 0 { String::new() } else { names[sel.order[k - 1]].clone() };
        w.write_record([k.to_string(), feature, format_f64(*loss)])?;
    }
    w.flush()?;
    Ok(())
}

/// Feature ordering stored by [`write_path`].
pub fn read_path_order(path: &Path) -> Result<Vec<String>> {
    let mut r =
        csv::Reader::from_path(path).map_err(Error::from).with_context(|| format!("reading {}", path.display()))?;
    let mut order = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(Error::from)?;
        let feature = rec.get(1).ok_or_else(|| Error::Parse(format!("{}: missing feature column", path.display())))?;
        if !feature.is_empty() {
            order.push(feature.to_string());
        }
    }
    Ok(order)
}

pub fn write_table(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_matrix(path: &Path, header: &[String], m: &DMatrix<f64>) -> Result<()> {
    projkit::reference::io::write_matrix_csv(path, header, m).with_context(|| format!("writing {}", path.display()))
}
