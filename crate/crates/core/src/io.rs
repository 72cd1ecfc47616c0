//! Reading and writing datasets and fitted parameters.
//!
//! Observations: long CSV `cluster_id,unit_id,t,v1..vp`. Covariates: CSV
//! `cluster_id,unit_id,x1_1..x1_q1,x2_1..x2_q2`. Precomputed covariances: a
//! JSON manifest of `{cluster_id, unit_id, t, path}` entries, one headerless
//! p×p CSV per unit. Lines starting with `#` are ignored everywhere.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{Cluster, HierarchicalDataset, UnitData};
use crate::error::{McapError, Result};
use crate::likelihood::{McapParams, RegressionParams};
use crate::special::VmfParams;

type Covariates = BTreeMap<(usize, usize), (DVector<f64>, DVector<f64>)>;

/// One non-comment, non-blank line split on commas, with its 1-based line number.
struct Row {
    line: u64,
    fields: Vec<String>,
}

fn read_rows(path: &Path) -> Result<Vec<Row>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| McapError::Input(format!("cannot read {}: {e}", path.display())))?;
    Ok(text
        .lines()
        .enumerate()
        .filter(|(_, l)| {
            let t = l.trim();
            !t.is_empty() && !t.starts_with('#')
        })
        .map(|(k, l)| Row {
            line: k as u64 + 1,
            fields: l.split(',').map(|f| f.trim().to_owned()).collect(),
        })
        .collect())
}

fn parse_error(path: &Path, line: u64, detail: impl Into<String>) -> McapError {
    McapError::Parse {
        file: path.display().to_string(),
        line,
        detail: detail.into(),
    }
}

fn field<T: std::str::FromStr>(path: &Path, r: &Row, k: usize, name: &str) -> Result<T> {
    let raw = r.fields.get(k).ok_or_else(|| parse_error(path, r.line, format!("missing column {name}")))?;
    raw.parse()
        .map_err(|_| parse_error(path, r.line, format!("cannot parse {name} value {raw:?}")))
}

fn float(path: &Path, r: &Row, k: usize, name: &str) -> Result<f64> {
    let v: f64 = field(path, r, k, name)?;
    if !v.is_finite() {
        return Err(parse_error(path, r.line, format!("non-finite {name}")));
    }
    Ok(v)
}

fn split_header(path: &Path, mut rows: Vec<Row>) -> Result<(Vec<String>, Vec<Row>)> {
    if rows.is_empty() {
        return Err(parse_error(path, 1, "file is empty"));
    }
    let header = rows.remove(0).fields;
    Ok((header, rows))
}

fn check_width(path: &Path, r: &Row, width: usize) -> Result<()> {
    if r.fields.len() != width {
        return Err(parse_error(path, r.line, format!("expected {width} fields, found {}", r.fields.len())));
    }
    Ok(())
}

/// Covariates keyed by (cluster_id, unit_id), plus (q1, q2).
pub fn read_covariates(path: &Path) -> Result<(Covariates, usize, usize)> {
    let (header, rows) = split_header(path, read_rows(path)?)?;
    if header.len() < 2 || header[0] != "cluster_id" || header[1] != "unit_id" {
        return Err(parse_error(path, 1, "header must start with cluster_id,unit_id"));
    }
    let q1 = header.iter().filter(|h| h.starts_with("x1_")).count();
    let q2 = header.iter().filter(|h| h.starts_with("x2_")).count();
    let ok_order = header[2..].iter().enumerate().all(|(k, h)| {
        if k < q1 {
            *h == format!("x1_{}", k + 1)
        } else {
            *h == format!("x2_{}", k - q1 + 1)
        }
    });
    if !ok_order || header.len() != 2 + q1 + q2 {
        return Err(parse_error(path, 1, "covariate columns must be x1_1..x1_q1 followed by x2_1..x2_q2"));
    }
    let mut out = Covariates::new();
    for r in rows {
        check_width(path, &r, header.len())?;
        let key = (field(path, &r, 0, "cluster_id")?, field(path, &r, 1, "unit_id")?);
        let x1 = (0..q1).map(|k| float(path, &r, 2 + k, &header[2 + k])).collect::<Result<Vec<_>>>()?;
        let x2 = (0..q2).map(|k| float(path, &r, 2 + q1 + k, &header[2 + q1 + k])).collect::<Result<Vec<_>>>()?;
        if out.insert(key, (DVector::from_vec(x1), DVector::from_vec(x2))).is_some() {
            return Err(parse_error(path, r.line, format!("duplicate unit ({}, {})", key.0, key.1)));
        }
    }
    Ok((out, q1, q2))
}

fn covariates_for(covariates: &Covariates, key: (usize, usize), path: &Path) -> Result<(DVector<f64>, DVector<f64>)> {
    covariates.get(&key).cloned().ok_or_else(|| {
        McapError::Input(format!(
            "{}: no covariates for (cluster {}, unit {})",
            path.display(),
            key.0,
            key.1
        ))
    })
}

fn assemble(units: BTreeMap<(usize, usize), UnitData>) -> Result<HierarchicalDataset> {
    let mut clusters: BTreeMap<usize, Vec<UnitData>> = BTreeMap::new();
    for ((c, _), u) in units {
        clusters.entry(c).or_default().push(u);
    }
    HierarchicalDataset::new(clusters.into_iter().map(|(id, units)| Cluster { id, units }).collect())
}

/// Dataset from long-format observations and a covariate table.
pub fn read_observations(obs_path: &Path, covariates_path: &Path, center: bool) -> Result<HierarchicalDataset> {
    let (covariates, _, _) = read_covariates(covariates_path)?;
    let (header, body) = split_header(obs_path, read_rows(obs_path)?)?;
    let p = header.len().saturating_sub(3);
    let expected: Vec<String> = ["cluster_id", "unit_id", "t"]
        .iter()
        .map(|s| s.to_string())
        .chain((1..=p).map(|k| format!("v{k}")))
        .collect();
    if p == 0 || header != expected {
        return Err(parse_error(obs_path, 1, "header must be cluster_id,unit_id,t,v1..vp"));
    }
    let mut rows: BTreeMap<(usize, usize), BTreeMap<usize, (Vec<f64>, u64)>> = BTreeMap::new();
    for r in body {
        let line = r.line;
        check_width(obs_path, &r, 3 + p)?;
        let key = (field(obs_path, &r, 0, "cluster_id")?, field(obs_path, &r, 1, "unit_id")?);
        let t: usize = field(obs_path, &r, 2, "t")?;
        let v = (0..p).map(|k| float(obs_path, &r, 3 + k, &expected[3 + k])).collect::<Result<Vec<_>>>()?;
        if rows.entry(key).or_default().insert(t, (v, line)).is_some() {
            return Err(parse_error(obs_path, line, format!("duplicate time point {t}")));
        }
    }
    let mut units = BTreeMap::new();
    for (key, series) in rows {
        let (x1, x2) = covariates_for(&covariates, key, covariates_path)?;
        let y = DMatrix::from_row_iterator(series.len(), p, series.values().flat_map(|(v, _)| v.iter().copied()));
        units.insert(key, UnitData::from_observations(key.0, key.1, y, x1, x2, center)?);
    }
    assemble(units)
}

/// Headerless numeric matrix.
pub fn read_matrix_csv(path: &Path) -> Result<DMatrix<f64>> {
    let rows = read_rows(path)?;
    let ncols = rows.first().map_or(0, |r| r.fields.len());
    let mut data = Vec::with_capacity(rows.len() * ncols);
    for r in &rows {
        check_width(path, r, ncols)?;
        for k in 0..ncols {
            data.push(float(path, r, k, "entry")?);
        }
    }
    Ok(DMatrix::from_row_slice(rows.len(), ncols, &data))
}

pub fn write_matrix_csv<W: Write>(mut out: W, m: &DMatrix<f64>) -> Result<()> {
    for r in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|c| format!("{:?}", m[(r, c)])).collect();
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub cluster_id: usize,
    pub unit_id: usize,
    #[serde(alias = "T")]
    pub t: usize,
    /// Relative paths resolve against the manifest's directory.
    pub path: PathBuf,
}

/// Dataset from precomputed covariance matrices listed in a manifest.
pub fn read_covariance_manifest(manifest_path: &Path, covariates_path: &Path) -> Result<HierarchicalDataset> {
    let (covariates, _, _) = read_covariates(covariates_path)?;
    let file = File::open(manifest_path)?;
    let entries: Vec<ManifestEntry> = serde_json::from_reader(BufReader::new(file))
        .map_err(|e| parse_error(manifest_path, e.line() as u64, e.to_string()))?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut units = BTreeMap::new();
    for e in entries {
        let key = (e.cluster_id, e.unit_id);
        let path = if e.path.is_absolute() { e.path.clone() } else { base.join(&e.path) };
        let s = read_matrix_csv(&path)?;
        let (x1, x2) = covariates_for(&covariates, key, covariates_path)?;
        if units.insert(key, UnitData::from_covariance(key.0, key.1, s, e.t, x1, x2)).is_some() {
            return Err(McapError::Input(format!(
                "{}: duplicate unit (cluster {}, unit {})",
                manifest_path.display(),
                key.0,
                key.1
            )));
        }
    }
    assemble(units)
}

pub fn write_covariates<W: Write>(mut out: W, dataset: &HierarchicalDataset) -> Result<()> {
    let mut header = vec!["cluster_id".to_string(), "unit_id".to_string()];
    header.extend((1..=dataset.q1()).map(|k| format!("x1_{k}")));
    header.extend((1..=dataset.q2()).map(|k| format!("x2_{k}")));
    writeln!(out, "{}", header.join(","))?;
    for u in dataset.units() {
        let mut row = vec![u.cluster_id.to_string(), u.unit_id.to_string()];
        row.extend(u.x1.iter().chain(u.x2.iter()).map(|v| format!("{v:?}")));
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

/// Long-format observations; every unit must carry raw samples.
pub fn write_observations<W: Write>(mut out: W, dataset: &HierarchicalDataset) -> Result<()> {
    let header: Vec<String> = ["cluster_id", "unit_id", "t"]
        .iter()
        .map(|s| s.to_string())
        .chain((1..=dataset.p()).map(|k| format!("v{k}")))
        .collect();
    writeln!(out, "{}", header.join(","))?;
    for u in dataset.units() {
        let y = u
            .observations()
            .ok_or_else(|| McapError::Input(format!("unit ({}, {}) has no raw observations", u.cluster_id, u.unit_id)))?;
        for t in 0..y.nrows() {
            let mut row = vec![u.cluster_id.to_string(), u.unit_id.to_string(), t.to_string()];
            row.extend(y.row(t).iter().map(|v| format!("{v:?}")));
            writeln!(out, "{}", row.join(","))?;
        }
    }
    Ok(())
}

/// Write `covariates.csv`, `manifest.json` and one `cov_<c>_<u>.csv` per unit.
pub fn write_covariance_dataset(dir: &Path, dataset: &HierarchicalDataset) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_covariates(File::create(dir.join("covariates.csv"))?, dataset)?;
    let mut entries = Vec::new();
    for u in dataset.units() {
        let name = format!("cov_{}_{}.csv", u.cluster_id, u.unit_id);
        write_matrix_csv(File::create(dir.join(&name))?, u.sample_cov())?;
        entries.push(ManifestEntry {
            cluster_id: u.cluster_id,
            unit_id: u.unit_id,
            t: u.t(),
            path: PathBuf::from(name),
        });
    }
    let mut f = File::create(dir.join("manifest.json"))?;
    serde_json::to_writer_pretty(&mut f, &entries)?;
    writeln!(f)?;
    Ok(())
}

/// Serialized form of the fitted parameters. Directions are stored under one
/// global sign flip chosen so that the largest-magnitude coordinate of the
/// mean direction is positive; flipping every direction together leaves the
/// likelihood unchanged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsRecord {
    pub gammas: Vec<Vec<f64>>,
    pub beta0i: Vec<f64>,
    pub beta1: Vec<f64>,
    pub beta2i: Vec<Vec<f64>>,
    pub beta0: f64,
    pub sigma2: f64,
    pub beta2: Vec<f64>,
    /// Row-major.
    pub omega: Vec<Vec<f64>>,
    pub mean_direction: Vec<f64>,
    pub kappa: f64,
}

fn to_vec(v: &DVector<f64>) -> Vec<f64> {
    v.iter().copied().collect()
}

impl ParamsRecord {
    pub fn from_params(params: &McapParams) -> Self {
        let mean = params.vmf.mean_direction();
        let mut best = 0;
        for k in 1..mean.len() {
            if mean[k].abs() > mean[best].abs() {
                best = k;
            }
        }
        let sign = if mean[best] < 0.0 { -1.0 } else { 1.0 };
        let reg = &params.regression;
        Self {
            gammas: params.gammas.iter().map(|g| to_vec(&(g * sign))).collect(),
            beta0i: reg.beta0i.clone(),
            beta1: to_vec(&reg.beta1),
            beta2i: reg.beta2i.iter().map(to_vec).collect(),
            beta0: reg.beta0,
            sigma2: reg.sigma2,
            beta2: to_vec(&reg.beta2),
            omega: reg.omega.row_iter().map(|r| r.iter().copied().collect()).collect(),
            mean_direction: to_vec(&(mean * sign)),
            kappa: params.vmf.concentration(),
        }
    }

    pub fn to_params(&self) -> Result<McapParams> {
        let q2 = self.beta2.len();
        if self.omega.len() != q2 || self.omega.iter().any(|r| r.len() != q2) {
            return Err(McapError::Input("omega must be q2 x q2".into()));
        }
        let omega = DMatrix::from_row_iterator(q2, q2, self.omega.iter().flatten().copied());
        Ok(McapParams {
            gammas: self.gammas.iter().map(|g| DVector::from_column_slice(g)).collect(),
            regression: RegressionParams {
                beta0i: self.beta0i.clone(),
                beta1: DVector::from_column_slice(&self.beta1),
                beta2i: self.beta2i.iter().map(|b| DVector::from_column_slice(b)).collect(),
                beta0: self.beta0,
                sigma2: self.sigma2,
                beta2: DVector::from_column_slice(&self.beta2),
                omega,
            },
            vmf: VmfParams::new(DVector::from_column_slice(&self.mean_direction), self.kappa)?,
        })
    }
}
