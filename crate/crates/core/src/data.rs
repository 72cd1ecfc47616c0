//! Hierarchical dataset: clusters of units, each carrying a sample
//! covariance, a sample count and two covariate vectors.

use std::collections::HashSet;

use nalgebra::{DMatrix, DVector};

use crate::error::{IssueKind, McapError, Result, Site, ValidationIssue};
use crate::linalg::{min_eigenvalue, symmetrize};

const SYMMETRY_TOL: f64 = 1e-12;
const PSD_TOL: f64 = 1e-10;
const RIDGE_TRIGGER: f64 = 1e-10;
const RIDGE_SIZE: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct UnitData {
    pub cluster_id: usize,
    pub unit_id: usize,
    observations: Option<DMatrix<f64>>,
    sample_cov: DMatrix<f64>,
    t: usize,
    pub x1: DVector<f64>,
    pub x2: DVector<f64>,
}

impl UnitData {
    /// Unit built from raw samples (rows are time points).
    pub fn from_observations(
        cluster_id: usize,
        unit_id: usize,
        observations: DMatrix<f64>,
        x1: DVector<f64>,
        x2: DVector<f64>,
        center: bool,
    ) -> Result<Self> {
        let sample_cov = compute_sample_cov(&observations, center).map_err(|e| match e {
            McapError::Input(msg) => McapError::Input(format!("{}: {msg}", Site::unit(cluster_id, unit_id))),
            other => other,
        })?;
        Ok(Self {
            cluster_id,
            unit_id,
            t: observations.nrows(),
            observations: Some(observations),
            sample_cov,
            x1,
            x2,
        })
    }

    /// Unit built from a precomputed covariance and its sample count.
    pub fn from_covariance(
        cluster_id: usize,
        unit_id: usize,
        sample_cov: DMatrix<f64>,
        t: usize,
        x1: DVector<f64>,
        x2: DVector<f64>,
    ) -> Self {
        Self {
            cluster_id,
            unit_id,
            observations: None,
            sample_cov,
            t,
            x1,
            x2,
        }
    }

    pub fn observations(&self) -> Option<&DMatrix<f64>> {
        self.observations.as_ref()
    }

    pub fn sample_cov(&self) -> &DMatrix<f64> {
        &self.sample_cov
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn p(&self) -> usize {
        self.sample_cov.nrows()
    }

    /// Same unit with a replaced covariance; raw samples are replaced as well
    /// when given, otherwise dropped.
    pub fn with_data(&self, sample_cov: DMatrix<f64>, observations: Option<DMatrix<f64>>) -> Self {
        Self {
            cluster_id: self.cluster_id,
            unit_id: self.unit_id,
            observations,
            sample_cov,
            t: self.t,
            x1: self.x1.clone(),
            x2: self.x2.clone(),
        }
    }

    fn site(&self) -> Site {
        Site::unit(self.cluster_id, self.unit_id)
    }
}

#[derive(Debug, Clone)]
pub struct Cluster {
    pub id: usize,
    pub units: Vec<UnitData>,
}

impl Cluster {
    pub fn total_t(&self) -> usize {
        self.units.iter().map(UnitData::t).sum()
    }
}

/// Validated, immutable dataset.
#[derive(Debug, Clone)]
pub struct HierarchicalDataset {
    clusters: Vec<Cluster>,
    p: usize,
    q1: usize,
    q2: usize,
    total_obs: usize,
}

impl HierarchicalDataset {
    /// Validate and freeze a list of clusters. Every violation is reported.
    pub fn new(clusters: Vec<Cluster>) -> Result<Self> {
        let issues = validate_clusters(&clusters);
        if !issues.is_empty() {
            return Err(McapError::Validation(issues));
        }
        let first = &clusters[0].units[0];
        let (p, q1, q2) = (first.p(), first.x1.len(), first.x2.len());
        let total_obs = clusters.iter().map(Cluster::total_t).sum();
        Ok(Self {
            clusters,
            p,
            q1,
            q2,
            total_obs,
        })
    }

    pub fn clusters(&self) -> &[Cluster] {
        &self.clusters
    }

    pub fn m(&self) -> usize {
        self.clusters.len()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn q1(&self) -> usize {
        self.q1
    }

    pub fn q2(&self) -> usize {
        self.q2
    }

    /// M_n, the total number of samples.
    pub fn total_obs(&self) -> usize {
        self.total_obs
    }

    pub fn n_units(&self) -> usize {
        self.clusters.iter().map(|c| c.units.len()).sum()
    }

    pub fn min_t(&self) -> usize {
        self.units().map(UnitData::t).min().unwrap_or(0)
    }

    pub fn min_n(&self) -> usize {
        self.clusters.iter().map(|c| c.units.len()).min().unwrap_or(0)
    }

    pub fn units(&self) -> impl Iterator<Item = &UnitData> {
        self.clusters.iter().flat_map(|c| c.units.iter())
    }

    pub fn has_observations(&self) -> bool {
        self.units().all(|u| u.observations.is_some())
    }

    /// Rebuild with per-unit replacement data (same nesting and covariates).
    pub fn map_units<F>(&self, mut f: F) -> Result<Self>
    where
        F: FnMut(usize, &UnitData) -> Result<UnitData>,
    {
        let mut clusters = Vec::with_capacity(self.clusters.len());
        for (i, c) in self.clusters.iter().enumerate() {
            let units = c.units.iter().map(|u| f(i, u)).collect::<Result<Vec<_>>>()?;
            clusters.push(Cluster { id: c.id, units });
        }
        Self::new(clusters)
    }
}

fn check_cov(u: &UnitData, p: usize, issues: &mut Vec<ValidationIssue>) {
    let site = Some(u.site());
    let s = &u.sample_cov;
    if s.nrows() != p || s.ncols() != p {
        issues.push(ValidationIssue {
            site,
            kind: IssueKind::DimensionMismatch {
                what: "sample covariance",
                expected: p,
                found: if s.nrows() != p { s.nrows() } else { s.ncols() },
            },
        });
        return;
    }
    if s.iter().any(|v| !v.is_finite()) {
        issues.push(ValidationIssue {
            site,
            kind: IssueKind::NonFiniteCovariance,
        });
        return;
    }
    let scale = s.amax().max(f64::MIN_POSITIVE);
    let asym = (s - s.transpose()).amax() / scale;
    if asym > SYMMETRY_TOL {
        issues.push(ValidationIssue {
            site,
            kind: IssueKind::AsymmetricCovariance { max_rel_asymmetry: asym },
        });
        return;
    }
    let lo = min_eigenvalue(s);
    if lo < -PSD_TOL * s.norm() {
        issues.push(ValidationIssue {
            site,
            kind: IssueKind::NotPositiveSemidefinite { min_eigenvalue: lo },
        });
    }
}

/// Collect every violated invariant.
pub fn validate_clusters(clusters: &[Cluster]) -> Vec<ValidationIssue> {
    let mut issues = Vec::new();
    if clusters.is_empty() {
        issues.push(ValidationIssue {
            site: None,
            kind: IssueKind::NoClusters,
        });
        return issues;
    }
    let reference = clusters.iter().flat_map(|c| c.units.first()).next();
    let (p, q1, q2) = match reference {
        Some(u) => (u.p(), u.x1.len(), u.x2.len()),
        None => (0, 0, 0),
    };
    if reference.is_some() && p < 2 {
        issues.push(ValidationIssue {
            site: None,
            kind: IssueKind::DimensionTooSmall { p },
        });
    }
    let mut seen = HashSet::new();
    for c in clusters {
        if c.units.is_empty() {
            issues.push(ValidationIssue {
                site: Some(Site::cluster(c.id)),
                kind: IssueKind::EmptyCluster,
            });
        }
        for u in &c.units {
            let site = Some(u.site());
            if !seen.insert((u.cluster_id, u.unit_id)) {
                issues.push(ValidationIssue {
                    site,
                    kind: IssueKind::DuplicateUnit,
                });
            }
            if u.t == 0 {
                issues.push(ValidationIssue {
                    site,
                    kind: IssueKind::ZeroSamples,
                });
            }
            for (what, found, expected) in [("x1", u.x1.len(), q1), ("x2", u.x2.len(), q2)] {
                if found != expected {
                    issues.push(ValidationIssue {
                        site,
                        kind: IssueKind::DimensionMismatch { what, expected, found },
                    });
                }
            }
            if u.x1.iter().chain(u.x2.iter()).any(|v| !v.is_finite()) {
                issues.push(ValidationIssue {
                    site,
                    kind: IssueKind::NonFiniteCovariate,
                });
            }
            if let Some(y) = &u.observations {
                if y.ncols() != p {
                    issues.push(ValidationIssue {
                        site,
                        kind: IssueKind::DimensionMismatch {
                            what: "observations",
                            expected: p,
                            found: y.ncols(),
                        },
                    });
                }
            }
            check_cov(u, p, &mut issues);
        }
    }
    issues
}

/// `(1/T) YᵀY`, optionally after removing column means. Exactly symmetric.
pub fn compute_sample_cov(observations: &DMatrix<f64>, center: bool) -> Result<DMatrix<f64>> {
    let t = observations.nrows();
    if t == 0 {
        return Err(McapError::Input("observation matrix has no rows".into()));
    }
    if observations.iter().any(|v| !v.is_finite()) {
        return Err(McapError::Input("non-finite observation".into()));
    }
    let cov = if center {
        let means = observations.row_mean();
        let mut centered = observations.clone();
        for mut row in centered.row_iter_mut() {
            row -= &means;
        }
        centered.tr_mul(&centered)
    } else {
        observations.tr_mul(observations)
    };
    Ok(symmetrize(&(cov / t as f64)))
}

#[derive(Debug, Clone)]
pub struct ClusterNormalizer {
    pub h: DMatrix<f64>,
    /// Ridge added by the repair step, zero when none was needed.
    pub ridge: f64,
}

pub fn cluster_normalizer(cluster: &Cluster) -> Result<ClusterNormalizer> {
    let p = cluster.units[0].p();
    let mut h = DMatrix::zeros(p, p);
    let mut total = 0.0;
    for u in &cluster.units {
        h += u.sample_cov() * u.t() as f64;
        total += u.t() as f64;
    }
    let mut h = symmetrize(&(h / total));
    let level = h.trace() / p as f64;
    if !(level > 0.0) || !level.is_finite() {
        return Err(McapError::DegenerateCluster {
            cluster_id: cluster.id,
            detail: "average sample covariance has zero trace".into(),
        });
    }
    let mut ridge = 0.0;
    if min_eigenvalue(&h) < RIDGE_TRIGGER * level {
        ridge = RIDGE_SIZE * level;
        for k in 0..p {
            h[(k, k)] += ridge;
        }
        if min_eigenvalue(&h) <= 0.0 {
            return Err(McapError::DegenerateCluster {
                cluster_id: cluster.id,
                detail: "average sample covariance is singular after ridge repair".into(),
            });
        }
    }
    Ok(ClusterNormalizer { h, ridge })
}

/// One `H_i` per cluster, weighted by sample counts.
pub fn compute_normalizers(dataset: &HierarchicalDataset) -> Result<Vec<ClusterNormalizer>> {
    dataset.clusters().iter().map(cluster_normalizer).collect()
}
