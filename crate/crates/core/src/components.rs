//! Higher-order components by deflation and rank completion, and the
//! deviation-from-diagonality criterion used to choose how many to keep.

use nalgebra::{DMatrix, DVector};

use crate::data::{compute_sample_cov, HierarchicalDataset};
use crate::error::{McapError, Result, Site};
use crate::estimator::{fit, FitConfig, FitResult};
use crate::linalg::{chol_logdet, orthogonalize_against, orthonormal_columns, symmetrize};

#[derive(Debug, Clone)]
pub struct ComponentSet {
    /// Per-cluster p×K matrices, columns in extraction order.
    pub projections: Vec<DMatrix<f64>>,
    pub fits: Vec<FitResult>,
    /// DfD(k) for the retained components.
    pub dfd_values: Vec<f64>,
    /// DfD(k) for every extracted component, including ones dropped by selection.
    pub dfd_trace: Vec<f64>,
}

impl ComponentSet {
    pub fn empty(m: usize, p: usize) -> Self {
        Self {
            projections: vec![DMatrix::zeros(p, 0); m],
            fits: Vec::new(),
            dfd_values: Vec::new(),
            dfd_trace: Vec::new(),
        }
    }

    pub fn k(&self) -> usize {
        self.fits.len()
    }

    fn truncate(&mut self, k: usize) {
        for g in &mut self.projections {
            *g = g.columns(0, k).into_owned();
        }
        self.fits.truncate(k);
        self.dfd_values.truncate(k);
    }
}

/// Orthonormalise previously extracted directions in extraction order.
fn orthonormal_gamma(gamma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let q = orthonormal_columns(gamma);
    if q.ncols() != gamma.ncols() {
        return Err(McapError::Numeric("extracted directions are linearly dependent".into()));
    }
    Ok(q)
}

fn check_orthonormal(gamma: &DMatrix<f64>) -> Result<()> {
    let k = gamma.ncols();
    let gram = gamma.transpose() * gamma;
    if (gram - DMatrix::identity(k, k)).amax() > 1e-8 {
        return Err(McapError::Domain("projection columns are not orthonormal".into()));
    }
    Ok(())
}

/// Remove the span of `gamma` from Y and put back `sqrt(exp(β0i^(l)) T)` along
/// each removed direction, using fresh left singular vectors orthogonal to the
/// deflated column space. When T is too small to hold every injected value the
/// trailing ones are dropped, as in a thin decomposition.
pub fn deflate_unit(y: &DMatrix<f64>, gamma: &DMatrix<f64>, intercepts: &[f64], t: usize) -> Result<DMatrix<f64>> {
    if gamma.ncols() == 0 {
        return Ok(y.clone());
    }
    if intercepts.len() != gamma.ncols() || gamma.nrows() != y.ncols() {
        return Err(McapError::Domain("deflation inputs have mismatched shapes".into()));
    }
    check_orthonormal(gamma)?;
    let deflated = y - y * gamma * gamma.transpose();
    let range = orthonormal_columns(&deflated);
    let mut basis: Vec<DVector<f64>> = (0..range.ncols()).map(|c| range.column(c).into_owned()).collect();
    let rows = y.nrows();
    let mut out = deflated;
    let mut next_axis = 0;
    for (l, b0) in intercepts.iter().enumerate() {
        let mut u = None;
        while next_axis < rows && u.is_none() {
            let e = DVector::from_fn(rows, |r, _| if r == next_axis { 1.0 } else { 0.0 });
            u = orthogonalize_against(&e, &basis);
            next_axis += 1;
        }
        let Some(u) = u else { break };
        let d = (b0.exp() * t as f64).sqrt();
        out += &u * gamma.column(l).transpose() * d;
        basis.push(u);
    }
    Ok(out)
}

/// Covariance-level form of [`deflate_unit`]:
/// `P S P + Σ_l exp(β0i^(l)) γ_l γ_lᵀ` with `P = I − ΓΓᵀ`.
pub fn deflate_covariance(s: &DMatrix<f64>, gamma: &DMatrix<f64>, intercepts: &[f64]) -> Result<DMatrix<f64>> {
    if gamma.ncols() == 0 {
        return Ok(s.clone());
    }
    if intercepts.len() != gamma.ncols() || gamma.nrows() != s.nrows() {
        return Err(McapError::Domain("deflation inputs have mismatched shapes".into()));
    }
    check_orthonormal(gamma)?;
    let p = s.nrows();
    let proj = DMatrix::identity(p, p) - gamma * gamma.transpose();
    let mut out = &proj * s * &proj;
    for (l, b0) in intercepts.iter().enumerate() {
        let g = gamma.column(l);
        out += g * g.transpose() * b0.exp();
    }
    Ok(symmetrize(&out))
}

/// Deflated and completed dataset for the next component.
pub fn deflated_dataset(dataset: &HierarchicalDataset, previous: &ComponentSet) -> Result<HierarchicalDataset> {
    if previous.k() == 0 {
        return Ok(dataset.clone());
    }
    let gammas = previous.projections.iter().map(orthonormal_gamma).collect::<Result<Vec<_>>>()?;
    let intercepts: Vec<Vec<f64>> = (0..dataset.m())
        .map(|i| previous.fits.iter().map(|f| f.params.regression.beta0i[i]).collect())
        .collect();
    dataset.map_units(|i, u| {
        let s = deflate_covariance(u.sample_cov(), &gammas[i], &intercepts[i])?;
        let obs = match u.observations() {
            Some(y) if u.t() >= u.p() => Some(deflate_unit(y, &gammas[i], &intercepts[i], u.t())?),
            _ => None,
        };
        Ok(u.with_data(s, obs))
    })
}

/// Extract the next component and append it to `previous`.
pub fn fit_component(dataset: &HierarchicalDataset, previous: &ComponentSet, config: &FitConfig) -> Result<ComponentSet> {
    let base = if config.centering && dataset.has_observations() {
        dataset.map_units(|_, u| {
            let y = u.observations().expect("observations present");
            Ok(u.with_data(compute_sample_cov(y, true)?, Some(y.clone())))
        })?
    } else {
        dataset.clone()
    };
    let input = deflated_dataset(&base, previous)?;
    // Covariances are already in their final form.
    let plain = FitConfig {
        centering: false,
        ..config.clone()
    };
    let result = fit(&input, &plain)?;
    let mut next = previous.clone();
    for (g, gi) in next.projections.iter_mut().zip(&result.params.gammas) {
        let k = g.ncols();
        let mut wider = g.clone().resize_horizontally(k + 1, 0.0);
        wider.set_column(k, gi);
        *g = wider;
    }
    next.fits.push(result);
    let value = dfd(&base, &next.projections)?;
    next.dfd_values.push(value);
    next.dfd_trace.push(value);
    Ok(next)
}

/// Weighted geometric mean over units of `det(diag(ΓᵀSΓ)) / det(ΓᵀSΓ)`.
///
/// Factors are multiplied directly while every ratio is representable, so
/// exact inputs give exact outputs; otherwise the log-space sum is used.
pub fn dfd(dataset: &HierarchicalDataset, projections: &[DMatrix<f64>]) -> Result<f64> {
    if projections.len() != dataset.m() {
        return Err(McapError::Domain("one projection matrix per cluster is required".into()));
    }
    let k = projections[0].ncols();
    if k == 0 || projections.iter().any(|g| g.ncols() != k || g.nrows() != dataset.p()) {
        return Err(McapError::Domain("projection matrices must be p×K with K ≥ 1".into()));
    }
    let total = dataset.total_obs() as f64;
    let mut acc = 0.0;
    let mut direct = 1.0;
    for (cluster, g) in dataset.clusters().iter().zip(projections) {
        for u in &cluster.units {
            let site = Site::unit(u.cluster_id, u.unit_id);
            let m = symmetrize(&(g.transpose() * u.sample_cov() * g));
            let rank_err = || McapError::RankDeficient {
                site,
                detail: "projected covariance is not positive definite".into(),
            };
            let logdet = chol_logdet(&m).ok_or_else(rank_err)?;
            let mut logdiag = 0.0;
            for a in 0..k {
                if !(m[(a, a)] > 0.0) {
                    return Err(rank_err());
                }
                logdiag += m[(a, a)].ln();
            }
            let factor = logdiag - logdet;
            if factor < -1e-10 * logdiag.abs().max(1.0) {
                return Err(McapError::Numeric(format!("{site}: diagonality ratio below one")));
            }
            let w = u.t() as f64 / total;
            acc += w * factor.max(0.0);
            let diag: f64 = (0..k).map(|a| m[(a, a)]).product();
            direct *= (diag / m.determinant()).max(1.0).powf(w);
        }
    }
    if direct.is_finite() && direct > 0.0 {
        Ok(direct)
    } else {
        Ok(acc.exp())
    }
}

/// Extract up to `k_max` components and keep the largest K with DfD(K) below
/// `threshold`.
pub fn select_k(dataset: &HierarchicalDataset, config: &FitConfig, k_max: usize, threshold: f64) -> Result<ComponentSet> {
    if k_max < 1 {
        return Err(McapError::Input("k_max must be at least 1".into()));
    }
    if !(threshold > 1.0) {
        return Err(McapError::Input("DfD threshold must exceed 1".into()));
    }
    let mut set = ComponentSet::empty(dataset.m(), dataset.p());
    for k in 0..k_max.min(dataset.p()) {
        match fit_component(dataset, &set, config) {
            Ok(next) => set = next,
            Err(McapError::RankDeficient { site, detail }) if k > 0 => {
                log::warn!("component {} is degenerate at {site} ({detail}); extraction stopped", k + 1);
                // A singular projected covariance has an unbounded determinant ratio.
                set.dfd_trace.push(f64::INFINITY);
                break;
            }
            Err(e) => return Err(e),
        }
    }
    let keep = set.dfd_trace.iter().rposition(|&d| d < threshold).map_or(1, |k| k + 1);
    set.truncate(keep);
    Ok(set)
}
