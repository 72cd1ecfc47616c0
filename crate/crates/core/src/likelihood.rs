//! Negative hierarchical log-likelihood and its block derivatives.
//!
//! The regression blocks only see the data through the projected variances
//! `s_ij = γ_iᵀ S_ij γ_i`, so most evaluations run on a compact
//! [`ProjectedData`] table rather than on the full covariance matrices.

use nalgebra::{DMatrix, DVector};

use crate::data::{Cluster, HierarchicalDataset};
use crate::error::{McapError, Result, Site};
use crate::linalg::{chol_logdet, quad_form, spd_inverse, symmetrize};
use crate::special::{log_cp, VmfParams};

pub const MU_CLAMP: f64 = 700.0;

/// Everything in the linear mixed model for the log projected variance.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionParams {
    pub beta0i: Vec<f64>,
    pub beta1: DVector<f64>,
    pub beta2i: Vec<DVector<f64>>,
    pub beta0: f64,
    pub sigma2: f64,
    pub beta2: DVector<f64>,
    pub omega: DMatrix<f64>,
}

impl RegressionParams {
    pub fn m(&self) -> usize {
        self.beta0i.len()
    }

    pub fn q1(&self) -> usize {
        self.beta1.len()
    }

    pub fn q2(&self) -> usize {
        self.beta2.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct McapParams {
    pub gammas: Vec<DVector<f64>>,
    pub regression: RegressionParams,
    pub vmf: VmfParams,
}

impl McapParams {
    /// Check shapes against the dataset and the parameter invariants.
    pub fn check(&self, dataset: &HierarchicalDataset) -> Result<()> {
        let (m, p, q1, q2) = (dataset.m(), dataset.p(), dataset.q1(), dataset.q2());
        let r = &self.regression;
        let bad = |what: &str| Err(McapError::Domain(format!("parameter shape mismatch: {what}")));
        if self.gammas.len() != m || r.beta0i.len() != m || r.beta2i.len() != m {
            return bad("per-cluster parameter count differs from the number of clusters");
        }
        if r.beta1.len() != q1 || r.beta2.len() != q2 || r.omega.nrows() != q2 || r.omega.ncols() != q2 {
            return bad("covariate dimensions");
        }
        if r.beta2i.iter().any(|b| b.len() != q2) {
            return bad("random slope length");
        }
        if self.vmf.dim() != p || self.gammas.iter().any(|g| g.len() != p) {
            return bad("direction length");
        }
        if self.gammas.iter().any(|g| (g.norm() - 1.0).abs() > 1e-10) {
            return Err(McapError::Domain("cluster directions must have unit norm".into()));
        }
        if !(r.sigma2 > 0.0) {
            return Err(McapError::Domain("σ² must be positive".into()));
        }
        OmegaFactor::new(&r.omega)?;
        Ok(())
    }
}

/// Cholesky-based inverse and log-determinant of Ω.
#[derive(Debug, Clone)]
pub struct OmegaFactor {
    pub inv: DMatrix<f64>,
    pub logdet: f64,
}

impl OmegaFactor {
    pub fn new(omega: &DMatrix<f64>) -> Result<Self> {
        if omega.nrows() == 0 {
            return Ok(Self {
                inv: DMatrix::zeros(0, 0),
                logdet: 0.0,
            });
        }
        let logdet = chol_logdet(omega).ok_or_else(|| McapError::Numeric("Ω is not positive definite".into()))?;
        let inv = spd_inverse(omega).ok_or_else(|| McapError::Numeric("Ω is not positive definite".into()))?;
        Ok(Self {
            inv: symmetrize(&inv),
            logdet,
        })
    }
}

/// `e^{-μ}` with μ clamped to ±700; the flag reports clamping.
#[inline]
pub fn exp_neg_mu(mu: f64) -> (f64, bool) {
    if mu > MU_CLAMP {
        ((-MU_CLAMP).exp(), true)
    } else if mu < -MU_CLAMP {
        (MU_CLAMP.exp(), true)
    } else {
        ((-mu).exp(), false)
    }
}

/// `γᵀSγ`, erroring on clearly negative values.
pub fn projected_variance(s: &DMatrix<f64>, gamma: &DVector<f64>, site: Site) -> Result<f64> {
    let v = quad_form(s, gamma);
    if v < -1e-12 * s.trace().abs().max(1.0) || !v.is_finite() {
        return Err(McapError::RankDeficient {
            site,
            detail: format!("projected variance γᵀSγ = {v:e} is negative or non-finite"),
        });
    }
    Ok(v.max(0.0))
}

/// Per-unit sample counts, projected variances and covariates, stored
/// contiguously by cluster.
#[derive(Debug, Clone)]
pub struct ProjectedData {
    q1: usize,
    q2: usize,
    t: Vec<f64>,
    s: Vec<f64>,
    x1: Vec<f64>,
    x2: Vec<f64>,
    offsets: Vec<usize>,
}

impl ProjectedData {
    pub fn new(dataset: &HierarchicalDataset, gammas: &[DVector<f64>]) -> Result<Self> {
        let (q1, q2) = (dataset.q1(), dataset.q2());
        let n = dataset.n_units();
        let mut out = Self {
            q1,
            q2,
            t: Vec::with_capacity(n),
            s: Vec::with_capacity(n),
            x1: Vec::with_capacity(n * q1),
            x2: Vec::with_capacity(n * q2),
            offsets: vec![0],
        };
        for (c, g) in dataset.clusters().iter().zip(gammas) {
            for u in &c.units {
                out.t.push(u.t() as f64);
                out.s.push(projected_variance(u.sample_cov(), g, Site::unit(u.cluster_id, u.unit_id))?);
                out.x1.extend(u.x1.iter());
                out.x2.extend(u.x2.iter());
            }
            out.offsets.push(out.t.len());
        }
        Ok(out)
    }

    /// Build directly from per-cluster unit tuples `(T, s, x1, x2)`.
    pub fn from_units(q1: usize, q2: usize, clusters: &[Vec<(f64, f64, Vec<f64>, Vec<f64>)>]) -> Self {
        let mut out = Self {
            q1,
            q2,
            t: Vec::new(),
            s: Vec::new(),
            x1: Vec::new(),
            x2: Vec::new(),
            offsets: vec![0],
        };
        for c in clusters {
            for (t, s, x1, x2) in c {
                out.t.push(*t);
                out.s.push(*s);
                out.x1.extend(x1);
                out.x2.extend(x2);
            }
            out.offsets.push(out.t.len());
        }
        out
    }

    /// Recompute the projected variances of cluster `i` for a new direction.
    pub fn set_cluster_direction(&mut self, i: usize, cluster: &Cluster, gamma: &DVector<f64>) -> Result<()> {
        let range = self.range(i);
        for (k, u) in range.zip(&cluster.units) {
            self.s[k] = projected_variance(u.sample_cov(), gamma, Site::unit(u.cluster_id, u.unit_id))?;
        }
        Ok(())
    }

    /// Cluster-then-unit resample: each entry names a source cluster and the
    /// within-cluster unit positions to take from it.
    pub fn resample(&self, draws: &[(usize, Vec<usize>)]) -> Self {
        let mut out = Self {
            q1: self.q1,
            q2: self.q2,
            t: Vec::new(),
            s: Vec::new(),
            x1: Vec::new(),
            x2: Vec::new(),
            offsets: vec![0],
        };
        for (i, units) in draws {
            let start = self.offsets[*i];
            for &j in units {
                let k = start + j;
                out.t.push(self.t[k]);
                out.s.push(self.s[k]);
                out.x1.extend_from_slice(self.x1(k));
                out.x2.extend_from_slice(self.x2(k));
            }
            out.offsets.push(out.t.len());
        }
        out
    }

    pub fn m(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn q1(&self) -> usize {
        self.q1
    }

    pub fn q2(&self) -> usize {
        self.q2
    }

    pub fn n_units(&self) -> usize {
        self.t.len()
    }

    pub fn cluster_size(&self, i: usize) -> usize {
        self.offsets[i + 1] - self.offsets[i]
    }

    pub fn range(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    pub fn t(&self, k: usize) -> f64 {
        self.t[k]
    }

    pub fn s(&self, k: usize) -> f64 {
        self.s[k]
    }

    pub fn set_s(&mut self, k: usize, v: f64) {
        self.s[k] = v;
    }

    pub fn x1(&self, k: usize) -> &[f64] {
        &self.x1[k * self.q1..(k + 1) * self.q1]
    }

    pub fn x2(&self, k: usize) -> &[f64] {
        &self.x2[k * self.q2..(k + 1) * self.q2]
    }

    /// Fixed part of μ for unit k: x1ᵀβ1 + x2ᵀβ2i (everything but the intercept).
    #[inline]
    pub fn offset(&self, reg: &RegressionParams, i: usize, k: usize) -> f64 {
        let a: f64 = self.x1(k).iter().zip(reg.beta1.iter()).map(|(x, b)| x * b).sum();
        let b: f64 = self.x2(k).iter().zip(reg.beta2i[i].iter()).map(|(x, b)| x * b).sum();
        a + b
    }

    #[inline]
    pub fn mu(&self, reg: &RegressionParams, i: usize, k: usize) -> f64 {
        reg.beta0i[i] + self.offset(reg, i, k)
    }

    /// Number of units whose linear predictor lies outside the clamp range.
    pub fn clamp_events(&self, reg: &RegressionParams) -> usize {
        (0..self.m())
            .flat_map(|i| self.range(i).map(move |k| (i, k)))
            .filter(|&(i, k)| exp_neg_mu(self.mu(reg, i, k)).1)
            .count()
    }
}

/// `Σ_j (T/2)(μ + s e^{-μ})` for cluster i.
pub fn conditional_cluster(data: &ProjectedData, reg: &RegressionParams, i: usize) -> f64 {
    data.range(i)
        .map(|k| {
            let mu = data.mu(reg, i, k);
            0.5 * data.t(k) * (mu + data.s(k) * exp_neg_mu(mu).0)
        })
        .sum()
}

pub fn intercept_prior_cluster(reg: &RegressionParams, i: usize) -> f64 {
    let d = reg.beta0i[i] - reg.beta0;
    0.5 * reg.sigma2.ln() + d * d / (2.0 * reg.sigma2)
}

pub fn slope_prior_cluster(reg: &RegressionParams, omega: &OmegaFactor, i: usize) -> f64 {
    if reg.q2() == 0 {
        return 0.0;
    }
    let d = &reg.beta2i[i] - &reg.beta2;
    0.5 * omega.logdet + 0.5 * quad_form(&omega.inv, &d)
}

pub fn vmf_cluster(gamma_i: &DVector<f64>, vmf: &VmfParams, log_cp_value: f64) -> f64 {
    -log_cp_value - vmf.concentration() * vmf.mean_direction().dot(gamma_i)
}

/// Separately accumulated parts of the objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveParts {
    pub conditional: f64,
    pub intercept_prior: f64,
    pub slope_prior: f64,
    pub vmf: f64,
}

impl ObjectiveParts {
    pub fn total(&self) -> f64 {
        self.conditional + self.intercept_prior + self.slope_prior + self.vmf
    }

    fn check(self) -> Result<Self> {
        for (term, v) in [
            ("conditional likelihood", self.conditional),
            ("random-intercept prior", self.intercept_prior),
            ("random-slope prior", self.slope_prior),
            ("direction prior", self.vmf),
        ] {
            if !v.is_finite() {
                return Err(McapError::Overflow { term });
            }
        }
        Ok(self)
    }
}

/// Regression parts only (conditional likelihood and the two priors).
pub fn regression_parts(data: &ProjectedData, reg: &RegressionParams) -> Result<(f64, f64, f64)> {
    let omega = OmegaFactor::new(&reg.omega)?;
    let mut cond = 0.0;
    let mut ip = 0.0;
    let mut sp = 0.0;
    for i in 0..data.m() {
        cond += conditional_cluster(data, reg, i);
        ip += intercept_prior_cluster(reg, i);
        sp += slope_prior_cluster(reg, &omega, i);
    }
    Ok((cond, ip, sp))
}

pub fn vmf_part(gammas: &[DVector<f64>], vmf: &VmfParams) -> Result<f64> {
    let lc = log_cp(vmf.dim(), vmf.concentration())?;
    Ok(gammas.iter().map(|g| vmf_cluster(g, vmf, lc)).sum())
}

pub fn objective_parts(data: &ProjectedData, params: &McapParams) -> Result<ObjectiveParts> {
    let (conditional, intercept_prior, slope_prior) = regression_parts(data, &params.regression)?;
    ObjectiveParts {
        conditional,
        intercept_prior,
        slope_prior,
        vmf: vmf_part(&params.gammas, &params.vmf)?,
    }
    .check()
}

/// Negative hierarchical log-likelihood (additive constants dropped).
pub fn neg_hlik(params: &McapParams, dataset: &HierarchicalDataset) -> Result<f64> {
    params.check(dataset)?;
    let data = ProjectedData::new(dataset, &params.gammas)?;
    Ok(objective_parts(&data, params)?.total())
}

/// Gradient and Hessian of the objective in β0i.
pub fn beta0i_derivatives(data: &ProjectedData, reg: &RegressionParams, i: usize) -> (f64, f64) {
    let mut g = (reg.beta0i[i] - reg.beta0) / reg.sigma2;
    let mut h = 1.0 / reg.sigma2;
    for k in data.range(i) {
        let r = data.s(k) * exp_neg_mu(data.mu(reg, i, k)).0;
        g += 0.5 * data.t(k) * (1.0 - r);
        h += 0.5 * data.t(k) * r;
    }
    (g, h)
}

/// Gradient and Hessian in β1 (all clusters).
pub fn beta1_derivatives(data: &ProjectedData, reg: &RegressionParams) -> (DVector<f64>, DMatrix<f64>) {
    let q1 = data.q1();
    let mut g = DVector::zeros(q1);
    let mut h = DMatrix::zeros(q1, q1);
    for i in 0..data.m() {
        for k in data.range(i) {
            let r = data.s(k) * exp_neg_mu(data.mu(reg, i, k)).0;
            let x = DVector::from_column_slice(data.x1(k));
            let half_t = 0.5 * data.t(k);
            g.axpy(half_t * (1.0 - r), &x, 1.0);
            h.ger(half_t * r, &x, &x, 1.0);
        }
    }
    (g, h)
}

/// Gradient and Hessian in β2i.
pub fn beta2i_derivatives(
    data: &ProjectedData,
    reg: &RegressionParams,
    omega: &OmegaFactor,
    i: usize,
) -> (DVector<f64>, DMatrix<f64>) {
    let d = &reg.beta2i[i] - &reg.beta2;
    let mut g = &omega.inv * d;
    let mut h = omega.inv.clone();
    for k in data.range(i) {
        let r = data.s(k) * exp_neg_mu(data.mu(reg, i, k)).0;
        let x = DVector::from_column_slice(data.x2(k));
        let half_t = 0.5 * data.t(k);
        g.axpy(half_t * (1.0 - r), &x, 1.0);
        h.ger(half_t * r, &x, &x, 1.0);
    }
    (g, h)
}

/// `A_i = Σ_j (T_ij/2) e^{-μ_ij} S_ij`.
pub fn direction_quadratic_cluster(
    cluster: &Cluster,
    data: &ProjectedData,
    reg: &RegressionParams,
    i: usize,
) -> DMatrix<f64> {
    let p = cluster.units[0].p();
    let mut a = DMatrix::zeros(p, p);
    for (k, u) in data.range(i).zip(&cluster.units) {
        let w = 0.5 * data.t(k) * exp_neg_mu(data.mu(reg, i, k)).0;
        a += u.sample_cov() * w;
    }
    symmetrize(&a)
}

fn projected(params: &McapParams, dataset: &HierarchicalDataset) -> Result<ProjectedData> {
    params.check(dataset)?;
    ProjectedData::new(dataset, &params.gammas)
}

fn cluster_index(dataset: &HierarchicalDataset, i: usize) -> Result<()> {
    if i >= dataset.m() {
        return Err(McapError::Domain(format!("cluster index {i} out of range")));
    }
    Ok(())
}

pub fn grad_beta0i(params: &McapParams, dataset: &HierarchicalDataset, i: usize) -> Result<f64> {
    cluster_index(dataset, i)?;
    Ok(beta0i_derivatives(&projected(params, dataset)?, &params.regression, i).0)
}

pub fn hess_beta0i(params: &McapParams, dataset: &HierarchicalDataset, i: usize) -> Result<f64> {
    cluster_index(dataset, i)?;
    Ok(beta0i_derivatives(&projected(params, dataset)?, &params.regression, i).1)
}

pub fn grad_beta1(params: &McapParams, dataset: &HierarchicalDataset) -> Result<DVector<f64>> {
    Ok(beta1_derivatives(&projected(params, dataset)?, &params.regression).0)
}

pub fn hess_beta1(params: &McapParams, dataset: &HierarchicalDataset) -> Result<DMatrix<f64>> {
    Ok(beta1_derivatives(&projected(params, dataset)?, &params.regression).1)
}

pub fn grad_beta2i(params: &McapParams, dataset: &HierarchicalDataset, i: usize) -> Result<DVector<f64>> {
    cluster_index(dataset, i)?;
    let omega = OmegaFactor::new(&params.regression.omega)?;
    Ok(beta2i_derivatives(&projected(params, dataset)?, &params.regression, &omega, i).0)
}

pub fn hess_beta2i(params: &McapParams, dataset: &HierarchicalDataset, i: usize) -> Result<DMatrix<f64>> {
    cluster_index(dataset, i)?;
    let omega = OmegaFactor::new(&params.regression.omega)?;
    Ok(beta2i_derivatives(&projected(params, dataset)?, &params.regression, &omega, i).1)
}

pub fn direction_quadratic(params: &McapParams, dataset: &HierarchicalDataset, i: usize) -> Result<DMatrix<f64>> {
    cluster_index(dataset, i)?;
    let data = projected(params, dataset)?;
    Ok(direction_quadratic_cluster(&dataset.clusters()[i], &data, &params.regression, i))
}
