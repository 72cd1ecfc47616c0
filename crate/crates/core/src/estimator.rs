//! Block coordinate descent for the multilevel model with multiple starts.

use nalgebra::{Cholesky, DMatrix, DVector};
use rayon::prelude::*;

use crate::data::{cluster_normalizer, compute_normalizers, compute_sample_cov, Cluster, ClusterNormalizer, HierarchicalDataset, UnitData};
use crate::error::{McapError, Result, Site};
use crate::likelihood::{
    beta0i_derivatives, beta1_derivatives, beta2i_derivatives, conditional_cluster, direction_quadratic_cluster,
    exp_neg_mu, objective_parts, projected_variance, regression_parts, slope_prior_cluster,
    vmf_cluster, vmf_part, McapParams, OmegaFactor, ProjectedData, RegressionParams,
};
use crate::linalg::{canonical_sign, orthogonalize_against, inv_sqrt_spd, min_eigenvalue, quad_form, solve_psd, sym_eigen, symmetrize};
use crate::rng::{stream, unit_vector, TAG_START};
use crate::special::{estimate_vmf, log_cp, VmfFitStatus, VmfParams};

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub max_iters: usize,
    pub rel_tol: f64,
    pub n_starts: usize,
    pub newton_max_halvings: usize,
    pub seed: u64,
    /// Ridge for Ω and floor for σ².
    pub omega_ridge: f64,
    /// Subtract per-unit means before forming sample covariances.
    pub centering: bool,
    /// Solve the fixed effects jointly with the random effects they are
    /// confounded with (Schur complement step) instead of a plain block step.
    pub profile_fixed_effects: bool,
    /// Use the exact likelihood equation for κ instead of the closed form.
    pub exact_kappa: bool,
    /// Tie the cluster directions together with the vMF term. When off, κ is
    /// held at zero (single-level fits).
    pub vmf_prior: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            max_iters: 500,
            rel_tol: 1e-10,
            n_starts: 10,
            newton_max_halvings: 30,
            seed: 0,
            omega_ridge: 1e-8,
            centering: false,
            profile_fixed_effects: true,
            exact_kappa: false,
            vmf_prior: true,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters < 1 {
            return Err(McapError::Input("max_iters must be at least 1".into()));
        }
        if !(self.rel_tol > 0.0) {
            return Err(McapError::Input("rel_tol must be positive".into()));
        }
        if self.n_starts < 1 {
            return Err(McapError::Input("n_starts must be at least 1".into()));
        }
        if !(self.omega_ridge > 0.0) {
            return Err(McapError::Input("omega_ridge must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct StartSummary {
    pub index: usize,
    pub objective: Option<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub trace: Vec<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: McapParams,
    pub objective: f64,
    pub objective_trace: Vec<f64>,
    pub start_index: usize,
    pub converged: bool,
    pub iterations: usize,
    pub clamp_count: usize,
    pub starts: Vec<StartSummary>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    Beta0i(usize),
    Beta1,
    Beta2i(usize),
}

impl std::fmt::Display for Block {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Block::Beta0i(i) => write!(f, "beta0i[{i}]"),
            Block::Beta1 => write!(f, "beta1"),
            Block::Beta2i(i) => write!(f, "beta2i[{i}]"),
        }
    }
}

fn non_finite(block: Block) -> McapError {
    McapError::Block {
        block: block.to_string(),
        detail: "non-finite gradient or Hessian".into(),
    }
}

/// `Σ_j (T/2)(μ + s e^{-μ})` for cluster i with intercept `b` and the given offsets.
fn cluster_conditional_at(data: &ProjectedData, i: usize, offsets: &[f64], b: f64) -> f64 {
    data.range(i)
        .zip(offsets)
        .map(|(k, o)| {
            let mu = b + o;
            0.5 * data.t(k) * (mu + data.s(k) * exp_neg_mu(mu).0)
        })
        .sum()
}

fn offsets(data: &ProjectedData, reg: &RegressionParams, i: usize) -> Vec<f64> {
    data.range(i).map(|k| data.offset(reg, i, k)).collect()
}

/// Damped Newton step on β0i. With `with_prior = false` the random-intercept
/// prior is left out (used when β0 is profiled exactly, m = 1).
fn step_beta0i(data: &ProjectedData, reg: &mut RegressionParams, i: usize, halvings: usize, with_prior: bool) -> Result<bool> {
    let (mut g, mut h) = beta0i_derivatives(data, reg, i);
    if !with_prior {
        g -= (reg.beta0i[i] - reg.beta0) / reg.sigma2;
        h -= 1.0 / reg.sigma2;
    }
    if !g.is_finite() || !h.is_finite() {
        return Err(non_finite(Block::Beta0i(i)));
    }
    if g == 0.0 || !(h > 0.0) {
        return Ok(false);
    }
    let offs = offsets(data, reg, i);
    let (beta0, sigma2) = (reg.beta0, reg.sigma2);
    let f = |b: f64| {
        let prior = if with_prior { (b - beta0).powi(2) / (2.0 * sigma2) } else { 0.0 };
        cluster_conditional_at(data, i, &offs, b) + prior
    };
    let b0 = reg.beta0i[i];
    let f0 = f(b0);
    let mut step = -g / h;
    for _ in 0..=halvings {
        let trial = b0 + step;
        if trial != b0 && f(trial) <= f0 {
            reg.beta0i[i] = trial;
            return Ok(true);
        }
        step *= 0.5;
    }
    Ok(false)
}

fn conditional_total(data: &ProjectedData, reg: &RegressionParams) -> f64 {
    (0..data.m()).map(|i| conditional_cluster(data, reg, i)).sum()
}

/// Plain damped Newton step on β1.
fn step_beta1(data: &ProjectedData, reg: &mut RegressionParams, halvings: usize) -> Result<bool> {
    if reg.q1() == 0 {
        return Ok(false);
    }
    let (g, h) = beta1_derivatives(data, reg);
    if g.iter().chain(h.iter()).any(|v| !v.is_finite()) {
        return Err(non_finite(Block::Beta1));
    }
    if g.iter().all(|&v| v == 0.0) {
        return Ok(false);
    }
    let (dir, _) = solve_psd(&h, &g);
    let f0 = conditional_total(data, reg);
    let start = reg.beta1.clone();
    let mut t = 1.0;
    for _ in 0..=halvings {
        reg.beta1 = &start - &dir * t;
        if reg.beta1 != start && conditional_total(data, reg) <= f0 {
            return Ok(true);
        }
        t *= 0.5;
    }
    reg.beta1 = start;
    Ok(false)
}

/// Move β0 with every β0i, and β2 with every β2i, by a common amount. The
/// prior terms are unchanged, so this step stays effective when σ² or Ω is
/// tiny and the per-cluster steps can barely move away from the means.
fn step_shift(data: &ProjectedData, reg: &mut RegressionParams, halvings: usize) -> Result<bool> {
    let q2 = reg.q2();
    let mut g = DVector::zeros(1 + q2);
    let mut h = DMatrix::zeros(1 + q2, 1 + q2);
    for i in 0..data.m() {
        for k in data.range(i) {
            let r = data.s(k) * exp_neg_mu(data.mu(reg, i, k)).0;
            let mut z = DVector::zeros(1 + q2);
            z[0] = 1.0;
            z.rows_mut(1, q2).copy_from_slice(data.x2(k));
            let half_t = 0.5 * data.t(k);
            g.axpy(half_t * (1.0 - r), &z, 1.0);
            h.ger(half_t * r, &z, &z, 1.0);
        }
    }
    if g.iter().chain(h.iter()).any(|v| !v.is_finite()) {
        return Err(non_finite(Block::Beta1));
    }
    if g.iter().all(|&v| v == 0.0) {
        return Ok(false);
    }
    let (dir, _) = solve_psd(&h, &g);
    let f0 = regression_total(data, reg, true)?;
    let start = reg.clone();
    let mut t = 1.0;
    for _ in 0..=halvings {
        let d0 = -t * dir[0];
        let d2 = -(dir.rows(1, q2) * t);
        reg.beta0 = start.beta0 + d0;
        reg.beta2 = &start.beta2 + &d2;
        for i in 0..reg.m() {
            reg.beta0i[i] = start.beta0i[i] + d0;
            reg.beta2i[i] = &start.beta2i[i] + &d2;
        }
        if *reg != start && regression_total(data, reg, true)? <= f0 {
            return Ok(true);
        }
        t *= 0.5;
    }
    *reg = start;
    Ok(false)
}

fn step_beta2i(
    data: &ProjectedData,
    reg: &mut RegressionParams,
    omega: &OmegaFactor,
    i: usize,
    halvings: usize,
    with_prior: bool,
) -> Result<bool> {
    if reg.q2() == 0 {
        return Ok(false);
    }
    let (mut g, mut h) = beta2i_derivatives(data, reg, omega, i);
    if !with_prior {
        g -= &omega.inv * (&reg.beta2i[i] - &reg.beta2);
        h -= &omega.inv;
    }
    if g.iter().chain(h.iter()).any(|v| !v.is_finite()) {
        return Err(non_finite(Block::Beta2i(i)));
    }
    if g.iter().all(|&v| v == 0.0) {
        return Ok(false);
    }
    let (dir, _) = solve_psd(&h, &g);
    let local = |reg: &RegressionParams| {
        let prior = if with_prior { slope_prior_cluster(reg, omega, i) } else { 0.0 };
        conditional_cluster(data, reg, i) + prior
    };
    let f0 = local(reg);
    let start = reg.beta2i[i].clone();
    let mut t = 1.0;
    for _ in 0..=halvings {
        reg.beta2i[i] = &start - &dir * t;
        if reg.beta2i[i] != start && local(reg) <= f0 {
            return Ok(true);
        }
        t *= 0.5;
    }
    reg.beta2i[i] = start;
    Ok(false)
}

fn regression_total(data: &ProjectedData, reg: &RegressionParams, with_prior: bool) -> Result<f64> {
    let (c, ip, sp) = regression_parts(data, reg)?;
    Ok(if with_prior { c + ip + sp } else { c })
}

/// Newton step on (β1, {β0i, β2i}) jointly, solved through the Schur
/// complement in β1, then damped on the regression objective.
fn step_joint(data: &ProjectedData, reg: &mut RegressionParams, omega: &OmegaFactor, halvings: usize, with_prior: bool) -> Result<bool> {
    let (q1, q2) = (reg.q1(), reg.q2());
    let nb = 1 + q2;
    let prior_scale = if with_prior { 1.0 } else { 0.0 };
    let mut j = DMatrix::<f64>::zeros(q1, q1);
    let mut g1 = DVector::<f64>::zeros(q1);
    let mut rhs = DVector::<f64>::zeros(q1);
    let mut per_cluster = Vec::with_capacity(data.m());
    for i in 0..data.m() {
        let mut gb = DVector::<f64>::zeros(nb);
        let mut d = DMatrix::<f64>::zeros(nb, nb);
        let mut c = DMatrix::<f64>::zeros(q1, nb);
        let mut z = DVector::<f64>::zeros(nb);
        for k in data.range(i) {
            let r = data.s(k) * exp_neg_mu(data.mu(reg, i, k)).0;
            let w = 0.5 * data.t(k) * r;
            let gr = 0.5 * data.t(k) * (1.0 - r);
            z[0] = 1.0;
            for (a, &x) in data.x2(k).iter().enumerate() {
                z[a + 1] = x;
            }
            let x1 = DVector::from_column_slice(data.x1(k));
            gb.axpy(gr, &z, 1.0);
            d.ger(w, &z, &z, 1.0);
            c.ger(w, &x1, &z, 1.0);
            g1.axpy(gr, &x1, 1.0);
            j.ger(w, &x1, &x1, 1.0);
        }
        gb[0] += prior_scale * (reg.beta0i[i] - reg.beta0) / reg.sigma2;
        d[(0, 0)] += prior_scale / reg.sigma2;
        if q2 > 0 {
            let dev = &reg.beta2i[i] - &reg.beta2;
            let gs = &omega.inv * dev * prior_scale;
            for a in 0..q2 {
                gb[a + 1] += gs[a];
                for b in 0..q2 {
                    d[(a + 1, b + 1)] += prior_scale * omega.inv[(a, b)];
                }
            }
        }
        let chol = Cholesky::new(symmetrize(&d)).ok_or_else(|| McapError::Block {
            block: format!("cluster {i} random effects"),
            detail: "random-effect Hessian is not positive definite".into(),
        })?;
        let dinv_ct = chol.solve(&c.transpose());
        let dinv_g = chol.solve(&gb);
        j -= &c * &dinv_ct;
        rhs -= &c * &dinv_g;
        per_cluster.push((chol, c, gb));
    }
    rhs += &g1;
    if rhs.iter().chain(j.iter()).any(|v| !v.is_finite()) {
        return Err(non_finite(Block::Beta1));
    }
    let (db1, _) = solve_psd(&j, &rhs);
    let db1 = -db1;
    let steps: Vec<DVector<f64>> = per_cluster
        .iter()
        .map(|(chol, c, gb)| -chol.solve(&(gb + c.transpose() * &db1)))
        .collect();
    if db1.iter().chain(steps.iter().flat_map(|s| s.iter())).any(|v| !v.is_finite()) {
        return Err(non_finite(Block::Beta1));
    }
    if db1.iter().chain(steps.iter().flat_map(|s| s.iter())).all(|&v| v == 0.0) {
        return Ok(false);
    }
    let f0 = regression_total(data, reg, with_prior)?;
    let start = reg.clone();
    let mut t = 1.0;
    for _ in 0..=halvings {
        reg.beta1 = &start.beta1 + &db1 * t;
        for (i, s) in steps.iter().enumerate() {
            reg.beta0i[i] = start.beta0i[i] + s[0] * t;
            for a in 0..q2 {
                reg.beta2i[i][a] = start.beta2i[i][a] + s[a + 1] * t;
            }
        }
        if regression_total(data, reg, with_prior)? <= f0 {
            return Ok(true);
        }
        t *= 0.5;
    }
    *reg = start;
    Ok(false)
}

/// One damped Newton step on a single regression block of the full model.
pub fn newton_update_block(params: &McapParams, dataset: &HierarchicalDataset, block: Block, max_halvings: usize) -> Result<McapParams> {
    params.check(dataset)?;
    let data = ProjectedData::new(dataset, &params.gammas)?;
    let mut out = params.clone();
    let reg = &mut out.regression;
    match block {
        Block::Beta0i(i) if i < dataset.m() => {
            step_beta0i(&data, reg, i, max_halvings, true)?;
        }
        Block::Beta1 => {
            step_beta1(&data, reg, max_halvings)?;
        }
        Block::Beta2i(i) if i < dataset.m() => {
            let omega = OmegaFactor::new(&reg.omega)?;
            step_beta2i(&data, reg, &omega, i, max_halvings, true)?;
        }
        _ => return Err(McapError::Domain(format!("block {block} out of range"))),
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct HyperStatus {
    /// σ² hit its floor.
    pub sigma2_floored: bool,
    /// Ω needed the ridge.
    pub omega_ridged: bool,
    /// Single cluster: the hierarchy is degenerate.
    pub degenerate: bool,
}

/// Closed-form updates of (β0, σ²) and (β2, Ω).
pub fn update_hyperparams(reg: &mut RegressionParams, floor: f64) -> HyperStatus {
    let m = reg.m();
    let mf = m as f64;
    let mut status = HyperStatus {
        degenerate: m == 1,
        ..Default::default()
    };
    reg.beta0 = reg.beta0i.iter().sum::<f64>() / mf;
    let var = reg.beta0i.iter().map(|b| (b - reg.beta0).powi(2)).sum::<f64>() / mf;
    if m == 1 || var < floor {
        status.sigma2_floored = true;
        reg.sigma2 = floor;
    } else {
        reg.sigma2 = var;
    }
    let q2 = reg.q2();
    if q2 > 0 {
        let mut mean = DVector::zeros(q2);
        for b in &reg.beta2i {
            mean += b;
        }
        mean /= mf;
        let mut omega = DMatrix::zeros(q2, q2);
        for b in &reg.beta2i {
            let d = b - &mean;
            omega.ger(1.0 / mf, &d, &d, 1.0);
        }
        let mut omega = symmetrize(&omega);
        if m == 1 {
            omega = DMatrix::identity(q2, q2) * floor;
            status.omega_ridged = true;
        } else if min_eigenvalue(&omega) < floor {
            for a in 0..q2 {
                omega[(a, a)] += floor;
            }
            status.omega_ridged = true;
        }
        reg.beta2 = mean;
        reg.omega = omega;
    }
    if status.degenerate {
        log::debug!("single cluster: random-effect variances set to floor values");
    }
    status
}

/// Winner of the signed generalized-eigenvector search.
#[derive(Debug, Clone)]
pub struct DirectionCandidate {
    /// Working vector with `γ̃ᵀ H γ̃ = 1`.
    pub working: DVector<f64>,
    /// Euclidean-normalised direction.
    pub gamma: DVector<f64>,
    pub working_value: f64,
    /// Index of the winning eigenvector, or `p` for the stationary point.
    pub eigen_index: usize,
    pub generalized_eigenvalues: DVector<f64>,
}

fn first_nonzero_positive(v: &DVector<f64>) -> DVector<f64> {
    match v.iter().find(|x| **x != 0.0) {
        Some(&x) if x < 0.0 => -v,
        _ => v.clone(),
    }
}

/// Global minimiser of `zᵀΛz − κ cᵀz` over the unit sphere, `Λ` diagonal
/// ascending. Stationary points satisfy `z_k = κ c_k / (2(λ_k − ν))`; the
/// minimum has `ν ≤ λ_1`, found by bisection on the norm condition.
fn sphere_quadratic_minimum(vals: &DVector<f64>, c: &DVector<f64>, kappa: f64) -> Option<DVector<f64>> {
    let p = vals.len();
    let lam1 = vals[0];
    let scale = 0.5 * kappa * c.norm();
    if !(scale > 0.0) || !scale.is_finite() {
        return None;
    }
    let z_at = |nu: f64| DVector::from_fn(p, |k, _| 0.5 * kappa * c[k] / (vals[k] - nu));
    let tiny = 1e-14 * (lam1.abs() + scale);
    let near = z_at(lam1 - tiny);
    if near.iter().all(|v| v.is_finite()) && near.norm_squared() <= 1.0 {
        // Degenerate case: ν = λ_1 and the slack goes to the bottom eigenspace.
        let bottom: Vec<usize> = (0..p).filter(|&k| vals[k] - lam1 <= tiny).collect();
        let mut z = DVector::from_fn(p, |k, _| if bottom.contains(&k) { 0.0 } else { 0.5 * kappa * c[k] / (vals[k] - lam1) });
        let sign = if c[bottom[0]] < 0.0 { -1.0 } else { 1.0 };
        z[bottom[0]] = sign * (1.0 - z.norm_squared()).max(0.0).sqrt();
        return Some(z);
    }
    let (mut lo, mut hi) = (lam1 - scale, lam1);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if z_at(mid).norm_squared() > 1.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let z = z_at(lo);
    let norm = z.norm();
    (norm > 0.0 && norm.is_finite()).then(|| z / norm)
}

/// Minimise `ξᵀAξ − κ γᵀξ` over `ξᵀHξ = 1`. Candidates are the signed
/// generalized eigenvectors of (A, H) and, for κ > 0, the stationary point
/// that solves the constrained problem exactly.
pub fn direction_candidate(a: &DMatrix<f64>, h_inv_sqrt: &DMatrix<f64>, kappa: f64, mean: &DVector<f64>) -> Result<DirectionCandidate> {
    let m = symmetrize(&(h_inv_sqrt * a * h_inv_sqrt));
    if m.iter().any(|v| !v.is_finite()) {
        return Err(McapError::Numeric("non-finite matrix in the direction subproblem".into()));
    }
    let (vals, vecs) = sym_eigen(&m);
    let mut best: Option<(f64, usize, DVector<f64>)> = None;
    let mut consider = |value: f64, index: usize, cand: DVector<f64>| {
        let better = match &best {
            None => true,
            Some((bv, _, _)) => value < *bv - 1e-12 * bv.abs().max(1e-300),
        };
        if better {
            best = Some((value, index, cand));
        }
    };
    for s in 0..vals.len() {
        let xi = first_nonzero_positive(&(h_inv_sqrt * vecs.column(s)));
        for cand in [xi.clone(), -xi] {
            let value = quad_form(a, &cand) - kappa * mean.dot(&cand);
            consider(value, s, cand);
        }
    }
    if kappa > 0.0 {
        let c = vecs.transpose() * (h_inv_sqrt * mean);
        if let Some(z) = sphere_quadratic_minimum(&vals, &c, kappa) {
            let cand = h_inv_sqrt * (&vecs * z);
            let value = quad_form(a, &cand) - kappa * mean.dot(&cand);
            if value.is_finite() {
                consider(value, vals.len(), cand);
            }
        }
    }
    let (working_value, eigen_index, working) = best.ok_or_else(|| McapError::Numeric("empty eigensystem".into()))?;
    let norm = working.norm();
    Ok(DirectionCandidate {
        gamma: &working / norm,
        working,
        working_value,
        eigen_index,
        generalized_eigenvalues: vals,
    })
}

/// Candidate-search update of γ_i, adopted only if the objective does not increase.
pub fn update_gamma_i(params: &McapParams, dataset: &HierarchicalDataset, i: usize) -> Result<McapParams> {
    params.check(dataset)?;
    if i >= dataset.m() {
        return Err(McapError::Domain(format!("cluster index {i} out of range")));
    }
    let cluster = &dataset.clusters()[i];
    let norm = cluster_normalizer(cluster)?;
    let h_inv_sqrt = inv_sqrt_spd(&norm.h).ok_or_else(|| McapError::DegenerateCluster {
        cluster_id: cluster.id,
        detail: "normalizer is not positive definite".into(),
    })?;
    let mut data = ProjectedData::new(dataset, &params.gammas)?;
    let mut out = params.clone();
    let lc = log_cp(dataset.p(), params.vmf.concentration())?;
    gamma_step(dataset, &mut data, &mut out, i, &h_inv_sqrt, lc)?;
    Ok(out)
}

fn gamma_step(
    dataset: &HierarchicalDataset,
    data: &mut ProjectedData,
    params: &mut McapParams,
    i: usize,
    h_inv_sqrt: &DMatrix<f64>,
    log_cp_value: f64,
) -> Result<bool> {
    let cluster = &dataset.clusters()[i];
    let reg = &params.regression;
    let a = direction_quadratic_cluster(cluster, data, reg, i);
    let cand = direction_candidate(&a, h_inv_sqrt, params.vmf.concentration(), params.vmf.mean_direction()).map_err(|e| match e {
        McapError::Numeric(d) => McapError::Numeric(format!("cluster {}: {d}", cluster.id)),
        other => other,
    })?;
    let old_local = conditional_cluster(data, reg, i) + vmf_cluster(&params.gammas[i], &params.vmf, log_cp_value);
    let mut new_s = Vec::with_capacity(cluster.units.len());
    for u in &cluster.units {
        new_s.push(projected_variance(u.sample_cov(), &cand.gamma, Site::unit(u.cluster_id, u.unit_id))?);
    }
    let new_cond: f64 = data
        .range(i)
        .zip(&new_s)
        .map(|(k, &s)| {
            let mu = data.mu(reg, i, k);
            0.5 * data.t(k) * (mu + s * exp_neg_mu(mu).0)
        })
        .sum();
    let new_local = new_cond + vmf_cluster(&cand.gamma, &params.vmf, log_cp_value);
    if new_local <= old_local && cand.gamma != params.gammas[i] {
        for (k, s) in data.range(i).zip(new_s) {
            data.set_s(k, s);
        }
        params.gammas[i] = cand.gamma;
        return Ok(true);
    }
    Ok(false)
}

/// Flip each γ_i so that it has a non-negative inner product with γ.
pub fn align_signs(gammas: &mut [DVector<f64>], mean: &DVector<f64>) {
    for g in gammas.iter_mut() {
        if mean.dot(g) < 0.0 {
            *g = -&*g;
        }
    }
}

/// Sign alignment followed by the closed-form (γ, κ) update.
pub fn update_vmf_block(params: &mut McapParams) -> Result<VmfFitStatus> {
    align_signs(&mut params.gammas, params.vmf.mean_direction());
    let est = estimate_vmf(&params.gammas, false)?;
    match est.status {
        VmfFitStatus::Isotropic => {
            log::warn!("directions have zero resultant; mean direction kept");
            params.vmf = VmfParams::new(params.vmf.mean_direction().clone(), 0.0)?;
        }
        _ => params.vmf = est.params,
    }
    Ok(est.status)
}

/// Stop when the relative change of the objective falls below `tol`.
pub fn converged(prev: f64, current: f64, tol: f64) -> bool {
    (prev - current).abs() <= tol * prev.abs().max(1.0)
}

#[derive(Debug, Clone)]
pub struct RegressionFit {
    pub regression: RegressionParams,
    pub objective: f64,
    pub trace: Vec<f64>,
    pub converged: bool,
}

fn regression_sweep(data: &ProjectedData, reg: &mut RegressionParams, config: &FitConfig) -> Result<()> {
    let halvings = config.newton_max_halvings;
    let with_prior = reg.m() > 1;
    for i in 0..data.m() {
        step_beta0i(data, reg, i, halvings, with_prior)?;
    }
    if reg.q1() > 0 {
        if config.profile_fixed_effects {
            let omega = OmegaFactor::new(&reg.omega)?;
            step_joint(data, reg, &omega, halvings, with_prior)?;
        } else {
            step_beta1(data, reg, halvings)?;
        }
    }
    if reg.q2() > 0 {
        let omega = OmegaFactor::new(&reg.omega)?;
        for i in 0..data.m() {
            step_beta2i(data, reg, &omega, i, halvings, with_prior)?;
        }
    }
    if with_prior {
        step_shift(data, reg, halvings)?;
    }
    hyper_step(data, reg, config.omega_ridge)?;
    Ok(())
}

/// Closed-form hyperparameters, kept only when they do not increase the
/// prior terms they affect.
fn hyper_step(data: &ProjectedData, reg: &mut RegressionParams, floor: f64) -> Result<HyperStatus> {
    let before = reg.clone();
    let status = update_hyperparams(reg, floor);
    if reg.m() > 1 {
        let prior = |r: &RegressionParams| -> Result<(f64, f64)> {
            let (_, ip, sp) = regression_parts(data, r)?;
            Ok((ip, sp))
        };
        let (ip0, sp0) = prior(&before)?;
        let (ip1, sp1) = prior(reg)?;
        if ip1 > ip0 {
            reg.beta0 = before.beta0;
            reg.sigma2 = before.sigma2;
        }
        if sp1 > sp0 {
            reg.beta2 = before.beta2.clone();
            reg.omega = before.omega.clone();
        }
    }
    Ok(status)
}

/// Regression and hyperparameter blocks only, on fixed projected data.
pub fn fit_regression(data: &ProjectedData, init: RegressionParams, config: &FitConfig) -> Result<RegressionFit> {
    config.validate()?;
    let mut reg = init;
    let objective = |r: &RegressionParams| -> Result<f64> {
        let (c, ip, sp) = regression_parts(data, r)?;
        let v = c + ip + sp;
        if !v.is_finite() {
            return Err(McapError::Overflow { term: "regression objective" });
        }
        Ok(v)
    };
    let mut obj = objective(&reg)?;
    let mut trace = vec![obj];
    let mut done = false;
    for _ in 0..config.max_iters {
        let before = reg.clone();
        regression_sweep(data, &mut reg, config)?;
        let next = objective(&reg)?;
        if next > obj {
            reg = before;
            done = true;
            break;
        }
        trace.push(next);
        let stop = converged(obj, next, config.rel_tol);
        obj = next;
        if stop {
            done = true;
            break;
        }
    }
    Ok(RegressionFit {
        regression: reg,
        objective: obj,
        trace,
        converged: done,
    })
}

/// Reject designs whose covariate Gram matrices are singular.
pub fn check_design(dataset: &HierarchicalDataset) -> Result<()> {
    for (name, q, pick) in [
        ("fixed-effect covariates x1", dataset.q1(), 1usize),
        ("random-effect covariates x2", dataset.q2(), 2usize),
    ] {
        if q == 0 {
            continue;
        }
        let mut g = DMatrix::<f64>::zeros(q, q);
        for u in dataset.units() {
            let x = if pick == 1 { &u.x1 } else { &u.x2 };
            g.ger(u.t() as f64, x, x, 1.0);
        }
        let (vals, _) = sym_eigen(&g);
        let top = vals[q - 1];
        if !(top > 0.0) || vals[0] <= 1e-12 * top {
            return Err(McapError::DesignRank(format!("{name} are linearly dependent or identically zero")));
        }
    }
    Ok(())
}

/// Covariate columns (x1 then x2) that vary within one cluster independently
/// of the intercept and of earlier kept columns.
pub fn identifiable_columns(cluster: &Cluster) -> Vec<bool> {
    let units = &cluster.units;
    let q1 = units[0].x1.len();
    let q = q1 + units[0].x2.len();
    let value = |u: &UnitData, k: usize| if k < q1 { u.x1[k] } else { u.x2[k - q1] };
    let tot: f64 = units.iter().map(|u| u.t() as f64).sum();
    let mut kept: Vec<DVector<f64>> = Vec::new();
    let mut out = vec![false; q];
    for k in 0..q {
        let mean: f64 = units.iter().map(|u| u.t() as f64 * value(u, k)).sum::<f64>() / tot;
        let col = DVector::from_iterator(units.len(), units.iter().map(|u| (u.t() as f64).sqrt() * (value(u, k) - mean)));
        let scale = units.iter().map(|u| value(u, k).abs()).fold(1.0f64, f64::max) * tot.sqrt();
        if col.norm() <= 1e-10 * scale {
            continue;
        }
        if let Some(v) = orthogonalize_against(&col, &kept) {
            kept.push(v);
            out[k] = true;
        }
    }
    out
}

/// One cluster as its own dataset, keeping only the identifiable covariate
/// columns. Returns the kept x1 and x2 column indices.
pub fn single_cluster_dataset(cluster: &Cluster) -> Result<(HierarchicalDataset, Vec<usize>, Vec<usize>)> {
    let identified = identifiable_columns(cluster);
    let q1 = cluster.units[0].x1.len();
    let q2 = cluster.units[0].x2.len();
    let keep1: Vec<usize> = (0..q1).filter(|&k| identified[k]).collect();
    let keep2: Vec<usize> = (0..q2).filter(|&k| identified[q1 + k]).collect();
    let units = cluster
        .units
        .iter()
        .map(|u| {
            let mut v = u.clone();
            v.x1 = DVector::from_iterator(keep1.len(), keep1.iter().map(|&k| u.x1[k]));
            v.x2 = DVector::from_iterator(keep2.len(), keep2.iter().map(|&k| u.x2[k]));
            v
        })
        .collect();
    let ds = HierarchicalDataset::new(vec![Cluster { id: cluster.id, units }])?;
    Ok((ds, keep1, keep2))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum StartKind {
    TopEigen,
    SingleLevel,
    Pooled(usize),
    Random,
}

/// Start order: per-cluster leading eigenvector, per-cluster single-level fits
/// (multilevel fits only), eigenvectors of the averaged normalizer from the
/// smallest eigenvalue up, then shared uniform draws.
fn start_kind(start: usize, p: usize, single_level: bool) -> StartKind {
    let offset = usize::from(single_level);
    match start {
        0 => StartKind::TopEigen,
        1 if single_level => StartKind::SingleLevel,
        s if s - offset <= p => StartKind::Pooled(s - offset - 1),
        _ => StartKind::Random,
    }
}

struct Workspace<'a> {
    dataset: &'a HierarchicalDataset,
    vmf_prior: bool,
    h: Vec<DMatrix<f64>>,
    h_inv_sqrt: Vec<DMatrix<f64>>,
    /// Eigenvectors of the averaged normalizer, ascending eigenvalue.
    pooled: DMatrix<f64>,
}

impl<'a> Workspace<'a> {
    fn new(dataset: &'a HierarchicalDataset, normalizers: &[ClusterNormalizer], vmf_prior: bool) -> Result<Self> {
        let mut h_inv_sqrt = Vec::with_capacity(normalizers.len());
        for (c, n) in dataset.clusters().iter().zip(normalizers) {
            h_inv_sqrt.push(inv_sqrt_spd(&n.h).ok_or_else(|| McapError::DegenerateCluster {
                cluster_id: c.id,
                detail: "normalizer is not positive definite".into(),
            })?);
        }
        let h: Vec<DMatrix<f64>> = normalizers.iter().map(|n| n.h.clone()).collect();
        let avg = h.iter().fold(DMatrix::zeros(dataset.p(), dataset.p()), |a, x| a + x) / h.len() as f64;
        let (_, pooled) = sym_eigen(&avg);
        Ok(Self {
            dataset,
            vmf_prior,
            h,
            h_inv_sqrt,
            pooled,
        })
    }

    fn initial_params(&self, start: usize, config: &FitConfig) -> Result<McapParams> {
        let ds = self.dataset;
        let (m, p, q1, q2) = (ds.m(), ds.p(), ds.q1(), ds.q2());
        let kind = start_kind(start, p, self.vmf_prior && m > 1);
        if kind == StartKind::SingleLevel {
            return self.single_level_params(config);
        }
        let shared = match kind {
            StartKind::Pooled(k) => canonical_sign(&self.pooled.column(k).into_owned()),
            _ => unit_vector(&mut stream(config.seed, &[TAG_START, start as u64]), p),
        };
        let mut gammas: Vec<DVector<f64>> = (0..m)
            .map(|i| {
                if kind == StartKind::TopEigen {
                    let (_, vecs) = sym_eigen(&self.h[i]);
                    canonical_sign(&vecs.column(p - 1).into_owned())
                } else {
                    shared.clone()
                }
            })
            .collect();
        let beta0i: Vec<f64> = gammas.iter().zip(&self.h).map(|(g, h)| quad_form(h, g).max(f64::MIN_POSITIVE).ln()).collect();
        let vmf = self.start_vmf(&mut gammas)?;
        Ok(Self::assemble(gammas, beta0i, vec![DVector::zeros(q2); m], q1, vmf))
    }

    fn start_vmf(&self, gammas: &mut [DVector<f64>]) -> Result<VmfParams> {
        let reference = gammas[0].clone();
        align_signs(gammas, &reference);
        let mean = gammas.iter().fold(DVector::zeros(reference.len()), |acc, g| acc + g);
        let kappa0 = if self.vmf_prior { 1.0 } else { 0.0 };
        if mean.norm() > 1e-12 {
            VmfParams::normalized(mean, kappa0)
        } else {
            VmfParams::new(reference, kappa0)
        }
    }

    /// Directions, intercepts and slopes from separate fits of each cluster.
    fn single_level_params(&self, config: &FitConfig) -> Result<McapParams> {
        let ds = self.dataset;
        let inner = FitConfig {
            vmf_prior: false,
            centering: false,
            ..config.clone()
        };
        let per: Vec<(DVector<f64>, f64, DVector<f64>)> = ds
            .clusters()
            .par_iter()
            .map(|c| {
                let (sub, _, keep2) = single_cluster_dataset(c)?;
                let f = fit(&sub, &inner)?;
                let reg = &f.params.regression;
                let mut b2 = DVector::zeros(ds.q2());
                for (a, &k) in keep2.iter().enumerate() {
                    b2[k] = reg.beta2i[0][a];
                }
                Ok((f.params.gammas[0].clone(), reg.beta0i[0], b2))
            })
            .collect::<Result<_>>()?;
        let mut gammas: Vec<DVector<f64>> = per.iter().map(|t| t.0.clone()).collect();
        let vmf = self.start_vmf(&mut gammas)?;
        let beta0i = per.iter().map(|t| t.1).collect();
        let beta2i = per.into_iter().map(|t| t.2).collect();
        Ok(Self::assemble(gammas, beta0i, beta2i, ds.q1(), vmf))
    }

    fn assemble(gammas: Vec<DVector<f64>>, beta0i: Vec<f64>, beta2i: Vec<DVector<f64>>, q1: usize, vmf: VmfParams) -> McapParams {
        let m = gammas.len();
        let q2 = beta2i[0].len();
        let beta0 = beta0i.iter().sum::<f64>() / m as f64;
        let beta2 = beta2i.iter().fold(DVector::zeros(q2), |a, b| a + b) / m as f64;
        McapParams {
            gammas,
            regression: RegressionParams {
                beta0i,
                beta1: DVector::zeros(q1),
                beta2i,
                beta0,
                sigma2: 1.0,
                beta2,
                omega: DMatrix::identity(q2, q2),
            },
            vmf,
        }
    }

    fn run(&self, mut params: McapParams, config: &FitConfig) -> Result<(McapParams, Vec<f64>, bool, usize)> {
        let ds = self.dataset;
        let mut data = ProjectedData::new(ds, &params.gammas)?;
        let total = |data: &ProjectedData, params: &McapParams| -> Result<f64> { Ok(objective_parts(data, params)?.total()) };
        let mut obj = total(&data, &params)?;
        let mut trace = vec![obj];
        let mut clamps = data.clamp_events(&params.regression);
        let mut done = false;
        for _ in 0..config.max_iters {
            let before = params.clone();
            regression_sweep(&data, &mut params.regression, config)?;

            let lc = log_cp(ds.p(), params.vmf.concentration())?;
            for i in 0..ds.m() {
                gamma_step(ds, &mut data, &mut params, i, &self.h_inv_sqrt[i], lc)?;
            }

            if config.vmf_prior {
                self.vmf_step(&mut params, config)?;
            }

            let next = total(&data, &params)?;
            if next > obj {
                // Only rounding can raise the objective here.
                params = before;
                done = true;
                break;
            }
            clamps += data.clamp_events(&params.regression);
            trace.push(next);
            let stop = converged(obj, next, config.rel_tol);
            obj = next;
            if stop {
                done = true;
                break;
            }
        }
        Ok((params, trace, done, clamps))
    }

    fn vmf_step(&self, params: &mut McapParams, config: &FitConfig) -> Result<()> {
        align_signs(&mut params.gammas, params.vmf.mean_direction());
        let before = vmf_part(&params.gammas, &params.vmf)?;
        let est = estimate_vmf(&params.gammas, config.exact_kappa)?;
        if est.status == VmfFitStatus::Isotropic {
            let candidate = VmfParams::new(params.vmf.mean_direction().clone(), 0.0)?;
            if vmf_part(&params.gammas, &candidate)? <= before {
                params.vmf = candidate;
            }
            return Ok(());
        }
        if vmf_part(&params.gammas, &est.params)? <= before {
            params.vmf = est.params;
            return Ok(());
        }
        let exact = estimate_vmf(&params.gammas, true)?;
        if vmf_part(&params.gammas, &exact.params)? <= before {
            params.vmf = exact.params;
        }
        Ok(())
    }
}

fn centered_dataset(dataset: &HierarchicalDataset) -> Result<HierarchicalDataset> {
    dataset.map_units(|_, u| {
        let y = u.observations().expect("observations present");
        Ok(u.with_data(compute_sample_cov(y, true)?, Some(y.clone())))
    })
}

/// Run every start from its default initialisation and keep the best.
pub fn fit(dataset: &HierarchicalDataset, config: &FitConfig) -> Result<FitResult> {
    config.validate()?;
    if config.centering && dataset.has_observations() {
        let centered = centered_dataset(dataset)?;
        let plain = FitConfig {
            centering: false,
            ..config.clone()
        };
        return fit(&centered, &plain);
    }
    check_design(dataset)?;
    let normalizers = compute_normalizers(dataset)?;
    let ws = Workspace::new(dataset, &normalizers, config.vmf_prior)?;
    let outcomes: Vec<Result<(McapParams, Vec<f64>, bool, usize)>> = (0..config.n_starts)
        .into_par_iter()
        .map(|s| ws.initial_params(s, config).and_then(|p| ws.run(p, config)))
        .collect();
    finish(dataset, outcomes)
}

/// Fit from caller-supplied starting values (single start).
pub fn fit_from(dataset: &HierarchicalDataset, init: McapParams, config: &FitConfig) -> Result<FitResult> {
    config.validate()?;
    init.check(dataset)?;
    check_design(dataset)?;
    let normalizers = compute_normalizers(dataset)?;
    let ws = Workspace::new(dataset, &normalizers, config.vmf_prior)?;
    finish(dataset, vec![ws.run(init, config)])
}

fn finish(dataset: &HierarchicalDataset, outcomes: Vec<Result<(McapParams, Vec<f64>, bool, usize)>>) -> Result<FitResult> {
    let mut starts = Vec::with_capacity(outcomes.len());
    let mut best: Option<(usize, McapParams, Vec<f64>, bool, usize)> = None;
    for (index, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok((params, trace, conv, clamps)) => {
                let obj = *trace.last().expect("trace has the initial value");
                starts.push(StartSummary {
                    index,
                    objective: Some(obj),
                    converged: conv,
                    iterations: trace.len() - 1,
                    trace: trace.clone(),
                    error: None,
                });
                let better = match &best {
                    None => true,
                    Some((_, _, t, _, _)) => obj < *t.last().unwrap(),
                };
                if better {
                    best = Some((index, params, trace, conv, clamps));
                }
            }
            Err(e) => {
                log::warn!("start {index} failed: {e}");
                starts.push(StartSummary {
                    index,
                    objective: None,
                    converged: false,
                    iterations: 0,
                    trace: Vec::new(),
                    error: Some(e.to_string()),
                });
            }
        }
    }
    let Some((start_index, params, trace, conv, clamps)) = best else {
        return Err(McapError::AllStartsFailed(
            starts.iter().map(|s| format!("start {}: {}", s.index, s.error.as_deref().unwrap_or("?"))).collect(),
        ));
    };
    let objective = crate::likelihood::neg_hlik(&params, dataset)?;
    Ok(FitResult {
        iterations: trace.len() - 1,
        objective,
        objective_trace: trace,
        start_index,
        converged: conv,
        clamp_count: clamps,
        params,
        starts,
    })
}
