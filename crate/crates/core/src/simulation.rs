//! Data generator with two covariate-driven eigen-dimensions, the per-cluster
//! single-level baseline, and Monte-Carlo summaries.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Bernoulli, ChiSquared, Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::components::select_k;
use crate::data::{Cluster, HierarchicalDataset, UnitData};
use crate::error::{McapError, Result};
use crate::estimator::{align_signs, fit, identifiable_columns, single_cluster_dataset, FitConfig, FitResult};
use crate::inference::{asymptotic_ci, bootstrap, BootstrapConfig, Interval};
use crate::linalg::{orthogonalize_against, symmetrize};
use crate::rng::{normal, normal_matrix, stream, StreamRng, TAG_REPLICATION, TAG_SIMULATION};
use crate::special::{sample_vmf, VmfParams};

/// Column (0-based) of the eigenbasis carrying D2 and D4.
pub const D2: usize = 1;
pub const D4: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub p: usize,
    pub m: usize,
    pub n_mean: usize,
    pub t_mean: usize,
    pub kappa_true: f64,
    pub beta0_profile: Vec<f64>,
    pub beta1_d2: Vec<f64>,
    pub beta2_d2: Vec<f64>,
    pub beta1_d4: Vec<f64>,
    pub beta2_d4: Vec<f64>,
    /// Standard deviation of the random intercept and slope deviations.
    pub noise_sd: f64,
    /// Log-scale mean and sd of the nuisance eigenvalues.
    pub nuisance_log_mean: f64,
    pub nuisance_log_sd: f64,
    /// Draw the fixed-effect covariates once per cluster rather than per unit.
    pub x1_cluster_level: bool,
    /// Also keep the raw draws (needed only for deflation in data space).
    pub keep_observations: bool,
    pub seed: u64,
}

impl SimConfig {
    /// Intercepts decaying geometrically (ratio 1/2) from 5 to −3 over the dimensions.
    pub fn beta0_schedule(p: usize) -> Vec<f64> {
        let r: f64 = 0.5;
        let last = r.powi(p as i32 - 1);
        (0..p).map(|k| -3.0 + 8.0 * (r.powi(k as i32) - last) / (1.0 - last)).collect()
    }

    pub fn standard(p: usize, n_mean: usize, t_mean: usize) -> Self {
        Self {
            p,
            m: 20,
            n_mean,
            t_mean,
            kappa_true: 100.0,
            beta0_profile: Self::beta0_schedule(p),
            beta1_d2: vec![1.0, -0.5],
            beta2_d2: vec![-0.5],
            beta1_d4: vec![-1.0, 0.5],
            beta2_d4: vec![0.5],
            noise_sd: 0.1,
            nuisance_log_mean: 0.0,
            nuisance_log_sd: 1.0,
            x1_cluster_level: true,
            keep_observations: false,
            seed: 0,
        }
    }

    pub fn q1(&self) -> usize {
        self.beta1_d4.len()
    }

    pub fn q2(&self) -> usize {
        self.beta2_d4.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.p < 5 {
            return Err(McapError::Input("simulation needs p >= 5".into()));
        }
        if self.m < 1 || self.n_mean < 1 || self.t_mean < 1 {
            return Err(McapError::Input("m, n_mean and t_mean must be at least 1".into()));
        }
        if self.beta0_profile.len() != self.p {
            return Err(McapError::Input("beta0_profile needs one value per dimension".into()));
        }
        if self.beta1_d2.len() != self.q1() || self.beta2_d2.len() != self.q2() {
            return Err(McapError::Input("D2 and D4 coefficient lengths differ".into()));
        }
        if self.q1() < 1 || self.q1() > 2 {
            return Err(McapError::Input("the generator supports one or two fixed-effect covariates".into()));
        }
        if !(self.kappa_true >= 0.0) || !(self.noise_sd >= 0.0) || !(self.nuisance_log_sd >= 0.0) {
            return Err(McapError::Input("kappa_true, noise_sd and nuisance_log_sd must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimTruth {
    pub column: usize,
    pub mean_direction: Vec<f64>,
    pub beta0: f64,
    pub beta1: Vec<f64>,
    pub beta2: Vec<f64>,
    pub beta0i: Vec<f64>,
    pub beta2i: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct SimTruth {
    /// Per-cluster orthonormal eigenbases.
    pub pi: Vec<DMatrix<f64>>,
    /// Per-unit eigenvalues.
    pub lambda: Vec<Vec<DVector<f64>>>,
    pub d2: DimTruth,
    pub d4: DimTruth,
}

impl SimTruth {
    pub fn sigma(&self, i: usize, j: usize) -> DMatrix<f64> {
        let pi = &self.pi[i];
        symmetrize(&(pi * DMatrix::from_diagonal(&self.lambda[i][j]) * pi.transpose()))
    }

    pub fn direction(&self, i: usize, column: usize) -> DVector<f64> {
        self.pi[i].column(column).into_owned()
    }

    pub fn to_json(&self) -> serde_json::Value {
        let mats: Vec<Vec<Vec<f64>>> = self
            .pi
            .iter()
            .map(|m| m.column_iter().map(|c| c.iter().copied().collect()).collect())
            .collect();
        let lambdas: Vec<Vec<Vec<f64>>> = self
            .lambda
            .iter()
            .map(|c| c.iter().map(|l| l.iter().copied().collect()).collect())
            .collect();
        serde_json::json!({
            "eigenvector_columns": mats,
            "eigenvalues": lambdas,
            "d2": self.d2,
            "d4": self.d4,
        })
    }
}

fn unit_axis(p: usize, k: usize) -> DVector<f64> {
    DVector::from_fn(p, |r, _| if r == k { 1.0 } else { 0.0 })
}

fn poisson_at_least_two(rng: &mut StreamRng, mean: usize) -> usize {
    let draw: f64 = Poisson::new(mean as f64).expect("positive mean").sample(rng);
    (draw as usize).max(2)
}

fn draw_direction(rng: &mut StreamRng, mean: &DVector<f64>, kappa: f64) -> Result<DVector<f64>> {
    if kappa.is_infinite() {
        return Ok(mean.clone());
    }
    let params = VmfParams::new(mean.clone(), kappa)?;
    Ok(sample_vmf(&params, 1, rng).remove(0))
}

/// `(1/T) Σ_t y_t y_tᵀ` for `y_t = B z_t`, `z_t ~ N(0, I)`. Uses the Bartlett
/// factor of the Wishart matrix when `T ≥ p` and explicit draws otherwise.
pub fn draw_sample_cov(rng: &mut StreamRng, b: &DMatrix<f64>, t: usize) -> DMatrix<f64> {
    let p = b.ncols();
    let w = if t >= p {
        let mut a = DMatrix::<f64>::zeros(p, p);
        for k in 0..p {
            let chi: f64 = ChiSquared::new((t - k) as f64).expect("positive df").sample(rng);
            a[(k, k)] = chi.sqrt();
            for l in 0..k {
                a[(k, l)] = normal(rng);
            }
        }
        &a * a.transpose()
    } else {
        let z = normal_matrix(rng, t, p);
        z.transpose() * z
    };
    symmetrize(&(b * w * b.transpose() / t as f64))
}

fn dim_truth(column: usize, p: usize, beta0: f64, beta1: &[f64], beta2: &[f64], m: usize) -> DimTruth {
    DimTruth {
        column,
        mean_direction: unit_axis(p, column).iter().copied().collect(),
        beta0,
        beta1: beta1.to_vec(),
        beta2: beta2.to_vec(),
        beta0i: Vec::with_capacity(m),
        beta2i: Vec::with_capacity(m),
    }
}

/// One synthetic dataset and its generating truth.
pub fn generate(config: &SimConfig) -> Result<(HierarchicalDataset, SimTruth)> {
    generate_with(config, &mut stream(config.seed, &[TAG_SIMULATION]))
}

pub fn generate_with(config: &SimConfig, rng: &mut StreamRng) -> Result<(HierarchicalDataset, SimTruth)> {
    config.validate()?;
    let (p, m, q1, q2) = (config.p, config.m, config.q1(), config.q2());
    let mean2 = unit_axis(p, D2);
    let mean4 = unit_axis(p, D4);
    let mut d2 = dim_truth(D2, p, config.beta0_profile[D2], &config.beta1_d2, &config.beta2_d2, m);
    let mut d4 = dim_truth(D4, p, config.beta0_profile[D4], &config.beta1_d4, &config.beta2_d4, m);
    let bern = Bernoulli::new(0.5).expect("valid probability");
    let x1_draw = |rng: &mut StreamRng| {
        let mut v = DVector::zeros(q1);
        v[0] = if bern.sample(rng) { 1.0 } else { 0.0 };
        if q1 > 1 {
            v[1] = 0.5 * normal(rng);
        }
        v
    };
    let mut clusters = Vec::with_capacity(m);
    let mut pis = Vec::with_capacity(m);
    let mut lambdas = Vec::with_capacity(m);
    for i in 0..m {
        let g2 = draw_direction(rng, &mean2, config.kappa_true)?;
        let raw4 = draw_direction(rng, &mean4, config.kappa_true)?;
        let g4 = orthogonalize_against(&raw4, std::slice::from_ref(&g2))
            .ok_or_else(|| McapError::Numeric("signal directions coincide".into()))?;
        let mut basis = vec![g2.clone(), g4.clone()];
        while basis.len() < p {
            let v = DVector::from_fn(p, |_, _| normal(rng));
            if let Some(u) = orthogonalize_against(&v, &basis) {
                basis.push(u);
            }
        }
        let mut pi = DMatrix::zeros(p, p);
        let mut others = basis[2..].iter();
        for k in 0..p {
            let col = match k {
                D2 => &g2,
                D4 => &g4,
                _ => others.next().expect("p - 2 nuisance columns"),
            };
            pi.set_column(k, col);
        }
        let eps2 = config.noise_sd * normal(rng);
        let eps4 = config.noise_sd * normal(rng);
        let th2 = DVector::from_fn(q2, |_, _| config.noise_sd * normal(rng));
        let th4 = DVector::from_fn(q2, |_, _| config.noise_sd * normal(rng));
        let b2i = DVector::from_column_slice(&config.beta2_d2) + th2;
        let b4i = DVector::from_column_slice(&config.beta2_d4) + th4;
        d2.beta0i.push(d2.beta0 + eps2);
        d4.beta0i.push(d4.beta0 + eps4);
        d2.beta2i.push(b2i.iter().copied().collect());
        d4.beta2i.push(b4i.iter().copied().collect());

        let n_i = poisson_at_least_two(rng, config.n_mean);
        let cluster_x1 = x1_draw(rng);
        let mut units = Vec::with_capacity(n_i);
        let mut unit_lambdas = Vec::with_capacity(n_i);
        for j in 0..n_i {
            let x1 = if config.x1_cluster_level { cluster_x1.clone() } else { x1_draw(rng) };
            let x2 = DVector::from_fn(q2, |_, _| 0.5 * normal(rng));
            let t = poisson_at_least_two(rng, config.t_mean);
            let mut lam = DVector::zeros(p);
            for k in 0..p {
                lam[k] = match k {
                    D2 => (d2.beta0i[i] + x1.dot(&DVector::from_column_slice(&config.beta1_d2)) + x2.dot(&b2i)).exp(),
                    D4 => (d4.beta0i[i] + x1.dot(&DVector::from_column_slice(&config.beta1_d4)) + x2.dot(&b4i)).exp(),
                    _ => (config.nuisance_log_mean + config.nuisance_log_sd * normal(rng)).exp(),
                };
            }
            let b = &pi * DMatrix::from_diagonal(&lam.map(f64::sqrt));
            let unit = if config.keep_observations {
                let y = normal_matrix(rng, t, p) * b.transpose();
                UnitData::from_observations(i, j, y, x1, x2, false)?
            } else {
                UnitData::from_covariance(i, j, draw_sample_cov(rng, &b, t), t, x1, x2)
            };
            units.push(unit);
            unit_lambdas.push(lam);
        }
        clusters.push(Cluster { id: i, units });
        pis.push(pi);
        lambdas.push(unit_lambdas);
    }
    let dataset = HierarchicalDataset::new(clusters)?;
    Ok((
        dataset,
        SimTruth {
            pi: pis,
            lambda: lambdas,
            d2,
            d4,
        },
    ))
}

/// Per-cluster single-level estimates, coefficients in the full covariate layout.
#[derive(Debug, Clone)]
pub struct ScapCluster {
    pub gamma: DVector<f64>,
    pub beta0: f64,
    pub beta1: DVector<f64>,
    pub beta2: DVector<f64>,
    /// Which of the x1 then x2 columns could be estimated within the cluster.
    pub identified: Vec<bool>,
    pub fit: FitResult,
}

#[derive(Debug, Clone)]
pub struct ScapResult {
    pub clusters: Vec<Option<ScapCluster>>,
    pub gamma: DVector<f64>,
    pub beta0: f64,
    pub beta1: DVector<f64>,
    pub beta2: DVector<f64>,
    pub failed: usize,
}

fn scap_cluster(cluster: &Cluster, config: &FitConfig) -> Result<ScapCluster> {
    let identified = identifiable_columns(cluster);
    let (q1, q2) = (cluster.units[0].x1.len(), cluster.units[0].x2.len());
    let (single, keep1, keep2) = single_cluster_dataset(cluster)?;
    let cfg = FitConfig {
        vmf_prior: false,
        ..config.clone()
    };
    let fit = fit(&single, &cfg)?;
    let reg = &fit.params.regression;
    let mut beta1 = DVector::zeros(q1);
    for (a, &k) in keep1.iter().enumerate() {
        beta1[k] = reg.beta1[a];
    }
    let mut beta2 = DVector::zeros(q2);
    for (a, &k) in keep2.iter().enumerate() {
        beta2[k] = reg.beta2i[0][a];
    }
    Ok(ScapCluster {
        gamma: fit.params.gammas[0].clone(),
        beta0: reg.beta0i[0],
        beta1,
        beta2,
        identified,
        fit,
    })
}

/// Fit every cluster on its own and average directions and coefficients.
/// Coefficients that cannot be estimated within a cluster count as zero.
pub fn run_scap(dataset: &HierarchicalDataset, config: &FitConfig) -> Result<ScapResult> {
    let per: Vec<Option<ScapCluster>> = dataset
        .clusters()
        .par_iter()
        .map(|c| match scap_cluster(c, config) {
            Ok(r) => Some(r),
            Err(e) => {
                log::warn!("single-level fit failed for cluster {}: {e}", c.id);
                None
            }
        })
        .collect();
    let ok: Vec<&ScapCluster> = per.iter().flatten().collect();
    if ok.is_empty() {
        return Err(McapError::AllStartsFailed(vec!["every single-level cluster fit failed".into()]));
    }
    let k = ok.len() as f64;
    let mut gammas: Vec<DVector<f64>> = ok.iter().map(|c| c.gamma.clone()).collect();
    let reference = gammas[0].clone();
    align_signs(&mut gammas, &reference);
    let mean = gammas.iter().fold(DVector::zeros(dataset.p()), |a, g| a + g);
    let gamma = if mean.norm() > 0.0 { mean.normalize() } else { reference };
    Ok(ScapResult {
        gamma,
        beta0: ok.iter().map(|c| c.beta0).sum::<f64>() / k,
        beta1: ok.iter().fold(DVector::zeros(dataset.q1()), |a, c| a + &c.beta1) / k,
        beta2: ok.iter().fold(DVector::zeros(dataset.q2()), |a, c| a + &c.beta2) / k,
        failed: per.len() - ok.len(),
        clusters: per,
    })
}

/// `|⟨a, b⟩| / (‖a‖ ‖b‖)`.
pub fn similarity(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a.dot(b) / (a.norm() * b.norm())).abs()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RepMetrics {
    /// Mean over clusters of `|⟨γ̂_i, π_i⟩|`.
    pub cluster_similarity: f64,
    /// `|⟨γ̂, π⟩|` for the common direction.
    pub mean_similarity: f64,
    pub beta11: f64,
    pub beta2: f64,
}

fn metrics(gammas: &[Option<DVector<f64>>], gamma: &DVector<f64>, beta11: f64, beta2: f64, truth: &SimTruth, dim: &DimTruth) -> RepMetrics {
    let sims: Vec<f64> = gammas
        .iter()
        .enumerate()
        .filter_map(|(i, g)| g.as_ref().map(|g| similarity(g, &truth.direction(i, dim.column))))
        .collect();
    RepMetrics {
        cluster_similarity: sims.iter().sum::<f64>() / sims.len().max(1) as f64,
        mean_similarity: similarity(gamma, &DVector::from_column_slice(&dim.mean_direction)),
        beta11: beta11 - dim.beta1[0],
        beta2: beta2 - dim.beta2[0],
    }
}

pub fn mcap_metrics(fit: &FitResult, truth: &SimTruth, dim: &DimTruth) -> RepMetrics {
    let reg = &fit.params.regression;
    let gammas: Vec<Option<DVector<f64>>> = fit.params.gammas.iter().cloned().map(Some).collect();
    metrics(&gammas, fit.params.vmf.mean_direction(), reg.beta1[0], reg.beta2[0], truth, dim)
}

pub fn scap_metrics(scap: &ScapResult, truth: &SimTruth, dim: &DimTruth) -> RepMetrics {
    let gammas: Vec<Option<DVector<f64>>> = scap.clusters.iter().map(|c| c.as_ref().map(|c| c.gamma.clone())).collect();
    metrics(&gammas, &scap.gamma, scap.beta1[0], scap.beta2[0], truth, dim)
}

/// Number of increases along every objective trace of a fit.
pub fn descent_violations(fit: &FitResult) -> usize {
    let count = |t: &[f64]| t.windows(2).filter(|w| w[1] > w[0]).count();
    count(&fit.objective_trace) + fit.starts.iter().map(|s| count(&s.trace)).sum::<usize>()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloConfig {
    pub sim: SimConfig,
    pub reps: usize,
    #[serde(skip, default)]
    pub fit: FitConfig,
    pub scap: bool,
    /// Bootstrap replicates per dataset (0 = no coverage study).
    pub bootstrap_b: usize,
    pub alpha: f64,
    pub k_max: usize,
    pub dfd_threshold: f64,
}

impl MonteCarloConfig {
    pub fn new(sim: SimConfig, reps: usize) -> Self {
        Self {
            sim,
            reps,
            fit: FitConfig::default(),
            scap: false,
            bootstrap_b: 0,
            alpha: 0.05,
            k_max: 1,
            dfd_threshold: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coverage {
    pub boot_beta11: bool,
    pub boot_beta21: bool,
    pub asym_beta11: bool,
    pub asym_beta21: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepRecord {
    pub rep: usize,
    pub mcap: Option<RepMetrics>,
    pub scap: Option<RepMetrics>,
    pub coverage: Option<Coverage>,
    pub descent_violations: usize,
    pub selected_k: usize,
    pub error: Option<String>,
}

fn covers(intervals: &[Interval], name: &str, truth: f64) -> bool {
    intervals
        .iter()
        .find(|i| i.name == name)
        .is_some_and(|i| i.lower <= truth && truth <= i.upper)
}

/// The fitted component closest to D4, among those kept by DfD selection.
fn target_component(dataset: &HierarchicalDataset, truth: &SimTruth, config: &MonteCarloConfig) -> Result<(FitResult, usize)> {
    if config.k_max <= 1 {
        return Ok((fit(dataset, &config.fit)?, 1));
    }
    let set = select_k(dataset, &config.fit, config.k_max, config.dfd_threshold)?;
    let k = set.k();
    let best = set
        .fits
        .into_iter()
        .map(|f| {
            let s = mcap_metrics(&f, truth, &truth.d4).cluster_similarity;
            (s, f)
        })
        .fold(None::<(f64, FitResult)>, |acc, (s, f)| match acc {
            Some((bs, bf)) if bs >= s => Some((bs, bf)),
            _ => Some((s, f)),
        })
        .expect("at least one component");
    Ok((best.1, k))
}

/// Dataset and truth of one Monte-Carlo replication.
pub fn replication_data(sim: &SimConfig, rep: usize) -> Result<(HierarchicalDataset, SimTruth)> {
    generate_with(sim, &mut stream(sim.seed, &[TAG_SIMULATION, TAG_REPLICATION, rep as u64]))
}

fn one_rep(config: &MonteCarloConfig, rep: usize) -> Result<RepRecord> {
    let (dataset, truth) = replication_data(&config.sim, rep)?;
    let fit_cfg = FitConfig {
        seed: crate::rng::derive_seed(config.fit.seed, &[TAG_REPLICATION, rep as u64]),
        ..config.fit.clone()
    };
    let cfg = MonteCarloConfig {
        fit: fit_cfg.clone(),
        ..config.clone()
    };
    let (fit_result, selected_k) = target_component(&dataset, &truth, &cfg)?;
    let mut violations = descent_violations(&fit_result);
    let mcap = mcap_metrics(&fit_result, &truth, &truth.d4);
    let scap = if config.scap {
        let s = run_scap(&dataset, &fit_cfg)?;
        violations += s.clusters.iter().flatten().map(|c| descent_violations(&c.fit)).sum::<usize>();
        Some(scap_metrics(&s, &truth, &truth.d4))
    } else {
        None
    };
    let coverage = if config.bootstrap_b > 0 {
        let boot = bootstrap(
            &dataset,
            &fit_result,
            &BootstrapConfig {
                b: config.bootstrap_b,
                alpha: config.alpha,
                seed: fit_cfg.seed,
                fit: fit_cfg.clone(),
            },
        )?;
        let asym = asymptotic_ci(&dataset, &fit_result.params.regression, config.alpha)?;
        let (b11, b21) = (truth.d4.beta1[0], truth.d4.beta2[0]);
        Some(Coverage {
            boot_beta11: covers(&boot.percentile, "beta1[1]", b11),
            boot_beta21: covers(&boot.percentile, "beta2[1]", b21),
            asym_beta11: covers(&asym.intervals, "beta1[1]", b11),
            asym_beta21: covers(&asym.intervals, "beta2[1]", b21),
        })
    } else {
        None
    };
    Ok(RepRecord {
        rep,
        mcap: Some(mcap),
        scap,
        coverage,
        descent_violations: violations,
        selected_k,
        error: None,
    })
}

/// Flat per-replication row for CSV output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepRow {
    pub rep: usize,
    pub mcap_similarity: Option<f64>,
    pub mcap_mean_similarity: Option<f64>,
    pub mcap_beta11_error: Option<f64>,
    pub mcap_beta2_error: Option<f64>,
    pub scap_similarity: Option<f64>,
    pub scap_mean_similarity: Option<f64>,
    pub scap_beta11_error: Option<f64>,
    pub scap_beta2_error: Option<f64>,
    pub boot_covers_beta11: Option<bool>,
    pub asym_covers_beta11: Option<bool>,
    pub boot_covers_beta21: Option<bool>,
    pub asym_covers_beta21: Option<bool>,
    pub descent_violations: usize,
    pub selected_k: usize,
    pub error: Option<String>,
}

impl From<&RepRecord> for RepRow {
    fn from(r: &RepRecord) -> Self {
        Self {
            rep: r.rep,
            mcap_similarity: r.mcap.map(|m| m.cluster_similarity),
            mcap_mean_similarity: r.mcap.map(|m| m.mean_similarity),
            mcap_beta11_error: r.mcap.map(|m| m.beta11),
            mcap_beta2_error: r.mcap.map(|m| m.beta2),
            scap_similarity: r.scap.map(|m| m.cluster_similarity),
            scap_mean_similarity: r.scap.map(|m| m.mean_similarity),
            scap_beta11_error: r.scap.map(|m| m.beta11),
            scap_beta2_error: r.scap.map(|m| m.beta2),
            boot_covers_beta11: r.coverage.map(|c| c.boot_beta11),
            asym_covers_beta11: r.coverage.map(|c| c.asym_beta11),
            boot_covers_beta21: r.coverage.map(|c| c.boot_beta21),
            asym_covers_beta21: r.coverage.map(|c| c.asym_beta21),
            descent_violations: r.descent_violations,
            selected_k: r.selected_k,
            error: r.error.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MonteCarloReport {
    pub config: MonteCarloConfig,
    pub records: Vec<RepRecord>,
}

/// Replications run in parallel; each draws from its own stream.
pub fn run_monte_carlo(config: &MonteCarloConfig) -> Result<MonteCarloReport> {
    config.sim.validate()?;
    config.fit.validate()?;
    if config.reps < 1 {
        return Err(McapError::Input("reps must be at least 1".into()));
    }
    let records = (0..config.reps)
        .into_par_iter()
        .map(|rep| {
            one_rep(config, rep).unwrap_or_else(|e| RepRecord {
                rep,
                mcap: None,
                scap: None,
                coverage: None,
                descent_violations: 0,
                selected_k: 0,
                error: Some(e.to_string()),
            })
        })
        .collect();
    Ok(MonteCarloReport {
        config: config.clone(),
        records,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table1Row {
    pub p: usize,
    pub n: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub method: String,
    pub gamma_similarity_mean: f64,
    pub gamma_similarity_se: f64,
    pub beta11_bias: f64,
    pub beta11_mse: f64,
    pub beta2_bias: f64,
    pub beta2_mse: f64,
    pub mean_direction_similarity: f64,
    pub reps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageRow {
    pub p: usize,
    pub n: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub param: String,
    pub method: String,
    pub coverage_pct: f64,
}

fn mean_sd(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let sd = if x.len() > 1 {
        (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, sd)
}

impl MonteCarloReport {
    pub fn failures(&self) -> usize {
        self.records.iter().filter(|r| r.error.is_some()).count()
    }

    pub fn descent_violations(&self) -> usize {
        self.records.iter().map(|r| r.descent_violations).sum()
    }

    fn row(&self, method: &str, values: Vec<RepMetrics>) -> Option<Table1Row> {
        if values.is_empty() {
            return None;
        }
        let sims: Vec<f64> = values.iter().map(|v| v.cluster_similarity).collect();
        let (sim_mean, sim_sd) = mean_sd(&sims);
        let n = values.len() as f64;
        let avg = |f: &dyn Fn(&RepMetrics) -> f64| values.iter().map(f).sum::<f64>() / n;
        let s = &self.config.sim;
        Some(Table1Row {
            p: s.p,
            n: s.n_mean,
            t: s.t_mean,
            method: method.into(),
            gamma_similarity_mean: sim_mean,
            gamma_similarity_se: sim_sd,
            beta11_bias: avg(&|v| v.beta11),
            beta11_mse: avg(&|v| v.beta11 * v.beta11),
            beta2_bias: avg(&|v| v.beta2),
            beta2_mse: avg(&|v| v.beta2 * v.beta2),
            mean_direction_similarity: avg(&|v| v.mean_similarity),
            reps: values.len(),
        })
    }

    pub fn table1(&self) -> Vec<Table1Row> {
        let scap: Vec<RepMetrics> = self.records.iter().filter_map(|r| r.scap).collect();
        let mcap: Vec<RepMetrics> = self.records.iter().filter_map(|r| r.mcap).collect();
        [self.row("SCAP", scap), self.row("MCAP", mcap)].into_iter().flatten().collect()
    }

    pub fn coverage(&self) -> Vec<CoverageRow> {
        let cov: Vec<Coverage> = self.records.iter().filter_map(|r| r.coverage).collect();
        if cov.is_empty() {
            return Vec::new();
        }
        let s = &self.config.sim;
        let pct = |f: &dyn Fn(&Coverage) -> bool| 100.0 * cov.iter().filter(|c| f(c)).count() as f64 / cov.len() as f64;
        let mk = |param: &str, method: &str, v: f64| CoverageRow {
            p: s.p,
            n: s.n_mean,
            t: s.t_mean,
            param: param.into(),
            method: method.into(),
            coverage_pct: v,
        };
        vec![
            mk("beta11", "Bootstrap", pct(&|c| c.boot_beta11)),
            mk("beta11", "Asymptotic", pct(&|c| c.asym_beta11)),
            mk("beta21", "Bootstrap", pct(&|c| c.boot_beta21)),
            mk("beta21", "Asymptotic", pct(&|c| c.asym_beta21)),
        ]
    }
}

/// Rows from a CSV written by [`write_rows`].
pub fn read_rows<T: serde::de::DeserializeOwned>(path: &std::path::Path) -> Result<Vec<T>> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| McapError::Input(format!("{}: {e}", path.display())))?;
    rdr.deserialize()
        .map(|r| r.map_err(|e| McapError::Input(format!("{}: {e}", path.display()))))
        .collect()
}

/// Serialize rows as CSV after an optional `# ...` comment line.
pub fn write_rows<W: Write, T: Serialize>(mut out: W, comment: Option<&str>, rows: &[T]) -> Result<()> {
    if let Some(c) = comment {
        writeln!(out, "# {c}")?;
    }
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| McapError::Input(format!("csv: {e}")))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::sym_eigen;

    fn small(p: usize) -> SimConfig {
        SimConfig {
            m: 4,
            n_mean: 6,
            t_mean: 30,
            ..SimConfig::standard(p, 6, 30)
        }
    }

    #[test]
    fn schedule_endpoints() {
        let b = SimConfig::beta0_schedule(5);
        assert!((b[0] - 5.0).abs() < 1e-12 && (b[4] + 3.0).abs() < 1e-12);
        assert!(b.windows(2).all(|w| w[1] < w[0]));
        assert!((b[1] - 0.7333333333333334).abs() < 1e-12);
    }

    #[test]
    fn eigenstructure_is_exact() {
        let (ds, truth) = generate(&small(6)).unwrap();
        for (i, c) in ds.clusters().iter().enumerate() {
            let pi = &truth.pi[i];
            assert!((pi.transpose() * pi - DMatrix::identity(6, 6)).amax() < 1e-10);
            assert!(truth.direction(i, D2).dot(&truth.direction(i, D4)).abs() < 1e-10);
            for (j, u) in c.units.iter().enumerate() {
                let sigma = truth.sigma(i, j);
                let (vals, _) = sym_eigen(&sigma);
                let mut want: Vec<f64> = truth.lambda[i][j].iter().copied().collect();
                want.sort_by(f64::total_cmp);
                for (a, b) in vals.iter().zip(&want) {
                    assert!((a - b).abs() < 1e-10 * b.max(1.0));
                }
                let g = truth.direction(i, D4);
                let mu = truth.d4.beta0i[i]
                    + u.x1.dot(&DVector::from_column_slice(&truth.d4.beta1))
                    + u.x2.dot(&DVector::from_column_slice(&truth.d4.beta2i[i]));
                assert!(((g.transpose() * &sigma * &g)[0].ln() - mu).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn infinite_concentration_shares_signal_axes() {
        let cfg = SimConfig {
            kappa_true: f64::INFINITY,
            ..small(5)
        };
        let (_, truth) = generate(&cfg).unwrap();
        for i in 0..cfg.m {
            assert_eq!(truth.direction(i, D2), unit_axis(5, D2));
            assert_eq!(truth.direction(i, D4), unit_axis(5, D4));
        }
    }

    #[test]
    fn sample_covariance_is_unbiased() {
        let mut rng = stream(3, &[1]);
        let b = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.5, 2.0, 0.0, -0.3, 0.2, 0.7]);
        let sigma = &b * b.transpose();
        for t in [2usize, 40] {
            let mut acc = DMatrix::zeros(3, 3);
            for _ in 0..2000 {
                acc += draw_sample_cov(&mut rng, &b, t);
            }
            acc /= 2000.0;
            assert!((acc - &sigma).norm() / sigma.norm() < 0.02 * (40.0 / t as f64).sqrt().max(1.0));
        }
    }

    #[test]
    fn generation_is_reproducible() {
        let cfg = small(5);
        let (a, _) = generate(&cfg).unwrap();
        let (b, _) = generate(&cfg).unwrap();
        for (u, v) in a.units().zip(b.units()) {
            assert_eq!(u.sample_cov(), v.sample_cov());
        }
    }

    #[test]
    fn similarity_basics() {
        let e = unit_axis(3, 0);
        assert_eq!(similarity(&e, &e), 1.0);
        assert_eq!(similarity(&e, &-e.clone()), 1.0);
        assert_eq!(similarity(&e, &unit_axis(3, 1)), 0.0);
    }

    #[test]
    fn cluster_level_x1_is_not_identified_within_cluster() {
        let (ds, _) = generate(&small(5)).unwrap();
        let id = identifiable_columns(&ds.clusters()[0]);
        assert_eq!(id, vec![false, false, true]);
        let cfg = SimConfig {
            x1_cluster_level: false,
            ..small(5)
        };
        let (ds, _) = generate(&cfg).unwrap();
        assert_eq!(identifiable_columns(&ds.clusters()[0]), vec![true, true, true]);
    }

    #[test]
    fn scap_single_cluster_is_single_level_fit() {
        let cfg = SimConfig { m: 1, ..small(5) };
        let (ds, _) = generate(&cfg).unwrap();
        let fc = FitConfig { n_starts: 2, ..Default::default() };
        let s = run_scap(&ds, &fc).unwrap();
        let c = s.clusters[0].as_ref().unwrap();
        assert_eq!(s.beta1, c.beta1);
        assert!((s.gamma.dot(&c.gamma).abs() - 1.0).abs() < 1e-12);
        assert_eq!(s.beta1[0], 0.0);
    }
}
