//! Regression-parameter uncertainty: the two-stage by-cluster bootstrap with
//! directions held fixed, and normal intervals from the profile information.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::HierarchicalDataset;
use crate::error::{McapError, Result};
use crate::estimator::{check_design, fit_regression, FitConfig, FitResult, RegressionFit};
use crate::likelihood::{ProjectedData, RegressionParams};
use crate::linalg::{min_eigenvalue, pseudo_inverse_sym, spd_inverse, symmetrize, vech};
use crate::rng::{stream, TAG_BOOTSTRAP};

/// Starting values for a reduced fit: cluster intercepts at the log of the
/// pooled projected variance, everything else at its default.
pub fn default_regression_start(data: &ProjectedData) -> RegressionParams {
    let m = data.m();
    let beta0i: Vec<f64> = (0..m)
        .map(|i| {
            let (mut num, mut den) = (0.0, 0.0);
            for k in data.range(i) {
                num += data.t(k) * data.s(k);
                den += data.t(k);
            }
            (num / den).max(f64::MIN_POSITIVE).ln()
        })
        .collect();
    let beta0 = beta0i.iter().sum::<f64>() / m as f64;
    RegressionParams {
        beta0i,
        beta1: DVector::zeros(data.q1()),
        beta2i: vec![DVector::zeros(data.q2()); m],
        beta0,
        sigma2: 1.0,
        beta2: DVector::zeros(data.q2()),
        omega: DMatrix::identity(data.q2(), data.q2()),
    }
}

/// Regression and hyperparameter blocks with every γ_i held at `fixed_gammas`.
pub fn reduced_fit(dataset: &HierarchicalDataset, fixed_gammas: &[DVector<f64>], config: &FitConfig) -> Result<RegressionFit> {
    if fixed_gammas.len() != dataset.m() {
        return Err(McapError::Domain("one direction per cluster is required".into()));
    }
    check_design(dataset)?;
    let data = ProjectedData::new(dataset, fixed_gammas)?;
    fit_regression(&data, default_regression_start(&data), config)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub name: String,
    pub estimate: f64,
    pub se: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone)]
pub struct BootstrapConfig {
    pub b: usize,
    pub alpha: f64,
    pub seed: u64,
    pub fit: FitConfig,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            b: 500,
            alpha: 0.05,
            seed: 0,
            fit: FitConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BootstrapResult {
    /// Column names of `replicates`.
    pub names: Vec<String>,
    /// One row per successful replicate: β0, β1, β2, σ², vech Ω.
    pub replicates: DMatrix<f64>,
    pub estimate: DVector<f64>,
    pub se: DVector<f64>,
    /// Percentile intervals.
    pub percentile: Vec<Interval>,
    /// Normal intervals `estimate ± z se`.
    pub normal: Vec<Interval>,
    pub b: usize,
    pub dropped: usize,
    pub seed: u64,
    pub alpha: f64,
    /// Fewer than two replicates: standard errors are zero by construction.
    pub degenerate: bool,
}

pub fn parameter_names(q1: usize, q2: usize) -> Vec<String> {
    let mut names = vec!["beta0".to_string()];
    names.extend((0..q1).map(|k| format!("beta1[{}]", k + 1)));
    names.extend((0..q2).map(|k| format!("beta2[{}]", k + 1)));
    names.push("sigma2".into());
    for c in 0..q2 {
        for r in c..q2 {
            names.push(format!("omega[{},{}]", r + 1, c + 1));
        }
    }
    names
}

pub fn parameter_vector(reg: &RegressionParams) -> Vec<f64> {
    let mut v = vec![reg.beta0];
    v.extend(reg.beta1.iter());
    v.extend(reg.beta2.iter());
    v.push(reg.sigma2);
    v.extend(vech(&reg.omega));
    v
}

/// Sample quantile with linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], prob: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * prob;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn z_quantile(alpha: f64) -> f64 {
    Normal::new(0.0, 1.0).expect("standard normal").inverse_cdf(1.0 - alpha / 2.0)
}

/// Draw the cluster-then-unit resample for one replicate.
pub fn resample_indices<R: Rng>(rng: &mut R, sizes: &[usize]) -> Vec<(usize, Vec<usize>)> {
    let m = sizes.len();
    (0..m)
        .map(|_| {
            let c = rng.random_range(0..m);
            let units = (0..sizes[c]).map(|_| rng.random_range(0..sizes[c])).collect();
            (c, units)
        })
        .collect()
}

/// Two-stage bootstrap around a completed fit.
pub fn bootstrap(dataset: &HierarchicalDataset, fit: &FitResult, config: &BootstrapConfig) -> Result<BootstrapResult> {
    if config.b < 1 {
        return Err(McapError::Input("B must be at least 1".into()));
    }
    if !(config.alpha > 0.0 && config.alpha < 1.0) {
        return Err(McapError::Input("alpha must lie in (0, 1)".into()));
    }
    fit.params.check(dataset)?;
    let data = ProjectedData::new(dataset, &fit.params.gammas)?;
    let sizes: Vec<usize> = (0..data.m()).map(|i| data.cluster_size(i)).collect();
    let full = &fit.params.regression;
    let outcomes: Vec<Option<Vec<f64>>> = (0..config.b)
        .into_par_iter()
        .map(|b| {
            let mut rng = stream(config.seed, &[TAG_BOOTSTRAP, b as u64]);
            let draws = resample_indices(&mut rng, &sizes);
            let sample = data.resample(&draws);
            let init = RegressionParams {
                beta0i: draws.iter().map(|(c, _)| full.beta0i[*c]).collect(),
                beta2i: draws.iter().map(|(c, _)| full.beta2i[*c].clone()).collect(),
                ..full.clone()
            };
            match fit_regression(&sample, init, &config.fit) {
                Ok(r) => {
                    let v = parameter_vector(&r.regression);
                    v.iter().all(|x| x.is_finite()).then_some(v)
                }
                Err(e) => {
                    log::warn!("bootstrap replicate {b} failed: {e}");
                    None
                }
            }
        })
        .collect();
    let rows: Vec<Vec<f64>> = outcomes.into_iter().flatten().collect();
    let dropped = config.b - rows.len();
    if dropped * 10 > config.b {
        return Err(McapError::Inference(format!("{dropped} of {} bootstrap replicates failed", config.b)));
    }
    let names = parameter_names(full.q1(), full.q2());
    let np = names.len();
    let estimate = DVector::from_vec(parameter_vector(full));
    let replicates = DMatrix::from_fn(rows.len(), np, |r, c| rows[r][c]);
    let nb = rows.len();
    let degenerate = nb < 2;
    let z = z_quantile(config.alpha);
    let mut se = DVector::zeros(np);
    let mut percentile = Vec::with_capacity(np);
    let mut normal = Vec::with_capacity(np);
    for c in 0..np {
        let mut col: Vec<f64> = replicates.column(c).iter().copied().collect();
        let mean = col.iter().sum::<f64>() / nb as f64;
        se[c] = if degenerate {
            0.0
        } else {
            (col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (nb - 1) as f64).sqrt()
        };
        col.sort_by(f64::total_cmp);
        percentile.push(Interval {
            name: names[c].clone(),
            estimate: estimate[c],
            se: se[c],
            lower: quantile(&col, config.alpha / 2.0),
            upper: quantile(&col, 1.0 - config.alpha / 2.0),
        });
        normal.push(Interval {
            name: names[c].clone(),
            estimate: estimate[c],
            se: se[c],
            lower: estimate[c] - z * se[c],
            upper: estimate[c] + z * se[c],
        });
    }
    Ok(BootstrapResult {
        names,
        replicates,
        estimate,
        se,
        percentile,
        normal,
        b: config.b,
        dropped,
        seed: config.seed,
        alpha: config.alpha,
        degenerate,
    })
}

#[derive(Debug, Clone)]
pub struct ProfileInformation {
    pub j: DMatrix<f64>,
    pub h11: DMatrix<f64>,
    pub c: Vec<DMatrix<f64>>,
    pub d: Vec<DMatrix<f64>>,
}

/// `J_n = H11 − Σ_i C_i D_i⁻¹ C_iᵀ` with every block at unit weight ratio.
pub fn profile_information(dataset: &HierarchicalDataset, reg: &RegressionParams) -> Result<ProfileInformation> {
    if !(reg.sigma2 > 0.0) {
        return Err(McapError::Domain("sigma2 must be positive".into()));
    }
    let (q1, q2) = (dataset.q1(), dataset.q2());
    let omega_inv = if q2 > 0 {
        spd_inverse(&reg.omega).ok_or_else(|| McapError::Domain("Omega is not positive definite".into()))?
    } else {
        DMatrix::zeros(0, 0)
    };
    let nb = 1 + q2;
    let mut h11 = DMatrix::zeros(q1, q1);
    let mut j = DMatrix::zeros(q1, q1);
    let mut cs = Vec::with_capacity(dataset.m());
    let mut ds = Vec::with_capacity(dataset.m());
    for cluster in dataset.clusters() {
        let mut c = DMatrix::zeros(q1, nb);
        let mut d = DMatrix::zeros(nb, nb);
        let mut hi = DMatrix::zeros(q1, q1);
        for u in &cluster.units {
            let w = u.t() as f64 / 2.0;
            let mut z = DVector::zeros(nb);
            z[0] = 1.0;
            z.rows_mut(1, q2).copy_from(&u.x2);
            hi.ger(w, &u.x1, &u.x1, 1.0);
            c.ger(w, &u.x1, &z, 1.0);
            d.ger(w, &z, &z, 1.0);
        }
        d[(0, 0)] += 1.0 / reg.sigma2;
        if q2 > 0 {
            let mut block = d.view_mut((1, 1), (q2, q2));
            block += &omega_inv;
        }
        let d_inv = spd_inverse(&d).ok_or_else(|| McapError::Domain(format!("random-effect block of cluster {} is singular", cluster.id)))?;
        j += &hi - &c * d_inv * c.transpose();
        h11 += hi;
        cs.push(c);
        ds.push(d);
    }
    Ok(ProfileInformation {
        j: symmetrize(&j),
        h11,
        c: cs,
        d: ds,
    })
}

/// Commutation matrix with `K vec(M) = vec(Mᵀ)` for n×n `M` (column-major vec).
pub fn commutation_matrix(n: usize) -> DMatrix<f64> {
    let mut k = DMatrix::zeros(n * n, n * n);
    for r in 0..n {
        for c in 0..n {
            // vec(M)[c n + r] = M[r, c] goes to vec(Mᵀ)[r n + c]
            k[(r * n + c, c * n + r)] = 1.0;
        }
    }
    k
}

#[derive(Debug, Clone)]
pub struct AsymptoticInference {
    pub intervals: Vec<Interval>,
    pub profile: ProfileInformation,
    /// The profile information was not positive definite.
    pub pseudo_inverse_used: bool,
    /// `m / (n T)` with n and T the smallest cluster and sample sizes.
    pub rate_ratio: f64,
}

/// Normal intervals for β1, β0, σ², β2 and vec Ω from the limiting variances.
pub fn asymptotic_ci(dataset: &HierarchicalDataset, reg: &RegressionParams, alpha: f64) -> Result<AsymptoticInference> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(McapError::Input("alpha must lie in (0, 1)".into()));
    }
    let profile = profile_information(dataset, reg)?;
    let (q1, q2) = (reg.q1(), reg.q2());
    let m = dataset.m() as f64;
    let z = z_quantile(alpha);
    let mut pseudo = false;
    let j_inv = if q1 == 0 {
        DMatrix::zeros(0, 0)
    } else if min_eigenvalue(&profile.j) > 0.0 {
        spd_inverse(&profile.j).unwrap_or_else(|| {
            pseudo = true;
            pseudo_inverse_sym(&profile.j)
        })
    } else {
        pseudo = true;
        pseudo_inverse_sym(&profile.j)
    };
    if pseudo {
        log::warn!("profile information is not positive definite; pseudo-inverse used");
    }
    let make = |name: String, est: f64, var: f64| {
        let se = var.max(0.0).sqrt();
        Interval {
            name,
            estimate: est,
            se,
            lower: est - z * se,
            upper: est + z * se,
        }
    };
    let mut intervals = Vec::new();
    for k in 0..q1 {
        intervals.push(make(format!("beta1[{}]", k + 1), reg.beta1[k], j_inv[(k, k)]));
    }
    intervals.push(make("beta0".into(), reg.beta0, reg.sigma2 / m));
    intervals.push(make("sigma2".into(), reg.sigma2, 2.0 * reg.sigma2.powi(2) / m));
    for k in 0..q2 {
        intervals.push(make(format!("beta2[{}]", k + 1), reg.beta2[k], reg.omega[(k, k)] / m));
    }
    if q2 > 0 {
        let n2 = q2 * q2;
        let kron = reg.omega.kronecker(&reg.omega);
        let cov = (DMatrix::identity(n2, n2) + commutation_matrix(q2)) * kron / m;
        for c in 0..q2 {
            for r in 0..q2 {
                let idx = c * q2 + r;
                intervals.push(make(format!("omega[{},{}]", r + 1, c + 1), reg.omega[(r, c)], cov[(idx, idx)]));
            }
        }
    }
    let rate_ratio = m / (dataset.min_n() as f64 * dataset.min_t() as f64);
    Ok(AsymptoticInference {
        intervals,
        profile,
        pseudo_inverse_used: pseudo,
        rate_ratio,
    })
}
