//! Independent oracles shared by the integration tests and the acceptance
//! runner. Nothing here calls into the numerical kernels under test.

#![allow(dead_code)]

use mcap::data::{Cluster, HierarchicalDataset, UnitData};
use mcap::likelihood::{McapParams, RegressionParams};
use mcap::special::VmfParams;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::function::gamma::ln_gamma;
use std::f64::consts::PI;

pub type TestRng = ChaCha8Rng;

pub fn rng(seed: u64) -> TestRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gauss(rng: &mut TestRng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn gauss_vec(rng: &mut TestRng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| gauss(rng))
}

pub fn gauss_mat(rng: &mut TestRng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| gauss(rng))
}

pub fn unit(rng: &mut TestRng, n: usize) -> DVector<f64> {
    let v = gauss_vec(rng, n);
    let norm = v.norm();
    v / norm
}

/// Sample covariance (divisor T, no centring) of T Gaussian rows with a
/// random mixing matrix.
pub fn random_cov(rng: &mut TestRng, p: usize, t: usize) -> DMatrix<f64> {
    let mix = gauss_mat(rng, p, p) * 0.5 + DMatrix::identity(p, p);
    let y = gauss_mat(rng, t, p) * mix;
    let mut s = DMatrix::zeros(p, p);
    for r in 0..t {
        for a in 0..p {
            for b in 0..p {
                s[(a, b)] += y[(r, a)] * y[(r, b)] / t as f64;
            }
        }
    }
    s
}

pub fn random_dataset(rng: &mut TestRng, m: usize, n: usize, t: usize, p: usize, q1: usize, q2: usize) -> HierarchicalDataset {
    let clusters = (0..m)
        .map(|i| Cluster {
            id: i,
            units: (0..n)
                .map(|j| {
                    let tt = t + rng.random_range(0..3);
                    let s = random_cov(rng, p, tt);
                    UnitData::from_covariance(i, j, s, tt, gauss_vec(rng, q1) * 0.5, gauss_vec(rng, q2) * 0.5)
                })
                .collect(),
        })
        .collect();
    HierarchicalDataset::new(clusters).expect("valid random dataset")
}

pub fn random_spd(rng: &mut TestRng, q: usize, floor: f64) -> DMatrix<f64> {
    let a = gauss_mat(rng, q, q) * 0.4;
    &a * a.transpose() + DMatrix::identity(q, q) * floor
}

pub fn random_params(rng: &mut TestRng, ds: &HierarchicalDataset, kappa: f64) -> McapParams {
    let (m, p, q1, q2) = (ds.m(), ds.p(), ds.q1(), ds.q2());
    let beta2 = gauss_vec(rng, q2) * 0.3;
    McapParams {
        gammas: (0..m).map(|_| unit(rng, p)).collect(),
        regression: RegressionParams {
            beta0i: (0..m).map(|_| 0.3 * gauss(rng)).collect(),
            beta1: gauss_vec(rng, q1) * 0.3,
            beta2i: (0..m).map(|_| &beta2 + gauss_vec(rng, q2) * 0.2).collect(),
            beta0: 0.2 * gauss(rng),
            sigma2: 0.5 + rng.random::<f64>(),
            beta2,
            omega: random_spd(rng, q2, 0.3),
        },
        vmf: VmfParams::new(unit(rng, p), kappa).unwrap(),
    }
}

// ---------------------------------------------------------------------------
// Bessel functions and the vMF normaliser by direct series summation.

/// log I_ν(x) from the ascending series, summed in log space.
pub fn log_bessel_series(nu: f64, x: f64) -> f64 {
    let lx = (x / 2.0).ln();
    let mut terms = Vec::new();
    let mut k = 0.0;
    loop {
        let t = (2.0 * k + nu) * lx - ln_gamma(k + 1.0) - ln_gamma(k + nu + 1.0);
        terms.push(t);
        if k > x && t < terms.iter().cloned().fold(f64::MIN, f64::max) - 50.0 {
            break;
        }
        k += 1.0;
    }
    let top = terms.iter().cloned().fold(f64::MIN, f64::max);
    top + terms.iter().map(|t| (t - top).exp()).sum::<f64>().ln()
}

pub fn log_cp_oracle(p: usize, kappa: f64) -> f64 {
    let h = p as f64 / 2.0;
    if kappa == 0.0 {
        return ln_gamma(h) - (2.0 * PI.powf(h)).ln();
    }
    (h - 1.0) * kappa.ln() - h * (2.0 * PI).ln() - log_bessel_series(h - 1.0, kappa)
}

/// A_p(κ) = I_{p/2}(κ) / I_{p/2-1}(κ).
pub fn mean_resultant_oracle(p: usize, kappa: f64) -> f64 {
    let nu = p as f64 / 2.0 - 1.0;
    (log_bessel_series(nu + 1.0, kappa) - log_bessel_series(nu, kappa)).exp()
}

/// Root of A_p(κ) = r by bisection.
pub fn inverse_mean_resultant_oracle(p: usize, r: f64) -> f64 {
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    while mean_resultant_oracle(p, hi) < r {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean_resultant_oracle(p, mid) < r {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

// ---------------------------------------------------------------------------
// Objective transcription.

fn quad(s: &DMatrix<f64>, g: &DVector<f64>) -> f64 {
    let mut v = 0.0;
    for a in 0..g.len() {
        for b in 0..g.len() {
            v += g[a] * s[(a, b)] * g[b];
        }
    }
    v
}

fn dot(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// The four parts of the objective written out term by term; the γ_i need
/// not be unit vectors.
pub fn transcription_parts(params: &McapParams, ds: &HierarchicalDataset) -> [f64; 4] {
    let r = &params.regression;
    let q2 = ds.q2();
    let chol = nalgebra::Cholesky::new(r.omega.clone());
    let (logdet, omega_inv) = match &chol {
        Some(c) => (
            2.0 * (0..q2).map(|k| c.l()[(k, k)].ln()).sum::<f64>(),
            c.inverse(),
        ),
        None => panic!("Omega not PD in oracle"),
    };
    let mut parts = [0.0; 4];
    let p = ds.p();
    let kappa = params.vmf.concentration();
    let lcp = log_cp_oracle(p, kappa);
    for (i, c) in ds.clusters().iter().enumerate() {
        for u in &c.units {
            let mu = r.beta0i[i] + dot(&u.x1, &r.beta1) + dot(&u.x2, &r.beta2i[i]);
            let s = quad(u.sample_cov(), &params.gammas[i]);
            parts[0] += u.t() as f64 / 2.0 * (mu + s * (-mu).exp());
        }
        parts[1] += 0.5 * r.sigma2.ln() + (r.beta0i[i] - r.beta0).powi(2) / (2.0 * r.sigma2);
        let d = &r.beta2i[i] - &r.beta2;
        let mut qf = 0.0;
        for a in 0..q2 {
            for b in 0..q2 {
                qf += d[a] * omega_inv[(a, b)] * d[b];
            }
        }
        parts[2] += 0.5 * logdet + 0.5 * qf;
        parts[3] += -lcp - kappa * dot(params.vmf.mean_direction(), &params.gammas[i]);
    }
    parts
}

pub fn transcription(params: &McapParams, ds: &HierarchicalDataset) -> f64 {
    transcription_parts(params, ds).iter().sum()
}

/// Brute-force A_i: plain loops over units and matrix entries.
pub fn direction_quadratic_oracle(params: &McapParams, ds: &HierarchicalDataset, i: usize) -> DMatrix<f64> {
    let r = &params.regression;
    let p = ds.p();
    let mut a = DMatrix::zeros(p, p);
    for u in &ds.clusters()[i].units {
        let mu = r.beta0i[i] + dot(&u.x1, &r.beta1) + dot(&u.x2, &r.beta2i[i]);
        let w = u.t() as f64 / 2.0 * (-mu).exp();
        for x in 0..p {
            for y in 0..p {
                a[(x, y)] += w * u.sample_cov()[(x, y)];
            }
        }
    }
    a
}

// ---------------------------------------------------------------------------
// Direction subproblem.

/// Smallest generalized eigenvector of (A, H) through the Cholesky factor of
/// H, normalised to unit Euclidean length with a positive first nonzero entry.
pub fn smallest_generalized_direction(a: &DMatrix<f64>, h: &DMatrix<f64>) -> DVector<f64> {
    let l = nalgebra::Cholesky::new(h.clone()).expect("H PD").l();
    let l_inv = l.clone().try_inverse().unwrap();
    let c = &l_inv * a * l_inv.transpose();
    let c = (&c + c.transpose()) * 0.5;
    let eig = c.symmetric_eigen();
    let k = (0..eig.eigenvalues.len())
        .min_by(|&x, &y| eig.eigenvalues[x].partial_cmp(&eig.eigenvalues[y]).unwrap())
        .unwrap();
    let xi = l_inv.transpose() * eig.eigenvectors.column(k);
    let mut g = &xi / xi.norm();
    if g.iter().find(|v| **v != 0.0).copied().unwrap_or(1.0) < 0.0 {
        g = -g;
    }
    g
}

fn hopf(eta: f64, x1: f64, x2: f64) -> DVector<f64> {
    let (se, ce) = eta.sin_cos();
    DVector::from_vec(vec![x1.cos() * se, x1.sin() * se, x2.cos() * ce, x2.sin() * ce])
}

/// Minimum of ξᵀAξ − κ γᵀξ over ξ = L⁻ᵀu with u on S³, which traces the
/// ellipsoid ξᵀHξ = 1. The sphere is covered by a quasi-uniform Hopf grid of
/// about `points` cells (ring counts proportional to ring length); the best
/// grid point is then polished by a shrinking compass search. Returns
/// (grid minimum, polished minimum).
pub fn mesh_minimum_p4(a: &DMatrix<f64>, h: &DMatrix<f64>, kappa: f64, mean: &DVector<f64>, points: usize) -> (f64, f64) {
    assert_eq!(a.nrows(), 4);
    let l = nalgebra::Cholesky::new(h.clone()).expect("H PD").l();
    let lt_inv = l.transpose().try_inverse().unwrap();
    let f = |eta: f64, x1: f64, x2: f64| {
        let xi = &lt_inv * hopf(eta, x1, x2);
        quad(a, &xi) - kappa * dot(mean, &xi)
    };
    let delta = (2.0 * PI * PI / points as f64).cbrt();
    let bands = ((PI / 2.0) / delta).ceil() as usize;
    let mut best = (f64::INFINITY, 0.0, 0.0, 0.0);
    for e in 0..bands {
        let eta = (e as f64 + 0.5) / bands as f64 * PI / 2.0;
        let n1 = ((2.0 * PI * eta.sin()) / delta).ceil().max(1.0) as usize;
        let n2 = ((2.0 * PI * eta.cos()) / delta).ceil().max(1.0) as usize;
        for i in 0..n1 {
            let x1 = i as f64 / n1 as f64 * 2.0 * PI;
            for j in 0..n2 {
                let x2 = j as f64 / n2 as f64 * 2.0 * PI;
                let v = f(eta, x1, x2);
                if v < best.0 {
                    best = (v, eta, x1, x2);
                }
            }
        }
    }
    let grid = best.0;
    let (mut v, mut c) = (best.0, [best.1, best.2, best.3]);
    let mut step = delta;
    while step > 1e-10 {
        let mut moved = false;
        for k in 0..3 {
            for s in [step, -step] {
                let mut t = c;
                t[k] += s;
                let w = f(t[0], t[1], t[2]);
                if w < v {
                    v = w;
                    c = t;
                    moved = true;
                }
            }
        }
        if !moved {
            step *= 0.5;
        }
    }
    (grid, v)
}

// ---------------------------------------------------------------------------
// Profile information.

/// Assemble the full information matrix over (β1, β0_1, β2_1, …, β0_m, β2_m)
/// and return the inverse of the β1 block of its inverse.
pub fn profile_information_oracle(ds: &HierarchicalDataset, sigma2: f64, omega: &DMatrix<f64>) -> DMatrix<f64> {
    let (m, q1, q2) = (ds.m(), ds.q1(), ds.q2());
    let nb = 1 + q2;
    let dim = q1 + m * nb;
    let omega_inv = if q2 > 0 { omega.clone().try_inverse().unwrap() } else { DMatrix::zeros(0, 0) };
    let mut f = DMatrix::zeros(dim, dim);
    for (i, c) in ds.clusters().iter().enumerate() {
        let off = q1 + i * nb;
        for u in &c.units {
            let w = u.t() as f64 / 2.0;
            let mut z = DVector::zeros(dim);
            for k in 0..q1 {
                z[k] = u.x1[k];
            }
            z[off] = 1.0;
            for k in 0..q2 {
                z[off + 1 + k] = u.x2[k];
            }
            for a in 0..dim {
                for b in 0..dim {
                    f[(a, b)] += w * z[a] * z[b];
                }
            }
        }
        f[(off, off)] += 1.0 / sigma2;
        for a in 0..q2 {
            for b in 0..q2 {
                f[(off + 1 + a, off + 1 + b)] += omega_inv[(a, b)];
            }
        }
    }
    let inv = f.try_inverse().expect("full information invertible");
    inv.view((0, 0), (q1, q1)).into_owned().try_inverse().unwrap()
}

// ---------------------------------------------------------------------------
// DfD.

pub fn random_orthogonal(rng: &mut TestRng, p: usize) -> DMatrix<f64> {
    gauss_mat(rng, p, p).qr().q()
}

/// Units whose covariances share the eigenbasis `q`.
pub fn common_basis_dataset(rng: &mut TestRng, q: &DMatrix<f64>, m: usize, n: usize) -> HierarchicalDataset {
    let p = q.nrows();
    let clusters = (0..m)
        .map(|i| Cluster {
            id: i,
            units: (0..n)
                .map(|j| {
                    let d = DMatrix::from_diagonal(&DVector::from_fn(p, |_, _| (gauss(rng)).exp()));
                    let s = q * d * q.transpose();
                    let s = (&s + s.transpose()) * 0.5;
                    UnitData::from_covariance(i, j, s, 10 + rng.random_range(0..20), DVector::zeros(0), DVector::zeros(0))
                })
                .collect(),
        })
        .collect();
    HierarchicalDataset::new(clusters).unwrap()
}

/// Direct determinant ratio with the weighted geometric mean.
pub fn dfd_oracle(ds: &HierarchicalDataset, projections: &[DMatrix<f64>]) -> f64 {
    let total: f64 = ds.units().map(|u| u.t() as f64).sum();
    let mut log = 0.0;
    for (c, g) in ds.clusters().iter().zip(projections) {
        for u in &c.units {
            let m = g.transpose() * u.sample_cov() * g;
            let diag: f64 = (0..m.nrows()).map(|k| m[(k, k)]).product();
            log += u.t() as f64 / total * (diag / m.determinant()).ln();
        }
    }
    log.exp()
}

/// Pearson chi-square statistic and degrees of freedom against a continuous
/// CDF using `bins` equiprobable cells.
pub fn chi_square_gof(samples: &[f64], cdf: impl Fn(f64) -> f64, bins: usize) -> (f64, usize) {
    let mut counts = vec![0usize; bins];
    for &x in samples {
        let u = cdf(x).clamp(0.0, 1.0 - 1e-15);
        counts[(u * bins as f64) as usize] += 1;
    }
    let expected = samples.len() as f64 / bins as f64;
    let stat = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    (stat, bins - 1)
}
