//! Log-scale modified Bessel function of the first kind and the von
//! Mises-Fisher distribution on the unit sphere.

use std::f64::consts::PI;
use std::sync::OnceLock;

use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use statrs::function::gamma::ln_gamma;

use crate::error::{McapError, Result};
use crate::rng::unit_vector;

pub const KAPPA_CAP: f64 = 1e8;
const DEBYE_TERMS: usize = 13;

/// Polynomial coefficients (ascending powers of t) of the Debye polynomials u_k.
fn debye_polys() -> &'static Vec<Vec<f64>> {
    static POLYS: OnceLock<Vec<Vec<f64>>> = OnceLock::new();
    POLYS.get_or_init(|| {
        // u_{k+1} = t²(1 - t²)/2 · u_k' + 1/8 ∫₀ᵗ (1 - 5s²) u_k(s) ds
        let mut out = vec![vec![1.0]];
        for k in 0..DEBYE_TERMS - 1 {
            let u = &out[k];
            let mut next = vec![0.0; u.len() + 3];
            for (n, &c) in u.iter().enumerate().skip(1) {
                let d = n as f64 * c;
                next[n + 1] += 0.5 * d;
                next[n + 3] -= 0.5 * d;
            }
            for (n, &c) in u.iter().enumerate() {
                next[n + 1] += c / (8.0 * (n + 1) as f64);
                next[n + 3] -= 5.0 * c / (8.0 * (n + 3) as f64);
            }
            out.push(next);
        }
        out
    })
}

fn poly_eval(c: &[f64], t: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, &a| acc * t + a)
}

fn log_i_series(nu: f64, x: f64) -> f64 {
    let q = 0.25 * x * x;
    // Sum in scaled form so that huge intermediate terms never overflow.
    let mut log_scale = 0.0;
    let mut term = 1.0f64;
    let mut sum = 1.0f64;
    let mut k = 0.0;
    loop {
        k += 1.0;
        term *= q / (k * (k + nu));
        sum += term;
        if sum > 1e250 {
            log_scale += sum.ln();
            term /= sum;
            sum = 1.0;
        }
        if term < 1e-17 * sum && k * (k + nu) > q {
            break;
        }
        if k > 1e7 {
            break;
        }
    }
    nu * (0.5 * x).ln() - ln_gamma(nu + 1.0) + log_scale + sum.ln()
}

fn log_i_debye(nu: f64, x: f64) -> f64 {
    let z = x / nu;
    let root = (1.0 + z * z).sqrt();
    let t = 1.0 / root;
    let eta = root + (z / (1.0 + root)).ln();
    let polys = debye_polys();
    let mut sum = 0.0;
    let mut pow = 1.0;
    for u in polys {
        sum += poly_eval(u, t) * pow;
        pow /= nu;
    }
    -0.5 * (2.0 * PI * nu).ln() + nu * eta - 0.5 * root.ln() + sum.ln()
}

fn log_i_hankel(nu: f64, x: f64) -> f64 {
    let mu = 4.0 * nu * nu;
    let mut term = 1.0f64;
    let mut sum = 1.0;
    for k in 1..60 {
        let odd = (2 * k - 1) as f64;
        let next = -term * (mu - odd * odd) / (k as f64 * 8.0 * x);
        if next.abs() > term.abs() {
            break;
        }
        term = next;
        sum += term;
        if term.abs() < 1e-17 * sum.abs() {
            break;
        }
    }
    x - 0.5 * (2.0 * PI * x).ln() + sum.ln()
}

/// log I_ν(x) for ν ≥ 0, x ≥ 0.
pub fn log_bessel_i(nu: f64, x: f64) -> Result<f64> {
    if !(nu >= 0.0) || !(x >= 0.0) || !nu.is_finite() || !x.is_finite() {
        return Err(McapError::Domain(format!("log_bessel_i needs finite ν ≥ 0 and x ≥ 0, got ν = {nu}, x = {x}")));
    }
    if x == 0.0 {
        return Ok(if nu == 0.0 { 0.0 } else { f64::NEG_INFINITY });
    }
    let v = if x * x < 4.0 * (nu + 1.0) || (nu < 10.0 && x < 100.0) {
        log_i_series(nu, x)
    } else if nu >= 10.0 {
        log_i_debye(nu, x)
    } else {
        log_i_hankel(nu, x)
    };
    Ok(v)
}

/// Mean resultant length A_p(κ) = I_{p/2}(κ) / I_{p/2-1}(κ).
pub fn mean_resultant(p: usize, kappa: f64) -> Result<f64> {
    if kappa == 0.0 {
        return Ok(0.0);
    }
    let nu = p as f64 / 2.0 - 1.0;
    Ok((log_bessel_i(nu + 1.0, kappa)? - log_bessel_i(nu, kappa)?).exp())
}

fn mean_resultant_derivative(p: usize, kappa: f64, a: f64) -> f64 {
    1.0 - a * a - (p as f64 - 1.0) / kappa * a
}

/// Solve A_p(κ) = r for κ by safeguarded Newton inside a bisection bracket.
pub fn inverse_mean_resultant(p: usize, r: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&r) {
        return Err(McapError::Domain(format!("mean resultant length must lie in [0, 1), got {r}")));
    }
    if r == 0.0 {
        return Ok(0.0);
    }
    let pf = p as f64;
    let mut lo = 0.0;
    let mut hi = (r * (pf - r * r) / (1.0 - r * r)).max(1.0);
    while mean_resultant(p, hi)? < r {
        lo = hi;
        hi *= 2.0;
        if hi > KAPPA_CAP {
            return Ok(KAPPA_CAP);
        }
    }
    let mut k = 0.5 * (lo + hi);
    for _ in 0..200 {
        let a = mean_resultant(p, k)?;
        let f = a - r;
        if f.abs() <= 1e-14 {
            break;
        }
        if f < 0.0 {
            lo = k;
        } else {
            hi = k;
        }
        let d = mean_resultant_derivative(p, k, a);
        let newton = k - f / d;
        k = if d > 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if hi - lo <= 1e-10 * hi.max(1e-300) {
            k = 0.5 * (lo + hi);
            break;
        }
    }
    Ok(k)
}

/// log of the vMF normaliser C_p(κ) = κ^{p/2-1} / ((2π)^{p/2} I_{p/2-1}(κ)).
pub fn log_cp(p: usize, kappa: f64) -> Result<f64> {
    if p < 2 {
        return Err(McapError::Domain(format!("log_cp needs p ≥ 2, got {p}")));
    }
    if !(kappa >= 0.0) || !kappa.is_finite() {
        return Err(McapError::Domain(format!("log_cp needs finite κ ≥ 0, got {kappa}")));
    }
    let half = p as f64 / 2.0;
    if kappa == 0.0 {
        // Uniform density: 1 / |S^{p-1}| with |S^{p-1}| = 2π^{p/2} / Γ(p/2).
        return Ok(ln_gamma(half) - std::f64::consts::LN_2 - half * PI.ln());
    }
    let nu = half - 1.0;
    let lead = if nu == 0.0 { 0.0 } else { nu * kappa.ln() };
    Ok(lead - half * (2.0 * PI).ln() - log_bessel_i(nu, kappa)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct VmfParams {
    mean_direction: DVector<f64>,
    concentration: f64,
}

impl VmfParams {
    pub fn new(mean_direction: DVector<f64>, concentration: f64) -> Result<Self> {
        if (mean_direction.norm() - 1.0).abs() > 1e-12 {
            return Err(McapError::Domain("vMF mean direction must have unit norm".into()));
        }
        if !(concentration >= 0.0) || !concentration.is_finite() {
            return Err(McapError::Domain(format!("vMF concentration must be finite and ≥ 0, got {concentration}")));
        }
        Ok(Self {
            mean_direction,
            concentration,
        })
    }

    /// Normalises the direction first.
    pub fn normalized(direction: DVector<f64>, concentration: f64) -> Result<Self> {
        let n = direction.norm();
        if !(n > 0.0) || !n.is_finite() {
            return Err(McapError::Domain("vMF mean direction must be non-zero".into()));
        }
        Self::new(direction / n, concentration)
    }

    pub fn mean_direction(&self) -> &DVector<f64> {
        &self.mean_direction
    }

    pub fn concentration(&self) -> f64 {
        self.concentration
    }

    pub fn dim(&self) -> usize {
        self.mean_direction.len()
    }
}

pub fn vmf_log_density(u: &DVector<f64>, params: &VmfParams) -> Result<f64> {
    if u.len() != params.dim() {
        return Err(McapError::Domain("vMF argument has the wrong dimension".into()));
    }
    if (u.norm() - 1.0).abs() > 1e-8 {
        return Err(McapError::Domain("vMF argument must be a unit vector".into()));
    }
    Ok(log_cp(params.dim(), params.concentration)? + params.concentration * params.mean_direction.dot(u))
}

/// Draw `count` i.i.d. vMF vectors (Wood's rejection sampler).
pub fn sample_vmf<R: Rng + ?Sized>(params: &VmfParams, count: usize, rng: &mut R) -> Vec<DVector<f64>> {
    let p = params.dim();
    let kappa = params.concentration;
    let d1 = (p - 1) as f64;
    let b = d1 / (2.0 * kappa + (4.0 * kappa * kappa + d1 * d1).sqrt());
    let x0 = (1.0 - b) / (1.0 + b);
    let c = kappa * x0 + d1 * (1.0 - x0 * x0).ln();
    let beta = Beta::new(d1 / 2.0, d1 / 2.0).expect("valid beta shape");

    let mu = &params.mean_direction;
    // Householder reflection taking e1 to mu.
    let mut v = -mu.clone();
    v[0] += 1.0;
    let vv = v.norm_squared();

    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let (w, one_minus_w) = loop {
            let z: f64 = beta.sample(rng);
            let denom = 1.0 - (1.0 - b) * z;
            let w = (1.0 - (1.0 + b) * z) / denom;
            let u: f64 = rng.random();
            if kappa * w + d1 * (1.0 - x0 * w).ln() - c >= u.ln() {
                break (w, 2.0 * b * z / denom);
            }
        };
        let radial = (one_minus_w * (1.0 + w)).max(0.0).sqrt();
        let mut tangent = DVector::<f64>::zeros(p - 1);
        if p > 1 {
            tangent = unit_vector(rng, p - 1);
        }
        let mut y = DVector::zeros(p);
        y[0] = w;
        y.rows_mut(1, p - 1).copy_from(&(tangent * radial));
        if vv > 1e-30 {
            let proj = v.dot(&y) * 2.0 / vv;
            y.axpy(-proj, &v, 1.0);
        }
        let n = y.norm();
        out.push(y / n);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VmfFitStatus {
    Ok,
    /// Resultant length numerically zero: κ = 0 and the direction is arbitrary.
    Isotropic,
    /// Resultant length numerically one: κ capped.
    Capped,
}

#[derive(Debug, Clone)]
pub struct VmfEstimate {
    pub params: VmfParams,
    pub resultant_length: f64,
    pub status: VmfFitStatus,
}

/// Closed-form approximate concentration from the mean resultant length.
pub fn approx_concentration(p: usize, r: f64) -> f64 {
    let pf = p as f64;
    (r * (pf - r * r) / (1.0 - r * r)).min(KAPPA_CAP)
}

/// Estimate (γ, κ) from unit vectors; `exact` solves the likelihood equation.
pub fn estimate_vmf(directions: &[DVector<f64>], exact: bool) -> Result<VmfEstimate> {
    let first = directions
        .first()
        .ok_or_else(|| McapError::Domain("estimate_vmf needs at least one direction".into()))?;
    let p = first.len();
    let mut sum = DVector::zeros(p);
    for d in directions {
        if d.len() != p {
            return Err(McapError::Domain("directions differ in dimension".into()));
        }
        sum += d;
    }
    let mean = sum / directions.len() as f64;
    let r = mean.norm();
    if r < 1e-12 {
        log::warn!("vMF estimate: mean resultant length is zero, concentration set to 0");
        let mut e1 = DVector::zeros(p);
        e1[0] = 1.0;
        return Ok(VmfEstimate {
            params: VmfParams::new(e1, 0.0)?,
            resultant_length: r,
            status: VmfFitStatus::Isotropic,
        });
    }
    let direction = &mean / r;
    if r >= 1.0 - 1e-12 {
        log::warn!("vMF estimate: directions coincide, concentration capped at {KAPPA_CAP:e}");
        return Ok(VmfEstimate {
            params: VmfParams::normalized(direction, KAPPA_CAP)?,
            resultant_length: r,
            status: VmfFitStatus::Capped,
        });
    }
    let kappa = if exact {
        inverse_mean_resultant(p, r)?
    } else {
        approx_concentration(p, r)
    };
    let status = if kappa >= KAPPA_CAP {
        VmfFitStatus::Capped
    } else {
        VmfFitStatus::Ok
    };
    Ok(VmfEstimate {
        params: VmfParams::normalized(direction, kappa)?,
        resultant_length: r,
        status,
    })
}
