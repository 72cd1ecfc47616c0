//! Acceptance suite: one line per criterion, non-zero exit on any failure.
//!
//! The Monte-Carlo criteria run at full scale and dominate the runtime
//! (roughly a quarter of an hour on one core with optimisations on).

#[path = "../../core/tests/common/mod.rs"]
mod common;

use common::*;
use mcap::components::dfd;
use mcap::data::{cluster_normalizer, Cluster, HierarchicalDataset, UnitData};
use mcap::estimator::direction_candidate;
use mcap::inference::profile_information;
use mcap::likelihood::*;
use mcap::linalg::{inv_sqrt_spd, line_angle};
use mcap::simulation::{run_monte_carlo, MonteCarloConfig, MonteCarloReport, SimConfig, Table1Row};
use mcap::special::{estimate_vmf, sample_vmf, VmfParams};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

// Criterion 1
const C1_REPS: usize = 100;
const C1_MIN_SIMILARITY: f64 = 0.85;
const C1_MAX_ABS_BIAS_B11: f64 = 0.45;
const C1_MAX_MSE_B2: f64 = 0.10;
const C1_MAX_SECONDS: f64 = 30.0 * 60.0;
// Criterion 2
const C2_REPS: usize = 50;
const C2_MIN_SIMILARITY_GAP: f64 = 0.15;
const C2_MAX_BIAS_RATIO: f64 = 0.5;
const C2_MAX_SECONDS: f64 = 60.0 * 60.0;
// Criterion 3
const C3_REPS: usize = 25;
const C3_MIN_SIMILARITY: f64 = 0.93;
// Criterion 4
const C4_REPS: usize = 100;
const C4_BOOTSTRAP_B: usize = 200;
const C4_COVERAGE_RANGE: (f64, f64) = (85.0, 100.0);
// Criterion 5
const C5_INSTANCES: u64 = 50;
const C5_TRANSCRIPTION_TOL: f64 = 1e-10;
const C5_GRAD_TOL: f64 = 1e-6;
const C5_FD_STEP: f64 = 1e-5;
const C5_HESS_REL_TOL: f64 = 1e-4;
const C5_DECOMPOSITION_TOL: f64 = 1e-12;
const C5_SUMMATION_TOL: f64 = 1e-12;
// Criterion 6
const C6_ANGLE_TOL: f64 = 1e-8;
const C6_MESH_POINTS: usize = 1_000_000;
const C6_MESH_GAP_TOL: f64 = 1e-3;
// Criterion 7
const C7_EXACT_TOL: f64 = 1e-10;
const C7_HAND_VALUE: f64 = 1.5625;
const C7_RANDOM_FIXTURES: u64 = 1000;
// Criterion 9
const C9_EXACT_TOL: f64 = 1e-8;
const C9_KAPPA: f64 = 20.0;
const C9_DRAWS: usize = 2000;
const C9_ANGLE_TOL: f64 = 0.1;
const C9_KAPPA_REL_TOL: f64 = 0.10;
// Criterion 10
const C10_SCHUR_TOL: f64 = 1e-10;
const C10_LIMIT_REL_TOL: f64 = 0.01;
const C10_LIMIT_T: usize = 10_000;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

struct MonteCarloRun {
    report: MonteCarloReport,
    seconds: f64,
}

fn monte_carlo(p: usize, n: usize, reps: usize, scap: bool, b: usize) -> MonteCarloRun {
    eprintln!("running Monte Carlo p={p} n=T={n} reps={reps} B={b} ...");
    let mut config = MonteCarloConfig::new(SimConfig::standard(p, n, n), reps);
    config.scap = scap;
    config.bootstrap_b = b;
    let start = Instant::now();
    let report = run_monte_carlo(&config).expect("Monte Carlo run");
    let seconds = start.elapsed().as_secs_f64();
    eprintln!("  done in {seconds:.0} s");
    MonteCarloRun { report, seconds }
}

fn row<'a>(rows: &'a [Table1Row], method: &str) -> &'a Table1Row {
    rows.iter().find(|r| r.method == method).expect("table row")
}

// ---------------------------------------------------------------------------

fn criterion1(run: &MonteCarloRun) -> Outcome {
    let rows = run.report.table1();
    let m = row(&rows, "MCAP");
    let pass = m.gamma_similarity_mean >= C1_MIN_SIMILARITY
        && m.beta11_bias.abs() <= C1_MAX_ABS_BIAS_B11
        && m.beta2_mse <= C1_MAX_MSE_B2
        && run.seconds <= C1_MAX_SECONDS
        && run.report.failures() == 0;
    outcome(
        pass,
        format!(
            "similarity {:.4} (≥ {C1_MIN_SIMILARITY}), |bias β11| {:.4} (≤ {C1_MAX_ABS_BIAS_B11}), MSE β2 {:.4} (≤ {C1_MAX_MSE_B2}), {:.0} s, {} failed reps",
            m.gamma_similarity_mean,
            m.beta11_bias.abs(),
            m.beta2_mse,
            run.seconds,
            run.report.failures()
        ),
    )
}

fn criterion2(run: &MonteCarloRun) -> Outcome {
    let rows = run.report.table1();
    let (m, s) = (row(&rows, "MCAP"), row(&rows, "SCAP"));
    let gap = m.gamma_similarity_mean - s.gamma_similarity_mean;
    let ratio = m.beta11_bias.abs() / s.beta11_bias.abs();
    let pass = gap >= C2_MIN_SIMILARITY_GAP && ratio <= C2_MAX_BIAS_RATIO && run.seconds <= C2_MAX_SECONDS && run.report.failures() == 0;
    outcome(
        pass,
        format!(
            "similarity MCAP {:.4} vs SCAP {:.4}, gap {gap:.4} (≥ {C2_MIN_SIMILARITY_GAP}); |bias β11| MCAP {:.4} vs SCAP {:.4}, ratio {ratio:.4} (≤ {C2_MAX_BIAS_RATIO}); {:.0} s",
            m.gamma_similarity_mean,
            s.gamma_similarity_mean,
            m.beta11_bias.abs(),
            s.beta11_bias.abs(),
            run.seconds
        ),
    )
}

fn criterion3(run: &MonteCarloRun) -> Outcome {
    // The first reps of the coverage study are the same datasets and fits.
    let subset = MonteCarloReport {
        config: run.report.config.clone(),
        records: run.report.records[..C3_REPS].to_vec(),
    };
    let rows = subset.table1();
    let m = row(&rows, "MCAP");
    outcome(
        m.gamma_similarity_mean >= C3_MIN_SIMILARITY && m.reps == C3_REPS,
        format!("similarity {:.6} over {} reps (≥ {C3_MIN_SIMILARITY})", m.gamma_similarity_mean, m.reps),
    )
}

fn criterion4(run: &MonteCarloRun) -> Outcome {
    let cov = run.report.coverage();
    let get = |param: &str, method: &str| {
        cov.iter()
            .find(|r| r.param == param && r.method == method)
            .map(|r| r.coverage_pct)
            .expect("coverage row")
    };
    let boot = get("beta11", "Bootstrap");
    let asym = get("beta11", "Asymptotic");
    let pass = (C4_COVERAGE_RANGE.0..=C4_COVERAGE_RANGE.1).contains(&boot) && run.report.failures() == 0;
    outcome(
        pass,
        format!(
            "bootstrap β11 {boot:.1}% (in [{}, {}]); asymptotic β11 {asym:.1}% (reported); β21 bootstrap {:.1}%, asymptotic {:.1}%; {:.0} s",
            C4_COVERAGE_RANGE.0,
            C4_COVERAGE_RANGE.1,
            get("beta21", "Bootstrap"),
            get("beta21", "Asymptotic"),
            run.seconds
        ),
    )
}

fn instance(seed: u64) -> (HierarchicalDataset, McapParams) {
    let mut r = rng(seed);
    let p = r.random_range(2..=5);
    let (m, n) = (r.random_range(1..=3), r.random_range(1..=3));
    let (q1, q2) = (r.random_range(0..=2), r.random_range(0..=2));
    let ds = random_dataset(&mut r, m, n, 4 + p, p, q1, q2);
    let kappa = 3.0 * r.random::<f64>();
    let params = random_params(&mut r, &ds, kappa);
    (ds, params)
}

fn criterion5() -> Outcome {
    let mut worst = [0.0f64; 5];
    let mut ok = true;
    let obj = |p: &McapParams, ds: &HierarchicalDataset| neg_hlik(p, ds).unwrap();
    let central = |f: &dyn Fn(f64) -> f64| (f(C5_FD_STEP) - f(-C5_FD_STEP)) / (2.0 * C5_FD_STEP);
    let mixed = |f: &dyn Fn(f64, f64) -> f64| {
        let h = 1e-3;
        (f(h, h) - f(h, -h) - f(-h, h) + f(-h, -h)) / (4.0 * h * h)
    };
    let hess_err = |a: f64, fd: f64| (a - fd).abs() / a.abs().max(1.0);

    // Reference instance of the stated shape.
    let mut r = rng(11);
    let ds = random_dataset(&mut r, 2, 3, 4, 3, 1, 1);
    let params = random_params(&mut r, &ds, 2.5);
    let e = (obj(&params, &ds) - transcription(&params, &ds)).abs();
    worst[0] = worst[0].max(e);
    ok &= e <= C5_TRANSCRIPTION_TOL;

    for seed in 0..C5_INSTANCES {
        let (ds, params) = instance(seed);
        let value = obj(&params, &ds);
        let e = (value - transcription(&params, &ds)).abs() / value.abs().max(1.0);
        worst[0] = worst[0].max(e);
        ok &= e <= C5_TRANSCRIPTION_TOL;

        let data = ProjectedData::new(&ds, &params.gammas).unwrap();
        let parts = objective_parts(&data, &params).unwrap();
        let e = (parts.total() - value).abs() / value.abs().max(1.0);
        ok &= e <= C5_DECOMPOSITION_TOL;

        for i in 0..ds.m() {
            let g = grad_beta0i(&params, &ds, i).unwrap();
            let fd = central(&|d| {
                let mut q = params.clone();
                q.regression.beta0i[i] += d;
                obj(&q, &ds)
            });
            worst[1] = worst[1].max((g - fd).abs());
            let h = hess_beta0i(&params, &ds, i).unwrap();
            let shifted = |d: f64| {
                let mut q = params.clone();
                q.regression.beta0i[i] += d;
                obj(&q, &ds)
            };
            let second = (shifted(C5_FD_STEP) - 2.0 * shifted(0.0) + shifted(-C5_FD_STEP)) / (C5_FD_STEP * C5_FD_STEP);
            let fd = mixed(&|a, b| shifted(a + b));
            worst[2] = worst[2].max(hess_err(h, second).min(hess_err(h, fd)));

            let g2 = grad_beta2i(&params, &ds, i).unwrap();
            let h2 = hess_beta2i(&params, &ds, i).unwrap();
            for a in 0..ds.q2() {
                let fd = central(&|d| {
                    let mut q = params.clone();
                    q.regression.beta2i[i][a] += d;
                    obj(&q, &ds)
                });
                worst[1] = worst[1].max((g2[a] - fd).abs());
                for b in 0..ds.q2() {
                    let fd = mixed(&|u, v| {
                        let mut q = params.clone();
                        q.regression.beta2i[i][a] += u;
                        q.regression.beta2i[i][b] += v;
                        obj(&q, &ds)
                    });
                    worst[2] = worst[2].max(hess_err(h2[(a, b)], fd));
                }
            }

            let amat = direction_quadratic(&params, &ds, i).unwrap();
            let e = (&amat - direction_quadratic_oracle(&params, &ds, i)).amax() / amat.amax().max(1.0);
            worst[3] = worst[3].max(e);
            let kappa = params.vmf.concentration();
            let grad = &amat * &params.gammas[i] * 2.0 - params.vmf.mean_direction() * kappa;
            for x in 0..ds.p() {
                let fd = central(&|d| {
                    let mut q = params.clone();
                    q.gammas[i][x] += d;
                    transcription(&q, &ds)
                });
                worst[1] = worst[1].max((grad[x] - fd).abs());
                for y in 0..ds.p() {
                    let fd = mixed(&|u, v| {
                        let mut q = params.clone();
                        q.gammas[i][x] += u;
                        q.gammas[i][y] += v;
                        transcription(&q, &ds)
                    });
                    worst[2] = worst[2].max(hess_err(2.0 * amat[(x, y)], fd));
                }
            }
        }
        let g1 = grad_beta1(&params, &ds).unwrap();
        let h1 = hess_beta1(&params, &ds).unwrap();
        for a in 0..ds.q1() {
            let fd = central(&|d| {
                let mut q = params.clone();
                q.regression.beta1[a] += d;
                obj(&q, &ds)
            });
            worst[1] = worst[1].max((g1[a] - fd).abs());
            for b in 0..ds.q1() {
                let fd = mixed(&|u, v| {
                    let mut q = params.clone();
                    q.regression.beta1[a] += u;
                    q.regression.beta1[b] += v;
                    obj(&q, &ds)
                });
                worst[2] = worst[2].max(hess_err(h1[(a, b)], fd));
            }
        }
    }
    ok &= worst[1] <= C5_GRAD_TOL && worst[2] <= C5_HESS_REL_TOL && worst[3] <= C5_SUMMATION_TOL;
    outcome(
        ok,
        format!(
            "{C5_INSTANCES} instances: transcription {:.1e} (≤ {C5_TRANSCRIPTION_TOL:e}), gradients {:.1e} (≤ {C5_GRAD_TOL:e}), Hessians {:.1e} rel (≤ {C5_HESS_REL_TOL:e}), A_i summation {:.1e} (≤ {C5_SUMMATION_TOL:e})",
            worst[0], worst[1], worst[2], worst[3]
        ),
    )
}

fn criterion6() -> Outcome {
    let mut worst_angle = 0.0f64;
    for seed in 0..30 {
        let mut r = rng(1000 + seed);
        let p = r.random_range(2..=5);
        let ds = random_dataset(&mut r, 2, 4, 3 * p, p, 1, 1);
        let params = random_params(&mut r, &ds, 0.0);
        for i in 0..ds.m() {
            let a = direction_quadratic(&params, &ds, i).unwrap();
            let h = cluster_normalizer(&ds.clusters()[i]).unwrap().h;
            let cand = direction_candidate(&a, &inv_sqrt_spd(&h).unwrap(), 0.0, params.vmf.mean_direction()).unwrap();
            worst_angle = worst_angle.max(line_angle(&cand.gamma, &smallest_generalized_direction(&a, &h)));
        }
    }
    let mut r = rng(2);
    let mut worst_gap = 0.0f64;
    for _ in 0..10 {
        let a = random_cov(&mut r, 4, 12);
        let h = random_cov(&mut r, 4, 12) + DMatrix::identity(4, 4) * 0.1;
        let mean = unit(&mut r, 4);
        let kappa = 10f64.powf(-2.0 + 4.0 * r.random::<f64>());
        let got = direction_candidate(&a, &inv_sqrt_spd(&h).unwrap(), kappa, &mean).unwrap();
        let (grid, polished) = mesh_minimum_p4(&a, &h, kappa, &mean, C6_MESH_POINTS);
        worst_gap = worst_gap.max((got.working_value - polished).abs()).max(got.working_value - grid);
    }
    outcome(
        worst_angle <= C6_ANGLE_TOL && worst_gap <= C6_MESH_GAP_TOL,
        format!("κ = 0 angle {worst_angle:.1e} (≤ {C6_ANGLE_TOL:e}); p = 4 mesh gap {worst_gap:.1e} (≤ {C6_MESH_GAP_TOL:e})"),
    )
}

fn criterion7() -> Outcome {
    let mut r = rng(9);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let p = r.random_range(2..=7);
        let q = random_orthogonal(&mut r, p);
        let ds = common_basis_dataset(&mut r, &q, 3, 4);
        let k = r.random_range(1..=p);
        let g = q.columns(0, k).into_owned();
        worst = worst.max((dfd(&ds, &vec![g; ds.m()]).unwrap() - 1.0).abs());
    }
    let s = DMatrix::from_row_slice(2, 2, &[1.0, 0.6, 0.6, 1.0]);
    let ds = HierarchicalDataset::new(vec![Cluster {
        id: 0,
        units: vec![UnitData::from_covariance(0, 0, s, 5, DVector::zeros(0), DVector::zeros(0))],
    }])
    .unwrap();
    let hand = dfd(&ds, &[DMatrix::identity(2, 2)]).unwrap();
    let mut below = 0;
    let mut min_value = f64::INFINITY;
    for seed in 0..C7_RANDOM_FIXTURES {
        let mut r = rng(50_000 + seed);
        let p = r.random_range(2..=6);
        let k = r.random_range(1..=p);
        let (m, n) = (r.random_range(1..=3), r.random_range(1..=3));
        let ds = random_dataset(&mut r, m, n, 2 * p, p, 0, 0);
        let g: Vec<DMatrix<f64>> = (0..m).map(|_| random_orthogonal(&mut r, p).columns(0, k).into_owned()).collect();
        let v = dfd(&ds, &g).unwrap();
        min_value = min_value.min(v);
        if v < 1.0 {
            below += 1;
        }
    }
    outcome(
        worst <= C7_EXACT_TOL && hand == C7_HAND_VALUE && below == 0,
        format!(
            "common diagonalizer |DfD − 1| {worst:.1e} (≤ {C7_EXACT_TOL:e}); 2×2 hand case {hand} (= {C7_HAND_VALUE}); min over {C7_RANDOM_FIXTURES} random fixtures {min_value:.6} (≥ 1)"
        ),
    )
}

fn criterion8(runs: &[&MonteCarloRun]) -> Outcome {
    let fits: usize = runs.iter().map(|r| r.report.records.len()).sum();
    let violations: usize = runs.iter().map(|r| r.report.descent_violations()).sum();
    outcome(violations == 0, format!("{violations} objective increases over {fits} simulated fits (all starts)"))
}

fn criterion9() -> Outcome {
    let mut r = rng(21);
    let mut worst = 0.0f64;
    for p in [2usize, 3, 5, 10, 20] {
        for kappa in [0.5, 2.0, 20.0, 80.0] {
            let truth = VmfParams::new(unit(&mut r, p), kappa).unwrap();
            let dirs = sample_vmf(&truth, 300, &mut r);
            let sum = dirs.iter().fold(DVector::zeros(p), |acc, d| acc + d);
            let rbar = sum.norm() / dirs.len() as f64;
            let est = estimate_vmf(&dirs, true).unwrap();
            worst = worst.max((est.params.concentration() - inverse_mean_resultant_oracle(p, rbar)).abs());
        }
    }
    let mut angle = 0.0f64;
    let mut rel = 0.0f64;
    for p in [3usize, 5, 20] {
        let mean = unit(&mut r, p);
        let dirs = sample_vmf(&VmfParams::new(mean.clone(), C9_KAPPA).unwrap(), C9_DRAWS, &mut r);
        let est = estimate_vmf(&dirs, true).unwrap();
        angle = angle.max(line_angle(est.params.mean_direction(), &mean));
        rel = rel.max((est.params.concentration() - C9_KAPPA).abs() / C9_KAPPA);
    }
    outcome(
        worst <= C9_EXACT_TOL && angle <= C9_ANGLE_TOL && rel <= C9_KAPPA_REL_TOL,
        format!(
            "exact κ̂ vs A_p⁻¹(R̄) {worst:.1e} (≤ {C9_EXACT_TOL:e}); κ = {C9_KAPPA}, {C9_DRAWS} draws: angle {angle:.3} rad (≤ {C9_ANGLE_TOL}), concentration error {:.1}% (≤ {}%)",
            rel * 100.0,
            C9_KAPPA_REL_TOL * 100.0
        ),
    )
}

fn reg_for(ds: &HierarchicalDataset, sigma2: f64, omega: DMatrix<f64>) -> RegressionParams {
    RegressionParams {
        beta0i: vec![0.0; ds.m()],
        beta1: DVector::zeros(ds.q1()),
        beta2i: vec![DVector::zeros(ds.q2()); ds.m()],
        beta0: 0.0,
        sigma2,
        beta2: DVector::zeros(ds.q2()),
        omega,
    }
}

fn criterion10() -> Outcome {
    let rel = |a: &DMatrix<f64>, b: &DMatrix<f64>| (a - b).amax() / b.amax();
    let mut worst = 0.0f64;
    for seed in 0..50 {
        let mut r = rng(seed);
        let (q1, q2, m) = (r.random_range(1..=3), r.random_range(0..=2), r.random_range(2..=5));
        let ds = random_dataset(&mut r, m, 4, 10, 2, q1, q2);
        let sigma2 = 0.2 + r.random::<f64>();
        let omega = random_spd(&mut r, q2, 0.2);
        let info = profile_information(&ds, &reg_for(&ds, sigma2, omega.clone())).unwrap();
        worst = worst.max(rel(&info.j, &profile_information_oracle(&ds, sigma2, &omega)));
    }

    // (a) x1 centred within clusters: J = H11.
    let mut r = rng(31);
    let clusters = (0..4)
        .map(|i| {
            let xs: Vec<f64> = (0..3).map(|_| gauss(&mut r)).collect();
            let units = (0..6)
                .map(|j| {
                    let x = if j < 3 { xs[j] } else { -xs[j - 3] };
                    UnitData::from_covariance(i, j, random_cov(&mut r, 2, 10), C10_LIMIT_T, DVector::from_vec(vec![x]), DVector::zeros(0))
                })
                .collect();
            Cluster { id: i, units }
        })
        .collect();
    let ds = HierarchicalDataset::new(clusters).unwrap();
    let info = profile_information(&ds, &reg_for(&ds, 0.7, DMatrix::zeros(0, 0))).unwrap();
    let case_a = rel(&info.j, &info.h11);

    // (b) x1 constant within clusters, q2 = 0: J → m Q_B / σ².
    let (m, sigma2) = (8, 0.6);
    let mut qb = DMatrix::zeros(2, 2);
    let clusters = (0..m)
        .map(|i| {
            let x = gauss_vec(&mut r, 2);
            qb += &x * x.transpose() / m as f64;
            let units = (0..3)
                .map(|j| UnitData::from_covariance(i, j, random_cov(&mut r, 2, 10), C10_LIMIT_T, x.clone(), DVector::zeros(0)))
                .collect();
            Cluster { id: i, units }
        })
        .collect();
    let ds = HierarchicalDataset::new(clusters).unwrap();
    let info = profile_information(&ds, &reg_for(&ds, sigma2, DMatrix::zeros(0, 0))).unwrap();
    let case_b = rel(&info.j, &(qb * (m as f64 / sigma2)));
    outcome(
        worst <= C10_SCHUR_TOL && case_a <= C10_LIMIT_REL_TOL && case_b <= C10_LIMIT_REL_TOL,
        format!(
            "Schur oracle {worst:.1e} (≤ {C10_SCHUR_TOL:e}); limit (a) {case_a:.1e}, limit (b) {case_b:.1e} at T = {C10_LIMIT_T} (≤ {C10_LIMIT_REL_TOL})"
        ),
    )
}

fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

fn criterion11() -> Outcome {
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/toy");
    let obs = fixtures.join("obs.csv").display().to_string();
    let cov = fixtures.join("covariates.csv").display().to_string();
    let data: Vec<&str> = vec!["--obs", &obs, "--cov", &cov, "--starts", "4", "--seed", "17"];
    let commands: Vec<(&str, Vec<&str>)> = vec![
        ("fit", data.clone()),
        ("components", [data.clone(), vec!["--kmax", "2"]].concat()),
        ("bootstrap", [data.clone(), vec!["--B", "12"]].concat()),
        (
            "simulate",
            vec!["--p", "5", "--m", "4", "--n-mean", "6", "--t-mean", "30", "--reps", "3", "--B", "4", "--starts", "2", "--seed", "17"],
        ),
    ];
    let root = tempfile::tempdir().unwrap();
    let mut mismatched = Vec::new();
    let mut files = 0;
    for (name, args) in &commands {
        let mut outputs = Vec::new();
        for (run, threads) in ["1", "3", "1"].iter().enumerate() {
            let out = root.path().join(format!("{name}-{run}"));
            let status = Command::new(env!("CARGO_BIN_EXE_mcap"))
                .arg(name)
                .args(args)
                .args(["--out", out.to_str().unwrap(), "--threads", threads])
                .output()
                .unwrap();
            if !status.status.success() {
                return outcome(false, format!("{name} failed: {}", String::from_utf8_lossy(&status.stderr)));
            }
            if *name == "simulate" {
                let st = Command::new(env!("CARGO_BIN_EXE_mcap")).args(["report", "--out", out.to_str().unwrap()]).output().unwrap();
                if !st.status.success() {
                    return outcome(false, "report failed");
                }
            }
            outputs.push(read_dir_bytes(&out));
        }
        files += outputs[0].len();
        if outputs[0] != outputs[1] || outputs[0] != outputs[2] {
            mismatched.push(*name);
        }
    }
    outcome(
        mismatched.is_empty(),
        format!("fit, components, bootstrap, simulate + report at threads 1/3/1: {files} files per run, mismatches {mismatched:?}"),
    )
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        outcome(false, format!("panicked: {msg}"))
    })
}

fn main() {
    let start = Instant::now();
    let fast: Vec<(usize, &str, Outcome)> = vec![
        (5, "likelihood oracle", guarded(criterion5)),
        (6, "direction subproblem oracle", guarded(criterion6)),
        (7, "DfD exactness", guarded(criterion7)),
        (9, "vMF round trip", guarded(criterion9)),
        (10, "profile information", guarded(criterion10)),
        (11, "determinism", guarded(criterion11)),
    ];
    let c1 = monte_carlo(5, 100, C1_REPS, true, 0);
    let c2 = monte_carlo(20, 100, C2_REPS, true, 0);
    let c4 = monte_carlo(5, 500, C4_REPS, false, C4_BOOTSTRAP_B);
    let mut results: Vec<(usize, &str, Outcome)> = vec![
        (1, "simulation table, p = 5, n = T = 100", guarded(|| criterion1(&c1))),
        (2, "MCAP vs SCAP, p = 20, n = T = 100", guarded(|| criterion2(&c2))),
        (3, "large sample, p = 5, n = T = 500", guarded(|| criterion3(&c4))),
        (4, "coverage, p = 5, n = T = 500, B = 200", guarded(|| criterion4(&c4))),
        (8, "descent contract", guarded(|| criterion8(&[&c1, &c2, &c4]))),
    ];
    results.extend(fast);
    results.sort_by_key(|r| r.0);
    println!("acceptance criteria");
    let mut failed = 0;
    for (k, name, o) in &results {
        let tag = if o.pass { "PASS" } else { "FAIL" };
        if !o.pass {
            failed += 1;
        }
        println!("[{tag}] {k:>2}. {name}: {}", o.detail);
    }
    println!("{} passed, {failed} failed, {:.0} s", results.len() - failed, start.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}
