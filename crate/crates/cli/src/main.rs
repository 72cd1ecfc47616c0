//! `mcap` command-line front end.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mcap::components::select_k;
use mcap::data::HierarchicalDataset;
use mcap::estimator::{fit, FitConfig, FitResult};
use mcap::inference::{asymptotic_ci, bootstrap, BootstrapConfig, Interval};
use mcap::io::{read_covariance_manifest, read_observations, ParamsRecord};
use mcap::simulation::{
    read_rows, replication_data, run_monte_carlo, write_rows, CoverageRow, MonteCarloConfig, RepRow, SimConfig,
    Table1Row,
};
use mcap::McapError;
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Parser, Debug)]
#[command(name = "mcap", version, about = "Multilevel covariate-assisted principal regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit the first component.
    Fit(FitArgs),
    /// Extract components and choose their number by DfD.
    Components(ComponentArgs),
    /// Two-stage bootstrap and asymptotic intervals.
    Bootstrap(BootstrapArgs),
    /// Monte-Carlo study on synthetic data.
    Simulate(SimulateArgs),
    /// Markdown summary of the artifacts in an output directory.
    Report(ReportArgs),
}

#[derive(Args, Debug, Clone, Serialize)]
struct DataArgs {
    /// Long-format observations CSV (cluster_id,unit_id,t,v1..vp).
    #[arg(long)]
    obs: Option<PathBuf>,
    /// Covariates CSV (cluster_id,unit_id,x1_*,x2_*).
    #[arg(long)]
    cov: PathBuf,
    /// JSON manifest of precomputed covariance matrices.
    #[arg(long, conflicts_with = "obs")]
    manifest: Option<PathBuf>,
    /// Subtract per-unit means before forming covariances.
    #[arg(long)]
    center: bool,
}

#[derive(Args, Debug, Clone, Serialize)]
struct CommonArgs {
    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    starts: usize,
    #[arg(long = "max-iters", default_value_t = 500)]
    max_iters: usize,
    #[arg(long = "rel-tol", default_value_t = 1e-10)]
    rel_tol: f64,
    /// Worker threads (results do not depend on this).
    #[arg(long)]
    #[serde(skip)]
    threads: Option<usize>,
}

#[derive(Args, Debug, Serialize)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args, Debug, Serialize)]
struct ComponentArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long, default_value_t = 3)]
    kmax: usize,
    #[arg(long = "dfd-threshold", default_value_t = 2.0)]
    dfd_threshold: f64,
}

#[derive(Args, Debug, Serialize)]
struct BootstrapArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long = "B", default_value_t = 500)]
    b: usize,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
}

#[derive(Args, Debug, Serialize)]
struct SimulateArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long, default_value_t = 5)]
    p: usize,
    #[arg(long, default_value_t = 20)]
    m: usize,
    #[arg(long = "n-mean", default_value_t = 100)]
    n_mean: usize,
    #[arg(long = "t-mean", default_value_t = 100)]
    t_mean: usize,
    /// Concentration of the true cluster eigenvectors.
    #[arg(long, default_value_t = 100.0)]
    kappa: f64,
    #[arg(long, default_value_t = 100)]
    reps: usize,
    /// Bootstrap replicates per dataset; 0 skips the coverage study.
    #[arg(long = "B", default_value_t = 0)]
    b: usize,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long, default_value_t = 1)]
    kmax: usize,
    #[arg(long = "dfd-threshold", default_value_t = 2.0)]
    dfd_threshold: f64,
    /// Skip the per-cluster single-level baseline.
    #[arg(long = "no-scap")]
    no_scap: bool,
}

#[derive(Args, Debug, Serialize)]
struct ReportArgs {
    /// Directory holding the artifacts; report.md is written there.
    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
}

/// Seed, configuration hash and version stamped on every output.
struct Meta {
    seed: u64,
    hash: String,
}

impl Meta {
    fn new<T: Serialize>(command: &str, seed: u64, config: &T) -> Self {
        let canonical = json!({ "command": command, "config": config, "version": VERSION }).to_string();
        let digest = Sha256::digest(canonical.as_bytes());
        let hash = digest.iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        });
        Self { seed, hash }
    }

    fn line(&self) -> String {
        format!("seed={}, config_hash={}, version={}", self.seed, self.hash, VERSION)
    }

    fn json(&self) -> Value {
        json!({ "seed": self.seed, "config_hash": self.hash, "version": VERSION })
    }
}

#[derive(Debug)]
enum CliError {
    Input(String),
    Numeric(String),
}

impl From<McapError> for CliError {
    fn from(e: McapError) -> Self {
        if e.is_input_error() {
            CliError::Input(e.to_string())
        } else {
            CliError::Numeric(e.to_string())
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Input(e.to_string())
    }
}

type CliResult<T> = Result<T, CliError>;

fn load(data: &DataArgs) -> CliResult<HierarchicalDataset> {
    match (&data.obs, &data.manifest) {
        (Some(obs), None) => Ok(read_observations(obs, &data.cov, data.center)?),
        (None, Some(manifest)) => {
            if data.center {
                return Err(CliError::Input("--center needs raw observations (--obs)".into()));
            }
            Ok(read_covariance_manifest(manifest, &data.cov)?)
        }
        _ => Err(CliError::Input("give exactly one of --obs or --manifest".into())),
    }
}

fn fit_config(common: &CommonArgs) -> FitConfig {
    FitConfig {
        max_iters: common.max_iters,
        rel_tol: common.rel_tol,
        n_starts: common.starts,
        seed: common.seed,
        ..FitConfig::default()
    }
}

fn prepare(common: &CommonArgs) -> CliResult<()> {
    fs::create_dir_all(&common.out)?;
    if let Some(n) = common.threads {
        if n == 0 {
            return Err(CliError::Input("--threads must be at least 1".into()));
        }
        // Fails only if a pool already exists, which cannot happen here.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn create(dir: &Path, name: &str) -> CliResult<BufWriter<File>> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn write_json(dir: &Path, name: &str, value: &Value) -> CliResult<()> {
    let mut f = create(dir, name)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    writeln!(f)?;
    f.flush()?;
    Ok(())
}

fn write_trace(dir: &Path, meta: &Meta, result: &FitResult) -> CliResult<()> {
    let mut f = create(dir, "trace.csv")?;
    writeln!(f, "# {}", meta.line())?;
    writeln!(f, "start,iteration,objective")?;
    for s in &result.starts {
        for (it, v) in s.trace.iter().enumerate() {
            writeln!(f, "{},{},{:?}", s.index, it, v)?;
        }
    }
    f.flush()?;
    Ok(())
}

fn params_json(meta: &Meta, result: &FitResult) -> CliResult<Value> {
    Ok(json!({
        "meta": meta.json(),
        "objective": result.objective,
        "converged": result.converged,
        "iterations": result.iterations,
        "start_index": result.start_index,
        "params": serde_json::to_value(ParamsRecord::from_params(&result.params))?,
    }))
}

fn cmd_fit(args: &FitArgs) -> CliResult<()> {
    prepare(&args.common)?;
    let meta = Meta::new("fit", args.common.seed, args);
    let dataset = load(&args.data)?;
    let result = fit(&dataset, &fit_config(&args.common))?;
    let out = &args.common.out;
    write_json(out, "params.json", &params_json(&meta, &result)?)?;
    write_trace(out, &meta, &result)?;
    let reg = &result.params.regression;
    let mut s = create(out, "summary.txt")?;
    writeln!(s, "# {}", meta.line())?;
    writeln!(s, "clusters: {}  units: {}  p: {}  q1: {}  q2: {}", dataset.m(), dataset.n_units(), dataset.p(), dataset.q1(), dataset.q2())?;
    writeln!(s, "objective: {:?}", result.objective)?;
    writeln!(s, "best start: {}  iterations: {}  converged: {}", result.start_index, result.iterations, result.converged)?;
    writeln!(s, "failed starts: {}", result.starts.iter().filter(|x| x.error.is_some()).count())?;
    writeln!(s, "clamped predictors: {}", result.clamp_count)?;
    writeln!(s, "beta0: {:?}  sigma2: {:?}", reg.beta0, reg.sigma2)?;
    writeln!(s, "beta1: {:?}", reg.beta1.iter().collect::<Vec<_>>())?;
    writeln!(s, "beta2: {:?}", reg.beta2.iter().collect::<Vec<_>>())?;
    writeln!(s, "kappa: {:?}", result.params.vmf.concentration())?;
    s.flush()?;
    Ok(())
}

fn cmd_components(args: &ComponentArgs) -> CliResult<()> {
    prepare(&args.common)?;
    if args.kmax == 0 {
        return Err(CliError::Input("--kmax must be at least 1".into()));
    }
    let meta = Meta::new("components", args.common.seed, args);
    let dataset = load(&args.data)?;
    let set = select_k(&dataset, &fit_config(&args.common), args.kmax, args.dfd_threshold)?;
    let out = &args.common.out;
    let components = set
        .fits
        .iter()
        .zip(&set.dfd_values)
        .enumerate()
        .map(|(k, (f, d))| -> CliResult<Value> {
            Ok(json!({
                "component": k + 1,
                "dfd": d,
                "objective": f.objective,
                "params": serde_json::to_value(ParamsRecord::from_params(&f.params))?,
            }))
        })
        .collect::<CliResult<Vec<_>>>()?;
    write_json(
        out,
        "components.json",
        &json!({ "meta": meta.json(), "selected_k": set.k(), "threshold": args.dfd_threshold, "components": components }),
    )?;
    let mut f = create(out, "dfd.csv")?;
    writeln!(f, "# {}", meta.line())?;
    writeln!(f, "k,dfd,selected")?;
    for (k, d) in set.dfd_trace.iter().enumerate() {
        writeln!(f, "{},{:?},{}", k + 1, d, k < set.k())?;
    }
    f.flush()?;
    Ok(())
}

fn interval_json(v: &[Interval]) -> CliResult<Value> {
    Ok(serde_json::to_value(v)?)
}

fn cmd_bootstrap(args: &BootstrapArgs) -> CliResult<()> {
    prepare(&args.common)?;
    if args.b == 0 || !(args.alpha > 0.0 && args.alpha < 1.0) {
        return Err(CliError::Input("--B must be positive and --alpha in (0, 1)".into()));
    }
    let meta = Meta::new("bootstrap", args.common.seed, args);
    let dataset = load(&args.data)?;
    let config = fit_config(&args.common);
    let full = fit(&dataset, &config)?;
    let boot = bootstrap(
        &dataset,
        &full,
        &BootstrapConfig {
            b: args.b,
            alpha: args.alpha,
            seed: args.common.seed,
            fit: config,
        },
    )?;
    let asym = asymptotic_ci(&dataset, &full.params.regression, args.alpha)?;
    let out = &args.common.out;
    let mut f = create(out, "bootstrap.csv")?;
    writeln!(f, "# {}", meta.line())?;
    writeln!(f, "replicate,{}", boot.names.join(","))?;
    for r in 0..boot.replicates.nrows() {
        let row: Vec<String> = boot.replicates.row(r).iter().map(|v| format!("{v:?}")).collect();
        writeln!(f, "{},{}", r, row.join(","))?;
    }
    f.flush()?;
    write_json(
        out,
        "ci.json",
        &json!({
            "meta": meta.json(),
            "alpha": args.alpha,
            "B": boot.b,
            "dropped": boot.dropped,
            "degenerate": boot.degenerate,
            "intervals": interval_json(&boot.percentile)?,
            "normal": interval_json(&boot.normal)?,
            "asymptotic": interval_json(&asym.intervals)?,
            "asymptotic_pseudo_inverse": asym.pseudo_inverse_used,
            "rate_ratio": asym.rate_ratio,
            "params": serde_json::to_value(ParamsRecord::from_params(&full.params))?,
        }),
    )?;
    Ok(())
}

fn cmd_simulate(args: &SimulateArgs) -> CliResult<()> {
    prepare(&args.common)?;
    let meta = Meta::new("simulate", args.common.seed, args);
    let sim = SimConfig {
        m: args.m,
        kappa_true: args.kappa,
        seed: args.common.seed,
        ..SimConfig::standard(args.p, args.n_mean, args.t_mean)
    };
    sim.validate()?;
    let mc = MonteCarloConfig {
        fit: fit_config(&args.common),
        scap: !args.no_scap,
        bootstrap_b: args.b,
        alpha: args.alpha,
        k_max: args.kmax,
        dfd_threshold: args.dfd_threshold,
        ..MonteCarloConfig::new(sim.clone(), args.reps)
    };
    let report = run_monte_carlo(&mc)?;
    let out = &args.common.out;
    let line = meta.line();
    write_rows(create(out, "table1.csv")?, Some(&line), &report.table1())?;
    let coverage = report.coverage();
    if !coverage.is_empty() {
        write_rows(create(out, "coverage.csv")?, Some(&line), &coverage)?;
    }
    let rows: Vec<RepRow> = report.records.iter().map(RepRow::from).collect();
    write_rows(create(out, "replications.csv")?, Some(&line), &rows)?;
    let (_, truth) = replication_data(&sim, 0)?;
    write_json(
        out,
        "truth.json",
        &json!({ "meta": meta.json(), "replication": 0, "config": serde_json::to_value(&sim)?, "truth": truth.to_json() }),
    )?;
    if report.failures() > 0 {
        log::warn!("{} of {} replications failed; see replications.csv", report.failures(), args.reps);
    }
    Ok(())
}

fn fmt3(v: f64) -> String {
    format!("{v:.3}")
}

fn cmd_report(args: &ReportArgs) -> CliResult<()> {
    let dir = &args.out;
    let mut md = String::new();
    let mut stamps = Vec::new();
    let table1 = dir.join("table1.csv");
    if table1.exists() {
        stamps.push(first_line(&table1)?);
        let rows: Vec<Table1Row> = read_rows(&table1)?;
        md.push_str("## Simulation performance\n\n");
        md.push_str("| p | n | T | Method | γ similarity (SE) | β11 Bias | β11 MSE | β2 Bias | β2 MSE | mean-direction similarity | reps |\n");
        md.push_str("|---|---|---|---|---|---|---|---|---|---|---|\n");
        for r in &rows {
            let _ = writeln!(
                md,
                "| {} | {} | {} | {} | {} ({}) | {} | {} | {} | {} | {} | {} |",
                r.p,
                r.n,
                r.t,
                r.method,
                fmt3(r.gamma_similarity_mean),
                fmt3(r.gamma_similarity_se),
                fmt3(r.beta11_bias),
                fmt3(r.beta11_mse),
                fmt3(r.beta2_bias),
                fmt3(r.beta2_mse),
                fmt3(r.mean_direction_similarity),
                r.reps
            );
        }
        md.push('\n');
    }
    let coverage = dir.join("coverage.csv");
    if coverage.exists() {
        stamps.push(first_line(&coverage)?);
        let rows: Vec<CoverageRow> = read_rows(&coverage)?;
        let get = |param: &str, method: &str| {
            rows.iter()
                .find(|r| r.param == param && r.method == method)
                .map_or("-".to_string(), |r| format!("{:.1}", r.coverage_pct))
        };
        if let Some(r) = rows.first() {
            md.push_str("## Coverage probability (%)\n\n");
            md.push_str("| p | n | T | β11 Bootstrap | β11 Asymptotic | β21 Bootstrap | β21 Asymptotic |\n");
            md.push_str("|---|---|---|---|---|---|---|\n");
            let _ = writeln!(
                md,
                "| {} | {} | {} | {} | {} | {} | {} |\n",
                r.p,
                r.n,
                r.t,
                get("beta11", "Bootstrap"),
                get("beta11", "Asymptotic"),
                get("beta21", "Bootstrap"),
                get("beta21", "Asymptotic")
            );
        }
    }
    let ci = dir.join("ci.json");
    if ci.exists() {
        let v: Value = serde_json::from_reader(File::open(&ci)?)?;
        stamps.push(meta_line(&v));
        let level = 100.0 * (1.0 - v["alpha"].as_f64().unwrap_or(0.05));
        let boot: Vec<Interval> = serde_json::from_value(v["intervals"].clone())?;
        md.push_str("## Estimated coefficients\n\n");
        let _ = writeln!(md, "| Parameter | Estimate | SE | {level:.0}% bootstrap CI |");
        md.push_str("|---|---|---|---|\n");
        for i in &boot {
            let _ = writeln!(md, "| {} | {} | {} | ({}, {}) |", i.name, fmt3(i.estimate), fmt3(i.se), fmt3(i.lower), fmt3(i.upper));
        }
        md.push('\n');
    }
    let params = dir.join("params.json");
    if params.exists() {
        let v: Value = serde_json::from_reader(File::open(&params)?)?;
        stamps.push(meta_line(&v));
        let rec: ParamsRecord = serde_json::from_value(v["params"].clone())?;
        rec.to_params()?;
        md.push_str("## Fitted model\n\n");
        let _ = writeln!(md, "- objective: {}", v["objective"]);
        let _ = writeln!(md, "- β0 = {}, σ² = {}, κ = {}", fmt3(rec.beta0), fmt3(rec.sigma2), fmt3(rec.kappa));
        let _ = writeln!(md, "- β1 = {:?}", rec.beta1.iter().map(|x| fmt3(*x)).collect::<Vec<_>>());
        let _ = writeln!(md, "- β2 = {:?}\n", rec.beta2.iter().map(|x| fmt3(*x)).collect::<Vec<_>>());
    }
    if md.is_empty() {
        return Err(CliError::Input(format!("{} holds no table1.csv, coverage.csv, ci.json or params.json", dir.display())));
    }
    let mut f = create(dir, "report.md")?;
    writeln!(f, "# MCAP report\n")?;
    for s in stamps {
        writeln!(f, "<!-- {s} -->")?;
    }
    writeln!(f)?;
    f.write_all(md.as_bytes())?;
    f.flush()?;
    Ok(())
}

fn first_line(path: &Path) -> CliResult<String> {
    let text = fs::read_to_string(path)?;
    Ok(text.lines().next().unwrap_or("").trim_start_matches("# ").to_string())
}

fn meta_line(v: &Value) -> String {
    let m = &v["meta"];
    format!("seed={}, config_hash={}, version={}", m["seed"], m["config_hash"].as_str().unwrap_or(""), m["version"].as_str().unwrap_or(""))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Components(a) => cmd_components(a),
        Command::Bootstrap(a) => cmd_bootstrap(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Input(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Numeric(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
