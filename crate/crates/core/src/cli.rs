//! Command-line front end.
//!
//! Exit codes: 0 success, 1 parse or I/O error, 2 invalid configuration,
//! 3 numerical failure, 4 amplitude rejected by the screening (`solve`).

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::bifurcation::CriticalPoint;
use crate::config::RunConfig;
use crate::continuation::BranchPoint;
use crate::error::{Error, Result};
use crate::linearized::{check_asymptotics, sl_spectrum, ASYMPTOTICS_BOUND};
use crate::pipeline::{Pipeline, SignReport};

pub const EXIT_OK: i32 = 0;
pub const EXIT_PARSE: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_REJECTED: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "rwave", version, about = "Periodic solutions of completely resonant nonlinear wave equations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides `out` in the configuration).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for parallel stages.
    #[arg(long)]
    workers: Option<usize>,
    /// Seed for the critical-point search and the Cantor sampling.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Critical point of the reduced functional at δ = 0.
    Q0(Common),
    /// Full solve at one amplitude.
    Solve {
        #[command(flatten)]
        common: Common,
        #[arg(long, allow_negative_numbers = true)]
        delta: f64,
    },
    /// Solves over the configured δ grid.
    Sweep(Common),
    /// Density of admissible amplitudes near δ = 0.
    Cantor(Common),
    /// Sturm-Liouville spectrum and eigenvalue asymptotics.
    Eigcheck(Common),
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Q0(c) | Command::Sweep(c) | Command::Cantor(c) | Command::Eigcheck(c) => c,
            Command::Solve { common, .. } => common,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Command::Q0(_) => "q0",
            Command::Solve { .. } => "solve",
            Command::Sweep(_) => "sweep",
            Command::Cantor(_) => "cantor",
            Command::Eigcheck(_) => "eigcheck",
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Parse(_) | Error::Io(_) => EXIT_PARSE,
        Error::Config(_) | Error::Domain(_) | Error::InvalidCutoff(_) | Error::DegenerateNonlinearity(_) => EXIT_VALIDATION,
        _ => EXIT_NUMERICAL,
    }
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_PARSE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn execute(cmd: &Command) -> Result<i32> {
    let common = cmd.common();
    let mut config = RunConfig::load(&common.config, &RunConfig::env_overrides())?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    let out = common.out.clone().unwrap_or_else(|| PathBuf::from(&config.out));
    if let Some(w) = common.workers {
        if w == 0 {
            return Err(Error::Config("--workers must be positive".into()));
        }
        // The global pool can only be configured once per process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(w).build_global();
    }
    std::fs::create_dir_all(&out)?;
    write_metadata(&out, cmd.name(), &common.config, common.workers)?;
    match cmd {
        Command::Q0(_) => cmd_q0(Pipeline::new(config)?, &out),
        Command::Solve { delta, .. } => cmd_solve(Pipeline::new(config)?, &out, *delta),
        Command::Sweep(_) => cmd_sweep(Pipeline::new(config)?, &out),
        Command::Cantor(_) => cmd_cantor(Pipeline::new(config)?, &out),
        Command::Eigcheck(_) => cmd_eigcheck(&config, &out),
    }
}

/// Writes through a temporary file so readers never see partial output.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Numeric(format!("JSON encoding: {e}")))?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

fn write_csv<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Numeric(format!("CSV encoding: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Numeric(format!("CSV encoding: {e}")))?;
    write_atomic(path, &bytes)
}

#[derive(Serialize)]
struct Metadata<'a> {
    command: &'a str,
    version: &'a str,
    timestamp_unix: u64,
    config: String,
    workers: Option<usize>,
}

fn write_metadata(out: &Path, command: &str, config: &Path, workers: Option<usize>) -> Result<()> {
    let ts = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    write_json(
        &out.join("metadata.json"),
        &Metadata { command, version: env!("CARGO_PKG_VERSION"), timestamp_unix: ts, config: config.display().to_string(), workers },
    )
}

#[derive(Serialize)]
struct Q0Report<'a> {
    sign: &'a SignReport,
    critical_point: &'a CriticalPoint,
    melnikov_m: f64,
    l_max: usize,
    j_max: usize,
}

#[derive(Serialize)]
struct EigRow {
    index: usize,
    eigenvalue: f64,
}

fn critical_point(pl: &Pipeline, out: &Path) -> Result<CriticalPoint> {
    let cp = pl.critical_point()?;
    let report = Q0Report { sign: &pl.sign, critical_point: &cp, melnikov_m: pl.melnikov_at(&cp)?, l_max: pl.problem.l_max(), j_max: pl.problem.j_max() };
    write_json(&out.join("q0").join("report.json"), &report)?;
    write_json(&out.join("q0").join("u0.json"), &cp.u0.to_json())?;
    let rows: Vec<EigRow> = cp.hessian_eigs.iter().enumerate().map(|(index, &eigenvalue)| EigRow { index, eigenvalue }).collect();
    write_csv(&out.join("q0").join("hessian.csv"), &rows)?;
    Ok(cp)
}

fn cmd_q0(pl: Pipeline, out: &Path) -> Result<i32> {
    let cp = critical_point(&pl, out)?;
    if let Some(note) = pl.sign.choice.as_ref().and_then(|c| c.note.as_ref()) {
        eprintln!("note: {note}");
    }
    if !cp.nondegenerate_mod_s1 {
        eprintln!("warning: the critical point is degenerate beyond the time-translation direction");
    }
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct StageRow {
    p: usize,
    l_p: usize,
    sigma_p: f64,
    residual: f64,
    accepted: bool,
    melnikov_m: f64,
    diophantine_worst_margin: f64,
    diophantine_violations: usize,
    diophantine_anomalies: usize,
    alpha_margin: f64,
    product_min: Option<f64>,
}

fn cmd_solve(pl: Pipeline, out: &Path, delta: f64) -> Result<i32> {
    if !(delta >= 0.0 && delta <= pl.schedule.delta0) {
        return Err(Error::Config(format!("δ = {delta} is outside [0, δ0 = {}]", pl.schedule.delta0)));
    }
    let cp = critical_point(&pl, out)?;
    let pt = pl.solve(&cp, delta)?;
    let dir = out.join("solve");
    write_json(&dir.join("report.json"), &pt)?;
    write_json(&dir.join("solution.json"), &pt.solution().to_json())?;
    let rows: Vec<StageRow> = pt
        .nash_moser
        .stages
        .iter()
        .map(|s| StageRow {
            p: s.p,
            l_p: s.l_p,
            sigma_p: s.sigma_p,
            residual: s.residual,
            accepted: s.accepted,
            melnikov_m: s.melnikov_m,
            diophantine_worst_margin: s.diophantine_worst_margin,
            diophantine_violations: s.diophantine_violations,
            diophantine_anomalies: s.diophantine_anomalies,
            alpha_margin: s.alpha_margin,
            product_min: s.product_min,
        })
        .collect();
    write_csv(&dir.join("stages.csv"), &rows)?;
    if !pt.accepted {
        eprintln!("rejected at stage {:?}: {}", pt.rejected_stage, pt.rejection.as_deref().unwrap_or("not accepted"));
        return Ok(EXIT_REJECTED);
    }
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct BranchRow {
    delta: f64,
    omega: f64,
    eps: f64,
    norm_v1: f64,
    norm_w: f64,
    pde_residual: f64,
    q1_residual: f64,
    amplitude_deviation: f64,
    accepted: bool,
    rejected_stage: Option<usize>,
    nondegenerate: bool,
    status: String,
}

impl BranchRow {
    fn from_point(p: &BranchPoint) -> Self {
        Self {
            delta: p.delta,
            omega: p.omega,
            eps: p.eps,
            norm_v1: p.norm_v1,
            norm_w: p.norm_w,
            pde_residual: p.pde_residual,
            q1_residual: p.q1_residual,
            amplitude_deviation: p.amplitude_deviation,
            accepted: p.accepted,
            rejected_stage: p.rejected_stage,
            nondegenerate: p.nondegenerate,
            status: "ok".into(),
        }
    }
}

fn cmd_sweep(pl: Pipeline, out: &Path) -> Result<i32> {
    let cp = critical_point(&pl, out)?;
    let deltas = pl.config.sweep.deltas.clone();
    let entries = pl.sweep(&cp, &deltas);
    let dir = out.join("sweep");
    let mut rows = Vec::with_capacity(entries.len());
    for (i, (delta, res)) in entries.iter().enumerate() {
        match res {
            Ok(p) => {
                write_json(&dir.join("points").join(format!("delta_{i:03}.json")), p)?;
                rows.push(BranchRow::from_point(p));
            }
            Err(e) => rows.push(BranchRow {
                delta: *delta,
                omega: pl.problem.nl.omega(*delta),
                eps: pl.problem.nl.epsilon(*delta),
                norm_v1: f64::NAN,
                norm_w: f64::NAN,
                pde_residual: f64::NAN,
                q1_residual: f64::NAN,
                amplitude_deviation: f64::NAN,
                accepted: false,
                rejected_stage: None,
                nondegenerate: false,
                status: format!("error: {e}"),
            }),
        }
    }
    write_csv(&dir.join("branch.csv"), &rows)?;
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct DensityRow {
    eta: f64,
    density_sampled: f64,
    sampled_std_error: f64,
    density_interval: f64,
    density_lower_bound: f64,
    density_interval_doubled: f64,
    k_max: usize,
    n_samples: usize,
    excluded_intervals: usize,
    gated_intervals: usize,
    warning: String,
}

#[derive(Serialize)]
struct IntervalRow {
    lo: f64,
    hi: f64,
    k: usize,
    j: usize,
    condition: u8,
    gated: bool,
}

#[derive(Serialize)]
struct CantorSummary<'a> {
    problem: &'a crate::cantor::CantorProblem,
    rows: &'a [DensityRow],
}

fn cmd_cantor(pl: Pipeline, out: &Path) -> Result<i32> {
    let cp = if pl.cantor_needs_critical_point() { Some(critical_point(&pl, out)?) } else { None };
    let problem = pl.cantor_problem(cp.as_ref())?;
    let c = &pl.config.cantor;
    let curve = problem.density_curve(&c.etas, c.samples, pl.config.seed)?;
    let dir = out.join("cantor");
    let mut rows = Vec::new();
    for (i, est) in curve.iter().enumerate() {
        if let Some(w) = &est.warning {
            eprintln!("warning (η = {}): {w}", est.eta);
        }
        let ivs: Vec<IntervalRow> = est
            .excluded_intervals
            .iter()
            .map(|iv| IntervalRow { lo: iv.lo, hi: iv.hi, k: iv.k, j: iv.j, condition: iv.condition, gated: iv.gated })
            .collect();
        write_csv(&dir.join(format!("intervals_{i}.csv")), &ivs)?;
        rows.push(DensityRow {
            eta: est.eta,
            density_sampled: est.density_sampled,
            sampled_std_error: est.sampled_std_error,
            density_interval: est.density_interval,
            density_lower_bound: est.density_lower_bound,
            density_interval_doubled: est.density_interval_doubled,
            k_max: est.k_max,
            n_samples: est.n_samples,
            excluded_intervals: est.excluded_intervals.len(),
            gated_intervals: est.gated_intervals,
            warning: est.warning.clone().unwrap_or_default(),
        });
    }
    write_csv(&dir.join("density.csv"), &rows)?;
    write_json(&dir.join("summary.json"), &CantorSummary { problem: &problem, rows: &rows })?;
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct SpectrumRow {
    k: usize,
    j: usize,
    lambda: f64,
    divisor: f64,
}

#[derive(Serialize)]
struct AsymptoticsRow {
    j: usize,
    r_j: f64,
}

#[derive(Serialize)]
struct EigReport {
    eps: f64,
    k: usize,
    j_max: usize,
    melnikov_m: f64,
    a0_h1_norm: f64,
    window: (usize, usize),
    window_sup: f64,
    lower_half_sup: f64,
    upper_half_sup: f64,
    bound: f64,
    pass: bool,
}

fn cmd_eigcheck(config: &RunConfig, out: &Path) -> Result<i32> {
    let e = &config.eigcheck;
    let spec = sl_spectrum(e.eps, &e.a0, e.k, e.j_max)?;
    let w2m1 = 2.0 * e.eps;
    let kk = (e.k * e.k) as f64;
    let rows: Vec<SpectrumRow> = spec
        .labels
        .iter()
        .zip(&spec.eigenvalues)
        .map(|(&j, &lambda)| SpectrumRow { k: e.k, j, lambda, divisor: (1.0 + w2m1) * kk - lambda })
        .collect();
    let m = e.a0.mean();
    let h1 = e.a0.h1_norm();
    let rep = check_asymptotics(&spec, e.eps, m, h1, ASYMPTOTICS_BOUND);
    let dir = out.join("eigcheck");
    write_csv(&dir.join("spectrum.csv"), &rows)?;
    let ar: Vec<AsymptoticsRow> = rep.j.iter().zip(&rep.r).map(|(&j, &r_j)| AsymptoticsRow { j, r_j }).collect();
    write_csv(&dir.join("asymptotics.csv"), &ar)?;
    write_json(
        &dir.join("report.json"),
        &EigReport {
            eps: e.eps,
            k: e.k,
            j_max: e.j_max,
            melnikov_m: m,
            a0_h1_norm: h1,
            window: rep.window,
            window_sup: rep.window_sup,
            lower_half_sup: rep.lower_half_sup,
            upper_half_sup: rep.upper_half_sup,
            bound: rep.bound,
            pass: rep.pass,
        },
    )?;
    Ok(EXIT_OK)
}
