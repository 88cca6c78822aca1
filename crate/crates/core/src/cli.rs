//! Command-line front end: `solve`, `certify` and `bench`.
//!
//! Exit codes: 0 success, 1 usage or input error, 2 iteration limit,
//! 3 numerical failure or stale point, 4 negative certificate.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::alm::{self, AlmConfig, AlmStatus, AlmTrace, Criterion, RhoUpdate};
use crate::certify::{self, CertificateReport, Verdict};
use crate::error::Error;
use crate::linalg::{SymMatrix, Vector};
use crate::problem::{hadamard_problem, toy_problem, toy_problem_flipped, KktPoint, Problem};
use crate::ssn::NewtonConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_MAX_ITER: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_NEGATIVE: i32 = 4;

pub const SEED_ENV: &str = "NLSDP_ALM_SEED";

pub const TRACE_HEADER: &str = "k,rho,rho_tilde,inner_iters,cg_iters,alm_value,grad_norm,kkt_residual,dist_mult,dY_norm,time_s";
pub const BENCH_HEADER: &str = "n,q,iterations,kkt_residual,cpu_s";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemSpec {
    Toy,
    ToyFlipped,
    Hadamard { n: usize, q: f64 },
}

impl ProblemSpec {
    pub fn build(&self) -> crate::Result<Box<dyn Problem>> {
        Ok(match *self {
            ProblemSpec::Toy => Box::new(toy_problem()),
            ProblemSpec::ToyFlipped => Box::new(toy_problem_flipped()),
            ProblemSpec::Hadamard { n, q } => Box::new(hadamard_problem(n, q)?),
        })
    }
}

/// Everything a `solve` run depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemSpec,
    #[serde(default)]
    pub alm: AlmConfig,
    #[serde(default)]
    pub newton: NewtonConfig,
    #[serde(default)]
    pub seed: u64,
    /// Size of the random multiplier perturbation around the reference point.
    #[serde(default = "default_perturbation")]
    pub perturbation: f64,
    #[serde(default)]
    pub trace_path: Option<PathBuf>,
    #[serde(default)]
    pub summary_path: Option<PathBuf>,
}

fn default_perturbation() -> f64 {
    0.1
}

impl RunConfig {
    pub fn from_json(s: &str) -> crate::Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::InvalidInput(format!("bad config: {e}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Seeded start near the problem's reference KKT point.
    pub fn start(&self, p: &dyn Problem) -> crate::Result<KktPoint> {
        let reference = p
            .stationary_point()
            .ok_or_else(|| Error::InvalidInput(format!("{} has no reference point", p.name())))?;
        alm::perturbed_start(p, &reference, self.perturbation, self.seed)
    }
}

#[derive(Debug, Parser)]
#[command(name = "nlsdp", version, about = "Augmented Lagrangian solver and second-order certificates for NLSDPs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the augmented Lagrangian method from a seeded start.
    Solve(SolveArgs),
    /// Certify strong second-order sufficiency at a KKT point.
    Certify(CertifyArgs),
    /// Solve a list of hadamard instances and tabulate the results.
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ProblemKind {
    Toy,
    ToyFlipped,
    Hadamard,
}

#[derive(Debug, Args)]
struct ProblemArgs {
    #[arg(long, value_enum, default_value = "toy")]
    problem: ProblemKind,
    /// Matrix order (hadamard).
    #[arg(long, default_value_t = 3)]
    n: usize,
    /// Diagonal weight, at least n-1 (hadamard).
    #[arg(long)]
    q: Option<f64>,
}

impl ProblemArgs {
    fn spec(&self) -> ProblemSpec {
        match self.problem {
            ProblemKind::Toy => ProblemSpec::Toy,
            ProblemKind::ToyFlipped => ProblemSpec::ToyFlipped,
            ProblemKind::Hadamard => {
                ProblemSpec::Hadamard { n: self.n, q: self.q.unwrap_or(self.n.saturating_sub(1).max(1) as f64) }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum RhoUpdateKind {
    Fixed,
    Geometric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum CriterionArg {
    A,
    B,
    C,
}

#[derive(Debug, Args)]
struct AlmArgs {
    #[arg(long)]
    rho0: Option<f64>,
    #[arg(long)]
    rho_bar: Option<f64>,
    #[arg(long, value_enum)]
    rho_update: Option<RhoUpdateKind>,
    /// Growth factor for the geometric penalty update.
    #[arg(long)]
    rho_factor: Option<f64>,
    #[arg(long)]
    rho_max: Option<f64>,
    #[arg(long, value_enum)]
    criterion: Option<CriterionArg>,
    /// KKT residual tolerance.
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    max_outer: Option<usize>,
    #[arg(long)]
    eps0: Option<f64>,
    #[arg(long)]
    eps_decay: Option<f64>,
    #[arg(long)]
    supplement_c: Option<f64>,
    #[arg(long)]
    max_newton: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    perturbation: Option<f64>,
    /// Write zeros in timing columns (for reproducible files).
    #[arg(long)]
    no_timing: bool,
}

impl AlmArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        let a = &mut cfg.alm;
        if let Some(v) = self.rho0 {
            a.rho0 = v;
            a.rho_max = a.rho_max.max(v);
        }
        if let Some(v) = self.rho_bar {
            a.rho_bar = v;
        }
        let factor = self.rho_factor.unwrap_or(match a.rho_update {
            RhoUpdate::Geometric(f) => f,
            RhoUpdate::Fixed => 2.0,
        });
        match self.rho_update {
            Some(RhoUpdateKind::Fixed) => a.rho_update = RhoUpdate::Fixed,
            Some(RhoUpdateKind::Geometric) => a.rho_update = RhoUpdate::Geometric(factor),
            None => {
                if let RhoUpdate::Geometric(_) = a.rho_update {
                    a.rho_update = RhoUpdate::Geometric(factor);
                }
            }
        }
        if let Some(v) = self.rho_max {
            a.rho_max = v;
        }
        if let Some(c) = self.criterion {
            a.criterion = match c {
                CriterionArg::A => Criterion::A,
                CriterionArg::B => Criterion::B,
                CriterionArg::C => Criterion::C,
            };
        }
        if let Some(v) = self.tol {
            a.kkt_tol = v;
        }
        if let Some(v) = self.max_outer {
            a.max_outer = v;
        }
        if let Some(v) = self.eps0 {
            a.eps0 = v;
        }
        if let Some(v) = self.eps_decay {
            a.eps_decay = v;
        }
        if self.supplement_c.is_some() {
            a.supplement_c = self.supplement_c;
        }
        a.timing = !self.no_timing;
        if let Some(v) = self.max_newton {
            cfg.newton.max_iters = v;
        }
        cfg.seed = self.seed;
        if let Some(v) = self.perturbation {
            cfg.perturbation = v;
        }
    }
}

#[derive(Debug, Args)]
struct SolveArgs {
    #[command(flatten)]
    problem: ProblemArgs,
    #[command(flatten)]
    alm: AlmArgs,
    /// JSON run configuration; replaces all solver flags when given.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Per-iteration CSV trace.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Summary JSON (printed to stdout as well).
    #[arg(long)]
    summary: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CertifyArgs {
    #[command(flatten)]
    problem: ProblemArgs,
    /// JSON file with fields `x`, `y` (rows) and optionally `z`.
    #[arg(long, conflicts_with = "builtin_stationary", required_unless_present = "builtin_stationary")]
    point: Option<PathBuf>,
    /// Use the problem's known KKT point.
    #[arg(long)]
    builtin_stationary: bool,
    /// Comma-separated increasing penalty values for the bundle check.
    #[arg(long, default_value = "1,10,100,1000", value_delimiter = ',')]
    rho_grid: Vec<f64>,
    /// Positivity threshold for both checks.
    #[arg(long, default_value_t = 1e-8)]
    eta_tol: f64,
    /// Report path (stdout when absent).
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// Comma-separated `n:q` pairs, e.g. `3:2,100:200`.
    #[arg(long, value_delimiter = ',')]
    pairs: Vec<String>,
    #[command(flatten)]
    alm: AlmArgs,
    /// Table path (stdout when absent).
    #[arg(long)]
    output: Option<PathBuf>,
}

/// Parses `args` (including the program name), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match cli.command {
        Command::Solve(a) => cmd_solve(&a),
        Command::Certify(a) => cmd_certify(&a),
        Command::Bench(a) => cmd_bench(&a),
    }
}

fn code_for(e: &Error) -> i32 {
    match e {
        Error::InvalidInput(_) => EXIT_USAGE,
        Error::NumericalFailure(_) | Error::LineSearchFailure { .. } | Error::StalePoint { .. } => EXIT_NUMERICAL,
    }
}

fn report_err(e: &dyn std::fmt::Display) {
    eprintln!("error: {e}");
}

fn write_out(path: Option<&Path>, text: &str) -> std::io::Result<()> {
    match path {
        Some(p) => fs::write(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn fmt_f(v: f64) -> String {
    format!("{v:.16e}")
}

/// CSV rendering of a trace, one row per outer iteration.
pub fn trace_csv(trace: &AlmTrace) -> String {
    let mut s = String::from(TRACE_HEADER);
    s.push('\n');
    for r in &trace.rows {
        let dist = r.dist_mult.map(fmt_f).unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.k,
            fmt_f(r.rho),
            fmt_f(r.rho_tilde),
            r.inner_iters,
            r.cg_iters,
            fmt_f(r.alm_value),
            fmt_f(r.grad_norm),
            fmt_f(r.kkt_residual),
            dist,
            fmt_f(r.dy_norm),
            fmt_f(r.time_s)
        );
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveSummary {
    pub problem: String,
    pub status: String,
    pub iterations: usize,
    pub initial_kkt_residual: f64,
    pub final_kkt_residual: f64,
    pub final_dist_mult: Option<f64>,
    pub initial_multiplier_outside_cone: bool,
    pub seed: u64,
    pub error: Option<String>,
}

fn solve_config(a: &SolveArgs) -> crate::Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::InvalidInput(format!("cannot read {}: {e}", path.display())))?;
            RunConfig::from_json(&text)?
        }
        None => {
            let mut cfg = RunConfig {
                problem: a.problem.spec(),
                alm: AlmConfig::default(),
                newton: NewtonConfig::default(),
                seed: 0,
                perturbation: default_perturbation(),
                trace_path: None,
                summary_path: None,
            };
            a.alm.apply(&mut cfg);
            cfg
        }
    };
    if let Some(t) = &a.trace {
        cfg.trace_path = Some(t.clone());
    }
    if let Some(s) = &a.summary {
        cfg.summary_path = Some(s.clone());
    }
    if let Ok(v) = std::env::var(SEED_ENV) {
        cfg.seed = v
            .trim()
            .parse()
            .map_err(|_| Error::InvalidInput(format!("{SEED_ENV} must be an unsigned integer, got {v:?}")))?;
    }
    Ok(cfg)
}

/// Runs a configured solve and writes its trace and summary. Returns the exit code.
pub fn execute_run(cfg: &RunConfig) -> i32 {
    let problem = match cfg.problem.build() {
        Ok(p) => p,
        Err(e) => {
            report_err(&e);
            return code_for(&e);
        }
    };
    let p = problem.as_ref();
    let start = match cfg.start(p) {
        Ok(s) => s,
        Err(e) => {
            report_err(&e);
            return code_for(&e);
        }
    };
    let (trace, status, error, code) = match alm::run_alm(p, &start, &cfg.alm, &cfg.newton) {
        Ok(out) => {
            let (name, code) = match out.status {
                AlmStatus::Converged => ("converged", EXIT_OK),
                AlmStatus::MaxOuter => ("max_outer", EXIT_MAX_ITER),
            };
            (out.trace, name, None, code)
        }
        Err(f) => {
            report_err(&f);
            let code = code_for(&f.error);
            let name = if code == EXIT_USAGE { "invalid_input" } else { "numerical_failure" };
            (f.trace, name, Some(f.error.to_string()), code)
        }
    };
    if code == EXIT_USAGE {
        return code;
    }
    let summary = SolveSummary {
        problem: p.name(),
        status: status.to_string(),
        iterations: trace.rows.len(),
        initial_kkt_residual: trace.initial_kkt_residual,
        final_kkt_residual: trace.rows.last().map_or(trace.initial_kkt_residual, |r| r.kkt_residual),
        final_dist_mult: trace.rows.last().map_or(trace.initial_dist_mult, |r| r.dist_mult),
        initial_multiplier_outside_cone: trace.initial_multiplier_outside_cone,
        seed: cfg.seed,
        error,
    };
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n";
    if let Some(path) = &cfg.trace_path {
        if let Err(e) = fs::write(path, trace_csv(&trace)) {
            report_err(&format!("cannot write {}: {e}", path.display()));
            return EXIT_USAGE;
        }
    }
    if let Some(path) = &cfg.summary_path {
        if let Err(e) = fs::write(path, &json) {
            report_err(&format!("cannot write {}: {e}", path.display()));
            return EXIT_USAGE;
        }
    }
    print!("{json}");
    code
}

fn cmd_solve(a: &SolveArgs) -> i32 {
    match solve_config(a) {
        Ok(cfg) => execute_run(&cfg),
        Err(e) => {
            report_err(&e);
            code_for(&e)
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PointFile {
    x: Vec<f64>,
    y: Vec<Vec<f64>>,
    #[serde(default)]
    z: Vec<f64>,
}

fn load_point(path: &Path) -> crate::Result<KktPoint> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::InvalidInput(format!("cannot read {}: {e}", path.display())))?;
    let pf: PointFile = serde_json::from_str(&text).map_err(|e| Error::InvalidInput(format!("bad point file: {e}")))?;
    Ok(KktPoint::new(Vector::from_vec(pf.x), SymMatrix::from_rows(&pf.y)?, Vector::from_vec(pf.z)))
}

fn certify_report(a: &CertifyArgs) -> crate::Result<CertificateReport> {
    let problem = a.problem.spec().build()?;
    let p = problem.as_ref();
    let pt = match &a.point {
        Some(path) => load_point(path)?,
        None => p
            .stationary_point()
            .ok_or_else(|| Error::InvalidInput(format!("{} has no builtin point", p.name())))?,
    };
    pt.check_dims(p)?;
    certify::hessian_bundle_check(p, &pt, &a.rho_grid, a.eta_tol)
}

fn cmd_certify(a: &CertifyArgs) -> i32 {
    let report = match certify_report(a) {
        Ok(r) => r,
        Err(e) => {
            report_err(&e);
            return code_for(&e);
        }
    };
    let json = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    if let Err(e) = write_out(a.output.as_deref(), &json) {
        report_err(&e);
        return EXIT_USAGE;
    }
    match report.verdict {
        Verdict::Positive => EXIT_OK,
        Verdict::Negative => EXIT_NEGATIVE,
        Verdict::Inconsistent => {
            eprintln!("warning: the two certificates disagree");
            EXIT_NEGATIVE
        }
    }
}

fn parse_pairs(items: &[String]) -> crate::Result<Vec<(usize, f64)>> {
    let pairs: Vec<(usize, f64)> = items
        .iter()
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            let (n, q) = s
                .split_once(':')
                .ok_or_else(|| Error::InvalidInput(format!("pair {s:?} is not of the form n:q")))?;
            let n = n.trim().parse().map_err(|_| Error::InvalidInput(format!("bad n in {s:?}")))?;
            let q = q.trim().parse().map_err(|_| Error::InvalidInput(format!("bad q in {s:?}")))?;
            Ok((n, q))
        })
        .collect::<crate::Result<_>>()?;
    if pairs.is_empty() {
        return Err(Error::InvalidInput("no (n, q) pairs given".into()));
    }
    Ok(pairs)
}

struct BenchRow {
    n: usize,
    q: f64,
    result: Result<(usize, f64, f64, AlmStatus), Error>,
}

fn bench_one(cfg: &RunConfig, n: usize, q: f64) -> BenchRow {
    let started = Instant::now();
    let result = (|| {
        let p = hadamard_problem(n, q)?;
        let start = cfg.start(&p)?;
        let out = alm::run_alm(&p, &start, &cfg.alm, &cfg.newton).map_err(|f| f.error)?;
        let secs = if cfg.alm.timing { started.elapsed().as_secs_f64() } else { 0.0 };
        Ok((out.iterations(), out.final_residual(), secs, out.status))
    })();
    BenchRow { n, q, result }
}

fn cmd_bench(a: &BenchArgs) -> i32 {
    let pairs = match parse_pairs(&a.pairs) {
        Ok(p) => p,
        Err(e) => {
            report_err(&e);
            return EXIT_USAGE;
        }
    };
    let mut cfg = RunConfig {
        problem: ProblemSpec::Toy,
        alm: AlmConfig::default(),
        newton: NewtonConfig::default(),
        seed: 0,
        perturbation: default_perturbation(),
        trace_path: None,
        summary_path: None,
    };
    a.alm.apply(&mut cfg);
    if let Ok(v) = std::env::var(SEED_ENV) {
        match v.trim().parse() {
            Ok(s) => cfg.seed = s,
            Err(_) => {
                report_err(&format!("{SEED_ENV} must be an unsigned integer, got {v:?}"));
                return EXIT_USAGE;
            }
        }
    }

    let rows: Vec<BenchRow> = std::thread::scope(|s| {
        let cfg = &cfg;
        let handles: Vec<_> = pairs.iter().map(|&(n, q)| s.spawn(move || bench_one(cfg, n, q))).collect();
        handles.into_iter().map(|h| h.join().expect("bench worker panicked")).collect()
    });

    let mut table = String::from(BENCH_HEADER);
    table.push('\n');
    let mut code = EXIT_OK;
    for row in &rows {
        match &row.result {
            Ok((iters, res, secs, status)) => {
                let _ = writeln!(table, "{},{},{},{},{}", row.n, row.q, iters, fmt_f(*res), fmt_f(*secs));
                if *status == AlmStatus::MaxOuter && code == EXIT_OK {
                    eprintln!("error: n={} q={} hit the iteration limit", row.n, row.q);
                    code = EXIT_MAX_ITER;
                }
            }
            Err(e) => {
                eprintln!("error: n={} q={}: {e}", row.n, row.q);
                if code == EXIT_OK {
                    code = code_for(e);
                }
            }
        }
    }
    if let Err(e) = write_out(a.output.as_deref(), &table) {
        report_err(&e);
        return EXIT_USAGE;
    }
    code
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trip() {
        let text = r#"{"problem": {"kind": "hadamard", "n": 3, "q": 2.0}, "alm": {"rho0": 5.0, "criterion": "c"}, "seed": 9}"#;
        let cfg = RunConfig::from_json(text).unwrap();
        assert_eq!(cfg.alm.rho0, 5.0);
        assert_eq!(cfg.alm.criterion, Criterion::C);
        assert_eq!(cfg.alm.kkt_tol, AlmConfig::default().kkt_tol);
        let again = RunConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(again.to_json(), cfg.to_json());
    }

    #[test]
    fn config_rejects_unknown_fields() {
        assert!(RunConfig::from_json(r#"{"problem": {"kind": "toy"}, "bogus": 1}"#).is_err());
    }

    #[test]
    fn pairs_parse() {
        let items = vec!["3:2".to_string(), " 100:200 ".to_string()];
        assert_eq!(parse_pairs(&items).unwrap(), vec![(3, 2.0), (100, 200.0)]);
        assert!(parse_pairs(&[]).is_err());
        assert!(parse_pairs(&["3-2".to_string()]).is_err());
    }

    #[test]
    fn csv_formatting() {
        let trace = AlmTrace {
            rows: vec![alm::TraceRow {
                k: 0,
                rho: 10.0,
                rho_tilde: 10.0,
                inner_iters: 3,
                cg_iters: 7,
                alm_value: -0.1,
                grad_norm: 1e-9,
                kkt_residual: 2.5e-6,
                dist_mult: None,
                dy_norm: 0.3,
                time_s: 0.0,
            }],
            ..AlmTrace::default()
        };
        let csv = trace_csv(&trace);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(TRACE_HEADER));
        let row = lines.next().unwrap();
        let fields: Vec<&str> = row.split(',').collect();
        assert_eq!(fields.len(), 11);
        assert_eq!(fields[8], "");
        assert_eq!(fields[5].parse::<f64>().unwrap(), -0.1);
        assert_eq!(fields[1], "1.0000000000000000e1");
    }
}
