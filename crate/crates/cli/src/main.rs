use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sampcert_core::conic::SolverOptions;
use sampcert_core::expr::{parse_system, SystemDef};
use sampcert_core::simulate::{self, SamplingSchedule, SimError};
use sampcert_core::stability::{
    certify, max_sampling_period, verify_certificate, Certificate, CertifyOutcome, Mode, SearchOptions,
    StabilityError, StabilityQuery,
};

/// `println!` that ignores a closed stdout (e.g. piped into `head`).
macro_rules! say {
    ($($arg:tt)*) => {{
        let _ = writeln!(io::stdout(), $($arg)*);
    }};
}

const SUCCESS: u8 = 0;
const NOT_CERTIFIED: u8 = 1;
const USAGE: u8 = 2;
const INCONCLUSIVE: u8 = 3;

#[derive(Parser)]
#[command(name = "sampcert", version, about = "Stability certificates for sampled-data polynomial systems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Search for a certificate at one period (or period range) and verify it.
    Certify(Params),
    /// Bisect for the largest certifiable period.
    #[command(name = "max-t")]
    MaxT(Params),
    /// Integrate a trajectory and write it as CSV.
    Simulate(Params),
    /// Re-check a certificate file.
    Verify(Params),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Sync,
    Async,
}

#[derive(Args)]
struct Params {
    #[arg(long)]
    system: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "sync")]
    mode: ModeArg,
    #[arg(long = "T")]
    period: Option<f64>,
    #[arg(long = "Tmin")]
    t_min: Option<f64>,
    /// Asynchronous upper bound; for synchronous `max-t`, the top of the bracket.
    #[arg(long = "Tmax")]
    t_max: Option<f64>,
    #[arg(long, default_value_t = 4)]
    degree: u32,
    #[arg(long, default_value_t = 0.0)]
    alpha: f64,
    #[arg(long, default_value_t = StabilityQuery::DEFAULT_MU1)]
    mu1: f64,
    #[arg(long, default_value_t = StabilityQuery::DEFAULT_EPS)]
    eps: f64,
    #[arg(long, default_value_t = 1e-3)]
    resolution: f64,
    #[arg(long, default_value_t = 30)]
    periods: usize,
    /// Initial state, comma separated (default all ones).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    x0: Option<Vec<f64>>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Certificate file (`verify`, or V/Q columns for `simulate`).
    #[arg(long)]
    cert: Option<PathBuf>,
}

/// A failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: USAGE,
        message: message.into(),
    }
}

impl From<StabilityError> for Failure {
    fn from(e: StabilityError) -> Self {
        let code = match e {
            StabilityError::OddDegree(_)
            | StabilityError::InvalidPeriod(_)
            | StabilityError::InvalidParameter(_)
            | StabilityError::NonzeroEquilibrium(_)
            | StabilityError::System(_)
            | StabilityError::Certificate(_) => USAGE,
            _ => INCONCLUSIVE,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        usage(e.to_string())
    }
}

fn io_failure(path: &Path, e: io::Error) -> Failure {
    usage(format!("{}: {e}", path.display()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { USAGE } else { SUCCESS });
        }
    };
    let result = match &cli.command {
        Command::Certify(p) => run_certify(p),
        Command::MaxT(p) => run_max_t(p),
        Command::Simulate(p) => run_simulate(p),
        Command::Verify(p) => run_verify(p),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn solver_options() -> Result<SolverOptions, Failure> {
    let mut opts = SolverOptions::default();
    if let Ok(v) = std::env::var("SAMPCERT_SOLVER_TOL") {
        opts.tol = v
            .parse::<f64>()
            .ok()
            .filter(|t| *t > 0.0)
            .ok_or_else(|| usage(format!("SAMPCERT_SOLVER_TOL: expected a positive number, got `{v}`")))?;
    }
    Ok(opts)
}

fn load_system(p: &Params) -> Result<SystemDef, Failure> {
    let path = p.system.as_ref().ok_or_else(|| usage("--system is required"))?;
    parse_system(path).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn check_degree(p: &Params) -> Result<(), Failure> {
    if p.degree == 0 || p.degree % 2 == 1 {
        return Err(usage(format!("--degree: must be a positive even integer, got {}", p.degree)));
    }
    Ok(())
}

/// The sampling mode named by `--mode` and the period flags.
fn mode(p: &Params) -> Result<Mode, Failure> {
    match p.mode {
        ModeArg::Sync => {
            if p.t_min.is_some() {
                return Err(usage("--Tmin: only valid with --mode async"));
            }
            let period = p.period.ok_or_else(|| usage("--T is required in sync mode"))?;
            Ok(Mode::Synchronous { period })
        }
        ModeArg::Async => {
            if p.period.is_some() {
                return Err(usage("--T: use --Tmin/--Tmax in async mode"));
            }
            let t_max = p.t_max.ok_or_else(|| usage("--Tmax is required in async mode"))?;
            Ok(Mode::Asynchronous {
                t_min: p.t_min.unwrap_or(0.0),
                t_max,
            })
        }
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| io_failure(path, e))
}

fn run_certify(p: &Params) -> Result<u8, Failure> {
    check_degree(p)?;
    let system = load_system(p)?;
    let query = StabilityQuery {
        system,
        mode: mode(p)?,
        degree: p.degree,
        alpha: p.alpha,
        mu1: p.mu1,
        eps: p.eps,
    };
    query.validate()?;
    match certify(&query, &solver_options()?)? {
        CertifyOutcome::Certified(cert) => {
            let out = p.out.clone().unwrap_or_else(|| PathBuf::from("certificate.json"));
            write_file(&out, &cert.to_json())?;
            let report = cert.report.as_ref().expect("certified results carry a report");
            say!("PASS {}", query.mode);
            say!("{report}");
            say!("certificate written to {}", out.display());
            Ok(SUCCESS)
        }
        CertifyOutcome::Infeasible { reason } => {
            say!("FAIL {}: infeasible: {reason}", query.mode);
            Ok(NOT_CERTIFIED)
        }
        CertifyOutcome::Inconclusive { reason } => {
            say!("FAIL {}: inconclusive: {reason}", query.mode);
            Ok(INCONCLUSIVE)
        }
    }
}

fn run_max_t(p: &Params) -> Result<u8, Failure> {
    check_degree(p)?;
    let system = load_system(p)?;
    let mut search = SearchOptions::new(p.degree);
    search.resolution = p.resolution;
    search.alpha = p.alpha;
    search.mu1 = p.mu1;
    search.eps = p.eps;
    if let Some(hi) = p.t_max {
        search.hi = hi;
    }
    if p.mode == ModeArg::Async {
        search.asynchronous_t_min = Some(p.t_min.unwrap_or(0.0));
        search.lo = p.t_min.unwrap_or(0.0);
    } else if p.t_min.is_some() {
        return Err(usage("--Tmin: only valid with --mode async"));
    }
    let result = max_sampling_period(&system, &search, &solver_options()?)?;
    for probe in &result.probes {
        say!(
            "probe {:.6} {}",
            probe.period,
            if probe.certified { "certified" } else { probe.note.as_str() }
        );
    }
    let label = match p.mode {
        ModeArg::Sync => "sync",
        ModeArg::Async => "async",
    };
    let shown = result.period.map_or("none".to_string(), |t| format!("{t:.6}"));
    say!("T_star = {shown}");
    say!("| {} | {label} | N={} | {shown} |", system.name, p.degree);
    match (&result.certificate, &p.out) {
        (Some(cert), Some(out)) => write_file(out, &cert.to_json())?,
        (None, _) if result.probes.iter().any(|pr| pr.note.starts_with("inconclusive")) => return Ok(INCONCLUSIVE),
        (None, _) => return Ok(NOT_CERTIFIED),
        _ => {}
    }
    Ok(SUCCESS)
}

fn run_simulate(p: &Params) -> Result<u8, Failure> {
    let system = load_system(p)?;
    let schedule = match mode(p)? {
        Mode::Synchronous { period } => SamplingSchedule::Fixed { period },
        Mode::Asynchronous { t_min, t_max } => SamplingSchedule::RandomUniform {
            t_min,
            t_max,
            seed: p.seed,
        },
    };
    let x0 = p.x0.clone().unwrap_or_else(|| vec![1.0; system.dim()]);
    let cert = p.cert.as_ref().map(|c| read_certificate(c)).transpose()?;
    let trace = simulate::simulate(&system, &x0, &schedule, p.periods, None)?;
    let functionals = cert
        .as_ref()
        .map(|c| simulate::trace_functionals(&trace, c))
        .transpose()?;
    let mut buf = Vec::new();
    simulate::write_trace_csv(&mut buf, &trace, functionals.as_deref()).expect("writing to memory");
    match &p.out {
        Some(path) => fs::write(path, &buf).map_err(|e| io_failure(path, e))?,
        None => match io::stdout().write_all(&buf) {
            Err(e) if e.kind() != io::ErrorKind::BrokenPipe => return Err(usage(format!("stdout: {e}"))),
            _ => {}
        },
    }
    if let Some(t) = trace.overflow {
        eprintln!("overflow: |x| exceeded {:e} at t = {t}", simulate::OVERFLOW_NORM);
        return Ok(NOT_CERTIFIED);
    }
    Ok(SUCCESS)
}

fn read_certificate(path: &Path) -> Result<Certificate, Failure> {
    let text = fs::read_to_string(path).map_err(|e| io_failure(path, e))?;
    Certificate::from_json(&text).map_err(|e| usage(format!("{}: malformed certificate: {e}", path.display())))
}

fn run_verify(p: &Params) -> Result<u8, Failure> {
    let path = p.cert.as_ref().ok_or_else(|| usage("--cert is required"))?;
    let cert = read_certificate(path)?;
    let report = verify_certificate(&cert);
    say!("{} {}", if report.passed { "PASS" } else { "FAIL" }, cert.query.mode);
    say!("{report}");
    Ok(if report.passed { SUCCESS } else { NOT_CERTIFIED })
}
