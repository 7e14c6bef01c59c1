//! `paradjoint` command-line front end.
//!
//! Exit codes: 0 success, 1 input error, 2 solver failure.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use paradjoint::adjoint::{
    sensitivity_series, window_instants, AdjointContext, AdjointError, Qoi, SensitivitySeries,
    SolveMode,
};
use paradjoint::bench::{run_bench, BenchError, BenchOptions};
use paradjoint::mna::{assemble, StampedSystem};
use paradjoint::netlist::{builtin_circuit, parse_netlist, B6Options, Netlist};
use paradjoint::parareal::{parareal_forward, PararealConfig, PararealError, PararealReport};
use paradjoint::spectral::{
    normalize_relative, rank_parameters, ranking_json, PowerSpectrum, WelchOptions,
};
use paradjoint::transient::{
    dc_operating_point, simulate, InitialState, Scheme, TimeGrid, Trajectory, TransientError,
};

#[derive(Debug, Parser)]
#[command(
    name = "paradjoint",
    version,
    about = "Transient adjoint sensitivity analysis with parareal"
)]
struct Cli {
    /// Log level filter (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "warn")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Forward transient simulation; writes trajectory.csv.
    Simulate(SimulateArgs),
    /// Pointwise sensitivities over a window; writes sensitivity.csv.
    Sens(SensArgs),
    /// Sensitivities plus Welch spectra, ranking and relative stack.
    Spectrum(SpectrumArgs),
    /// Wall-clock benchmark of one adjoint solve, sequential and parareal.
    Bench(BenchArgs),
    /// Prints a builtin fixture as netlist text.
    Fixture {
        /// rectifier or b6.
        name: String,
        /// RLC ladder stages per position (b6 only).
        #[arg(long, default_value_t = 1)]
        stages: usize,
        /// Fine timestep written into `.tran` (b6 only).
        #[arg(long)]
        dt: Option<f64>,
    },
}

#[derive(Debug, Args)]
struct CircuitArgs {
    /// Netlist file, or `builtin:<name>[:stages=K]`.
    netlist: String,
    /// Fine timestep (s); defaults to the `.tran` directive.
    #[arg(long)]
    dt: Option<f64>,
    /// End time (s); defaults to the `.tran` directive.
    #[arg(long)]
    tend: Option<f64>,
    /// implicit_euler or trapezoidal.
    #[arg(long, default_value = "implicit_euler")]
    scheme: Scheme,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Accepted for reproducible invocations; every solver path is deterministic.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct PararealArgs {
    /// Parareal subintervals; omit for sequential solves.
    #[arg(long = "N")]
    n: Option<usize>,
    /// Worker threads (0 = one per CPU).
    #[arg(long, default_value_t = 0)]
    workers: usize,
    /// Parareal tolerance on interface jumps.
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    /// Coarse timestep as a multiple of the fine one.
    #[arg(long, default_value_t = 100)]
    stride: usize,
}

impl PararealArgs {
    fn config(&self, n: usize) -> PararealConfig {
        PararealConfig {
            n_subintervals: n,
            tol: self.tol,
            max_iter: None,
            coarse_stride: self.stride,
            workers: self.workers,
        }
    }
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[command(flatten)]
    circuit: CircuitArgs,
    #[command(flatten)]
    parareal: PararealArgs,
}

#[derive(Debug, Args)]
struct SensArgs {
    #[command(flatten)]
    circuit: CircuitArgs,
    #[command(flatten)]
    parareal: PararealArgs,
    /// Quantity of interest, e.g. v(out), v(a,b), i(V1); defaults to `.sens`.
    #[arg(long)]
    qoi: Option<String>,
    /// Analysis window `a:b` (s); defaults to `.sens`.
    #[arg(long, conflicts_with = "tm")]
    window: Option<String>,
    /// Single analysis instant (s).
    #[arg(long)]
    tm: Option<f64>,
    /// Comma-separated parameter names; defaults to all.
    #[arg(long, value_delimiter = ',')]
    params: Option<Vec<String>>,
}

#[derive(Debug, Args)]
struct SpectrumArgs {
    #[command(flatten)]
    sens: SensArgs,
    /// Number of top-ranked parameters kept for spectra and the stack.
    #[arg(long, default_value_t = 10)]
    top: usize,
    /// Welch segment length in samples; clipped to the series length.
    #[arg(long, default_value_t = 256)]
    segment: usize,
    /// Welch segment overlap fraction.
    #[arg(long, default_value_t = 0.5)]
    overlap: f64,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[command(flatten)]
    circuit: CircuitArgs,
    /// Benchmark instant (s).
    #[arg(long)]
    tm: f64,
    /// Quantity of interest; defaults to `.sens`.
    #[arg(long)]
    qoi: Option<String>,
    /// Comma-separated subinterval counts.
    #[arg(long = "N", value_delimiter = ',', default_value = "2,4,8,12,24,48")]
    n: Vec<usize>,
    /// Worker threads (0 = one per CPU).
    #[arg(long, default_value_t = 0)]
    workers: usize,
    /// Parareal tolerance on interface jumps.
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    /// Coarse timestep as a multiple of the fine one.
    #[arg(long, default_value_t = 100)]
    stride: usize,
    /// Timed repetitions per configuration, after one warm-up.
    #[arg(long, default_value_t = 3)]
    reps: usize,
}

/// Error tagged with its exit code.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

type Outcome<T> = Result<T, Failure>;

fn input(error: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: 1,
        error: error.into(),
    }
}

fn solver(error: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: 2,
        error: error.into(),
    }
}

fn transient_failure(e: TransientError) -> Failure {
    match e {
        TransientError::InvalidGrid(_)
        | TransientError::DimensionMismatch { .. }
        | TransientError::UnknownScheme(_) => input(e),
        _ => solver(e),
    }
}

fn adjoint_failure(e: AdjointError) -> Failure {
    match e {
        AdjointError::OffGrid(_)
        | AdjointError::OutsideTrajectory { .. }
        | AdjointError::InvalidQoi(_)
        | AdjointError::NoInstants
        | AdjointError::InvalidDelta(_)
        | AdjointError::Mna(_) => input(e),
        AdjointError::Transient(t) => transient_failure(t),
        AdjointError::Parareal(p) => parareal_failure(p),
        _ => solver(e),
    }
}

fn parareal_failure(e: PararealError) -> Failure {
    match e {
        PararealError::Propagation { .. } | PararealError::Pool(_) => solver(e),
        _ => input(e),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    env_logger::Builder::new()
        .parse_filters(&cli.log)
        .format_timestamp(None)
        .init();
    let result = match cli.command {
        Command::Simulate(a) => run_simulate(&a),
        Command::Sens(a) => run_sensitivity(&a).map(|_| ()),
        Command::Spectrum(a) => run_spectrum(&a),
        Command::Bench(a) => run_benchmark(&a),
        Command::Fixture { name, stages, dt } => print_fixture(&name, stages, dt),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

/// Writes to stdout; a closed pipe (`| head`) is not an error.
fn emit(text: &str) -> Outcome<()> {
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(input(e)),
        _ => Ok(()),
    }
}

fn print_fixture(name: &str, stages: usize, dt: Option<f64>) -> Outcome<()> {
    let mut opts = B6Options {
        ladder_stages: stages,
        ..B6Options::default()
    };
    if let Some(dt) = dt {
        opts.dt = dt;
    }
    let netlist = builtin_circuit(name, opts).map_err(input)?;
    emit(&netlist.to_string())
}

fn load_netlist(source: &str) -> Outcome<Netlist> {
    if let Some(spec) = source.strip_prefix("builtin:") {
        let mut parts = spec.split(':');
        let name = parts.next().unwrap_or_default();
        let mut opts = B6Options::default();
        for opt in parts {
            let (key, value) = opt
                .split_once('=')
                .ok_or_else(|| input(anyhow!("builtin option '{opt}' is not key=value")))?;
            match key {
                "stages" | "m" => {
                    opts.ladder_stages = value
                        .parse()
                        .map_err(|_| input(anyhow!("invalid stage count '{value}'")))?
                }
                _ => return Err(input(anyhow!("unknown builtin option '{key}'"))),
            }
        }
        return builtin_circuit(name, opts).map_err(input);
    }
    let text = fs::read_to_string(source)
        .with_context(|| format!("cannot read netlist '{source}'"))
        .map_err(input)?;
    parse_netlist(&text)
        .with_context(|| format!("in netlist '{source}'"))
        .map_err(input)
}

fn time_grid(netlist: &Netlist, args: &CircuitArgs, default_end: Option<f64>) -> Outcome<TimeGrid> {
    let tran = netlist.directives.tran;
    let dt = args
        .dt
        .or(tran.map(|t| t.dt))
        .ok_or_else(|| input(anyhow!("no timestep: pass --dt or add a .tran directive")))?;
    let t_end = args
        .tend
        .or(default_end)
        .or(tran.map(|t| t.t_end))
        .ok_or_else(|| input(anyhow!("no end time: pass --tend or add a .tran directive")))?;
    TimeGrid::new(0.0, t_end, dt).map_err(transient_failure)
}

fn create(dir: &Path, name: &str) -> Outcome<BufWriter<File>> {
    fs::create_dir_all(dir)
        .with_context(|| format!("cannot create output directory {}", dir.display()))
        .map_err(input)?;
    let path = dir.join(name);
    File::create(&path)
        .with_context(|| format!("cannot create {}", path.display()))
        .map(BufWriter::new)
        .map_err(input)
}

fn write_with(
    dir: &Path,
    name: &str,
    f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
) -> Outcome<()> {
    let mut w = create(dir, name)?;
    f(&mut w)
        .and_then(|_| w.flush())
        .with_context(|| format!("writing {name}"))
        .map_err(input)?;
    log::info!("wrote {}", dir.join(name).display());
    Ok(())
}

fn write_reports(dir: &Path, name: &str, reports: &[PararealReport]) -> Outcome<()> {
    if reports.is_empty() {
        return Ok(());
    }
    let json = serde_json::to_string_pretty(reports).expect("reports serialize");
    write_with(dir, name, |w| writeln!(w, "{json}"))
}

fn check_seed(args: &CircuitArgs) {
    log::debug!("seed {} (no stochastic steps)", args.seed);
}

fn forward(
    sys: &StampedSystem,
    grid: &TimeGrid,
    scheme: Scheme,
    par: &PararealArgs,
) -> Outcome<Trajectory> {
    match par.n {
        None => simulate(sys, grid, scheme).map_err(transient_failure),
        Some(n) => {
            let x0 = dc_operating_point(sys, grid.t0).map_err(transient_failure)?;
            let cfg = par.config(n);
            let (traj, report) =
                parareal_forward(sys, &x0, grid, scheme, InitialState::DcOperatingPoint, &cfg)
                    .map_err(parareal_failure)?;
            log::info!(
                "parareal forward: {} iterations, converged {}",
                report.iterations,
                report.converged
            );
            Ok(traj)
        }
    }
}

fn run_simulate(args: &SimulateArgs) -> Outcome<()> {
    let c = &args.circuit;
    check_seed(c);
    let netlist = load_netlist(&c.netlist)?;
    let grid = time_grid(&netlist, c, None)?;
    let sys = assemble(&netlist);
    let traj = forward(&sys, &grid, c.scheme, &args.parareal)?;
    write_with(&c.out, "trajectory.csv", |w| traj.write_csv(&sys.dofs, w))?;
    eprintln!("simulated {} steps of {:e} s", grid.n_steps, grid.dt);
    Ok(())
}

fn analysis_span(netlist: &Netlist, args: &SensArgs) -> Outcome<(f64, f64)> {
    if let Some(t) = args.tm {
        return Ok((t, t));
    }
    if let Some(w) = &args.window {
        let (a, b) = w
            .split_once(':')
            .ok_or_else(|| input(anyhow!("--window must be a:b, got '{w}'")))?;
        let parse = |s: &str| -> Outcome<f64> {
            paradjoint::netlist::parse_value(s.trim())
                .ok_or_else(|| input(anyhow!("invalid time '{s}' in --window")))
        };
        let (a, b) = (parse(a)?, parse(b)?);
        if a > b {
            return Err(input(anyhow!(
                "--window start {a:e} is after its end {b:e}"
            )));
        }
        return Ok((a, b));
    }
    netlist
        .directives
        .sens
        .as_ref()
        .map(|s| (s.t_start, s.t_end))
        .ok_or_else(|| {
            input(anyhow!(
                "no analysis window: pass --window, --tm or add a .sens directive"
            ))
        })
}

fn run_sensitivity(args: &SensArgs) -> Outcome<SensitivitySeries> {
    let c = &args.circuit;
    check_seed(c);
    let netlist = load_netlist(&c.netlist)?;
    let (a, b) = analysis_span(&netlist, args)?;
    let grid = time_grid(&netlist, c, Some(b))?;
    let sys = assemble(&netlist);
    let selector = args
        .qoi
        .clone()
        .or_else(|| netlist.directives.sens.as_ref().map(|s| s.qoi.clone()))
        .ok_or_else(|| {
            input(anyhow!(
                "no quantity of interest: pass --qoi or add a .sens directive"
            ))
        })?;
    let qoi = Qoi::parse(&selector, &sys.dofs).map_err(input)?;
    let params: Vec<usize> = match &args.params {
        None => (0..netlist.params.len()).collect(),
        Some(names) => names
            .iter()
            .map(|n| {
                netlist
                    .param(n)
                    .map(|p| p.id)
                    .ok_or_else(|| input(anyhow!("unknown parameter '{n}'")))
            })
            .collect::<Outcome<_>>()?,
    };
    if params.is_empty() {
        return Err(input(anyhow!("the circuit has no R, L or C parameters")));
    }
    let idx = window_instants(&grid, a, b).map_err(adjoint_failure)?;
    let instants: Vec<f64> = idx.iter().map(|&k| grid.time(k)).collect();

    let traj = simulate(&sys, &grid, c.scheme).map_err(transient_failure)?;
    let ctx = AdjointContext::new(&sys, &traj).map_err(adjoint_failure)?;
    let mode = match args.parareal.n {
        None => SolveMode::Sequential,
        Some(n) => SolveMode::Parareal(args.parareal.config(n)),
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.parareal.workers)
        .build()
        .map_err(solver)?;
    let series = pool
        .install(|| sensitivity_series(&ctx, &qoi, &instants, &params, mode))
        .map_err(adjoint_failure)?;
    write_with(&c.out, "sensitivity.csv", |w| series.write_csv(w))?;
    write_reports(&c.out, "parareal_reports.json", &series.reports)?;
    eprintln!(
        "{} instants, {} adjoint solves, {} parameters",
        series.instants.len(),
        series.adjoint_solves,
        series.params.len()
    );
    Ok(series)
}

fn run_spectrum(args: &SpectrumArgs) -> Outcome<()> {
    if args.top == 0 {
        return Err(input(anyhow!("--top must be at least 1")));
    }
    let series = run_sensitivity(&args.sens)?;
    let out = &args.sens.circuit.out;
    let ranking = rank_parameters(&series, args.top);
    let json = ranking_json(&ranking);
    write_with(out, "ranking.json", |w| writeln!(w, "{json}"))?;
    let selected: Vec<&str> = ranking.iter().map(|r| r.param.as_str()).collect();
    let stack = normalize_relative(&series, &selected).map_err(input)?;
    write_with(out, "relative.csv", |w| stack.write_csv(w))?;
    let n = series.instants.len();
    if n < 2 {
        return Err(input(anyhow!(
            "a spectrum needs at least two instants, got {n}"
        )));
    }
    let segment = if args.segment > n {
        log::warn!(
            "segment length {} exceeds the {n} instants; using {n}",
            args.segment
        );
        n
    } else {
        args.segment
    };
    let opts = WelchOptions {
        segment_len: segment,
        overlap: args.overlap,
        ..WelchOptions::default()
    };
    let psd = PowerSpectrum::of_relative_sensitivity(&series, &selected, &opts).map_err(input)?;
    write_with(out, "psd.csv", |w| psd.write_csv(w))?;
    write_with(out, "psd_normalized.csv", |w| {
        psd.normalized_per_bin().write_csv(w)
    })?;
    let lines: String = ranking
        .iter()
        .enumerate()
        .map(|(i, r)| format!("{:>3}  {:<16} {:.6e}\n", i + 1, r.param, r.score))
        .collect();
    emit(&lines)
}

fn run_benchmark(args: &BenchArgs) -> Outcome<()> {
    let c = &args.circuit;
    check_seed(c);
    if args.n.is_empty() || args.n.contains(&0) {
        return Err(input(anyhow!("--N must list positive subinterval counts")));
    }
    let netlist = load_netlist(&c.netlist)?;
    let grid = time_grid(&netlist, c, Some(args.tm))?;
    let sys = assemble(&netlist);
    let selector = args
        .qoi
        .clone()
        .or_else(|| netlist.directives.sens.as_ref().map(|s| s.qoi.clone()))
        .ok_or_else(|| {
            input(anyhow!(
                "no quantity of interest: pass --qoi or add a .sens directive"
            ))
        })?;
    let qoi = Qoi::parse(&selector, &sys.dofs).map_err(input)?;
    if grid.index_of(args.tm).is_none() {
        return Err(input(anyhow!(
            "--tm {:e} is not a point of the time grid",
            args.tm
        )));
    }
    let traj = simulate(&sys, &grid, c.scheme).map_err(transient_failure)?;
    let ctx = AdjointContext::new(&sys, &traj).map_err(adjoint_failure)?;
    let opts = BenchOptions {
        n_list: args.n.clone(),
        workers: args.workers,
        repetitions: args.reps,
        tol: args.tol,
        coarse_stride: args.stride,
        max_iter: None,
    };
    let report = match run_bench(&ctx, args.tm, &qoi, &opts) {
        Ok(r) => r,
        Err(BenchError::Adjoint(e)) => return Err(adjoint_failure(e)),
        Err(e) => return Err(input(e)),
    };
    write_with(&c.out, "bench.json", |w| {
        writeln!(w, "{}", report.to_json())
    })?;
    write_with(&c.out, "bench.csv", |w| report.write_csv(w))?;
    emit(&report.table())?;
    if report.records.iter().any(|r| !r.converged) {
        log::warn!(
            "some parareal runs stopped at the iteration limit without reaching the tolerance"
        );
    }
    Ok(())
}
