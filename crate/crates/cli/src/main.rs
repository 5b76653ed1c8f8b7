//! Command-line front end: run closed-loop strategies, compare runs and
//! validate configuration files.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use hiercoord::closedloop::{
    build_coldbox_2ss, build_coldbox_4ss, closed_loop_cost, run_decentralized, run_hierarchical,
    Comparison, CsvTrace, PerformanceReport, Scenario, COLDBOX_2SS, COLDBOX_4SS,
};
use hiercoord::config::load_system;
use hiercoord::system::System;

const SCENARIOS: [(&str, &str); 3] = [
    (
        "equilibrium.toml",
        include_str!("../../core/benchmarks/scenarios/equilibrium.toml"),
    ),
    (
        "constraint.toml",
        include_str!("../../core/benchmarks/scenarios/constraint.toml"),
    ),
    (
        "comparison.toml",
        include_str!("../../core/benchmarks/scenarios/comparison.toml"),
    ),
];

const TRACE_FILE: &str = "trace.csv";
const REPORT_FILE: &str = "report.json";

#[derive(Parser)]
#[command(
    name = "hiercoord",
    version,
    about = "Hierarchical coordination of coupled MPC subsystems"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one strategy on a scenario; writes trace.csv and report.json.
    Run(RunArgs),
    /// Compare two run directories (or report.json files) of one scenario.
    Compare {
        a: PathBuf,
        b: PathBuf,
        /// Write the comparison as CSV to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a system or scenario file.
    Validate { path: PathBuf },
    /// Write the built-in benchmark systems and scenarios to a directory.
    Export {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Strategy {
    #[value(name = "hierarchical-2ss")]
    Hierarchical2ss,
    #[value(name = "hierarchical-4ss")]
    Hierarchical4ss,
    Decentralized,
}

#[derive(clap::Args)]
struct RunArgs {
    #[arg(long, value_enum)]
    strategy: Strategy,
    #[arg(long)]
    scenario: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    eps_max: Option<f64>,
    #[arg(long)]
    sigma_max: Option<usize>,
    #[arg(long)]
    grid_size: Option<usize>,
    /// NMPC iteration budget per solve.
    #[arg(long)]
    nmpc_max_iter: Option<usize>,
    /// Worker threads for the coordinator.
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
enum Failure {
    Solver(anyhow::Error),
    Config(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Solver(_) => 2,
            Failure::Config(_) => 3,
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Config(e)
    }
}

impl From<hiercoord::Error> for Failure {
    fn from(e: hiercoord::Error) -> Self {
        Failure::Config(e.into())
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("HIERCOORD_LOG", "warn"))
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 3 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Run(args) => cmd_run(&args),
        Command::Compare { a, b, out } => cmd_compare(&a, &b, out.as_deref()),
        Command::Validate { path } => cmd_validate(&path),
        Command::Export { out } => cmd_export(&out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (Failure::Solver(e) | Failure::Config(e)) = &f;
            eprintln!("error: {e:#}");
            ExitCode::from(f.code())
        }
    }
}

/// Writes `contents` next to `path` and renames it into place.
fn write_atomic(path: &Path, contents: &[u8]) -> anyhow::Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)
        .with_context(|| format!("creating file in {}", dir.display()))?;
    tmp.write_all(contents)?;
    tmp.persist(path)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn system_or(
    path: &Option<PathBuf>,
    builtin: fn() -> hiercoord::Result<System>,
) -> anyhow::Result<System> {
    Ok(match path {
        Some(p) => load_system(p)?,
        None => builtin()?,
    })
}

fn load_scenario(args: &RunArgs) -> anyhow::Result<Scenario> {
    let mut s = Scenario::load(&args.scenario)?;
    if let Some(v) = args.eps_max {
        if !(v > 0.0 && v.is_finite()) {
            bail!("--eps-max must be positive");
        }
        s.coordinator.eps_max = v;
    }
    if let Some(v) = args.sigma_max {
        if v == 0 {
            bail!("--sigma-max must be at least 1");
        }
        s.coordinator.sigma_max = v;
    }
    if let Some(v) = args.grid_size {
        if v == 0 {
            bail!("--grid-size must be at least 1");
        }
        s.coordinator.grid_size = v;
    }
    if let Some(v) = args.nmpc_max_iter {
        let mut p = s.nmpc.take().unwrap_or_default();
        p.max_iter = v;
        p.check()?;
        s.nmpc = Some(p);
    }
    s.check()?;
    Ok(s)
}

fn cmd_run(args: &RunArgs) -> CmdResult {
    if args.threads == 0 {
        return Err(anyhow!("--threads must be at least 1").into());
    }
    let scenario = load_scenario(args)?;
    let plant = system_or(&scenario.plant, build_coldbox_4ss)?;
    let strategy = match args.strategy {
        Strategy::Hierarchical2ss => system_or(&scenario.system_2ss, build_coldbox_2ss)?,
        Strategy::Hierarchical4ss | Strategy::Decentralized => {
            system_or(&scenario.system_4ss, build_coldbox_4ss)?
        }
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.threads)
        .build()
        .map_err(|e| anyhow!("thread pool: {e}"))?;
    info!(
        "running {:?} on `{}` with {} thread(s)",
        args.strategy, scenario.name, args.threads
    );
    let trace = pool.install(|| match args.strategy {
        Strategy::Decentralized => run_decentralized(&plant, &strategy, &scenario),
        _ => run_hierarchical(&plant, &strategy, &scenario),
    })?;
    let json = match closed_loop_cost(&trace, &plant, &scenario) {
        Ok(report) => {
            println!(
                "{}: J_c_cl = {:.6e}, violation integral = {:.6e}, NMPC median = {:.3} ms",
                report.strategy, report.j_c_cl, report.violation_integral, report.nmpc_ms_median
            );
            serde_json::to_string_pretty(&report)
        }
        // nothing to evaluate when the first period already failed
        Err(_) if trace.failure.is_some() && trace.rows.is_empty() => {
            serde_json::to_string_pretty(&serde_json::json!({ "failure": trace.failure }))
        }
        Err(e) => return Err(e.into()),
    }
    .map_err(|e| Failure::Config(e.into()))?;

    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))
        .map_err(Failure::Config)?;
    write_atomic(
        &args.out.join(TRACE_FILE),
        trace.to_csv_string()?.as_bytes(),
    )?;
    write_atomic(&args.out.join(REPORT_FILE), json.as_bytes())?;
    match &trace.failure {
        Some(msg) => Err(Failure::Solver(anyhow!(
            "solver failure ({msg}); partial trace written"
        ))),
        None => Ok(()),
    }
}

/// Report and trace paths of a run directory or report file.
fn run_files(path: &Path) -> anyhow::Result<(PathBuf, PathBuf)> {
    if path.is_dir() {
        Ok((path.join(REPORT_FILE), path.join(TRACE_FILE)))
    } else {
        let dir = path.parent().unwrap_or(Path::new("."));
        Ok((path.to_path_buf(), dir.join(TRACE_FILE)))
    }
}

fn load_run(path: &Path) -> anyhow::Result<(PerformanceReport, CsvTrace)> {
    let (report, trace) = run_files(path)?;
    let text =
        fs::read_to_string(&report).with_context(|| format!("reading {}", report.display()))?;
    let report =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    Ok((report, CsvTrace::load(&trace)?))
}

fn cmd_compare(a: &Path, b: &Path, out: Option<&Path>) -> CmdResult {
    let (ra, ta) = load_run(a)?;
    let (rb, tb) = load_run(b)?;
    let cmp = Comparison::new(ra, rb, &ta, &tb)?;
    print!("{}", cmp.to_table());
    if let Some(out) = out {
        let csv = cmp.to_csv_string()?;
        write_atomic(out, csv.as_bytes())?;
    }
    Ok(())
}

fn cmd_validate(path: &Path) -> CmdResult {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(Failure::Config)?;
    let is_scenario = toml::from_str::<toml::Table>(&text)
        .map(|t| t.contains_key("steps"))
        .unwrap_or(false);
    if is_scenario {
        let s = Scenario::load(path)?;
        for p in [&s.plant, &s.system_2ss, &s.system_4ss]
            .into_iter()
            .flatten()
        {
            load_system(p)?;
        }
        println!("ok: scenario `{}` ({} steps)", s.name, s.steps);
    } else {
        let sys = load_system(path)?;
        println!(
            "ok: system `{}` with {} subsystems and {} coupling edges",
            sys.name,
            sys.subsystems().len(),
            sys.topology().edges().len()
        );
        for s in sys.subsystems() {
            let rho = s.dynamics.affine().spectral_radius();
            println!("  {} {}: spectral radius {rho:.4}", s.id.0, s.name);
        }
    }
    Ok(())
}

fn cmd_export(out: &Path) -> CmdResult {
    let plants = out.join("plants");
    let scenarios = out.join("scenarios");
    for d in [&plants, &scenarios] {
        fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
    }
    write_atomic(&plants.join("coldbox_4ss.toml"), COLDBOX_4SS.as_bytes())?;
    write_atomic(&plants.join("coldbox_2ss.toml"), COLDBOX_2SS.as_bytes())?;
    for (name, text) in SCENARIOS {
        write_atomic(&scenarios.join(name), text.as_bytes())?;
    }
    println!("wrote benchmark files to {}", out.display());
    Ok(())
}
