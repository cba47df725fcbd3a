use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hkflow_core::flow::{DtPolicy, Scheme};
use hkflow_core::harness::{self, RunConfig};
use hkflow_core::Error;

/// Thread count for the worker pool; the only environment input.
const THREADS_VAR: &str = "HKFLOW_THREADS";

#[derive(Parser)]
#[command(name = "hkflow", version, about = "Hesse-Koszul flow runs, refinement studies and barrier gates")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate a fixture and write trajectory, diagnostics and manifest.
    Run(Overrides),
    /// Convergence orders at N, 2N, 4N, ...
    RefineStudy {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long, default_value_t = 3)]
        levels: usize,
    },
    /// Barrier threshold and cutoff profile checks only.
    Gate(Overrides),
    /// Long-format CSV series from a completed run directory.
    ExportPlots {
        dir: PathBuf,
    },
}

#[derive(Args, Clone)]
struct Overrides {
    /// JSON run configuration; flags below override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    fixture: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    nodes: Option<usize>,
    #[arg(long, value_parser = parse_scheme)]
    scheme: Option<Scheme>,
    /// Fixed macro step.
    #[arg(long, conflicts_with = "cfl")]
    dt: Option<f64>,
    /// CFL factor against h²/Λ_max.
    #[arg(long)]
    cfl: Option<f64>,
    #[arg(long)]
    t_end: Option<f64>,
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long)]
    substeps: Option<usize>,
    #[arg(long)]
    normalized: bool,
    #[arg(long)]
    theta: Option<f64>,
    #[arg(long)]
    kappa_cut: Option<f64>,
    /// Also write gate.json and cutoff.csv during `run`.
    #[arg(long)]
    gate: bool,
    #[arg(long)]
    no_fields: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_scheme(s: &str) -> Result<Scheme, String> {
    match s {
        "tensor" => Ok(Scheme::Tensor),
        "scalar" => Ok(Scheme::Scalar),
        "both" => Ok(Scheme::Both),
        _ => Err(format!("unknown scheme {s:?} (tensor, scalar, both)")),
    }
}

impl Overrides {
    fn resolve(&self) -> Result<RunConfig, Error> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => {
                let fixture = self.fixture.clone().ok_or_else(|| Error::Config("--fixture or --config is required".into()))?;
                RunConfig::new(fixture, self.seed.unwrap_or(0))
            }
        };
        if let Some(f) = &self.fixture {
            c.fixture = f.clone();
        }
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if self.nodes.is_some() {
            c.grid.nodes = self.nodes;
        }
        if let Some(s) = self.scheme {
            c.flow.scheme = s;
        }
        if let Some(dt) = self.dt {
            c.flow.dt = DtPolicy::Fixed(dt);
        }
        if let Some(cfl) = self.cfl {
            c.flow.dt = DtPolicy::Cfl(cfl);
        }
        if let Some(t) = self.t_end {
            c.flow.t_end = t;
        }
        if let Some(s) = self.stride {
            c.flow.stride = s;
        }
        if let Some(s) = self.substeps {
            c.flow.substeps = s;
        }
        if self.normalized {
            c.flow.normalized = true;
            if self.scheme.is_none() {
                c.flow.scheme = Scheme::Tensor;
            }
        }
        if let Some(t) = self.theta {
            c.gate.theta = t;
        }
        if let Some(k) = self.kappa_cut {
            c.gate.kappa_cut = k;
        }
        if self.gate {
            c.gate.enabled = true;
        }
        if self.no_fields {
            c.output.fields = false;
        }
        if let Some(o) = &self.out {
            c.output.dir = o.clone();
        }
        c.validate()?;
        Ok(c)
    }
}

fn execute(cmd: Command) -> Result<u8, Error> {
    match cmd {
        Command::Run(o) => {
            let out = harness::run(&o.resolve()?)?;
            for a in &out.manifest.assertions {
                println!("{} {} value={} bound={}", if a.passed { "PASS" } else { "FAIL" }, a.name, a.value, a.bound);
            }
            if let Some(dev) = out.manifest.cross_deviation {
                println!("cross-scheme deviation {dev}");
            }
            if let Some(name) = out.failing_invariant() {
                if let Some(f) = out.flow.failure() {
                    eprintln!("flow stopped at t = {}: {}", f.t, f.message);
                }
                eprintln!("failing invariant: {name}");
            }
            println!("artifacts in {}", out.dir.display());
            Ok(out.exit_code())
        }
        Command::RefineStudy { overrides, levels } => {
            let table = harness::refine_study(&overrides.resolve()?, levels)?;
            print!("{}", table.to_csv());
            Ok(0)
        }
        Command::Gate(o) => {
            let out = harness::run_gate(&o.resolve()?)?;
            match out.result.s_max {
                Some(s) => println!("S_max {s} (theta {})", out.result.theta),
                None => println!("S_max unbounded (theta {})", out.result.theta),
            }
            println!("cutoff checks {}", if out.cutoff.passed() { "PASS" } else { "FAIL" });
            Ok(if out.cutoff.passed() { 0 } else { 1 })
        }
        Command::ExportPlots { dir } => {
            println!("{}", harness::export_plots(&dir)?.display());
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Ok(v) = std::env::var(THREADS_VAR) {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => {
                eprintln!("error: {THREADS_VAR} must be a positive integer, got {v:?}");
                return ExitCode::from(2);
            }
        }
    }
    match execute(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            if harness::exit_code_for(&e) == 1 {
                eprintln!("failing invariant: {}", e.kind());
            }
            ExitCode::from(harness::exit_code_for(&e))
        }
    }
}
