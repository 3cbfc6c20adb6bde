//! Batch runner: `mvergodic <subcommand> --scenario FILE [--out DIR] [--seed N] ...`.
//!
//! Exit codes: 0 when every verdict passes, 2 when a check fails, 1 on usage or
//! configuration errors, 3 on numerical blow-up.

mod commands;
mod manifest;
mod params;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use mvergodic::model::scenario::Scenario;
use mvergodic::Error;

use commands::Ctx;
use manifest::RunManifest;
use params::{scenario_overrides, Overrides, Params};

#[derive(Parser)]
#[command(name = "mvergodic", version, about = "Experiments for ergodic BSDEs driven by McKean-Vlasov SDEs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Clone)]
struct Common {
    /// Scenario file (TOML).
    #[arg(long, global = true)]
    scenario: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, env = "MVERGODIC_OUT", default_value = "mvergodic-out")]
    out: PathBuf,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    particles: Option<usize>,
    #[arg(long, global = true)]
    dt: Option<f64>,
    #[arg(long, global = true)]
    horizon: Option<f64>,
    /// Any other run parameter, e.g. `--set alphas=0.4,0.2,0.1`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE", value_parser = parse_kv)]
    set: Vec<(String, String)>,
}

#[derive(Subcommand, Clone)]
enum Command {
    /// Sampled checks of the structural assumptions.
    Audit,
    /// Interacting particles, decoupled paths and the flow property.
    Simulate,
    /// Estimate of the invariant measure.
    Invariant,
    /// Lyapunov table, synchronous contraction and reflection coupling.
    Coupling,
    /// Finite-horizon BSDE.
    Bsde,
    /// Ergodic triple by vanishing discount.
    Ebsde,
    /// Y0/T − λ decay.
    Ltb1,
    /// Y0 − λT − ū(x0) convergence to ℓ.
    Ltb2,
    /// Z0 convergence to ζ̄(x0).
    Ltb3,
    /// Hamiltonian, controlled costs and the long-time control problem.
    Control,
    /// Verify a manifest's files and optionally replay it.
    Report {
        /// Manifest to read; defaults to OUT/manifest.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Re-run the recorded command into this directory and compare bytes.
        #[arg(long)]
        replay: Option<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Audit => "audit",
            Command::Simulate => "simulate",
            Command::Invariant => "invariant",
            Command::Coupling => "coupling",
            Command::Bsde => "bsde",
            Command::Ebsde => "ebsde",
            Command::Ltb1 => "ltb1",
            Command::Ltb2 => "ltb2",
            Command::Ltb3 => "ltb3",
            Command::Control => "control",
            Command::Report { .. } => "report",
        }
    }
}

fn parse_kv(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .filter(|(k, _)| !k.is_empty())
        .ok_or_else(|| format!("expected KEY=VALUE, got `{s}`"))
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::BlowUp { .. } | Error::BasisDegeneracy { .. } => 3,
        _ => 1,
    }
}

fn cli_overrides(c: &Common) -> Overrides {
    let mut m: Overrides = c.set.iter().cloned().collect();
    if let Some(v) = c.seed {
        m.insert("seed".into(), v.to_string());
    }
    if let Some(v) = c.particles {
        m.insert("particles".into(), v.to_string());
    }
    if let Some(v) = c.dt {
        m.insert("dt".into(), v.to_string());
    }
    if let Some(v) = c.horizon {
        m.insert("horizon".into(), v.to_string());
    }
    m
}

/// Runs one pipeline and writes OUT/manifest.
fn execute(name: &str, scenario: &Path, out: &Path, overrides: Overrides, threads: usize) -> mvergodic::Result<RunManifest> {
    let start = Instant::now();
    let sc = Scenario::load(scenario)?;
    std::fs::create_dir_all(out)?;
    let params = Params::new(overrides, scenario_overrides(&sc.run));
    let mut ctx = Ctx::new(out.to_path_buf(), params);
    commands::run(name, &sc, &mut ctx)?;
    for k in ctx.params.unused() {
        eprintln!("warning: parameter `{k}` is not used by `{name}`");
    }
    let m = RunManifest {
        subcommand: name.to_string(),
        scenario: Some(std::fs::canonicalize(scenario)?),
        out: std::fs::canonicalize(out)?,
        threads,
        params: ctx.params.resolved().clone(),
        verdicts: ctx.verdicts,
        files: ctx.files,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    };
    std::fs::write(out.join(manifest::FILE_NAME), m.render())?;
    Ok(m)
}

fn summarize(m: &RunManifest) {
    for v in &m.verdicts {
        println!("[{}] {}: {}", if v.pass { "PASS" } else { "FAIL" }, v.name, v.detail);
    }
    println!("{} files written; manifest in {}", m.files.len() + 1, m.out.display());
}

fn report(out: &Path, manifest: Option<PathBuf>, replay: Option<PathBuf>, threads: usize) -> mvergodic::Result<bool> {
    let path = manifest.unwrap_or_else(|| out.join(manifest::FILE_NAME));
    let m = RunManifest::load(&path)?;
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    println!("subcommand={} verdict={}", m.subcommand, if m.passed() { "pass" } else { "fail" });
    for (k, v) in &m.params {
        println!("  {k}={v}");
    }
    for v in &m.verdicts {
        println!("[{}] {}: {}", if v.pass { "PASS" } else { "FAIL" }, v.name, v.detail);
    }
    let bad = m.mismatches(&dir);
    for f in &bad {
        println!("modified or missing: {f}");
    }
    let mut ok = bad.is_empty() && m.passed();
    if let Some(target) = replay {
        let scenario = m.scenario.clone().ok_or_else(|| Error::Configuration("manifest names no scenario".into()))?;
        let again = execute(&m.subcommand, &scenario, &target, m.params.clone().into_iter().collect(), threads)?;
        let diff = m.mismatches(&target);
        let same_list = again.files.iter().map(|f| &f.name).eq(m.files.iter().map(|f| &f.name));
        for f in &diff {
            println!("replay differs: {f}");
        }
        println!("replay {}", if diff.is_empty() && same_list { "reproduced every file" } else { "diverged" });
        ok &= diff.is_empty() && same_list;
    }
    Ok(ok)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let threads = cli.common.threads.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
        eprintln!("error: cannot start {threads} threads: {e}");
        return ExitCode::from(1);
    }
    let out = cli.common.out.clone();
    let result = match &cli.command {
        Command::Report { manifest, replay } => report(&out, manifest.clone(), replay.clone(), threads),
        cmd => match &cli.common.scenario {
            None => Err(Error::Configuration(format!("`{}` needs --scenario FILE", cmd.name()))),
            Some(path) => execute(cmd.name(), path, &out, cli_overrides(&cli.common), threads).map(|m| {
                summarize(&m);
                m.passed()
            }),
        },
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
