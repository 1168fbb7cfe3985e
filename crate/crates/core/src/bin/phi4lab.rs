use clap::{Args, Parser, Subcommand};
use phi4lab::commands::{
    cmd_equivalence, cmd_renorm, cmd_simulate, cmd_symbols, cmd_tail, cmd_verify, describe_error,
};
use phi4lab::config::ExperimentConfig;
use phi4lab::verify::Fault;
use phi4lab::{LabError, Result};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "phi4lab", version, about = "Pseudospectral laboratory for renormalized Phi^4 equations on the torus")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (JSON); defaults apply to absent fields.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides `master_seed`.
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    /// Worker threads for replica loops (default: all cores).
    #[arg(long, value_name = "INT")]
    threads: Option<usize>,
    /// Overrides `output_dir`.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Exact identities, degenerations and bounds of every module.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Inject a known fault to confirm the suite catches it (`widened-partition`).
        #[arg(long)]
        fault: Option<String>,
    },
    /// Symbol paths, Besov norms and renormalization constants on one noise path.
    Symbols(Common),
    /// `c_n` and `c̃_n` over a range of cutoffs.
    Renorm(Common),
    /// Direct solve and (v, w) reconstruction on one noise path.
    Simulate(Common),
    /// Monte Carlo exceedance curves and Gaussian-tail fits.
    Tail(Common),
    /// Direct-vs-reconstruction gap and its dt-refinement ratio.
    Equivalence(Common),
}

fn load(common: &Common) -> Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.master_seed = s;
    }
    if let Some(o) = &common.out {
        cfg.output_dir = o.display().to_string();
    }
    cfg.validate()?;
    let out = PathBuf::from(&cfg.output_dir);
    Ok((cfg, out))
}

fn set_threads(common: &Common) -> Result<()> {
    if let Some(n) = common.threads {
        if n == 0 {
            return Err(LabError::Config(vec!["--threads: must be positive".into()]));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| LabError::InvalidInput(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn run(cli: Cli) -> std::result::Result<bool, String> {
    let common = match &cli.command {
        Command::Verify { common, .. } => common,
        Command::Symbols(c) | Command::Renorm(c) | Command::Simulate(c) | Command::Tail(c) | Command::Equivalence(c) => c,
    }
    .clone();
    set_threads(&common).map_err(|e| e.to_string())?;

    if let Command::Verify { fault, .. } = &cli.command {
        let fault = match fault.as_deref() {
            None => None,
            Some(s) => Some(Fault::parse(s).ok_or_else(|| format!("unknown fault {s:?} (known: widened-partition)"))?),
        };
        let out = common.out.clone().unwrap_or_else(|| PathBuf::from("out/verify"));
        let report = cmd_verify(&out, fault).map_err(|e| e.to_string())?;
        for c in &report.checks {
            println!("{} {:<32} value {:.3e} tolerance {:.1e}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.value, c.tolerance);
        }
        return Ok(report.passed);
    }

    let (cfg, out) = load(&common).map_err(|e| describe_error(&ExperimentConfig::default(), &e))?;
    let fail = |e: LabError| describe_error(&cfg, &e);
    let ok = match cli.command {
        Command::Symbols(_) => cmd_symbols(&cfg, &out).map(|_| true),
        Command::Renorm(_) => cmd_renorm(&cfg, &out).map(|_| true),
        Command::Simulate(_) => cmd_simulate(&cfg, &out).map(|_| true),
        Command::Tail(_) => cmd_tail(&cfg, &out).map(|_| true),
        Command::Equivalence(_) => cmd_equivalence(&cfg, &out).map(|(o, _)| {
            println!("gap {:.4e} (dt = {}), ratio under dt halving {:.3}", o.report.fine.gap, cfg.dt / 2.0, o.report.ratio);
            true
        }),
        Command::Verify { .. } => unreachable!(),
    }
    .map_err(fail)?;
    println!("wrote {}", out.display());
    Ok(ok)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
