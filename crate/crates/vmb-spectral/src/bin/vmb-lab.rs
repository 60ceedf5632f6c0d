//! Thin command-line front end: pick a suite, run it, print one verdict line
//! per check, and exit 0 only when every check passed.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use vmb_spectral::suite::{run_suite, ConfigPatch, ExperimentConfig};
use vmb_spectral::{Error, Result};

/// Deterministic experiment runner over the kinetic-mode laboratory.
#[derive(Debug, Parser)]
#[command(name = "vmb-lab", version, about)]
struct Args {
    /// JSON configuration file; command-line flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Suite to run: spectrum | expansion | semigroup | limit | kernels | all.
    #[arg(long)]
    suite: Option<String>,
    /// Velocity nodes per axis of the collision discretization.
    #[arg(long)]
    n_axis: Option<usize>,
    /// Comma-separated scaling parameters in (0, 1), largest first.
    #[arg(long)]
    eps: Option<String>,
    /// Radial grid as lo:hi:shells, e.g. 1e-2:200:20.
    #[arg(long)]
    s_grid: Option<String>,
    /// Output directory; receives results/, manifest.json, report.md.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; 0 keeps the global pool default.
    #[arg(long)]
    workers: Option<usize>,
    /// Collision-matrix cache directory.
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// Reduced preset: 8 nodes per axis, two eps values, 20 shells.
    #[arg(long)]
    smoke: bool,
}

fn parse_eps(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|tok| {
            tok.trim()
                .parse::<f64>()
                .map_err(|e| Error::Config(format!("eps entry {tok:?}: {e}")))
        })
        .collect()
}

fn parse_s_grid(text: &str) -> Result<(f64, f64, usize)> {
    let parts: Vec<&str> = text.split(':').collect();
    if parts.len() != 3 {
        return Err(Error::Config(format!(
            "s-grid must be lo:hi:shells; got {text:?}"
        )));
    }
    let lo = parts[0]
        .parse::<f64>()
        .map_err(|e| Error::Config(format!("s-grid lower endpoint {:?}: {e}", parts[0])))?;
    let hi = parts[1]
        .parse::<f64>()
        .map_err(|e| Error::Config(format!("s-grid upper endpoint {:?}: {e}", parts[1])))?;
    let shells = parts[2]
        .parse::<usize>()
        .map_err(|e| Error::Config(format!("s-grid shell count {:?}: {e}", parts[2])))?;
    Ok((lo, hi, shells))
}

fn run(args: Args) -> Result<bool> {
    let mut cfg = ExperimentConfig::new("", args.smoke);
    if let Some(path) = &args.config {
        cfg.apply(&ConfigPatch::from_json_file(path)?);
    }
    let (s_lo, s_hi, shells) = match &args.s_grid {
        Some(text) => {
            let (lo, hi, n) = parse_s_grid(text)?;
            (Some(lo), Some(hi), Some(n))
        }
        None => (None, None, None),
    };
    cfg.apply(&ConfigPatch {
        suite: args.suite,
        n_axis: args.n_axis,
        eps: args.eps.as_deref().map(parse_eps).transpose()?,
        s_lo,
        s_hi,
        shells,
        out: args.out,
        cache_dir: args.cache_dir,
        workers: args.workers,
        tol: None,
    });

    let record = run_suite(&cfg)?;
    for check in &record.checks {
        let measured = check
            .measured
            .map_or("-".to_string(), |x| format!("{x:.6e}"));
        println!(
            "{} {}: measured {measured}, expected {}",
            if check.pass { "PASS" } else { "FAIL" },
            check.name,
            check.expected
        );
    }
    println!(
        "{}: {} of {} checks pass ({:.1} s); report at {}",
        if record.all_pass { "PASS" } else { "FAIL" },
        record.checks.iter().filter(|c| c.pass).count(),
        record.checks.len(),
        record.elapsed_secs,
        cfg.out.join("report.md").display()
    );
    Ok(record.all_pass)
}

fn main() -> ExitCode {
    vmb_spectral::init_single_thread_blas();
    match run(Args::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
