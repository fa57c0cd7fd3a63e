use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cml_core::collision::{measure_h, measure_h_bounds, xi_eps};
use cml_core::harness::presets;
use cml_core::harness::run::{
    membership_frequency, run_ulam, with_threads, write_manifest, write_operator_survival_csv, write_outputs,
    write_report_csv, write_sweep, DirLock, OPERATOR_SURVIVAL_STEPS,
};
use cml_core::harness::{emit_plot, run_scenario, sweep, PlotKind, Scenario, SweepAxis};
use cml_core::monte_carlo::{
    default_hitting_horizon, hitting_law_test, hitting_sample, purpose, sub_seed,
};
use cml_core::number::Number;
use cml_core::rate::predict;
use cml_core::ulam::{assemble, build_grid};
use cml_core::{Error, Result};

/// Collision-coupled map lattices: closed-form collision rates checked
/// against Monte Carlo and Ulam oracles.
#[derive(Parser, Debug)]
#[command(name = "cmlab", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Scenario file or preset name.
    #[arg(long, global = true)]
    config: Option<String>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides `run.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (all cores by default). Never changes results.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Closed-form extremal index and predicted rates.
    Theta,
    /// Measure of the collision set, optionally checked by sampling.
    Measure {
        #[arg(long, default_value_t = 0)]
        samples: u64,
    },
    /// Full scenario: prediction, survival fit, and the enabled extras.
    Simulate {
        #[arg(long)]
        trajectories: Option<u64>,
        #[arg(long)]
        bins: Option<usize>,
        #[arg(long)]
        n_max: Option<u64>,
    },
    /// Rescaled first hitting times and their distance to Exp(1).
    Hitting {
        #[arg(long, default_value_t = 100_000)]
        samples: u64,
        #[arg(long)]
        n_max: Option<u64>,
    },
    /// Ulam eigenvalue, gap proxy and operator survival.
    Ulam {
        #[arg(long)]
        bins: Option<usize>,
        /// Also export the operator as `row col weight` lines.
        #[arg(long)]
        triplets: bool,
    },
    /// One run per value of `eps` or `N`.
    Sweep {
        /// Comma-separated hole sizes, e.g. `0.005,0.01,1/50`.
        #[arg(long, value_delimiter = ',', conflicts_with = "n")]
        eps: Vec<String>,
        /// Comma-separated ring sizes.
        #[arg(long, value_delimiter = ',')]
        n: Vec<usize>,
    },
    /// SVG figure from a CSV written by another subcommand.
    Plot {
        #[arg(long)]
        csv: PathBuf,
        /// survival, rate_vs_L, rate_vs_eps2 or hitting_law.
        #[arg(long)]
        kind: String,
        #[arg(long)]
        output: Option<PathBuf>,
        /// Hitting-time scale factor (default: one over the mean).
        #[arg(long)]
        rescale: Option<f64>,
    },
    /// List presets, or print one as a scenario file.
    Presets { name: Option<String> },
}

fn load(global: &Global) -> Result<Scenario> {
    let name = global
        .config
        .as_deref()
        .ok_or_else(|| Error::config("config", "pass --config with a scenario file or preset name"))?;
    let mut s = Scenario::load(name)?;
    if let Some(seed) = global.seed {
        s.run.seed = seed;
    }
    s.build()?;
    Ok(s)
}

fn out_dir(global: &Global, default: &str) -> PathBuf {
    global.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn list(paths: &[PathBuf]) {
    for p in paths {
        println!("wrote {}", p.display());
    }
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    match &cli.cmd {
        Command::Presets { name } => {
            match name {
                Some(n) => print!(
                    "{}",
                    presets::preset_text(n).ok_or_else(|| Error::config("name", format!("no preset `{n}`")))?
                ),
                None => {
                    for (n, d) in presets::list() {
                        println!("{n:<20} {d}");
                    }
                }
            }
            Ok(())
        }
        Command::Plot {
            csv,
            kind,
            output,
            rescale,
        } => {
            let kind: PlotKind = kind.parse()?;
            let svg = output.clone().unwrap_or_else(|| csv.with_extension("svg"));
            emit_plot(csv, kind, &svg, *rescale)?;
            println!("wrote {}", svg.display());
            Ok(())
        }
        Command::Theta => {
            let s = load(g)?;
            let b = s.build()?;
            let report = predict(&b.map, &b.cspec, &b.lattice, &b.h, s.run.k_max)?;
            print!("{}", report.kv_block());
            if let Some(dir) = &g.out {
                let _lock = DirLock::acquire(dir)?;
                write_manifest(dir, &s, "")?;
                write_report_csv(&dir.join("report.csv"), &[report])?;
            }
            Ok(())
        }
        Command::Measure { samples } => {
            let s = load(g)?;
            let b = s.build()?;
            let m = measure_h(&b.cspec, &b.lattice, &b.h)?;
            let (lo, hi) = measure_h_bounds(&b.cspec, &b.lattice, &b.h);
            println!("{:<20} = {:<24e} # {}", "mu0_H", m.value, if m.exact { "inclusion-exclusion" } else { "bracket midpoint" });
            println!("{:<20} = {:<24e} # bracket", "mu0_H_lower", m.lower.min(lo));
            println!("{:<20} = {:<24e} # bracket", "mu0_H_upper", m.upper.max(hi));
            println!("{:<20} = {:<24} # inclusion-exclusion", "families", m.families);
            println!("{:<20} = {:<24e} # closed form", "xi_eps", xi_eps(&b.cspec, &b.h));
            if *samples > 0 {
                let (p, se) = with_threads(g.threads, || membership_frequency(&b, *samples, s.run.seed))?;
                println!("{:<20} = {:<24e} # direct scan, {samples} samples", "mc_frequency", p);
                println!("{:<20} = {:<24e} # binomial", "mc_stderr", se);
                println!("{:<20} = {:<24.2} # (mc - mu0_H) / stderr", "z", (p - m.value) / se);
            }
            Ok(())
        }
        Command::Simulate {
            trajectories,
            bins,
            n_max,
        } => {
            let mut s = load(g)?;
            if let Some(t) = trajectories {
                s.run.trajectories = *t;
            }
            if bins.is_some() {
                s.run.bins = *bins;
            }
            if n_max.is_some() {
                s.run.n_max = *n_max;
            }
            s.build()?;
            let out = with_threads(g.threads, || run_scenario(&s))??;
            print!("{}", cml_core::harness::run::report_text(&out));
            list(&write_outputs(&out, &out_dir(g, "cmlab-out"))?);
            Ok(())
        }
        Command::Hitting { samples, n_max } => {
            let s = load(g)?;
            let b = s.build()?;
            let report = predict(&b.map, &b.cspec, &b.lattice, &b.h, s.run.k_max)?;
            let scale = report.theta * report.mu0_h;
            if !(scale > 0.0) {
                return Err(Error::config("collision.eps", "hitting times need a non-empty collision set"));
            }
            let horizon = n_max.unwrap_or_else(|| default_hitting_horizon(scale));
            let sample = with_threads(g.threads, || {
                hitting_sample(&b.system(), *samples, horizon, scale, sub_seed(s.run.seed, purpose::HITTING))
            })??;
            let dir = out_dir(g, "cmlab-out");
            let _lock = DirLock::acquire(&dir)?;
            write_manifest(&dir, &s, &format!("# hitting samples = {samples}, horizon = {horizon}, rescale = {scale:e}\n"))?;
            let csv = dir.join("hitting.csv");
            sample.save(&csv)?;
            let svg = dir.join("hitting_law.svg");
            emit_plot(&csv, PlotKind::HittingLaw, &svg, Some(scale))?;
            println!("{:<20} = {:<24e} # theta mu0_H", "rescale", scale);
            println!("{:<20} = {:<24} # samples", "censored", sample.censored_count());
            let ks = hitting_law_test(&sample)?;
            println!("{:<20} = {:<24e} # sup |P(T >= t) - e^-t|", "ks_stat", ks.ks);
            println!("{:<20} = {:<24e} # weighted by e^t / max(t, 1)", "ks_weighted", ks.weighted);
            list(&[csv, svg]);
            Ok(())
        }
        Command::Ulam { bins, triplets } => {
            let mut s = load(g)?;
            if bins.is_some() {
                s.run.bins = *bins;
            }
            let bins = s.run.bins.ok_or_else(|| Error::config("run.bins", "pass --bins or set run.bins"))?;
            let b = s.build()?;
            let dir = out_dir(g, "cmlab-out");
            let steps = s.run.n_max.unwrap_or(OPERATOR_SURVIVAL_STEPS).min(OPERATOR_SURVIVAL_STEPS);
            let u = with_threads(g.threads, || run_ulam(&b, bins, steps))??;
            let _lock = DirLock::acquire(&dir)?;
            write_manifest(&dir, &s, "")?;
            print!("{:<20} = {:<24} # grid\n{}", "ulam_cells", u.cells, u.spectral.kv_block());
            let csv = dir.join("ulam_survival.csv");
            write_operator_survival_csv(&csv, &u.survival)?;
            let mut written = vec![csv];
            if *triplets {
                let grid = build_grid(&b.map, &b.cspec, &b.lattice, bins)?;
                let op = assemble(&grid, &b.map, &b.cspec, &b.lattice)?;
                let path = dir.join("operator.txt");
                op.write_triplets(std::io::BufWriter::new(std::fs::File::create(&path)?))?;
                written.push(path);
            }
            list(&written);
            Ok(())
        }
        Command::Sweep { eps, n } => {
            let s = load(g)?;
            let axis = if !eps.is_empty() {
                SweepAxis::Eps(
                    eps.iter()
                        .map(|e| e.parse::<Number>().map_err(|m| Error::config("eps", m)))
                        .collect::<Result<_>>()?,
                )
            } else {
                SweepAxis::N(n.clone())
            };
            let result = with_threads(g.threads, || sweep(&s, &axis))??;
            for r in &result.rows {
                match (&r.error, r.rate_mc, r.rate_mc_stderr) {
                    (Some(e), _, _) => println!("L={:<6} eps={:<10e} error: {e}", r.sites, r.eps),
                    (None, Some(rate), Some(se)) => println!(
                        "L={:<6} eps={:<10e} rate_mc={rate:.5e} +- {se:.1e}  theta mu0_H={:.5e}",
                        r.sites,
                        r.eps,
                        r.rate_pred.unwrap_or(f64::NAN)
                    ),
                    _ => println!("L={:<6} eps={:<10e} no rate fit", r.sites, r.eps),
                }
            }
            list(&write_sweep(&result, &s, &axis, &out_dir(g, "cmlab-sweep"))?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
