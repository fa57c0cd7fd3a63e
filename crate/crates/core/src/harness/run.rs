//! Running scenarios and sweeps, and writing their output directories.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;

use crate::collision::{in_collision_set, LatticeState};
use crate::error::{Error, Result};
use crate::monte_carlo::{
    default_hitting_horizon, estimate_qk, fit_rate, hitting_law_test, hitting_sample, purpose, stream_rng,
    sub_seed, survival_curve, HittingSample, KsResult, QkEstimate, RateFit, SurvivalCurve, SurvivalParams,
    DEFAULT_BURN_IN,
};
use crate::number::Number;
use crate::rate::{predict, RateReport, REPORT_CSV_HEADER};
use crate::ulam::{assemble, build_grid, leading_eigen, survival_curve_operator, SpectralResult, DEFAULT_MAX_ITER, DEFAULT_TOL};

use super::plot::{emit_plot, PlotKind};
use super::scenario::{Built, Scenario};

/// Longest operator survival curve written next to the Monte Carlo one.
pub const OPERATOR_SURVIVAL_STEPS: u64 = 100;

/// Survival horizon when none is configured: about three predicted
/// lifetimes, kept between 50 and 10^6 steps.
pub fn default_n_max(rate_pred: f64) -> u64 {
    if !(rate_pred > 0.0) {
        return 100;
    }
    (3.0 / rate_pred).ceil().clamp(50.0, 1e6) as u64
}

/// Runs `f` on a pool of `threads` workers (all cores when `None`).
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = threads {
        if t == 0 {
            return Err(Error::config("threads", "must be at least 1"));
        }
        builder = builder.num_threads(t);
    }
    let pool = builder.build().map_err(|e| Error::ThreadPool(e.to_string()))?;
    Ok(pool.install(f))
}

#[derive(Debug, Clone)]
pub struct UlamOutput {
    pub spectral: SpectralResult,
    /// `int P^n 1` for `n = 0..`.
    pub survival: Vec<f64>,
    pub cells: usize,
}

pub fn run_ulam(built: &Built, bins: usize, steps: u64) -> Result<UlamOutput> {
    let grid = build_grid(&built.map, &built.cspec, &built.lattice, bins)?;
    let op = assemble(&grid, &built.map, &built.cspec, &built.lattice)?;
    let spectral = leading_eigen(&op, DEFAULT_TOL, DEFAULT_MAX_ITER)?;
    let survival = survival_curve_operator(&op, steps as usize);
    Ok(UlamOutput {
        spectral,
        survival,
        cells: op.dimension(),
    })
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    /// The scenario with every derived default filled in.
    pub scenario: Scenario,
    pub report: RateReport,
    pub survival: SurvivalCurve,
    pub fit: Option<RateFit>,
    pub ulam: Option<UlamOutput>,
    pub qk: Option<QkEstimate>,
    pub hitting: Option<HittingSample>,
    pub ks: Option<KsResult>,
}

/// Closed forms, survival simulation and fit, and whichever of the Ulam,
/// return-probability and hitting-law experiments the run block enables.
pub fn run_scenario(scenario: &Scenario) -> Result<RunOutput> {
    let built = scenario.build()?;
    let sys = built.system();
    let run = &scenario.run;
    let mut report = predict(&built.map, &built.cspec, &built.lattice, &built.h, run.k_max)?;
    let mut resolved = scenario.clone();
    let n_max = run.n_max.unwrap_or_else(|| default_n_max(report.rate_pred));
    resolved.run.n_max = Some(n_max);

    let survival = survival_curve(
        &sys,
        &SurvivalParams {
            n_traj: run.trajectories,
            n_max,
            measure_kind: run.measure_kind,
            conditioned: run.conditioned,
            seed: sub_seed(run.seed, purpose::SURVIVAL),
        },
    )?;
    let fit = match fit_rate(&survival, DEFAULT_BURN_IN) {
        Ok(f) => {
            report.rate_mc = Some(f.rate);
            report.rate_mc_stderr = Some(f.stderr);
            Some(f)
        }
        Err(e) => {
            report.warnings.push(format!("survival fit: {e}"));
            None
        }
    };

    let ulam = match run.bins {
        Some(bins) => {
            let u = run_ulam(&built, bins, n_max.min(OPERATOR_SURVIVAL_STEPS))?;
            report.lambda_ulam = Some(u.spectral.lambda);
            Some(u)
        }
        None => None,
    };

    let qk = if run.qk_samples > 0 && !built.cspec.is_empty() {
        let q = estimate_qk(&sys, run.k_max, run.qk_samples, sub_seed(run.seed, purpose::QK))?;
        report.theta_emp = Some(q.theta_emp);
        let lambda = report.lambda_ulam.unwrap_or(report.lambda_pred);
        report.theta_n_eps = Some(q.theta_n(lambda, built.lattice.n()));
        Some(q)
    } else {
        None
    };

    let (hitting, ks) = if run.hitting_samples > 0 && !built.cspec.is_empty() {
        let scale = report.theta * report.mu0_h;
        let sample = hitting_sample(
            &sys,
            run.hitting_samples,
            default_hitting_horizon(scale),
            scale,
            sub_seed(run.seed, purpose::HITTING),
        )?;
        let ks = match hitting_law_test(&sample) {
            Ok(k) => {
                report.ks_stat = Some(k.ks);
                Some(k)
            }
            Err(e) => {
                report.warnings.push(format!("hitting law: {e}"));
                None
            }
        };
        (Some(sample), ks)
    } else {
        (None, None)
    };

    Ok(RunOutput {
        scenario: resolved,
        report,
        survival,
        fit,
        ulam,
        qk,
        hitting,
        ks,
    })
}

/// Exclusive claim on an output directory, released on drop.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(".lock");
        OpenOptions::new().write(true).create_new(true).open(&path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                Error::config("out", format!("{} is in use by another run", dir.display()))
            } else {
                e.into()
            }
        })?;
        Ok(DirLock { path })
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

pub fn write_manifest(dir: &Path, scenario: &Scenario, extra: &str) -> Result<()> {
    let mut f = BufWriter::new(File::create(dir.join("manifest.toml"))?);
    writeln!(f, "# cml-core {}", env!("CARGO_PKG_VERSION"))?;
    f.write_all(extra.as_bytes())?;
    f.write_all(scenario.to_toml_string()?.as_bytes())?;
    f.flush()?;
    Ok(())
}

pub fn write_report_csv(path: &Path, reports: &[RateReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(REPORT_CSV_HEADER)?;
    for r in reports {
        w.write_record(r.csv_row())?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_qk_csv(path: &Path, q: &QkEstimate) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["k", "q_k", "stderr"])?;
    for (k, (v, s)) in q.q.iter().zip(&q.stderr).enumerate() {
        w.write_record([k.to_string(), format!("{v:e}"), format!("{s:e}")])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_operator_survival_csv(path: &Path, survival: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["n", "survival"])?;
    for (n, s) in survival.iter().enumerate() {
        w.write_record([n.to_string(), format!("{s:e}")])?;
    }
    w.flush()?;
    Ok(())
}

pub fn report_text(out: &RunOutput) -> String {
    let mut s = out.report.kv_block();
    if let Some(f) = &out.fit {
        s.push_str(&format!("{:<20} = {:<24} # survival fit\n", "fit_window", format!("{}..{}", f.first, f.last)));
    }
    if let Some(q) = &out.qk {
        s.push_str(&format!(
            "{:<20} = {:<24e} # binomial\n",
            "theta_emp_stderr", q.theta_emp_stderr
        ));
    }
    if let Some(u) = &out.ulam {
        s.push_str(&format!("{:<20} = {:<24} # grid\n", "ulam_cells", u.cells));
        s.push_str(&u.spectral.kv_block());
    }
    if let Some(k) = &out.ks {
        s.push_str(&format!("{:<20} = {:<24e} # hitting law\n", "ks_weighted", k.weighted));
    }
    s
}

/// Writes manifest, CSVs, plots and the summary block into `dir`.
pub fn write_outputs(out: &RunOutput, dir: &Path) -> Result<Vec<PathBuf>> {
    let _lock = DirLock::acquire(dir)?;
    let mut written = Vec::new();
    write_manifest(dir, &out.scenario, "")?;
    written.push(dir.join("manifest.toml"));

    let p = dir.join("report.csv");
    write_report_csv(&p, std::slice::from_ref(&out.report))?;
    written.push(p);
    let p = dir.join("report.txt");
    fs::write(&p, report_text(out))?;
    written.push(p);

    let p = dir.join("survival.csv");
    out.survival.save(&p)?;
    written.push(p.clone());
    let svg = dir.join("survival.svg");
    emit_plot(&p, PlotKind::Survival, &svg, None)?;
    written.push(svg);

    if let Some(u) = &out.ulam {
        let p = dir.join("ulam_survival.csv");
        write_operator_survival_csv(&p, &u.survival)?;
        written.push(p);
    }
    if let Some(q) = &out.qk {
        let p = dir.join("qk.csv");
        write_qk_csv(&p, q)?;
        written.push(p);
    }
    if let Some(h) = &out.hitting {
        let p = dir.join("hitting.csv");
        h.save(&p)?;
        written.push(p.clone());
        let svg = dir.join("hitting_law.svg");
        emit_plot(&p, PlotKind::HittingLaw, &svg, Some(h.rescale))?;
        written.push(svg);
    }
    Ok(written)
}

/// Monte Carlo frequency of the collision set under the scenario's
/// sampling measure, by direct scan of every pair (independent of the
/// inclusion-exclusion route). Returns the frequency and its standard error.
pub fn membership_frequency(built: &Built, samples: u64, seed: u64) -> (f64, f64) {
    let sites = built.lattice.sites();
    let hits: u64 = (0..samples as usize)
        .into_par_iter()
        .with_min_len(4096)
        .map(|i| {
            let mut rng = stream_rng(seed, i as u64);
            let coords = (0..sites)
                .map(|_| {
                    let u: f64 = rng.gen();
                    if built.h.is_uniform() {
                        u
                    } else {
                        built.h.quantile(u)
                    }
                })
                .collect();
            in_collision_set(&LatticeState { coords }, &built.cspec, &built.lattice) as u64
        })
        .sum();
    let p = hits as f64 / samples as f64;
    (p, (p * (1.0 - p) / samples as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub enum SweepAxis {
    Eps(Vec<Number>),
    N(Vec<usize>),
}

impl SweepAxis {
    pub fn len(&self) -> usize {
        match self {
            SweepAxis::Eps(v) => v.len(),
            SweepAxis::N(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn describe(&self) -> String {
        match self {
            SweepAxis::Eps(v) => format!("eps = [{}]", v.iter().map(|x| format!("\"{x}\"")).collect::<Vec<_>>().join(", ")),
            SweepAxis::N(v) => format!("n = [{}]", v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")),
        }
    }
}

pub const SWEEP_CSV_HEADER: [&str; 14] = [
    "L",
    "d",
    "N",
    "eps",
    "xi_eps",
    "mu0_H",
    "theta",
    "rate_pred",
    "rate_mc",
    "rate_mc_stderr",
    "lambda_ulam",
    "ks_stat",
    "seed",
    "error",
];

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub sites: usize,
    pub d: usize,
    pub n: usize,
    pub eps: f64,
    pub xi_eps: Option<f64>,
    pub mu0_h: Option<f64>,
    pub theta: Option<f64>,
    pub rate_pred: Option<f64>,
    pub rate_mc: Option<f64>,
    pub rate_mc_stderr: Option<f64>,
    pub lambda_ulam: Option<f64>,
    pub ks_stat: Option<f64>,
    pub seed: u64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:e}")).unwrap_or_default()
}

fn parse_opt(s: &str) -> Option<f64> {
    if s.is_empty() {
        None
    } else {
        s.parse().ok()
    }
}

impl SweepResult {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(SWEEP_CSV_HEADER)?;
        for r in &self.rows {
            w.write_record([
                r.sites.to_string(),
                r.d.to_string(),
                r.n.to_string(),
                format!("{:e}", r.eps),
                fmt_opt(r.xi_eps),
                fmt_opt(r.mu0_h),
                fmt_opt(r.theta),
                fmt_opt(r.rate_pred),
                fmt_opt(r.rate_mc),
                fmt_opt(r.rate_mc_stderr),
                fmt_opt(r.lambda_ulam),
                fmt_opt(r.ks_stat),
                r.seed.to_string(),
                r.error.clone().unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        crate::monte_carlo::check_header(&mut rdr, &SWEEP_CSV_HEADER, path)?;
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let bad = |col: &str| Error::SchemaMismatch {
                path: path.to_path_buf(),
                expected: SWEEP_CSV_HEADER.iter().map(|s| s.to_string()).collect(),
                found: vec![format!("unparseable {col}: {:?}", rec)],
            };
            rows.push(SweepRow {
                sites: rec[0].parse().map_err(|_| bad("L"))?,
                d: rec[1].parse().map_err(|_| bad("d"))?,
                n: rec[2].parse().map_err(|_| bad("N"))?,
                eps: rec[3].parse().map_err(|_| bad("eps"))?,
                xi_eps: parse_opt(&rec[4]),
                mu0_h: parse_opt(&rec[5]),
                theta: parse_opt(&rec[6]),
                rate_pred: parse_opt(&rec[7]),
                rate_mc: parse_opt(&rec[8]),
                rate_mc_stderr: parse_opt(&rec[9]),
                lambda_ulam: parse_opt(&rec[10]),
                ks_stat: parse_opt(&rec[11]),
                seed: rec[12].parse().map_err(|_| bad("seed"))?,
                error: Some(rec[13].to_string()).filter(|s| !s.is_empty()),
            });
        }
        Ok(SweepResult { rows })
    }
}

/// The scenario of row `index`: the axis value substituted and the seed
/// derived from the base seed and the row index alone.
pub fn sweep_point(base: &Scenario, axis: &SweepAxis, index: usize) -> Scenario {
    let mut s = base.clone();
    match axis {
        SweepAxis::Eps(v) => s.collision.eps = v[index].clone(),
        SweepAxis::N(v) => s.lattice.n = v[index],
    }
    s.run.seed = sub_seed(base.run.seed, index as u64);
    s
}

/// Runs every point of the axis in order. A failing point is recorded in
/// its row and the sweep continues.
pub fn sweep(base: &Scenario, axis: &SweepAxis) -> Result<SweepResult> {
    if axis.is_empty() {
        return Err(Error::config("sweep", "the sweep axis is empty"));
    }
    let rows = (0..axis.len())
        .map(|i| {
            let s = sweep_point(base, axis, i);
            let eps = s.collision.eps.to_f64();
            let blank = SweepRow {
                sites: s.lattice.n.checked_pow(s.lattice.d as u32).unwrap_or(0),
                d: s.lattice.d,
                n: s.lattice.n,
                eps,
                xi_eps: None,
                mu0_h: None,
                theta: None,
                rate_pred: None,
                rate_mc: None,
                rate_mc_stderr: None,
                lambda_ulam: None,
                ks_stat: None,
                seed: s.run.seed,
                error: None,
            };
            match run_scenario(&s) {
                Ok(out) => {
                    let r = out.report;
                    SweepRow {
                        xi_eps: Some(r.xi_eps),
                        mu0_h: Some(r.mu0_h),
                        theta: Some(r.theta),
                        rate_pred: Some(r.rate_pred),
                        rate_mc: r.rate_mc,
                        rate_mc_stderr: r.rate_mc_stderr,
                        lambda_ulam: r.lambda_ulam,
                        ks_stat: r.ks_stat,
                        ..blank
                    }
                }
                Err(e) => SweepRow {
                    error: Some(e.to_string()),
                    ..blank
                },
            }
        })
        .collect();
    Ok(SweepResult { rows })
}

/// Writes `sweep.csv`, its plot and a manifest holding the base scenario
/// and the axis.
pub fn write_sweep(result: &SweepResult, base: &Scenario, axis: &SweepAxis, dir: &Path) -> Result<Vec<PathBuf>> {
    let _lock = DirLock::acquire(dir)?;
    write_manifest(dir, base, &format!("# sweep axis: {}\n# row seeds: sub_seed(run.seed, row)\n", axis.describe()))?;
    let p = dir.join("sweep.csv");
    result.write_csv(&p)?;
    let (kind, name) = match axis {
        SweepAxis::Eps(_) => (PlotKind::RateVsEps2, "rate_vs_eps2.svg"),
        SweepAxis::N(_) => (PlotKind::RateVsL, "rate_vs_L.svg"),
    };
    let svg = dir.join(name);
    emit_plot(&p, kind, &svg, None)?;
    Ok(vec![dir.join("manifest.toml"), p, svg])
}
