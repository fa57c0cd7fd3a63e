//! Acceptance criteria, one PASS/FAIL line each.
//!
//! Runs without the libtest harness so the lines are always printed. A
//! FAIL is a measured outcome, not a test failure: the process exits
//! non-zero only when a computation itself breaks.

use std::collections::BTreeMap;
use std::time::Instant;

use cml_core::collision::{measure_h, CollisionSpec};
use cml_core::harness::presets::preset;
use cml_core::harness::run::{membership_frequency, run_scenario, with_threads, write_outputs};
use cml_core::harness::Scenario;
use cml_core::lattice::LatticeSpec;
use cml_core::monte_carlo::{
    default_hitting_horizon, estimate_qk, fit_rate, hitting_law_test, hitting_sample, survival_curve, MeasureKind,
    SurvivalParams, System, DEFAULT_BURN_IN,
};
use cml_core::number::Number;
use cml_core::rate::{period_structure, predict, theta_exact, DirectionPeriod, DEFAULT_K_MAX};
use cml_core::site_map::{InvariantDensity, SiteMap};
use cml_core::ulam::{assemble, build_grid, leading_eigen, survival_curve_operator};

const EPS: f64 = 0.01;

struct Outcome {
    pass: bool,
    detail: String,
}

fn centers(pairs: &[(i64, i64, i64)]) -> Vec<(Number, Number)> {
    pairs
        .iter()
        .map(|&(a, b, den)| (Number::ratio(a, den), Number::ratio(b, den)))
        .collect()
}

struct Setup {
    map: SiteMap,
    cspec: CollisionSpec,
    lattice: LatticeSpec,
    h: InvariantDensity,
}

impl Setup {
    fn new(d: usize, n: usize, eps: Number, c: &[(i64, i64, i64)]) -> Self {
        let map = SiteMap::doubling();
        let cspec = CollisionSpec::new(eps, centers(c), &map).expect("valid collision spec");
        Setup {
            map,
            cspec,
            lattice: LatticeSpec::new(d, n).expect("valid lattice"),
            h: InvariantDensity::uniform(),
        }
    }

    fn sys(&self) -> System<'_> {
        System {
            map: &self.map,
            cspec: &self.cspec,
            lattice: &self.lattice,
            h: &self.h,
        }
    }
}

fn eps_hundredth() -> Number {
    Number::ratio(1, 100)
}

/// Extremal index exactly, and from sampled returns.
fn theta_check(d: usize, c: &[(i64, i64, i64)], expected: &str, samples: u64, seed: u64, budget: f64) -> Outcome {
    let t0 = Instant::now();
    let s = Setup::new(d, 2, eps_hundredth(), c);
    let ps = period_structure(&s.map, &s.cspec, DEFAULT_K_MAX).unwrap();
    let exact = theta_exact(&s.map, &s.cspec, &ps, &s.h)
        .unwrap()
        .map(|r| Number::Exact(r).to_string());
    let target = expected.parse::<Number>().unwrap().to_f64();
    let q = estimate_qk(&s.sys(), DEFAULT_K_MAX, samples, seed).unwrap();
    let report = predict(&s.map, &s.cspec, &s.lattice, &s.h, DEFAULT_K_MAX).unwrap();
    let lambda = 1.0 - report.theta_lattice * report.mu0_h;
    let secs = t0.elapsed().as_secs_f64();
    let exact_ok = exact.as_deref() == Some(expected);
    let emp_ok = (q.theta_emp - target).abs() <= 0.01;
    Outcome {
        pass: exact_ok && emp_ok && secs <= budget,
        detail: format!(
            "theta = {} (want {expected}), theta_emp = {:.4} +- {:.4} over {samples} samples (want within 0.01 of {target:.4}); \
             same-box theta = {:.4}, theta_(N,eps) = {:.4}; {secs:.1} s",
            exact.unwrap_or_else(|| "none".into()),
            q.theta_emp,
            q.theta_emp_stderr,
            report.theta_lattice,
            q.theta_n(lambda, 2),
        ),
    }
}

fn c1() -> Outcome {
    theta_check(1, &[(1, 2, 3)], "15/16", 10_000_000, 101, 120.0)
}

fn c2() -> Outcome {
    let t0 = Instant::now();
    let s = Setup::new(1, 2, eps_hundredth(), &[(1, 2, 3)]);
    let target = 0.9375 * 2.0 * EPS * EPS;
    let mut errs = Vec::new();
    let mut text = Vec::new();
    for bins in [64, 128, 256] {
        let grid = build_grid(&s.map, &s.cspec, &s.lattice, bins).unwrap();
        let op = assemble(&grid, &s.map, &s.cspec, &s.lattice).unwrap();
        let r = leading_eigen(&op, 1e-12, 100_000).unwrap();
        let err = ((1.0 - r.lambda) - target).abs() / target;
        text.push(format!("bins {bins}: 1 - lambda = {:.5e}, rel err {err:.4}", 1.0 - r.lambda));
        errs.push(err);
    }
    let monotone = errs.windows(2).all(|w| w[1] < w[0]);
    let secs = t0.elapsed().as_secs_f64();
    Outcome {
        pass: errs[2] <= 0.15 && monotone && secs <= 300.0,
        detail: format!(
            "{}; target 0.9375 * 2 eps^2 = {target:.4e}, need rel err <= 0.15 at 256 bins and strictly shrinking ({}); {secs:.1} s",
            text.join("; "),
            if monotone { "shrinking" } else { "not shrinking" }
        ),
    }
}

struct RateRow {
    n: usize,
    rate: f64,
    stderr: f64,
}

fn fitted_rate(d: usize, n: usize, c: &[(i64, i64, i64)], trajectories: u64, seed: u64) -> RateRow {
    let s = Setup::new(d, n, eps_hundredth(), c);
    let report = predict(&s.map, &s.cspec, &s.lattice, &s.h, DEFAULT_K_MAX).unwrap();
    let n_max = cml_core::harness::run::default_n_max(report.rate_pred);
    let curve = survival_curve(
        &s.sys(),
        &SurvivalParams {
            n_traj: trajectories,
            n_max,
            measure_kind: MeasureKind::Lebesgue,
            conditioned: false,
            seed,
        },
    )
    .unwrap();
    let fit = fit_rate(&curve, DEFAULT_BURN_IN).unwrap();
    RateRow {
        n,
        rate: fit.rate,
        stderr: fit.stderr,
    }
}

/// Weighted least squares `rate = a + b N`; returns `(a, se_a)`.
fn intercept(rows: &[RateRow]) -> (f64, f64) {
    let (mut sw, mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for r in rows {
        let w = 1.0 / (r.stderr * r.stderr);
        let x = r.n as f64;
        sw += w;
        sx += w * x;
        sy += w * r.rate;
        sxx += w * x * x;
        sxy += w * x * r.rate;
    }
    let det = sw * sxx - sx * sx;
    let a = (sxx * sy - sx * sxy) / det;
    (a, (sxx / det).sqrt())
}

fn c3_c4() -> (Outcome, Outcome) {
    let t0 = Instant::now();
    let rows: Vec<RateRow> = [2usize, 4, 8, 16]
        .iter()
        .enumerate()
        .map(|(i, &n)| fitted_rate(1, n, &[(1, 2, 3)], 1_000_000, 300 + i as u64))
        .collect();
    let secs = t0.elapsed().as_secs_f64();
    let scale = |r: &RateRow| (r.n as f64) * EPS * EPS;
    let mut ok3 = secs <= 600.0;
    let mut parts = Vec::new();
    for r in &rows {
        let z = (r.rate / scale(r) - 0.9375) / (r.stderr / scale(r));
        ok3 &= z.abs() <= 3.0;
        parts.push(format!("N={}: rate/(N eps^2) = {:.4} +- {:.4} (z = {z:.1})", r.n, r.rate / scale(r), r.stderr / scale(r)));
    }
    let (a, se) = intercept(&rows);
    ok3 &= a.abs() <= 3.0 * se;
    let c3 = Outcome {
        pass: ok3,
        detail: format!(
            "{}; need |z| <= 3 against 15/16; intercept {a:.3e} +- {se:.1e} ({:.1} sigma); {secs:.1} s",
            parts.join("; "),
            a.abs() / se
        ),
    };

    let unit: Vec<(usize, f64, f64)> = rows.iter().map(|r| (r.n, r.rate / r.n as f64, r.stderr / r.n as f64)).collect();
    let target = 0.9375 * EPS * EPS;
    let mut ok4 = true;
    let mut worst_pair = (0.0f64, 0, 0);
    for i in 0..unit.len() {
        for j in i + 1..unit.len() {
            let z = (unit[i].1 - unit[j].1).abs() / (unit[i].2.powi(2) + unit[j].2.powi(2)).sqrt();
            ok4 &= z <= 3.0;
            if z > worst_pair.0 {
                worst_pair = (z, unit[i].0, unit[j].0);
            }
        }
    }
    let rel: Vec<String> = unit
        .iter()
        .map(|&(n, v, _)| {
            let e = (v - target).abs() / target;
            ok4 &= e <= 0.10;
            format!("N={n}: {:.4e} ({:.1}% off)", v, 100.0 * e)
        })
        .collect();
    let c4 = Outcome {
        pass: ok4,
        detail: format!(
            "per-site rates {}; target Xi theta = {target:.4e} within 10%; largest pairwise gap {:.1} joint stderr (N={} vs N={})",
            rel.join(", "),
            worst_pair.0,
            worst_pair.1,
            worst_pair.2
        ),
    };
    (c3, c4)
}

fn c5() -> Outcome {
    let t0 = Instant::now();
    let s = Setup::new(1, 4, eps_hundredth(), &[(1, 9, 10)]);
    let ps = period_structure(&s.map, &s.cspec, DEFAULT_K_MAX).unwrap();
    let nonperiodic = ps.exact && ps.per_direction.iter().all(|p| matches!(p, DirectionPeriod::NonPeriodic));
    let r = fitted_rate(1, 4, &[(1, 9, 10)], 1_000_000, 500);
    let v = r.rate / (4.0 * EPS * EPS);
    Outcome {
        pass: nonperiodic && (0.97..=1.03).contains(&v),
        detail: format!(
            "period structure {} ({}); rate/(4 eps^2) = {v:.4} +- {:.4}, need [0.97, 1.03]; {:.1} s",
            if nonperiodic { "non-periodic" } else { "periodic" },
            if ps.exact { "rational" } else { "float" },
            r.stderr / (4.0 * EPS * EPS),
            t0.elapsed().as_secs_f64()
        ),
    }
}

fn c6() -> Outcome {
    let s = Setup::new(1, 4, eps_hundredth(), &[(1, 2, 3)]);
    let m = measure_h(&s.cspec, &s.lattice, &s.h).unwrap();
    let closed = 4.0 * EPS.powi(2) - 2.0 * EPS.powi(4);
    let exact_ok = m.exact && (m.value - closed).abs() <= 1e-15;
    let built = cml_core::harness::Built {
        map: s.map.clone(),
        cspec: s.cspec.clone(),
        lattice: s.lattice.clone(),
        h: s.h.clone(),
    };
    let (p, se) = membership_frequency(&built, 10_000_000, 600);
    let z = (p - m.value) / se;
    Outcome {
        pass: exact_ok && z.abs() <= 4.0,
        detail: format!(
            "mu0_H = {:.6e}, 4 eps^2 - 2 eps^4 = {closed:.6e}, diff {:.1e} (need <= 1e-15); sampled frequency {p:.6e} +- {se:.1e} (z = {z:.2}, need |z| <= 4)",
            m.value,
            (m.value - closed).abs()
        ),
    }
}

fn c7() -> Outcome {
    let t0 = Instant::now();
    let s = Setup::new(1, 4, Number::ratio(1, 200), &[(1, 2, 3)]);
    let report = predict(&s.map, &s.cspec, &s.lattice, &s.h, DEFAULT_K_MAX).unwrap();
    let scale = report.theta * report.mu0_h;
    let sample = hitting_sample(&s.sys(), 100_000, default_hitting_horizon(scale), scale, 700).unwrap();
    let ks = hitting_law_test(&sample).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    Outcome {
        pass: ks.ks <= 0.02 && secs <= 600.0,
        detail: format!(
            "KS distance {:.4} over {} hitting times rescaled by theta mu0_H = {scale:.4e} (need <= 0.02), {} censored; {secs:.1} s",
            ks.ks,
            ks.n,
            sample.censored_count()
        ),
    }
}

fn c8() -> Outcome {
    theta_check(2, &[(1, 2, 3), (1, 4, 5)], "495/512", 1_000_000, 801, f64::INFINITY)
}

fn c9() -> Outcome {
    let t0 = Instant::now();
    let s = Setup::new(1, 2, eps_hundredth(), &[(1, 2, 3)]);
    let grid = build_grid(&s.map, &s.cspec, &s.lattice, 256).unwrap();
    let op = assemble(&grid, &s.map, &s.cspec, &s.lattice).unwrap();
    let ulam = survival_curve_operator(&op, 50);
    let curve = survival_curve(
        &s.sys(),
        &SurvivalParams {
            n_traj: 1_000_000,
            n_max: 50,
            measure_kind: MeasureKind::Lebesgue,
            conditioned: false,
            seed: 900,
        },
    )
    .unwrap();
    let mut worst = (0.0f64, 0usize);
    for n in 1..=50 {
        let se = curve.fraction_stderr(n).max(1.0 / curve.total as f64);
        let z = (curve.fraction(n) - ulam[n]).abs() / se;
        if z > worst.0 {
            worst = (z, n);
        }
    }
    Outcome {
        pass: worst.0 <= 4.0,
        detail: format!(
            "largest gap {:.2} sigma at n = {} over n <= 50 (need <= 4); survival at 50: operator {:.6}, sampled {:.6}; {:.1} s",
            worst.0,
            worst.1,
            ulam[50],
            curve.fraction(50),
            t0.elapsed().as_secs_f64()
        ),
    }
}

fn csv_bytes(dir: &std::path::Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect()
}

fn c10() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let mut notes = Vec::new();
    let mut pass = true;
    for name in ["d1N2_period2", "d1N4_period2", "d2N2_mixed"] {
        let mut s: Scenario = preset(name).unwrap();
        s.run.trajectories = 50_000;
        s.run.qk_samples = s.run.qk_samples.min(100_000);
        s.run.hitting_samples = s.run.hitting_samples.min(20_000);
        s.run.bins = s.run.bins.map(|b| b.min(64));
        let mut outputs = Vec::new();
        for threads in [1usize, 3] {
            let dir = tmp.path().join(format!("{name}-{threads}"));
            let out = with_threads(Some(threads), || run_scenario(&s)).unwrap().unwrap();
            write_outputs(&out, &dir).unwrap();
            outputs.push(csv_bytes(&dir));
        }
        let same = outputs[0] == outputs[1] && !outputs[0].is_empty();
        pass &= same;
        notes.push(format!("{name}: {} CSVs {}", outputs[0].len(), if same { "identical" } else { "DIFFER" }));
    }
    Outcome {
        pass,
        detail: format!("threads 1 vs 3: {}", notes.join(", ")),
    }
}

fn main() {
    // `cargo test -- --list` and filters expect the libtest protocol
    let args: Vec<String> = std::env::args().collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let t0 = Instant::now();
    let mut results: Vec<(u8, Outcome)> = Vec::new();
    results.push((1, c1()));
    results.push((2, c2()));
    let (o3, o4) = c3_c4();
    results.push((3, o3));
    results.push((4, o4));
    results.push((5, c5()));
    results.push((6, c6()));
    results.push((7, c7()));
    results.push((8, c8()));
    results.push((9, c9()));
    results.push((10, c10()));
    println!();
    for (id, o) in &results {
        println!("criterion {id:>2}: {}  {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    let passed = results.iter().filter(|r| r.1.pass).count();
    println!(
        "\nacceptance: {passed} of {} criteria pass ({:.0} s)",
        results.len(),
        t0.elapsed().as_secs_f64()
    );
}
