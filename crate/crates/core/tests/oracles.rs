//! Cross-checks between independent routes at modest sample sizes.

use cml_core::collision::{measure_h, CollisionSpec};
use cml_core::harness::run::membership_frequency;
use cml_core::harness::{presets::preset, Built};
use cml_core::lattice::LatticeSpec;
use cml_core::monte_carlo::{estimate_qk, fit_rate, survival_curve, MeasureKind, SurvivalParams, DEFAULT_BURN_IN};
use cml_core::number::Number;
use cml_core::rate::{predict, DEFAULT_K_MAX};
use cml_core::site_map::{InvariantDensity, SiteMap};
use cml_core::ulam::{assemble, build_grid, leading_eigen, survival_curve_operator};

fn built(d: usize, n: usize, eps: Number, centers: &[(i64, i64, i64)]) -> Built {
    let map = SiteMap::doubling();
    let c = centers
        .iter()
        .map(|&(a, b, q)| (Number::ratio(a, q), Number::ratio(b, q)))
        .collect();
    Built {
        cspec: CollisionSpec::new(eps, c, &map).unwrap(),
        map,
        lattice: LatticeSpec::new(d, n).unwrap(),
        h: InvariantDensity::uniform(),
    }
}

#[test]
fn four_site_ring_membership_frequency() {
    let eps: f64 = 0.05;
    let b = built(1, 4, Number::ratio(1, 20), &[(1, 2, 3)]);
    let m = measure_h(&b.cspec, &b.lattice, &b.h).unwrap();
    assert!((m.value - (4.0 * eps * eps - 2.0 * eps.powi(4))).abs() < 1e-15);
    let (p, se) = membership_frequency(&b, 1_000_000, 17);
    assert!((p - m.value).abs() <= 4.0 * se, "{p} vs {}", m.value);
}

#[test]
fn torus_membership_against_inclusion_exclusion() {
    let b = built(2, 3, Number::ratio(1, 10), &[(1, 2, 3), (1, 4, 5)]);
    let m = measure_h(&b.cspec, &b.lattice, &b.h).unwrap();
    assert!(m.exact);
    let (p, se) = membership_frequency(&b, 1_000_000, 18);
    assert!((p - m.value).abs() <= 4.0 * se, "{p} vs {}", m.value);
}

/// Sampled finite-`N` extremal index against the same-box return count.
#[test]
fn sampled_returns_match_same_box_theta() {
    for (d, centers) in [(1, vec![(1, 2, 3)]), (2, vec![(1, 2, 3), (1, 4, 5)])] {
        let b = built(d, 2, Number::ratio(1, 200), &centers);
        let report = predict(&b.map, &b.cspec, &b.lattice, &b.h, DEFAULT_K_MAX).unwrap();
        let q = estimate_qk(&b.system(), DEFAULT_K_MAX, 400_000, 19).unwrap();
        let theta_n = q.theta_n(1.0 - report.theta_lattice * report.mu0_h, 2);
        // q_0 and q_1 each carry an O(eps) correction
        assert!(
            (theta_n - report.theta_lattice).abs() <= 4.0 * q.theta_emp_stderr + 0.01,
            "d={d}: {theta_n} vs {}",
            report.theta_lattice
        );
    }
}

/// Three routes to the two-site escape rate: survival fit, Ulam
/// eigenvalue, and the closed-form same-box prediction.
#[test]
fn two_site_rate_three_ways() {
    let b = built(1, 2, Number::ratio(1, 50), &[(1, 2, 3)]);
    let report = predict(&b.map, &b.cspec, &b.lattice, &b.h, DEFAULT_K_MAX).unwrap();
    let curve = survival_curve(
        &b.system(),
        &SurvivalParams {
            n_traj: 200_000,
            n_max: 5000,
            measure_kind: MeasureKind::Lebesgue,
            conditioned: false,
            seed: 20,
        },
    )
    .unwrap();
    let fit = fit_rate(&curve, DEFAULT_BURN_IN).unwrap();
    let grid = build_grid(&b.map, &b.cspec, &b.lattice, 128).unwrap();
    let op = assemble(&grid, &b.map, &b.cspec, &b.lattice).unwrap();
    let r = leading_eigen(&op, 1e-12, 100_000).unwrap();
    let ulam_rate = -r.lambda.ln();
    assert!((fit.rate - ulam_rate).abs() <= 4.0 * fit.stderr, "{} vs {ulam_rate}", fit.rate);
    let same_box = report.theta_lattice * report.mu0_h;
    assert!((ulam_rate - same_box).abs() <= 0.05 * same_box, "{ulam_rate} vs {same_box}");
}

#[test]
fn operator_survival_follows_sampled_survival() {
    let s = preset("d1N3_period2").unwrap();
    let b = s.build().unwrap();
    let grid = build_grid(&b.map, &b.cspec, &b.lattice, 32).unwrap();
    let op = assemble(&grid, &b.map, &b.cspec, &b.lattice).unwrap();
    let ulam = survival_curve_operator(&op, 30);
    let curve = survival_curve(
        &b.system(),
        &SurvivalParams {
            n_traj: 200_000,
            n_max: 30,
            measure_kind: MeasureKind::Lebesgue,
            conditioned: false,
            seed: 21,
        },
    )
    .unwrap();
    for n in 1..=30 {
        let se = curve.fraction_stderr(n);
        assert!((curve.fraction(n) - ulam[n]).abs() <= 4.5 * se, "n = {n}");
    }
}
