//! Closed forms: period structure of the collision centres, the extremal
//! index, and the predicted collision rate.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use num_rational::BigRational;
use num_traits::{One, Signed, Zero};

use crate::collision::{measure_h, xi_eps, CollisionSpec};
use crate::error::{Error, Result};
use crate::lattice::LatticeSpec;
use crate::number::Number;
use crate::site_map::{InvariantDensity, SiteMap};

pub const DEFAULT_K_MAX: usize = 64;

/// Coordinate tolerance for float-mode return detection.
pub const FLOAT_RETURN_TOL: f64 = 1e-9;

/// Classification of one centre pair under `tau x tau`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DirectionPeriod {
    NonPeriodic,
    /// `k` is the smallest integer with the `(k+1)`-th image in the target
    /// set; `return_target` is the axis whose centre pair was hit.
    Periodic { k: usize, return_target: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PeriodStructure {
    pub per_direction: Vec<DirectionPeriod>,
    pub k_max: usize,
    pub exact: bool,
}

impl PeriodStructure {
    pub fn is_all_nonperiodic(&self) -> bool {
        self.per_direction
            .iter()
            .all(|p| *p == DirectionPeriod::NonPeriodic)
    }

    /// `K`, the set of occurring return indices.
    pub fn ks(&self) -> Vec<usize> {
        self.v_k_plus().into_keys().collect()
    }

    /// `V_k^+`: axes grouped by their return index.
    pub fn v_k_plus(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut out: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (axis, p) in self.per_direction.iter().enumerate() {
            if let DirectionPeriod::Periodic { k, .. } = p {
                out.entry(*k).or_default().push(axis);
            }
        }
        out
    }
}

/// Which pair orbits count as a return.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Targets {
    /// Every ordered centre pair `(a_w, a_-w)`.
    Centers,
    /// Only the pair's own box; with `reversed` also `(a_-v, a_v)`.
    SameAxis { reversed: bool },
}

fn exact_centers(cspec: &CollisionSpec) -> Option<Vec<(BigRational, BigRational)>> {
    cspec
        .centers()
        .iter()
        .map(|(p, m)| Some((p.as_exact()?.clone(), m.as_exact()?.clone())))
        .collect()
}

fn target_exact(
    centers: &[(BigRational, BigRational)],
    axis: usize,
    targets: Targets,
    x: &BigRational,
    y: &BigRational,
) -> Option<usize> {
    match targets {
        Targets::Centers => centers.iter().position(|(a, b)| a == x && b == y),
        Targets::SameAxis { reversed } => {
            let (a, b) = &centers[axis];
            ((a == x && b == y) || (reversed && a == y && b == x)).then_some(axis)
        }
    }
}

fn target_float(centers: &[(f64, f64)], axis: usize, targets: Targets, x: f64, y: f64) -> Option<usize> {
    let near = |(a, b): (f64, f64)| (a - x).abs() <= FLOAT_RETURN_TOL && (b - y).abs() <= FLOAT_RETURN_TOL;
    match targets {
        Targets::Centers => centers.iter().position(|&c| near(c)),
        Targets::SameAxis { reversed } => {
            let (a, b) = centers[axis];
            (near((a, b)) || (reversed && near((b, a)))).then_some(axis)
        }
    }
}

fn classify(map: &SiteMap, cspec: &CollisionSpec, k_max: usize, targets: Targets) -> Result<PeriodStructure> {
    if k_max == 0 {
        return Err(Error::config("run.k_max", "must be at least 1"));
    }
    let exact = match exact_centers(cspec) {
        Some(c) if map.is_exact() => Some(c),
        _ => None,
    };
    let mut per_direction = Vec::with_capacity(cspec.d());
    if let Some(centers) = &exact {
        for (axis, (a, b)) in centers.iter().enumerate() {
            per_direction.push(classify_exact(map, centers, axis, (a, b), k_max, targets)?);
        }
    } else {
        let centers: Vec<(f64, f64)> = cspec.centers().iter().map(|(p, m)| (p.to_f64(), m.to_f64())).collect();
        for (axis, &start) in centers.iter().enumerate() {
            per_direction.push(classify_float(map, &centers, axis, start, k_max, targets)?);
        }
    }
    Ok(PeriodStructure {
        per_direction,
        k_max,
        exact: exact.is_some(),
    })
}

fn classify_exact(
    map: &SiteMap,
    centers: &[(BigRational, BigRational)],
    axis: usize,
    start: (&BigRational, &BigRational),
    k_max: usize,
    targets: Targets,
) -> Result<DirectionPeriod> {
    let check = |x: &BigRational| map.derivative_exact(x).map(|_| ());
    let (mut x, mut y) = (start.0.clone(), start.1.clone());
    let mut seen: HashSet<(BigRational, BigRational)> = HashSet::new();
    seen.insert((x.clone(), y.clone()));
    let mut first_hit = None;
    let mut periodic = false;
    for n in 1..=k_max {
        check(&x)?;
        check(&y)?;
        x = map.eval_exact(&x)?;
        y = map.eval_exact(&y)?;
        if first_hit.is_none() {
            if let Some(t) = target_exact(centers, axis, targets, &x, &y) {
                first_hit = Some((n - 1, t));
            }
        }
        if x == *start.0 && y == *start.1 {
            periodic = true;
            break;
        }
        // a repeated state other than the start proves pre-periodicity
        if !seen.insert((x.clone(), y.clone())) {
            break;
        }
    }
    Ok(match (periodic, first_hit) {
        (true, Some((k, return_target))) => DirectionPeriod::Periodic { k, return_target },
        _ => DirectionPeriod::NonPeriodic,
    })
}

fn classify_float(
    map: &SiteMap,
    centers: &[(f64, f64)],
    axis: usize,
    start: (f64, f64),
    k_max: usize,
    targets: Targets,
) -> Result<DirectionPeriod> {
    let (mut x, mut y) = start;
    let mut first_hit = None;
    for n in 1..=k_max {
        for z in [x, y] {
            if map.is_endpoint(z) {
                return Err(Error::BranchBoundary { x: z });
            }
        }
        x = map.eval(x);
        y = map.eval(y);
        if first_hit.is_none() {
            if let Some(t) = target_float(centers, axis, targets, x, y) {
                first_hit = Some((n - 1, t));
            }
        }
        if (x - start.0).abs() <= FLOAT_RETURN_TOL && (y - start.1).abs() <= FLOAT_RETURN_TOL {
            if let Some((k, return_target)) = first_hit {
                return Ok(DirectionPeriod::Periodic { k, return_target });
            }
        }
    }
    Ok(DirectionPeriod::NonPeriodic)
}

/// Period structure of the centre set under `tau x tau`, searching at most
/// `k_max` steps. Rational arithmetic is used when the map and all centres
/// are exact.
pub fn period_structure(map: &SiteMap, cspec: &CollisionSpec, k_max: usize) -> Result<PeriodStructure> {
    classify(map, cspec, k_max, Targets::Centers)
}

/// Period structure where only a genuine return to the same collision box
/// counts. On a ring of two sites the reversed pair is also such a box.
pub fn lattice_period_structure(
    map: &SiteMap,
    cspec: &CollisionSpec,
    lattice: &LatticeSpec,
    k_max: usize,
) -> Result<PeriodStructure> {
    classify(
        map,
        cspec,
        k_max,
        Targets::SameAxis {
            reversed: lattice.n() == 2,
        },
    )
}

/// The extremal index for the given period structure.
pub fn theta(
    map: &SiteMap,
    cspec: &CollisionSpec,
    pstruct: &PeriodStructure,
    h: &InvariantDensity,
) -> Result<f64> {
    if pstruct.is_all_nonperiodic() {
        return Ok(1.0);
    }
    let weight = |axis: usize| {
        let (p, m) = &cspec.centers()[axis];
        h.eval(p.to_f64()) * h.eval(m.to_f64())
    };
    let total: f64 = (0..cspec.d()).map(weight).sum();
    let mut returned = 0.0;
    for (k, axes) in pstruct.v_k_plus() {
        for axis in axes {
            let (p, m) = &cspec.centers()[axis];
            let dp = map.orbit_derivative(p, k + 1)?;
            let dm = map.orbit_derivative(m, k + 1)?;
            returned += weight(axis) / (dp * dm).abs();
        }
    }
    Ok(1.0 - returned / total)
}

/// The extremal index as an exact rational, available when `h` is uniform
/// and the map and centres are exact.
pub fn theta_exact(
    map: &SiteMap,
    cspec: &CollisionSpec,
    pstruct: &PeriodStructure,
    h: &InvariantDensity,
) -> Result<Option<BigRational>> {
    let Some(centers) = exact_centers(cspec) else {
        return Ok(None);
    };
    if !h.is_uniform() || !map.is_exact() {
        return Ok(None);
    }
    let mut returned = BigRational::zero();
    for (k, axes) in pstruct.v_k_plus() {
        for axis in axes {
            let (p, m) = &centers[axis];
            let prod = map.orbit_derivative_exact(p, k + 1)? * map.orbit_derivative_exact(m, k + 1)?;
            returned += prod.abs().recip();
        }
    }
    let d = BigRational::from_integer(cspec.d().into());
    Ok(Some(BigRational::one() - returned / d))
}

/// The one-dimensional form `1 - 1/|(tau^(k+1))'(a_1) (tau^(k+1))'(a_-1)|`.
pub fn theta_1d(map: &SiteMap, cspec: &CollisionSpec, pstruct: &PeriodStructure) -> Result<f64> {
    if cspec.d() != 1 {
        return Err(Error::config("lattice.d", "the one-dimensional form needs d = 1"));
    }
    match pstruct.per_direction[0] {
        DirectionPeriod::NonPeriodic => Ok(1.0),
        DirectionPeriod::Periodic { k, .. } => {
            let (p, m) = &cspec.centers()[0];
            let prod = map.orbit_derivative(p, k + 1)? * map.orbit_derivative(m, k + 1)?;
            Ok(1.0 - 1.0 / prod.abs())
        }
    }
}

/// Extremal index with returns counted only into the originating box.
/// Differs from [`theta`] when `N = 2` (the reversed pair is a collision)
/// or when one centre pair maps onto another direction's pair.
pub fn theta_lattice(
    map: &SiteMap,
    cspec: &CollisionSpec,
    lattice: &LatticeSpec,
    h: &InvariantDensity,
    k_max: usize,
) -> Result<f64> {
    let ps = lattice_period_structure(map, cspec, lattice, k_max)?;
    theta(map, cspec, &ps, h)
}

/// Closed-form predictions plus optional numerical estimates filled in by
/// the harness.
#[derive(Debug, Clone, PartialEq)]
pub struct RateReport {
    pub d: usize,
    pub n: usize,
    pub sites: usize,
    pub eps: f64,
    pub k_max: usize,
    pub period_exact: bool,
    pub xi_eps: f64,
    pub mu0_h: f64,
    pub mu0_h_lower: f64,
    pub mu0_h_upper: f64,
    pub mu0_h_exact: bool,
    pub theta: f64,
    pub theta_exact: Option<String>,
    pub theta_lattice: f64,
    pub lambda_pred: f64,
    pub rate_pred: f64,
    pub rate_per_unit_pred: f64,
    pub rate_mc: Option<f64>,
    pub rate_mc_stderr: Option<f64>,
    pub theta_emp: Option<f64>,
    pub theta_n_eps: Option<f64>,
    pub lambda_ulam: Option<f64>,
    pub ks_stat: Option<f64>,
    pub warnings: Vec<String>,
}

pub const REPORT_CSV_HEADER: [&str; 22] = [
    "L",
    "d",
    "N",
    "eps",
    "k_max",
    "xi_eps",
    "mu0_H",
    "mu0_H_lower",
    "mu0_H_upper",
    "mu0_H_exact",
    "theta",
    "theta_exact",
    "theta_lattice",
    "lambda_pred",
    "rate_pred",
    "rate_per_unit_pred",
    "rate_mc",
    "rate_mc_stderr",
    "theta_emp",
    "theta_n_eps",
    "lambda_ulam",
    "ks_stat",
];

fn opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:e}")).unwrap_or_default()
}

impl RateReport {
    pub fn csv_row(&self) -> Vec<String> {
        vec![
            self.sites.to_string(),
            self.d.to_string(),
            self.n.to_string(),
            format!("{:e}", self.eps),
            self.k_max.to_string(),
            format!("{:e}", self.xi_eps),
            format!("{:e}", self.mu0_h),
            format!("{:e}", self.mu0_h_lower),
            format!("{:e}", self.mu0_h_upper),
            self.mu0_h_exact.to_string(),
            format!("{:e}", self.theta),
            self.theta_exact.clone().unwrap_or_default(),
            format!("{:e}", self.theta_lattice),
            format!("{:e}", self.lambda_pred),
            format!("{:e}", self.rate_pred),
            format!("{:e}", self.rate_per_unit_pred),
            opt(self.rate_mc),
            opt(self.rate_mc_stderr),
            opt(self.theta_emp),
            opt(self.theta_n_eps),
            opt(self.lambda_ulam),
            opt(self.ks_stat),
        ]
    }

    /// `key = value  # source` lines.
    pub fn kv_block(&self) -> String {
        let mut s = String::new();
        let mut line = |k: &str, v: String, src: &str| {
            let _ = writeln!(s, "{k:<20} = {v:<24} # {src}");
        };
        line("L", self.sites.to_string(), "N^d");
        line("d", self.d.to_string(), "config");
        line("N", self.n.to_string(), "config");
        line("eps", format!("{:e}", self.eps), "config");
        line("k_max", self.k_max.to_string(), "config");
        line(
            "period_mode",
            if self.period_exact { "rational" } else { "float" }.into(),
            "period search",
        );
        line("xi_eps", format!("{:e}", self.xi_eps), "closed form");
        let src = if self.mu0_h_exact {
            "inclusion-exclusion"
        } else {
            "bracket midpoint"
        };
        line("mu0_H", format!("{:e}", self.mu0_h), src);
        line("mu0_H_lower", format!("{:e}", self.mu0_h_lower), src);
        line("mu0_H_upper", format!("{:e}", self.mu0_h_upper), src);
        line("theta", format!("{}", self.theta), "closed form");
        if let Some(t) = &self.theta_exact {
            line("theta_exact", t.clone(), "rational closed form");
        }
        line("theta_lattice", format!("{}", self.theta_lattice), "same-box returns");
        line("lambda_pred", format!("{}", self.lambda_pred), "1 - theta mu0_H");
        line("rate_pred", format!("{:e}", self.rate_pred), "theta mu0_H");
        line("rate_per_unit_pred", format!("{:e}", self.rate_per_unit_pred), "theta xi_eps");
        let mut est = |k: &str, v: Option<f64>, src: &str| {
            if let Some(v) = v {
                line(k, format!("{v:e}"), src);
            }
        };
        est("rate_mc", self.rate_mc, "survival fit");
        est("rate_mc_stderr", self.rate_mc_stderr, "survival fit");
        est("theta_emp", self.theta_emp, "1 - sum q_k");
        est("theta_n_eps", self.theta_n_eps, "1 - sum lambda^-k q_k");
        est("lambda_ulam", self.lambda_ulam, "Ulam power iteration");
        est("ks_stat", self.ks_stat, "hitting law");
        for w in &self.warnings {
            let _ = writeln!(s, "# warning: {w}");
        }
        s
    }
}

/// Scale above which the small-hole asymptotics are doubtful.
pub const SMALL_HOLE_LIMIT: f64 = 0.01;

/// Assemble every closed-form quantity for one configuration.
pub fn predict(
    map: &SiteMap,
    cspec: &CollisionSpec,
    lattice: &LatticeSpec,
    h: &InvariantDensity,
    k_max: usize,
) -> Result<RateReport> {
    let pstruct = period_structure(map, cspec, k_max)?;
    let th = theta(map, cspec, &pstruct, h)?;
    let th_exact = theta_exact(map, cspec, &pstruct, h)?.map(|r| Number::Exact(r).to_string());
    let th_lattice = theta_lattice(map, cspec, lattice, h, k_max)?;
    let xi = xi_eps(cspec, h);
    let m = measure_h(cspec, lattice, h)?;
    let mut warnings = Vec::new();
    let scale = (lattice.sites() * lattice.d()) as f64 * cspec.eps().powi(2);
    if scale > SMALL_HOLE_LIMIT {
        warnings.push(format!(
            "L d eps^2 = {scale:.3e} exceeds {SMALL_HOLE_LIMIT}; small-hole asymptotics may be inaccurate"
        ));
    }
    if (th - th_lattice).abs() > 1e-12 {
        warnings.push(format!(
            "returns into neighbouring boxes change the extremal index: theta = {th}, same-box theta = {th_lattice}"
        ));
    }
    Ok(RateReport {
        d: lattice.d(),
        n: lattice.n(),
        sites: lattice.sites(),
        eps: cspec.eps(),
        k_max,
        period_exact: pstruct.exact,
        xi_eps: xi,
        mu0_h: m.value,
        mu0_h_lower: m.lower,
        mu0_h_upper: m.upper,
        mu0_h_exact: m.exact,
        theta: th,
        theta_exact: th_exact,
        theta_lattice: th_lattice,
        lambda_pred: 1.0 - th * m.value,
        rate_pred: th * m.value,
        rate_per_unit_pred: xi * th,
        rate_mc: None,
        rate_mc_stderr: None,
        theta_emp: None,
        theta_n_eps: None,
        lambda_ulam: None,
        ks_stat: None,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::site_map::invariant_density;
    use num_bigint::BigInt;
    use proptest::prelude::*;

    fn rat(n: i64, d: i64) -> BigRational {
        BigRational::new(BigInt::from(n), BigInt::from(d))
    }

    fn cspec(eps: f64, centers: &[(i64, i64, i64)]) -> CollisionSpec {
        CollisionSpec::new(
            Number::Float(eps),
            centers
                .iter()
                .map(|&(a, b, q)| (Number::ratio(a, q), Number::ratio(b, q)))
                .collect(),
            &SiteMap::doubling(),
        )
        .unwrap()
    }

    #[test]
    fn period_examples() {
        let map = SiteMap::doubling();
        let ps = period_structure(&map, &cspec(0.01, &[(1, 2, 3)]), 64).unwrap();
        assert!(ps.exact);
        assert_eq!(
            ps.per_direction,
            vec![DirectionPeriod::Periodic { k: 1, return_target: 0 }]
        );
        let ps = period_structure(&map, &cspec(0.01, &[(1, 9, 10)]), 64).unwrap();
        assert_eq!(ps.per_direction, vec![DirectionPeriod::NonPeriodic]);
        let ps = period_structure(&map, &cspec(0.01, &[(1, 2, 3), (1, 4, 5)]), 64).unwrap();
        assert_eq!(
            ps.per_direction,
            vec![
                DirectionPeriod::Periodic { k: 1, return_target: 0 },
                DirectionPeriod::Periodic { k: 3, return_target: 1 }
            ]
        );
        assert_eq!(ps.ks(), vec![1, 3]);
    }

    #[test]
    fn float_mode_matches_rational_mode() {
        let map = SiteMap::doubling();
        let c = CollisionSpec::new(
            Number::Float(0.01),
            vec![(Number::Float(1.0 / 3.0), Number::Float(2.0 / 3.0))],
            &map,
        )
        .unwrap();
        let ps = period_structure(&map, &c, 64).unwrap();
        assert!(!ps.exact);
        assert_eq!(
            ps.per_direction,
            vec![DirectionPeriod::Periodic { k: 1, return_target: 0 }]
        );
    }

    #[test]
    fn theta_examples() {
        let map = SiteMap::doubling();
        let h = InvariantDensity::uniform();
        let c = cspec(0.01, &[(1, 2, 3)]);
        let ps = period_structure(&map, &c, 64).unwrap();
        assert_eq!(theta_exact(&map, &c, &ps, &h).unwrap(), Some(rat(15, 16)));
        assert_eq!(theta(&map, &c, &ps, &h).unwrap(), 0.9375);

        let c = cspec(0.01, &[(1, 9, 10)]);
        let ps = period_structure(&map, &c, 64).unwrap();
        assert_eq!(theta(&map, &c, &ps, &h).unwrap(), 1.0);

        let c = cspec(0.01, &[(1, 2, 3), (1, 4, 5)]);
        let ps = period_structure(&map, &c, 64).unwrap();
        assert_eq!(theta_exact(&map, &c, &ps, &h).unwrap(), Some(rat(495, 512)));
        assert!((theta(&map, &c, &ps, &h).unwrap() - 495.0 / 512.0).abs() < 1e-15);
    }

    #[test]
    fn same_box_theta_on_two_site_rings() {
        let map = SiteMap::doubling();
        let h = InvariantDensity::uniform();
        let c = cspec(0.01, &[(1, 2, 3)]);
        let two = LatticeSpec::new(1, 2).unwrap();
        let four = LatticeSpec::new(1, 4).unwrap();
        assert_eq!(theta_lattice(&map, &c, &two, &h, 64).unwrap(), 0.75);
        assert_eq!(theta_lattice(&map, &c, &four, &h, 64).unwrap(), 0.9375);
        let c2 = cspec(0.01, &[(1, 2, 3), (1, 4, 5)]);
        let square = LatticeSpec::new(2, 2).unwrap();
        assert!((theta_lattice(&map, &c2, &square, &h, 64).unwrap() - 27.0 / 32.0).abs() < 1e-15);
    }

    #[test]
    fn one_dimensional_forms_agree() {
        let h = InvariantDensity::uniform();
        let map = SiteMap::doubling();
        for centers in [(1, 2, 3), (1, 9, 10), (1, 4, 5), (2, 5, 7)] {
            let c = cspec(0.001, &[centers]);
            let ps = period_structure(&map, &c, 64).unwrap();
            let general = theta(&map, &c, &ps, &h).unwrap();
            assert!((general - theta_1d(&map, &c, &ps).unwrap()).abs() < 1e-12);
        }
        // non-uniform density: the h factors cancel
        let smooth = SiteMap::perturbed_doubling(0.05).unwrap();
        let hs = invariant_density(&smooth, 256).unwrap();
        let x = smooth.periodic_point(2, 0.3).unwrap();
        let y = smooth.eval(x);
        let c = CollisionSpec::new(Number::Float(0.01), vec![(Number::Float(x), Number::Float(y))], &smooth)
            .unwrap();
        let ps = period_structure(&smooth, &c, 64).unwrap();
        assert_eq!(
            ps.per_direction,
            vec![DirectionPeriod::Periodic { k: 1, return_target: 0 }]
        );
        let general = theta(&smooth, &c, &ps, &hs).unwrap();
        assert!((general - theta_1d(&smooth, &c, &ps).unwrap()).abs() < 1e-12);
        assert!((general - 0.9375).abs() > 1e-3);
    }

    #[test]
    fn theta_invariant_under_density_rescaling() {
        let smooth = SiteMap::perturbed_doubling(0.05).unwrap();
        let h = invariant_density(&smooth, 256).unwrap();
        let x = smooth.periodic_point(2, 0.3).unwrap();
        let y = smooth.eval(x);
        let u = smooth.periodic_point(4, 0.2).unwrap();
        let mut orbit = vec![u];
        for _ in 0..3 {
            orbit.push(smooth.eval(*orbit.last().unwrap()));
        }
        let c = CollisionSpec::new(
            Number::Float(0.005),
            vec![
                (Number::Float(x), Number::Float(y)),
                (Number::Float(orbit[0]), Number::Float(orbit[2])),
            ],
            &smooth,
        )
        .unwrap();
        let lattice = LatticeSpec::new(2, 2).unwrap();
        let base = predict(&smooth, &c, &lattice, &h, 64).unwrap();
        for factor in [0.5, 3.0, 17.0] {
            let scaled = predict(&smooth, &c, &lattice, &h.rescaled(factor).unwrap(), 64).unwrap();
            assert!((scaled.theta - base.theta).abs() < 1e-12);
            assert!((scaled.mu0_h - base.mu0_h).abs() < 1e-15);
            assert!((scaled.xi_eps - base.xi_eps).abs() < 1e-15);
        }
    }

    #[test]
    fn predict_examples() {
        let map = SiteMap::doubling();
        let h = InvariantDensity::uniform();
        let c = cspec(0.02, &[(1, 2, 3)]);
        let r = predict(&map, &c, &LatticeSpec::new(1, 2).unwrap(), &h, 64).unwrap();
        assert!((r.mu0_h - 8e-4).abs() < 1e-18);
        assert!((r.rate_pred - 7.5e-4).abs() < 1e-18);
        assert_eq!(r.theta_exact.as_deref(), Some("15/16"));
        assert!(r.kv_block().contains("theta_exact"));
        assert_eq!(r.csv_row().len(), REPORT_CSV_HEADER.len());

        let c = cspec(0.01, &[(1, 2, 3)]);
        let three = predict(&map, &c, &LatticeSpec::new(1, 3).unwrap(), &h, 64).unwrap();
        let six = predict(&map, &c, &LatticeSpec::new(1, 6).unwrap(), &h, 64).unwrap();
        assert_eq!(three.rate_per_unit_pred, six.rate_per_unit_pred);

        let big = predict(&map, &cspec(0.2, &[(1, 2, 3)]), &LatticeSpec::new(1, 4).unwrap(), &h, 64).unwrap();
        assert!(big.warnings.iter().any(|w| w.contains("L d eps^2")));
    }

    #[test]
    fn rate_converges_to_theta_as_eps_shrinks() {
        let map = SiteMap::doubling();
        let h = InvariantDensity::uniform();
        let lattice = LatticeSpec::new(1, 4).unwrap();
        for eps in [1e-2, 1e-3, 1e-4] {
            let r = predict(&map, &cspec(eps, &[(1, 2, 3)]), &lattice, &h, 64).unwrap();
            let ratio = r.rate_pred / (4.0 * eps * eps);
            assert!((ratio - 0.9375).abs() <= 0.9375 * eps * eps);
        }
    }

    proptest! {
        #[test]
        fn report_identities(eps in 1e-4f64..0.05, n in 2usize..7, which in 0usize..3) {
            let map = SiteMap::doubling();
            let h = InvariantDensity::uniform();
            let centers = [(1, 2, 3), (1, 9, 10), (1, 4, 5)][which];
            let lattice = LatticeSpec::new(1, n).unwrap();
            let r = predict(&map, &cspec(eps, &[centers]), &lattice, &h, 64).unwrap();
            prop_assert!(r.theta > 0.0 && r.theta <= 1.0);
            prop_assert!((r.rate_pred - r.theta * r.mu0_h).abs() <= 1e-15);
            prop_assert!((r.rate_per_unit_pred - r.xi_eps * r.theta).abs() <= 1e-15);
            let l = r.sites as f64;
            let lhs = r.rate_per_unit_pred * l;
            let rhs = r.rate_pred / (r.mu0_h / (l * r.xi_eps));
            prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs);
        }
    }
}
