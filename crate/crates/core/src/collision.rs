//! Collision zones, the swap coupling, lattice stepping, and exact measures
//! of the collision set by inclusion-exclusion.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::lattice::{CollisionPair, Direction, LatticeSpec};
use crate::number::Number;
use crate::site_map::{InvariantDensity, SiteMap};

/// Marker for "coordinate lies in no zone".
pub const NO_ZONE: u8 = u8::MAX;

/// Enumeration cap for exact inclusion-exclusion.
pub const MAX_FAMILIES: u64 = 100_000_000;

/// Zone width and centres `(a_v, a_{-v})` for each positive direction.
///
/// Zones are the open intervals `(a - eps/2, a + eps/2)`. With `eps = 0`
/// every zone is empty and the coupled system is the uncoupled one.
#[derive(Debug, Clone)]
pub struct CollisionSpec {
    eps: Number,
    eps_f64: f64,
    centers: Vec<(Number, Number)>,
    /// `(lo, hi)` per zone, indexed by [`Direction::zone_index`].
    zones: Vec<(f64, f64)>,
}

impl CollisionSpec {
    /// Builds and validates a collision spec against the site map.
    pub fn new(eps: Number, centers: Vec<(Number, Number)>, map: &SiteMap) -> Result<Self> {
        let w = eps.to_f64();
        if !(w >= 0.0) || !w.is_finite() {
            return Err(Error::config("collision.eps", format!("must be >= 0, got {eps}")));
        }
        if centers.is_empty() {
            return Err(Error::config("collision.centers", "no directions given"));
        }
        let mut zones = Vec::with_capacity(2 * centers.len());
        for (plus, minus) in &centers {
            for c in [plus.to_f64(), minus.to_f64()] {
                zones.push((c - w / 2.0, c + w / 2.0));
            }
        }
        let spec = CollisionSpec {
            eps,
            eps_f64: w,
            centers,
            zones,
        };
        spec.validate(map)?;
        Ok(spec)
    }

    fn zone_name(&self, z: usize) -> String {
        let dir = if z % 2 == 0 {
            Direction::plus(z / 2)
        } else {
            Direction::minus(z / 2)
        };
        let (lo, hi) = self.zones[z];
        format!("A[{dir}] = ({lo}, {hi})")
    }

    fn validate(&self, map: &SiteMap) -> Result<()> {
        let field = "collision.centers";
        for (z, &(lo, hi)) in self.zones.iter().enumerate() {
            let c = 0.5 * (lo + hi);
            if !(c > 0.0 && c < 1.0) {
                return Err(Error::config(field, format!("centre of {} outside (0, 1)", self.zone_name(z))));
            }
            if lo < 0.0 || hi > 1.0 {
                return Err(Error::config(field, format!("{} leaves the unit interval", self.zone_name(z))));
            }
            if map.is_endpoint(c) {
                return Err(Error::config(
                    field,
                    format!("centre of {} is a branch endpoint of the site map", self.zone_name(z)),
                ));
            }
            if self.eps_f64 > 0.0 && (map.is_endpoint(lo) || map.is_endpoint(hi)) {
                return Err(Error::config(
                    field,
                    format!("{} has an endpoint on a branch endpoint", self.zone_name(z)),
                ));
            }
        }
        for i in 0..self.zones.len() {
            for j in i + 1..self.zones.len() {
                let (a, b) = (self.zones[i], self.zones[j]);
                let ci = 0.5 * (a.0 + a.1);
                let cj = 0.5 * (b.0 + b.1);
                let overlap = a.0 < b.1 && b.0 < a.1;
                if ci == cj || (self.eps_f64 > 0.0 && overlap) {
                    return Err(Error::config(
                        field,
                        format!("zones {} and {} overlap", self.zone_name(i), self.zone_name(j)),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Same centres, different width (revalidated).
    pub fn with_eps(&self, eps: Number, map: &SiteMap) -> Result<Self> {
        CollisionSpec::new(eps, self.centers.clone(), map)
    }

    pub fn eps(&self) -> f64 {
        self.eps_f64
    }

    pub fn eps_number(&self) -> &Number {
        &self.eps
    }

    /// Number of positive directions the spec describes.
    pub fn d(&self) -> usize {
        self.centers.len()
    }

    pub fn centers(&self) -> &[(Number, Number)] {
        &self.centers
    }

    pub fn center(&self, v: Direction) -> &Number {
        let (plus, minus) = &self.centers[v.axis];
        if v.positive {
            plus
        } else {
            minus
        }
    }

    pub fn zone(&self, v: Direction) -> (f64, f64) {
        self.zones[v.zone_index()]
    }

    pub fn zones(&self) -> &[(f64, f64)] {
        &self.zones
    }

    pub fn is_empty(&self) -> bool {
        self.eps_f64 == 0.0
    }

    /// Zone index containing `x`, if any.
    #[inline]
    pub fn zone_of(&self, x: f64) -> Option<usize> {
        self.zones.iter().position(|&(lo, hi)| x > lo && x < hi)
    }

    /// `int_{A_w} h` for every zone, indexed like [`Self::zones`].
    pub fn zone_masses(&self, h: &InvariantDensity) -> Vec<f64> {
        self.zones
            .iter()
            .map(|&(lo, hi)| {
                if self.is_empty() {
                    0.0
                } else if h.is_uniform() {
                    self.eps_f64
                } else {
                    h.integral(lo, hi)
                }
            })
            .collect()
    }

    pub(crate) fn check_lattice(&self, lattice: &LatticeSpec) -> Result<()> {
        if self.d() != lattice.d() {
            return Err(Error::config(
                "collision.centers",
                format!("{} centre pairs given for a d = {} lattice", self.d(), lattice.d()),
            ));
        }
        Ok(())
    }
}

/// A point of `[0, 1]^L`, one coordinate per site.
#[derive(Debug, Clone, PartialEq)]
pub struct LatticeState {
    pub coords: Vec<f64>,
}

impl LatticeState {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if let Some(x) = coords.iter().find(|x| !(0.0..=1.0).contains(*x)) {
            return Err(Error::config("state", format!("coordinate {x} outside [0, 1]")));
        }
        Ok(LatticeState { coords })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

/// Precomputed tables for the hot collision test.
#[derive(Debug, Clone)]
pub struct CollisionIndex {
    zones: Vec<(f64, f64)>,
    plus: Vec<usize>,
    d: usize,
    sites: usize,
    empty: bool,
}

impl CollisionIndex {
    pub fn new(cspec: &CollisionSpec, lattice: &LatticeSpec) -> Self {
        CollisionIndex {
            zones: cspec.zones.clone(),
            plus: lattice.plus_table().to_vec(),
            d: lattice.d(),
            sites: lattice.sites(),
            empty: cspec.is_empty(),
        }
    }

    pub fn sites(&self) -> usize {
        self.sites
    }

    pub fn d(&self) -> usize {
        self.d
    }

    /// Index of `p + e_axis`.
    #[inline]
    pub fn plus_neighbor(&self, p: usize, axis: usize) -> usize {
        self.plus[p * self.d + axis]
    }

    #[inline]
    pub fn code(&self, x: f64) -> u8 {
        for (z, &(lo, hi)) in self.zones.iter().enumerate() {
            if x > lo && x < hi {
                return z as u8;
            }
        }
        NO_ZONE
    }

    /// Collision test on precomputed zone codes.
    #[inline]
    pub fn hits_codes(&self, codes: &[u8]) -> bool {
        for p in 0..self.sites {
            let c = codes[p];
            if c == NO_ZONE || c % 2 == 1 {
                continue;
            }
            let axis = (c / 2) as usize;
            if codes[self.plus[p * self.d + axis]] == c + 1 {
                return true;
            }
        }
        false
    }

    /// Whether the state lies in the collision set; `codes` is scratch space
    /// of length `L`.
    #[inline]
    pub fn hits(&self, coords: &[f64], codes: &mut [u8]) -> bool {
        if self.empty {
            return false;
        }
        let mut any = false;
        for (c, &x) in codes.iter_mut().zip(coords) {
            *c = self.code(x);
            any |= *c != NO_ZONE;
        }
        any && self.hits_codes(codes)
    }

    /// Number of collision boxes containing the state.
    pub fn multiplicity(&self, coords: &[f64], codes: &mut [u8]) -> usize {
        if self.empty {
            return 0;
        }
        for (c, &x) in codes.iter_mut().zip(coords) {
            *c = self.code(x);
        }
        (0..self.sites)
            .filter(|&p| {
                let c = codes[p];
                c != NO_ZONE && c % 2 == 0 && codes[self.plus[p * self.d + (c / 2) as usize]] == c + 1
            })
            .count()
    }
}

/// All pairs `(p, v)` with `x_p` in `A_v` and `x_{p+v}` in `A_{-v}`.
pub fn collision_pairs_of(
    state: &LatticeState,
    cspec: &CollisionSpec,
    lattice: &LatticeSpec,
) -> Vec<CollisionPair> {
    if cspec.is_empty() {
        return Vec::new();
    }
    let codes: Vec<Option<usize>> = state.coords.iter().map(|&x| cspec.zone_of(x)).collect();
    let mut out = Vec::new();
    for p in 0..lattice.sites() {
        let Some(z) = codes[p] else { continue };
        if z % 2 == 1 {
            continue;
        }
        let axis = z / 2;
        let q = lattice.neighbor(p, Direction::plus(axis));
        if codes[q] == Some(z + 1) {
            out.push(CollisionPair { site: p, axis });
        }
    }
    out
}

/// Membership in the collision set by scanning every box directly.
pub fn in_collision_set(state: &LatticeState, cspec: &CollisionSpec, lattice: &LatticeSpec) -> bool {
    let inside = |x: f64, (lo, hi): (f64, f64)| lo < x && x < hi;
    lattice.enumerate_collision_pairs().iter().any(|pair| {
        let q = lattice.neighbor(pair.site, Direction::plus(pair.axis));
        inside(state.coords[pair.site], cspec.zone(Direction::plus(pair.axis)))
            && inside(state.coords[q], cspec.zone(Direction::minus(pair.axis)))
    })
}

/// The coupling: each site in a collision takes its partner's value.
pub fn apply_phi(state: &LatticeState, cspec: &CollisionSpec, lattice: &LatticeSpec) -> LatticeState {
    let mut out = state.coords.clone();
    if cspec.is_empty() {
        return LatticeState { coords: out };
    }
    let dirs = lattice.directions_all();
    for (p, slot) in out.iter_mut().enumerate() {
        let x = state.coords[p];
        for &v in &dirs {
            let (lo, hi) = cspec.zone(v);
            if !(x > lo && x < hi) {
                continue;
            }
            let q = lattice.neighbor(p, v);
            let (lo2, hi2) = cspec.zone(v.opposite());
            let y = state.coords[q];
            if y > lo2 && y < hi2 {
                *slot = y;
                break;
            }
        }
    }
    LatticeState { coords: out }
}

/// Uncoupled step: `tau` on every coordinate.
pub fn step_t0(state: &LatticeState, map: &SiteMap) -> LatticeState {
    LatticeState {
        coords: state.coords.iter().map(|&x| map.eval(x)).collect(),
    }
}

/// Coupled step: the swap coupling applied after the uncoupled step.
pub fn step_teps(
    state: &LatticeState,
    map: &SiteMap,
    cspec: &CollisionSpec,
    lattice: &LatticeSpec,
) -> LatticeState {
    apply_phi(&step_t0(state, map), cspec, lattice)
}

/// Invariant measure of an intersection of collision boxes.
pub fn measure_box_intersection(
    pairs: &[CollisionPair],
    cspec: &CollisionSpec,
    lattice: &LatticeSpec,
    h: &InvariantDensity,
) -> f64 {
    let masses = cspec.zone_masses(h);
    let mut constraint = vec![NO_ZONE; lattice.sites()];
    let mut measure = 1.0;
    for pair in pairs {
        let q = lattice.neighbor(pair.site, Direction::plus(pair.axis));
        for (site, dir) in [(pair.site, Direction::plus(pair.axis)), (q, Direction::minus(pair.axis))] {
            let z = dir.zone_index() as u8;
            match constraint[site] {
                NO_ZONE => {
                    constraint[site] = z;
                    measure *= masses[z as usize];
                }
                c if c == z => {}
                _ => return 0.0,
            }
        }
    }
    measure
}

/// Measure of the collision set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HMeasure {
    /// Exact value, or the bracket midpoint in bound mode.
    pub value: f64,
    pub lower: f64,
    pub upper: f64,
    pub exact: bool,
    /// Non-empty intersection families visited (exact mode).
    pub families: u64,
}

/// `L * d` above which only the bracketing bounds are computed.
pub const EXACT_PAIR_LIMIT: usize = 64;

/// `mu_0(H_eps)` by inclusion-exclusion over compatible pair families, or
/// the bracket `[L Xi (1 - S), L Xi]` when `L d` exceeds the exact limit.
pub fn measure_h(cspec: &CollisionSpec, lattice: &LatticeSpec, h: &InvariantDensity) -> Result<HMeasure> {
    cspec.check_lattice(lattice)?;
    let (lower, upper) = measure_h_bounds(cspec, lattice, h);
    if lattice.sites() * lattice.d() > EXACT_PAIR_LIMIT {
        return Ok(HMeasure {
            value: 0.5 * (lower + upper),
            lower,
            upper,
            exact: false,
            families: 0,
        });
    }
    let (value, families) = inclusion_exclusion(cspec, lattice, h, MAX_FAMILIES)?;
    Ok(HMeasure {
        value,
        lower: value,
        upper: value,
        exact: true,
        families,
    })
}

/// The bracket `[L Xi (1 - C L d eps^2), L Xi]` with `C = d * sup(h)^2`.
/// The upper end is the union bound; the lower end dominates the
/// second-order Bonferroni bound.
pub fn measure_h_bounds(cspec: &CollisionSpec, lattice: &LatticeSpec, h: &InvariantDensity) -> (f64, f64) {
    let (l, d) = (lattice.sites() as f64, lattice.d() as f64);
    let upper = l * xi_eps(cspec, h);
    let c = d * h.upper_bound().powi(2);
    let lower = upper * (1.0 - c * l * d * cspec.eps().powi(2)).max(0.0);
    (lower, upper)
}

struct Enumerator<'a> {
    pairs: Vec<(usize, u8, usize, u8)>,
    masses: &'a [f64],
    constraint: Vec<u8>,
    by_order: Vec<f64>,
    families: u64,
    limit: u64,
}

impl Enumerator<'_> {
    fn descend(&mut self, start: usize, depth: usize, prod: f64) -> Result<()> {
        for i in start..self.pairs.len() {
            let (p, zp, q, zq) = self.pairs[i];
            let (cp, cq) = (self.constraint[p], self.constraint[q]);
            if (cp != NO_ZONE && cp != zp) || (cq != NO_ZONE && cq != zq) {
                continue;
            }
            let mut next = prod;
            if cp == NO_ZONE {
                next *= self.masses[zp as usize];
            }
            if cq == NO_ZONE {
                next *= self.masses[zq as usize];
            }
            self.families += 1;
            if self.families > self.limit {
                return Err(Error::Overflow { limit: self.limit });
            }
            if self.by_order.len() <= depth {
                self.by_order.push(0.0);
            }
            self.by_order[depth] += next;
            self.constraint[p] = zp;
            self.constraint[q] = zq;
            self.descend(i + 1, depth + 1, next)?;
            self.constraint[p] = cp;
            self.constraint[q] = cq;
        }
        Ok(())
    }
}

/// Branch-and-prune inclusion-exclusion. A family is pruned as soon as a
/// site would be asked to lie in two different zones. Returns the measure
/// and the number of non-empty families.
pub fn inclusion_exclusion(
    cspec: &CollisionSpec,
    lattice: &LatticeSpec,
    h: &InvariantDensity,
    limit: u64,
) -> Result<(f64, u64)> {
    let masses = cspec.zone_masses(h);
    let pairs: Vec<(usize, u8, usize, u8)> = lattice
        .enumerate_collision_pairs()
        .iter()
        .map(|pair| {
            let q = lattice.neighbor(pair.site, Direction::plus(pair.axis));
            (
                pair.site,
                Direction::plus(pair.axis).zone_index() as u8,
                q,
                Direction::minus(pair.axis).zone_index() as u8,
            )
        })
        .collect();
    // parallel over the first pair; partial sums combined in index order
    let partial: Vec<Result<(Vec<f64>, u64)>> = (0..pairs.len())
        .into_par_iter()
        .map(|first| {
            let (p, zp, q, zq) = pairs[first];
            let mut e = Enumerator {
                pairs: pairs.clone(),
                masses: &masses,
                constraint: vec![NO_ZONE; lattice.sites()],
                by_order: vec![masses[zp as usize] * masses[zq as usize]],
                families: 1,
                limit,
            };
            e.constraint[p] = zp;
            e.constraint[q] = zq;
            e.descend(first + 1, 1, e.by_order[0])?;
            Ok((e.by_order, e.families))
        })
        .collect();
    let mut by_order: Vec<f64> = Vec::new();
    let mut families = 0u64;
    for part in partial {
        let (orders, count) = part?;
        families += count;
        if families > limit {
            return Err(Error::Overflow { limit });
        }
        if by_order.len() < orders.len() {
            by_order.resize(orders.len(), 0.0);
        }
        for (acc, v) in by_order.iter_mut().zip(orders) {
            *acc += v;
        }
    }
    // smallest terms first
    let value = by_order
        .iter()
        .enumerate()
        .rev()
        .fold(0.0, |acc, (k, v)| if k % 2 == 0 { acc + v } else { acc - v });
    Ok((value, families))
}

/// `Xi_eps = sum_v int_{A_v} h * int_{A_-v} h`.
pub fn xi_eps(cspec: &CollisionSpec, h: &InvariantDensity) -> f64 {
    if cspec.is_empty() {
        return 0.0;
    }
    if h.is_uniform() {
        return cspec.d() as f64 * cspec.eps() * cspec.eps();
    }
    let m = cspec.zone_masses(h);
    m.chunks(2).map(|c| c[0] * c[1]).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn third_centers() -> Vec<(Number, Number)> {
        vec![(Number::ratio(1, 3), Number::ratio(2, 3))]
    }

    fn spec(eps: f64) -> CollisionSpec {
        CollisionSpec::new(Number::Float(eps), third_centers(), &SiteMap::doubling()).unwrap()
    }

    fn state(xs: &[f64]) -> LatticeState {
        LatticeState::new(xs.to_vec()).unwrap()
    }

    const A1: f64 = 1.0 / 3.0;
    const AM1: f64 = 2.0 / 3.0;

    #[test]
    fn collision_pair_examples() {
        let c = spec(0.01);
        let two = LatticeSpec::new(1, 2).unwrap();
        let four = LatticeSpec::new(1, 4).unwrap();
        assert_eq!(
            collision_pairs_of(&state(&[A1, AM1]), &c, &two),
            vec![CollisionPair { site: 0, axis: 0 }]
        );
        assert!(collision_pairs_of(&state(&[0.1, 0.9]), &c, &two).is_empty());
        let pairs = collision_pairs_of(&state(&[A1, AM1, A1, AM1]), &c, &four);
        assert_eq!(
            pairs,
            vec![CollisionPair { site: 0, axis: 0 }, CollisionPair { site: 2, axis: 0 }]
        );
    }

    #[test]
    fn phi_examples() {
        let c = spec(0.01);
        let two = LatticeSpec::new(1, 2).unwrap();
        let four = LatticeSpec::new(1, 4).unwrap();
        let quiet = state(&[0.1, 0.9]);
        assert_eq!(apply_phi(&quiet, &c, &two), quiet);
        assert_eq!(apply_phi(&state(&[A1, AM1]), &c, &two), state(&[AM1, A1]));
        assert_eq!(
            apply_phi(&state(&[A1, AM1, A1, AM1]), &c, &four),
            state(&[AM1, A1, AM1, A1])
        );
    }

    #[test]
    fn step_examples() {
        let map = SiteMap::doubling();
        let c = spec(0.01);
        let two = LatticeSpec::new(1, 2).unwrap();
        assert_eq!(step_t0(&state(&[0.3, 0.1]), &map), state(&[0.6, 0.2]));
        let start = state(&[1.0 / 6.0, 5.0 / 6.0]);
        let mid = step_t0(&start, &map);
        assert!(in_collision_set(&mid, &c, &two));
        let out = step_teps(&start, &map, &c, &two);
        assert!((out.coords[0] - AM1).abs() < 1e-15 && (out.coords[1] - A1).abs() < 1e-15);

        let zero = spec(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let s = state(&[rng.gen(), rng.gen()]);
            assert_eq!(step_teps(&s, &map, &zero, &two), step_t0(&s, &map));
        }
    }

    #[test]
    fn box_intersection_examples() {
        let eps = 0.01;
        let c = spec(eps);
        let h = InvariantDensity::uniform();
        let four = LatticeSpec::new(1, 4).unwrap();
        let p = |site| CollisionPair { site, axis: 0 };
        assert!((measure_box_intersection(&[p(0)], &c, &four, &h) - eps * eps).abs() < 1e-18);
        assert_eq!(measure_box_intersection(&[p(0), p(1)], &c, &four, &h), 0.0);
        assert!((measure_box_intersection(&[p(0), p(2)], &c, &four, &h) - eps.powi(4)).abs() < 1e-20);
    }

    #[test]
    fn measure_h_small_lattices() {
        let eps = 0.01;
        let c = spec(eps);
        let h = InvariantDensity::uniform();
        let m = |n| measure_h(&c, &LatticeSpec::new(1, n).unwrap(), &h).unwrap();
        assert!((m(2).value - 2.0 * eps * eps).abs() < 1e-18);
        assert!((m(3).value - 3.0 * eps * eps).abs() < 1e-18);
        let four = m(4);
        assert!(four.exact);
        assert!((four.value - (4.0 * eps * eps - 2.0 * eps.powi(4))).abs() < 1e-15);
        // four singletons plus the two compatible pairs {0, 2} and {1, 3}
        assert_eq!(four.families, 6);
    }

    #[test]
    fn measure_h_bound_mode_for_large_lattices() {
        let c = spec(0.01);
        let h = InvariantDensity::uniform();
        let big = LatticeSpec::new(1, 100).unwrap();
        let m = measure_h(&c, &big, &h).unwrap();
        assert!(!m.exact);
        assert!(m.lower < m.upper);
        assert!((m.upper - 100.0 * 1e-4).abs() < 1e-15);
    }

    #[test]
    fn enumeration_cap_overflows() {
        let c = spec(0.01);
        let h = InvariantDensity::uniform();
        let lat = LatticeSpec::new(1, 30).unwrap();
        assert!(matches!(
            inclusion_exclusion(&c, &lat, &h, 1000),
            Err(Error::Overflow { .. })
        ));
    }

    #[test]
    fn xi_examples() {
        let h = InvariantDensity::uniform();
        assert!((xi_eps(&spec(0.01), &h) - 1e-4).abs() < 1e-18);
        let two_d = CollisionSpec::new(
            Number::Float(0.01),
            vec![
                (Number::ratio(1, 3), Number::ratio(2, 3)),
                (Number::ratio(1, 5), Number::ratio(4, 5)),
            ],
            &SiteMap::doubling(),
        )
        .unwrap();
        assert!((xi_eps(&two_d, &h) - 2e-4).abs() < 1e-18);
    }

    #[test]
    fn validation_names_overlapping_zones() {
        let err = CollisionSpec::new(
            Number::Float(0.15),
            vec![(Number::ratio(3, 10), Number::ratio(2, 5))],
            &SiteMap::doubling(),
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("A[+e0]") && msg.contains("A[-e0]"), "{msg}");
        // centre on the branch endpoint 1/2
        assert!(CollisionSpec::new(
            Number::Float(0.01),
            vec![(Number::ratio(1, 2), Number::ratio(2, 3))],
            &SiteMap::doubling()
        )
        .is_err());
        assert!(CollisionSpec::new(
            Number::Float(0.01),
            vec![(Number::ratio(1, 3), Number::ratio(1, 3))],
            &SiteMap::doubling()
        )
        .is_err());
    }
}
