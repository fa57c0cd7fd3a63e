//! Single-site dynamics: full-branch, uniformly expanding interval maps.
//!
//! Two families are supported. Affine maps are given by their branch
//! endpoints and per-branch orientation; every branch is stretched onto the
//! whole unit interval, so Lebesgue measure is invariant. The perturbed
//! doubling map `x -> 2x + a sin(2 pi x) mod 1` has branches `[0, 1/2)` and
//! `[1/2, 1]` and a non-uniform invariant density.

use std::f64::consts::PI;

use num_rational::BigRational;
use num_traits::{One, Signed};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::number::{rational_to_f64, Number};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Orientation {
    #[serde(rename = "+")]
    Increasing,
    #[serde(rename = "-")]
    Decreasing,
}

#[derive(Debug, Clone, PartialEq)]
pub enum MapFamily {
    Affine {
        endpoints: Vec<Number>,
        orientations: Vec<Orientation>,
    },
    PerturbedDoubling {
        amplitude: f64,
    },
}

/// The local map applied at every lattice site.
#[derive(Debug, Clone)]
pub struct SiteMap {
    family: MapFamily,
    ends: Vec<f64>,
    exact_ends: Option<Vec<BigRational>>,
    orientations: Vec<Orientation>,
    /// |slope| per branch for affine maps.
    slopes: Vec<f64>,
    min_expansion: f64,
}

impl SiteMap {
    pub fn affine(endpoints: Vec<Number>, orientations: Vec<Orientation>) -> Result<Self> {
        if endpoints.len() < 3 {
            return Err(Error::config(
                "map.endpoints",
                "need at least two branches (three endpoints)",
            ));
        }
        if orientations.len() + 1 != endpoints.len() {
            return Err(Error::config(
                "map.orientations",
                format!(
                    "{} orientations given for {} branches",
                    orientations.len(),
                    endpoints.len() - 1
                ),
            ));
        }
        let ends: Vec<f64> = endpoints.iter().map(Number::to_f64).collect();
        if ends[0] != 0.0 || *ends.last().unwrap() != 1.0 {
            return Err(Error::config("map.endpoints", "must start at 0 and end at 1"));
        }
        if ends.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("map.endpoints", "must be strictly increasing"));
        }
        let slopes: Vec<f64> = ends.windows(2).map(|w| 1.0 / (w[1] - w[0])).collect();
        let min_expansion = slopes.iter().cloned().fold(f64::INFINITY, f64::min);
        if min_expansion <= 1.0 {
            return Err(Error::config(
                "map.endpoints",
                "every branch must be shorter than the unit interval (expansion > 1)",
            ));
        }
        let exact_ends = endpoints
            .iter()
            .map(|e| e.as_exact().cloned())
            .collect::<Option<Vec<_>>>();
        Ok(SiteMap {
            family: MapFamily::Affine {
                endpoints,
                orientations: orientations.clone(),
            },
            ends,
            exact_ends,
            orientations,
            slopes,
            min_expansion,
        })
    }

    /// `m` equal increasing branches: `x -> m x mod 1`.
    pub fn uniform_branches(m: u32) -> Result<Self> {
        if m < 2 {
            return Err(Error::config("map.branches", "need at least two branches"));
        }
        let ends = (0..=m as i64).map(|i| Number::ratio(i, m as i64)).collect();
        SiteMap::affine(ends, vec![Orientation::Increasing; m as usize])
    }

    pub fn doubling() -> Self {
        SiteMap::uniform_branches(2).expect("doubling map is valid")
    }

    pub fn tent() -> Self {
        SiteMap::affine(
            vec![Number::ratio(0, 1), Number::ratio(1, 2), Number::ratio(1, 1)],
            vec![Orientation::Increasing, Orientation::Decreasing],
        )
        .expect("tent map is valid")
    }

    pub fn perturbed_doubling(amplitude: f64) -> Result<Self> {
        let min_expansion = 2.0 - 2.0 * PI * amplitude.abs();
        if !amplitude.is_finite() || min_expansion <= 1.0 {
            return Err(Error::config(
                "map.amplitude",
                format!("|amplitude| must be below 1/(2 pi) for expansion, got {amplitude}"),
            ));
        }
        Ok(SiteMap {
            family: MapFamily::PerturbedDoubling { amplitude },
            ends: vec![0.0, 0.5, 1.0],
            exact_ends: None,
            orientations: vec![Orientation::Increasing; 2],
            slopes: vec![2.0, 2.0],
            min_expansion,
        })
    }

    pub fn family(&self) -> &MapFamily {
        &self.family
    }

    pub fn endpoints(&self) -> &[f64] {
        &self.ends
    }

    pub fn branch_count(&self) -> usize {
        self.ends.len() - 1
    }

    pub fn min_expansion(&self) -> f64 {
        self.min_expansion
    }

    pub fn is_affine(&self) -> bool {
        matches!(self.family, MapFamily::Affine { .. })
    }

    /// True when orbits can be followed in rational arithmetic.
    pub fn is_exact(&self) -> bool {
        self.exact_ends.is_some()
    }

    pub fn is_endpoint(&self, x: f64) -> bool {
        self.ends.iter().any(|&b| b == x)
    }

    /// Branch containing `x`; endpoints belong to the branch on their right,
    /// except `1`, which belongs to the last branch.
    #[inline]
    pub fn branch_of(&self, x: f64) -> usize {
        let k = self.ends.len() - 1;
        let mut j = 0;
        while j + 1 < k && x >= self.ends[j + 1] {
            j += 1;
        }
        j
    }

    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        self.eval_with_slope(x).0
    }

    /// `(tau(x), |tau'(x)|)` in one pass.
    #[inline]
    pub fn eval_with_slope(&self, x: f64) -> (f64, f64) {
        let j = self.branch_of(x);
        match self.family {
            MapFamily::Affine { .. } => {
                let s = self.slopes[j];
                let y = match self.orientations[j] {
                    Orientation::Increasing => (x - self.ends[j]) * s,
                    Orientation::Decreasing => (self.ends[j + 1] - x) * s,
                };
                (y.clamp(0.0, 1.0), s)
            }
            MapFamily::PerturbedDoubling { amplitude } => {
                let (sin, cos) = (2.0 * PI * x).sin_cos();
                let y = 2.0 * x + amplitude * sin - j as f64;
                (y.clamp(0.0, 1.0), 2.0 + 2.0 * PI * amplitude * cos)
            }
        }
    }

    /// Signed derivative; undefined on branch endpoints.
    pub fn derivative(&self, x: f64) -> Result<f64> {
        if self.is_endpoint(x) {
            return Err(Error::BranchBoundary { x });
        }
        let j = self.branch_of(x);
        let (_, s) = self.eval_with_slope(x);
        Ok(match self.orientations[j] {
            Orientation::Increasing => s,
            Orientation::Decreasing => -s,
        })
    }

    fn exact_branch(&self, x: &BigRational) -> Result<(usize, &[BigRational])> {
        let ends = self.exact_ends.as_deref().ok_or_else(|| {
            Error::config("map", "rational arithmetic needs exact affine branch endpoints")
        })?;
        if x.is_negative() || *x > BigRational::one() {
            return Err(Error::config("point", "outside the unit interval"));
        }
        let k = ends.len() - 1;
        let mut j = 0;
        while j + 1 < k && *x >= ends[j + 1] {
            j += 1;
        }
        Ok((j, ends))
    }

    pub fn eval_exact(&self, x: &BigRational) -> Result<BigRational> {
        let (j, ends) = self.exact_branch(x)?;
        let len = &ends[j + 1] - &ends[j];
        Ok(match self.orientations[j] {
            Orientation::Increasing => (x - &ends[j]) / len,
            Orientation::Decreasing => (&ends[j + 1] - x) / len,
        })
    }

    pub fn derivative_exact(&self, x: &BigRational) -> Result<BigRational> {
        let (j, ends) = self.exact_branch(x)?;
        if ends.iter().any(|b| b == x) {
            return Err(Error::BranchBoundary {
                x: rational_to_f64(x),
            });
        }
        let s = (&ends[j + 1] - &ends[j]).recip();
        Ok(match self.orientations[j] {
            Orientation::Increasing => s,
            Orientation::Decreasing => -s,
        })
    }

    /// Chain-rule derivative of `tau^n` at `a`, exact when `a` and the map are.
    pub fn orbit_derivative(&self, a: &Number, n: usize) -> Result<f64> {
        match (a, self.is_exact()) {
            (Number::Exact(r), true) => Ok(rational_to_f64(&self.orbit_derivative_exact(r, n)?)),
            _ => {
                let mut x = a.to_f64();
                let mut prod = 1.0;
                for _ in 0..n {
                    prod *= self.derivative(x)?;
                    x = self.eval(x);
                }
                Ok(prod)
            }
        }
    }

    pub fn orbit_derivative_exact(&self, a: &BigRational, n: usize) -> Result<BigRational> {
        let mut x = a.clone();
        let mut prod = BigRational::one();
        for _ in 0..n {
            prod *= self.derivative_exact(&x)?;
            x = self.eval_exact(&x)?;
        }
        Ok(prod)
    }

    /// The point of branch `j` mapped onto `y`.
    pub fn inverse_branch(&self, j: usize, y: f64) -> f64 {
        let (lo, hi) = (self.ends[j], self.ends[j + 1]);
        match self.family {
            MapFamily::Affine { .. } => match self.orientations[j] {
                Orientation::Increasing => lo + y / self.slopes[j],
                Orientation::Decreasing => hi - y / self.slopes[j],
            },
            MapFamily::PerturbedDoubling { amplitude } => {
                if y <= 0.0 {
                    return lo;
                }
                if y >= 1.0 {
                    return hi;
                }
                let target = y + j as f64;
                let f = |x: f64| 2.0 * x + amplitude * (2.0 * PI * x).sin() - target;
                let (mut a, mut b) = (lo, hi);
                let mut x = lo + y * (hi - lo);
                for _ in 0..100 {
                    let fx = f(x);
                    if fx == 0.0 {
                        return x;
                    }
                    if fx < 0.0 {
                        a = x;
                    } else {
                        b = x;
                    }
                    let df = 2.0 + 2.0 * PI * amplitude * (2.0 * PI * x).cos();
                    let mut next = x - fx / df;
                    if !(next > a && next < b) {
                        next = 0.5 * (a + b);
                    }
                    if (next - x).abs() <= 1e-17 || b - a <= 1e-16 {
                        return next;
                    }
                    x = next;
                }
                x
            }
        }
    }

    /// One-dimensional Ulam transition fractions on an arbitrary partition.
    ///
    /// Entry `(r, w)` in column `c` means a fraction `w` of the Lebesgue mass
    /// of cell `c` lands in cell `r` after one step. Preimages are computed
    /// through the inverse branches, so the fractions are exact up to the
    /// accuracy of the inverse (machine precision for affine branches).
    pub fn transition_fractions(&self, breakpoints: &[f64]) -> Transition1d {
        let cells = breakpoints.len() - 1;
        let mut cols: Vec<Vec<(u32, f64)>> = vec![Vec::new(); cells];
        for j in 0..self.branch_count() {
            let mut prev = self.inverse_branch(j, breakpoints[0]);
            for r in 0..cells {
                let next = self.inverse_branch(j, breakpoints[r + 1]);
                let (x0, x1) = if prev <= next { (prev, next) } else { (next, prev) };
                prev = next;
                if x1 <= x0 {
                    continue;
                }
                let first = breakpoints.partition_point(|&b| b <= x0).saturating_sub(1);
                for c in first..cells {
                    let (lo, hi) = (breakpoints[c], breakpoints[c + 1]);
                    if lo >= x1 {
                        break;
                    }
                    let overlap = x1.min(hi) - x0.max(lo);
                    if overlap > 0.0 {
                        cols[c].push((r as u32, overlap / (hi - lo)));
                    }
                }
            }
        }
        for col in &mut cols {
            col.sort_by_key(|&(r, _)| r);
            col.dedup_by(|b, a| {
                if a.0 == b.0 {
                    a.1 += b.1;
                    true
                } else {
                    false
                }
            });
        }
        Transition1d { cols }
    }

    /// Newton search for a point of period `period` near `guess`.
    pub fn periodic_point(&self, period: usize, guess: f64) -> Result<f64> {
        let mut x = guess;
        let mut residual = f64::INFINITY;
        for _ in 0..200 {
            let (mut y, mut dy) = (x, 1.0);
            for _ in 0..period {
                let (next, s) = self.eval_with_slope(y);
                let sign = match self.orientations[self.branch_of(y)] {
                    Orientation::Increasing => 1.0,
                    Orientation::Decreasing => -1.0,
                };
                dy *= sign * s;
                y = next;
            }
            residual = y - x;
            if residual.abs() < 1e-15 {
                return Ok(x);
            }
            x = (x - residual / (dy - 1.0)).clamp(0.0, 1.0);
        }
        Err(Error::NoConvergence {
            iterations: 200,
            residual: residual.abs(),
        })
    }
}

/// Column-oriented sparse 1D transition matrix (see
/// [`SiteMap::transition_fractions`]).
#[derive(Debug, Clone)]
pub struct Transition1d {
    pub cols: Vec<Vec<(u32, f64)>>,
}

impl Transition1d {
    pub fn cells(&self) -> usize {
        self.cols.len()
    }

    /// Push a mass vector forward one step.
    pub fn apply(&self, mass: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols.len()];
        for (c, col) in self.cols.iter().enumerate() {
            let m = mass[c];
            if m == 0.0 {
                continue;
            }
            for &(r, w) in col {
                out[r as usize] += w * m;
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DensityKind {
    Uniform,
    Tabulated,
}

/// Invariant density `h` of the site map.
#[derive(Debug, Clone)]
pub struct InvariantDensity {
    kind: DensityKind,
    table: Vec<f64>,
    cdf: Vec<f64>,
    lower_bound: f64,
    upper_bound: f64,
}

impl InvariantDensity {
    pub fn uniform() -> Self {
        InvariantDensity {
            kind: DensityKind::Uniform,
            table: Vec::new(),
            cdf: Vec::new(),
            lower_bound: 1.0,
            upper_bound: 1.0,
        }
    }

    /// Piecewise-constant density on equal bins, renormalised to integral 1.
    pub fn tabulated(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() || values.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::config("density", "tabulated values must be positive"));
        }
        let width = 1.0 / values.len() as f64;
        let total: f64 = values.iter().sum::<f64>() * width;
        let table: Vec<f64> = values.iter().map(|v| v / total).collect();
        let mut cdf = Vec::with_capacity(table.len() + 1);
        cdf.push(0.0);
        let mut acc = 0.0;
        for v in &table {
            acc += v * width;
            cdf.push(acc);
        }
        let lower_bound = table.iter().cloned().fold(f64::INFINITY, f64::min);
        let upper_bound = table.iter().cloned().fold(0.0, f64::max);
        Ok(InvariantDensity {
            kind: DensityKind::Tabulated,
            table,
            cdf,
            lower_bound,
            upper_bound,
        })
    }

    pub fn kind(&self) -> DensityKind {
        self.kind
    }

    pub fn is_uniform(&self) -> bool {
        self.kind == DensityKind::Uniform
    }

    pub fn table(&self) -> &[f64] {
        &self.table
    }

    pub fn lower_bound(&self) -> f64 {
        self.lower_bound
    }

    pub fn upper_bound(&self) -> f64 {
        self.upper_bound
    }

    /// Point value; tabulated densities interpolate linearly between bin
    /// centres.
    pub fn eval(&self, x: f64) -> f64 {
        if self.is_uniform() {
            return 1.0;
        }
        let n = self.table.len();
        let pos = x.clamp(0.0, 1.0) * n as f64 - 0.5;
        if pos <= 0.0 {
            return self.table[0];
        }
        let i = pos.floor() as usize;
        if i + 1 >= n {
            return self.table[n - 1];
        }
        let t = pos - i as f64;
        self.table[i] * (1.0 - t) + self.table[i + 1] * t
    }

    pub fn cdf(&self, x: f64) -> f64 {
        let x = x.clamp(0.0, 1.0);
        if self.is_uniform() {
            return x;
        }
        let n = self.table.len();
        let pos = x * n as f64;
        let i = (pos.floor() as usize).min(n - 1);
        self.cdf[i] + self.table[i] * (x - i as f64 / n as f64)
    }

    pub fn integral(&self, a: f64, b: f64) -> f64 {
        if b <= a {
            return 0.0;
        }
        self.cdf(b) - self.cdf(a)
    }

    pub fn quantile(&self, u: f64) -> f64 {
        let u = u.clamp(0.0, 1.0);
        if self.is_uniform() {
            return u;
        }
        let n = self.table.len();
        let i = self.cdf.partition_point(|&c| c <= u).clamp(1, n) - 1;
        (i as f64 / n as f64 + (u - self.cdf[i]) / self.table[i]).clamp(0.0, 1.0)
    }

    /// Draw from `h` restricted to `[lo, hi]` given a uniform variate `u`.
    pub fn sample_between(&self, lo: f64, hi: f64, u: f64) -> f64 {
        if self.is_uniform() {
            return lo + u * (hi - lo);
        }
        let (a, b) = (self.cdf(lo), self.cdf(hi));
        self.quantile(a + u * (b - a)).clamp(lo, hi)
    }

    /// Multiply by a constant and renormalise; identity on the density.
    pub fn rescaled(&self, factor: f64) -> Result<Self> {
        match self.kind {
            DensityKind::Uniform => Ok(self.clone()),
            DensityKind::Tabulated => {
                InvariantDensity::tabulated(self.table.iter().map(|v| v * factor).collect())
            }
        }
    }
}

/// Residual target and step cap for the site-level fixed-point iteration.
const DENSITY_TOL: f64 = 1e-10;
const DENSITY_MAX_ITER: usize = 100_000;

/// Invariant density of `map`: uniform for affine full-branch maps, otherwise
/// the fixed point of the 1D Ulam matrix on `bins` equal cells.
pub fn invariant_density(map: &SiteMap, bins: usize) -> Result<InvariantDensity> {
    if map.is_affine() {
        return Ok(InvariantDensity::uniform());
    }
    if bins < 16 {
        return Err(Error::config("bins", "tabulated densities need at least 16 bins"));
    }
    let grid: Vec<f64> = (0..=bins).map(|i| i as f64 / bins as f64).collect();
    let op = map.transition_fractions(&grid);
    let mut mass = vec![1.0 / bins as f64; bins];
    for _ in 0..DENSITY_MAX_ITER {
        let mut next = op.apply(&mass);
        let total: f64 = next.iter().sum();
        next.iter_mut().for_each(|m| *m /= total);
        let residual: f64 = next.iter().zip(&mass).map(|(a, b)| (a - b).abs()).sum();
        mass = next;
        if residual <= DENSITY_TOL {
            let table = mass.iter().map(|m| m * bins as f64).collect();
            return InvariantDensity::tabulated(table);
        }
    }
    Err(Error::NoConvergence {
        iterations: DENSITY_MAX_ITER,
        residual: f64::NAN,
    })
}

/// `|| U h - h ||_1` for a tabulated density on its own grid.
pub fn transfer_residual(map: &SiteMap, h: &InvariantDensity) -> f64 {
    let bins = h.table().len();
    let grid: Vec<f64> = (0..=bins).map(|i| i as f64 / bins as f64).collect();
    let op = map.transition_fractions(&grid);
    let mass: Vec<f64> = h.table().iter().map(|v| v / bins as f64).collect();
    op.apply(&mass)
        .iter()
        .zip(&mass)
        .map(|(a, b)| (a - b).abs())
        .sum()
}
