//! Trajectory statistics under the uncoupled product map: survival curves,
//! first hitting times of the collision set, return probabilities `q_k`,
//! and the exponential hitting law.
//!
//! Every trajectory draws from its own ChaCha8 stream, selected by
//! `(seed, trajectory index)`, so results do not depend on the number of
//! worker threads.
//!
//! Floating-point orbits of an expanding map lose `log2 |tau'|` bits per
//! step and collapse onto machine-representable cycles (for the doubling
//! map every orbit reaches 0 within 55 steps). Simulated orbits therefore
//! refresh the discarded low-order bits with fresh uniform noise of size
//! `|tau'| * 2^-53`, which is how the hidden digits of a genuinely random
//! real initial condition behave.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::collision::{CollisionIndex, CollisionSpec, LatticeState, NO_ZONE};
use crate::error::{Error, Result};
use crate::lattice::LatticeSpec;
use crate::site_map::{InvariantDensity, MapFamily, Orientation, SiteMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MeasureKind {
    #[default]
    Lebesgue,
    Mu0,
}

impl std::fmt::Display for MeasureKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MeasureKind::Lebesgue => "lebesgue",
            MeasureKind::Mu0 => "mu0",
        })
    }
}

/// Everything needed to simulate one lattice.
#[derive(Debug, Clone, Copy)]
pub struct System<'a> {
    pub map: &'a SiteMap,
    pub cspec: &'a CollisionSpec,
    pub lattice: &'a LatticeSpec,
    pub h: &'a InvariantDensity,
}

/// Per-trajectory generator: stream `stream` of the ChaCha8 key `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// SplitMix64 finaliser, used to derive independent sub-seeds.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn sub_seed(seed: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(index))
}

/// Independent sub-seeds for the different experiments of one run.
pub mod purpose {
    pub const SURVIVAL: u64 = 1;
    pub const QK: u64 = 2;
    pub const HITTING: u64 = 3;
}

/// Draw a state from `m_L` (Lebesgue) or `mu_0` (product of `h`).
pub fn sample_initial<R: Rng + ?Sized>(
    kind: MeasureKind,
    h: &InvariantDensity,
    lattice: &LatticeSpec,
    rng: &mut R,
) -> LatticeState {
    let coords = (0..lattice.sites())
        .map(|_| {
            let u: f64 = rng.gen();
            match kind {
                MeasureKind::Mu0 if !h.is_uniform() => h.quantile(u),
                _ => u,
            }
        })
        .collect();
    LatticeState { coords }
}

/// Rejection cap for conditioning on the complement of the collision set.
const MAX_REJECTIONS: usize = 1_000_000;

/// Like [`sample_initial`], conditioned to lie outside the collision set.
pub fn sample_initial_outside<R: Rng + ?Sized>(
    kind: MeasureKind,
    sys: &System,
    rng: &mut R,
) -> Result<LatticeState> {
    let index = CollisionIndex::new(sys.cspec, sys.lattice);
    let mut codes = vec![0u8; sys.lattice.sites()];
    for _ in 0..MAX_REJECTIONS {
        let s = sample_initial(kind, sys.h, sys.lattice, rng);
        if !index.hits(&s.coords, &mut codes) {
            return Ok(s);
        }
    }
    Err(Error::InsufficientData(format!(
        "no state outside the collision set in {MAX_REJECTIONS} draws"
    )))
}

/// First hitting time of the collision set or censoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HitTime {
    Hit(u64),
    Censored,
}

/// `inf { n >= 0 : T_0^n(x) in H_eps }`, following the plain floating-point
/// orbit for at most `n_max` steps.
pub fn first_hitting_time(
    state: &LatticeState,
    map: &SiteMap,
    cspec: &CollisionSpec,
    lattice: &LatticeSpec,
    n_max: u64,
) -> HitTime {
    let index = CollisionIndex::new(cspec, lattice);
    let mut codes = vec![0u8; lattice.sites()];
    let mut x = state.coords.clone();
    for n in 0..=n_max {
        if index.hits(&x, &mut codes) {
            return HitTime::Hit(n);
        }
        x.iter_mut().for_each(|c| *c = map.eval(*c));
    }
    HitTime::Censored
}

/// Single-coordinate update rule.
#[derive(Debug, Clone)]
enum Kernel {
    /// `x -> m x mod 1` on 64-bit fixed-point coordinates. The low digit
    /// shifted in at each step is drawn uniformly, so the orbit is exact.
    Modular {
        m: u64,
        /// `log2 m` when `m` is a power of two.
        shift: Option<u32>,
        /// `(lo, width)`: `X` lies in zone `z` iff `X - lo < width`.
        zones: Vec<(u64, u64)>,
    },
    /// `tau(x) = offset[j] + slope[j] * x` on branch `j`.
    Affine {
        inner: Vec<f64>,
        offset: Vec<f64>,
        slope: Vec<f64>,
        dither: Vec<f64>,
    },
    Generic,
}

const DITHER_UNIT: f64 = 1.0 / (1u64 << 53) as f64 / 65536.0;
const TWO_64: f64 = 18_446_744_073_709_551_616.0;

/// Random bits drawn 64 at a time.
struct BitSource<'r> {
    rng: &'r mut ChaCha8Rng,
    buf: u64,
    left: u32,
}

impl<'r> BitSource<'r> {
    fn new(rng: &'r mut ChaCha8Rng) -> Self {
        BitSource { rng, buf: 0, left: 0 }
    }

    /// `b <= 64` fresh bits.
    #[inline]
    fn take(&mut self, b: u32) -> u64 {
        if b == 64 {
            return self.rng.next_u64();
        }
        if self.left < b {
            self.buf = self.rng.next_u64();
            self.left = 64;
        }
        let r = self.buf & ((1u64 << b) - 1);
        self.buf >>= b;
        self.left -= b;
        r
    }

    #[inline]
    fn next16(&mut self) -> f64 {
        self.take(16) as f64
    }
}

fn modular_factor(map: &SiteMap) -> Option<u64> {
    let MapFamily::Affine { orientations, .. } = map.family() else {
        return None;
    };
    let ends = map.endpoints();
    let m = (ends.len() - 1) as u64;
    let equal = ends.iter().enumerate().all(|(j, &e)| e == j as f64 / m as f64);
    (equal && orientations.iter().all(|o| *o == Orientation::Increasing)).then_some(m)
}

const MAX_MASK_AXES: usize = 8;

#[inline]
fn modular_step(x: u64, m: u64, shift: Option<u32>, bits: &mut BitSource) -> u64 {
    let digit = match shift {
        Some(b) => bits.take(b),
        None => (bits.take(16) * m) >> 16,
    };
    x.wrapping_mul(m).wrapping_add(digit)
}

fn to_fixed(x: f64) -> u64 {
    if x >= 1.0 {
        u64::MAX
    } else {
        (x * TWO_64) as u64
    }
}

fn from_fixed(x: u64) -> f64 {
    x as f64 / TWO_64
}

/// Fast trajectory engine for one system.
#[derive(Debug, Clone)]
pub struct Simulator<'a> {
    map: &'a SiteMap,
    index: CollisionIndex,
    kernel: Kernel,
    sites: usize,
}

impl<'a> Simulator<'a> {
    pub fn new(map: &'a SiteMap, cspec: &CollisionSpec, lattice: &LatticeSpec) -> Self {
        let kernel = if let Some(m) = modular_factor(map) {
            let zones = cspec
                .zones()
                .iter()
                .map(|&(lo, hi)| {
                    if cspec.is_empty() {
                        return (0, 0);
                    }
                    let a = to_fixed(lo).saturating_add(1);
                    (a, to_fixed(hi).saturating_sub(a))
                })
                .collect();
            Kernel::Modular {
                m,
                shift: m.is_power_of_two().then(|| m.trailing_zeros()),
                zones,
            }
        } else {
            match map.family() {
                MapFamily::Affine { orientations, .. } => {
                    let ends = map.endpoints();
                    let k = ends.len() - 1;
                    let mut offset = Vec::with_capacity(k);
                    let mut slope = Vec::with_capacity(k);
                    for j in 0..k {
                        let s = 1.0 / (ends[j + 1] - ends[j]);
                        match orientations[j] {
                            Orientation::Increasing => {
                                slope.push(s);
                                offset.push(-ends[j] * s);
                            }
                            Orientation::Decreasing => {
                                slope.push(-s);
                                offset.push(ends[j + 1] * s);
                            }
                        }
                    }
                    Kernel::Affine {
                        inner: ends[1..k].to_vec(),
                        dither: slope.iter().map(|s| s.abs() * DITHER_UNIT).collect(),
                        offset,
                        slope,
                    }
                }
                MapFamily::PerturbedDoubling { .. } => Kernel::Generic,
            }
        };
        Simulator {
            map,
            index: CollisionIndex::new(cspec, lattice),
            kernel,
            sites: lattice.sites(),
        }
    }

    pub fn index(&self) -> &CollisionIndex {
        &self.index
    }

    /// One refreshed floating-point step of every coordinate; returns
    /// whether the new state is in the collision set.
    #[inline]
    fn step_float(&self, x: &mut [f64], codes: &mut [u8], bits: &mut BitSource) -> bool {
        let mut any = false;
        match &self.kernel {
            Kernel::Affine {
                inner,
                offset,
                slope,
                dither,
            } => {
                for (xi, ci) in x.iter_mut().zip(codes.iter_mut()) {
                    let v = *xi;
                    let mut j = 0;
                    while j < inner.len() && v >= inner[j] {
                        j += 1;
                    }
                    let y = offset[j] + slope[j] * v + dither[j] * bits.next16();
                    let y = y.clamp(0.0, 1.0);
                    *xi = y;
                    *ci = self.index.code(y);
                    any |= *ci != NO_ZONE;
                }
            }
            _ => {
                for (xi, ci) in x.iter_mut().zip(codes.iter_mut()) {
                    let (y, s) = self.map.eval_with_slope(*xi);
                    let y = (y + s * DITHER_UNIT * bits.next16()).clamp(0.0, 1.0);
                    *xi = y;
                    *ci = self.index.code(y);
                    any |= *ci != NO_ZONE;
                }
            }
        }
        any && self.index.hits_codes(codes)
    }

    /// Runs the refreshed orbit of `x` for at most `horizon` steps and
    /// returns the first step `n >= 1` whose state is in the collision set.
    /// `x` is left at the final state.
    fn run(&self, x: &mut [f64], horizon: u64, rng: &mut ChaCha8Rng) -> Option<u64> {
        let mut codes = vec![NO_ZONE; self.sites];
        let mut bits = BitSource::new(rng);
        if let Kernel::Modular { m, shift, zones } = &self.kernel {
            // the 11 bits below an f64's mantissa are unknown: fill them
            let mut fixed: Vec<u64> = x.iter().map(|&v| to_fixed(v) | bits.take(11)).collect();
            let hit = if self.sites <= 64 && self.index.d() <= MAX_MASK_AXES {
                self.run_masks(&mut fixed, *m, *shift, zones, horizon, &mut bits)
            } else {
                let code = |v: u64| {
                    zones
                        .iter()
                        .position(|&(lo, w)| v.wrapping_sub(lo) < w)
                        .map_or(NO_ZONE, |z| z as u8)
                };
                let mut hit = None;
                for n in 1..=horizon {
                    let mut any = false;
                    for (xi, ci) in fixed.iter_mut().zip(codes.iter_mut()) {
                        *xi = modular_step(*xi, *m, *shift, &mut bits);
                        *ci = code(*xi);
                        any |= *ci != NO_ZONE;
                    }
                    if any && self.index.hits_codes(&codes) {
                        hit = Some(n);
                        break;
                    }
                }
                hit
            };
            for (v, f) in x.iter_mut().zip(&fixed) {
                *v = from_fixed(*f);
            }
            return hit;
        }
        (1..=horizon).find(|_| self.step_float(x, &mut codes, &mut bits))
    }

    /// Fixed-point loop with one bit mask per zone, for at most 64 sites.
    fn run_masks(
        &self,
        fixed: &mut [u64],
        m: u64,
        shift: Option<u32>,
        zones: &[(u64, u64)],
        horizon: u64,
        bits: &mut BitSource,
    ) -> Option<u64> {
        // with a power-of-two factor all digits of one step come from a
        // single draw
        let per_step = shift.map(|b| b as usize * fixed.len()).filter(|&t| t <= 64);
        macro_rules! dispatch {
            ($($z:literal),*) => {
                match (zones.len(), per_step) {
                    $(
                        ($z, Some(total)) => {
                            let b = shift.unwrap_or(0);
                            let mask = (1u64 << b) - 1;
                            self.run_masks_z::<$z>(fixed, zones, horizon, bits, total as u32, |x, chunk, p| {
                                (x << b) | ((chunk >> (p as u32 * b)) & mask)
                            })
                        }
                        ($z, None) => self.run_masks_z::<$z>(fixed, zones, horizon, bits, 16, |x, chunk, _| {
                            x.wrapping_mul(m).wrapping_add((chunk * m) >> 16)
                        }),
                    )*
                    _ => unreachable!("at most {MAX_MASK_AXES} axes"),
                }
            };
        }
        dispatch!(2, 4, 6, 8, 10, 12, 14, 16)
    }

    #[inline(always)]
    fn run_masks_z<const Z: usize>(
        &self,
        fixed: &mut [u64],
        zones: &[(u64, u64)],
        horizon: u64,
        bits: &mut BitSource,
        draw: u32,
        step: impl Fn(u64, u64, usize) -> u64,
    ) -> Option<u64> {
        let zones: [(u64, u64); Z] = zones.try_into().expect("zone count");
        // one draw per step, or per site when `draw` is 16
        let shared = draw != 16;
        for n in 1..=horizon {
            let mut masks = [0u64; Z];
            let mut any = 0u64;
            let chunk = if shared { bits.take(draw) } else { 0 };
            for (p, xi) in fixed.iter_mut().enumerate() {
                let c = if shared { chunk } else { bits.take(16) };
                let v = step(*xi, c, p);
                *xi = v;
                for z in 0..Z {
                    let inside = u64::from(v.wrapping_sub(zones[z].0) < zones[z].1);
                    masks[z] |= inside << p;
                    any |= inside;
                }
            }
            if any == 0 {
                continue;
            }
            for axis in 0..Z / 2 {
                let (plus, minus) = (masks[2 * axis], masks[2 * axis + 1]);
                let mut b = plus;
                while b != 0 {
                    let p = b.trailing_zeros() as usize;
                    if minus >> self.index.plus_neighbor(p, axis) & 1 == 1 {
                        return Some(n);
                    }
                    b &= b - 1;
                }
            }
        }
        None
    }

    /// Hitting time along a refreshed orbit; the state is checked at steps
    /// `0..=n_max`.
    pub fn hitting_time(&self, x: &mut [f64], n_max: u64, rng: &mut ChaCha8Rng) -> HitTime {
        let mut codes = vec![0u8; self.sites];
        if self.index.hits(x, &mut codes) {
            return HitTime::Hit(0);
        }
        match self.run(x, n_max, rng) {
            Some(n) => HitTime::Hit(n),
            None => HitTime::Censored,
        }
    }

    /// First return time `j` in `1..=horizon` along a refreshed orbit.
    fn return_time(&self, x: &mut [f64], horizon: usize, rng: &mut ChaCha8Rng) -> Option<usize> {
        self.run(x, horizon as u64, rng).map(|n| n as usize)
    }
}

/// Survivor counts `survivors[n] = #{ t_eps >= n }` for `n = 0..=n_max`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SurvivalCurve {
    pub n_max: u64,
    pub survivors: Vec<u64>,
    pub total: u64,
    pub seed: u64,
    pub measure_kind: MeasureKind,
    /// Whether initial states were conditioned to avoid the collision set.
    pub conditioned: bool,
}

pub const SURVIVAL_CSV_HEADER: [&str; 3] = ["n", "survivors", "total"];

impl SurvivalCurve {
    pub fn fraction(&self, n: usize) -> f64 {
        self.survivors[n] as f64 / self.total as f64
    }

    /// Binomial standard error of [`Self::fraction`].
    pub fn fraction_stderr(&self, n: usize) -> f64 {
        let p = self.fraction(n);
        (p * (1.0 - p) / self.total as f64).sqrt()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(SURVIVAL_CSV_HEADER)?;
        for (n, s) in self.survivors.iter().enumerate() {
            out.write_record([n.to_string(), s.to_string(), self.total.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    /// Reads the CSV form; `seed` and `measure_kind` are not part of it.
    pub fn read_csv<R: Read>(r: R, path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        check_header(&mut rdr, &SURVIVAL_CSV_HEADER, path)?;
        let mut survivors = Vec::new();
        let mut total = 0;
        for rec in rdr.records() {
            let rec = rec?;
            let num = |i: usize| -> Result<u64> {
                rec[i]
                    .trim()
                    .parse()
                    .map_err(|_| Error::config(SURVIVAL_CSV_HEADER[i], format!("bad value `{}`", &rec[i])))
            };
            survivors.push(num(1)?);
            total = num(2)?;
        }
        if survivors.is_empty() {
            return Err(Error::InsufficientData(format!("{} has no rows", path.display())));
        }
        Ok(SurvivalCurve {
            n_max: survivors.len() as u64 - 1,
            survivors,
            total,
            seed: 0,
            measure_kind: MeasureKind::Lebesgue,
            conditioned: false,
        })
    }
}

pub(crate) fn check_header<R: Read>(rdr: &mut csv::Reader<R>, expected: &[&str], path: &Path) -> Result<()> {
    let found: Vec<String> = rdr.headers()?.iter().map(|s| s.trim().to_string()).collect();
    if found.iter().map(String::as_str).ne(expected.iter().copied()) {
        return Err(Error::SchemaMismatch {
            path: path.to_path_buf(),
            expected: expected.iter().map(|s| s.to_string()).collect(),
            found,
        });
    }
    Ok(())
}

/// Survival experiment settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SurvivalParams {
    pub n_traj: u64,
    pub n_max: u64,
    pub measure_kind: MeasureKind,
    /// Condition initial states to lie outside the collision set.
    pub conditioned: bool,
    pub seed: u64,
}

/// Hitting times of `n_traj` independent refreshed trajectories, in
/// trajectory order; `None` is censored.
pub fn simulate_hitting_times(
    sys: &System,
    n_traj: u64,
    n_max: u64,
    kind: MeasureKind,
    conditioned: bool,
    seed: u64,
) -> Result<Vec<Option<u64>>> {
    let sim = Simulator::new(sys.map, sys.cspec, sys.lattice);
    (0..n_traj as usize)
        .into_par_iter()
        .with_min_len(256)
        .map(|i| {
            let mut rng = stream_rng(seed, i as u64);
            let start = if conditioned {
                sample_initial_outside(kind, sys, &mut rng)?
            } else {
                sample_initial(kind, sys.h, sys.lattice, &mut rng)
            };
            let mut x = start.coords;
            Ok(match sim.hitting_time(&mut x, n_max, &mut rng) {
                HitTime::Hit(t) => Some(t),
                HitTime::Censored => None,
            })
        })
        .collect()
}

/// Survival probabilities of the uncoupled dynamics with respect to the
/// collision set.
pub fn survival_curve(sys: &System, params: &SurvivalParams) -> Result<SurvivalCurve> {
    if params.n_traj < 1000 {
        return Err(Error::config("run.trajectories", "need at least 1000 trajectories"));
    }
    if params.n_max < 1 {
        return Err(Error::config("run.n_max", "must be at least 1"));
    }
    let times = simulate_hitting_times(
        sys,
        params.n_traj,
        params.n_max,
        params.measure_kind,
        params.conditioned,
        params.seed,
    )?;
    let len = params.n_max as usize + 1;
    // deaths[t] = number of trajectories first hitting at t
    let mut deaths = vec![0u64; len];
    for t in times.into_iter().flatten() {
        deaths[t as usize] += 1;
    }
    let mut survivors = vec![0u64; len];
    let mut alive = params.n_traj;
    for n in 0..len {
        survivors[n] = alive;
        alive -= deaths[n];
    }
    Ok(SurvivalCurve {
        n_max: params.n_max,
        survivors,
        total: params.n_traj,
        seed: params.seed,
        measure_kind: params.measure_kind,
        conditioned: params.conditioned,
    })
}

/// Fitted escape rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateFit {
    pub rate: f64,
    pub stderr: f64,
    /// Steps `first..last` whose decrements entered the fit.
    pub first: usize,
    pub last: usize,
}

pub const DEFAULT_BURN_IN: usize = 5;
pub const MIN_SURVIVORS: u64 = 100;
pub const MIN_WINDOW: usize = 10;

/// Escape rate from a survival curve.
///
/// The log-survival curve `y_n = -ln(S_n / T)` is a sum of nearly
/// independent per-step decrements `y_{n+1} - y_n`, each with binomial
/// variance `q / ((1 - q) S_n)`. The slope is the weighted least-squares
/// fit of a constant to these decrements (weights `S_n`), which is the
/// generalised least-squares slope of `y_n` under that covariance. The
/// window starts after `burn_in` steps and ends before survivors drop
/// below 100.
pub fn fit_rate(curve: &SurvivalCurve, burn_in: usize) -> Result<RateFit> {
    let s = &curve.survivors;
    let mut last = burn_in;
    while last + 1 < s.len() && s[last + 1] >= MIN_SURVIVORS {
        last += 1;
    }
    if last < burn_in + MIN_WINDOW || s.get(burn_in).is_none_or(|&v| v < MIN_SURVIVORS) {
        return Err(Error::InsufficientData(format!(
            "fewer than {MIN_WINDOW} steps after burn-in {burn_in} with at least {MIN_SURVIVORS} survivors"
        )));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for n in burn_in..last {
        let (a, b) = (s[n] as f64, s[n + 1] as f64);
        num += a * (a / b).ln();
        den += a;
    }
    let rate = num / den;
    let q = -(-rate).exp_m1();
    let stderr = if q > 0.0 { (q / ((1.0 - q) * den)).sqrt() } else { 0.0 };
    Ok(RateFit {
        rate,
        stderr,
        first: burn_in,
        last,
    })
}

/// Return probabilities `q_0 .. q_{k_max-1}` with binomial errors.
#[derive(Debug, Clone, PartialEq)]
pub struct QkEstimate {
    pub q: Vec<f64>,
    pub stderr: Vec<f64>,
    pub theta_emp: f64,
    pub theta_emp_stderr: f64,
    pub samples: u64,
}

impl QkEstimate {
    /// `1 - sum_{k < N} lambda^-k q_k`, the finite-`N` extremal index.
    pub fn theta_n(&self, lambda: f64, n: usize) -> f64 {
        1.0 - self
            .q
            .iter()
            .take(n)
            .enumerate()
            .map(|(k, q)| q / lambda.powi(k as i32))
            .sum::<f64>()
    }
}

/// Draw from `mu_0` conditioned on the collision set: a box chosen in
/// proportion to its measure, a point from `h` inside it, accepted with
/// probability one over the number of boxes containing it.
fn sample_in_h(sys: &System, index: &CollisionIndex, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let masses = sys.cspec.zone_masses(sys.h);
    let axis_weight: Vec<f64> = masses.chunks(2).map(|c| c[0] * c[1]).collect();
    let total: f64 = axis_weight.iter().sum();
    let sites = sys.lattice.sites();
    let mut codes = vec![0u8; sites];
    loop {
        let mut u = rng.gen::<f64>() * total;
        let mut axis = 0;
        while axis + 1 < axis_weight.len() && u >= axis_weight[axis] {
            u -= axis_weight[axis];
            axis += 1;
        }
        let p = rng.gen_range(0..sites);
        let q = sys.lattice.neighbor(p, crate::lattice::Direction::plus(axis));
        let mut x = sample_initial(MeasureKind::Mu0, sys.h, sys.lattice, rng).coords;
        let (lo, hi) = sys.cspec.zones()[2 * axis];
        x[p] = sys.h.sample_between(lo, hi, rng.gen());
        let (lo, hi) = sys.cspec.zones()[2 * axis + 1];
        x[q] = sys.h.sample_between(lo, hi, rng.gen());
        let m = index.multiplicity(&x, &mut codes).max(1);
        if m == 1 || rng.gen_range(0..m) == 0 {
            return x;
        }
    }
}

/// Monte Carlo estimate of the conditional return probabilities
/// `q_k = mu_0(H, T^-1 H^c, ..., T^-k H^c, T^-(k+1) H) / mu_0(H)`.
pub fn estimate_qk(sys: &System, k_max: usize, n_samples: u64, seed: u64) -> Result<QkEstimate> {
    if sys.cspec.is_empty() {
        return Err(Error::config("collision.eps", "q_k needs a non-empty collision set"));
    }
    if k_max == 0 {
        return Err(Error::config("run.k_max", "must be at least 1"));
    }
    let sim = Simulator::new(sys.map, sys.cspec, sys.lattice);
    let returns: Vec<Option<usize>> = (0..n_samples as usize)
        .into_par_iter()
        .with_min_len(1024)
        .map(|i| {
            let mut rng = stream_rng(seed, i as u64);
            let mut x = sample_in_h(sys, sim.index(), &mut rng);
            sim.return_time(&mut x, k_max, &mut rng)
        })
        .collect();
    let mut counts = vec![0u64; k_max];
    for j in returns.into_iter().flatten() {
        counts[j - 1] += 1;
    }
    let n = n_samples as f64;
    let q: Vec<f64> = counts.iter().map(|&c| c as f64 / n).collect();
    let stderr = q.iter().map(|p| (p * (1.0 - p) / n).sqrt()).collect();
    let s: f64 = counts.iter().sum::<u64>() as f64 / n;
    Ok(QkEstimate {
        q,
        stderr,
        theta_emp: 1.0 - s,
        theta_emp_stderr: (s * (1.0 - s) / n).sqrt(),
        samples: n_samples,
    })
}

/// First hitting times under `mu_0` (not conditioned), with the factor that
/// turns them into an approximately unit-rate exponential sample.
#[derive(Debug, Clone, PartialEq)]
pub struct HittingSample {
    pub times: Vec<u64>,
    pub censored: Vec<bool>,
    pub n_max: u64,
    pub rescale: f64,
    pub seed: u64,
}

pub const HITTING_CSV_HEADER: [&str; 3] = ["trajectory_id", "t_eps", "censored"];

impl HittingSample {
    pub fn censored_count(&self) -> usize {
        self.censored.iter().filter(|&&c| c).count()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(HITTING_CSV_HEADER)?;
        for (i, (t, c)) in self.times.iter().zip(&self.censored).enumerate() {
            out.write_record([i.to_string(), t.to_string(), u8::from(*c).to_string()])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn read_csv<R: Read>(r: R, path: &Path, rescale: f64) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        check_header(&mut rdr, &HITTING_CSV_HEADER, path)?;
        let mut times = Vec::new();
        let mut censored = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let t: u64 = rec[1]
                .trim()
                .parse()
                .map_err(|_| Error::config("t_eps", format!("bad value `{}`", &rec[1])))?;
            times.push(t);
            censored.push(rec[2].trim() == "1");
        }
        let n_max = times.iter().copied().max().unwrap_or(0);
        Ok(HittingSample {
            times,
            censored,
            n_max,
            rescale,
            seed: 0,
        })
    }
}

/// Default horizon `ceil(20 / (theta mu_0(H)))`, capped at `10^7`.
pub fn default_hitting_horizon(theta_mu0: f64) -> u64 {
    if !(theta_mu0 > 0.0) {
        return 10_000_000;
    }
    (20.0 / theta_mu0).ceil().min(1e7) as u64
}

pub fn hitting_sample(sys: &System, n: u64, n_max: u64, rescale: f64, seed: u64) -> Result<HittingSample> {
    let raw = simulate_hitting_times(sys, n, n_max, MeasureKind::Mu0, false, seed)?;
    Ok(HittingSample {
        censored: raw.iter().map(Option::is_none).collect(),
        times: raw.iter().map(|t| t.unwrap_or(n_max)).collect(),
        n_max,
        rescale,
        seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KsResult {
    /// `sup_t |P(X >= t) - e^-t|` over the jump points.
    pub ks: f64,
    /// `sup_t |P(X >= t) - e^-t| e^t / max(t, 1)`.
    pub weighted: f64,
    pub n: usize,
}

/// Distance between the empirical survival function of `values` and
/// `e^-t`. Entries in `censored` (same length, or empty) are known only to
/// exceed their value; the supremum is then taken below the smallest
/// censoring point.
pub fn ks_exponential(values: &[f64], censored: &[bool]) -> KsResult {
    let n = values.len();
    let mut obs: Vec<f64> = values
        .iter()
        .enumerate()
        .filter(|(i, _)| !censored.get(*i).copied().unwrap_or(false))
        .map(|(_, &v)| v)
        .collect();
    let horizon = values
        .iter()
        .enumerate()
        .filter(|(i, _)| censored.get(*i).copied().unwrap_or(false))
        .map(|(_, &v)| v)
        .fold(f64::INFINITY, f64::min);
    obs.sort_by(f64::total_cmp);
    let nf = n as f64;
    let mut ks: f64 = 0.0;
    let mut weighted: f64 = 0.0;
    let mut i = 0;
    while i < obs.len() {
        let t = obs[i];
        if t > horizon {
            break;
        }
        let mut j = i;
        while j < obs.len() && obs[j] == t {
            j += 1;
        }
        // at t: #{X >= t} = n - i; just above t: n - j
        let e = (-t).exp();
        let d = ((n - i) as f64 / nf - e).abs().max(((n - j) as f64 / nf - e).abs());
        ks = ks.max(d);
        weighted = weighted.max(d / (e * t.max(1.0)));
        i = j;
    }
    KsResult { ks, weighted, n }
}

pub const MIN_HITTING_SAMPLES: usize = 10_000;

/// Kolmogorov-Smirnov comparison of the rescaled hitting times with Exp(1).
pub fn hitting_law_test(sample: &HittingSample) -> Result<KsResult> {
    let total = sample.times.len();
    let censored = sample.censored_count();
    if censored * 100 > total {
        return Err(Error::TooCensored { censored, total });
    }
    if total - censored < MIN_HITTING_SAMPLES {
        return Err(Error::InsufficientData(format!(
            "{} uncensored hitting times, need {MIN_HITTING_SAMPLES}",
            total - censored
        )));
    }
    let scaled: Vec<f64> = sample.times.iter().map(|&t| t as f64 * sample.rescale).collect();
    Ok(ks_exponential(&scaled, &sample.censored))
}
