//! Ulam discretization of the rare-event transfer operator on `[0,1]^L`.
//!
//! The grid is the same on every axis and contains every branch endpoint
//! and zone endpoint, so each product cell lies either inside the collision
//! set or outside it. Because the uncoupled map is a product, its Ulam
//! matrix is the Kronecker product of one 1D matrix per site; the operator
//! is applied axis by axis and never stored densely.

use std::fmt::Write as _;
use std::io::Write;

use rayon::prelude::*;

use crate::collision::{CollisionIndex, CollisionSpec, NO_ZONE};
use crate::error::{Error, Result};
use crate::lattice::LatticeSpec;
use crate::site_map::{SiteMap, Transition1d};

pub const MAX_SITES: usize = 3;
pub const MIN_BINS: usize = 32;
pub const MAX_CELLS: usize = 10_000_000;

/// Breakpoints closer than this are merged.
const MERGE_TOL: f64 = 1e-14;

#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    /// Shared axis breakpoints, starting at 0 and ending at 1.
    pub breakpoints: Vec<f64>,
    /// Number of axes (lattice sites).
    pub sites: usize,
    pub bins: usize,
}

impl GridSpec {
    pub fn axis_cells(&self) -> usize {
        self.breakpoints.len() - 1
    }

    pub fn cells(&self) -> usize {
        self.axis_cells().pow(self.sites as u32)
    }

    pub fn axis_widths(&self) -> Vec<f64> {
        self.breakpoints.windows(2).map(|w| w[1] - w[0]).collect()
    }
}

/// Uniform bins refined by the branch and zone endpoints.
pub fn build_grid(
    map: &SiteMap,
    cspec: &CollisionSpec,
    lattice: &LatticeSpec,
    bins_per_axis: usize,
) -> Result<GridSpec> {
    let sites = lattice.sites();
    if sites > MAX_SITES {
        return Err(Error::TooLarge(format!(
            "Ulam grids support at most {MAX_SITES} sites, lattice has {sites}"
        )));
    }
    if bins_per_axis < MIN_BINS {
        return Err(Error::config("run.bins", format!("need at least {MIN_BINS} bins per axis")));
    }
    let mut pts: Vec<f64> = (0..=bins_per_axis).map(|i| i as f64 / bins_per_axis as f64).collect();
    pts.extend_from_slice(map.endpoints());
    if !cspec.is_empty() {
        for &(lo, hi) in cspec.zones() {
            pts.push(lo);
            pts.push(hi);
        }
    }
    pts.sort_by(f64::total_cmp);
    // keep exact zone and branch endpoints when merging near-duplicates
    let special: Vec<f64> = map
        .endpoints()
        .iter()
        .copied()
        .chain(cspec.zones().iter().flat_map(|&(lo, hi)| [lo, hi]))
        .collect();
    let mut merged: Vec<f64> = Vec::with_capacity(pts.len());
    for p in pts {
        match merged.last_mut() {
            Some(last) if p - *last <= MERGE_TOL => {
                if special.contains(&p) {
                    *last = p;
                }
            }
            _ => merged.push(p),
        }
    }
    let grid = GridSpec {
        breakpoints: merged,
        sites,
        bins: bins_per_axis,
    };
    let cells = (grid.axis_cells() as f64).powi(sites as i32);
    if cells > MAX_CELLS as f64 {
        return Err(Error::TooLarge(format!("{cells} cells exceed the budget of {MAX_CELLS}")));
    }
    Ok(grid)
}

/// Matrix of `P_{T_0}(1_{X^0} f)` on cell masses, stored as one 1D
/// transition matrix plus the hole mask.
#[derive(Debug, Clone)]
pub struct SparseOperator {
    pub grid: GridSpec,
    cols: Transition1d,
    /// `rows[r]` lists `(c, w)`: fraction `w` of axis cell `c` lands in `r`.
    rows: Vec<Vec<(u32, f64)>>,
    /// True for cells inside the collision set.
    hole: Vec<bool>,
    column_mass: Vec<f64>,
    volumes: Vec<f64>,
}

/// Row-major flat index to per-axis indices (first axis slowest).
fn unflatten(mut c: usize, n: usize, sites: usize, out: &mut [usize]) {
    for k in (0..sites).rev() {
        out[k] = c % n;
        c /= n;
    }
}

pub fn assemble(
    grid: &GridSpec,
    map: &SiteMap,
    cspec: &CollisionSpec,
    lattice: &LatticeSpec,
) -> Result<SparseOperator> {
    if grid.sites != lattice.sites() {
        return Err(Error::config("grid", "grid dimension differs from the lattice size"));
    }
    let n = grid.axis_cells();
    let cols = map.transition_fractions(&grid.breakpoints);
    let mut rows: Vec<Vec<(u32, f64)>> = vec![Vec::new(); n];
    for (c, col) in cols.cols.iter().enumerate() {
        for &(r, w) in col {
            rows[r as usize].push((c as u32, w));
        }
    }
    let col_sum: Vec<f64> = cols.cols.iter().map(|col| col.iter().map(|e| e.1).sum()).collect();
    let widths = grid.axis_widths();
    let index = CollisionIndex::new(cspec, lattice);
    let axis_code: Vec<u8> = grid
        .breakpoints
        .windows(2)
        .map(|w| index.code(0.5 * (w[0] + w[1])))
        .collect();
    let sites = grid.sites;
    let total = grid.cells();
    let per_cell: Vec<(bool, f64, f64)> = (0..total)
        .into_par_iter()
        .with_min_len(4096)
        .map(|c| {
            let mut idx = [0usize; MAX_SITES];
            unflatten(c, n, sites, &mut idx[..sites]);
            let mut codes = [NO_ZONE; MAX_SITES];
            let mut vol = 1.0;
            let mut mass = 1.0;
            for k in 0..sites {
                codes[k] = axis_code[idx[k]];
                vol *= widths[idx[k]];
                mass *= col_sum[idx[k]];
            }
            let inside = !cspec.is_empty() && index.hits_codes(&codes[..sites]);
            (inside, if inside { 0.0 } else { mass }, vol)
        })
        .collect();
    Ok(SparseOperator {
        grid: grid.clone(),
        cols,
        rows,
        hole: per_cell.iter().map(|t| t.0).collect(),
        column_mass: per_cell.iter().map(|t| t.1).collect(),
        volumes: per_cell.iter().map(|t| t.2).collect(),
    })
}

impl SparseOperator {
    pub fn dimension(&self) -> usize {
        self.volumes.len()
    }

    pub fn column_mass(&self) -> &[f64] {
        &self.column_mass
    }

    pub fn cell_volumes(&self) -> &[f64] {
        &self.volumes
    }

    pub fn hole(&self) -> &[bool] {
        &self.hole
    }

    /// Lebesgue measure of the cells inside the collision set.
    pub fn hole_volume(&self) -> f64 {
        self.volumes
            .iter()
            .zip(&self.hole)
            .filter(|(_, &h)| h)
            .map(|(v, _)| v)
            .sum()
    }

    pub fn nnz(&self) -> usize {
        let per_axis: usize = self.cols.cols.iter().map(Vec::len).sum();
        let n = self.grid.axis_cells();
        let open = self.hole.iter().filter(|&&h| !h).count();
        // average column density to the power L, times open columns
        ((per_axis as f64 / n as f64).powi(self.grid.sites as i32) * open as f64).round() as usize
    }

    fn apply_axis(&self, input: &[f64], out: &mut [f64], axis: usize, transpose: bool) {
        let n = self.grid.axis_cells();
        let stride = n.pow((self.grid.sites - 1 - axis) as u32);
        let table: &[Vec<(u32, f64)>] = if transpose { &self.cols.cols } else { &self.rows };
        out.par_chunks_mut(stride)
            .with_min_len((4096 / stride).max(1))
            .enumerate()
            .for_each(|(q, chunk)| {
                let (outer, r) = (q / n, q % n);
                let base = outer * n * stride;
                chunk.iter_mut().for_each(|v| *v = 0.0);
                for &(c, w) in &table[r] {
                    let src = &input[base + c as usize * stride..base + (c as usize + 1) * stride];
                    for (o, s) in chunk.iter_mut().zip(src) {
                        *o += w * s;
                    }
                }
            });
    }

    /// Push a mass vector forward: zero the hole cells, then apply the 1D
    /// matrix along every axis.
    pub fn apply(&self, mass: &[f64]) -> Vec<f64> {
        let mut cur: Vec<f64> = mass
            .iter()
            .zip(&self.hole)
            .map(|(&m, &h)| if h { 0.0 } else { m })
            .collect();
        let mut next = vec![0.0; cur.len()];
        for axis in 0..self.grid.sites {
            self.apply_axis(&cur, &mut next, axis, false);
            std::mem::swap(&mut cur, &mut next);
        }
        cur
    }

    /// Adjoint of [`Self::apply`] with respect to the plain dot product.
    pub fn apply_transpose(&self, y: &[f64]) -> Vec<f64> {
        let mut cur = y.to_vec();
        let mut next = vec![0.0; cur.len()];
        for axis in 0..self.grid.sites {
            self.apply_axis(&cur, &mut next, axis, true);
            std::mem::swap(&mut cur, &mut next);
        }
        cur.iter_mut().zip(&self.hole).for_each(|(v, &h)| {
            if h {
                *v = 0.0;
            }
        });
        cur
    }

    /// `(row, col, weight)` lines for every non-zero entry.
    pub fn write_triplets<W: Write>(&self, mut w: W) -> Result<()> {
        let n = self.grid.axis_cells();
        let sites = self.grid.sites;
        writeln!(w, "# rows cols = {} {}", self.dimension(), self.dimension())?;
        let mut idx = vec![0usize; sites];
        for col in 0..self.dimension() {
            if self.hole[col] {
                continue;
            }
            unflatten(col, n, sites, &mut idx);
            let mut entries: Vec<(usize, f64)> = vec![(0, 1.0)];
            for &ci in &idx {
                entries = entries
                    .iter()
                    .flat_map(|&(r, wt)| self.cols.cols[ci].iter().map(move |&(rr, w1)| (r * n + rr as usize, wt * w1)))
                    .collect();
            }
            entries.sort_by_key(|e| e.0);
            for (r, wt) in entries {
                writeln!(w, "{r} {col} {wt:e}")?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralResult {
    pub lambda: f64,
    /// Eigenfunction as a density on cells, integrating to 1.
    pub rho: Vec<f64>,
    pub gap_proxy: f64,
    pub iterations: usize,
    pub residual: f64,
}

impl SpectralResult {
    pub fn kv_block(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<20} = {:<24} # Ulam power iteration", "lambda_ulam", self.lambda);
        let _ = writeln!(s, "{:<20} = {:<24} # Ulam power iteration", "rate_ulam", -self.lambda.ln());
        let _ = writeln!(s, "{:<20} = {:<24} # deflated iteration", "gap_proxy", self.gap_proxy);
        let _ = writeln!(s, "{:<20} = {:<24} # power iteration", "iterations", self.iterations);
        let _ = writeln!(s, "{:<20} = {:<24e} # l1", "residual", self.residual);
        s
    }
}

pub const DEFAULT_TOL: f64 = 1e-12;
pub const DEFAULT_MAX_ITER: usize = 100_000;
const GAP_ITERATIONS: usize = 300;

fn l1(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}

/// Leading eigenpair by power iteration with l1 normalisation, and the
/// modulus of the next eigenvalue by deflated iteration.
pub fn leading_eigen(op: &SparseOperator, tol: f64, max_iter: usize) -> Result<SpectralResult> {
    if !(tol >= 1e-14) {
        return Err(Error::config("tol", "tolerance must be at least 1e-14"));
    }
    let vol = op.cell_volumes();
    let (mass, lambda, iterations, residual) = power(op, vol.to_vec(), tol, max_iter, false)?;
    if !(lambda > 0.0) {
        return Err(Error::NoConvergence {
            iterations,
            residual,
        });
    }
    // left eigenvector for the spectral projection
    let ones = vec![1.0; vol.len()];
    let left = match power(op, ones, tol.max(1e-10), max_iter.min(10_000), true) {
        Ok(r) => r.0,
        Err(_) => return Ok(finish(op, mass, lambda, iterations, residual, f64::NAN)),
    };
    let gap_proxy = deflated_modulus(op, &mass, &left);
    Ok(finish(op, mass, lambda, iterations, residual, gap_proxy))
}

fn finish(op: &SparseOperator, mass: Vec<f64>, lambda: f64, iterations: usize, residual: f64, gap_proxy: f64) -> SpectralResult {
    let rho = mass.iter().zip(op.cell_volumes()).map(|(m, v)| m / v).collect();
    SpectralResult {
        lambda,
        rho,
        gap_proxy,
        iterations,
        residual,
    }
}

/// Returns the l1-normalised vector, eigenvalue, iterations and residual.
fn power(
    op: &SparseOperator,
    start: Vec<f64>,
    tol: f64,
    max_iter: usize,
    transpose: bool,
) -> Result<(Vec<f64>, f64, usize, f64)> {
    let mut v = start;
    let norm = l1(&v);
    v.iter_mut().for_each(|x| *x /= norm);
    // below this the residual is rounding noise from the matvec sums
    let floor = 64.0 * f64::EPSILON * (v.len() as f64).sqrt();
    let mut residual = f64::INFINITY;
    for it in 1..=max_iter {
        let w = if transpose { op.apply_transpose(&v) } else { op.apply(&v) };
        let lambda = l1(&w);
        if lambda == 0.0 {
            return Err(Error::NoConvergence {
                iterations: it,
                residual: f64::NAN,
            });
        }
        residual = w.iter().zip(&v).map(|(a, b)| (a - lambda * b).abs()).sum::<f64>() / lambda;
        v = w.into_iter().map(|x| x / lambda).collect();
        if residual <= tol.max(floor) {
            return Ok((v, lambda, it, residual));
        }
    }
    Err(Error::NoConvergence {
        iterations: max_iter,
        residual,
    })
}

/// Growth rate of a vector kept orthogonal (in the spectral sense) to the
/// leading eigenvector.
fn deflated_modulus(op: &SparseOperator, right: &[f64], left: &[f64]) -> f64 {
    let denom: f64 = left.iter().zip(right).map(|(a, b)| a * b).sum();
    let project = |z: &mut Vec<f64>| {
        let c: f64 = left.iter().zip(z.iter()).map(|(a, b)| a * b).sum::<f64>() / denom;
        z.iter_mut().zip(right).for_each(|(x, r)| *x -= c * r);
    };
    // deterministic pseudo-random start
    let mut state = 0x2545_F491_4F6C_DD1Du64;
    let mut z: Vec<f64> = op
        .cell_volumes()
        .iter()
        .map(|v| {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            v * ((state >> 11) as f64 / (1u64 << 53) as f64 - 0.5)
        })
        .collect();
    project(&mut z);
    let mut logs = Vec::with_capacity(GAP_ITERATIONS);
    for _ in 0..GAP_ITERATIONS {
        let before = l1(&z);
        if before == 0.0 || !before.is_finite() {
            return 0.0;
        }
        z.iter_mut().for_each(|x| *x /= before);
        let mut next = op.apply(&z);
        project(&mut next);
        let after = l1(&next);
        if after == 0.0 {
            return 0.0;
        }
        logs.push(after.ln());
        z = next;
    }
    // geometric mean over the second half smooths complex pairs
    let tail = &logs[logs.len() / 2..];
    (tail.iter().sum::<f64>() / tail.len() as f64).exp()
}

/// `int P^n 1` for the discretized constant density.
pub fn survival_via_operator(op: &SparseOperator, n: usize) -> f64 {
    survival_curve_operator(op, n)[n]
}

/// `int P^k 1` for `k = 0..=n`.
pub fn survival_curve_operator(op: &SparseOperator, n: usize) -> Vec<f64> {
    let mut mass = op.cell_volumes().to_vec();
    let mut out = Vec::with_capacity(n + 1);
    out.push(mass.iter().sum());
    for _ in 0..n {
        mass = op.apply(&mass);
        out.push(mass.iter().sum());
    }
    out
}
