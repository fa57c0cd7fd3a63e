//! Periodic lattice `Z^d / (N Z)^d` with row-major site numbering.

use std::fmt;

use crate::error::{Error, Result};

/// A lattice direction `+e_axis` or `-e_axis`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Direction {
    pub axis: usize,
    pub positive: bool,
}

impl Direction {
    pub fn plus(axis: usize) -> Self {
        Direction {
            axis,
            positive: true,
        }
    }

    pub fn minus(axis: usize) -> Self {
        Direction {
            axis,
            positive: false,
        }
    }

    pub fn opposite(self) -> Self {
        Direction {
            axis: self.axis,
            positive: !self.positive,
        }
    }

    /// Dense index in `0..2d`: `+e_i -> 2i`, `-e_i -> 2i + 1`.
    pub fn zone_index(self) -> usize {
        2 * self.axis + usize::from(!self.positive)
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}e{}", if self.positive { '+' } else { '-' }, self.axis)
    }
}

/// A pair `(p, v)` with `v` in the positive direction set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CollisionPair {
    pub site: usize,
    pub axis: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LatticeSpec {
    d: usize,
    n: usize,
    sites: usize,
    /// `neighbors[p * d + axis]` is the index of `p + e_axis`.
    plus: Vec<usize>,
    minus: Vec<usize>,
}

impl LatticeSpec {
    pub fn new(d: usize, n: usize) -> Result<Self> {
        if d == 0 {
            return Err(Error::config("lattice.d", "dimension must be at least 1"));
        }
        if n < 2 {
            return Err(Error::config(
                "lattice.n",
                "period must be at least 2 (with N = 1 no collision is possible)",
            ));
        }
        let sites = (n as u64)
            .checked_pow(d as u32)
            .filter(|&s| s <= 1 << 24)
            .ok_or_else(|| Error::config("lattice", "N^d exceeds 2^24 sites"))?
            as usize;
        let mut spec = LatticeSpec {
            d,
            n,
            sites,
            plus: Vec::with_capacity(sites * d),
            minus: Vec::with_capacity(sites * d),
        };
        for p in 0..sites {
            let coords = spec.coords(p);
            for axis in 0..d {
                let mut c = coords.clone();
                c[axis] = (coords[axis] + 1) % n;
                spec.plus.push(spec.index(&c));
                c[axis] = (coords[axis] + n - 1) % n;
                spec.minus.push(spec.index(&c));
            }
        }
        Ok(spec)
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of sites `L = N^d`.
    pub fn sites(&self) -> usize {
        self.sites
    }

    pub fn directions_plus(&self) -> Vec<Direction> {
        (0..self.d).map(Direction::plus).collect()
    }

    pub fn directions_all(&self) -> Vec<Direction> {
        (0..self.d)
            .flat_map(|a| [Direction::plus(a), Direction::minus(a)])
            .collect()
    }

    /// Row-major coordinates: the first coordinate is the most significant.
    pub fn coords(&self, p: usize) -> Vec<usize> {
        let mut out = vec![0; self.d];
        let mut rest = p;
        for axis in (0..self.d).rev() {
            out[axis] = rest % self.n;
            rest /= self.n;
        }
        out
    }

    pub fn index(&self, coords: &[usize]) -> usize {
        coords.iter().fold(0, |acc, &c| acc * self.n + c % self.n)
    }

    /// Flattened index of `p + v`, coordinates taken mod `N`.
    #[inline]
    pub fn neighbor(&self, p: usize, v: Direction) -> usize {
        let slot = p * self.d + v.axis;
        if v.positive {
            self.plus[slot]
        } else {
            self.minus[slot]
        }
    }

    /// All `L * d` pairs `(p, e_axis)`, sites in lexicographic order, then
    /// axis. This is the fixed total order used by inclusion-exclusion.
    pub fn enumerate_collision_pairs(&self) -> Vec<CollisionPair> {
        (0..self.sites)
            .flat_map(|site| (0..self.d).map(move |axis| CollisionPair { site, axis }))
            .collect()
    }

    pub(crate) fn plus_table(&self) -> &[usize] {
        &self.plus
    }
}
