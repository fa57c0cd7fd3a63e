//! Scenario files: a TOML document with `[map]`, `[lattice]`,
//! `[collision]` and `[run]` tables.
//!
//! ```toml
//! [map]
//! family = "doubling"
//!
//! [lattice]
//! d = 1
//! n = 2
//!
//! [collision]
//! eps = "0.01"
//! centers = [["1/3", "2/3"]]
//!
//! [run]
//! seed = 7
//! trajectories = 100000
//! bins = 256
//! ```
//!
//! Quoted numbers are read exactly; bare floats stay floats.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::collision::CollisionSpec;
use crate::error::{Error, Result};
use crate::lattice::LatticeSpec;
use crate::monte_carlo::{MeasureKind, System};
use crate::number::Number;
use crate::rate::DEFAULT_K_MAX;
use crate::site_map::{invariant_density, InvariantDensity, Orientation, SiteMap};

use super::presets;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum MapConfig {
    Doubling,
    Tent,
    /// `x -> m x mod 1`.
    Uniform {
        branches: u32,
    },
    Affine {
        endpoints: Vec<Number>,
        orientations: Vec<Orientation>,
    },
    PerturbedDoubling {
        amplitude: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeConfig {
    pub d: usize,
    #[serde(alias = "N")]
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CollisionConfig {
    pub eps: Number,
    /// `[a_{+e_i}, a_{-e_i}]` for each axis `i`.
    pub centers: Vec<[Number; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub trajectories: u64,
    /// Survival horizon; derived from the predicted rate when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_max: Option<u64>,
    /// Ulam bins per axis; no Ulam run when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bins: Option<usize>,
    pub k_max: usize,
    pub measure_kind: MeasureKind,
    /// Start the survival trajectories outside the collision set.
    pub conditioned: bool,
    /// Samples for the return probabilities; 0 skips them.
    pub qk_samples: u64,
    /// Hitting times for the exponential-law test; 0 skips it.
    pub hitting_samples: u64,
    /// Resolution of the tabulated invariant density for smooth maps.
    pub density_bins: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            trajectories: 100_000,
            n_max: None,
            bins: None,
            k_max: DEFAULT_K_MAX,
            measure_kind: MeasureKind::Lebesgue,
            conditioned: false,
            qk_samples: 0,
            hitting_samples: 0,
            density_bins: 4096,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub map: MapConfig,
    pub lattice: LatticeConfig,
    pub collision: CollisionConfig,
    #[serde(default)]
    pub run: RunConfig,
}

/// A validated scenario with its numerical objects.
#[derive(Debug, Clone)]
pub struct Built {
    pub map: SiteMap,
    pub cspec: CollisionSpec,
    pub lattice: LatticeSpec,
    pub h: InvariantDensity,
}

impl Built {
    pub fn system(&self) -> System<'_> {
        System {
            map: &self.map,
            cspec: &self.cspec,
            lattice: &self.lattice,
            h: &self.h,
        }
    }
}

impl Scenario {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let s: Scenario = toml::from_str(text).map_err(|e| {
            let field = e
                .span()
                .and_then(|sp| text.get(..sp.start))
                .and_then(|before| before.lines().last())
                .and_then(|line| line.split('=').next())
                .map(|k| k.trim().trim_matches(['[', ']']).to_string())
                .filter(|k| !k.is_empty())
                .unwrap_or_else(|| "config".into());
            Error::config(field, e.message().to_string())
        })?;
        s.build()?;
        Ok(s)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("config", e.to_string()))
    }

    /// Reads a scenario file, or a preset when no such file exists.
    pub fn load(path_or_preset: &str) -> Result<Self> {
        let path = Path::new(path_or_preset);
        if path.is_file() {
            let text = std::fs::read_to_string(path)?;
            return Self::from_toml_str(&text);
        }
        match presets::preset(path_or_preset) {
            Some(s) => Ok(s),
            None => Err(Error::config(
                "config",
                format!(
                    "`{path_or_preset}` is neither a file nor a preset (presets: {})",
                    presets::names().join(", ")
                ),
            )),
        }
    }

    /// Checks every module precondition and constructs the objects.
    pub fn build(&self) -> Result<Built> {
        let map = match &self.map {
            MapConfig::Doubling => SiteMap::doubling(),
            MapConfig::Tent => SiteMap::tent(),
            MapConfig::Uniform { branches } => SiteMap::uniform_branches(*branches)?,
            MapConfig::Affine {
                endpoints,
                orientations,
            } => SiteMap::affine(endpoints.clone(), orientations.clone())?,
            MapConfig::PerturbedDoubling { amplitude } => SiteMap::perturbed_doubling(*amplitude)?,
        };
        let lattice = LatticeSpec::new(self.lattice.d, self.lattice.n)?;
        if self.collision.centers.len() != self.lattice.d {
            return Err(Error::config(
                "collision.centers",
                format!(
                    "{} center pairs given for a {}-dimensional lattice",
                    self.collision.centers.len(),
                    self.lattice.d
                ),
            ));
        }
        let centers = self
            .collision
            .centers
            .iter()
            .map(|[p, m]| (p.clone(), m.clone()))
            .collect();
        let cspec = CollisionSpec::new(self.collision.eps.clone(), centers, &map)?;
        let run = &self.run;
        if run.trajectories < 1000 {
            return Err(Error::config("run.trajectories", "need at least 1000 trajectories"));
        }
        if run.n_max == Some(0) {
            return Err(Error::config("run.n_max", "must be at least 1"));
        }
        if run.k_max == 0 {
            return Err(Error::config("run.k_max", "must be at least 1"));
        }
        if let Some(b) = run.bins {
            if b < crate::ulam::MIN_BINS {
                return Err(Error::config(
                    "run.bins",
                    format!("need at least {} bins per axis", crate::ulam::MIN_BINS),
                ));
            }
            if lattice.sites() > crate::ulam::MAX_SITES {
                return Err(Error::config(
                    "run.bins",
                    format!("Ulam runs need at most {} sites", crate::ulam::MAX_SITES),
                ));
            }
        }
        let h = if map.is_affine() {
            InvariantDensity::uniform()
        } else {
            invariant_density(&map, run.density_bins)
                .map_err(|e| Error::config("run.density_bins", e.to_string()))?
        };
        Ok(Built {
            map,
            cspec,
            lattice,
            h,
        })
    }
}
