//! Collision-coupled map lattices: closed-form extremal index and collision
//! rates, checked against Monte Carlo trajectories and an Ulam discretization
//! of the rare-event transfer operator.

pub mod collision;
pub mod error;
pub mod harness;
pub mod lattice;
pub mod monte_carlo;
pub mod number;
pub mod rate;
pub mod site_map;
pub mod ulam;

pub use error::{Error, Result};
