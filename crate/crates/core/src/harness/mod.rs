//! Scenario files, presets, orchestration, persistence and figures.

pub mod plot;
pub mod presets;
pub mod run;
pub mod scenario;

pub use plot::{emit_plot, PlotKind};
pub use run::{run_scenario, sweep, write_outputs, RunOutput, SweepAxis, SweepResult};
pub use scenario::{Built, Scenario};
