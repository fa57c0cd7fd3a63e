//! Built-in scenarios.

use super::scenario::Scenario;

const PRESETS: &[(&str, &str, &str)] = &[
    (
        "d1N2_period2",
        "ring of two doubling maps, period-2 centers 1/3 and 2/3",
        r#"
[map]
family = "doubling"

[lattice]
d = 1
n = 2

[collision]
eps = "0.01"
centers = [["1/3", "2/3"]]

[run]
seed = 20240601
trajectories = 200000
bins = 256
qk_samples = 1000000
"#,
    ),
    (
        "d1N3_period2",
        "ring of three doubling maps, period-2 centers",
        r#"
[map]
family = "doubling"

[lattice]
d = 1
n = 3

[collision]
eps = "0.02"
centers = [["1/3", "2/3"]]

[run]
seed = 20240602
trajectories = 200000
bins = 64
qk_samples = 1000000
"#,
    ),
    (
        "d1N4_period2",
        "ring of four doubling maps, period-2 centers, hitting-time test",
        r#"
[map]
family = "doubling"

[lattice]
d = 1
n = 4

[collision]
eps = "0.01"
centers = [["1/3", "2/3"]]

[run]
seed = 20240603
trajectories = 200000
qk_samples = 1000000
hitting_samples = 20000
"#,
    ),
    (
        "d1N4_nonperiodic",
        "ring of four doubling maps, non-periodic centers 1/10 and 9/10",
        r#"
[map]
family = "doubling"

[lattice]
d = 1
n = 4

[collision]
eps = "0.01"
centers = [["1/10", "9/10"]]

[run]
seed = 20240604
trajectories = 200000
qk_samples = 1000000
"#,
    ),
    (
        "d2N2_mixed",
        "2x2 torus, centers 1/3, 2/3 along e0 and 1/5, 4/5 along e1",
        r#"
[map]
family = "doubling"

[lattice]
d = 2
n = 2

[collision]
eps = "0.01"
centers = [["1/3", "2/3"], ["1/5", "4/5"]]

[run]
seed = 20240605
trajectories = 100000
qk_samples = 1000000
"#,
    ),
    (
        "d1N2_eps0",
        "ring of two doubling maps without collisions",
        r#"
[map]
family = "doubling"

[lattice]
d = 1
n = 2

[collision]
eps = "0"
centers = [["1/3", "2/3"]]

[run]
seed = 20240606
trajectories = 10000
bins = 64
"#,
    ),
    (
        "d1N2_perturbed",
        "ring of two smoothly perturbed doubling maps",
        r#"
[map]
family = "perturbed_doubling"
amplitude = 0.05

[lattice]
d = 1
n = 2

[collision]
eps = 0.01
centers = [[0.3333333333333333, 0.6666666666666666]]

[run]
seed = 20240607
trajectories = 100000
measure_kind = "mu0"
bins = 64
qk_samples = 200000
"#,
    ),
];

pub fn names() -> Vec<&'static str> {
    PRESETS.iter().map(|p| p.0).collect()
}

/// `(name, description)` pairs.
pub fn list() -> Vec<(&'static str, &'static str)> {
    PRESETS.iter().map(|p| (p.0, p.1)).collect()
}

pub fn preset_text(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|p| p.0 == name).map(|p| p.2.trim_start())
}

pub fn preset(name: &str) -> Option<Scenario> {
    preset_text(name).map(|t| toml::from_str(t).expect("built-in preset parses"))
}
