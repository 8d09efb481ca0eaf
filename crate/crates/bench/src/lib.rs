// SPDX-License-Identifier: Apache-2.0

//! Inputs shared by the criterion benchmarks.

use qcclosure_core::dynamics::Closure;
use qcclosure_core::{build_state, ClosureState, RunConfig};

const SPIN_BOSON: &str = include_str!("../../../fixtures/spin_boson.toml");

/// The reference spin-boson ensemble with `n` trajectories, run deterministically.
pub fn spin_boson(n: usize, model: &str) -> (Closure, ClosureState) {
    let overrides = [
        format!("N={n}"),
        format!("model=\"{model}\""),
        "deterministic=true".into(),
    ];
    let cfg = RunConfig::from_toml_with_overrides(SPIN_BOSON, &overrides).expect("fixture parses");
    let closure = Closure::from_config(&cfg).expect("fixture closure");
    let state = build_state(&cfg).expect("fixture state");
    (closure, state)
}

#[cfg(test)]
mod tests {
    #[test]
    fn fixture_loads_for_every_model() {
        for model in ["ehrenfest", "meanfield", "regularized"] {
            let (closure, state) = super::spin_boson(4, model);
            assert_eq!(state.n_trajectories(), 4);
            closure.rhs(&state).unwrap();
        }
    }
}
