//! Fixtures shared by the benchmarks.

use rtpl_core::dynamics::TrajectorySpec;
use rtpl_core::{Column, LatticeSpec, PartitionGrid, RbfNetwork, ScenarioId, ScenarioSpec, SmrlsState};

/// 5×5 lattice over `[-1, 1]²` with the given width.
pub fn lattice_network(width: f64) -> RbfNetwork {
    RbfNetwork::lattice(&LatticeSpec::square(-1.0, 1.0, 5), width).expect("valid lattice")
}

/// Fresh memory with the default 100×100 grid.
pub fn memory(neurons: usize) -> SmrlsState {
    SmrlsState::new(
        100.0,
        neurons,
        PartitionGrid::square(-1.0, 1.0, 100).expect("valid grid"),
    )
    .expect("valid memory")
}

/// Points on a slowly drifting loop, deterministic and spread over the grid.
pub fn input_stream(len: usize) -> Vec<[f64; 2]> {
    (0..len)
        .map(|k| {
            let t = k as f64 * 0.005;
            [0.9 * t.sin(), 0.9 * (1.3 * t).cos()]
        })
        .collect()
}

/// Scenario A, column a, shortened to `duration` seconds.
pub fn short_scenario(duration: f64) -> ScenarioSpec {
    let mut spec = ScenarioSpec::preset(ScenarioId::A, Column::A, 1).expect("preset");
    spec.duration = duration;
    spec.trajectory = TrajectorySpec::Sinusoid { duration };
    spec.reuse_trajectory = spec.trajectory;
    spec.extraction_window = spec.extraction_window.min(duration);
    spec
}
