//! Neural-network learning control laboratory.
//!
//! Gaussian RBF networks trained online inside a backstepping tracking
//! loop, either by a gradient (Lyapunov) update law or by selective-memory
//! recursive least squares. The crate covers the approximator, the learner
//! state, the control laws, the inverted pendulum-cart plant with its
//! reference trajectories, a fixed-step closed-loop simulator and the
//! scenario harness that writes traces, snapshots and manifests.

pub mod control;
pub mod dynamics;
mod error;
pub mod io;
pub mod rbf;
pub mod scenario;
pub mod simulation;
pub mod smrls;

pub use control::{BacksteppingGains, Controller, KnowledgeSnapshot, Learner, LearnerKind};
pub use dynamics::{Normalization, PendulumParams, PendulumPlant, Plant, ReferenceSample, Trajectory, TrajectoryShape};
pub use error::{Error, Result};
pub use rbf::{AxisSpec, LatticeSpec, RbfNetwork};
pub use scenario::{Column, Hyperparameters, Method, RunManifest, ScenarioId, ScenarioSpec};
pub use simulation::{Metrics, SimConfig, Trace, TraceRow};
pub use smrls::{PartitionGrid, SmrlsState};
