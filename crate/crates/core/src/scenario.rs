//! Scenario configuration and orchestration.
//!
//! A scenario is one learning phase (PD, SGDL and RTPL run side by side on
//! the same plant and reference), knowledge extraction, and a reuse phase
//! in which the extracted weights drive frozen feedforward controllers.
//! The four presets are:
//!
//! | id | learning reference | learning plant | reuse |
//! |----|--------------------|----------------|-------|
//! | A  | `sin t`            | nominal        | same reference, nominal plant |
//! | B  | random spline      | nominal        | same reference, nominal plant |
//! | C  | `sin t`            | `l = 0.8` from 50 s | same reference, `l = 0.8` |
//! | D  | random spline, 300 s | nominal      | growing sinusoid, checkpoints every 30 s |
//!
//! Every field of a preset can be overridden from a TOML file; a `custom`
//! scenario must at least name its trajectory. See [`validate_config`] for
//! the schema.

use std::collections::BTreeSet;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::DVector;
use rayon::prelude::*;
use toml::{Table, Value};

use crate::control::{
    extract_final, extract_integral, BacksteppingGains, Controller, KnowledgeSnapshot, Learner, LearnerKind,
};
use crate::dynamics::{LengthStep, Normalization, PendulumParams, PendulumPlant, Trajectory, TrajectorySpec};
use crate::io::{trace_to_csv, write_file, SnapshotFile};
use crate::rbf::{LatticeSpec, RbfNetwork};
use crate::simulation::{run_closed_loop, Metrics, SimConfig, Trace};
use crate::smrls::{PartitionGrid, SmrlsState};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ScenarioId {
    /// Repetitive task.
    A,
    /// Nonrepetitive task.
    B,
    /// Parameter perturbation during learning.
    C,
    /// Generalization and knowledge accumulation.
    D,
    Custom,
}

impl ScenarioId {
    pub fn as_str(&self) -> &'static str {
        match self {
            ScenarioId::A => "A",
            ScenarioId::B => "B",
            ScenarioId::C => "C",
            ScenarioId::D => "D",
            ScenarioId::Custom => "custom",
        }
    }
}

impl fmt::Display for ScenarioId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScenarioId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a" => Ok(ScenarioId::A),
            "b" => Ok(ScenarioId::B),
            "c" => Ok(ScenarioId::C),
            "d" => Ok(ScenarioId::D),
            "custom" => Ok(ScenarioId::Custom),
            _ => Err(Error::parse(
                "scenario",
                format!("unknown scenario `{s}` (A, B, C, D or custom)"),
            )),
        }
    }
}

/// Hyperparameter column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Column {
    A,
    B,
    C,
}

impl Column {
    pub fn as_str(&self) -> &'static str {
        match self {
            Column::A => "a",
            Column::B => "b",
            Column::C => "c",
        }
    }

    pub fn hyperparameters(self) -> Hyperparameters {
        let (sigma, gamma) = match self {
            Column::A => (0.3, 0.1),
            Column::B => (2.0, 0.005),
            Column::C => (0.5, 0.05),
        };
        Hyperparameters {
            sigma,
            gamma,
            eta0: 5.0,
            ramp: 2.0,
            p0: 100.0,
            lattice: 5,
            partitions: 100,
        }
    }
}

impl fmt::Display for Column {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Column {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a" => Ok(Column::A),
            "b" => Ok(Column::B),
            "c" => Ok(Column::C),
            _ => Err(Error::parse("column", format!("unknown column `{s}` (a, b or c)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hyperparameters {
    /// Receptive field width of every neuron.
    pub sigma: f64,
    /// SGDL gain, `Γ = gamma·I`.
    pub gamma: f64,
    pub eta0: f64,
    /// Length `T0` of the learning-rate ramp, s.
    pub ramp: f64,
    pub p0: f64,
    /// Neurons per input axis over `[-1, 1]`.
    pub lattice: usize,
    /// Memory partitions per input axis over `[-1, 1]`.
    pub partitions: usize,
}

/// What a scenario runs. `Frozen` requests the reuse phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Pd,
    Sgdl,
    Rtpl,
    Frozen,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Pd, Method::Sgdl, Method::Rtpl, Method::Frozen];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Pd => "pd",
            Method::Sgdl => "sgdl",
            Method::Rtpl => "rtpl",
            Method::Frozen => "frozen",
        }
    }

    fn learner(self) -> Option<LearnerKind> {
        match self {
            Method::Pd => Some(LearnerKind::Pd),
            Method::Sgdl => Some(LearnerKind::Sgdl),
            Method::Rtpl => Some(LearnerKind::Rtpl),
            Method::Frozen => None,
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pd" => Ok(Method::Pd),
            "sgdl" => Ok(Method::Sgdl),
            "rtpl" => Ok(Method::Rtpl),
            "frozen" => Ok(Method::Frozen),
            _ => Err(Error::parse(
                "method",
                format!("unknown method `{s}` (pd, sgdl, rtpl or frozen)"),
            )),
        }
    }
}

/// Fully resolved scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    pub id: ScenarioId,
    pub column: Column,
    pub hyper: Hyperparameters,
    /// Sorted, without duplicates.
    pub methods: Vec<Method>,
    pub seed: u64,
    pub out: PathBuf,
    /// Length of the learning phase, s.
    pub duration: f64,
    pub dt: f64,
    pub substeps: usize,
    /// SGDL knowledge is the weight average over this final window, s
    /// (default 5, capped at the learning duration).
    pub extraction_window: f64,
    /// Snapshot and evaluate the learners at this period, s.
    pub checkpoint_interval: Option<f64>,
    pub trajectory: TrajectorySpec,
    pub reuse_trajectory: TrajectorySpec,
    pub plant: PendulumPlant,
    pub reuse_plant: PendulumPlant,
}

/// Command-line values layered over a configuration file.
#[derive(Debug, Clone, Default)]
pub struct ConfigOverrides {
    pub scenario: Option<ScenarioId>,
    pub column: Option<Column>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub duration: Option<f64>,
}

const TOP_KEYS: &[&str] = &[
    "scenario",
    "column",
    "seed",
    "out",
    "duration",
    "methods",
    "dt",
    "substeps",
    "extraction_window",
    "checkpoint_interval",
    "hyper",
    "trajectory",
    "reuse_trajectory",
    "plant",
    "reuse_plant",
];
const HYPER_KEYS: &[&str] = &["sigma", "gamma", "eta0", "ramp", "p0", "lattice", "partitions"];
const TRAJECTORY_KEYS: &[&str] = &["kind", "seed", "knots", "duration"];
const PLANT_KEYS: &[&str] = &["half_length", "step_at", "step_half_length"];

/// Parse and check a TOML configuration.
///
/// ```toml
/// scenario = "A"            # A | B | C | D | custom   (required)
/// column = "a"              # a | b | c, default a
/// seed = 1
/// out = "out/a"
/// duration = 100.0          # learning phase, s (D: 300)
/// methods = ["pd", "sgdl", "rtpl", "frozen"]
/// dt = 0.005
/// substeps = 1
/// extraction_window = 5.0
/// checkpoint_interval = 30.0  # D only by default
///
/// [hyper]                   # overrides of the column values
/// sigma = 0.3
/// gamma = 0.1
/// eta0 = 5.0
/// ramp = 2.0
/// p0 = 100.0
/// lattice = 5
/// partitions = 100
///
/// [trajectory]              # required for custom
/// kind = "spline"           # sinusoid | growing_sinusoid | spline
/// seed = 7
/// knots = 20
/// duration = 100.0
///
/// [reuse_trajectory]        # same keys
///
/// [plant]                   # and [reuse_plant]
/// half_length = 0.2
/// step_at = 50.0
/// step_half_length = 0.8
/// ```
///
/// All problems are reported at once, each prefixed by its key path.
pub fn validate_config(text: &str) -> Result<ScenarioSpec> {
    resolve(text, &ConfigOverrides::default())
}

/// [`validate_config`] with command-line overrides applied on top.
pub fn resolve(text: &str, overrides: &ConfigOverrides) -> Result<ScenarioSpec> {
    let table: Table = toml::from_str(text).map_err(|e| Error::Config(vec![format!("syntax: {}", e.message())]))?;
    resolve_table(&table, overrides)
}

struct Checker {
    errors: Vec<String>,
}

fn loc(prefix: &str, key: &str) -> String {
    if prefix.is_empty() {
        key.to_string()
    } else {
        format!("{prefix}.{key}")
    }
}

impl Checker {
    fn err(&mut self, at: String, msg: impl fmt::Display) {
        self.errors.push(format!("`{at}`: {msg}"));
    }

    fn unknown_keys(&mut self, t: &Table, allowed: &[&str], prefix: &str) {
        for key in t.keys() {
            if !allowed.contains(&key.as_str()) {
                self.err(loc(prefix, key), "unknown key");
            }
        }
    }

    fn float(&mut self, t: &Table, key: &str, prefix: &str) -> Option<f64> {
        match t.get(key)? {
            Value::Float(v) => Some(*v),
            Value::Integer(v) => Some(*v as f64),
            other => {
                self.err(
                    loc(prefix, key),
                    format!("expected a number, found {}", other.type_str()),
                );
                None
            }
        }
    }

    fn positive(&mut self, t: &Table, key: &str, prefix: &str) -> Option<f64> {
        let v = self.float(t, key, prefix)?;
        if v > 0.0 && v.is_finite() {
            Some(v)
        } else {
            self.err(loc(prefix, key), format!("must be positive and finite, got {v}"));
            None
        }
    }

    fn integer(&mut self, t: &Table, key: &str, prefix: &str, min: i64) -> Option<u64> {
        match t.get(key)? {
            Value::Integer(v) if *v >= min => Some(*v as u64),
            Value::Integer(v) => {
                self.err(loc(prefix, key), format!("must be at least {min}, got {v}"));
                None
            }
            other => {
                self.err(
                    loc(prefix, key),
                    format!("expected an integer, found {}", other.type_str()),
                );
                None
            }
        }
    }

    fn string<'a>(&mut self, t: &'a Table, key: &str, prefix: &str) -> Option<&'a str> {
        match t.get(key)? {
            Value::String(s) => Some(s),
            other => {
                self.err(
                    loc(prefix, key),
                    format!("expected a string, found {}", other.type_str()),
                );
                None
            }
        }
    }

    fn parsed<T: FromStr<Err = Error>>(&mut self, t: &Table, key: &str, prefix: &str) -> Option<T> {
        let s = self.string(t, key, prefix)?;
        match s.parse() {
            Ok(v) => Some(v),
            Err(e) => {
                let msg = match e {
                    Error::Parse { message, .. } => message,
                    other => other.to_string(),
                };
                self.err(loc(prefix, key), msg);
                None
            }
        }
    }

    fn table<'a>(&mut self, t: &'a Table, key: &str) -> Option<&'a Table> {
        match t.get(key)? {
            Value::Table(inner) => Some(inner),
            other => {
                self.err(key.to_string(), format!("expected a table, found {}", other.type_str()));
                None
            }
        }
    }

    fn trajectory(&mut self, t: &Table, prefix: &str, seed: u64, duration: f64) -> Option<TrajectorySpec> {
        self.unknown_keys(t, TRAJECTORY_KEYS, prefix);
        let Some(kind) = self.string(t, "kind", prefix) else {
            if !t.contains_key("kind") {
                self.err(loc(prefix, "kind"), "missing required field");
            }
            return None;
        };
        let duration = if t.contains_key("duration") {
            self.positive(t, "duration", prefix)?
        } else {
            duration
        };
        match kind {
            "sinusoid" | "growing_sinusoid" => {
                for key in ["seed", "knots"] {
                    if t.contains_key(key) {
                        self.err(loc(prefix, key), format!("not used by a {kind} trajectory"));
                    }
                }
                Some(if kind == "sinusoid" {
                    TrajectorySpec::Sinusoid { duration }
                } else {
                    TrajectorySpec::GrowingSinusoid { duration }
                })
            }
            "spline" => {
                let seed = self.integer(t, "seed", prefix, 0).unwrap_or(seed);
                let knots = match self.integer(t, "knots", prefix, 2) {
                    Some(k) => k as usize,
                    None if t.contains_key("knots") => return None,
                    None => TrajectorySpec::default_knots(duration),
                };
                Some(TrajectorySpec::RandomSpline { seed, knots, duration })
            }
            other => {
                self.err(
                    loc(prefix, "kind"),
                    format!("unknown trajectory `{other}` (sinusoid, growing_sinusoid or spline)"),
                );
                None
            }
        }
    }

    fn plant(&mut self, t: &Table, prefix: &str) -> Option<PendulumPlant> {
        self.unknown_keys(t, PLANT_KEYS, prefix);
        let defaults = PendulumParams::default();
        let half_length = if t.contains_key("half_length") {
            self.positive(t, "half_length", prefix)?
        } else {
            defaults.half_length
        };
        let at = self.float(t, "step_at", prefix);
        let to = self.positive(t, "step_half_length", prefix);
        let step = match (t.contains_key("step_at"), t.contains_key("step_half_length")) {
            (false, false) => None,
            (true, true) => {
                let (at, to) = (at?, to?);
                if !(at >= 0.0 && at.is_finite()) {
                    self.err(loc(prefix, "step_at"), format!("must be non-negative, got {at}"));
                    return None;
                }
                Some(LengthStep { at, half_length: to })
            }
            _ => {
                self.err(prefix.to_string(), "`step_at` and `step_half_length` go together");
                return None;
            }
        };
        Some(PendulumPlant {
            params: defaults.with_half_length(half_length),
            step,
        })
    }
}

fn resolve_table(table: &Table, overrides: &ConfigOverrides) -> Result<ScenarioSpec> {
    let mut c = Checker { errors: Vec::new() };
    c.unknown_keys(table, TOP_KEYS, "");

    let id = match overrides.scenario {
        Some(id) => Some(id),
        None if !table.contains_key("scenario") => {
            c.err("scenario".into(), "missing required field (A, B, C, D or custom)");
            None
        }
        None => c.parsed::<ScenarioId>(table, "scenario", ""),
    };
    let column = overrides
        .column
        .or_else(|| c.parsed::<Column>(table, "column", ""))
        .unwrap_or(Column::A);
    let seed = overrides.seed.or_else(|| c.integer(table, "seed", "", 0)).unwrap_or(1);

    let mut hyper = column.hyperparameters();
    if let Some(h) = c.table(table, "hyper") {
        c.unknown_keys(h, HYPER_KEYS, "hyper");
        for (key, slot) in [
            ("sigma", &mut hyper.sigma),
            ("gamma", &mut hyper.gamma),
            ("eta0", &mut hyper.eta0),
            ("ramp", &mut hyper.ramp),
            ("p0", &mut hyper.p0),
        ] {
            if let Some(v) = c.positive(h, key, "hyper") {
                *slot = v;
            }
        }
        if let Some(v) = c.integer(h, "lattice", "hyper", 2) {
            hyper.lattice = v as usize;
        }
        if let Some(v) = c.integer(h, "partitions", "hyper", 1) {
            hyper.partitions = v as usize;
        }
    }

    let methods: Vec<Method> = match table.get("methods") {
        None => Method::ALL.to_vec(),
        Some(Value::Array(items)) => {
            let mut set = BTreeSet::new();
            for (i, item) in items.iter().enumerate() {
                match item.as_str().map(str::parse::<Method>) {
                    Some(Ok(m)) => {
                        set.insert(m);
                    }
                    Some(Err(_)) => c.err(
                        format!("methods[{i}]"),
                        format!("unknown method {item} (pd, sgdl, rtpl or frozen)"),
                    ),
                    None => c.err(format!("methods[{i}]"), "expected a string"),
                }
            }
            if items.is_empty() {
                c.err("methods".into(), "must name at least one method");
            }
            set.into_iter().collect()
        }
        Some(other) => {
            c.err(
                "methods".into(),
                format!("expected an array, found {}", other.type_str()),
            );
            Vec::new()
        }
    };

    let default_duration = if id == Some(ScenarioId::D) { 300.0 } else { 100.0 };
    let duration = overrides
        .duration
        .or_else(|| c.positive(table, "duration", ""))
        .unwrap_or(default_duration);
    if !(duration > 0.0 && duration.is_finite()) {
        c.err(
            "duration".into(),
            format!("must be positive and finite, got {duration}"),
        );
    }
    let dt = c.positive(table, "dt", "").unwrap_or(0.005);
    let substeps = c.integer(table, "substeps", "", 1).unwrap_or(1) as usize;
    let extraction_window = c
        .positive(table, "extraction_window", "")
        .unwrap_or(5.0_f64.min(duration));
    let checkpoint_interval = if table.contains_key("checkpoint_interval") {
        c.positive(table, "checkpoint_interval", "")
    } else if id == Some(ScenarioId::D) {
        Some(30.0)
    } else {
        None
    };
    let out = overrides
        .out
        .clone()
        .or_else(|| c.string(table, "out", "").map(PathBuf::from))
        .unwrap_or_else(|| {
            PathBuf::from(format!(
                "out/{}",
                id.map(|i| i.as_str()).unwrap_or("run").to_lowercase()
            ))
        });

    let preset_trajectory = |id: ScenarioId| match id {
        ScenarioId::A | ScenarioId::C => Some(TrajectorySpec::Sinusoid { duration }),
        ScenarioId::B | ScenarioId::D => Some(TrajectorySpec::RandomSpline {
            seed,
            knots: TrajectorySpec::default_knots(duration),
            duration,
        }),
        ScenarioId::Custom => None,
    };
    let trajectory = match c.table(table, "trajectory") {
        Some(t) => c.trajectory(t, "trajectory", seed, duration),
        None => match id {
            Some(ScenarioId::Custom) => {
                c.err(
                    "trajectory".into(),
                    "missing required table (custom scenarios must define the reference)",
                );
                None
            }
            Some(id) => preset_trajectory(id),
            None => None,
        },
    };
    let reuse_trajectory = match c.table(table, "reuse_trajectory") {
        Some(t) => c.trajectory(t, "reuse_trajectory", seed, duration),
        None => match id {
            Some(ScenarioId::D) => Some(TrajectorySpec::GrowingSinusoid { duration: 100.0 }),
            _ => trajectory,
        },
    };
    if let Some(tr) = &trajectory {
        if tr.duration() < duration * (1.0 - 1e-12) {
            c.err(
                "trajectory.duration".into(),
                format!("{} s is shorter than the learning phase of {duration} s", tr.duration()),
            );
        }
    }
    if extraction_window > duration {
        c.err(
            "extraction_window".into(),
            format!("{extraction_window} s exceeds the learning phase"),
        );
    }
    if dt > duration {
        c.err("dt".into(), format!("{dt} s exceeds the learning phase"));
    }

    let plant = match c.table(table, "plant") {
        Some(t) => c.plant(t, "plant"),
        None if id == Some(ScenarioId::C) => Some(PendulumPlant::perturbed()),
        None => Some(PendulumPlant::default()),
    };
    let reuse_plant = match c.table(table, "reuse_plant") {
        Some(t) => c.plant(t, "reuse_plant"),
        None if id == Some(ScenarioId::C) => Some(PendulumPlant::new(PendulumParams::default().with_half_length(0.8))),
        None => Some(PendulumPlant::default()),
    };

    if !c.errors.is_empty() {
        return Err(Error::Config(c.errors));
    }
    match (id, trajectory, reuse_trajectory, plant, reuse_plant) {
        (Some(id), Some(trajectory), Some(reuse_trajectory), Some(plant), Some(reuse_plant)) => Ok(ScenarioSpec {
            id,
            column,
            hyper,
            methods,
            seed,
            out,
            duration,
            dt,
            substeps,
            extraction_window,
            checkpoint_interval,
            trajectory,
            reuse_trajectory,
            plant,
            reuse_plant,
        }),
        _ => Err(Error::Config(vec!["configuration incomplete".into()])),
    }
}

impl ScenarioSpec {
    /// Preset with every default filled in.
    pub fn preset(id: ScenarioId, column: Column, seed: u64) -> Result<Self> {
        resolve(
            "",
            &ConfigOverrides {
                scenario: Some(id),
                column: Some(column),
                seed: Some(seed),
                ..Default::default()
            },
        )
    }

    /// Every resolved field, explicitly, as a TOML table.
    pub fn to_table(&self) -> Table {
        fn trajectory(spec: &TrajectorySpec) -> Value {
            let mut t = Table::new();
            match *spec {
                TrajectorySpec::Sinusoid { duration } => {
                    t.insert("kind".into(), "sinusoid".into());
                    t.insert("duration".into(), duration.into());
                }
                TrajectorySpec::GrowingSinusoid { duration } => {
                    t.insert("kind".into(), "growing_sinusoid".into());
                    t.insert("duration".into(), duration.into());
                }
                TrajectorySpec::RandomSpline { seed, knots, duration } => {
                    t.insert("kind".into(), "spline".into());
                    t.insert("seed".into(), Value::Integer(seed as i64));
                    t.insert("knots".into(), Value::Integer(knots as i64));
                    t.insert("duration".into(), duration.into());
                }
            }
            Value::Table(t)
        }
        fn plant(p: &PendulumPlant) -> Value {
            let mut t = Table::new();
            t.insert("half_length".into(), p.params.half_length.into());
            if let Some(step) = p.step {
                t.insert("step_at".into(), step.at.into());
                t.insert("step_half_length".into(), step.half_length.into());
            }
            Value::Table(t)
        }

        let h = &self.hyper;
        let mut hyper = Table::new();
        hyper.insert("sigma".into(), h.sigma.into());
        hyper.insert("gamma".into(), h.gamma.into());
        hyper.insert("eta0".into(), h.eta0.into());
        hyper.insert("ramp".into(), h.ramp.into());
        hyper.insert("p0".into(), h.p0.into());
        hyper.insert("lattice".into(), Value::Integer(h.lattice as i64));
        hyper.insert("partitions".into(), Value::Integer(h.partitions as i64));

        let mut t = Table::new();
        t.insert("scenario".into(), self.id.as_str().into());
        t.insert("column".into(), self.column.as_str().into());
        t.insert("seed".into(), Value::Integer(self.seed as i64));
        t.insert("out".into(), self.out.display().to_string().into());
        t.insert("duration".into(), self.duration.into());
        t.insert(
            "methods".into(),
            Value::Array(self.methods.iter().map(|m| m.as_str().into()).collect()),
        );
        t.insert("dt".into(), self.dt.into());
        t.insert("substeps".into(), Value::Integer(self.substeps as i64));
        t.insert("extraction_window".into(), self.extraction_window.into());
        if let Some(ci) = self.checkpoint_interval {
            t.insert("checkpoint_interval".into(), ci.into());
        }
        t.insert("hyper".into(), Value::Table(hyper));
        t.insert("trajectory".into(), trajectory(&self.trajectory));
        t.insert("reuse_trajectory".into(), trajectory(&self.reuse_trajectory));
        t.insert("plant".into(), plant(&self.plant));
        t.insert("reuse_plant".into(), plant(&self.reuse_plant));
        t
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(&self.to_table()).expect("plain tables always serialize")
    }

    /// Apply the configuration checks to a spec built or edited in code.
    pub fn validate(&self) -> Result<()> {
        resolve_table(&self.to_table(), &ConfigOverrides::default()).map(|_| ())
    }

    pub fn has(&self, method: Method) -> bool {
        self.methods.contains(&method)
    }

    pub fn network(&self) -> Result<RbfNetwork> {
        RbfNetwork::lattice(&LatticeSpec::square(-1.0, 1.0, self.hyper.lattice), self.hyper.sigma)
    }

    pub fn memory(&self) -> Result<SmrlsState> {
        let n = self.hyper.lattice * self.hyper.lattice;
        SmrlsState::new(
            self.hyper.p0,
            n,
            PartitionGrid::square(-1.0, 1.0, self.hyper.partitions)?,
        )
    }

    /// Learning-phase controller for `kind`.
    pub fn controller(&self, kind: LearnerKind) -> Result<Controller> {
        let network = self.network()?;
        let learner = match kind {
            LearnerKind::Pd => Learner::Pd,
            LearnerKind::Sgdl => Learner::sgdl(DVector::from_element(network.len(), self.hyper.gamma))?,
            LearnerKind::Rtpl => Learner::rtpl(self.hyper.eta0, self.hyper.ramp, self.memory()?)?,
            LearnerKind::Frozen => Learner::Frozen,
        };
        Controller::new(BacksteppingGains::default(), network, learner)
    }

    fn sim(&self, duration: f64) -> SimConfig {
        SimConfig {
            dt: self.dt,
            substeps: self.substeps,
            duration,
            ..SimConfig::default()
        }
    }

    /// Checkpoint times within the learning phase.
    pub fn checkpoints(&self) -> Vec<f64> {
        let Some(every) = self.checkpoint_interval else {
            return Vec::new();
        };
        let count = (self.duration / every + 1e-9).floor() as usize;
        (1..=count).map(|k| k as f64 * every).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Learning,
    Reuse,
}

impl Phase {
    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::Learning => "learn",
            Phase::Reuse => "reuse",
        }
    }
}

/// One closed-loop run of a scenario.
#[derive(Debug, Clone)]
pub struct RunRecord {
    /// `learn_rtpl`, `reuse_sgdl`, ...
    pub name: String,
    pub phase: Phase,
    /// Learner that ran in the learning phase, or produced the knowledge
    /// for a reuse run (`pd` for the reuse baseline).
    pub source: LearnerKind,
    pub trace: Trace,
    pub metrics: Metrics,
}

/// Reuse performance of knowledge captured part-way through learning.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointRow {
    pub index: usize,
    pub t_learn: f64,
    pub source: LearnerKind,
    pub ise_e1: f64,
    pub ise_p_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub name: String,
    pub phase: Phase,
    pub source: LearnerKind,
    pub trace_file: String,
    pub ise_e1: f64,
    pub ise_p_err: f64,
    pub max_abs_e1: f64,
    pub min_p_lmin: Option<f64>,
    pub max_p_lmax: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub config: ScenarioSpec,
    pub version: String,
    pub wall_clock_s: f64,
    pub runs: Vec<RunSummary>,
    /// Output files, relative to the output directory.
    pub files: Vec<String>,
}

impl RunManifest {
    pub fn to_toml(&self) -> String {
        let mut doc = Table::new();
        doc.insert("version".into(), self.version.clone().into());
        doc.insert("wall_clock_s".into(), self.wall_clock_s.into());
        doc.insert(
            "files".into(),
            Value::Array(self.files.iter().map(|f| f.clone().into()).collect()),
        );
        doc.insert("config".into(), Value::Table(self.config.to_table()));
        let runs = self
            .runs
            .iter()
            .map(|r| {
                let mut t = Table::new();
                t.insert("name".into(), r.name.clone().into());
                t.insert("phase".into(), r.phase.as_str().into());
                t.insert("source".into(), r.source.as_str().into());
                t.insert("trace".into(), r.trace_file.clone().into());
                t.insert("ise_e1".into(), r.ise_e1.into());
                t.insert("ise_p_err".into(), r.ise_p_err.into());
                t.insert("max_abs_e1".into(), r.max_abs_e1.into());
                if let Some(v) = r.min_p_lmin {
                    t.insert("min_p_lmin".into(), v.into());
                }
                if let Some(v) = r.max_p_lmax {
                    t.insert("max_p_lmax".into(), v.into());
                }
                Value::Table(t)
            })
            .collect();
        doc.insert("runs".into(), Value::Array(runs));
        toml::to_string(&doc).expect("plain tables always serialize")
    }
}

/// Recover the resolved configuration echoed in a manifest.
pub fn config_from_manifest(text: &str) -> Result<ScenarioSpec> {
    let doc: Table = toml::from_str(text).map_err(|e| Error::parse("manifest", e.message().to_string()))?;
    match doc.get("config") {
        Some(Value::Table(config)) => resolve_table(config, &ConfigOverrides::default()),
        _ => Err(Error::parse("manifest", "no [config] table")),
    }
}

#[derive(Debug, Clone)]
pub struct ScenarioOutcome {
    pub manifest: RunManifest,
    pub runs: Vec<RunRecord>,
    pub checkpoints: Vec<CheckpointRow>,
}

impl ScenarioOutcome {
    pub fn run(&self, name: &str) -> Option<&RunRecord> {
        self.runs.iter().find(|r| r.name == name)
    }
}

struct Learned {
    kind: LearnerKind,
    trace: Trace,
    controller: Controller,
}

fn frozen(network: &RbfNetwork, weights: &DVector<f64>) -> Result<Controller> {
    let mut network = network.clone();
    network.set_weights(weights.clone())?;
    Controller::new(BacksteppingGains::default(), network, Learner::Frozen)
}

/// Run the learning and reuse phases, write every artifact under
/// `spec.out` and return the in-memory results alongside the manifest.
pub fn run_scenario(spec: &ScenarioSpec) -> Result<ScenarioOutcome> {
    let started = Instant::now();
    spec.validate()?;
    let out = spec.out.as_path();
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    let trajectory = Trajectory::new(spec.trajectory)?;
    let reuse_trajectory = Trajectory::new(spec.reuse_trajectory)?;
    let reuse_duration = reuse_trajectory.duration();
    // knowledge lives in the coordinates it was learned in
    let norm: Normalization = trajectory.normalization();
    let network = spec.network()?;
    let checkpoints = spec.checkpoints();

    let learners: Vec<LearnerKind> = spec.methods.iter().filter_map(|m| m.learner()).collect();
    let learned: Vec<Learned> = learners
        .par_iter()
        .map(|&kind| {
            let mut config = SimConfig {
                dense_weight_tail: spec.extraction_window,
                ..spec.sim(spec.duration)
            };
            if !checkpoints.is_empty() {
                config.weight_log_interval = spec.dt;
            }
            let mut controller = spec.controller(kind)?;
            let trace = run_closed_loop(&spec.plant, &trajectory, norm, &mut controller, &config)?;
            Ok(Learned {
                kind,
                trace,
                controller,
            })
        })
        .collect::<Result<_>>()?;

    let mut files = Vec::new();
    let mut knowledge: Vec<KnowledgeSnapshot> = Vec::new();
    for l in &learned {
        let snap = match l.kind {
            LearnerKind::Sgdl => {
                let k = extract_integral(
                    &l.trace.weights,
                    spec.duration - spec.extraction_window,
                    spec.extraction_window,
                )?;
                Some(SnapshotFile::new(&network, norm, &k, None)?)
            }
            LearnerKind::Rtpl => {
                let memory = l.controller.memory().expect("RTPL controller owns a memory");
                let k = extract_final(memory, spec.duration);
                Some(SnapshotFile::new(&network, norm, &k, Some(memory))?)
            }
            _ => None,
        };
        if let Some(snap) = snap {
            let name = format!("{}.snapshot", l.kind);
            snap.save(&out.join(&name))?;
            files.push(name);
            knowledge.push(snap.knowledge());
        }
    }

    // reuse phase: frozen knowledge plus the PD baseline on the reuse task
    let mut reuse_jobs: Vec<(LearnerKind, Controller)> = Vec::new();
    if spec.has(Method::Frozen) {
        if spec.has(Method::Pd) {
            reuse_jobs.push((LearnerKind::Pd, spec.controller(LearnerKind::Pd)?));
        }
        for k in &knowledge {
            reuse_jobs.push((k.method, frozen(&network, &k.weights)?));
        }
    }
    let reused: Vec<(LearnerKind, Trace)> = reuse_jobs
        .into_par_iter()
        .map(|(source, mut controller)| {
            let trace = run_closed_loop(
                &spec.reuse_plant,
                &reuse_trajectory,
                norm,
                &mut controller,
                &spec.sim(reuse_duration),
            )?;
            Ok((source, trace))
        })
        .collect::<Result<_>>()?;

    // knowledge captured part-way through learning, evaluated on the reuse task
    let mut checkpoint_jobs: Vec<(usize, f64, LearnerKind, DVector<f64>)> = Vec::new();
    for l in learned
        .iter()
        .filter(|l| matches!(l.kind, LearnerKind::Sgdl | LearnerKind::Rtpl))
    {
        for (i, &t) in checkpoints.iter().enumerate() {
            let weights = match l.kind {
                LearnerKind::Sgdl => {
                    let window = spec.extraction_window.min(t);
                    extract_integral(&l.trace.weights, t - window, window)?.weights
                }
                _ => l
                    .trace
                    .weights_at(t)
                    .cloned()
                    .ok_or_else(|| Error::invalid(format!("no weights logged at {t} s")))?,
            };
            checkpoint_jobs.push((i + 1, t, l.kind, weights));
        }
    }
    if !checkpoint_jobs.is_empty() {
        let dir = out.join("checkpoints");
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let checkpoint_rows: Vec<CheckpointRow> = checkpoint_jobs
        .par_iter()
        .map(|(index, t, source, weights)| {
            let k = KnowledgeSnapshot {
                weights: weights.clone(),
                method: *source,
                learning_duration: *t,
                records: Vec::new(),
            };
            SnapshotFile::new(&network, norm, &k, None)?.save(&out.join(checkpoint_snapshot_name(*source, *index)))?;
            let mut controller = frozen(&network, weights)?;
            let trace = run_closed_loop(
                &spec.reuse_plant,
                &reuse_trajectory,
                norm,
                &mut controller,
                &spec.sim(reuse_duration),
            )?;
            let m = trace.metrics();
            Ok(CheckpointRow {
                index: *index,
                t_learn: *t,
                source: *source,
                ise_e1: m.ise_e1,
                ise_p_err: m.ise_p_err,
            })
        })
        .collect::<Result<_>>()?;
    for row in &checkpoint_rows {
        files.push(checkpoint_snapshot_name(row.source, row.index));
    }

    let mut runs = Vec::new();
    for l in learned {
        runs.push(record(format!("learn_{}", l.kind), Phase::Learning, l.kind, l.trace));
    }
    for (source, trace) in reused {
        runs.push(record(format!("reuse_{source}"), Phase::Reuse, source, trace));
    }

    let mut summaries = Vec::new();
    for r in &runs {
        let trace_file = format!("{}.csv", r.name);
        write_file(&out.join(&trace_file), &trace_to_csv(&r.trace))?;
        files.push(trace_file.clone());
        summaries.push(RunSummary {
            name: r.name.clone(),
            phase: r.phase,
            source: r.source,
            trace_file,
            ise_e1: r.metrics.ise_e1,
            ise_p_err: r.metrics.ise_p_err,
            max_abs_e1: r.metrics.max_abs_e1,
            min_p_lmin: r.metrics.min_p_lmin,
            max_p_lmax: r.metrics.max_p_lmax,
        });
    }
    write_file(&out.join("metrics.csv"), &metrics_csv(&summaries))?;
    files.push("metrics.csv".into());
    if !checkpoint_rows.is_empty() {
        write_file(&out.join("checkpoints.csv"), &checkpoints_csv(&checkpoint_rows))?;
        files.push("checkpoints.csv".into());
    }
    files.push("manifest.toml".into());
    files.sort();

    let manifest = RunManifest {
        config: spec.clone(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        wall_clock_s: started.elapsed().as_secs_f64(),
        runs: summaries,
        files,
    };
    write_file(&out.join("manifest.toml"), &manifest.to_toml())?;
    Ok(ScenarioOutcome {
        manifest,
        runs,
        checkpoints: checkpoint_rows,
    })
}

fn record(name: String, phase: Phase, source: LearnerKind, trace: Trace) -> RunRecord {
    let metrics = trace.metrics();
    RunRecord {
        name,
        phase,
        source,
        trace,
        metrics,
    }
}

fn checkpoint_snapshot_name(source: LearnerKind, index: usize) -> String {
    format!("checkpoints/{source}_{index:02}.snapshot")
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

pub const METRICS_HEADER: &str = "run,phase,source,ise_e1,ise_p_err,max_abs_e1,min_p_lmin,max_p_lmax";
pub const CHECKPOINTS_HEADER: &str = "checkpoint,t_learn,source,ise_e1,ise_p_err";

fn metrics_csv(runs: &[RunSummary]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in runs {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.name,
            r.phase.as_str(),
            r.source,
            r.ise_e1,
            r.ise_p_err,
            r.max_abs_e1,
            opt(r.min_p_lmin),
            opt(r.max_p_lmax)
        ));
    }
    s
}

fn checkpoints_csv(rows: &[CheckpointRow]) -> String {
    let mut s = format!("{CHECKPOINTS_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.index, r.t_learn, r.source, r.ise_e1, r.ise_p_err
        ));
    }
    s
}

/// Run a snapshot as a frozen feedforward along `trajectory` on the
/// nominal plant, in the snapshot's own input coordinates.
pub fn replay(snapshot: &SnapshotFile, trajectory: TrajectorySpec, plant: &PendulumPlant, dt: f64) -> Result<Trace> {
    let trajectory = Trajectory::new(trajectory)?;
    let mut controller = Controller::new(BacksteppingGains::default(), snapshot.network.clone(), Learner::Frozen)?;
    let config = SimConfig {
        dt,
        duration: trajectory.duration(),
        ..SimConfig::default()
    };
    run_closed_loop(plant, &trajectory, snapshot.normalization, &mut controller, &config)
}

/// Parse a compact trajectory name: `sinusoid`, `growing_sinusoid`,
/// `spline:<seed>` or `spline:<seed>:<knots>`, each optionally followed by
/// `@<duration>` (default 100 s).
pub fn parse_trajectory(text: &str) -> Result<TrajectorySpec> {
    let bad = |msg: String| Error::parse("trajectory", msg);
    let (body, duration) = match text.split_once('@') {
        Some((b, d)) => (
            b,
            d.parse::<f64>()
                .ok()
                .filter(|d| *d > 0.0 && d.is_finite())
                .ok_or_else(|| bad(format!("bad duration `{d}`")))?,
        ),
        None => (text, 100.0),
    };
    let parts: Vec<&str> = body.split(':').collect();
    match parts.as_slice() {
        ["sinusoid"] => Ok(TrajectorySpec::Sinusoid { duration }),
        ["growing_sinusoid"] => Ok(TrajectorySpec::GrowingSinusoid { duration }),
        ["spline", rest @ ..] if !rest.is_empty() && rest.len() <= 2 => {
            let seed = rest[0].parse().map_err(|_| bad(format!("bad seed `{}`", rest[0])))?;
            let knots = match rest.get(1) {
                Some(k) => k
                    .parse::<usize>()
                    .ok()
                    .filter(|k| *k >= 2)
                    .ok_or_else(|| bad(format!("bad knot count `{k}`")))?,
                None => TrajectorySpec::default_knots(duration),
            };
            Ok(TrajectorySpec::RandomSpline { seed, knots, duration })
        }
        _ => Err(bad(format!(
            "unknown trajectory `{text}` (sinusoid, growing_sinusoid, spline:<seed>[:<knots>], optional @<seconds>)"
        ))),
    }
}
