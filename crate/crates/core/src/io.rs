//! Trace CSV and knowledge snapshot formats.
//!
//! Traces use one fixed header for every method; diagnostics a method does
//! not produce are left empty. Floats are written with Rust's shortest
//! round-trip formatting, so a trace read back reproduces the in-memory
//! values exactly.
//!
//! Snapshots are line-oriented text:
//!
//! ```text
//! rtpl-snapshot 1
//! method rtpl
//! learning_duration 100
//! input_dim 2
//! neurons 25
//! normalization 1 1
//! neuron <c_1> .. <c_q> <sigma> <weight>      (one line per neuron)
//! memory <p0> <lower> <upper> <count> ..      (optional, one triple per axis)
//! records <k>
//! record <partition> <target> <phi_1> .. <phi_N>   (k lines)
//! ```
//!
//! Blank lines and lines starting with `#` are ignored.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DVector;

use crate::control::{KnowledgeSnapshot, LearnerKind};
use crate::dynamics::Normalization;
use crate::rbf::{AxisSpec, RbfNetwork};
use crate::simulation::{Trace, TraceRow};
use crate::smrls::{PartitionGrid, PartitionRecord, SmrlsState};
use crate::{Error, Result};

pub const TRACE_HEADER: &str = "t,x1,x2,xd1,xd2,e1,e2,u,w_norm,p_true,p_hat,p_err,k_e,p_lmin,p_lmax";

const SNAPSHOT_MAGIC: &str = "rtpl-snapshot";
const SNAPSHOT_VERSION: u32 = 1;

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

pub fn trace_to_csv(trace: &Trace) -> String {
    let mut out = String::with_capacity(trace.rows.len() * 160);
    out.push_str(TRACE_HEADER);
    out.push('\n');
    for r in &trace.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.t,
            r.x[0],
            r.x[1],
            r.xd[0],
            r.xd[1],
            r.e[0],
            r.e[1],
            r.u,
            r.w_norm,
            r.p_true,
            r.p_hat,
            r.p_err(),
            opt(r.k_e),
            opt(r.p_lmin),
            opt(r.p_lmax),
        );
    }
    out
}

/// Parse a trace CSV. The normalized reference is not part of the schema,
/// so `xd_normalized` comes back as NaN.
pub fn trace_from_csv(text: &str) -> Result<Vec<TraceRow>> {
    let mut lines = text.lines().enumerate();
    let header = lines.next().map(|(_, l)| l.trim()).unwrap_or("");
    if header != TRACE_HEADER {
        return Err(Error::parse(
            "trace header",
            format!("expected `{TRACE_HEADER}`, found `{header}`"),
        ));
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let ctx = || format!("trace line {}", i + 1);
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 15 {
            return Err(Error::parse(
                ctx(),
                format!("expected 15 fields, found {}", fields.len()),
            ));
        }
        let num = |k: usize| -> Result<f64> {
            fields[k]
                .trim()
                .parse::<f64>()
                .map_err(|e| Error::parse(ctx(), format!("column {}: {e}", k + 1)))
        };
        let opt_num = |k: usize| -> Result<Option<f64>> {
            if fields[k].trim().is_empty() {
                Ok(None)
            } else {
                num(k).map(Some)
            }
        };
        rows.push(TraceRow {
            t: num(0)?,
            x: [num(1)?, num(2)?],
            xd: [num(3)?, num(4)?],
            xd_normalized: [f64::NAN; 2],
            e: [num(5)?, num(6)?],
            u: num(7)?,
            w_norm: num(8)?,
            p_true: num(9)?,
            p_hat: num(10)?,
            k_e: opt_num(12)?,
            p_lmin: opt_num(13)?,
            p_lmax: opt_num(14)?,
        });
    }
    if rows.is_empty() {
        return Err(Error::parse("trace", "no data rows"));
    }
    Ok(rows)
}

pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Everything a reuse run needs: the network (with the learned weights as
/// its weight vector), the input normalization used while learning, and
/// optionally the selective memory so learning can resume.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotFile {
    pub network: RbfNetwork,
    pub normalization: Normalization,
    pub method: LearnerKind,
    pub learning_duration: f64,
    /// `(p0, grid)` of the memory the records belong to.
    pub memory: Option<(f64, PartitionGrid)>,
    pub records: Vec<(usize, PartitionRecord)>,
}

impl SnapshotFile {
    /// Pair extracted knowledge with the network layout it was learned on.
    pub fn new(
        network: &RbfNetwork,
        normalization: Normalization,
        knowledge: &KnowledgeSnapshot,
        memory: Option<&SmrlsState>,
    ) -> Result<Self> {
        let mut network = network.clone();
        network.set_weights(knowledge.weights.clone())?;
        Ok(Self {
            network,
            normalization,
            method: knowledge.method,
            learning_duration: knowledge.learning_duration,
            memory: memory.map(|m| (m.p0(), m.grid().clone())),
            records: knowledge.records.clone(),
        })
    }

    pub fn knowledge(&self) -> KnowledgeSnapshot {
        KnowledgeSnapshot {
            weights: self.network.weights().clone(),
            method: self.method,
            learning_duration: self.learning_duration,
            records: self.records.clone(),
        }
    }

    /// Rebuild the selective memory from the stored records.
    pub fn restore_memory(&self) -> Result<Option<SmrlsState>> {
        let Some((p0, grid)) = &self.memory else {
            return Ok(None);
        };
        SmrlsState::from_records(
            *p0,
            grid.clone(),
            self.network.weights().clone(),
            self.records.iter().cloned(),
        )
        .map(Some)
    }

    pub fn to_text(&self) -> String {
        let net = &self.network;
        let mut out = String::new();
        let _ = writeln!(out, "{SNAPSHOT_MAGIC} {SNAPSHOT_VERSION}");
        let _ = writeln!(out, "method {}", self.method);
        let _ = writeln!(out, "learning_duration {}", self.learning_duration);
        let _ = writeln!(out, "input_dim {}", net.input_dim());
        let _ = writeln!(out, "neurons {}", net.len());
        let _ = writeln!(
            out,
            "normalization {} {}",
            self.normalization.scale[0], self.normalization.scale[1]
        );
        for i in 0..net.len() {
            out.push_str("neuron");
            for c in net.center(i) {
                let _ = write!(out, " {c}");
            }
            let _ = writeln!(out, " {} {}", net.widths()[i], net.weights()[i]);
        }
        if let Some((p0, grid)) = &self.memory {
            let _ = write!(out, "memory {p0}");
            for a in grid.axes() {
                let _ = write!(out, " {} {} {}", a.lower, a.upper, a.count);
            }
            out.push('\n');
        }
        let _ = writeln!(out, "records {}", self.records.len());
        for (idx, rec) in &self.records {
            let _ = write!(out, "record {idx} {}", rec.target);
            for v in rec.regressor.iter() {
                let _ = write!(out, " {v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut r = LineReader {
            lines: text
                .lines()
                .enumerate()
                .map(|(i, l)| (i + 1, l.trim()))
                .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
                .collect(),
            pos: 0,
        };

        let (n, t) = r.expect(SNAPSHOT_MAGIC)?;
        let version: u32 = value(n, t.first())?;
        if version != SNAPSHOT_VERSION {
            return Err(Error::parse("snapshot", format!("unsupported version {version}")));
        }
        let (n, t) = r.expect("method")?;
        let method: LearnerKind = value(n, t.first())?;
        let (n, t) = r.expect("learning_duration")?;
        let learning_duration: f64 = value(n, t.first())?;
        let (n, t) = r.expect("input_dim")?;
        let dim: usize = value(n, t.first())?;
        let (n, t) = r.expect("neurons")?;
        let count: usize = value(n, t.first())?;
        let (n, t) = r.expect("normalization")?;
        arity(n, &t, 2)?;
        let normalization = Normalization {
            scale: [value(n, t.first())?, value(n, t.get(1))?],
        };

        let mut centers = Vec::with_capacity(count);
        let mut widths = Vec::with_capacity(count);
        let mut weights = Vec::with_capacity(count);
        for _ in 0..count {
            let (n, t) = r.expect("neuron")?;
            arity(n, &t, dim + 2)?;
            let vals = t.iter().map(|s| value::<f64>(n, Some(s))).collect::<Result<Vec<_>>>()?;
            centers.push(vals[..dim].to_vec());
            widths.push(vals[dim]);
            weights.push(vals[dim + 1]);
        }
        let network = RbfNetwork::from_parts(centers, widths, DVector::from_vec(weights))?;

        let memory = if r.peek() == Some("memory") {
            let (n, t) = r.expect("memory")?;
            if t.is_empty() || (t.len() - 1) % 3 != 0 {
                return Err(Error::parse(
                    format!("snapshot line {n}"),
                    "memory needs p0 then (lower upper count) per axis",
                ));
            }
            let p0: f64 = value(n, t.first())?;
            let axes = t[1..]
                .chunks(3)
                .map(|c| {
                    Ok(AxisSpec::new(
                        value(n, c.first())?,
                        value(n, c.get(1))?,
                        value(n, c.get(2))?,
                    ))
                })
                .collect::<Result<Vec<_>>>()?;
            Some((p0, PartitionGrid::new(axes)?))
        } else {
            None
        };

        let (n, t) = r.expect("records")?;
        let k: usize = value(n, t.first())?;
        let mut records = Vec::with_capacity(k);
        for _ in 0..k {
            let (n, t) = r.expect("record")?;
            arity(n, &t, count + 2)?;
            let idx: usize = value(n, t.first())?;
            if let Some((_, grid)) = &memory {
                if idx >= grid.len() {
                    return Err(Error::parse(
                        format!("snapshot line {n}"),
                        format!("partition {idx} outside grid of {}", grid.len()),
                    ));
                }
            }
            let target: f64 = value(n, t.get(1))?;
            let phi = t[2..]
                .iter()
                .map(|s| value::<f64>(n, Some(s)))
                .collect::<Result<Vec<_>>>()?;
            records.push((
                idx,
                PartitionRecord {
                    regressor: DVector::from_vec(phi),
                    target,
                },
            ));
        }
        if let Some((n, line)) = r.lines.get(r.pos) {
            return Err(Error::parse(
                format!("snapshot line {n}"),
                format!("trailing content `{line}`"),
            ));
        }
        Ok(Self {
            network,
            normalization,
            method,
            learning_duration,
            memory,
            records,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_text())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&read_file(path)?)
    }
}

struct LineReader<'a> {
    lines: Vec<(usize, &'a str)>,
    pos: usize,
}

impl<'a> LineReader<'a> {
    fn peek(&self) -> Option<&'a str> {
        self.lines.get(self.pos).and_then(|(_, l)| l.split_whitespace().next())
    }

    /// Consume a line that must start with `keyword`; returns its values.
    fn expect(&mut self, keyword: &str) -> Result<(usize, Vec<&'a str>)> {
        let (n, line) = *self
            .lines
            .get(self.pos)
            .ok_or_else(|| Error::parse("snapshot", format!("unexpected end of file, expected `{keyword}`")))?;
        let mut tokens = line.split_whitespace();
        let head = tokens.next().unwrap_or("");
        if head != keyword {
            return Err(Error::parse(
                format!("snapshot line {n}"),
                format!("expected `{keyword}`, found `{head}`"),
            ));
        }
        self.pos += 1;
        Ok((n, tokens.collect()))
    }
}

fn value<T: std::str::FromStr>(n: usize, tok: Option<&&str>) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    let tok = tok.ok_or_else(|| Error::parse(format!("snapshot line {n}"), "missing value"))?;
    tok.parse()
        .map_err(|e| Error::parse(format!("snapshot line {n}"), format!("`{tok}`: {e}")))
}

fn arity(n: usize, tokens: &[&str], expected: usize) -> Result<()> {
    if tokens.len() != expected {
        return Err(Error::parse(
            format!("snapshot line {n}"),
            format!("expected {expected} values, found {}", tokens.len()),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::{extract_final, BacksteppingGains, Controller, Learner};
    use crate::dynamics::{PendulumPlant, Trajectory, TrajectorySpec};
    use crate::rbf::LatticeSpec;
    use crate::simulation::{run_closed_loop, SimConfig};

    fn short_rtpl() -> (Trace, Controller, Normalization) {
        let traj = Trajectory::new(TrajectorySpec::Sinusoid { duration: 2.0 }).unwrap();
        let norm = traj.normalization();
        let net = RbfNetwork::lattice(&LatticeSpec::square(-1.0, 1.0, 5), 0.3).unwrap();
        let mem = SmrlsState::new(100.0, 25, PartitionGrid::square(-1.0, 1.0, 100).unwrap()).unwrap();
        let mut c = Controller::new(BacksteppingGains::default(), net, Learner::rtpl(5.0, 2.0, mem).unwrap()).unwrap();
        let cfg = SimConfig {
            duration: 2.0,
            ..SimConfig::default()
        };
        let trace = run_closed_loop(&PendulumPlant::default(), &traj, norm, &mut c, &cfg).unwrap();
        (trace, c, norm)
    }

    #[test]
    fn csv_round_trips_exactly() {
        let (trace, _, _) = short_rtpl();
        let text = trace_to_csv(&trace);
        assert!(text.starts_with(TRACE_HEADER));
        let rows = trace_from_csv(&text).unwrap();
        assert_eq!(rows.len(), trace.rows.len());
        for (a, b) in rows.iter().zip(&trace.rows) {
            assert_eq!((a.t, a.x, a.xd, a.e, a.u), (b.t, b.x, b.xd, b.e, b.u));
            assert_eq!(
                (a.p_true, a.p_hat, a.k_e, a.p_lmin, a.p_lmax),
                (b.p_true, b.p_hat, b.k_e, b.p_lmin, b.p_lmax)
            );
        }
        let m = crate::simulation::Metrics::from_rows(&rows, &[]);
        assert_eq!(m.ise_e1, trace.metrics().ise_e1);
        assert_eq!(m.ise_p_err, trace.metrics().ise_p_err);
    }

    #[test]
    fn absent_diagnostics_are_empty_fields() {
        let traj = Trajectory::new(TrajectorySpec::Sinusoid { duration: 1.0 }).unwrap();
        let net = RbfNetwork::lattice(&LatticeSpec::square(-1.0, 1.0, 5), 0.3).unwrap();
        let mut c = Controller::new(BacksteppingGains::default(), net, Learner::Pd).unwrap();
        let cfg = SimConfig {
            duration: 1.0,
            ..SimConfig::default()
        };
        let trace = run_closed_loop(&PendulumPlant::default(), &traj, traj.normalization(), &mut c, &cfg).unwrap();
        let text = trace_to_csv(&trace);
        let first = text.lines().nth(1).unwrap();
        assert!(first.ends_with(",,,"), "{first}");
        let rows = trace_from_csv(&text).unwrap();
        assert!(rows.iter().all(|r| r.k_e.is_none() && r.p_lmax.is_none()));
    }

    #[test]
    fn bad_csv_is_rejected() {
        assert!(trace_from_csv("").is_err());
        assert!(trace_from_csv("t,x1\n0,1\n").is_err());
        assert!(trace_from_csv(&format!("{TRACE_HEADER}\n")).is_err());
        assert!(trace_from_csv(&format!("{TRACE_HEADER}\n0,1,2\n")).is_err());
        let bad = format!("{TRACE_HEADER}\n0,a,0,0,0,0,0,0,0,0,0,0,,,\n");
        assert!(trace_from_csv(&bad).is_err());
    }

    #[test]
    fn snapshot_round_trips_and_restores_memory() {
        let (_, c, norm) = short_rtpl();
        let mem = c.memory().unwrap();
        let knowledge = extract_final(mem, 2.0);
        let snap = SnapshotFile::new(&c.network, norm, &knowledge, Some(mem)).unwrap();
        let text = snap.to_text();
        let back = SnapshotFile::from_text(&text).unwrap();
        assert_eq!(back, snap);
        assert_eq!(back.knowledge(), knowledge);

        let restored = back.restore_memory().unwrap().unwrap();
        assert_eq!(restored.occupied_count(), mem.occupied_count());
        let rel = (restored.gain() - mem.gain()).norm() / mem.gain().norm();
        assert!(rel < 1e-8, "{rel}");
        assert_eq!(restored.weights(), mem.weights());
    }

    #[test]
    fn snapshot_without_memory() {
        let net = RbfNetwork::lattice(&LatticeSpec::square(-1.0, 1.0, 3), 0.5).unwrap();
        let knowledge = KnowledgeSnapshot {
            weights: DVector::from_fn(9, |i, _| i as f64 * 0.25 - 1.0),
            method: LearnerKind::Sgdl,
            learning_duration: 100.0,
            records: Vec::new(),
        };
        let snap = SnapshotFile::new(&net, Normalization::IDENTITY, &knowledge, None).unwrap();
        let back = SnapshotFile::from_text(&snap.to_text()).unwrap();
        assert_eq!(back, snap);
        assert!(back.restore_memory().unwrap().is_none());
    }

    #[test]
    fn malformed_snapshots_are_rejected() {
        let net = RbfNetwork::lattice(&LatticeSpec::square(-1.0, 1.0, 2), 0.5).unwrap();
        let knowledge = KnowledgeSnapshot {
            weights: DVector::zeros(4),
            method: LearnerKind::Rtpl,
            learning_duration: 1.0,
            records: Vec::new(),
        };
        let good = SnapshotFile::new(&net, Normalization::IDENTITY, &knowledge, None)
            .unwrap()
            .to_text();
        assert!(SnapshotFile::from_text(&good.replace("rtpl-snapshot 1", "rtpl-snapshot 9")).is_err());
        assert!(SnapshotFile::from_text(&good.replace("neurons 4", "neurons 5")).is_err());
        assert!(SnapshotFile::from_text(&good.replace("method rtpl", "method nope")).is_err());
        assert!(SnapshotFile::from_text(&format!("{good}extra 1\n")).is_err());
        let commented = format!("# learned offline\n\n{good}");
        assert!(SnapshotFile::from_text(&commented).is_ok());
    }
}
