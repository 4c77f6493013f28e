//! Fixed-step closed-loop simulation, traces and error metrics.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::control::{control_output, tracking_errors, Controller, LearnerKind};
use crate::dynamics::{true_feedforward, Normalization, Plant, State, Trajectory};
use crate::rbf::RbfNetwork;
use crate::{Error, Result};

/// States beyond this magnitude count as divergence.
const DIVERGENCE_BOUND: f64 = 1e6;

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    /// Control and sampling period, s.
    pub dt: f64,
    /// RK4 substeps per control period.
    pub substeps: usize,
    pub duration: f64,
    pub x0: State,
    /// Full weight vectors are logged at this period.
    pub weight_log_interval: f64,
    /// Over the final `dense_weight_tail` seconds weights are logged every step.
    pub dense_weight_tail: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: 0.005,
            substeps: 1,
            duration: 100.0,
            x0: [std::f64::consts::PI / 60.0, 0.0],
            weight_log_interval: 1.0,
            dense_weight_tail: 0.0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::invalid(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(Error::invalid(format!(
                "duration must be positive, got {}",
                self.duration
            )));
        }
        if self.substeps == 0 {
            return Err(Error::invalid("substeps must be at least 1"));
        }
        if self.weight_log_interval.is_nan() || self.weight_log_interval < self.dt {
            return Err(Error::invalid("weight log interval must be at least dt"));
        }
        if self.x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("initial state must be finite"));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        (self.duration / self.dt).round() as usize
    }
}

/// Classical RK4 step with the input held over `dt`.
pub fn integrate_step(plant: &dyn Plant, x: &State, u: f64, t: f64, dt: f64) -> Result<State> {
    if dt.is_nan() || dt <= 0.0 {
        return Err(Error::invalid(format!("dt must be positive, got {dt}")));
    }
    let add = |a: &State, k: &State, h: f64| [a[0] + h * k[0], a[1] + h * k[1]];
    let k1 = plant.derivative(x, u, t);
    let k2 = plant.derivative(&add(x, &k1, dt / 2.0), u, t + dt / 2.0);
    let k3 = plant.derivative(&add(x, &k2, dt / 2.0), u, t + dt / 2.0);
    let k4 = plant.derivative(&add(x, &k3, dt), u, t + dt);
    let next = [
        x[0] + dt / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
        x[1] + dt / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
    ];
    if next.iter().any(|v| !v.is_finite() || v.abs() > DIVERGENCE_BOUND) {
        return Err(Error::Divergence {
            t: t + dt,
            detail: format!("state left the finite region: {next:?}"),
        });
    }
    Ok(next)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub t: f64,
    pub x: State,
    pub xd: State,
    pub xd_normalized: [f64; 2],
    pub e: [f64; 2],
    pub u: f64,
    pub w_norm: f64,
    pub p_true: f64,
    pub p_hat: f64,
    pub k_e: Option<f64>,
    pub p_lmin: Option<f64>,
    pub p_lmax: Option<f64>,
}

impl TraceRow {
    pub fn p_err(&self) -> f64 {
        self.p_true - self.p_hat
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub method: LearnerKind,
    pub dt: f64,
    pub rows: Vec<TraceRow>,
    /// `(t, Ŵ)`, thinned per [`SimConfig::weight_log_interval`].
    pub weights: Vec<(f64, DVector<f64>)>,
}

impl Trace {
    pub fn metrics(&self) -> Metrics {
        Metrics::from_rows(&self.rows, &self.weights)
    }

    /// ISE of `e₁` over rows with `start ≤ t < end`.
    pub fn ise_e1_window(&self, start: f64, end: f64) -> f64 {
        let tol = 1e-9;
        let series: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.t >= start - tol && r.t < end - tol)
            .map(|r| r.e[0])
            .collect();
        ise(&series, self.dt).unwrap_or(0.0)
    }

    /// Weight vector logged at (or last before) `t`.
    pub fn weights_at(&self, t: f64) -> Option<&DVector<f64>> {
        let k = self.weights.partition_point(|(s, _)| *s <= t + 1e-9);
        k.checked_sub(1).map(|k| &self.weights[k].1)
    }
}

/// Run one closed loop. Per control period: sample the reference, form the
/// errors, evaluate the network at the normalized reference, apply the
/// control, integrate the plant, then let the learner update with the
/// sample taken before integration.
pub fn run_closed_loop(
    plant: &dyn Plant,
    trajectory: &Trajectory,
    normalization: Normalization,
    controller: &mut Controller,
    config: &SimConfig,
) -> Result<Trace> {
    config.validate()?;
    if config.duration > trajectory.duration() * (1.0 + 1e-12) {
        return Err(Error::invalid(format!(
            "run of {} s exceeds trajectory duration {} s",
            config.duration,
            trajectory.duration()
        )));
    }
    if controller.network.input_dim() != 2 {
        return Err(Error::DimensionMismatch {
            expected: 2,
            actual: controller.network.input_dim(),
        });
    }
    let steps = config.steps();
    let log_every = ((config.weight_log_interval / config.dt).round() as usize).max(1);
    let dense_from = config.duration - config.dense_weight_tail;
    let sub_dt = config.dt / config.substeps as f64;
    let p0 = controller.memory().map(|m| m.p0());

    let mut rows = Vec::with_capacity(steps + 1);
    let mut weights = Vec::new();
    let mut x = config.x0;
    for k in 0..=steps {
        let t = k as f64 * config.dt;
        let reference = trajectory.sample(t)?;
        let xd = reference.state();
        let e = tracking_errors(&x, &xd, &controller.gains)?;
        let input = normalization.apply(&xd);
        let phi = controller.network.regressor(&input)?;
        let p_hat = controller.network_term(&phi);
        let u = control_output(&e, p_hat, &controller.gains);

        let (p_lmin, p_lmax) = match (controller.memory(), p0) {
            (Some(m), Some(p0)) => {
                let (lo, hi) = m.p_bounds();
                if !(lo > 0.0 && hi <= p0 * (1.0 + 1e-9)) {
                    return Err(Error::NotPositiveDefinite(format!(
                        "eigenvalues of P left (0, p0] at t = {t}: [{lo}, {hi}]"
                    )));
                }
                (Some(lo), Some(hi))
            }
            _ => (None, None),
        };

        rows.push(TraceRow {
            t,
            x,
            xd,
            xd_normalized: input,
            e,
            u,
            w_norm: controller.weights().norm(),
            p_true: true_feedforward(plant, &reference, t)?,
            p_hat,
            k_e: controller.equivalent_gain(&phi, t),
            p_lmin,
            p_lmax,
        });
        if k % log_every == 0 || k == steps || t >= dense_from - 1e-9 {
            weights.push((t, controller.weights().clone()));
        }
        if k == steps {
            break;
        }

        for s in 0..config.substeps {
            x = integrate_step(plant, &x, u, t + s as f64 * sub_dt, sub_dt)?;
        }
        controller.learn(&phi, &input, e[1], t, config.dt)?;
    }

    Ok(Trace {
        method: controller.kind(),
        dt: config.dt,
        rows,
        weights,
    })
}

/// `Σ v²·dt` (left Riemann sum).
pub fn ise(series: &[f64], dt: f64) -> Result<f64> {
    if series.is_empty() {
        return Err(Error::invalid("ISE of an empty series"));
    }
    Ok(series.iter().map(|v| v * v).sum::<f64>() * dt)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub ise_e1: f64,
    pub ise_p_err: f64,
    pub max_abs_e1: f64,
    /// Smallest logged `λ_min(P)` (RTPL only).
    pub min_p_lmin: Option<f64>,
    /// Largest logged `λ_max(P)` (RTPL only).
    pub max_p_lmax: Option<f64>,
    /// `(t, ‖Ŵ(t) − Ŵ(T)‖)` over the logged weight history.
    pub weight_drift: Vec<(f64, f64)>,
}

impl Metrics {
    /// Integrals run over `[t_0, t_last)` with the step inferred from the
    /// rows' own time stamps, so the values are reproducible from a CSV.
    pub fn from_rows(rows: &[TraceRow], weights: &[(f64, DVector<f64>)]) -> Metrics {
        let dt = sample_period(rows);
        let body = &rows[..rows.len().saturating_sub(1)];
        let e1: Vec<f64> = body.iter().map(|r| r.e[0]).collect();
        let pe: Vec<f64> = body.iter().map(|r| r.p_err()).collect();
        let min_opt = |it: &mut dyn Iterator<Item = f64>| it.reduce(f64::min);
        let max_opt = |it: &mut dyn Iterator<Item = f64>| it.reduce(f64::max);
        let weight_drift = match weights.last() {
            Some((_, last)) => weights.iter().map(|(t, w)| (*t, (w - last).norm())).collect(),
            None => Vec::new(),
        };
        Metrics {
            ise_e1: ise(&e1, dt).unwrap_or(0.0),
            ise_p_err: ise(&pe, dt).unwrap_or(0.0),
            max_abs_e1: rows.iter().map(|r| r.e[0].abs()).fold(0.0, f64::max),
            min_p_lmin: min_opt(&mut rows.iter().filter_map(|r| r.p_lmin)),
            max_p_lmax: max_opt(&mut rows.iter().filter_map(|r| r.p_lmax)),
            weight_drift,
        }
    }
}

fn sample_period(rows: &[TraceRow]) -> f64 {
    match (rows.first(), rows.last()) {
        (Some(a), Some(b)) if rows.len() > 1 => (b.t - a.t) / (rows.len() - 1) as f64,
        _ => 0.0,
    }
}

/// Regressors along the normalized reference over `[start, end]`.
pub fn regressor_history(
    network: &RbfNetwork,
    trajectory: &Trajectory,
    normalization: Normalization,
    start: f64,
    end: f64,
    dt: f64,
) -> Result<Vec<DVector<f64>>> {
    if !(end > start && dt > 0.0) {
        return Err(Error::invalid("regressor window must have positive length"));
    }
    let steps = ((end - start) / dt).round() as usize;
    (0..steps)
        .map(|k| {
            let xd = trajectory.sample(start + k as f64 * dt)?.state();
            network.regressor(&normalization.apply(&xd))
        })
        .collect()
}

/// Excitation Gramian `Σ Φ Φᵀ·dt` of a regressor window and its smallest
/// eigenvalue, optionally restricted to a neuron subset.
pub fn pe_gramian(history: &[DVector<f64>], dt: f64, subset: Option<&[usize]>) -> Result<(DMatrix<f64>, f64)> {
    let first = history
        .first()
        .ok_or_else(|| Error::invalid("regressor window is empty"))?;
    let index: Vec<usize> = match subset {
        Some(s) => {
            if let Some(&bad) = s.iter().find(|&&i| i >= first.len()) {
                return Err(Error::invalid(format!("neuron index {bad} out of range")));
            }
            s.to_vec()
        }
        None => (0..first.len()).collect(),
    };
    if index.is_empty() {
        return Err(Error::invalid("neuron subset is empty"));
    }
    let m = index.len();
    let mut gram = DMatrix::zeros(m, m);
    for phi in history {
        let sub = DVector::from_iterator(m, index.iter().map(|&i| phi[i]));
        gram.ger(dt, &sub, &sub, 1.0);
    }
    let lmin = SymmetricEigen::new(gram.clone()).eigenvalues.min();
    Ok((gram, lmin))
}
