//! Backstepping tracking control with an RBF feedforward term and the
//! weight-update laws that train it.

use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;

use crate::rbf::RbfNetwork;
use crate::smrls::{PartitionRecord, SmrlsState};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct BacksteppingGains {
    gains: Vec<f64>,
}

impl BacksteppingGains {
    pub fn new(gains: Vec<f64>) -> Result<Self> {
        if gains.len() < 2 {
            return Err(Error::invalid("backstepping needs at least two gains"));
        }
        if let Some(k) = gains.iter().find(|k| !(**k > 0.0 && k.is_finite())) {
            return Err(Error::invalid(format!("backstepping gains must be positive, got {k}")));
        }
        Ok(Self { gains })
    }

    pub fn order(&self) -> usize {
        self.gains.len()
    }

    pub fn gains(&self) -> &[f64] {
        &self.gains
    }
}

impl Default for BacksteppingGains {
    fn default() -> Self {
        Self { gains: vec![2.0, 5.0] }
    }
}

/// `e₁ = x_d1 − x₁`, `α₁ = k₁e₁ + x_d2`, `e₂ = α₁ − x₂`.
pub fn tracking_errors(x: &[f64], xd: &[f64], gains: &BacksteppingGains) -> Result<[f64; 2]> {
    if gains.order() != 2 {
        return Err(Error::UnsupportedOrder(gains.order()));
    }
    if x.len() != 2 || xd.len() != 2 {
        return Err(Error::UnsupportedOrder(x.len().max(xd.len())));
    }
    let e1 = xd[0] - x[0];
    let alpha1 = gains.gains[0] * e1 + xd[1];
    Ok([e1, alpha1 - x[1]])
}

/// `u = k_n·e_n + e_{n−1} + Ŵ·Φ`, with the network term passed in already
/// evaluated (zero for a pure PD loop).
pub fn control_output(e: &[f64; 2], network_term: f64, gains: &BacksteppingGains) -> f64 {
    gains.gains[1] * e[1] + e[0] + network_term
}

/// Explicit-Euler step of `Ŵ̇ = Γ·Φ·e_n` with diagonal `Γ`.
pub fn sgd_update(weights: &mut DVector<f64>, gamma: &DVector<f64>, phi: &DVector<f64>, e_n: f64, dt: f64) {
    weights.zip_zip_apply(gamma, phi, |w, g, p| *w += g * p * e_n * dt);
}

/// Saturating ramp: `η0·t/T0` up to `T0`, `η0` after.
pub fn eta(t: f64, eta0: f64, ramp: f64) -> f64 {
    if t <= ramp {
        eta0 * t.max(0.0) / ramp
    } else {
        eta0
    }
}

/// One RTPL learning step: the target handed to the memory is
/// `F = η(t)·e_n + Ŵ·Φ`, and the network weights follow the memory.
pub fn rtpl_update(
    memory: &mut SmrlsState,
    network: &mut RbfNetwork,
    input: &[f64],
    e_n: f64,
    t: f64,
    eta0: f64,
    ramp: f64,
) -> Result<()> {
    let phi = network.regressor(input)?;
    rtpl_step(memory, network, &phi, input, e_n, eta(t, eta0, ramp))
}

fn rtpl_step(
    memory: &mut SmrlsState,
    network: &mut RbfNetwork,
    phi: &DVector<f64>,
    input: &[f64],
    e_n: f64,
    eta: f64,
) -> Result<()> {
    if memory.len() != network.len() {
        return Err(Error::DimensionMismatch {
            expected: network.len(),
            actual: memory.len(),
        });
    }
    let target = eta * e_n + memory.weights().dot(phi);
    memory.step(phi, target, input)?;
    network.set_weights(memory.weights().clone())
}

/// `K_E = η(t)·ΦᵀPΦ` over the full regressor.
pub fn equivalent_gain(
    memory: &SmrlsState,
    network: &RbfNetwork,
    input: &[f64],
    t: f64,
    eta0: f64,
    ramp: f64,
) -> Result<f64> {
    let phi = network.regressor(input)?;
    Ok(eta(t, eta0, ramp) * phi.dot(&(memory.gain() * &phi)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LearnerKind {
    Pd,
    Sgdl,
    Rtpl,
    Frozen,
}

impl LearnerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            LearnerKind::Pd => "pd",
            LearnerKind::Sgdl => "sgdl",
            LearnerKind::Rtpl => "rtpl",
            LearnerKind::Frozen => "frozen",
        }
    }
}

impl fmt::Display for LearnerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LearnerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pd" => Ok(LearnerKind::Pd),
            "sgdl" => Ok(LearnerKind::Sgdl),
            "rtpl" => Ok(LearnerKind::Rtpl),
            "frozen" => Ok(LearnerKind::Frozen),
            other => Err(Error::parse("learner", format!("unknown learner `{other}`"))),
        }
    }
}

/// Weight-update strategy attached to a controller.
#[derive(Debug, Clone)]
pub enum Learner {
    /// No network term at all.
    Pd,
    Sgdl {
        gamma: DVector<f64>,
    },
    Rtpl {
        eta0: f64,
        ramp: f64,
        memory: Box<SmrlsState>,
    },
    /// Network term with constant weights.
    Frozen,
}

impl Learner {
    pub fn sgdl(gamma: DVector<f64>) -> Result<Self> {
        if gamma.iter().any(|g| !(*g > 0.0 && g.is_finite())) {
            return Err(Error::invalid("Γ must have positive diagonal entries"));
        }
        Ok(Learner::Sgdl { gamma })
    }

    pub fn rtpl(eta0: f64, ramp: f64, memory: SmrlsState) -> Result<Self> {
        if !(eta0 > 0.0 && ramp > 0.0) {
            return Err(Error::invalid(format!(
                "η0 and T0 must be positive, got {eta0}, {ramp}"
            )));
        }
        Ok(Learner::Rtpl {
            eta0,
            ramp,
            memory: Box::new(memory),
        })
    }

    pub fn kind(&self) -> LearnerKind {
        match self {
            Learner::Pd => LearnerKind::Pd,
            Learner::Sgdl { .. } => LearnerKind::Sgdl,
            Learner::Rtpl { .. } => LearnerKind::Rtpl,
            Learner::Frozen => LearnerKind::Frozen,
        }
    }
}

/// Gains, network and learner for one closed-loop run.
#[derive(Debug, Clone)]
pub struct Controller {
    pub gains: BacksteppingGains,
    pub network: RbfNetwork,
    pub learner: Learner,
}

impl Controller {
    pub fn new(gains: BacksteppingGains, network: RbfNetwork, learner: Learner) -> Result<Self> {
        let n = network.len();
        match &learner {
            Learner::Sgdl { gamma } if gamma.len() != n => {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    actual: gamma.len(),
                })
            }
            Learner::Rtpl { memory, .. } if memory.len() != n => {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    actual: memory.len(),
                })
            }
            _ => {}
        }
        let mut c = Self {
            gains,
            network,
            learner,
        };
        if let Learner::Rtpl { memory, .. } = &c.learner {
            c.network.set_weights(memory.weights().clone())?;
        }
        Ok(c)
    }

    pub fn kind(&self) -> LearnerKind {
        self.learner.kind()
    }

    pub fn weights(&self) -> &DVector<f64> {
        self.network.weights()
    }

    pub fn uses_network(&self) -> bool {
        !matches!(self.learner, Learner::Pd)
    }

    pub fn network_term(&self, phi: &DVector<f64>) -> f64 {
        if self.uses_network() {
            self.network.weights().dot(phi)
        } else {
            0.0
        }
    }

    pub fn memory(&self) -> Option<&SmrlsState> {
        match &self.learner {
            Learner::Rtpl { memory, .. } => Some(memory),
            _ => None,
        }
    }

    /// `K_E` for RTPL learners, `None` otherwise.
    pub fn equivalent_gain(&self, phi: &DVector<f64>, t: f64) -> Option<f64> {
        match &self.learner {
            Learner::Rtpl { eta0, ramp, memory } => Some(eta(t, *eta0, *ramp) * phi.dot(&(memory.gain() * phi))),
            _ => None,
        }
    }

    /// Apply the learner's update for the sample taken at time `t`.
    pub fn learn(&mut self, phi: &DVector<f64>, input: &[f64], e_n: f64, t: f64, dt: f64) -> Result<()> {
        match &mut self.learner {
            Learner::Pd | Learner::Frozen => Ok(()),
            Learner::Sgdl { gamma } => {
                let mut w = self.network.weights().clone();
                sgd_update(&mut w, gamma, phi, e_n, dt);
                self.network.set_weights(w)
            }
            Learner::Rtpl { eta0, ramp, memory } => {
                rtpl_step(memory, &mut self.network, phi, input, e_n, eta(t, *eta0, *ramp))
            }
        }
    }
}

/// Frozen weights extracted from a learning run.
#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeSnapshot {
    pub weights: DVector<f64>,
    pub method: LearnerKind,
    /// Seconds of learning that produced the weights.
    pub learning_duration: f64,
    /// Selective-memory records, empty for non-RTPL sources.
    pub records: Vec<(usize, PartitionRecord)>,
}

/// Time average of the weights over `[start, start + window]` by the
/// trapezoidal rule, interpolating linearly at window edges.
pub fn extract_integral(history: &[(f64, DVector<f64>)], start: f64, window: f64) -> Result<KnowledgeSnapshot> {
    if window.is_nan() || window <= 0.0 {
        return Err(Error::invalid("integration window must be positive"));
    }
    let end = start + window;
    let (first, last) = match (history.first(), history.last()) {
        (Some(f), Some(l)) => (f.0, l.0),
        _ => return Err(Error::invalid("weight history is empty")),
    };
    let tol = 1e-9 * end.abs().max(1.0);
    if start < first - tol || end > last + tol {
        return Err(Error::OutOfRange {
            t: if start < first { start } else { end },
            start: first,
            end: last,
        });
    }

    let at = |t: f64| -> DVector<f64> {
        let k = history.partition_point(|(s, _)| *s < t);
        if k == 0 {
            return history[0].1.clone();
        }
        if k == history.len() {
            return history[k - 1].1.clone();
        }
        let (t0, w0) = &history[k - 1];
        let (t1, w1) = &history[k];
        if (t1 - t0).abs() < f64::EPSILON {
            return w1.clone();
        }
        let a = (t - t0) / (t1 - t0);
        w0 * (1.0 - a) + w1 * a
    };

    let mut points: Vec<(f64, DVector<f64>)> = vec![(start, at(start))];
    points.extend(
        history
            .iter()
            .filter(|(t, _)| *t > start + tol && *t < end - tol)
            .cloned(),
    );
    points.push((end, at(end)));

    let mut acc = DVector::zeros(points[0].1.len());
    for pair in points.windows(2) {
        let h = pair[1].0 - pair[0].0;
        acc += (&pair[0].1 + &pair[1].1) * (0.5 * h);
    }
    Ok(KnowledgeSnapshot {
        weights: acc / window,
        method: LearnerKind::Sgdl,
        learning_duration: end,
        records: Vec::new(),
    })
}

/// The current memory weights, taken as they are.
pub fn extract_final(memory: &SmrlsState, learning_duration: f64) -> KnowledgeSnapshot {
    KnowledgeSnapshot {
        weights: memory.weights().clone(),
        method: LearnerKind::Rtpl,
        learning_duration,
        records: memory.occupied_records().map(|(i, r)| (i, r.clone())).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rbf::LatticeSpec;
    use crate::smrls::PartitionGrid;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn gains() -> BacksteppingGains {
        BacksteppingGains::default()
    }

    fn scalar_memory() -> SmrlsState {
        SmrlsState::new(100.0, 1, PartitionGrid::square(-1.0, 1.0, 100).unwrap()).unwrap()
    }

    /// One neuron with φ = 1 at the origin.
    fn unit_network() -> RbfNetwork {
        RbfNetwork::from_parts(vec![vec![0.0, 0.0]], vec![0.5], DVector::zeros(1)).unwrap()
    }

    #[test]
    fn tracking_error_examples() {
        assert_eq!(tracking_errors(&[0.3, 0.1], &[0.3, 0.1], &gains()).unwrap(), [0.0, 0.0]);
        let e = tracking_errors(&[0.5, 0.1], &[0.6, 0.3], &gains()).unwrap();
        assert_relative_eq!(e[0], 0.1, epsilon = 1e-15);
        assert_relative_eq!(e[1], 0.4, epsilon = 1e-15);
        assert_eq!(tracking_errors(&[0.0, 0.0], &[0.0, 1.0], &gains()).unwrap(), [0.0, 1.0]);

        let third = BacksteppingGains::new(vec![1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(
            tracking_errors(&[0.0; 3], &[0.0; 3], &third),
            Err(Error::UnsupportedOrder(3))
        ));
        assert!(BacksteppingGains::new(vec![1.0, 0.0]).is_err());
    }

    #[test]
    fn control_output_examples() {
        assert_eq!(control_output(&[0.0, 0.0], 0.0, &gains()), 0.0);
        assert_relative_eq!(control_output(&[0.1, 0.2], 0.0, &gains()), 1.1, epsilon = 1e-15);
        assert_relative_eq!(control_output(&[0.1, 0.2], 0.5, &gains()), 1.6, epsilon = 1e-15);
    }

    #[test]
    fn sgd_update_examples() {
        let mut w = DVector::from_vec(vec![0.3]);
        sgd_update(
            &mut w,
            &DVector::from_vec(vec![0.1]),
            &DVector::from_vec(vec![1.0]),
            0.0,
            0.005,
        );
        assert_eq!(w[0], 0.3);

        let mut w = DVector::zeros(1);
        sgd_update(
            &mut w,
            &DVector::from_vec(vec![0.1]),
            &DVector::from_vec(vec![1.0]),
            0.2,
            0.005,
        );
        assert_relative_eq!(w[0], 1e-4, epsilon = 1e-18);
    }

    #[test]
    fn eta_examples() {
        assert_eq!(eta(0.0, 5.0, 2.0), 0.0);
        assert_eq!(eta(1.0, 5.0, 2.0), 2.5);
        assert_eq!(eta(2.0, 5.0, 2.0), 5.0);
        assert_eq!(eta(10.0, 5.0, 2.0), 5.0);
    }

    #[test]
    fn rtpl_update_examples() {
        let mut memory = scalar_memory();
        let mut net = unit_network();
        rtpl_update(&mut memory, &mut net, &[0.0, 0.0], 0.4, 2.0, 5.0, 2.0).unwrap();
        assert_relative_eq!(memory.weights()[0], 1.980198, epsilon = 5e-7);
        assert_eq!(net.weights(), memory.weights());
        assert_eq!(memory.record(memory.grid().locate(&[0.0, 0.0])).unwrap().target, 2.0);

        let mut memory = scalar_memory();
        let mut net = unit_network();
        rtpl_update(&mut memory, &mut net, &[0.0, 0.0], 0.4, 0.0, 5.0, 2.0).unwrap();
        assert_eq!(memory.weights()[0], 0.0);

        let mut memory = scalar_memory();
        let mut net = unit_network();
        rtpl_update(&mut memory, &mut net, &[0.0, 0.0], 0.0, 7.0, 5.0, 2.0).unwrap();
        assert_eq!(net.evaluate(&[0.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn equivalent_gain_examples() {
        let memory = scalar_memory();
        let net = unit_network();
        assert_relative_eq!(
            equivalent_gain(&memory, &net, &[0.0, 0.0], 5.0, 5.0, 2.0).unwrap(),
            500.0,
            epsilon = 1e-9
        );
        assert_eq!(equivalent_gain(&memory, &net, &[0.0, 0.0], 0.0, 5.0, 2.0).unwrap(), 0.0);
        assert!(equivalent_gain(&memory, &net, &[20.0, 0.0], 5.0, 5.0, 2.0).unwrap() < 1e-100);
    }

    #[test]
    fn integral_extraction() {
        let w = DVector::from_vec(vec![1.5, -2.0]);
        let constant: Vec<_> = (0..=100).map(|k| (k as f64 * 0.1, w.clone())).collect();
        let snap = extract_integral(&constant, 5.0, 5.0).unwrap();
        assert!((snap.weights - &w).amax() < 1e-12);

        let ramp: Vec<_> = (0..=50)
            .map(|k| (k as f64 * 0.1, DVector::from_element(1, 4.0 * k as f64 / 50.0)))
            .collect();
        let snap = extract_integral(&ramp, 0.0, 5.0).unwrap();
        assert_relative_eq!(snap.weights[0], 2.0, epsilon = 1e-12);

        assert!(extract_integral(&ramp, 1.0, 5.0).is_err());
        assert!(extract_integral(&ramp, -1.0, 2.0).is_err());
    }

    #[test]
    fn final_extraction_is_a_copy() {
        let mut memory = scalar_memory();
        assert_eq!(extract_final(&memory, 0.0).weights[0], 0.0);
        let one = DVector::from_element(1, 1.0);
        memory.step(&one, 2.0, &[0.1, 0.1]).unwrap();
        memory.step(&one, 3.0, &[0.1, 0.1]).unwrap();
        let snap = extract_final(&memory, 100.0);
        assert_relative_eq!(snap.weights[0], 2.970297, epsilon = 5e-7);
        memory.step(&one, 9.0, &[0.5, 0.5]).unwrap();
        assert_relative_eq!(snap.weights[0], 2.970297, epsilon = 5e-7);
        assert_eq!(snap.records.len(), 1);
    }

    #[test]
    fn frozen_controller_never_learns() {
        let mut net = RbfNetwork::lattice(&LatticeSpec::square(-1.0, 1.0, 3), 0.5).unwrap();
        net.set_weights(DVector::from_element(9, 0.7)).unwrap();
        let mut c = Controller::new(gains(), net, Learner::Frozen).unwrap();
        let before = c.weights().clone();
        let phi = c.network.regressor(&[0.1, 0.2]).unwrap();
        c.learn(&phi, &[0.1, 0.2], 3.0, 10.0, 0.005).unwrap();
        assert_eq!(c.weights(), &before);
    }

    proptest! {
        #[test]
        fn control_is_affine_in_weights(
            e1 in -1.0f64..1.0, e2 in -1.0f64..1.0,
            w in prop::collection::vec(-3.0f64..3.0, 9),
            x in prop::collection::vec(-1.0f64..1.0, 2),
        ) {
            let mut net = RbfNetwork::lattice(&LatticeSpec::square(-1.0, 1.0, 3), 0.5).unwrap();
            let phi = net.regressor(&x).unwrap();
            let u0 = control_output(&[e1, e2], 0.0, &gains());
            net.set_weights(DVector::from_vec(w)).unwrap();
            let c = Controller::new(gains(), net, Learner::Frozen).unwrap();
            let u = control_output(&[e1, e2], c.network_term(&phi), &gains());
            prop_assert!((u - u0 - c.weights().dot(&phi)).abs() < 1e-12);
        }

        #[test]
        fn sgd_sign_reflection(e in -2.0f64..2.0, w0 in prop::collection::vec(-1.0f64..1.0, 4)) {
            let gamma = DVector::from_element(4, 0.1);
            let phi = DVector::from_vec(vec![0.2, 0.9, 0.4, 0.1]);
            let base = DVector::from_vec(w0);
            let (mut a, mut b) = (base.clone(), base.clone());
            sgd_update(&mut a, &gamma, &phi, e, 0.005);
            sgd_update(&mut b, &gamma, &phi, -e, 0.005);
            prop_assert!(((&a - &base) + (&b - &base)).amax() < 1e-15);
        }

        #[test]
        fn eta_monotone_and_bounded(t1 in 0.0f64..10.0, dt in 0.0f64..5.0) {
            let (a, b) = (eta(t1, 5.0, 2.0), eta(t1 + dt, 5.0, 2.0));
            prop_assert!(a <= b && b <= 5.0 && a >= 0.0);
        }
    }
}
