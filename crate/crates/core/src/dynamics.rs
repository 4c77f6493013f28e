//! Plants in Brunovsky form, the inverted pendulum-cart, and reference
//! trajectories.
//!
//! Every plant here is second order: `ẋ₁ = x₂`, `ẋ₂ = f(x) + g(x)·u`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

pub type State = [f64; 2];

/// A second-order affine plant whose parameters may depend on time.
pub trait Plant: Send + Sync {
    fn drift(&self, x: &State, t: f64) -> f64;
    fn input_gain(&self, x: &State, t: f64) -> f64;

    fn derivative(&self, x: &State, u: f64, t: f64) -> State {
        [x[1], self.drift(x, t) + self.input_gain(x, t) * u]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PendulumParams {
    /// kg
    pub cart_mass: f64,
    /// kg
    pub pole_mass: f64,
    /// Half the pole length, m.
    pub half_length: f64,
    /// m/s²
    pub gravity: f64,
}

impl Default for PendulumParams {
    fn default() -> Self {
        Self {
            cart_mass: 0.1,
            pole_mass: 0.02,
            half_length: 0.2,
            gravity: 9.8,
        }
    }
}

impl PendulumParams {
    pub fn with_half_length(self, half_length: f64) -> Self {
        Self { half_length, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.cart_mass, self.pole_mass, self.half_length, self.gravity];
        if all.iter().all(|v| *v > 0.0 && v.is_finite()) {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "pendulum parameters must be positive: {self:?}"
            )))
        }
    }

    fn denominator(&self, x1: f64) -> f64 {
        let c = x1.cos();
        self.half_length * (4.0 / 3.0 - self.pole_mass * c * c / (self.cart_mass + self.pole_mass))
    }
}

/// Drift term of the pendulum angle dynamics.
pub fn pendulum_f(x: &State, p: &PendulumParams) -> f64 {
    let (s, c) = x[0].sin_cos();
    let total = p.cart_mass + p.pole_mass;
    (p.gravity * s - p.pole_mass * p.half_length * x[1] * x[1] * c * s / total) / p.denominator(x[0])
}

/// Input gain of the pendulum angle dynamics.
pub fn pendulum_g(x: &State, p: &PendulumParams) -> f64 {
    let total = p.cart_mass + p.pole_mass;
    (x[0].cos() / total) / p.denominator(x[0])
}

/// Pole half-length `0.2 m` before 50 s and `0.8 m` from 50 s on.
pub fn perturbation_schedule(t: f64) -> PendulumParams {
    PendulumPlant::perturbed().params_at(t)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LengthStep {
    pub at: f64,
    pub half_length: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PendulumPlant {
    pub params: PendulumParams,
    /// Abrupt change of the half-length; the switching instant takes the new value.
    pub step: Option<LengthStep>,
}

impl PendulumPlant {
    pub fn new(params: PendulumParams) -> Self {
        Self { params, step: None }
    }

    pub fn perturbed() -> Self {
        Self {
            params: PendulumParams::default(),
            step: Some(LengthStep {
                at: 50.0,
                half_length: 0.8,
            }),
        }
    }

    pub fn params_at(&self, t: f64) -> PendulumParams {
        match self.step {
            Some(s) if t >= s.at => self.params.with_half_length(s.half_length),
            _ => self.params,
        }
    }
}

impl Default for PendulumPlant {
    fn default() -> Self {
        Self::new(PendulumParams::default())
    }
}

impl Plant for PendulumPlant {
    fn drift(&self, x: &State, t: f64) -> f64 {
        pendulum_f(x, &self.params_at(t))
    }

    fn input_gain(&self, x: &State, t: f64) -> f64 {
        pendulum_g(x, &self.params_at(t))
    }
}

/// Reference position, velocity and acceleration at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceSample {
    pub position: f64,
    pub velocity: f64,
    pub acceleration: f64,
}

impl ReferenceSample {
    pub fn state(&self) -> State {
        [self.position, self.velocity]
    }
}

/// Declarative trajectory description, as written in configuration files.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TrajectorySpec {
    Sinusoid { duration: f64 },
    GrowingSinusoid { duration: f64 },
    RandomSpline { seed: u64, knots: usize, duration: f64 },
}

impl TrajectorySpec {
    pub fn duration(&self) -> f64 {
        match *self {
            TrajectorySpec::Sinusoid { duration }
            | TrajectorySpec::GrowingSinusoid { duration }
            | TrajectorySpec::RandomSpline { duration, .. } => duration,
        }
    }

    pub fn with_duration(self, duration: f64) -> Self {
        match self {
            TrajectorySpec::Sinusoid { .. } => TrajectorySpec::Sinusoid { duration },
            TrajectorySpec::GrowingSinusoid { .. } => TrajectorySpec::GrowingSinusoid { duration },
            TrajectorySpec::RandomSpline { seed, knots, .. } => TrajectorySpec::RandomSpline { seed, knots, duration },
        }
    }

    /// Knot count at the default density of 20 knots per 100 s.
    pub fn default_knots(duration: f64) -> usize {
        ((duration / 5.0).round() as usize).max(2)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrajectoryShape {
    /// `x_d1 = sin t`
    Sinusoid,
    /// `x_d1 = (20 + t)·sin t / 120`
    GrowingSinusoid,
    RandomSpline(CubicSpline),
}

/// Per-dimension linear map of `(x_d1, x_d2)` into `[-1, 1]²`, clamped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalization {
    pub scale: [f64; 2],
}

impl Normalization {
    pub const IDENTITY: Normalization = Normalization { scale: [1.0, 1.0] };

    /// Map whose image of `[-max_abs, max_abs]` is `[-1, 1]` per dimension.
    pub fn from_ranges(max_abs: [f64; 2]) -> Result<Self> {
        if max_abs.iter().any(|m| !(*m > 0.0 && m.is_finite())) {
            return Err(Error::invalid(format!("range must be positive: {max_abs:?}")));
        }
        Ok(Self {
            scale: [1.0 / max_abs[0], 1.0 / max_abs[1]],
        })
    }

    pub fn apply(&self, x: &State) -> [f64; 2] {
        [
            (x[0] * self.scale[0]).clamp(-1.0, 1.0),
            (x[1] * self.scale[1]).clamp(-1.0, 1.0),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    spec: TrajectorySpec,
    shape: TrajectoryShape,
    normalization: Normalization,
}

/// Sampling grid for ranges that have no closed form.
const RANGE_SCAN_STEP: f64 = 1e-3;

impl Trajectory {
    pub fn new(spec: TrajectorySpec) -> Result<Self> {
        let duration = spec.duration();
        if !(duration > 0.0 && duration.is_finite()) {
            return Err(Error::invalid(format!(
                "trajectory duration must be positive, got {duration}"
            )));
        }
        let shape = match spec {
            TrajectorySpec::Sinusoid { .. } => TrajectoryShape::Sinusoid,
            TrajectorySpec::GrowingSinusoid { .. } => TrajectoryShape::GrowingSinusoid,
            TrajectorySpec::RandomSpline { seed, knots, duration } => {
                TrajectoryShape::RandomSpline(CubicSpline::random(seed, knots, duration)?)
            }
        };
        let range = match &shape {
            TrajectoryShape::Sinusoid => [1.0, 1.0],
            TrajectoryShape::GrowingSinusoid => {
                let mut m = [0.0f64; 2];
                let steps = (duration / RANGE_SCAN_STEP).ceil() as usize;
                for k in 0..=steps {
                    let s = growing_sinusoid((k as f64 * RANGE_SCAN_STEP).min(duration));
                    m[0] = m[0].max(s.position.abs());
                    m[1] = m[1].max(s.velocity.abs());
                }
                m
            }
            TrajectoryShape::RandomSpline(spline) => spline.max_abs(),
        };
        Ok(Self {
            spec,
            shape,
            normalization: Normalization::from_ranges(range)?,
        })
    }

    pub fn spec(&self) -> &TrajectorySpec {
        &self.spec
    }

    pub fn shape(&self) -> &TrajectoryShape {
        &self.shape
    }

    pub fn duration(&self) -> f64 {
        self.spec.duration()
    }

    /// The map fitted to this trajectory's own range.
    pub fn normalization(&self) -> Normalization {
        self.normalization
    }

    pub fn sample(&self, t: f64) -> Result<ReferenceSample> {
        let end = self.duration();
        if !(t >= 0.0 && t <= end * (1.0 + 1e-12)) {
            return Err(Error::OutOfRange { t, start: 0.0, end });
        }
        Ok(match &self.shape {
            TrajectoryShape::Sinusoid => {
                let (s, c) = t.sin_cos();
                ReferenceSample {
                    position: s,
                    velocity: c,
                    acceleration: -s,
                }
            }
            TrajectoryShape::GrowingSinusoid => growing_sinusoid(t),
            TrajectoryShape::RandomSpline(spline) => spline.sample(t.min(end)),
        })
    }
}

fn growing_sinusoid(t: f64) -> ReferenceSample {
    let (s, c) = t.sin_cos();
    let a = 20.0 + t;
    ReferenceSample {
        position: a * s / 120.0,
        velocity: (a * c + s) / 120.0,
        acceleration: (2.0 * c - a * s) / 120.0,
    }
}

/// Clamped cubic spline (zero end slopes) through knots at uniform times.
#[derive(Debug, Clone, PartialEq)]
pub struct CubicSpline {
    step: f64,
    values: Vec<f64>,
    /// Second derivative at each knot.
    moments: Vec<f64>,
}

impl CubicSpline {
    /// Knot values drawn uniformly from `[-1, 1]`, knots spread evenly over
    /// `[0, duration]`. If the interpolant overshoots `[-1, 1]` between
    /// knots, all knot values are scaled down so its peak is exactly 1.
    pub fn random(seed: u64, knots: usize, duration: f64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values: Vec<f64> = (0..knots).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let spline = Self::through(values.clone(), duration)?;
        let peak = spline.max_abs()[0];
        if peak <= 1.0 {
            return Ok(spline);
        }
        // the interpolant is linear in the knot values
        Self::through(values.iter().map(|v| v / peak).collect(), duration)
    }

    pub fn through(values: Vec<f64>, duration: f64) -> Result<Self> {
        let n = values.len();
        if n < 2 {
            return Err(Error::invalid(format!("spline needs at least 2 knots, got {n}")));
        }
        if !(duration > 0.0 && duration.is_finite()) {
            return Err(Error::invalid("spline duration must be positive"));
        }
        let h = duration / (n - 1) as f64;
        // Tridiagonal system for the moments with clamped ends (S' = 0).
        let mut diag = vec![4.0 * h; n];
        diag[0] = 2.0 * h;
        diag[n - 1] = 2.0 * h;
        let off = h;
        let mut rhs = vec![0.0; n];
        rhs[0] = 6.0 * (values[1] - values[0]) / h;
        rhs[n - 1] = -6.0 * (values[n - 1] - values[n - 2]) / h;
        for i in 1..n - 1 {
            rhs[i] = 6.0 * (values[i + 1] - 2.0 * values[i] + values[i - 1]) / h;
        }
        // Thomas algorithm
        let mut c = vec![0.0; n];
        let mut d = vec![0.0; n];
        c[0] = off / diag[0];
        d[0] = rhs[0] / diag[0];
        for i in 1..n {
            let m = diag[i] - off * c[i - 1];
            c[i] = off / m;
            d[i] = (rhs[i] - off * d[i - 1]) / m;
        }
        let mut moments = vec![0.0; n];
        moments[n - 1] = d[n - 1];
        for i in (0..n - 1).rev() {
            moments[i] = d[i] - c[i] * moments[i + 1];
        }
        Ok(Self {
            step: h,
            values,
            moments,
        })
    }

    pub fn knots(&self) -> &[f64] {
        &self.values
    }

    pub fn duration(&self) -> f64 {
        self.step * (self.values.len() - 1) as f64
    }

    fn segment(&self, t: f64) -> (usize, f64) {
        let last = self.values.len() - 2;
        let i = ((t / self.step).floor().max(0.0) as usize).min(last);
        (i, t - i as f64 * self.step)
    }

    /// Polynomial coefficients `a + b·s + c·s² + d·s³` of segment `i`.
    fn coefficients(&self, i: usize) -> [f64; 4] {
        let h = self.step;
        let (y0, y1) = (self.values[i], self.values[i + 1]);
        let (m0, m1) = (self.moments[i], self.moments[i + 1]);
        [
            y0,
            (y1 - y0) / h - h * (2.0 * m0 + m1) / 6.0,
            m0 / 2.0,
            (m1 - m0) / (6.0 * h),
        ]
    }

    pub fn sample(&self, t: f64) -> ReferenceSample {
        let (i, s) = self.segment(t);
        let [a, b, c, d] = self.coefficients(i);
        ReferenceSample {
            position: a + s * (b + s * (c + s * d)),
            velocity: b + s * (2.0 * c + 3.0 * d * s),
            acceleration: 2.0 * c + 6.0 * d * s,
        }
    }

    /// Exact maxima of `|position|` and `|velocity|` over the whole spline.
    pub fn max_abs(&self) -> [f64; 2] {
        let h = self.step;
        let mut m = [0.0f64; 2];
        for i in 0..self.values.len() - 1 {
            let [a, b, c, d] = self.coefficients(i);
            let pos = |s: f64| a + s * (b + s * (c + s * d));
            let vel = |s: f64| b + s * (2.0 * c + 3.0 * d * s);
            let mut pos_candidates = vec![0.0, h];
            // roots of the velocity quadratic 3d s² + 2c s + b
            if d.abs() > 1e-300 {
                let disc = 4.0 * c * c - 12.0 * d * b;
                if disc >= 0.0 {
                    let r = disc.sqrt();
                    pos_candidates.push((-2.0 * c + r) / (6.0 * d));
                    pos_candidates.push((-2.0 * c - r) / (6.0 * d));
                }
            } else if c.abs() > 1e-300 {
                pos_candidates.push(-b / (2.0 * c));
            }
            let mut vel_candidates = vec![0.0, h];
            if d.abs() > 1e-300 {
                vel_candidates.push(-c / (3.0 * d));
            }
            for s in pos_candidates.into_iter().filter(|s| (0.0..=h).contains(s)) {
                m[0] = m[0].max(pos(s).abs());
            }
            for s in vel_candidates.into_iter().filter(|s| (0.0..=h).contains(s)) {
                m[1] = m[1].max(vel(s).abs());
            }
        }
        m
    }
}

/// Feedforward the network is meant to learn:
/// `p(x_d) = (ẋ_d2 − f(x_d)) / g(x_d)`.
pub fn true_feedforward(plant: &dyn Plant, reference: &ReferenceSample, t: f64) -> Result<f64> {
    let xd = reference.state();
    let g = plant.input_gain(&xd, t);
    if g.is_nan() || g <= 0.0 {
        return Err(Error::invalid(format!(
            "input gain {g} is not positive at x_d = {xd:?}"
        )));
    }
    Ok((reference.acceleration - plant.drift(&xd, t)) / g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_6};

    fn sig6(a: f64, b: f64) {
        assert!(((a - b) / b).abs() < 5e-6, "{a} vs {b}");
    }

    #[test]
    fn pendulum_drift_values() {
        let p = PendulumParams::default();
        assert_eq!(pendulum_f(&[0.0, 0.0], &p), 0.0);
        sig6(pendulum_f(&[FRAC_PI_6, 0.0], &p), 20.2759);
        sig6(pendulum_f(&[FRAC_PI_6, 0.0], &p.with_half_length(0.8)), 5.06897);
    }

    #[test]
    fn pendulum_gain_values() {
        let p = PendulumParams::default();
        sig6(pendulum_g(&[0.0, 0.0], &p), 35.7143);
        sig6(pendulum_g(&[0.0, 0.0], &p.with_half_length(0.8)), 8.92857);
        for k in 1..100 {
            let x1 = -FRAC_PI_2 + k as f64 * std::f64::consts::PI / 100.0;
            assert!(pendulum_g(&[x1, 3.0], &p) > 0.0);
        }
    }

    #[test]
    fn input_gain_bounded_on_operating_region() {
        let p = PendulumParams::default();
        let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
        for k in 0..=200 {
            let g = pendulum_g(&[-1.0 + k as f64 * 0.01, 0.0], &p);
            lo = lo.min(g);
            hi = hi.max(g);
        }
        assert!(lo > 15.0 && hi < 36.0, "[{lo}, {hi}]");
    }

    #[test]
    fn perturbation_boundaries() {
        assert_eq!(perturbation_schedule(0.0).half_length, 0.2);
        assert_eq!(perturbation_schedule(49.999).half_length, 0.2);
        assert_eq!(perturbation_schedule(50.0).half_length, 0.8);
        assert_eq!(perturbation_schedule(100.0).half_length, 0.8);
        assert_eq!(perturbation_schedule(100.0).cart_mass, 0.1);
    }

    #[test]
    fn trajectory_initial_samples() {
        let s = Trajectory::new(TrajectorySpec::Sinusoid { duration: 100.0 }).unwrap();
        assert_eq!(
            s.sample(0.0).unwrap(),
            ReferenceSample {
                position: 0.0,
                velocity: 1.0,
                acceleration: 0.0
            }
        );
        assert_eq!(s.normalization(), Normalization::IDENTITY);

        let g = Trajectory::new(TrajectorySpec::GrowingSinusoid { duration: 100.0 }).unwrap();
        let r = g.sample(0.0).unwrap();
        assert_eq!(r.position, 0.0);
        assert_relative_eq!(r.velocity, 1.0 / 6.0, epsilon = 1e-15);
        assert_relative_eq!(r.acceleration, 1.0 / 60.0, epsilon = 1e-15);

        assert!(s.sample(100.5).is_err());
        assert!(s.sample(-0.1).is_err());
    }

    #[test]
    fn random_spline_is_seeded() {
        let spec = TrajectorySpec::RandomSpline {
            seed: 5,
            knots: 20,
            duration: 100.0,
        };
        let a = Trajectory::new(spec).unwrap();
        let b = Trajectory::new(spec).unwrap();
        let c = Trajectory::new(TrajectorySpec::RandomSpline {
            seed: 6,
            knots: 20,
            duration: 100.0,
        })
        .unwrap();
        let mut differs = false;
        for k in 0..1000 {
            let t = k as f64 * 0.1;
            assert_eq!(a.sample(t).unwrap(), b.sample(t).unwrap());
            differs |= a.sample(t).unwrap() != c.sample(t).unwrap();
        }
        assert!(differs);
    }

    #[test]
    fn random_spline_stays_in_unit_range() {
        for seed in 0..50 {
            let sp = CubicSpline::random(seed, 20, 100.0).unwrap();
            assert!(sp.max_abs()[0] <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn spline_interpolates_knots_with_clamped_ends() {
        let sp = CubicSpline::through(vec![0.0, 1.0, -0.5, 0.25], 3.0).unwrap();
        for (i, v) in sp.knots().iter().enumerate() {
            assert_relative_eq!(sp.sample(i as f64).position, *v, epsilon = 1e-12);
        }
        assert_relative_eq!(sp.sample(0.0).velocity, 0.0, epsilon = 1e-12);
        assert_relative_eq!(sp.sample(3.0).velocity, 0.0, epsilon = 1e-12);
        // C² at interior knots
        for i in 1..3 {
            let t = i as f64;
            let (l, r) = (sp.sample(t - 1e-9), sp.sample(t + 1e-9));
            assert!((l.acceleration - r.acceleration).abs() < 1e-6);
        }
    }

    #[test]
    fn spline_range_is_exact_maximum() {
        let sp = CubicSpline::random(9, 20, 100.0).unwrap();
        let m = sp.max_abs();
        let mut scan = [0.0f64; 2];
        for k in 0..=100_000 {
            let s = sp.sample(k as f64 * 1e-3);
            scan[0] = scan[0].max(s.position.abs());
            scan[1] = scan[1].max(s.velocity.abs());
        }
        assert!(m[0] >= scan[0] && m[0] - scan[0] < 1e-6);
        assert!(m[1] >= scan[1] && m[1] - scan[1] < 1e-6);
    }

    #[test]
    fn velocity_matches_central_difference() {
        let h = 1e-4;
        for spec in [
            TrajectorySpec::Sinusoid { duration: 20.0 },
            TrajectorySpec::GrowingSinusoid { duration: 20.0 },
            TrajectorySpec::RandomSpline {
                seed: 1,
                knots: 8,
                duration: 20.0,
            },
        ] {
            let tr = Trajectory::new(spec).unwrap();
            for k in 1..199 {
                let t = k as f64 * 0.1 + 0.0137;
                let (a, b, m) = (
                    tr.sample(t - h).unwrap(),
                    tr.sample(t + h).unwrap(),
                    tr.sample(t).unwrap(),
                );
                assert!(((b.position - a.position) / (2.0 * h) - m.velocity).abs() < 1e-6);
                assert!(((b.velocity - a.velocity) / (2.0 * h) - m.acceleration).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn normalization_examples() {
        let n = Normalization::from_ranges([1.0, 2.0]).unwrap();
        assert_eq!(n.scale, [1.0, 0.5]);
        assert_eq!(n.apply(&[0.5, -1.0]), [0.5, -0.5]);
        assert_eq!(n.apply(&[1.5, 4.0]), [1.0, 1.0]);
        assert_eq!(Normalization::IDENTITY.apply(&[0.3, -0.7]), [0.3, -0.7]);
    }

    #[test]
    fn feedforward_examples() {
        let plant = PendulumPlant::default();
        let s = Trajectory::new(TrajectorySpec::Sinusoid { duration: 10.0 }).unwrap();
        assert_eq!(true_feedforward(&plant, &s.sample(0.0).unwrap(), 0.0).unwrap(), 0.0);

        let xd = [0.3, 0.2];
        let r = ReferenceSample {
            position: 0.3,
            velocity: 0.2,
            acceleration: plant.drift(&xd, 0.0),
        };
        assert_relative_eq!(true_feedforward(&plant, &r, 0.0).unwrap(), 0.0, epsilon = 1e-15);

        // feedforward reproduces the reference acceleration
        let r = ReferenceSample {
            position: 0.4,
            velocity: -0.6,
            acceleration: 1.3,
        };
        let p = true_feedforward(&plant, &r, 0.0).unwrap();
        let xdot = plant.derivative(&r.state(), p, 0.0);
        assert!((xdot[1] - r.acceleration).abs() < 1e-10);
    }
}
