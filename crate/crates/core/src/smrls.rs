//! Selective-memory recursive least squares.
//!
//! The input space is cut into uniform partitions. Each partition keeps the
//! latest sample `(Φ_a, F_a)` that fell into it, and the least-squares
//! problem is always posed over exactly one sample per visited partition:
//! a new sample enters with a rank-one update of `P⁻¹` and the sample it
//! displaces leaves with a rank-one downdate. After any number of steps the
//! weights equal the regularized batch solution over the stored records
//! (see [`SmrlsState::batch_ls_oracle`]).

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::rbf::AxisSpec;
use crate::{Error, Result};

/// Below this the Sherman-Morrison downdate is treated as singular and `P`
/// is rebuilt from `P⁻¹`.
const DOWNDATE_GUARD: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionGrid {
    axes: Vec<AxisSpec>,
}

impl PartitionGrid {
    pub fn new(axes: Vec<AxisSpec>) -> Result<Self> {
        if axes.is_empty() {
            return Err(Error::invalid("partition grid needs at least one axis"));
        }
        for (i, a) in axes.iter().enumerate() {
            if !(a.lower.is_finite() && a.upper.is_finite() && a.lower < a.upper) {
                return Err(Error::invalid(format!("grid axis {i}: bounds out of order")));
            }
            if a.count == 0 {
                return Err(Error::invalid(format!("grid axis {i}: needs at least one cell")));
            }
        }
        Ok(Self { axes })
    }

    pub fn square(lower: f64, upper: f64, count: usize) -> Result<Self> {
        Self::new(vec![AxisSpec::new(lower, upper, count); 2])
    }

    pub fn axes(&self) -> &[AxisSpec] {
        &self.axes
    }

    /// Total number of partitions.
    pub fn len(&self) -> usize {
        self.axes.iter().map(|a| a.count).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Per-axis cell coordinates of `x`. Coordinates outside the grid clamp
    /// to the boundary cell; the upper bound belongs to the last cell.
    pub fn cell(&self, x: &[f64]) -> Vec<usize> {
        self.axes
            .iter()
            .zip(x)
            .map(|(a, &v)| {
                let rel = (v - a.lower) / (a.upper - a.lower) * a.count as f64;
                if rel.is_nan() || rel <= 0.0 {
                    0
                } else {
                    (rel.floor() as usize).min(a.count - 1)
                }
            })
            .collect()
    }

    /// Flat partition index, first axis slowest.
    pub fn locate(&self, x: &[f64]) -> usize {
        self.cell(x)
            .iter()
            .zip(&self.axes)
            .fold(0, |acc, (&c, a)| acc * a.count + c)
    }
}

/// The sample currently held by one partition.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionRecord {
    pub regressor: DVector<f64>,
    pub target: f64,
}

#[derive(Debug, Clone)]
pub struct SmrlsState {
    weights: DVector<f64>,
    gain: DMatrix<f64>,
    inv_gain: DMatrix<f64>,
    p0: f64,
    grid: PartitionGrid,
    /// `None` stands for the zero record of an unvisited partition.
    records: Vec<Option<PartitionRecord>>,
    occupied: usize,
    fallbacks: usize,
}

impl SmrlsState {
    /// `P = p0·I`, `W = 0`, every partition empty.
    pub fn new(p0: f64, neurons: usize, grid: PartitionGrid) -> Result<Self> {
        if !(p0 > 0.0 && p0.is_finite()) {
            return Err(Error::invalid(format!("p0 must be positive, got {p0}")));
        }
        if neurons == 0 {
            return Err(Error::invalid("neuron count must be positive"));
        }
        let records = vec![None; grid.len()];
        Ok(Self {
            weights: DVector::zeros(neurons),
            gain: DMatrix::identity(neurons, neurons) * p0,
            inv_gain: DMatrix::identity(neurons, neurons) / p0,
            p0,
            grid,
            records,
            occupied: 0,
            fallbacks: 0,
        })
    }

    /// Rebuild a state from stored records. `P⁻¹` follows from the records
    /// and `p0` alone; the weights are taken as given.
    pub fn from_records(
        p0: f64,
        grid: PartitionGrid,
        weights: DVector<f64>,
        records: impl IntoIterator<Item = (usize, PartitionRecord)>,
    ) -> Result<Self> {
        let mut state = Self::new(p0, weights.len(), grid)?;
        let n = weights.len();
        for (index, record) in records {
            if index >= state.records.len() {
                return Err(Error::invalid(format!(
                    "partition index {index} outside grid of {}",
                    state.records.len()
                )));
            }
            if record.regressor.len() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    actual: record.regressor.len(),
                });
            }
            state.inv_gain.ger(1.0, &record.regressor, &record.regressor, 1.0);
            if state.records[index].replace(record).is_none() {
                state.occupied += 1;
            } else {
                return Err(Error::invalid(format!("partition {index} listed twice")));
            }
        }
        state.weights = weights;
        state.refresh_gain()?;
        state.fallbacks = 0;
        Ok(state)
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }

    pub fn gain(&self) -> &DMatrix<f64> {
        &self.gain
    }

    pub fn inv_gain(&self) -> &DMatrix<f64> {
        &self.inv_gain
    }

    pub fn p0(&self) -> f64 {
        self.p0
    }

    pub fn grid(&self) -> &PartitionGrid {
        &self.grid
    }

    pub fn record(&self, partition: usize) -> Option<&PartitionRecord> {
        self.records.get(partition).and_then(Option::as_ref)
    }

    /// Occupied partitions in index order.
    pub fn occupied_records(&self) -> impl Iterator<Item = (usize, &PartitionRecord)> {
        self.records
            .iter()
            .enumerate()
            .filter_map(|(i, r)| r.as_ref().map(|r| (i, r)))
    }

    pub fn occupied_count(&self) -> usize {
        self.occupied
    }

    /// How many times the downdate guard forced a dense rebuild of `P`.
    pub fn fallback_count(&self) -> usize {
        self.fallbacks
    }

    /// One selective-memory update with sample `(Φ, F)` observed at `x`.
    pub fn step(&mut self, phi: &DVector<f64>, target: f64, x: &[f64]) -> Result<()> {
        if phi.len() != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                actual: phi.len(),
            });
        }
        let slot = self.grid.locate(x);
        let new = PartitionRecord {
            regressor: phi.clone(),
            target,
        };
        let old = self.records[slot].take();
        if old.as_ref() == Some(&new) {
            self.records[slot] = old;
            return Ok(());
        }

        let new_residual = target - self.weights.dot(phi);
        let old_residual = old.as_ref().map(|r| r.target - self.weights.dot(&r.regressor));

        self.inv_gain.ger(1.0, phi, phi, 1.0);
        if let Some(r) = &old {
            self.inv_gain.ger(-1.0, &r.regressor, &r.regressor, 1.0);
        }

        let p_phi = &self.gain * phi;
        let denom = 1.0 + phi.dot(&p_phi);
        self.gain.ger(-1.0 / denom, &p_phi, &p_phi, 1.0);
        if let Some(r) = &old {
            let p_old = &self.gain * &r.regressor;
            let denom = 1.0 - r.regressor.dot(&p_old);
            if denom <= DOWNDATE_GUARD {
                self.fallbacks += 1;
                self.refresh_gain()?;
            } else {
                self.gain.ger(1.0 / denom, &p_old, &p_old, 1.0);
            }
        }
        symmetrize(&mut self.gain);
        symmetrize(&mut self.inv_gain);

        let mut direction = phi * new_residual;
        if let (Some(r), Some(res)) = (&old, old_residual) {
            direction.axpy(-res, &r.regressor, 1.0);
        }
        self.weights += &self.gain * direction;

        if old.is_none() {
            self.occupied += 1;
        }
        self.records[slot] = Some(new);
        Ok(())
    }

    /// Recompute `P` as the dense inverse of the maintained `P⁻¹`.
    pub fn refresh_gain(&mut self) -> Result<()> {
        let chol = self
            .inv_gain
            .clone()
            .cholesky()
            .ok_or_else(|| Error::NotPositiveDefinite("P⁻¹ has no Cholesky factor".to_string()))?;
        self.gain = chol.inverse();
        symmetrize(&mut self.gain);
        Ok(())
    }

    /// Regularized batch least squares over the stored records, solved
    /// directly: `(I/p0 + Σ Φ_jΦ_jᵀ)⁻¹ Σ Φ_j F_j`.
    pub fn batch_ls_oracle(&self) -> DVector<f64> {
        let n = self.len();
        let mut normal = DMatrix::identity(n, n) / self.p0;
        let mut rhs = DVector::zeros(n);
        for (_, r) in self.occupied_records() {
            normal.ger(1.0, &r.regressor, &r.regressor, 1.0);
            rhs.axpy(r.target, &r.regressor, 1.0);
        }
        normal
            .lu()
            .solve(&rhs)
            .expect("regularized normal matrix is nonsingular")
    }

    /// `(λ_min, λ_max)` of `P`.
    pub fn p_bounds(&self) -> (f64, f64) {
        let eig = SymmetricEigen::new(self.gain.clone()).eigenvalues;
        (eig.min(), eig.max())
    }

    /// Largest absolute asymmetry of `P`.
    pub fn symmetry_error(&self) -> f64 {
        (&self.gain - self.gain.transpose()).amax()
    }

    /// Largest entry of `P·P⁻¹ − I`.
    pub fn inverse_residual(&self) -> f64 {
        let n = self.len();
        (&self.gain * &self.inv_gain - DMatrix::<f64>::identity(n, n)).amax()
    }
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rbf::{LatticeSpec, RbfNetwork};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_state() -> SmrlsState {
        SmrlsState::new(100.0, 1, PartitionGrid::square(-1.0, 1.0, 100).unwrap()).unwrap()
    }

    fn one(v: f64) -> DVector<f64> {
        DVector::from_element(1, v)
    }

    #[test]
    fn init_values() {
        let s = SmrlsState::new(100.0, 25, PartitionGrid::square(-1.0, 1.0, 100).unwrap()).unwrap();
        let (lo, hi) = s.p_bounds();
        assert_relative_eq!(lo, 100.0, epsilon = 1e-9);
        assert_relative_eq!(hi, 100.0, epsilon = 1e-9);
        assert!(s.weights().iter().all(|w| *w == 0.0));
        assert_eq!(s.occupied_count(), 0);

        let s = SmrlsState::new(1.0, 1, PartitionGrid::square(-1.0, 1.0, 1).unwrap()).unwrap();
        assert_eq!(s.gain()[(0, 0)], 1.0);
        assert_eq!(s.inv_gain()[(0, 0)], 1.0);

        assert!(SmrlsState::new(0.0, 3, PartitionGrid::square(-1.0, 1.0, 2).unwrap()).is_err());
        assert!(SmrlsState::new(-1.0, 3, PartitionGrid::square(-1.0, 1.0, 2).unwrap()).is_err());
    }

    #[test]
    fn locate_cells() {
        let g = PartitionGrid::square(-1.0, 1.0, 100).unwrap();
        assert_eq!(g.cell(&[-1.0, -1.0]), vec![0, 0]);
        assert_eq!(g.cell(&[0.0, 0.0]), vec![50, 50]);
        assert_eq!(g.cell(&[1.0, 1.0]), vec![99, 99]);
        assert_eq!(g.cell(&[-3.0, 7.0]), vec![0, 99]);
        assert_eq!(g.locate(&[0.0, 0.0]), 50 * 100 + 50);
        assert_eq!(g.len(), 10_000);
    }

    #[test]
    fn scalar_two_step() {
        let mut s = scalar_state();
        s.step(&one(1.0), 2.0, &[0.1, 0.1]).unwrap();
        assert_relative_eq!(s.inv_gain()[(0, 0)], 1.01, epsilon = 1e-12);
        assert_relative_eq!(s.weights()[0], 1.980198, epsilon = 5e-7);

        s.step(&one(1.0), 3.0, &[0.1, 0.1]).unwrap();
        assert_relative_eq!(s.inv_gain()[(0, 0)], 1.01, epsilon = 1e-12);
        assert_relative_eq!(s.weights()[0], 2.970297, epsilon = 5e-7);
        assert_relative_eq!(s.batch_ls_oracle()[0], 2.970297, epsilon = 5e-7);
        let (lo, hi) = s.p_bounds();
        assert_relative_eq!(lo, 0.990099, epsilon = 5e-7);
        assert_relative_eq!(hi, 0.990099, epsilon = 5e-7);
        assert_eq!(s.occupied_count(), 1);
    }

    #[test]
    fn oracle_two_partitions() {
        let mut s = scalar_state();
        assert_eq!(s.batch_ls_oracle()[0], 0.0);
        s.step(&one(1.0), 2.0, &[-0.5, 0.0]).unwrap();
        s.step(&one(1.0), 4.0, &[0.5, 0.0]).unwrap();
        assert_relative_eq!(s.batch_ls_oracle()[0], 6.0 / 2.01, epsilon = 1e-12);
        assert_relative_eq!(s.weights()[0], 2.985075, epsilon = 5e-7);
    }

    #[test]
    fn zero_regressor_is_inert() {
        let mut s = SmrlsState::new(100.0, 3, PartitionGrid::square(-1.0, 1.0, 4).unwrap()).unwrap();
        let p = s.gain().clone();
        s.step(&DVector::zeros(3), 5.0, &[0.0, 0.0]).unwrap();
        assert_eq!(s.gain(), &p);
        assert!(s.weights().iter().all(|w| *w == 0.0));
        assert_eq!(s.record(s.grid().locate(&[0.0, 0.0])).unwrap().target, 5.0);
    }

    #[test]
    fn repeated_sample_is_noop() {
        let mut s = SmrlsState::new(100.0, 2, PartitionGrid::square(-1.0, 1.0, 4).unwrap()).unwrap();
        let phi = DVector::from_vec(vec![0.3, 0.8]);
        s.step(&phi, 1.5, &[0.2, 0.2]).unwrap();
        let (w, p) = (s.weights().clone(), s.gain().clone());
        s.step(&phi, 1.5, &[0.2, 0.2]).unwrap();
        assert_eq!(s.weights(), &w);
        assert_eq!(s.gain(), &p);
    }

    #[test]
    fn dimension_mismatch() {
        let mut s = scalar_state();
        assert!(matches!(
            s.step(&DVector::zeros(2), 1.0, &[0.0, 0.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn restore_from_records_matches() {
        let net = RbfNetwork::lattice(&LatticeSpec::square(-1.0, 1.0, 3), 0.5).unwrap();
        let mut s = SmrlsState::new(100.0, 9, PartitionGrid::square(-1.0, 1.0, 10).unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let x = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            s.step(&net.regressor(&x).unwrap(), rng.random_range(-2.0..2.0), &x)
                .unwrap();
        }
        let copy = SmrlsState::from_records(
            s.p0(),
            s.grid().clone(),
            s.weights().clone(),
            s.occupied_records().map(|(i, r)| (i, r.clone())),
        )
        .unwrap();
        assert!((copy.gain() - s.gain()).amax() < 1e-8);
        assert!((copy.inv_gain() - s.inv_gain()).amax() < 1e-9);
        assert_eq!(copy.occupied_count(), s.occupied_count());
    }

    #[test]
    fn random_stream_invariants() {
        let net = RbfNetwork::lattice(&LatticeSpec::square(-1.0, 1.0, 4), 0.5).unwrap();
        let mut s = SmrlsState::new(100.0, 16, PartitionGrid::square(-1.0, 1.0, 8).unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut occupied = 0;
        for _ in 0..1500 {
            let x = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            s.step(&net.regressor(&x).unwrap(), rng.random_range(-3.0..3.0), &x)
                .unwrap();
            let (lo, hi) = s.p_bounds();
            assert!(lo > 0.0);
            assert!(hi <= 100.0 * (1.0 + 1e-9));
            assert!(s.symmetry_error() < 1e-10);
            assert!(s.inverse_residual() < 1e-8, "{}", s.inverse_residual());
            assert!(s.occupied_count() >= occupied && s.occupied_count() <= 64);
            occupied = s.occupied_count();
        }
        let oracle = s.batch_ls_oracle();
        let rel = (s.weights() - &oracle).amax() / oracle.amax().max(1e-12);
        assert!(rel < 1e-6, "relative deviation {rel}");
    }
}
