//! Gaussian radial basis function networks on a lattice of centers.
//!
//! The network output is linear in the weights, `W·Φ(χ)`, where each
//! regressor component is `exp(-‖χ - c_i‖² / 2σ_i²)`.

use nalgebra::DVector;

use crate::{Error, Result};

/// One axis of a uniform grid: `count` points (or cells) over `[lower, upper]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisSpec {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
}

impl AxisSpec {
    pub fn new(lower: f64, upper: f64, count: usize) -> Self {
        Self { lower, upper, count }
    }

    fn check_bounds(&self, axis: usize) -> Result<()> {
        if !(self.lower.is_finite() && self.upper.is_finite() && self.lower < self.upper) {
            return Err(Error::invalid(format!(
                "axis {axis}: lower bound {} must be below upper bound {}",
                self.lower, self.upper
            )));
        }
        Ok(())
    }
}

/// Per-dimension placement of neuron centers.
#[derive(Debug, Clone, PartialEq)]
pub struct LatticeSpec {
    pub axes: Vec<AxisSpec>,
}

impl LatticeSpec {
    pub fn new(axes: Vec<AxisSpec>) -> Self {
        Self { axes }
    }

    /// `count × count` neurons over `[lower, upper]²`.
    pub fn square(lower: f64, upper: f64, count: usize) -> Self {
        Self::new(vec![AxisSpec::new(lower, upper, count); 2])
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn neuron_count(&self) -> usize {
        self.axes.iter().map(|a| a.count).product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.axes.is_empty() {
            return Err(Error::invalid("lattice needs at least one axis"));
        }
        for (i, axis) in self.axes.iter().enumerate() {
            axis.check_bounds(i)?;
            if axis.count < 2 {
                return Err(Error::invalid(format!(
                    "axis {i}: lattice needs at least 2 neurons per axis, got {}",
                    axis.count
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RbfNetwork {
    dim: usize,
    /// Row-major, `dim` coordinates per neuron.
    centers: Vec<f64>,
    widths: Vec<f64>,
    weights: DVector<f64>,
}

impl RbfNetwork {
    /// Build from explicit centers (one `Vec` per neuron) and widths.
    pub fn from_parts(centers: Vec<Vec<f64>>, widths: Vec<f64>, weights: DVector<f64>) -> Result<Self> {
        let n = centers.len();
        if n == 0 {
            return Err(Error::invalid("network needs at least one neuron"));
        }
        let dim = centers[0].len();
        if dim == 0 {
            return Err(Error::invalid("input dimension must be positive"));
        }
        if widths.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: widths.len(),
            });
        }
        if weights.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: weights.len(),
            });
        }
        if let Some(w) = widths.iter().find(|w| !(**w > 0.0 && w.is_finite())) {
            return Err(Error::invalid(format!("width must be positive, got {w}")));
        }
        let mut flat = Vec::with_capacity(n * dim);
        for c in &centers {
            if c.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: c.len(),
                });
            }
            flat.extend_from_slice(c);
        }
        Ok(Self {
            dim,
            centers: flat,
            widths,
            weights,
        })
    }

    /// Cartesian grid of centers with both interval endpoints included,
    /// all widths equal to `width`, all weights zero. The first axis varies
    /// slowest in the neuron ordering.
    pub fn lattice(spec: &LatticeSpec, width: f64) -> Result<Self> {
        spec.validate()?;
        if !(width > 0.0 && width.is_finite()) {
            return Err(Error::invalid(format!("width must be positive, got {width}")));
        }
        let dim = spec.dim();
        let n = spec.neuron_count();
        let mut centers = Vec::with_capacity(n * dim);
        let mut index = vec![0usize; dim];
        for _ in 0..n {
            for (axis, &i) in spec.axes.iter().zip(&index) {
                let step = (axis.upper - axis.lower) / (axis.count - 1) as f64;
                // pin the last point to the bound exactly
                let c = if i == axis.count - 1 {
                    axis.upper
                } else {
                    axis.lower + step * i as f64
                };
                centers.push(c);
            }
            for d in (0..dim).rev() {
                index[d] += 1;
                if index[d] < spec.axes[d].count {
                    break;
                }
                index[d] = 0;
            }
        }
        Ok(Self {
            dim,
            centers,
            widths: vec![width; n],
            weights: DVector::zeros(n),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.widths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.widths.is_empty()
    }

    pub fn center(&self, i: usize) -> &[f64] {
        &self.centers[i * self.dim..(i + 1) * self.dim]
    }

    pub fn widths(&self) -> &[f64] {
        &self.widths
    }

    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }

    pub fn set_weights(&mut self, weights: DVector<f64>) -> Result<()> {
        if weights.len() != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                actual: weights.len(),
            });
        }
        self.weights = weights;
        Ok(())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: x.len(),
            });
        }
        Ok(())
    }

    /// Full regressor vector Φ(χ).
    pub fn regressor(&self, x: &[f64]) -> Result<DVector<f64>> {
        self.check_input(x)?;
        Ok(DVector::from_iterator(
            self.len(),
            (0..self.len()).map(|i| self.activation(i, x)),
        ))
    }

    fn activation(&self, i: usize, x: &[f64]) -> f64 {
        let sq: f64 = self.center(i).iter().zip(x).map(|(c, v)| (v - c) * (v - c)).sum();
        let s = self.widths[i];
        (-sq / (2.0 * s * s)).exp()
    }

    pub fn evaluate(&self, x: &[f64]) -> Result<f64> {
        Ok(self.weights.dot(&self.regressor(x)?))
    }

    /// Indices of neurons whose activation at `x` is at least `threshold`.
    pub fn active_subset(&self, x: &[f64], threshold: f64) -> Result<Vec<usize>> {
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(Error::invalid(format!("threshold must lie in (0, 1), got {threshold}")));
        }
        self.check_input(x)?;
        Ok((0..self.len())
            .filter(|&i| self.activation(i, x) >= threshold)
            .collect())
    }
}
