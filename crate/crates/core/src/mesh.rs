//! Uniform space and time grids, composite Simpson quadrature, and the
//! restriction of grid functions to a symmetric sub-interval `D = [-d, d]`.
//!
//! Nodes are generated as `a * (2i - n) / n` so that the grid is exactly
//! antisymmetric (`y_{n-i} == -y_i` bit for bit) and both endpoints are exact.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform grid on `[-a, a]` with `n` intervals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UniformGrid {
    half_width: f64,
    intervals: usize,
}

impl UniformGrid {
    /// Builds the grid. `n` must be even and at least 2 (composite Simpson).
    pub fn new(half_width: f64, intervals: usize) -> Result<Self> {
        if !(half_width.is_finite() && half_width > 0.0) {
            return Err(Error::config("a", format!("half-width must be positive, got {half_width}")));
        }
        if intervals < 2 {
            return Err(Error::config("n", format!("need at least 2 intervals, got {intervals}")));
        }
        if !intervals.is_multiple_of(2) {
            return Err(Error::config("n", format!("n must be even, got {intervals}")));
        }
        Ok(Self {
            half_width,
            intervals,
        })
    }

    pub fn half_width(&self) -> f64 {
        self.half_width
    }

    pub fn intervals(&self) -> usize {
        self.intervals
    }

    /// Number of nodes, `n + 1`.
    pub fn len(&self) -> usize {
        self.intervals + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn spacing(&self) -> f64 {
        2.0 * self.half_width / self.intervals as f64
    }

    pub fn node(&self, i: usize) -> f64 {
        debug_assert!(i <= self.intervals);
        let n = self.intervals as f64;
        self.half_width * (2.0 * i as f64 - n) / n
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.node(i)).collect()
    }

    /// Index of the node equal to `x`, if `x` lies on the grid (to within a
    /// millionth of a cell).
    pub fn node_index(&self, x: f64) -> Option<usize> {
        let pos = (x + self.half_width) / self.spacing();
        let idx = pos.round();
        if idx < 0.0 || idx > self.intervals as f64 || (pos - idx).abs() > 1e-6 {
            return None;
        }
        Some(idx as usize)
    }

    pub fn check_len(&self, context: &'static str, got: usize) -> Result<()> {
        if got != self.len() {
            return Err(Error::shape(context, self.len(), got));
        }
        Ok(())
    }
}

/// Uniform time grid `t_j = j T / m`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    final_time: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(final_time: f64, steps: usize) -> Result<Self> {
        if !(final_time.is_finite() && final_time > 0.0) {
            return Err(Error::config("final_time", format!("must be positive, got {final_time}")));
        }
        if steps == 0 {
            return Err(Error::config("m", "need at least one time step"));
        }
        Ok(Self { final_time, steps })
    }

    pub fn final_time(&self) -> f64 {
        self.final_time
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn step(&self) -> f64 {
        self.final_time / self.steps as f64
    }

    pub fn time(&self, j: usize) -> f64 {
        if j == self.steps {
            self.final_time
        } else {
            j as f64 * self.step()
        }
    }
}

/// Composite Simpson 1/3 weights aligned with grid nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureWeights(Vec<f64>);

impl QuadratureWeights {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `sum_i w_i f_i`.
    pub fn integrate(&self, samples: &[f64]) -> Result<f64> {
        if samples.len() != self.0.len() {
            return Err(Error::shape("integrate", self.0.len(), samples.len()));
        }
        Ok(self.dot(samples))
    }

    /// Unchecked weighted sum; callers guarantee matching lengths.
    pub(crate) fn dot(&self, samples: &[f64]) -> f64 {
        self.0.iter().zip(samples).map(|(w, f)| w * f).sum()
    }

    pub(crate) fn abs_dot(&self, samples: &[f64]) -> f64 {
        self.0.iter().zip(samples).map(|(w, f)| w * f.abs()).sum()
    }
}

impl std::ops::Index<usize> for QuadratureWeights {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

fn simpson_pattern(intervals: usize, spacing: f64) -> QuadratureWeights {
    let h3 = spacing / 3.0;
    let w = (0..=intervals)
        .map(|i| {
            if i == 0 || i == intervals {
                h3
            } else if i % 2 == 1 {
                4.0 * h3
            } else {
                2.0 * h3
            }
        })
        .collect();
    QuadratureWeights(w)
}

pub fn simpson_weights(grid: &UniformGrid) -> QuadratureWeights {
    simpson_pattern(grid.intervals(), grid.spacing())
}

/// Index map of `D = [-d, d]` into a parent grid. `d` is snapped to the
/// nearest node so every D-node is a parent node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubgridRestriction {
    parent: UniformGrid,
    start: usize,
    intervals: usize,
    requested: f64,
}

impl SubgridRestriction {
    pub fn new(parent: &UniformGrid, d: f64) -> Result<Self> {
        let a = parent.half_width();
        if !(d.is_finite() && d > 0.0) {
            return Err(Error::config("d", format!("must be positive, got {d}")));
        }
        if d >= a {
            return Err(Error::config(
                "d",
                format!("D = [-{d}, {d}] must be a strict subset of (-{a}, {a})"),
            ));
        }
        // Half-count of D intervals; symmetric about the centre node, so n_1 = 2k is even.
        let centre = parent.intervals() / 2;
        if centre < 2 {
            return Err(Error::config("n", "mesh too coarse to hold a strict sub-interval"));
        }
        let k = ((d / parent.spacing()).round() as usize).clamp(1, centre - 1);
        Ok(Self {
            parent: *parent,
            start: centre - k,
            intervals: 2 * k,
            requested: d,
        })
    }

    pub fn parent(&self) -> &UniformGrid {
        &self.parent
    }

    /// `n_1`, the number of intervals inside D.
    pub fn intervals(&self) -> usize {
        self.intervals
    }

    pub fn len(&self) -> usize {
        self.intervals + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// The snapped half-width actually used.
    pub fn half_width(&self) -> f64 {
        self.parent.node(self.start + self.intervals)
    }

    pub fn requested_half_width(&self) -> f64 {
        self.requested
    }

    /// Parent indices of D-nodes.
    pub fn indices(&self) -> Range<usize> {
        self.start..self.start + self.len()
    }

    pub fn start(&self) -> usize {
        self.start
    }

    pub fn nodes(&self) -> Vec<f64> {
        self.indices().map(|i| self.parent.node(i)).collect()
    }

    /// Simpson weights of D's own composite rule (endpoint weight `dx/3`).
    pub fn local_weights(&self) -> QuadratureWeights {
        simpson_pattern(self.intervals, self.parent.spacing())
    }

    /// Parent weights at D-nodes. These are the weights the full-domain mass
    /// functional gives to a function supported on D.
    pub fn parent_weights(&self) -> QuadratureWeights {
        let w = simpson_weights(&self.parent);
        QuadratureWeights(w.as_slice()[self.indices()].to_vec())
    }

    pub fn restrict(&self, f: &[f64]) -> Result<Vec<f64>> {
        self.parent.check_len("restrict", f.len())?;
        Ok(f[self.indices()].to_vec())
    }

    /// Extends a D-grid function by zero to the parent grid.
    pub fn embed(&self, local: &[f64]) -> Result<Vec<f64>> {
        if local.len() != self.len() {
            return Err(Error::shape("embed", self.len(), local.len()));
        }
        let mut out = vec![0.0; self.parent.len()];
        out[self.indices()].copy_from_slice(local);
        Ok(out)
    }
}
