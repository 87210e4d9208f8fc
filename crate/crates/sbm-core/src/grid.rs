//! Uniform 1-D spatial grid and nonnegative density fields on it.
//!
//! The continuum problem lives on all of ℝ; the grid truncates it to
//! `[left, right]` sized so that the initial support plus the heat spread of
//! the run stays well inside (see the solver configs).  Values are node
//! samples at `x_j = left + j·dx`, `j = 0..=nx`, and the discrete mass is the
//! plain Riemann sum `dx·Σ values`, which equals the trapezoid rule for
//! fields that vanish at the boundary.

use crate::error::{Error, Result};
use crate::sum;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Boundary {
    /// Field treated as zero outside the domain.
    DirichletZero,
    /// Mirror reflection at both ends.
    Neumann,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSpec {
    pub left: f64,
    pub right: f64,
    pub nx: usize,
    pub boundary: Boundary,
}

impl GridSpec {
    pub fn new(left: f64, right: f64, nx: usize, boundary: Boundary) -> Result<Self> {
        if !(right > left) || !left.is_finite() || !right.is_finite() {
            return Err(Error::config("grid", format!("need left < right, got [{left}, {right}]")));
        }
        if nx < 8 {
            return Err(Error::config("grid.nx", format!("need nx >= 8, got {nx}")));
        }
        Ok(Self { left, right, nx, boundary })
    }

    pub fn dx(&self) -> f64 {
        (self.right - self.left) / self.nx as f64
    }

    /// Number of node samples (`nx + 1`).
    pub fn nodes(&self) -> usize {
        self.nx + 1
    }

    pub fn x(&self, j: usize) -> f64 {
        self.left + self.dx() * j as f64
    }

    /// Index of the node at coordinate `x`, if `x` lies on one (tolerance
    /// `1e-9·dx`).
    pub fn node_index(&self, x: f64) -> Option<usize> {
        let dx = self.dx();
        let r = (x - self.left) / dx;
        let j = r.round();
        if (r - j).abs() <= 1e-9 && j >= 0.0 && j <= self.nx as f64 {
            Some(j as usize)
        } else {
            None
        }
    }
}

/// Nonnegative density sample on a grid at one instant.
#[derive(Clone, Debug, PartialEq)]
pub struct Field {
    grid: GridSpec,
    values: Vec<f64>,
}

impl Field {
    /// Build a field, rejecting negative or non-finite entries.
    pub fn new(grid: GridSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.nodes() {
            return Err(Error::config(
                "field.values",
                format!("expected {} node values, got {}", grid.nodes(), values.len()),
            ));
        }
        for (index, &value) in values.iter().enumerate() {
            if !value.is_finite() || value < 0.0 {
                return Err(Error::InvalidField { index, value });
            }
        }
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: GridSpec) -> Self {
        let n = grid.nodes();
        Self { grid, values: vec![0.0; n] }
    }

    /// Clip a raw (possibly signed) state to a valid field.
    pub fn from_signed(grid: GridSpec, raw: &[f64]) -> Self {
        let values = raw.iter().map(|v| v.max(0.0)).collect();
        Self { grid, values }
    }

    pub fn grid(&self) -> GridSpec {
        self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `dx · Σ values`, compensated.
    pub fn total_mass(&self) -> f64 {
        self.grid.dx() * sum::compensated(self.values.iter().copied())
    }

    /// Linear interpolation at `x`; zero outside the domain.
    pub fn value_at(&self, x: f64) -> f64 {
        let dx = self.grid.dx();
        let r = (x - self.grid.left) / dx;
        if r < 0.0 || r > self.grid.nx as f64 {
            return 0.0;
        }
        let j = (r.floor() as usize).min(self.grid.nx - 1);
        let w = r - j as f64;
        self.values[j] * (1.0 - w) + self.values[j + 1] * w
    }

    /// `dx · Σ values·f(x)` for a function sampled on the nodes.
    pub fn pair_with(&self, f: impl Fn(f64) -> f64) -> f64 {
        let dx = self.grid.dx();
        dx * sum::compensated(
            self.values.iter().enumerate().map(|(j, &v)| v * f(self.grid.x(j))),
        )
    }

    /// Mass of `(lo, x]` accumulated by the trapezoid rule, returned per node.
    ///
    /// Entry `j` is the trapezoid integral of the density from node `from` to
    /// node `j` (zero for `j <= from`).
    pub fn cumulative_from(&self, from: usize) -> Vec<f64> {
        let dx = self.grid.dx();
        let mut out = vec![0.0; self.values.len()];
        let mut acc = sum::Compensated::new();
        for j in from + 1..self.values.len() {
            acc.add(dx * 0.5 * (self.values[j - 1] + self.values[j]));
            out[j] = acc.value();
        }
        out
    }
}
