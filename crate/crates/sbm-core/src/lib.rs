//! Simulation laboratory for super-Brownian motion whose branching rate
//! depends on the current density ("interactive branching").
//!
//! The crate is organized around one governing equation and several
//! equivalent views of it:
//!
//! * [`spde`] integrates the density equation
//!   `∂_t μ = ½ Δμ + sqrt(μ γ(μ,x)) Ẇ` on a truncated 1-D grid, either
//!   directly or through the staged scheme that freezes a mollified rate at
//!   stage starts and replaces `sqrt(·)` by a Lipschitz surrogate.
//! * [`distfn`] transforms density states into per-interval distribution
//!   functions and simulates them under noise indexed by mass coordinates,
//!   where pathwise uniqueness can be probed with shared-noise couplings.
//! * [`particles`] runs the critical binary branching particle construction
//!   of the same measure-valued process.
//! * [`kernel`], [`coeff`], [`gadgets`] hold the analytic ingredients: heat
//!   kernels (free, half-line, unit interval), the branching-rate model with
//!   its mollification and square-root surrogate, the exponential weight, and
//!   the smoothed test-function families used by the uniqueness machinery.
//! * [`noise`] supplies deterministic counter-based white-noise increments so
//!   that every path is reproducible independently of scheduling.
//! * [`stats`] estimates Hölder exponents via structure functions, weighted
//!   moments, Laplace functionals, and two-sample Kolmogorov-Smirnov
//!   distances for ensemble comparison.

pub mod coeff;
pub mod distfn;
pub mod error;
pub mod gadgets;
pub mod grid;
pub mod kernel;
pub mod noise;
pub mod particles;
pub mod quad;
pub mod spde;
pub mod stats;
pub mod sum;

pub use error::{Error, Result};
pub use grid::{Boundary, Field, GridSpec};
