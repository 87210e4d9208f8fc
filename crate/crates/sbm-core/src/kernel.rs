//! Heat kernels on the line, half-line, and unit interval, and discrete
//! semigroup application on grid fields.
//!
//! The free kernel is `p_t(x) = (2πt)^{-1/2} exp(-x²/(2t))` with the uniform
//! bound `p_t ≤ 1/√t`.  Absorbing and reflecting variants come from image
//! methods: a single image for the half-line, a two-sided image series for
//! the unit interval (absorbing at 0, reflecting at 1).

use crate::error::{Error, Result};
use crate::grid::{Boundary, Field};
use crate::sum;

/// Free heat kernel `p_t(x)`.
///
/// # Panics
/// Panics if `t <= 0`.
pub fn heat_kernel(t: f64, x: f64) -> f64 {
    assert!(t > 0.0, "heat_kernel needs t > 0, got {t}");
    (-x * x / (2.0 * t)).exp() / (2.0 * std::f64::consts::PI * t).sqrt()
}

/// Absorbing kernel on `[a, ∞)`: `p_t(x+a-y) - p_t(x-a+y)`.
///
/// Vanishes at `y = a`; its integral over `[a, ∞)` tends to 1 as `x → ∞`.
///
/// # Panics
/// Panics if `t <= 0` or either coordinate lies left of `a`.
pub fn halfline_kernel(t: f64, x: f64, y: f64, a: f64) -> f64 {
    assert!(t > 0.0, "halfline_kernel needs t > 0, got {t}");
    assert!(x >= a && y >= a, "halfline_kernel needs x, y >= a");
    heat_kernel(t, x + a - y) - heat_kernel(t, x - a + y)
}

/// Kernel on `[0,1]`, absorbing at 0 and reflecting at 1, via a truncated
/// two-sided image series.
///
/// The period-4 images carry weight 2 and the period-2 images weight -1;
/// `terms` images are taken on each side.  For `t >= 0.01` the series tail
/// beyond 8 terms is below 1e-12.
///
/// # Panics
/// Panics if `t <= 0`, if `x` or `y` leaves `[0,1]`, or if `terms == 0`.
pub fn box_kernel(t: f64, x: f64, y: f64, terms: u32) -> f64 {
    assert!(t > 0.0, "box_kernel needs t > 0, got {t}");
    assert!((0.0..=1.0).contains(&x) && (0.0..=1.0).contains(&y), "box_kernel needs x, y in [0,1]");
    assert!(terms > 0, "box_kernel needs terms >= 1");
    let k = terms as i64;
    let mut acc = 0.0;
    for j in -k..=k {
        let four = 4.0 * j as f64;
        acc += 2.0 * (heat_kernel(t, four + x - y) - heat_kernel(t, four - x - y));
        let two = 2.0 * j as f64;
        acc -= heat_kernel(t, two + x - y) - heat_kernel(t, two - x - y);
    }
    acc
}

/// Heat kernel sampled on grid offsets `k·dx`, truncated where it drops
/// below 1e-14.
#[derive(Clone, Debug)]
pub struct KernelSample {
    pub t: f64,
    pub values: Vec<f64>,
}

impl KernelSample {
    /// # Panics
    /// Panics if `t <= 0` or `dx <= 0`.
    pub fn new(t: f64, dx: f64) -> Self {
        assert!(t > 0.0 && dx > 0.0, "KernelSample needs t > 0 and dx > 0");
        let mut values = Vec::new();
        let mut k = 0usize;
        loop {
            let v = heat_kernel(t, k as f64 * dx);
            if v < 1e-14 && k > 0 {
                break;
            }
            values.push(v);
            k += 1;
        }
        Self { t, values }
    }

    /// Stencil reach in cells (offsets `-reach..=reach` are nonzero).
    pub fn reach(&self) -> usize {
        self.values.len() - 1
    }
}

/// Apply the discrete heat semigroup to a field for time `t`.
///
/// Direct stencil summation with the grid's boundary handling: zero
/// continuation for absorbing grids, one mirror image per side for
/// reflecting grids (valid while `√t` is small against the domain, which
/// the domain-sizing rule guarantees).  `t = 0` is the identity.
pub fn apply_semigroup(field: &Field, t: f64) -> Result<Field> {
    if t < 0.0 {
        return Err(Error::config("t", format!("semigroup time must be >= 0, got {t}")));
    }
    if t == 0.0 {
        return Ok(field.clone());
    }
    let grid = field.grid();
    let dx = grid.dx();
    let stencil = KernelSample::new(t, dx);
    let reach = stencil.reach() as i64;
    let n = grid.nodes() as i64;
    let src = field.values();
    let mut out = vec![0.0; src.len()];
    for j in 0..n {
        let mut acc = sum::Compensated::new();
        for k in -reach..=reach {
            let w = stencil.values[k.unsigned_abs() as usize];
            let i = j + k;
            let v = match grid.boundary {
                Boundary::DirichletZero => {
                    if (0..n).contains(&i) {
                        src[i as usize]
                    } else {
                        0.0
                    }
                }
                Boundary::Neumann => {
                    // mirror once at each end
                    let m = if i < 0 {
                        -i
                    } else if i >= n {
                        2 * (n - 1) - i
                    } else {
                        i
                    };
                    if (0..n).contains(&m) {
                        src[m as usize]
                    } else {
                        0.0
                    }
                }
            };
            acc.add(w * v);
        }
        out[j as usize] = dx * acc.value();
    }
    Field::new(grid, out)
}
