//! Density-dependent branching-rate functional and related coefficients.
//!
//! The branching rate `γ(f, x)` is piecewise constant in `x`: on each interval
//! between consecutive breakpoints it is the square of a bounded rate function
//! evaluated at the field's value at the interval's right breakpoint, and on
//! the tail interval it is the square of the last rate function evaluated at
//! the field's mass beyond the final breakpoint.  Also provided: the smooth
//! compactly supported mollifier `ρ`, the mollified rate used by the staged
//! solver, the square-root surrogate `G_m` with its per-`m` lookup table, and
//! the exponentially decaying weight `J`.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use crate::error::{Error, Result};
use crate::grid::{Field, GridSpec};
use crate::kernel::heat_kernel;
use crate::quad;
use crate::sum::Compensated;

/// Bounded rate function from the catalog.  Every variant maps `[0, ∞)` into
/// `[0, K]` where `K` is [`RateFn::bound`], and declares a Hölder exponent for
/// its modulus of continuity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RateFn {
    /// `g(v) = c`.  Bound `K = c`, Hölder exponent 1.
    Constant { c: f64 },
    /// `g(v) = min(slope·v, cap)`.  Bound `K = cap`, Hölder exponent 1.
    ClipLinear { slope: f64, cap: f64 },
    /// `g(v) = base + amp·sin(v)`, requires `amp ≤ base`.  Bound
    /// `K = base + amp`, Hölder exponent 1.
    SinPerturbed { base: f64, amp: f64 },
    /// `g(v) = min(√v, cap)`.  Bound `K = cap`, Hölder exponent 1/2.
    SqrtCap { cap: f64 },
}

impl RateFn {
    /// Evaluates the rate at a nonnegative argument.
    pub fn eval(&self, v: f64) -> f64 {
        debug_assert!(v >= 0.0, "rate argument must be nonnegative, got {v}");
        match *self {
            RateFn::Constant { c } => c,
            RateFn::ClipLinear { slope, cap } => (slope * v).min(cap),
            RateFn::SinPerturbed { base, amp } => base + amp * v.sin(),
            RateFn::SqrtCap { cap } => v.sqrt().min(cap),
        }
    }

    /// Uniform bound `K` with `0 ≤ g ≤ K`.
    pub fn bound(&self) -> f64 {
        match *self {
            RateFn::Constant { c } => c,
            RateFn::ClipLinear { cap, .. } => cap,
            RateFn::SinPerturbed { base, amp } => base + amp,
            RateFn::SqrtCap { cap } => cap,
        }
    }

    /// Declared Hölder exponent of the modulus of continuity, in `[1/2, 1]`.
    pub fn hoelder_beta(&self) -> f64 {
        match *self {
            RateFn::SqrtCap { .. } => 0.5,
            _ => 1.0,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            RateFn::Constant { c } => c.is_finite() && c >= 0.0,
            RateFn::ClipLinear { slope, cap } => {
                slope.is_finite() && cap.is_finite() && slope >= 0.0 && cap >= 0.0
            }
            RateFn::SinPerturbed { base, amp } => {
                base.is_finite() && amp.is_finite() && 0.0 <= amp && amp <= base
            }
            RateFn::SqrtCap { cap } => cap.is_finite() && cap >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config(
                "rates",
                format!("rate parameters out of range: {self:?}"),
            ))
        }
    }
}

/// Breakpoints `a_1 < … < a_n` and rate functions `g_0, …, g_n` defining the
/// branching rate.  `n = 0` means a single tail rate driven by total mass.
#[derive(Debug, Clone)]
pub struct BranchingSpec {
    breakpoints: Vec<f64>,
    rates: Vec<RateFn>,
    bound: f64,
}

impl BranchingSpec {
    pub fn new(breakpoints: Vec<f64>, rates: Vec<RateFn>) -> Result<Self> {
        if rates.len() != breakpoints.len() + 1 {
            return Err(Error::config(
                "rates",
                format!(
                    "need {} rate functions for {} breakpoints, got {}",
                    breakpoints.len() + 1,
                    breakpoints.len(),
                    rates.len()
                ),
            ));
        }
        for w in breakpoints.windows(2) {
            if !(w[1] > w[0]) {
                return Err(Error::config(
                    "breakpoints",
                    format!("breakpoints must be strictly increasing, got {w:?}"),
                ));
            }
        }
        if breakpoints.iter().any(|a| !a.is_finite()) {
            return Err(Error::config("breakpoints", "non-finite breakpoint"));
        }
        for r in &rates {
            r.validate()?;
        }
        let bound = rates.iter().map(|r| r.bound()).fold(0.0, f64::max);
        Ok(Self {
            breakpoints,
            rates,
            bound,
        })
    }

    /// Spec with no breakpoints and a constant rate: `γ ≡ c²`.
    pub fn constant(c: f64) -> Result<Self> {
        Self::new(vec![], vec![RateFn::Constant { c }])
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn rates(&self) -> &[RateFn] {
        &self.rates
    }

    pub fn n(&self) -> usize {
        self.breakpoints.len()
    }

    /// Uniform rate bound `K = max_i K_i`, so `γ ∈ [0, K²]`.
    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn gamma_bound(&self) -> f64 {
        self.bound * self.bound
    }

    /// Hölder exponent declared for the tail rate `g_n`.
    pub fn hoelder_beta(&self) -> f64 {
        self.rates[self.n()].hoelder_beta()
    }
}

/// Snapshot of `γ(f, ·)` for a fixed field: one value per interval.  The
/// interval map extends to all of ℝ (the case split does not depend on the
/// grid), which the mollifier relies on near the domain edges.
#[derive(Debug, Clone)]
pub struct GammaProfile {
    breakpoints: Vec<f64>,
    values: Vec<f64>,
}

impl GammaProfile {
    pub fn build(spec: &BranchingSpec, f: &Field) -> Self {
        Self::from_values(spec, &f.grid(), f.values())
    }

    /// Builds the profile from raw node values, clipping negatives: rate
    /// arguments are values of the field seen as a measure, so the signed
    /// solver state contributes only its nonnegative part.
    pub fn from_values(spec: &BranchingSpec, grid: &GridSpec, values: &[f64]) -> Self {
        let n = spec.n();
        let mut out = Vec::with_capacity(n + 1);
        for i in 0..n {
            let arg = interp_clipped(grid, values, spec.breakpoints[i]);
            let g = spec.rates[i].eval(arg);
            out.push(g * g);
        }
        let from = if n == 0 {
            f64::NEG_INFINITY
        } else {
            spec.breakpoints[n - 1]
        };
        let tail = clipped_tail_mass(grid, values, from);
        let g = spec.rates[n].eval(tail);
        out.push(g * g);
        Self {
            breakpoints: spec.breakpoints.clone(),
            values: out,
        }
    }

    /// Rate on the interval containing `x` (intervals are closed on the left).
    pub fn at(&self, x: f64) -> f64 {
        let i = self.breakpoints.partition_point(|a| *a <= x);
        self.values[i]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Branching rate `γ(f, x)`.  For `x` in the `i`-th breakpoint interval with
/// `i < n` this is `g_i(f(a_{i+1}))²` with `f` linearly interpolated at the
/// interval's right breakpoint; for `x` beyond the last breakpoint it is
/// `g_n(tail mass)²` with the tail mass computed by the trapezoid rule.
///
/// Panics if `x` lies outside the field's grid.
pub fn gamma(spec: &BranchingSpec, f: &Field, x: f64) -> f64 {
    let g = f.grid();
    assert!(
        x >= g.left && x <= g.right,
        "gamma probe x={x} outside grid [{}, {}]",
        g.left,
        g.right
    );
    GammaProfile::build(spec, f).at(x)
}

fn interp_clipped(grid: &GridSpec, values: &[f64], x: f64) -> f64 {
    if x < grid.left || x > grid.right {
        return 0.0;
    }
    let dx = grid.dx();
    let t = (x - grid.left) / dx;
    let j = (t.floor() as usize).min(grid.nx - 1);
    let frac = t - j as f64;
    let lo = values[j].max(0.0);
    let hi = values[j + 1].max(0.0);
    lo + frac * (hi - lo)
}

/// Trapezoid mass of the nonnegative part of the interpolant over
/// `[from, right]`, with a partial cell when `from` is off-node.
fn clipped_tail_mass(grid: &GridSpec, values: &[f64], from: f64) -> f64 {
    let a = from.max(grid.left);
    if a >= grid.right {
        return 0.0;
    }
    let dx = grid.dx();
    let t = (a - grid.left) / dx;
    let j0 = (t.floor() as usize).min(grid.nx - 1);
    let frac = t - j0 as f64;
    let mut acc = Compensated::new();
    // Partial cell from `a` to the next node: trapezoid of the interpolant.
    let va = interp_clipped(grid, values, a);
    let vnext = values[j0 + 1].max(0.0);
    acc.add(0.5 * (va + vnext) * dx * (1.0 - frac));
    for j in (j0 + 1)..grid.nx {
        acc.add(0.5 * (values[j].max(0.0) + values[j + 1].max(0.0)) * dx);
    }
    acc.value()
}

// --- mollifier -----------------------------------------------------------

fn rho_bump(z: f64) -> f64 {
    if z.abs() >= 1.0 {
        0.0
    } else {
        (-1.0 / (1.0 - z * z)).exp()
    }
}

fn rho_normalizer() -> f64 {
    static NORM: OnceLock<f64> = OnceLock::new();
    *NORM.get_or_init(|| 1.0 / quad::integrate(rho_bump, -1.0, 1.0, 1e-12))
}

/// Smooth mollifier supported on `[-1, 1]` with unit integral:
/// `ρ(x) = C·exp(-1/(1-x²))` for `|x| < 1`, zero otherwise.
pub fn mollifier_rho(x: f64) -> f64 {
    rho_normalizer() * rho_bump(x)
}

/// Branching rate mollified in space at scale `1/m`: the quadrature of
/// `γ(f, ·)` against `ρ_m(x - ·)` over `[x - 1/m, x + 1/m]`.  Equals
/// `gamma` exactly when the rate does not vary near `x`.
pub fn mollify_gamma(spec: &BranchingSpec, f: &Field, x: f64, m: u32) -> f64 {
    assert!(m >= 1, "mollification scale m must be >= 1");
    let profile = GammaProfile::build(spec, f);
    mollify_profile(&profile, x, m)
}

/// Same mollification applied to a prebuilt profile (the staged solver
/// freezes the profile at stage starts and mollifies it per node).
pub fn mollify_profile(profile: &GammaProfile, x: f64, m: u32) -> f64 {
    let mf = f64::from(m);
    // Substituted form: ∫ ρ(z)·γ(x - z/m) dz over [-1, 1], seeded where the
    // shifted argument crosses a breakpoint.
    let mut seeds = vec![-1.0, 1.0];
    for a in &profile.breakpoints {
        let z = mf * (x - a);
        if z > -1.0 && z < 1.0 {
            seeds.push(z);
        }
    }
    seeds.sort_by(|a, b| a.partial_cmp(b).unwrap());
    seeds.dedup();
    quad::integrate_seeded(
        |z| mollifier_rho(z) * profile.at(x - z / mf),
        &seeds,
        1e-10,
    )
}

// --- square-root surrogate ----------------------------------------------

/// Lookup table for the smooth square-root surrogate
/// `G_m(x) = ∫ [p_{1/m}(x-y) - p_{1/m}(y)]·(√|y| ∧ m) dy`,
/// built once per `m` on a log-spaced abscissa and linearly interpolated.
#[derive(Debug)]
pub struct GmTable {
    xs: Vec<f64>,
    ys: Vec<f64>,
}

const GM_POINTS: usize = 4096;
const GM_XMIN: f64 = 1e-8;
const GM_XMAX: f64 = 1e4;

impl GmTable {
    /// Shared table for scale `m`, built on first use.
    pub fn shared(m: u32) -> Arc<GmTable> {
        static CACHE: OnceLock<Mutex<HashMap<u32, Arc<GmTable>>>> = OnceLock::new();
        let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
        let mut map = cache.lock().expect("surrogate cache poisoned");
        map.entry(m).or_insert_with(|| Arc::new(GmTable::build(m))).clone()
    }

    fn build(m: u32) -> GmTable {
        assert!(m >= 1, "surrogate scale m must be >= 1");
        let mf = f64::from(m);
        let (l0, l1) = (GM_XMIN.ln(), GM_XMAX.ln());
        let mut xs = Vec::with_capacity(GM_POINTS);
        let mut ys = Vec::with_capacity(GM_POINTS);
        for i in 0..GM_POINTS {
            let x = (l0 + (l1 - l0) * i as f64 / (GM_POINTS - 1) as f64).exp();
            xs.push(x);
            ys.push(gm_integral(x, mf));
        }
        GmTable { xs, ys }
    }

    /// Interpolated `G_m(x)` for `x ≥ 0`; exactly 0 at `x = 0`.
    pub fn eval(&self, x: f64) -> f64 {
        assert!(x >= 0.0, "surrogate argument must be nonnegative, got {x}");
        if x == 0.0 {
            return 0.0;
        }
        let n = self.xs.len();
        if x <= self.xs[0] {
            return self.ys[0] * x / self.xs[0];
        }
        if x >= self.xs[n - 1] {
            // Held flat beyond the table; solver densities never get here.
            return self.ys[n - 1];
        }
        let hi = self.xs.partition_point(|v| *v < x).max(1);
        let (x0, x1) = (self.xs[hi - 1], self.xs[hi]);
        let (y0, y1) = (self.ys[hi - 1], self.ys[hi]);
        y0 + (y1 - y0) * (x - x0) / (x1 - x0)
    }
}

fn gm_integral(x: f64, m: f64) -> f64 {
    let sigma = 1.0 / m.sqrt();
    let lo = x.min(0.0) - 12.0 * sigma;
    let hi = x.max(0.0) + 12.0 * sigma;
    let mut seeds = vec![lo, hi];
    // Kinks of the integrand: the √|y| cusp at 0, the kernel center at x,
    // and the cap at |y| = m².
    for s in [0.0, x, m * m, -m * m] {
        if s > lo && s < hi {
            seeds.push(s);
        }
    }
    seeds.sort_by(|a, b| a.partial_cmp(b).unwrap());
    seeds.dedup();
    let t = 1.0 / m;
    quad::integrate_seeded(
        |y| (heat_kernel(t, x - y) - heat_kernel(t, y)) * y.abs().sqrt().min(m),
        &seeds,
        1e-10,
    )
}

/// Smooth square-root surrogate `G_m(x)` via the shared per-`m` table.
pub fn g_m_surrogate(x: f64, m: u32) -> f64 {
    GmTable::shared(m).eval(x)
}

// --- exponential weight --------------------------------------------------

/// Mollified exponential weight `J(x) = ∫ ρ(z)·e^{-|x-z|} dz`.  Even, strictly
/// positive, and exactly proportional to `e^{-|x|}` for `|x| ≥ 1`.
pub fn weight_j(x: f64) -> f64 {
    let mut seeds = vec![-1.0, 1.0];
    if x > -1.0 && x < 1.0 {
        seeds.push(x);
    }
    seeds.sort_by(|a, b| a.partial_cmp(b).unwrap());
    seeds.dedup();
    quad::integrate_seeded(|z| mollifier_rho(z) * (-(x - z).abs()).exp(), &seeds, 1e-10)
}
