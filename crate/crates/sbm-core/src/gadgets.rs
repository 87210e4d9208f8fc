//! Test-function gadgets for boundary extraction and pathwise-uniqueness
//! experiments.
//!
//! Two families live here.  The boundary gadgets `h_k` concentrate variation
//! near the endpoints of `[0,1]`: pairing a smooth `f` against `h_k′` or
//! `h_k″` recovers endpoint values and derivatives in the large-`k` limit.
//! The Yamada–Watanabe family `φ_k` approximates `|z|` from below with a
//! second derivative spread over the tiny interval `(a_k, a_{k-1})`,
//! `a_k = exp(-k(k+1)/2)`, at height at most `2/k`.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use crate::coeff::mollifier_rho;
use crate::error::{Error, Result};
use crate::quad;

// --- bump on (0,1) and its CDF -------------------------------------------

/// Bump `Φ` on `(0,1)`: the normalized mollifier rescaled, `Φ(z) = 2ρ(2z-1)`.
/// Satisfies `0 ≤ Φ ≤ 2` and `∫Φ = 1`.
pub fn bump_phi(z: f64) -> f64 {
    2.0 * mollifier_rho(2.0 * z - 1.0)
}

fn bump_phi_deriv(z: f64) -> f64 {
    // Φ′(z) = 4ρ′(2z-1) with ρ′(u) = ρ(u)·(-2u/(1-u²)²).
    let u = 2.0 * z - 1.0;
    if u.abs() >= 1.0 {
        return 0.0;
    }
    let d = 1.0 - u * u;
    4.0 * mollifier_rho(u) * (-2.0 * u / (d * d))
}

const F_POINTS: usize = 8192;

/// CDF of `Φ` on a uniform table, linearly interpolated; clamped to [0,1].
fn bump_cdf(y: f64) -> f64 {
    static TABLE: OnceLock<Vec<f64>> = OnceLock::new();
    let table = TABLE.get_or_init(|| {
        let h = 1.0 / F_POINTS as f64;
        let mut acc = 0.0;
        let mut out = Vec::with_capacity(F_POINTS + 1);
        out.push(0.0);
        for i in 0..F_POINTS {
            let a = i as f64 * h;
            acc += h / 6.0 * (bump_phi(a) + 4.0 * bump_phi(a + 0.5 * h) + bump_phi(a + h));
            out.push(acc);
        }
        out
    });
    if y <= 0.0 {
        return 0.0;
    }
    if y >= 1.0 {
        return 1.0;
    }
    let t = y * F_POINTS as f64;
    let i = (t.floor() as usize).min(F_POINTS - 1);
    let frac = t - i as f64;
    (table[i] + frac * (table[i + 1] - table[i])).clamp(0.0, 1.0)
}

// --- boundary gadgets h_k ------------------------------------------------

/// Boundary gadget `h_k(x) = ∫₀^{kx} Φ · ∫_{x^k}^1 Φ`, a plateau at 1 with
/// all variation within `O(1/k)` of the endpoints.  Values lie in `[0,1]`
/// and `h_k` vanishes to second order at 0 and 1.
pub fn h_k(x: f64, k: u32) -> f64 {
    assert!((0.0..=1.0).contains(&x), "h_k argument must be in [0,1], got {x}");
    assert!(k >= 1, "h_k order must be positive");
    bump_cdf(f64::from(k) * x) * (1.0 - bump_cdf(x.powi(k as i32)))
}

#[cfg(test)]
fn h_k_prime(x: f64, k: u32) -> f64 {
    let kf = f64::from(k);
    let xk = x.powi(k as i32);
    kf * bump_phi(kf * x) * (1.0 - bump_cdf(xk))
        - bump_cdf(kf * x) * bump_phi(xk) * kf * x.powi(k as i32 - 1)
}

/// Pairings `(⟨f, h_k′⟩, ⟨f, h_k″⟩)` by quadrature.  As `k → ∞` these
/// converge to `(f(0) - f(1), f′(1) - f′(0))`: the gadget derivative acts as
/// a difference of endpoint evaluations.
///
/// Both integrals are computed in substituted variables (`y = kx` near the
/// left factor, `y = x^k` near the right) so the integrands stay bounded
/// uniformly in `k` instead of carrying factors of `k²`.
pub fn h_k_pairing_limits(f: impl Fn(f64) -> f64, k: u32) -> (f64, f64) {
    assert!(k >= 1, "h_k order must be positive");
    let kf = f64::from(k);
    let ki = k as i32;
    let tol = 1e-9;

    // ⟨f, h_k′⟩ = ∫ f·kΦ(kx)(1-F(x^k)) - ∫ f·F(kx)·kx^{k-1}Φ(x^k).
    let d1_left = quad::integrate(
        |y| f(y / kf) * bump_phi(y) * (1.0 - bump_cdf((y / kf).powi(ki))),
        0.0,
        1.0,
        tol,
    );
    let d1_right = quad::integrate(
        |y| f(y.powf(1.0 / kf)) * bump_phi(y) * bump_cdf(kf * y.powf(1.0 / kf)),
        0.0,
        1.0,
        tol,
    );
    let first = d1_left - d1_right;

    // ⟨f, h_k″⟩ = M1 - 2·M2 - M3 from the product rule on h_k′, each piece
    // substituted as above.
    let m1 = quad::integrate(
        |y| kf * f(y / kf) * bump_phi_deriv(y) * (1.0 - bump_cdf((y / kf).powi(ki))),
        0.0,
        1.0,
        tol,
    );
    let m2 = quad::integrate(
        |y| {
            let x = y / kf;
            f(x) * bump_phi(y) * kf * x.powi(ki - 1) * bump_phi(x.powi(ki))
        },
        0.0,
        1.0,
        tol,
    );
    let m3a = quad::integrate(
        |y| {
            if y <= 0.0 {
                // The y^{-1/k} singularity is killed by Φ's flat zero.
                return 0.0;
            }
            let x = y.powf(1.0 / kf);
            (kf - 1.0) * f(x) * y.powf(-1.0 / kf) * bump_phi(y) * bump_cdf(kf * x)
        },
        0.0,
        1.0,
        tol,
    );
    let m3b = quad::integrate(
        |y| {
            let x = y.powf(1.0 / kf);
            kf * f(x) * y.powf(1.0 - 1.0 / kf) * bump_phi_deriv(y) * bump_cdf(kf * x)
        },
        0.0,
        1.0,
        tol,
    );
    (first, m1 - 2.0 * m2 - (m3a + m3b))
}

// --- Yamada-Watanabe family ----------------------------------------------

/// Largest order whose support bottom `exp(-k(k+1)/2)` is still a normal f64.
const YW_MAX_K: u32 = 32;
const PHI_POINTS: usize = 8192;

/// Yamada-Watanabe order-`k` family: the density `ψ_k` carried by
/// `(a_k, a_{k-1})` with `∫ψ_k = 1` and `ψ_k(x) ≤ 2/(k·x)`, and the
/// `|z|`-approximation `φ_k(z) = ∫₀^{|z|}∫₀^y ψ_k`.
///
/// `ψ_k` is `c_k/x` on its support, tapered to zero over the outer 5% of the
/// log-width at each end by a quintic smoothstep so it is C²; the plateau
/// constant `c_k = 1/(0.95·k)` keeps the integral exactly 1 under the taper
/// while staying below the `2/k` cap.
#[derive(Debug)]
pub struct YWFamily {
    k: u32,
    a_k: f64,
    a_km1: f64,
    c: f64,
    log_bottom: f64,
    /// φ on a log-spaced grid over the support; linear beyond.
    phi_table: Vec<f64>,
    phi_top: f64,
}

/// Quintic smoothstep and its running integral; both vanish with two
/// derivatives at the junctions, which is what makes ψ_k C².
fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * t * (10.0 + t * (-15.0 + 6.0 * t))
}

fn smoothstep_integral(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * t * t * (2.5 + t * (-3.0 + t))
}

const TAPER: f64 = 0.05;

/// Taper shape in the normalized log coordinate `s ∈ [0,1]`.
fn taper_shape(s: f64) -> f64 {
    if s <= 0.0 || s >= 1.0 {
        0.0
    } else if s < TAPER {
        smoothstep(s / TAPER)
    } else if s <= 1.0 - TAPER {
        1.0
    } else {
        smoothstep((1.0 - s) / TAPER)
    }
}

/// Integral of the taper shape from 0 to `s`; reaches `1 - TAPER` at 1.
fn taper_shape_integral(s: f64) -> f64 {
    if s <= 0.0 {
        0.0
    } else if s < TAPER {
        TAPER * smoothstep_integral(s / TAPER)
    } else if s <= 1.0 - TAPER {
        TAPER * 0.5 + (s - TAPER)
    } else if s < 1.0 {
        (1.0 - TAPER) - TAPER * (0.5 - smoothstep_integral((1.0 - s) / TAPER))
    } else {
        1.0 - TAPER
    }
}

impl YWFamily {
    pub fn new(k: u32) -> Result<Self> {
        if k < 1 {
            return Err(Error::config("k", "order must be a positive integer"));
        }
        if k > YW_MAX_K {
            return Err(Error::config(
                "k",
                format!("order {k} exceeds {YW_MAX_K}; the support bottom exp(-k(k+1)/2) underflows"),
            ));
        }
        let kf = f64::from(k);
        let log_bottom = -kf * (kf + 1.0) / 2.0;
        let log_top = -kf * (kf - 1.0) / 2.0;
        let a_k = log_bottom.exp();
        let a_km1 = log_top.exp();
        let c = 1.0 / ((1.0 - TAPER) * kf);

        // φ over the support by cumulative Simpson of the ψ-CDF on a
        // log-spaced grid; the CDF is closed-form so each step is cheap.
        let psi_cdf = |x: f64| -> f64 {
            let s = (x.ln() - log_bottom) / kf;
            c * kf * taper_shape_integral(s)
        };
        let mut table = Vec::with_capacity(PHI_POINTS + 1);
        table.push(0.0);
        let mut acc = 0.0;
        let step = kf / PHI_POINTS as f64;
        for i in 0..PHI_POINTS {
            let u0 = log_bottom + i as f64 * step;
            let y0 = u0.exp();
            let y1 = (u0 + step).exp();
            let h = y1 - y0;
            acc += h / 6.0
                * (psi_cdf(y0) + 4.0 * psi_cdf(0.5 * (y0 + y1)) + psi_cdf(y1));
            table.push(acc);
        }
        let phi_top = acc;
        Ok(Self {
            k,
            a_k,
            a_km1,
            c,
            log_bottom,
            phi_table: table,
            phi_top,
        })
    }

    /// Shared family for order `k`, built on first use.
    pub fn shared(k: u32) -> Arc<YWFamily> {
        static CACHE: OnceLock<Mutex<HashMap<u32, Arc<YWFamily>>>> = OnceLock::new();
        let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
        let mut map = cache.lock().expect("family cache poisoned");
        map.entry(k)
            .or_insert_with(|| Arc::new(YWFamily::new(k).expect("valid order")))
            .clone()
    }

    pub fn k(&self) -> u32 {
        self.k
    }

    /// Support bottom `a_k = exp(-k(k+1)/2)`.
    pub fn a_k(&self) -> f64 {
        self.a_k
    }

    /// Support top `a_{k-1} = exp(-k(k-1)/2)`.
    pub fn a_k_minus_1(&self) -> f64 {
        self.a_km1
    }

    /// Density `ψ_k(x)`, zero outside `(a_k, a_{k-1})`.
    pub fn psi(&self, x: f64) -> f64 {
        if x <= self.a_k || x >= self.a_km1 {
            return 0.0;
        }
        let s = (x.ln() - self.log_bottom) / f64::from(self.k);
        self.c / x * taper_shape(s)
    }

    /// CDF `Ψ_k(y) = ∫₀^y ψ_k`, which is also `φ_k′` on `y ≥ 0`.
    pub fn psi_cdf(&self, y: f64) -> f64 {
        if y <= self.a_k {
            return 0.0;
        }
        if y >= self.a_km1 {
            return 1.0;
        }
        let s = (y.ln() - self.log_bottom) / f64::from(self.k);
        f64::from(self.k) * self.c * taper_shape_integral(s)
    }

    /// `φ_k(z)`: even, convex on each half-line, squeezed between
    /// `|z| - a_{k-1}` and `|z|`, exactly `|z| - const` beyond the support.
    pub fn phi(&self, z: f64) -> f64 {
        let az = z.abs();
        if az <= self.a_k {
            return 0.0;
        }
        if az >= self.a_km1 {
            return self.phi_top + (az - self.a_km1);
        }
        let kf = f64::from(self.k);
        let t = (az.ln() - self.log_bottom) / kf * PHI_POINTS as f64;
        let i = (t.floor() as usize).min(PHI_POINTS - 1);
        let frac = t - i as f64;
        self.phi_table[i] + frac * (self.phi_table[i + 1] - self.phi_table[i])
    }

    /// `φ_k′(z) = sign(z)·Ψ_k(|z|)`, bounded by 1 in absolute value.
    pub fn phi_deriv(&self, z: f64) -> f64 {
        z.signum() * self.psi_cdf(z.abs())
    }

    /// `φ_k″(z) = ψ_k(|z|)`, so `|z|·φ_k″(z) ≤ 2/k`.
    pub fn phi_second_deriv(&self, z: f64) -> f64 {
        self.psi(z.abs())
    }
}

/// `φ_k(z)` via the shared per-`k` family.
pub fn phi_k(z: f64, k: u32) -> f64 {
    YWFamily::shared(k).phi(z)
}
