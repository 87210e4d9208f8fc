//! Adaptive composite Simpson quadrature.
//!
//! All closed-form integrals in the crate (mollifier normalization, the
//! square-root surrogate, the exponential weight, gadget pairings) go through
//! this one routine so oracle values and implementation share no code path
//! with the Monte Carlo machinery.

/// Integrate `f` over `[a, b]` to absolute tolerance `tol`.
///
/// Integrands with known kinks should pass them via [`integrate_seeded`] so
/// the subdivision starts on the right pieces.
pub fn integrate(f: impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    integrate_seeded(f, &[a, b], tol)
}

/// Integrate over `[pts[0], pts[last]]` subdividing at the interior points.
///
/// # Panics
/// Panics if `pts` has fewer than 2 entries or is not strictly increasing.
pub fn integrate_seeded(f: impl Fn(f64) -> f64, pts: &[f64], tol: f64) -> f64 {
    assert!(pts.len() >= 2, "need at least two subdivision points");
    assert!(
        pts.windows(2).all(|w| w[0] < w[1]),
        "subdivision points must be strictly increasing"
    );
    let pieces = (pts.len() - 1) as f64;
    let mut total = 0.0;
    for w in pts.windows(2) {
        total += adaptive(&f, w[0], w[1], tol / pieces);
    }
    total
}

fn simpson(fa: f64, fm: f64, fb: f64, h: f64) -> f64 {
    h / 6.0 * (fa + 4.0 * fm + fb)
}

fn adaptive(f: &impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    let m = 0.5 * (a + b);
    let (fa, fm, fb) = (f(a), f(m), f(b));
    step(f, a, b, fa, fm, fb, simpson(fa, fm, fb, b - a), tol, 48)
}

#[allow(clippy::too_many_arguments)]
fn step(
    f: &impl Fn(f64) -> f64,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let (flm, frm) = (f(lm), f(rm));
    let left = simpson(fa, flm, fm, m - a);
    let right = simpson(fm, frm, fb, b - m);
    let err = left + right - whole;
    if depth == 0 || err.abs() <= 15.0 * tol {
        return left + right + err / 15.0;
    }
    step(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
        + step(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
}
