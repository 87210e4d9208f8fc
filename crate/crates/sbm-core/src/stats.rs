//! Estimators and hypothesis tests that turn path ensembles into pass/fail
//! verdicts: structure-function regularity exponents, weighted moments,
//! two-sample Kolmogorov–Smirnov comparisons, and Laplace functionals.

use crate::coeff::weight_j;
use crate::error::{Error, Result};
use crate::grid::{Field, GridSpec};
use crate::spde::Trajectory;
use crate::sum::{mean_se, Compensated};

/// Lag multiples used by the structure-function estimators, spanning one
/// decade.  Time lags are these multiples of the snapshot spacing; space lags
/// are the same multiples of the grid spacing.
pub const LAG_MULTIPLES: [usize; 8] = [2, 3, 4, 6, 8, 11, 16, 20];

/// Cells whose path-mean density falls below this fraction of the path's
/// maximum are excluded: near-zero regions are smoother than the generic
/// exponent because the noise coefficient degenerates there.
pub const LOW_DENSITY_MASK: f64 = 0.05;

/// Which increment direction a structure function measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Time,
    Space,
}

/// Admissible estimation window: times at or after `t_min` (regularity
/// statements exclude the initial time) and the spatial band `|x| ≤ x_band`.
#[derive(Debug, Clone, Copy)]
pub struct Window {
    pub t_min: f64,
    pub x_band: f64,
}

/// Empirical q-th absolute moments of field increments at a ladder of lags.
#[derive(Debug, Clone)]
pub struct StructureFunction {
    pub lags: Vec<f64>,
    pub moments: Vec<f64>,
    pub q: u32,
}

fn window_indices(traj: &Trajectory, window: &Window) -> Vec<usize> {
    traj.times
        .iter()
        .enumerate()
        .filter(|(_, &t)| t >= window.t_min - 1e-12)
        .map(|(i, _)| i)
        .collect()
}

fn band_indices(grid: &GridSpec, window: &Window) -> Vec<usize> {
    (0..grid.nodes())
        .filter(|&j| grid.x(j).abs() <= window.x_band + 1e-12)
        .collect()
}

/// Per-path low-density mask over the window: keep cells whose time-mean
/// value is at least `LOW_DENSITY_MASK` of the largest time-mean.
fn density_mask(traj: &Trajectory, snaps: &[usize], band: &[usize]) -> Vec<bool> {
    let mut means = vec![0.0; band.len()];
    for &s in snaps {
        let vals = traj.fields[s].values();
        for (slot, &j) in band.iter().enumerate() {
            means[slot] += vals[j];
        }
    }
    let peak = means.iter().cloned().fold(0.0f64, f64::max);
    let floor = LOW_DENSITY_MASK * peak;
    means.iter().map(|&m| m >= floor).collect()
}

/// Pools `|increment|^q` across paths and across the window at the standard
/// lag ladder.  Snapshot spacing inside the window must be uniform.
pub fn structure_function(
    ensemble: &[Trajectory],
    axis: Axis,
    q: u32,
    window: &Window,
) -> Result<StructureFunction> {
    if ensemble.is_empty() {
        return Err(Error::InsufficientData("empty ensemble".into()));
    }
    if q == 0 {
        return Err(Error::config("q", "moment order must be ≥ 1"));
    }
    let grid = ensemble[0].fields[0].grid();
    let snaps = window_indices(&ensemble[0], window);
    if snaps.len() < 2 {
        return Err(Error::InsufficientData(
            "window covers fewer than two snapshots".into(),
        ));
    }
    let dt_snap = ensemble[0].times[snaps[1]] - ensemble[0].times[snaps[0]];
    for w in snaps.windows(2) {
        let d = ensemble[0].times[w[1]] - ensemble[0].times[w[0]];
        if (d - dt_snap).abs() > 1e-9 {
            return Err(Error::InsufficientData(
                "snapshot spacing inside the window is not uniform".into(),
            ));
        }
    }
    let band = band_indices(&grid, window);
    if band.is_empty() {
        return Err(Error::InsufficientData("empty spatial band".into()));
    }

    let mut lags = Vec::new();
    let mut moments = Vec::new();
    for &mult in &LAG_MULTIPLES {
        let mut acc = Compensated::new();
        let mut count = 0u64;
        for traj in ensemble {
            let mask = density_mask(traj, &snaps, &band);
            match axis {
                Axis::Time => {
                    if mult >= snaps.len() {
                        continue;
                    }
                    for w in 0..snaps.len() - mult {
                        let a = ensemble_field(traj, snaps[w]);
                        let b = ensemble_field(traj, snaps[w + mult]);
                        for (slot, &j) in band.iter().enumerate() {
                            if mask[slot] {
                                acc.add((b[j] - a[j]).abs().powi(q as i32));
                                count += 1;
                            }
                        }
                    }
                }
                Axis::Space => {
                    for &s in &snaps {
                        let vals = ensemble_field(traj, s);
                        for (slot, &j) in band.iter().enumerate() {
                            let partner = j + mult;
                            if mask[slot] && partner < grid.nodes() {
                                acc.add((vals[partner] - vals[j]).abs().powi(q as i32));
                                count += 1;
                            }
                        }
                    }
                }
            }
        }
        if count == 0 {
            continue;
        }
        let m = acc.value() / count as f64;
        if m > 0.0 {
            let lag = match axis {
                Axis::Time => mult as f64 * dt_snap,
                Axis::Space => mult as f64 * grid.dx(),
            };
            lags.push(lag);
            moments.push(m);
        }
    }
    if lags.len() < 4 {
        return Err(Error::InsufficientData(format!(
            "only {} usable lags, need at least 4",
            lags.len()
        )));
    }
    Ok(StructureFunction { lags, moments, q })
}

fn ensemble_field(traj: &Trajectory, s: usize) -> &[f64] {
    traj.fields[s].values()
}

fn ols_slope(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let xm = xs.iter().sum::<f64>() / n;
    let ym = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - xm) * (x - xm)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - xm) * (y - ym)).sum();
    let slope = sxy / sxx;
    let intercept = ym - slope * xm;
    let ss_res: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| {
            let r = y - (intercept + slope * x);
            r * r
        })
        .sum();
    let dof = (xs.len().max(3) - 2) as f64;
    let se = (ss_res / dof / sxx).sqrt();
    (slope, se)
}

/// Least-squares slope of `log E|Δμ|^q` against `log lag`, divided by `q`:
/// the empirical Hölder exponent along the chosen axis.
pub fn hoelder_exponent(
    ensemble: &[Trajectory],
    axis: Axis,
    q: u32,
    window: &Window,
) -> Result<(f64, f64)> {
    let sf = structure_function(ensemble, axis, q, window)?;
    let xs: Vec<f64> = sf.lags.iter().map(|l| l.ln()).collect();
    let ys: Vec<f64> = sf.moments.iter().map(|m| m.ln()).collect();
    let (slope, se) = ols_slope(&xs, &ys);
    Ok((slope / q as f64, se / q as f64))
}

/// Spatial weight used by the weighted-moment estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Weight {
    /// `e^{−|x|}`.
    Exp,
    /// The mollified exponential `J(x)`.
    J,
}

fn weight_at(w: Weight, x: f64) -> f64 {
    match w {
        Weight::Exp => (-x.abs()).exp(),
        Weight::J => weight_j(x),
    }
}

/// Monte Carlo mean and SE of `dx·Σ μ_T^{2p}·w(x)` at the final snapshot.
pub fn weighted_moment(
    ensemble: &[Trajectory],
    p: u32,
    weight: Weight,
) -> Result<(f64, f64)> {
    if ensemble.is_empty() {
        return Err(Error::InsufficientData("empty ensemble".into()));
    }
    if p == 0 {
        return Err(Error::config("p", "moment order must be ≥ 1"));
    }
    let grid = ensemble[0].fields[0].grid();
    let weights: Vec<f64> = (0..grid.nodes()).map(|j| weight_at(weight, grid.x(j))).collect();
    let samples: Vec<f64> = ensemble
        .iter()
        .map(|traj| weighted_moment_of(traj.final_field(), p, &weights))
        .collect();
    Ok(mean_se(&samples))
}

/// `dx·Σ μ^{2p}·w` for one field against precomputed node weights.
pub fn weighted_moment_of(field: &Field, p: u32, weights: &[f64]) -> f64 {
    let mut acc = Compensated::new();
    for (v, w) in field.values().iter().zip(weights) {
        acc.add(v.powi(2 * p as i32) * w);
    }
    acc.value() * field.grid().dx()
}

/// Asymptotic Kolmogorov tail probability `Q(λ) = 2Σ (−1)^{j−1} e^{−2j²λ²}`.
fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 1e-10 {
        return 1.0;
    }
    let a2 = -2.0 * lambda * lambda;
    let mut fac = 2.0;
    let mut sum = 0.0;
    let mut prev_term = 0.0f64;
    for j in 1..=100 {
        let term = fac * (a2 * (j * j) as f64).exp();
        sum += term;
        if term.abs() <= 1e-3 * prev_term || term.abs() <= 1e-8 * sum.abs() {
            return sum.clamp(0.0, 1.0);
        }
        fac = -fac;
        prev_term = term.abs();
    }
    1.0
}

/// Two-sample Kolmogorov–Smirnov statistic with its asymptotic p-value.
/// Symmetric in its arguments; both samples need at least 100 points.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.len() < 100 || b.len() < 100 {
        return Err(Error::InsufficientData(format!(
            "KS needs ≥ 100 samples per side, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(|x, y| x.partial_cmp(y).expect("samples must not contain NaN"));
    sb.sort_by(|x, y| x.partial_cmp(y).expect("samples must not contain NaN"));
    let (na, nb) = (sa.len(), sb.len());
    let (mut ia, mut ib) = (0usize, 0usize);
    let mut d = 0.0f64;
    while ia < na && ib < nb {
        let va = sa[ia];
        let vb = sb[ib];
        let v = va.min(vb);
        // Advance every sample equal to the current value on both sides
        // before comparing the empirical CDFs, so ties are handled cleanly.
        while ia < na && sa[ia] == v {
            ia += 1;
        }
        while ib < nb && sb[ib] == v {
            ib += 1;
        }
        let fa = ia as f64 / na as f64;
        let fb = ib as f64 / nb as f64;
        d = d.max((fa - fb).abs());
    }
    let ne = (na as f64 * nb as f64) / (na + nb) as f64;
    let sqrt_ne = ne.sqrt();
    let lambda = (sqrt_ne + 0.12 + 0.11 / sqrt_ne) * d;
    Ok((d, kolmogorov_q(lambda)))
}

/// Monte Carlo mean and SE of `exp(−λ⟨X_T, φ⟩)` over the ensemble.
pub fn laplace_functional(
    ensemble: &[Trajectory],
    lambda: f64,
    phi: impl Fn(f64) -> f64,
) -> Result<(f64, f64)> {
    if ensemble.is_empty() {
        return Err(Error::InsufficientData("empty ensemble".into()));
    }
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::config("lambda", format!("must be positive, got {lambda}")));
    }
    let samples: Vec<f64> = ensemble
        .iter()
        .map(|traj| (-lambda * traj.final_field().pair_with(&phi)).exp())
        .collect();
    Ok(mean_se(&samples))
}

/// `dx·Σ J(x)|a − b|`: the weighted L1 distance the uniqueness experiments
/// monitor.
pub fn j_weighted_l1(a: &Field, b: &Field) -> f64 {
    assert_eq!(a.grid(), b.grid(), "fields must share a grid");
    let grid = a.grid();
    let mut acc = Compensated::new();
    for (j, (x, y)) in a.values().iter().zip(b.values()).enumerate() {
        acc.add(weight_j(grid.x(j)) * (x - y).abs());
    }
    acc.value() * grid.dx()
}
