//! Explicit time-steppers for the density equation and its staged
//! approximation, plus martingale-problem residual extraction.
//!
//! The direct scheme advances node values by the centered-difference heat
//! operator plus a noise term of variance `γ·max(u,0)·dt/dx` per cell.  The
//! staged scheme freezes a mollified rate profile at stage starts `t_k = kT/m`
//! and replaces `√u` by the smooth surrogate `G_m(u)`.
//!
//! Internal state is signed.  With `clip_negative` on (the default) negatives
//! are zeroed after every step and the removed mass is recorded; with it off
//! the signed state rides untouched and clipping happens only when a snapshot
//! is exported as a nonnegative `Field`, which keeps the expected total mass
//! exactly conserved.  The per-step clip is a mass pump: its rate per fringe
//! cell per unit time is resolution-independent, so ensembles meant for
//! distributional comparisons should run with `clip_negative` off.

use rayon::prelude::*;

use crate::coeff::{BranchingSpec, GammaProfile, GmTable, RateFn};
use crate::error::{Error, Result};
use crate::grid::{Boundary, Field, GridSpec};
use crate::kernel::heat_kernel;
use crate::noise::{spacetime_increment, NoiseSpec};
use crate::sum::{mean_se, Compensated};

/// Time discretization scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    Direct,
    Staged { m: u32 },
}

/// Full solver configuration; validated at construction.
#[derive(Debug, Clone)]
pub struct SolverConfig {
    pub grid: GridSpec,
    pub dt: f64,
    pub horizon: f64,
    pub spec: BranchingSpec,
    pub scheme: Scheme,
    pub clip_negative: bool,
}

impl SolverConfig {
    pub fn new(
        grid: GridSpec,
        dt: f64,
        horizon: f64,
        spec: BranchingSpec,
        scheme: Scheme,
    ) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::config("dt", format!("must be positive, got {dt}")));
        }
        let dx = grid.dx();
        let stability = dx * dx / 2.0;
        if dt > stability * (1.0 + 1e-12) {
            return Err(Error::config(
                "dt",
                format!("explicit stability requires dt ≤ dx²/2 = {stability:.3e}, got {dt:.3e}"),
            ));
        }
        if !(horizon >= 0.0) || !horizon.is_finite() {
            return Err(Error::config(
                "horizon",
                format!("must be nonnegative and finite, got {horizon}"),
            ));
        }
        if let Scheme::Staged { m } = scheme {
            if m < 1 {
                return Err(Error::config("scheme", "staged stage count must be ≥ 1"));
            }
        }
        Ok(Self {
            grid,
            dt,
            horizon,
            spec,
            scheme,
            clip_negative: true,
        })
    }

    /// Toggles per-step clipping (see the module notes on the bias it causes).
    pub fn with_clip(mut self, clip_negative: bool) -> Self {
        self.clip_negative = clip_negative;
        self
    }
}

/// Snapshots of one path: times, exported nonnegative fields, their masses,
/// and the clipping diagnostics.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub fields: Vec<Field>,
    pub total_mass: Vec<f64>,
    /// Mass removed by per-step clipping over the whole run (zero when
    /// `clip_negative` is off).
    pub clipped_mass: f64,
    /// Mass of the negative carpet present at each snapshot before export
    /// clipping (zero when `clip_negative` is on).
    pub negative_carpet: Vec<f64>,
}

impl Trajectory {
    pub fn final_field(&self) -> &Field {
        self.fields.last().expect("trajectory has at least one snapshot")
    }

    pub fn final_mass(&self) -> f64 {
        *self.total_mass.last().expect("trajectory has at least one snapshot")
    }
}

// --- single steps (contract form: Field in, clipped Field out) -----------

/// One direct explicit step of a nonnegative field, clipping negatives.
/// The solver loop uses the signed in-place variant; this entry point is the
/// one-step contract surface.
pub fn step_direct(
    field: &Field,
    spec: &BranchingSpec,
    noise: &NoiseSpec,
    path: u64,
    step: u64,
    dt: f64,
) -> Result<Field> {
    let grid = field.grid();
    let mut state = field.values().to_vec();
    let mut scratch = vec![0.0; state.len()];
    let mut gammas = vec![0.0; state.len()];
    fill_gamma_nodes(spec, &grid, &state, &mut gammas);
    step_signed_direct(&grid, &mut state, &mut scratch, &gammas, noise, path, step, dt)?;
    let _ = clip_in_place(&mut state, grid.dx());
    Field::new(grid, state)
}

/// One staged step against a frozen per-node mollified rate array.
pub fn step_staged(
    field: &Field,
    _spec: &BranchingSpec,
    noise: &NoiseSpec,
    path: u64,
    step: u64,
    dt: f64,
    m: u32,
    stage_frozen_gamma: &[f64],
) -> Result<Field> {
    let grid = field.grid();
    assert_eq!(
        stage_frozen_gamma.len(),
        grid.nodes(),
        "frozen rate array must cover every node"
    );
    let gm = GmTable::shared(m);
    let mut state = field.values().to_vec();
    let mut scratch = vec![0.0; state.len()];
    step_signed_staged(
        &grid,
        &mut state,
        &mut scratch,
        stage_frozen_gamma,
        &gm,
        noise,
        path,
        step,
        dt,
    )?;
    let _ = clip_in_place(&mut state, grid.dx());
    Field::new(grid, state)
}

// --- signed engine -------------------------------------------------------

fn neighbor(state: &[f64], i: usize, boundary: Boundary) -> (f64, f64) {
    let n = state.len();
    let left = if i == 0 {
        match boundary {
            Boundary::DirichletZero => 0.0,
            Boundary::Neumann => state[1],
        }
    } else {
        state[i - 1]
    };
    let right = if i == n - 1 {
        match boundary {
            Boundary::DirichletZero => 0.0,
            Boundary::Neumann => state[n - 2],
        }
    } else {
        state[i + 1]
    };
    (left, right)
}

#[allow(clippy::too_many_arguments)]
fn step_signed_direct(
    grid: &GridSpec,
    state: &mut Vec<f64>,
    scratch: &mut Vec<f64>,
    gamma_nodes: &[f64],
    noise: &NoiseSpec,
    path: u64,
    step: u64,
    dt: f64,
) -> Result<()> {
    let dx = grid.dx();
    let r = dt / (2.0 * dx * dx);
    let inv_dx = 1.0 / dx;
    for i in 0..state.len() {
        let u = state[i];
        let (l, rgt) = neighbor(state, i, grid.boundary);
        let amp = (u.max(0.0) * gamma_nodes[i]).sqrt();
        scratch[i] = u
            + r * (l - 2.0 * u + rgt)
            + amp * spacetime_increment(noise, path, step, i as u64) * inv_dx;
    }
    check_finite(scratch, path, step)?;
    std::mem::swap(state, scratch);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn step_signed_staged(
    grid: &GridSpec,
    state: &mut Vec<f64>,
    scratch: &mut Vec<f64>,
    frozen_gamma: &[f64],
    gm: &GmTable,
    noise: &NoiseSpec,
    path: u64,
    step: u64,
    dt: f64,
) -> Result<()> {
    let dx = grid.dx();
    let r = dt / (2.0 * dx * dx);
    let inv_dx = 1.0 / dx;
    for i in 0..state.len() {
        let u = state[i];
        let (l, rgt) = neighbor(state, i, grid.boundary);
        let amp = frozen_gamma[i].sqrt() * gm.eval(u.max(0.0));
        scratch[i] = u
            + r * (l - 2.0 * u + rgt)
            + amp * spacetime_increment(noise, path, step, i as u64) * inv_dx;
    }
    check_finite(scratch, path, step)?;
    std::mem::swap(state, scratch);
    Ok(())
}

fn check_finite(state: &[f64], path: u64, step: u64) -> Result<()> {
    if state.iter().all(|v| v.is_finite()) {
        return Ok(());
    }
    let cell = state.iter().position(|v| !v.is_finite()).unwrap_or(0);
    Err(Error::NonFinite { path, step, cell })
}

/// Zeroes negatives in place; returns (mass removed, any was negative).
fn clip_in_place(state: &mut [f64], dx: f64) -> (f64, bool) {
    let mut removed = Compensated::new();
    let mut any = false;
    for v in state.iter_mut() {
        if *v < 0.0 {
            removed.add(-*v);
            *v = 0.0;
            any = true;
        }
    }
    (removed.value() * dx, any)
}

fn negative_mass(state: &[f64], dx: f64) -> f64 {
    let mut neg = Compensated::new();
    for &v in state {
        if v < 0.0 {
            neg.add(-v);
        }
    }
    neg.value() * dx
}

/// Evaluates a rate profile at every node.
fn fill_gamma_nodes(spec: &BranchingSpec, grid: &GridSpec, state: &[f64], out: &mut [f64]) {
    let profile = GammaProfile::from_values(spec, grid, state);
    for (j, slot) in out.iter_mut().enumerate() {
        *slot = profile.at(grid.x(j));
    }
}

/// Frozen mollified per-node rates for the staged scheme.  `refresh` may only
/// be called when the stage index actually advances; the scheme's defining
/// property is that the profile is immutable within a stage.
pub struct StagedRates {
    stage: Option<u64>,
    frozen: Vec<f64>,
}

impl StagedRates {
    pub fn new(nodes: usize) -> Self {
        Self {
            stage: None,
            frozen: vec![0.0; nodes],
        }
    }

    pub fn frozen(&self) -> &[f64] {
        &self.frozen
    }

    pub fn refresh(
        &mut self,
        stage: u64,
        spec: &BranchingSpec,
        grid: &GridSpec,
        state: &[f64],
        m: u32,
    ) {
        assert!(
            self.stage != Some(stage),
            "frozen stage rates recomputed mid-stage (stage {stage})"
        );
        let profile = GammaProfile::from_values(spec, grid, state);
        let first = profile.values()[0];
        if profile.values().iter().all(|v| *v == first) {
            // Mollifying a constant reproduces it exactly; skip the quadrature.
            self.frozen.fill(first);
        } else {
            for j in 0..grid.nodes() {
                self.frozen[j] = crate::coeff::mollify_profile(&profile, grid.x(j), m);
            }
        }
        self.stage = Some(stage);
    }
}

// --- trajectory driver ---------------------------------------------------

/// Nudges a step quotient up by a relative epsilon before flooring, so a
/// quotient sitting one rounding error below an integer still lands on it.
fn floor_step(q: f64) -> f64 {
    (q + q.abs().max(1.0) * 1e-9).floor()
}

pub(crate) fn snapshot_steps(times: &[f64], dt: f64, horizon: f64) -> Result<Vec<u64>> {
    let total_steps = floor_step(horizon / dt) as u64;
    let mut steps = Vec::with_capacity(times.len());
    let mut prev: Option<f64> = None;
    for &t in times {
        if let Some(p) = prev {
            if t <= p {
                return Err(Error::config(
                    "snapshot_times",
                    format!("must be strictly increasing, got {t} after {p}"),
                ));
            }
        }
        prev = Some(t);
        if !(t >= 0.0) || !t.is_finite() {
            return Err(Error::SnapshotOffGrid { t, dt });
        }
        // Round down to a step multiple; farther than dt/2 past one is a
        // mismatch, not a rounding.
        let k = floor_step(t / dt);
        let residual = t - k * dt;
        if residual > dt / 2.0 {
            return Err(Error::SnapshotOffGrid { t, dt });
        }
        let k = k as u64;
        if k > total_steps {
            return Err(Error::SnapshotOffGrid { t, dt });
        }
        steps.push(k);
    }
    if steps.is_empty() {
        return Err(Error::config("snapshot_times", "need at least one snapshot"));
    }
    Ok(steps)
}

/// Runs one path and records snapshots at the requested times (each rounded
/// down to a step multiple).  Bit-identical for identical arguments.
pub fn simulate(
    config: &SolverConfig,
    initial: &Field,
    master_seed: u64,
    path: u64,
    snapshot_times: &[f64],
) -> Result<Trajectory> {
    if initial.grid() != config.grid {
        return Err(Error::config(
            "initial",
            "initial field lives on a different grid than the solver config",
        ));
    }
    let grid = config.grid;
    let dt = config.dt;
    let snap_steps = snapshot_steps(snapshot_times, dt, config.horizon)?;
    let noise = NoiseSpec::spacetime(master_seed, dt, grid.dx())?;

    let mut state = initial.values().to_vec();
    let mut scratch = vec![0.0; state.len()];
    let mut clipped_total = Compensated::new();

    // Field-independent rates can be filled once.
    let rates_static = config.spec.rates().iter().all(|r| matches!(r, RateFn::Constant { .. }));
    let mut gamma_nodes = vec![0.0; state.len()];
    if rates_static {
        fill_gamma_nodes(&config.spec, &grid, &state, &mut gamma_nodes);
    }

    let (gm, mut staged_rates, stage_width) = match config.scheme {
        Scheme::Direct => (None, None, 0.0),
        Scheme::Staged { m } => (
            Some(GmTable::shared(m)),
            Some(StagedRates::new(state.len())),
            config.horizon / f64::from(m),
        ),
    };

    let last_step = *snap_steps.last().expect("validated nonempty");
    let mut times = Vec::with_capacity(snap_steps.len());
    let mut fields = Vec::with_capacity(snap_steps.len());
    let mut total_mass = Vec::with_capacity(snap_steps.len());
    let mut negative_carpet = Vec::with_capacity(snap_steps.len());
    let mut next_snap = 0usize;

    for step in 0..=last_step {
        while next_snap < snap_steps.len() && snap_steps[next_snap] == step {
            let f = Field::from_signed(grid, &state);
            times.push(step as f64 * dt);
            total_mass.push(f.total_mass());
            negative_carpet.push(negative_mass(&state, grid.dx()));
            fields.push(f);
            next_snap += 1;
        }
        if step == last_step {
            break;
        }
        match config.scheme {
            Scheme::Direct => {
                if !rates_static {
                    fill_gamma_nodes(&config.spec, &grid, &state, &mut gamma_nodes);
                }
                step_signed_direct(
                    &grid, &mut state, &mut scratch, &gamma_nodes, &noise, path, step, dt,
                )?;
            }
            Scheme::Staged { m } => {
                let rates = staged_rates.as_mut().expect("staged state");
                let stage = ((step as f64 * dt) / stage_width).floor() as u64;
                let stage = stage.min(u64::from(m) - 1);
                if rates.stage != Some(stage) {
                    rates.refresh(stage, &config.spec, &grid, &state, m);
                }
                step_signed_staged(
                    &grid,
                    &mut state,
                    &mut scratch,
                    rates.frozen(),
                    gm.as_ref().expect("staged table"),
                    &noise,
                    path,
                    step,
                    dt,
                )?;
            }
        }
        if config.clip_negative {
            let (removed, _) = clip_in_place(&mut state, grid.dx());
            clipped_total.add(removed);
        }
    }

    Ok(Trajectory {
        times,
        fields,
        total_mass,
        clipped_mass: clipped_total.value(),
        negative_carpet,
    })
}

/// Runs `n_paths` independent paths in parallel and maps each trajectory to a
/// summary value immediately, so at most one trajectory per worker is alive.
/// Results come back in path order regardless of scheduling.
pub fn map_ensemble<T: Send>(
    config: &SolverConfig,
    initial: &Field,
    master_seed: u64,
    n_paths: u64,
    snapshot_times: &[f64],
    f: impl Fn(u64, &Trajectory) -> T + Sync,
) -> Result<Vec<T>> {
    (0..n_paths)
        .into_par_iter()
        .map(|path| {
            let traj = simulate(config, initial, master_seed, path, snapshot_times)?;
            Ok(f(path, &traj))
        })
        .collect()
}

/// Full-ensemble convenience for moderate sizes; prefer `map_ensemble` when
/// only summaries are needed.
pub fn run_ensemble(
    config: &SolverConfig,
    initial: &Field,
    master_seed: u64,
    n_paths: u64,
    snapshot_times: &[f64],
) -> Result<Vec<Trajectory>> {
    map_ensemble(config, initial, master_seed, n_paths, snapshot_times, |_, t| t.clone())
}

// --- martingale-problem residuals ----------------------------------------

/// A twice-differentiable test function sampled on the grid nodes.
#[derive(Debug, Clone)]
pub struct TestFunction {
    pub values: Vec<f64>,
    pub second: Vec<f64>,
}

impl TestFunction {
    pub fn on_grid(grid: &GridSpec, f: impl Fn(f64) -> f64, second: impl Fn(f64) -> f64) -> Self {
        let values = (0..grid.nodes()).map(|j| f(grid.x(j))).collect();
        let second = (0..grid.nodes()).map(|j| second(grid.x(j))).collect();
        Self { values, second }
    }
}

fn pair_nodes(field: &Field, weights: &[f64]) -> f64 {
    let dx = field.grid().dx();
    let mut acc = Compensated::new();
    for (v, w) in field.values().iter().zip(weights) {
        acc.add(v * w);
    }
    acc.value() * dx
}

/// Per-path martingale statistics: `(M_T(φ), M_T(φ)² − Σ_s ⟨X_s, γφ²⟩Δ_s)`.
/// The drift and quadratic-variation integrals are left Riemann sums over the
/// recorded snapshots.
pub fn martingale_terms(
    traj: &Trajectory,
    tf: &TestFunction,
    spec: &BranchingSpec,
) -> Result<(f64, f64)> {
    let n = traj.times.len();
    if n < 2 {
        return Err(Error::InsufficientData(
            "martingale residual needs at least two snapshots".into(),
        ));
    }
    let grid = traj.fields[0].grid();
    let phi2: Vec<f64> = tf.values.iter().map(|v| v * v).collect();
    let mut drift = Compensated::new();
    let mut qv = Compensated::new();
    for s in 0..n - 1 {
        let dt_s = traj.times[s + 1] - traj.times[s];
        let field = &traj.fields[s];
        drift.add(0.5 * pair_nodes(field, &tf.second) * dt_s);
        let profile = GammaProfile::build(spec, field);
        let dx = grid.dx();
        let mut g = Compensated::new();
        for (j, (v, p2)) in field.values().iter().zip(&phi2).enumerate() {
            g.add(v * profile.at(grid.x(j)) * p2);
        }
        qv.add(g.value() * dx * dt_s);
    }
    let mt = pair_nodes(traj.fields.last().expect("nonempty"), &tf.values)
        - pair_nodes(&traj.fields[0], &tf.values)
        - drift.value();
    Ok((mt, mt * mt - qv.value()))
}

/// Ensemble martingale residuals:
/// `(mean of M_T(φ), its SE, mean of M_T² − QV estimate, its SE)`.
pub fn martingale_residual(
    ensemble: &[Trajectory],
    tf: &TestFunction,
    spec: &BranchingSpec,
) -> Result<(f64, f64, f64, f64)> {
    if ensemble.is_empty() {
        return Err(Error::InsufficientData("empty ensemble".into()));
    }
    let t0 = &ensemble[0].times;
    for traj in ensemble {
        if traj.times.len() != t0.len()
            || traj
                .times
                .iter()
                .zip(t0)
                .any(|(a, b)| (a - b).abs() > 1e-12)
        {
            return Err(Error::SnapshotMismatch);
        }
    }
    let mut mts = Vec::with_capacity(ensemble.len());
    let mut qvs = Vec::with_capacity(ensemble.len());
    for traj in ensemble {
        let (mt, qv) = martingale_terms(traj, tf, spec)?;
        mts.push(mt);
        qvs.push(qv);
    }
    let (mean, se) = mean_se(&mts);
    let (qv_mean, qv_se) = mean_se(&qvs);
    Ok((mean, se, qv_mean, qv_se))
}

/// Pairing of a field against the heat kernel centered at `x_probe` with
/// bandwidth `s`: `dx·Σ μ_j·p_s(x_probe − x_j)`.
pub fn kernel_pairing(field: &Field, s: f64, x_probe: f64) -> f64 {
    let grid = field.grid();
    let dx = grid.dx();
    let mut acc = Compensated::new();
    for (j, v) in field.values().iter().enumerate() {
        acc.add(v * heat_kernel(s, x_probe - grid.x(j)));
    }
    acc.value() * dx
}

/// Checks conservation of the smoothed mass: the mean of
/// `⟨μ_t, p_{T−t}(x_probe − ·)⟩` over paths against the deterministic
/// `⟨μ_0, p_T(x_probe − ·)⟩`.  Returns `(lhs, rhs, se)`.
pub fn smoothed_mass_check(
    ensemble: &[Trajectory],
    t: f64,
    horizon: f64,
    x_probe: f64,
) -> Result<(f64, f64, f64)> {
    if ensemble.is_empty() {
        return Err(Error::InsufficientData("empty ensemble".into()));
    }
    if !(t < horizon) {
        return Err(Error::config(
            "t",
            format!("probe time {t} must lie strictly before the horizon {horizon}"),
        ));
    }
    let idx = ensemble[0]
        .times
        .iter()
        .position(|&ts| (ts - t).abs() <= 1e-9)
        .ok_or(Error::SnapshotMismatch)?;
    let rhs = kernel_pairing(&ensemble[0].fields[0], horizon, x_probe);
    let pairings: Vec<f64> = ensemble
        .iter()
        .map(|traj| kernel_pairing(&traj.fields[idx], horizon - t, x_probe))
        .collect();
    let (lhs, se) = mean_se(&pairings);
    Ok((lhs, rhs, se))
}
