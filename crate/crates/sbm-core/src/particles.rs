//! Branching Brownian particle cloud: an independent construction of the
//! same measure-valued process the density solver approximates, used to
//! cross-validate that both induce one law.
//!
//! Each particle carries mass `1/N`; between branch events it diffuses.
//! Branching fires per step with probability `N·γ·dt` and is critical binary:
//! the particle dies or splits in two with equal probability, so the expected
//! offspring count is exactly 1 and the population mass is a martingale.  The
//! rate argument is the kernel-density estimate at interior breakpoints and
//! the exact counted tail mass beyond the last one.
//!
//! Particles own stable slot ids (a per-replicate monotone counter) that key
//! the counter-based noise, so a replicate replays bit-identically.

use crate::coeff::BranchingSpec;
use crate::error::{Error, Result};
use crate::grid::{Field, GridSpec};
use crate::noise::{particle_normal, particle_uniform, NoiseSpec};
use crate::stats::ks_two_sample;
use crate::sum::Compensated;

/// Channel layout on the particle stream.
const CH_MOVE: u32 = 0;
const CH_BRANCH: u32 = 1;
const CH_FATE: u32 = 2;
const CH_SAMPLE: u32 = 3;
/// Step key reserved for initial-position sampling, outside the step range.
const STEP_SAMPLE: u64 = u64::MAX;

/// A population of unit-mass particles with event bookkeeping.
#[derive(Debug, Clone)]
pub struct ParticleSystem {
    ids: Vec<u64>,
    positions: Vec<f64>,
    next_id: u64,
    unit_mass: f64,
    n_initial: usize,
    spec: BranchingSpec,
    /// Lower bound for the kernel-density bandwidth.
    kde_floor: f64,
    /// Death events so far (0 offspring).
    pub deaths: u64,
    /// Split events so far (2 offspring).
    pub splits: u64,
}

impl ParticleSystem {
    /// Builds a system from explicit positions; the initial count fixes the
    /// unit mass forever.
    pub fn new(positions: Vec<f64>, spec: BranchingSpec, kde_floor: f64) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::config("positions", "need at least one particle"));
        }
        if positions.iter().any(|x| !x.is_finite()) {
            return Err(Error::config("positions", "positions must be finite"));
        }
        if !(kde_floor > 0.0) || !kde_floor.is_finite() {
            return Err(Error::config(
                "kde_floor",
                format!("bandwidth floor must be positive, got {kde_floor}"),
            ));
        }
        let n = positions.len();
        Ok(Self {
            ids: (0..n as u64).collect(),
            next_id: n as u64,
            positions,
            unit_mass: 1.0 / n as f64,
            n_initial: n,
            spec,
            kde_floor,
            deaths: 0,
            splits: 0,
        })
    }

    /// Samples `n` initial positions from a density field by inverse-CDF on
    /// the trapezoid cumulative, keyed to `(master seed, replicate)`.
    pub fn sample_from(
        field: &Field,
        n: usize,
        spec: BranchingSpec,
        kde_floor: f64,
        noise: &NoiseSpec,
        replicate: u64,
    ) -> Result<Self> {
        let grid = field.grid();
        let vals = field.values();
        let dx = grid.dx();
        let mut cdf = Vec::with_capacity(grid.nodes());
        let mut acc = Compensated::new();
        cdf.push(0.0);
        for j in 0..grid.nodes() - 1 {
            acc.add(0.5 * dx * (vals[j] + vals[j + 1]));
            cdf.push(acc.value());
        }
        let total = *cdf.last().expect("grid has nodes");
        if !(total > 0.0) {
            return Err(Error::config("initial", "cannot sample from a zero field"));
        }
        let positions = (0..n)
            .map(|k| {
                let u = particle_uniform(noise, replicate, STEP_SAMPLE, k as u64, CH_SAMPLE) * total;
                let cell = cdf.partition_point(|c| *c <= u).min(grid.nodes() - 1) - 1;
                let span = cdf[cell + 1] - cdf[cell];
                let frac = if span > 0.0 { (u - cdf[cell]) / span } else { 0.5 };
                grid.x(cell) + frac * dx
            })
            .collect();
        Self::new(positions, spec, kde_floor)
    }

    pub fn count(&self) -> usize {
        self.positions.len()
    }

    pub fn unit_mass(&self) -> f64 {
        self.unit_mass
    }

    pub fn initial_count(&self) -> usize {
        self.n_initial
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    /// Current total mass `unit_mass·count`.
    pub fn total_mass(&self) -> f64 {
        self.unit_mass * self.count() as f64
    }

    /// Exact pairing `⟨X, φ⟩ = unit_mass·Σ φ(x_p)` — no smoothing involved.
    pub fn pair_with(&self, phi: impl Fn(f64) -> f64) -> f64 {
        let mut acc = Compensated::new();
        for &x in &self.positions {
            acc.add(phi(x));
        }
        acc.value() * self.unit_mass
    }

    /// Bandwidth rule: Silverman's `1.06·σ̂·count^{−1/5}`, floored.
    pub fn bandwidth(&self) -> f64 {
        let n = self.count();
        if n < 2 {
            return self.kde_floor;
        }
        let mean = self.positions.iter().sum::<f64>() / n as f64;
        let var = self
            .positions
            .iter()
            .map(|x| (x - mean) * (x - mean))
            .sum::<f64>()
            / (n - 1) as f64;
        let silverman = 1.06 * var.sqrt() * (n as f64).powf(-0.2);
        silverman.max(self.kde_floor)
    }

    /// Kernel-density estimate of the empirical density at one point.
    pub fn density_at(&self, y: f64) -> f64 {
        let h = self.bandwidth();
        let norm = 1.0 / (h * (2.0 * std::f64::consts::PI).sqrt());
        let mut acc = Compensated::new();
        for &x in &self.positions {
            let z = (y - x) / h;
            acc.add((-0.5 * z * z).exp());
        }
        self.unit_mass * norm * acc.value()
    }

    /// Rate arguments per breakpoint interval: the density estimate at each
    /// interior right breakpoint, then the exactly-counted tail mass.
    pub fn rate_args(&self) -> Vec<f64> {
        let n = self.spec.n();
        let mut args = Vec::with_capacity(n + 1);
        for i in 0..n {
            args.push(self.density_at(self.spec.breakpoints()[i]));
        }
        let tail = if n == 0 {
            self.count()
        } else {
            let a_n = self.spec.breakpoints()[n - 1];
            self.positions.iter().filter(|&&x| x > a_n).count()
        };
        args.push(self.unit_mass * tail as f64);
        args
    }
}

/// One step: Brownian displacement for every particle, then critical binary
/// branching with per-step probability `N·γ·dt`, rate arguments frozen at the
/// pre-step population.  Children appear at the parent's position; ids are
/// never reused.
pub fn particle_step(
    ps: &ParticleSystem,
    noise: &NoiseSpec,
    replicate: u64,
    step: u64,
    dt: f64,
) -> Result<ParticleSystem> {
    let rate_scale = ps.n_initial as f64 * ps.spec.gamma_bound() * dt;
    if rate_scale > 0.1 {
        return Err(Error::config(
            "dt",
            format!(
                "per-step branch probability bound N·K²·dt = {rate_scale:.3} exceeds 0.1; shrink dt"
            ),
        ));
    }
    let args = ps.rate_args();
    let gammas: Vec<f64> = ps
        .spec
        .rates()
        .iter()
        .zip(&args)
        .map(|(r, &a)| {
            let g = r.eval(a.max(0.0));
            g * g
        })
        .collect();
    let breakpoints = ps.spec.breakpoints();
    let sqrt_dt = dt.sqrt();

    let mut out = ParticleSystem {
        ids: Vec::with_capacity(ps.ids.len() + 8),
        positions: Vec::with_capacity(ps.positions.len() + 8),
        next_id: ps.next_id,
        unit_mass: ps.unit_mass,
        n_initial: ps.n_initial,
        spec: ps.spec.clone(),
        kde_floor: ps.kde_floor,
        deaths: ps.deaths,
        splits: ps.splits,
    };
    for (&id, &x) in ps.ids.iter().zip(&ps.positions) {
        let moved = x + sqrt_dt * particle_normal(noise, replicate, step, id, CH_MOVE);
        if !moved.is_finite() {
            return Err(Error::NonFinite {
                path: replicate,
                step,
                cell: id as usize,
            });
        }
        let interval = breakpoints.partition_point(|a| *a <= moved);
        let p_branch = ps.n_initial as f64 * gammas[interval] * dt;
        let u = particle_uniform(noise, replicate, step, id, CH_BRANCH);
        if u < p_branch {
            let fate = particle_uniform(noise, replicate, step, id, CH_FATE);
            if fate < 0.5 {
                out.deaths += 1;
            } else {
                out.splits += 1;
                out.ids.push(id);
                out.positions.push(moved);
                out.ids.push(out.next_id);
                out.positions.push(moved);
                out.next_id += 1;
            }
        } else {
            out.ids.push(id);
            out.positions.push(moved);
        }
    }
    Ok(out)
}

/// Drives a replicate to the horizon.
pub fn run_particles(
    ps: &ParticleSystem,
    noise: &NoiseSpec,
    replicate: u64,
    dt: f64,
    horizon: f64,
) -> Result<ParticleSystem> {
    let steps = (horizon / dt).round() as u64;
    let mut state = ps.clone();
    for step in 0..steps {
        state = particle_step(&state, noise, replicate, step, dt)?;
        if state.count() == 0 {
            break;
        }
    }
    Ok(state)
}

/// Gaussian-kernel density estimate of the population on a grid.  Total mass
/// matches `unit_mass·count` up to boundary truncation of the kernels.
pub fn empirical_field(ps: &ParticleSystem, grid: &GridSpec) -> Result<Field> {
    if ps.count() == 0 {
        return Ok(Field::zeros(*grid));
    }
    let h = ps.bandwidth();
    let norm = ps.unit_mass / (h * (2.0 * std::f64::consts::PI).sqrt());
    let vals: Vec<f64> = (0..grid.nodes())
        .map(|j| {
            let y = grid.x(j);
            let mut acc = Compensated::new();
            for &x in &ps.positions {
                let z = (y - x) / h;
                acc.add((-0.5 * z * z).exp());
            }
            norm * acc.value()
        })
        .collect();
    Field::new(*grid, vals)
}

/// Two-sample KS comparison of functional samples from the particle and
/// density representations; both sides need at least 100 replicates.
pub fn weak_agreement_test(particle_samples: &[f64], spde_samples: &[f64]) -> Result<(f64, f64)> {
    ks_two_sample(particle_samples, spde_samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeff::RateFn;
    use crate::grid::Boundary;
    use crate::sum::mean_se;

    fn const_spec(c: f64) -> BranchingSpec {
        BranchingSpec::constant(c).unwrap()
    }

    fn seeded_cloud(n: usize, spec: BranchingSpec) -> ParticleSystem {
        let positions: Vec<f64> = (0..n).map(|k| (k as f64 / n as f64) - 0.5).collect();
        ParticleSystem::new(positions, spec, 0.03).unwrap()
    }

    #[test]
    fn zero_rate_is_pure_brownian_motion() {
        let ps = seeded_cloud(50, const_spec(0.0));
        let noise = NoiseSpec::spacetime(3, 1e-3, 1.0).unwrap();
        let end = run_particles(&ps, &noise, 0, 1e-3, 0.1).unwrap();
        assert_eq!(end.count(), 50);
        assert_eq!(end.deaths + end.splits, 0);
        assert_eq!(end.ids(), ps.ids());
        // Particles actually moved.
        assert!(end
            .positions()
            .iter()
            .zip(ps.positions())
            .any(|(a, b)| (a - b).abs() > 1e-4));
    }

    #[test]
    fn oversized_step_is_rejected() {
        let ps = seeded_cloud(1000, const_spec(2.0));
        let noise = NoiseSpec::spacetime(3, 1e-3, 1.0).unwrap();
        // N·K²·dt = 1000·4·1e-3 = 4 > 0.1.
        assert!(particle_step(&ps, &noise, 0, 0, 1e-3).is_err());
    }

    #[test]
    fn population_mass_is_a_martingale_and_branching_is_critical() {
        let n = 200;
        let dt = 1e-4;
        let horizon = 0.05;
        let replicates = 2000u64;
        let noise = NoiseSpec::spacetime(17, dt, 1.0).unwrap();
        let proto = seeded_cloud(n, const_spec(1.0));
        let mut finals = Vec::with_capacity(replicates as usize);
        let mut deaths = 0u64;
        let mut splits = 0u64;
        for rep in 0..replicates {
            let end = run_particles(&proto, &noise, rep, dt, horizon).unwrap();
            finals.push(end.total_mass());
            deaths += end.deaths;
            splits += end.splits;
        }
        let (mean, se) = mean_se(&finals);
        assert!(
            (mean - 1.0).abs() <= 3.0 * se,
            "mass martingale broken: {mean} ± {se}"
        );
        // Fates are a fair coin over all events.
        let events = deaths + splits;
        assert!(events > 1000, "too few branch events ({events}) to check fates");
        let imbalance = (deaths as f64 - splits as f64).abs();
        assert!(
            imbalance <= 4.0 * 0.5 * (events as f64).sqrt(),
            "fate imbalance {deaths} vs {splits}"
        );
    }

    #[test]
    fn tail_argument_counts_mass_exactly() {
        let spec = BranchingSpec::new(
            vec![0.0],
            vec![RateFn::Constant { c: 1.0 }, RateFn::SqrtCap { cap: 2.0 }],
        )
        .unwrap();
        let positions = vec![-0.7, -0.2, 0.1, 0.4, 0.9];
        let ps = ParticleSystem::new(positions, spec, 0.05).unwrap();
        let args = ps.rate_args();
        // Three of five particles sit right of the breakpoint.
        assert!((args[1] - 3.0 / 5.0).abs() < 1e-15);
        // Interior argument is the KDE density at the breakpoint, positive.
        assert!(args[0] > 0.0);

        // Breakpointless: the tail argument is the whole population mass.
        let ps0 = seeded_cloud(64, const_spec(1.0));
        assert!((ps0.rate_args()[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn empirical_field_matches_kernel_shape_and_mass() {
        let grid = GridSpec::new(-4.0, 4.0, 512, Boundary::DirichletZero).unwrap();
        let spec = const_spec(1.0);
        // Empty system.
        let mut empty = seeded_cloud(4, spec.clone());
        empty.ids.clear();
        empty.positions.clear();
        assert!(empirical_field(&empty, &grid)
            .unwrap()
            .values()
            .iter()
            .all(|&v| v == 0.0));

        // Single particle at the origin: the KDE is one Gaussian kernel.
        let one = ParticleSystem::new(vec![0.0], spec.clone(), 0.05).unwrap();
        let f = empirical_field(&one, &grid).unwrap();
        let h = one.bandwidth();
        for j in [200, 256, 300] {
            let x = grid.x(j);
            let expected = (-0.5 * (x / h).powi(2)).exp() / (h * (2.0 * std::f64::consts::PI).sqrt());
            assert!((f.values()[j] - expected).abs() < 1e-12);
        }

        // Mass check on a spread-out cloud well inside the grid.
        let cloud = seeded_cloud(500, spec);
        let field = empirical_field(&cloud, &grid).unwrap();
        assert!((field.total_mass() - cloud.total_mass()).abs() < 1e-3);
    }

    #[test]
    fn replicates_replay_bit_identically() {
        let noise = NoiseSpec::spacetime(29, 1e-4, 1.0).unwrap();
        let proto = seeded_cloud(100, const_spec(1.5));
        let a = run_particles(&proto, &noise, 7, 1e-4, 0.02).unwrap();
        let b = run_particles(&proto, &noise, 7, 1e-4, 0.02).unwrap();
        assert_eq!(a.ids(), b.ids());
        assert_eq!(a.deaths, b.deaths);
        for (x, y) in a.positions().iter().zip(b.positions()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        // A different replicate index produces a different history.
        let c = run_particles(&proto, &noise, 8, 1e-4, 0.02).unwrap();
        assert!(
            c.count() != a.count()
                || c.positions()
                    .iter()
                    .zip(a.positions())
                    .any(|(x, y)| x.to_bits() != y.to_bits())
        );
    }

    #[test]
    fn sampling_initial_positions_follows_the_field() {
        let grid = GridSpec::new(-2.0, 2.0, 256, Boundary::DirichletZero).unwrap();
        let vals: Vec<f64> = (0..grid.nodes())
            .map(|j| {
                let x = grid.x(j);
                (-x * x / 0.18).exp()
            })
            .collect();
        let field = Field::new(grid, vals).unwrap();
        let noise = NoiseSpec::spacetime(31, 1e-4, 1.0).unwrap();
        let ps =
            ParticleSystem::sample_from(&field, 4000, const_spec(1.0), 0.03, &noise, 0).unwrap();
        // Empirical mean and spread match the sampling density (σ² = 0.09).
        let mean = ps.positions().iter().sum::<f64>() / ps.count() as f64;
        let var = ps
            .positions()
            .iter()
            .map(|x| (x - mean) * (x - mean))
            .sum::<f64>()
            / ps.count() as f64;
        assert!(mean.abs() < 0.02, "sample mean {mean}");
        assert!((var - 0.09).abs() < 0.01, "sample variance {var}");
        // Zero field cannot be sampled.
        assert!(ParticleSystem::sample_from(
            &Field::zeros(grid),
            10,
            const_spec(1.0),
            0.03,
            &noise,
            0
        )
        .is_err());
    }

    #[test]
    fn weak_agreement_on_identical_and_undersized_samples() {
        let samples: Vec<f64> = (0..200).map(|i| (i as f64 * 0.7).sin()).collect();
        let (d, p) = weak_agreement_test(&samples, &samples).unwrap();
        assert_eq!(d, 0.0);
        assert!(p > 0.99);
        assert!(weak_agreement_test(&samples[..50], &samples).is_err());
    }
}
