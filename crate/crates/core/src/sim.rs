//! Euler-Maruyama simulation of trajectory ensembles with compensated
//! Poisson jump increments on a fixed uniform grid.
//!
//! Noise is drawn into a replayable [`NoiseTape`] so ground-truth and
//! surrogate passes can share one realization when required. Any
//! non-finite state aborts the ensemble with the offending trajectory
//! and step instead of clipping.

use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::process::{InitialLaw, JumpMeasure, ProcessSpec, SpecSource};
use crate::rng::trajectory_rng;

/// Uniform grid t_i = i * dt, i = 0..=n_steps, with dt = horizon / n_steps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub horizon: f64,
    pub n_steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, n_steps: usize) -> Result<Self> {
        if n_steps < 1 || !horizon.is_finite() || horizon <= 0.0 {
            return Err(Error::InvalidParameter(
                "time grid needs n_steps >= 1 and horizon > 0".into(),
            ));
        }
        Ok(Self { horizon, n_steps })
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    pub fn time(&self, i: usize) -> f64 {
        i as f64 * self.dt()
    }

    /// Number of stored points (n_steps + 1).
    pub fn n_points(&self) -> usize {
        self.n_steps + 1
    }
}

/// Pre-drawn Brownian increments and per-mark Poisson jump counts.
///
/// Layouts: `brownian[traj][step][brownian dim]`, N(0, dt) entries;
/// `jump_counts[traj][step][mark]`, Poisson(nu(s) * dt) entries.
#[derive(Clone, Debug)]
pub struct NoiseTape {
    pub m: usize,
    pub n_marks: usize,
    pub n_steps: usize,
    pub n_traj: usize,
    pub seed: u64,
    brownian: Vec<f64>,
    jump_counts: Vec<u32>,
}

impl NoiseTape {
    pub fn brownian_at(&self, traj: usize, step: usize) -> &[f64] {
        let base = (traj * self.n_steps + step) * self.m;
        &self.brownian[base..base + self.m]
    }

    pub fn counts_at(&self, traj: usize, step: usize) -> &[u32] {
        let base = (traj * self.n_steps + step) * self.n_marks;
        &self.jump_counts[base..base + self.n_marks]
    }
}

/// I.i.d. draws from an isotropic Gaussian initial law, one row per
/// trajectory (row-major `m_s x d`).
pub fn sample_initial(law: &InitialLaw, m_s: usize, seed: u64) -> Vec<f64> {
    let d = law.mean.len();
    let mut out = vec![0.0; m_s * d];
    for j in 0..m_s {
        let mut rng = trajectory_rng(seed, j as u64);
        for (k, mean) in law.mean.iter().enumerate() {
            let z: f64 = rng.sample(StandardNormal);
            out[j * d + k] = mean + law.stddev * z;
        }
    }
    out
}

/// Draws a full noise tape: independent Brownian increments and jump
/// counts across trajectories, steps, and marks.
pub fn sample_noise_tape(
    grid: &TimeGrid,
    m: usize,
    measure: &JumpMeasure,
    m_s: usize,
    seed: u64,
) -> NoiseTape {
    let dt = grid.dt();
    let sqrt_dt = dt.sqrt();
    let n = grid.n_steps;
    let n_marks = measure.n_marks();
    let poissons: Vec<Option<Poisson<f64>>> = measure
        .rates()
        .iter()
        .map(|&rate| {
            if rate * dt > 0.0 {
                Some(Poisson::new(rate * dt).expect("positive Poisson rate"))
            } else {
                None
            }
        })
        .collect();

    let mut brownian = vec![0.0; m_s * n * m];
    let mut jump_counts = vec![0u32; m_s * n * n_marks];
    for j in 0..m_s {
        let mut rng = trajectory_rng(seed, j as u64);
        for step in 0..n {
            let base = (j * n + step) * m;
            for l in 0..m {
                let z: f64 = rng.sample(StandardNormal);
                brownian[base + l] = sqrt_dt * z;
            }
            let cbase = (j * n + step) * n_marks;
            for (s, pois) in poissons.iter().enumerate() {
                jump_counts[cbase + s] = match pois {
                    Some(p) => p.sample(&mut rng) as u32,
                    None => 0,
                };
            }
        }
    }
    NoiseTape { m, n_marks, n_steps: n, n_traj: m_s, seed, brownian, jump_counts }
}

/// One explicit Euler-Maruyama step:
/// `x' = x + f dt + sigma dB + sum_s beta_s (dN_s - nu(s) dt)`.
///
/// The compensator `-nu(s) dt` applies even when `dN_s = 0`.
pub fn euler_step(
    x: &[f64],
    t: f64,
    dt: f64,
    spec: &ProcessSpec,
    d_b: &[f64],
    d_n: &[u32],
) -> Result<Vec<f64>> {
    let d = spec.d;
    let f = (spec.coefficients.drift)(x, t);
    let sigma = (spec.coefficients.diffusion)(x, t);
    let mut next = vec![0.0; d];
    for i in 0..d {
        let mut acc = x[i] + f[i] * dt;
        for l in 0..spec.m {
            acc += sigma[i * spec.m + l] * d_b[l];
        }
        next[i] = acc;
    }
    for s in 0..spec.measure.n_marks() {
        let weight = d_n[s] as f64 - spec.measure.rate(s) * dt;
        if weight != 0.0 {
            let beta = (spec.coefficients.jump)(x, s, t);
            for i in 0..d {
                next[i] += beta[i] * weight;
            }
        }
    }
    if next.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("euler step produced non-finite state".into()));
    }
    Ok(next)
}

/// Trajectory ensemble on a fixed grid: `states[traj][point][coord]`
/// row-major, with `n_points = n_steps + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Ensemble {
    pub d: usize,
    pub m_s: usize,
    pub grid: TimeGrid,
    pub origin: SpecSource,
    states: Vec<f64>,
}

impl Ensemble {
    pub fn from_states(
        states: Vec<f64>,
        d: usize,
        m_s: usize,
        grid: TimeGrid,
        origin: SpecSource,
    ) -> Result<Self> {
        if states.len() != m_s * grid.n_points() * d {
            return Err(Error::ShapeMismatch("ensemble state buffer".into()));
        }
        Ok(Self { d, m_s, grid, origin, states })
    }

    pub fn state(&self, traj: usize, point: usize) -> &[f64] {
        let base = (traj * self.grid.n_points() + point) * self.d;
        &self.states[base..base + self.d]
    }

    pub fn states(&self) -> &[f64] {
        &self.states
    }

    /// All trajectory values at one grid point, flattened `m_s x d`.
    pub fn slice_at(&self, point: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.m_s * self.d);
        for j in 0..self.m_s {
            out.extend_from_slice(self.state(j, point));
        }
        out
    }

    /// Per-trajectory sample mean at one grid point.
    pub fn mean_at(&self, point: usize) -> Vec<f64> {
        let mut mean = vec![0.0; self.d];
        for j in 0..self.m_s {
            for (k, v) in self.state(j, point).iter().enumerate() {
                mean[k] += v;
            }
        }
        for v in &mut mean {
            *v /= self.m_s as f64;
        }
        mean
    }

    pub fn same_grid(&self, other: &Ensemble) -> bool {
        self.grid == other.grid && self.d == other.d
    }
}

fn simulate_one(
    spec: &ProcessSpec,
    grid: &TimeGrid,
    tape: &NoiseTape,
    x0: &[f64],
    traj: usize,
) -> Result<Vec<f64>> {
    let d = spec.d;
    let dt = grid.dt();
    let mut path = Vec::with_capacity(grid.n_points() * d);
    path.extend_from_slice(x0);
    let mut x = x0.to_vec();
    for step in 0..grid.n_steps {
        let t = grid.time(step);
        x = euler_step(&x, t, dt, spec, tape.brownian_at(traj, step), tape.counts_at(traj, step))
            .map_err(|_| Error::SimulationBlowUp { trajectory: traj, step })?;
        path.extend_from_slice(&x);
    }
    Ok(path)
}

/// Simulates `tape.n_traj` trajectories from pre-drawn initial states
/// (row-major `m_s x d`), consuming the supplied noise tape.
pub fn simulate_ensemble_with_tape(
    spec: &ProcessSpec,
    grid: &TimeGrid,
    initial: &[f64],
    tape: &NoiseTape,
) -> Result<Ensemble> {
    let m_s = tape.n_traj;
    if initial.len() != m_s * spec.d {
        return Err(Error::ShapeMismatch("initial states".into()));
    }
    if tape.n_steps != grid.n_steps || tape.m != spec.m || tape.n_marks != spec.measure.n_marks() {
        return Err(Error::ShapeMismatch("noise tape does not match grid/spec".into()));
    }
    let paths: Vec<Result<Vec<f64>>> = (0..m_s)
        .into_par_iter()
        .map(|j| simulate_one(spec, grid, tape, &initial[j * spec.d..(j + 1) * spec.d], j))
        .collect();
    let mut states = Vec::with_capacity(m_s * grid.n_points() * spec.d);
    for path in paths {
        states.extend_from_slice(&path?);
    }
    Ensemble::from_states(states, spec.d, m_s, *grid, spec.source)
}

/// Samples initial states and a fresh noise tape from `seed`, then
/// simulates the ensemble.
pub fn simulate_ensemble(
    spec: &ProcessSpec,
    grid: &TimeGrid,
    law: &InitialLaw,
    m_s: usize,
    seed: u64,
) -> Result<Ensemble> {
    let init_seed = crate::rng::derive_seed(seed, 0xA11CE);
    let noise_seed = crate::rng::derive_seed(seed, 0xB0B);
    let initial = sample_initial(law, m_s, init_seed);
    let tape = sample_noise_tape(grid, spec.m, &spec.measure, m_s, noise_seed);
    simulate_ensemble_with_tape(spec, grid, &initial, &tape)
}

/// Exact mean of the bond-pricing model: solves
/// `dE/dt = (b + y0) + a E`, so `E(t) = -(b+y0)/a + (X0 + (b+y0)/a) e^{a t}`
/// for `a != 0` and `X0 + (b+y0) t` otherwise.
pub fn moment_oracle_example1(t: f64, b: f64, a: f64, y0: f64, x0: f64) -> f64 {
    let c = b + y0;
    if a == 0.0 {
        x0 + c * t
    } else {
        -c / a + (x0 + c / a) * (a * t).exp()
    }
}
