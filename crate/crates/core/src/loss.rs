//! Ensemble-comparison losses between a ground-truth and a surrogate
//! ensemble, with state-level gradients for training.
//!
//! Conventions follow the scaled loss definitions used throughout:
//! costs are plain (squared) Euclidean distances on grid slices, so
//! every value here equals the time-integrated distance divided by dt.
//! Trajectory-coupled losses flatten grid points t_0..t_{N-1}; the
//! temporally decoupled loss and MMD sum slices t_1..t_{N-1} (the
//! shared initial slice is skipped unless requested).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::Ensemble;
use crate::transport::{
    solve_assignment, w2sq_exact, Assignment, PointCloud,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    DecoupledW2sq,
    W2sq,
    W1,
    Mse,
    Mean2var,
    Mmd,
}

impl LossKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "decoupled_w2sq" => Ok(Self::DecoupledW2sq),
            "w2sq" => Ok(Self::W2sq),
            "w1" => Ok(Self::W1),
            "mse" => Ok(Self::Mse),
            "mean2var" => Ok(Self::Mean2var),
            "mmd" => Ok(Self::Mmd),
            other => Err(Error::InvalidParameter(format!(
                "unknown loss kind '{other}' (expected decoupled_w2sq|w2sq|w1|mse|mean2var|mmd)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::DecoupledW2sq => "decoupled_w2sq",
            Self::W2sq => "w2sq",
            Self::W1 => "w1",
            Self::Mse => "mse",
            Self::Mean2var => "mean2var",
            Self::Mmd => "mmd",
        }
    }
}

/// A scalar loss plus optional per-slice contributions and the
/// couplings needed for gradient replay of the W-losses.
#[derive(Clone, Debug)]
pub struct LossValue {
    pub value: f64,
    pub per_slice: Option<Vec<f64>>,
    pub couplings: Option<Vec<Assignment>>,
}

#[derive(Clone, Copy, Debug)]
pub struct LossOptions {
    /// Include the t_0 slice in the decoupled sum (off by default:
    /// both ensembles share the initial law, so its W2 is noise).
    pub include_t0: bool,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self { include_t0: false }
    }
}

fn check_grids(e: &Ensemble, e_hat: &Ensemble) -> Result<()> {
    if !e.same_grid(e_hat) {
        return Err(Error::GridMismatch("loss requires a shared grid".into()));
    }
    if e.m_s != e_hat.m_s {
        return Err(Error::ShapeMismatch(format!(
            "ensemble sizes differ: {} vs {}",
            e.m_s, e_hat.m_s
        )));
    }
    Ok(())
}

fn slice_cloud(ens: &Ensemble, i: usize) -> PointCloud {
    PointCloud::new(ens.slice_at(i), ens.m_s, ens.d).expect("ensemble slices are finite")
}

fn decoupled_slice_range(n_steps: usize, opts: LossOptions) -> std::ops::Range<usize> {
    if opts.include_t0 {
        0..n_steps
    } else {
        1..n_steps
    }
}

/// Temporally decoupled squared W2: exact per-slice transport between
/// the two M_s-point clouds, summed over slices.
pub fn loss_decoupled_w2sq(e: &Ensemble, e_hat: &Ensemble) -> Result<LossValue> {
    loss_decoupled_w2sq_with(e, e_hat, LossOptions::default())
}

pub fn loss_decoupled_w2sq_with(
    e: &Ensemble,
    e_hat: &Ensemble,
    opts: LossOptions,
) -> Result<LossValue> {
    check_grids(e, e_hat)?;
    let range = decoupled_slice_range(e.grid.n_steps, opts);
    let solved: Result<Vec<(f64, Assignment)>> = range
        .clone()
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|i| {
            let xs = slice_cloud(e, i);
            let ys = slice_cloud(e_hat, i);
            w2sq_exact(&xs, &ys)
        })
        .collect();
    let solved = solved?;
    let per_slice: Vec<f64> = solved.iter().map(|(v, _)| *v).collect();
    let couplings: Vec<Assignment> = solved.into_iter().map(|(_, a)| a).collect();
    Ok(LossValue {
        value: per_slice.iter().sum(),
        per_slice: Some(per_slice),
        couplings: Some(couplings),
    })
}

/// Re-evaluates the decoupled loss with the couplings frozen; used by
/// the envelope-rule gradient and its finite-difference checks.
pub fn decoupled_w2sq_frozen(
    e: &Ensemble,
    e_hat: &Ensemble,
    couplings: &[Assignment],
    opts: LossOptions,
) -> Result<f64> {
    check_grids(e, e_hat)?;
    let range = decoupled_slice_range(e.grid.n_steps, opts);
    if couplings.len() != range.len() {
        return Err(Error::ShapeMismatch("one coupling per slice required".into()));
    }
    let mut total = 0.0;
    for (slot, i) in range.enumerate() {
        let perm = &couplings[slot].permutation;
        let mut acc = 0.0;
        for p in 0..e.m_s {
            let x = e.state(p, i);
            let y = e_hat.state(perm[p], i);
            acc += x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
        total += acc / e.m_s as f64;
    }
    Ok(total)
}

fn flatten_trajectories(ens: &Ensemble) -> Vec<Vec<f64>> {
    // grid points t_0..t_{N-1}
    let n = ens.grid.n_steps;
    (0..ens.m_s)
        .map(|j| {
            let mut row = Vec::with_capacity(n * ens.d);
            for i in 0..n {
                row.extend_from_slice(ens.state(j, i));
            }
            row
        })
        .collect()
}

/// Squared W2 on whole trajectories: one exact matching with cost
/// |X^i - X_hat^j|_2^2 over the flattened t_0..t_{N-1} values.
pub fn loss_w2sq_traj(e: &Ensemble, e_hat: &Ensemble) -> Result<LossValue> {
    check_grids(e, e_hat)?;
    let xs = flatten_trajectories(e);
    let ys = flatten_trajectories(e_hat);
    let m = xs.len();
    let mut costs = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..m {
            costs[i * m + j] =
                xs[i].iter().zip(&ys[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
    }
    if costs.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("trajectory cost matrix overflowed".into()));
    }
    let assignment = solve_assignment(&costs, m);
    Ok(LossValue { value: assignment.cost, per_slice: None, couplings: Some(vec![assignment]) })
}

/// W1 on whole trajectories: unsquared Euclidean cost.
pub fn loss_w1_traj(e: &Ensemble, e_hat: &Ensemble) -> Result<LossValue> {
    check_grids(e, e_hat)?;
    let xs = flatten_trajectories(e);
    let ys = flatten_trajectories(e_hat);
    let m = xs.len();
    let mut costs = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..m {
            costs[i * m + j] = xs[i]
                .iter()
                .zip(&ys[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
        }
    }
    if costs.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("trajectory cost matrix overflowed".into()));
    }
    let assignment = solve_assignment(&costs, m);
    Ok(LossValue { value: assignment.cost, per_slice: None, couplings: Some(vec![assignment]) })
}

/// Index-aligned mean squared error over slices t_0..t_{N-1}:
/// `(1 / (M_s N)) sum_i sum_j |X_j(t_i) - X_hat_j(t_i)|^2`.
pub fn loss_mse(e: &Ensemble, e_hat: &Ensemble) -> Result<LossValue> {
    check_grids(e, e_hat)?;
    let n = e.grid.n_steps;
    let norm = 1.0 / (e.m_s as f64 * n as f64);
    let mut per_slice = Vec::with_capacity(n);
    for i in 0..n {
        let mut acc = 0.0;
        for j in 0..e.m_s {
            let x = e.state(j, i);
            let y = e_hat.state(j, i);
            acc += x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
        per_slice.push(acc * norm);
    }
    Ok(LossValue { value: per_slice.iter().sum(), per_slice: Some(per_slice), couplings: None })
}

fn slice_mean_var(ens: &Ensemble, i: usize) -> (Vec<f64>, Vec<f64>) {
    let d = ens.d;
    let m = ens.m_s as f64;
    let mut mean = vec![0.0; d];
    for j in 0..ens.m_s {
        for (c, v) in ens.state(j, i).iter().enumerate() {
            mean[c] += v;
        }
    }
    for v in &mut mean {
        *v /= m;
    }
    let mut var = vec![0.0; d];
    for j in 0..ens.m_s {
        for (c, v) in ens.state(j, i).iter().enumerate() {
            let dv = v - mean[c];
            var[c] += dv * dv;
        }
    }
    for v in &mut var {
        *v /= m; // population convention
    }
    (mean, var)
}

/// Per-slice `(mean gap)^2 + |var gap|`, coordinates summed, slices
/// t_0..t_{N-1} summed.
pub fn loss_mean2var(e: &Ensemble, e_hat: &Ensemble) -> Result<LossValue> {
    check_grids(e, e_hat)?;
    let n = e.grid.n_steps;
    let mut per_slice = Vec::with_capacity(n);
    for i in 0..n {
        let (mx, vx) = slice_mean_var(e, i);
        let (my, vy) = slice_mean_var(e_hat, i);
        let mut acc = 0.0;
        for c in 0..e.d {
            let gap = mx[c] - my[c];
            acc += gap * gap + (vx[c] - vy[c]).abs();
        }
        per_slice.push(acc);
    }
    Ok(LossValue { value: per_slice.iter().sum(), per_slice: Some(per_slice), couplings: None })
}

/// Bandwidth ladder for one slice: sigma_k^2 = base * 2^k, k = 0..4,
/// base = median pairwise squared distance of the ground-truth slice.
fn mmd_bandwidths(xs: &PointCloud) -> [f64; 5] {
    let m = xs.len();
    let mut dists = Vec::with_capacity(m * (m - 1) / 2);
    for i in 0..m {
        for j in i + 1..m {
            let d2: f64 = xs
                .point(i)
                .iter()
                .zip(xs.point(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            dists.push(d2);
        }
    }
    dists.sort_by(|a, b| a.total_cmp(b));
    let base = if dists.is_empty() {
        1.0
    } else {
        let mid = dists[dists.len() / 2];
        if mid > 0.0 {
            mid
        } else {
            1.0
        }
    };
    [base, base * 2.0, base * 4.0, base * 8.0, base * 16.0]
}

fn mmd_kernel(a: &[f64], b: &[f64], bw: &[f64; 5]) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    bw.iter().map(|s2| (-d2 / (2.0 * s2)).exp()).sum()
}

/// Per-slice squared MMD with a 5-kernel Gaussian mixture (biased
/// V-statistic), summed over slices t_1..t_{N-1}.
pub fn loss_mmd(e: &Ensemble, e_hat: &Ensemble) -> Result<LossValue> {
    check_grids(e, e_hat)?;
    let n = e.grid.n_steps;
    let m = e.m_s as f64;
    let per_slice: Vec<f64> = (1..n)
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|i| {
            let xs = slice_cloud(e, i);
            let ys = slice_cloud(e_hat, i);
            let bw = mmd_bandwidths(&xs);
            let mut kxx = 0.0;
            let mut kxy = 0.0;
            let mut kyy = 0.0;
            for p in 0..e.m_s {
                for q in 0..e.m_s {
                    kxx += mmd_kernel(xs.point(p), xs.point(q), &bw);
                    kxy += mmd_kernel(xs.point(p), ys.point(q), &bw);
                    kyy += mmd_kernel(ys.point(p), ys.point(q), &bw);
                }
            }
            (kxx - 2.0 * kxy + kyy) / (m * m)
        })
        .collect();
    Ok(LossValue { value: per_slice.iter().sum(), per_slice: Some(per_slice), couplings: None })
}

/// Evaluates the selected loss.
pub fn evaluate(kind: LossKind, e: &Ensemble, e_hat: &Ensemble) -> Result<LossValue> {
    match kind {
        LossKind::DecoupledW2sq => loss_decoupled_w2sq(e, e_hat),
        LossKind::W2sq => loss_w2sq_traj(e, e_hat),
        LossKind::W1 => loss_w1_traj(e, e_hat),
        LossKind::Mse => loss_mse(e, e_hat),
        LossKind::Mean2var => loss_mean2var(e, e_hat),
        LossKind::Mmd => loss_mmd(e, e_hat),
    }
}

/// Gradients of a loss with respect to every surrogate state entry,
/// laid out like the ensemble buffer `[traj][point][coord]`.
#[derive(Clone, Debug)]
pub struct SliceGrads {
    pub m_s: usize,
    pub n_points: usize,
    pub d: usize,
    data: Vec<f64>,
}

impl SliceGrads {
    fn zeros(ens: &Ensemble) -> Self {
        Self {
            m_s: ens.m_s,
            n_points: ens.grid.n_points(),
            d: ens.d,
            data: vec![0.0; ens.m_s * ens.grid.n_points() * ens.d],
        }
    }

    pub fn at(&self, traj: usize, point: usize) -> &[f64] {
        let base = (traj * self.n_points + point) * self.d;
        &self.data[base..base + self.d]
    }

    fn at_mut(&mut self, traj: usize, point: usize) -> &mut [f64] {
        let base = (traj * self.n_points + point) * self.d;
        &mut self.data[base..base + self.d]
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|v| *v == 0.0)
    }
}

/// Loss value plus d(loss)/d(surrogate states). For the W-losses the
/// optimal coupling is frozen (envelope rule) and the matched
/// distances are differentiated; the other losses are differentiated
/// in full.
pub fn loss_and_state_grads(
    kind: LossKind,
    e: &Ensemble,
    e_hat: &Ensemble,
) -> Result<(LossValue, SliceGrads)> {
    check_grids(e, e_hat)?;
    let m = e.m_s as f64;
    let n = e.grid.n_steps;
    let mut grads = SliceGrads::zeros(e_hat);
    let loss = match kind {
        LossKind::DecoupledW2sq => {
            let loss = loss_decoupled_w2sq(e, e_hat)?;
            let couplings = loss.couplings.as_ref().unwrap();
            for (slot, i) in decoupled_slice_range(n, LossOptions::default()).enumerate() {
                let perm = &couplings[slot].permutation;
                for p in 0..e.m_s {
                    let q = perm[p];
                    let x = e.state(p, i);
                    let g = grads.at_mut(q, i);
                    let y = e_hat.state(q, i);
                    for c in 0..e.d {
                        g[c] += 2.0 / m * (y[c] - x[c]);
                    }
                }
            }
            loss
        }
        LossKind::W2sq => {
            let loss = loss_w2sq_traj(e, e_hat)?;
            let perm = &loss.couplings.as_ref().unwrap()[0].permutation;
            for p in 0..e.m_s {
                let q = perm[p];
                for i in 0..n {
                    let x = e.state(p, i);
                    let y = e_hat.state(q, i);
                    let g = grads.at_mut(q, i);
                    for c in 0..e.d {
                        g[c] += 2.0 / m * (y[c] - x[c]);
                    }
                }
            }
            loss
        }
        LossKind::W1 => {
            let loss = loss_w1_traj(e, e_hat)?;
            let perm = &loss.couplings.as_ref().unwrap()[0].permutation;
            for p in 0..e.m_s {
                let q = perm[p];
                let mut dist2 = 0.0;
                for i in 0..n {
                    let x = e.state(p, i);
                    let y = e_hat.state(q, i);
                    dist2 += x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
                }
                let dist = dist2.sqrt();
                if dist == 0.0 {
                    continue; // subgradient 0 at coincident pairs
                }
                for i in 0..n {
                    let x = e.state(p, i);
                    let y = e_hat.state(q, i);
                    let g = grads.at_mut(q, i);
                    for c in 0..e.d {
                        g[c] += (y[c] - x[c]) / (m * dist);
                    }
                }
            }
            loss
        }
        LossKind::Mse => {
            let loss = loss_mse(e, e_hat)?;
            let norm = 2.0 / (m * n as f64);
            for j in 0..e.m_s {
                for i in 0..n {
                    let x = e.state(j, i);
                    let y = e_hat.state(j, i);
                    let g = grads.at_mut(j, i);
                    for c in 0..e.d {
                        g[c] += norm * (y[c] - x[c]);
                    }
                }
            }
            loss
        }
        LossKind::Mean2var => {
            let loss = loss_mean2var(e, e_hat)?;
            for i in 0..n {
                let (mx, vx) = slice_mean_var(e, i);
                let (my, vy) = slice_mean_var(e_hat, i);
                for j in 0..e.m_s {
                    let y = e_hat.state(j, i).to_vec();
                    let g = grads.at_mut(j, i);
                    for c in 0..e.d {
                        let mean_gap = mx[c] - my[c];
                        g[c] += 2.0 * mean_gap * (-1.0 / m);
                        let var_gap = vx[c] - vy[c];
                        let sign = if var_gap > 0.0 {
                            1.0
                        } else if var_gap < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        g[c] += -sign * 2.0 / m * (y[c] - my[c]);
                    }
                }
            }
            loss
        }
        LossKind::Mmd => {
            let loss = loss_mmd(e, e_hat)?;
            for i in 1..n {
                let xs = slice_cloud(e, i);
                let ys = slice_cloud(e_hat, i);
                let bw = mmd_bandwidths(&xs);
                for q in 0..e.m_s {
                    let yq = ys.point(q).to_vec();
                    let mut gq = vec![0.0; e.d];
                    for p in 0..e.m_s {
                        // -2/M^2 K(x_p, y_q) term
                        let xp = xs.point(p);
                        let d2x: f64 =
                            xp.iter().zip(&yq).map(|(a, b)| (a - b) * (a - b)).sum();
                        for s2 in &bw {
                            let k = (-d2x / (2.0 * s2)).exp();
                            for c in 0..e.d {
                                gq[c] += -2.0 / (m * m) * k * (xp[c] - yq[c]) / s2;
                            }
                        }
                        // +1/M^2 K(y_p, y_q) term, both argument slots
                        let yp = ys.point(p);
                        let d2y: f64 =
                            yp.iter().zip(&yq).map(|(a, b)| (a - b) * (a - b)).sum();
                        for s2 in &bw {
                            let k = (-d2y / (2.0 * s2)).exp();
                            for c in 0..e.d {
                                gq[c] += 2.0 / (m * m) * k * (yp[c] - yq[c]) / s2;
                            }
                        }
                    }
                    let g = grads.at_mut(q, i);
                    for c in 0..e.d {
                        g[c] += gq[c];
                    }
                }
            }
            loss
        }
    };
    Ok((loss, grads))
}
