//! Exact optimal-transport distances between equal-size uniform
//! empirical distributions, plus convergence-rate and Gaussian
//! lower-bound diagnostics.
//!
//! Equal sample sizes with uniform weights reduce the earth-mover
//! problem to a minimum-cost perfect matching, solved exactly on the
//! dense cost matrix by a shortest-augmenting-path method in O(M^3).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::process::ProcessSpec;
use crate::sim::{Ensemble, TimeGrid};

/// M samples in R^k, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<f64>,
    m: usize,
    k: usize,
}

impl PointCloud {
    pub fn new(points: Vec<f64>, m: usize, k: usize) -> Result<Self> {
        if m < 1 || k < 1 || points.len() != m * k {
            return Err(Error::ShapeMismatch(format!(
                "point cloud buffer {} != {m} x {k}",
                points.len()
            )));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("point cloud entries".into()));
        }
        Ok(Self { points, m, k })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.len();
        let k = rows.first().map(|r| r.len()).unwrap_or(0);
        let mut points = Vec::with_capacity(m * k);
        for r in rows {
            if r.len() != k {
                return Err(Error::ShapeMismatch("ragged point cloud rows".into()));
            }
            points.extend_from_slice(r);
        }
        Self::new(points, m, k)
    }

    pub fn len(&self) -> usize {
        self.m
    }

    pub fn is_empty(&self) -> bool {
        self.m == 0
    }

    pub fn dim(&self) -> usize {
        self.k
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.k..(i + 1) * self.k]
    }
}

/// Optimal pairing for equal-size uniform marginals: `permutation[i]`
/// is the index in the second cloud matched to point `i` of the first;
/// `cost` is the transport cost averaged by 1/M.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub permutation: Vec<usize>,
    pub cost: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Minimum-cost perfect matching on a dense n x n cost matrix
/// (row-major), by shortest augmenting paths with dual potentials.
/// Ties break toward the lowest column index, so the returned matching
/// is reproducible; the optimal cost is unique regardless.
///
/// Costs must be finite: a single inf/NaN entry poisons the dual
/// updates and the search cannot terminate.
pub fn solve_assignment(costs: &[f64], n: usize) -> Assignment {
    assert_eq!(costs.len(), n * n);
    assert!(costs.iter().all(|c| c.is_finite()), "assignment costs must be finite");
    let inf = f64::INFINITY;
    // 1-based arrays in the style of the classic formulation
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1]; // p[j] = row matched to column j
    let mut way = vec![0usize; n + 1];

    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = costs[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut permutation = vec![0usize; n];
    for j in 1..=n {
        permutation[p[j] - 1] = j - 1;
    }
    let mut total = 0.0;
    for (i, &j) in permutation.iter().enumerate() {
        total += costs[i * n + j];
    }
    Assignment { permutation, cost: total / n as f64 }
}

fn check_pair(xs: &PointCloud, ys: &PointCloud) -> Result<()> {
    if xs.len() != ys.len() {
        return Err(Error::ShapeMismatch(format!(
            "cloud sizes differ: {} vs {}",
            xs.len(),
            ys.len()
        )));
    }
    if xs.dim() != ys.dim() {
        return Err(Error::ShapeMismatch("cloud dimensions differ".into()));
    }
    Ok(())
}

/// Squared W2 between 1-D clouds by sorted matching; the optimal
/// coupling in one dimension pairs order statistics.
pub fn w2sq_1d(xs: &PointCloud, ys: &PointCloud) -> Result<(f64, Assignment)> {
    check_pair(xs, ys)?;
    if xs.dim() != 1 {
        return Err(Error::ShapeMismatch("w2sq_1d expects k = 1".into()));
    }
    let m = xs.len();
    let mut xi: Vec<usize> = (0..m).collect();
    let mut yi: Vec<usize> = (0..m).collect();
    xi.sort_by(|&a, &b| xs.point(a)[0].total_cmp(&xs.point(b)[0]));
    yi.sort_by(|&a, &b| ys.point(a)[0].total_cmp(&ys.point(b)[0]));
    let mut permutation = vec![0usize; m];
    let mut total = 0.0;
    for r in 0..m {
        let (i, j) = (xi[r], yi[r]);
        permutation[i] = j;
        let d = xs.point(i)[0] - ys.point(j)[0];
        total += d * d;
    }
    let cost = total / m as f64;
    Ok((cost, Assignment { permutation, cost }))
}

/// Exact squared W2 between equal-size clouds in any dimension:
/// minimum-cost matching on squared-Euclidean costs, averaged by 1/M.
pub fn w2sq_exact(xs: &PointCloud, ys: &PointCloud) -> Result<(f64, Assignment)> {
    check_pair(xs, ys)?;
    let m = xs.len();
    let mut costs = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..m {
            costs[i * m + j] = sq_dist(xs.point(i), ys.point(j));
        }
    }
    if costs.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("squared-distance cost matrix overflowed".into()));
    }
    let assignment = solve_assignment(&costs, m);
    Ok((assignment.cost, assignment))
}

/// Exact W1 between equal-size clouds: matching on unsquared
/// Euclidean costs, averaged by 1/M.
pub fn w1_exact(xs: &PointCloud, ys: &PointCloud) -> Result<f64> {
    Ok(w1_exact_with_assignment(xs, ys)?.0)
}

pub fn w1_exact_with_assignment(xs: &PointCloud, ys: &PointCloud) -> Result<(f64, Assignment)> {
    check_pair(xs, ys)?;
    let m = xs.len();
    let mut costs = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..m {
            costs[i * m + j] = sq_dist(xs.point(i), ys.point(j)).sqrt();
        }
    }
    if costs.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("distance cost matrix overflowed".into()));
    }
    let assignment = solve_assignment(&costs, m);
    Ok((assignment.cost, assignment))
}

/// Exhaustive minimum over all M! pairings; test oracle, M <= 9.
pub fn w2sq_bruteforce(xs: &PointCloud, ys: &PointCloud) -> Result<f64> {
    brute_force_min(xs, ys, sq_dist)
}

/// Brute-force W1 counterpart of [`w2sq_bruteforce`].
pub fn w1_bruteforce(xs: &PointCloud, ys: &PointCloud) -> Result<f64> {
    brute_force_min(xs, ys, |a, b| sq_dist(a, b).sqrt())
}

fn brute_force_min(
    xs: &PointCloud,
    ys: &PointCloud,
    cost: impl Fn(&[f64], &[f64]) -> f64,
) -> Result<f64> {
    check_pair(xs, ys)?;
    let m = xs.len();
    if m > 9 {
        return Err(Error::InvalidParameter(format!(
            "brute-force enumeration limited to M <= 9 (got {m})"
        )));
    }
    let total = |perm: &[usize]| -> f64 {
        perm.iter().enumerate().map(|(i, &j)| cost(xs.point(i), ys.point(j))).sum()
    };
    // Heap's algorithm over all permutations
    let mut perm: Vec<usize> = (0..m).collect();
    let mut c = vec![0usize; m];
    let mut best = total(&perm);
    let mut i = 0;
    while i < m {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            best = best.min(total(&perm));
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    Ok(best / m as f64)
}

/// Empirical-convergence rate factor:
/// `M^{-1/4} log(1+M)^{1/2}` for n <= 4 and `M^{-1/n}` for n > 4.
pub fn rate_h(m: usize, n: usize) -> f64 {
    let mf = m as f64;
    if n <= 4 {
        mf.powf(-0.25) * (1.0 + mf).ln().sqrt()
    } else {
        mf.powf(-1.0 / n as f64)
    }
}

/// Quadrature estimates of the second-moment matrices S_t, S_hat_t and
/// the drift-integral gap entering the Gaussian lower bound.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentMatrices {
    pub d: usize,
    /// Integrated sigma sigma^T + sum_s beta_s beta_s^T nu(s) of the
    /// ground truth, row-major d x d.
    pub s: Vec<f64>,
    /// Same integral for the surrogate, evaluated with the surrogate's
    /// own jump amplitudes.
    pub s_hat: Vec<f64>,
    /// E[int f ds] - E[int f_hat ds], per coordinate.
    pub drift_gap: Vec<f64>,
}

/// Running left-endpoint quadratures of one spec over one ensemble;
/// index i of each output integrates over [0, t_i].
fn accumulate_moments(
    spec: &ProcessSpec,
    ens: &Ensemble,
    grid: &TimeGrid,
    upto: usize,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let d = spec.d;
    let dt = grid.dt();
    let m_s = ens.m_s as f64;
    let mut s_by_t = Vec::with_capacity(upto + 1);
    let mut f_by_t = Vec::with_capacity(upto + 1);
    let mut s_run = vec![0.0; d * d];
    let mut f_run = vec![0.0; d];
    s_by_t.push(s_run.clone());
    f_by_t.push(f_run.clone());
    for i in 0..upto {
        let t = grid.time(i);
        let mut s_slice = vec![0.0; d * d];
        let mut f_slice = vec![0.0; d];
        for j in 0..ens.m_s {
            let x = ens.state(j, i);
            let f = (spec.coefficients.drift)(x, t);
            let sigma = (spec.coefficients.diffusion)(x, t);
            for a in 0..d {
                f_slice[a] += f[a];
                for b in 0..d {
                    let mut acc = 0.0;
                    for l in 0..spec.m {
                        acc += sigma[a * spec.m + l] * sigma[b * spec.m + l];
                    }
                    s_slice[a * d + b] += acc;
                }
            }
            for mark in 0..spec.measure.n_marks() {
                let beta = (spec.coefficients.jump)(x, mark, t);
                let nu = spec.measure.rate(mark);
                for a in 0..d {
                    for b in 0..d {
                        s_slice[a * d + b] += beta[a] * beta[b] * nu;
                    }
                }
            }
        }
        for (r, v) in s_run.iter_mut().zip(&s_slice) {
            *r += v / m_s * dt;
        }
        for (r, v) in f_run.iter_mut().zip(&f_slice) {
            *r += v / m_s * dt;
        }
        s_by_t.push(s_run.clone());
        f_by_t.push(f_run.clone());
    }
    (s_by_t, f_by_t)
}

/// Monte Carlo estimate of the moment matrices at grid index `t_index`
/// by left-endpoint quadrature over slices `0..t_index`.
pub fn estimate_moment_matrices(
    spec: &ProcessSpec,
    spec_hat: &ProcessSpec,
    ens: &Ensemble,
    ens_hat: &Ensemble,
    grid: &TimeGrid,
    t_index: usize,
) -> Result<MomentMatrices> {
    let ladder = moment_matrix_ladder(spec, spec_hat, ens, ens_hat, grid, t_index)?;
    Ok(ladder.into_iter().last().unwrap())
}

/// [`estimate_moment_matrices`] for every index `0..=t_index` in one
/// pass; entry `i` integrates over `[0, t_i]`.
pub fn moment_matrix_ladder(
    spec: &ProcessSpec,
    spec_hat: &ProcessSpec,
    ens: &Ensemble,
    ens_hat: &Ensemble,
    grid: &TimeGrid,
    t_index: usize,
) -> Result<Vec<MomentMatrices>> {
    if !ens.same_grid(ens_hat) {
        return Err(Error::GridMismatch("moment matrices need a shared grid".into()));
    }
    if t_index >= grid.n_points() {
        return Err(Error::InvalidParameter(format!(
            "t_index {t_index} out of range for {} grid points",
            grid.n_points()
        )));
    }
    if spec.d != spec_hat.d || spec.d != ens.d {
        return Err(Error::ShapeMismatch("spec/ensemble dimensions differ".into()));
    }
    let d = spec.d;
    let (s_by_t, f_by_t) = accumulate_moments(spec, ens, grid, t_index);
    let (sh_by_t, fh_by_t) = accumulate_moments(spec_hat, ens_hat, grid, t_index);
    Ok((0..=t_index)
        .map(|i| MomentMatrices {
            d,
            s: s_by_t[i].clone(),
            s_hat: sh_by_t[i].clone(),
            drift_gap: f_by_t[i].iter().zip(&fh_by_t[i]).map(|(a, b)| a - b).collect(),
        })
        .collect())
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi
/// rotations. Returns (eigenvalues, eigenvectors column-major).
pub fn symmetric_eigen(a: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut m = a.to_vec();
    let mut q = vec![0.0; d * d];
    for i in 0..d {
        q[i * d + i] = 1.0;
    }
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..d {
            for r in p + 1..d {
                off += m[p * d + r] * m[p * d + r];
            }
        }
        if off.sqrt() < 1e-14 * (1.0 + frob(&m)) {
            break;
        }
        for p in 0..d {
            for r in p + 1..d {
                let apq = m[p * d + r];
                if apq == 0.0 {
                    continue;
                }
                let app = m[p * d + p];
                let aqq = m[r * d + r];
                let theta = 0.5 * (aqq - app) / apq;
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let mkp = m[k * d + p];
                    let mkq = m[k * d + r];
                    m[k * d + p] = c * mkp - s * mkq;
                    m[k * d + r] = s * mkp + c * mkq;
                }
                for k in 0..d {
                    let mpk = m[p * d + k];
                    let mqk = m[r * d + k];
                    m[p * d + k] = c * mpk - s * mqk;
                    m[r * d + k] = s * mpk + c * mqk;
                }
                for k in 0..d {
                    let qkp = q[k * d + p];
                    let qkq = q[k * d + r];
                    q[k * d + p] = c * qkp - s * qkq;
                    q[k * d + r] = s * qkp + c * qkq;
                }
            }
        }
    }
    let eigvals: Vec<f64> = (0..d).map(|i| m[i * d + i]).collect();
    (eigvals, q)
}

fn frob(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Positive square root of a symmetric PSD matrix; eigenvalues in
/// [-1e-10, 0) are clipped to zero (Monte Carlo noise), anything more
/// negative is rejected.
pub fn sqrt_psd(a: &[f64], d: usize) -> Result<Vec<f64>> {
    let mut sym = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            sym[i * d + j] = 0.5 * (a[i * d + j] + a[j * d + i]);
        }
    }
    let scale = 1.0 + frob(&sym);
    let (vals, q) = symmetric_eigen(&sym, d);
    let mut roots = vec![0.0; d];
    for (i, &v) in vals.iter().enumerate() {
        if v < -1e-10 * scale {
            return Err(Error::InvalidParameter(format!("matrix is not PSD: eigenvalue {v}")));
        }
        roots[i] = v.max(0.0).sqrt();
    }
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            let mut acc = 0.0;
            for k in 0..d {
                acc += q[i * d + k] * roots[k] * q[j * d + k];
            }
            out[i * d + j] = acc;
        }
    }
    Ok(out)
}

fn matmul(a: &[f64], b: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            let mut acc = 0.0;
            for k in 0..d {
                acc += a[i * d + k] * b[k * d + j];
            }
            out[i * d + j] = acc;
        }
    }
    out
}

/// Bures discrepancy `Tr(S + S_hat - 2 (S^{1/2} S_hat S^{1/2})^{1/2})`.
pub fn bures_gap(s: &[f64], s_hat: &[f64], d: usize) -> Result<f64> {
    let root = sqrt_psd(s, d)?;
    sqrt_psd(s_hat, d)?; // validate PSD on both inputs
    let inner = matmul(&matmul(&root, s_hat, d), &root, d);
    let cross = sqrt_psd(&inner, d)?;
    let mut tr = 0.0;
    for i in 0..d {
        tr += s[i * d + i] + s_hat[i * d + i] - 2.0 * cross[i * d + i];
    }
    Ok(tr)
}

/// Time integral of the Gaussian lower bound over the grid:
/// `sum_i [ |drift_gap(t_i)|^2 + Tr(S + S_hat - 2 (S^{1/2} S_hat S^{1/2})^{1/2}) ] dt`,
/// one [`MomentMatrices`] entry per left quadrature node t_0..t_{N-1}.
pub fn gaussian_lower_bound(mms: &[MomentMatrices], grid: &TimeGrid) -> Result<f64> {
    if mms.len() != grid.n_steps {
        return Err(Error::ShapeMismatch(format!(
            "need one MomentMatrices per step: {} vs {}",
            mms.len(),
            grid.n_steps
        )));
    }
    let dt = grid.dt();
    let mut total = 0.0;
    for mm in mms {
        let gap_sq: f64 = mm.drift_gap.iter().map(|g| g * g).sum();
        total += (gap_sq + bures_gap(&mm.s, &mm.s_hat, mm.d)?) * dt;
    }
    Ok(total)
}

/// Lower-bound estimate straight from a spec/ensemble pair; integrates
/// the per-step moment matrices over the whole grid.
pub fn gaussian_lower_bound_for_pair(
    spec: &ProcessSpec,
    spec_hat: &ProcessSpec,
    ens: &Ensemble,
    ens_hat: &Ensemble,
    grid: &TimeGrid,
) -> Result<f64> {
    let ladder = moment_matrix_ladder(spec, spec_hat, ens, ens_hat, grid, grid.n_steps - 1)?;
    gaussian_lower_bound(&ladder, grid)
}
