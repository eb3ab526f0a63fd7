//! Coefficient-function interfaces, the finite jump measure, and the
//! ground-truth model zoo.
//!
//! A process is described by a drift `f(x,t) -> R^d`, a diffusion
//! `sigma(x,t) -> R^{d x m}` (row-major), and a per-mark jump amplitude
//! `beta(x, s, t) -> R^d`. Jumps are driven by compensated Poisson
//! processes over a finite mark set `{0..n-1}` with rates `nu(s)`.

use std::sync::Arc;

use crate::error::{Error, Result};

pub type DriftFn = Arc<dyn Fn(&[f64], f64) -> Vec<f64> + Send + Sync>;
/// Returns the d x m diffusion matrix flattened row-major.
pub type DiffusionFn = Arc<dyn Fn(&[f64], f64) -> Vec<f64> + Send + Sync>;
/// Jump amplitude for one mark: (x, mark, t) -> R^d.
pub type JumpFn = Arc<dyn Fn(&[f64], usize, f64) -> Vec<f64> + Send + Sync>;

/// Finite jump measure: marks `0..n-1` with per-mark rates per unit time.
#[derive(Clone, Debug, PartialEq)]
pub struct JumpMeasure {
    rates: Vec<f64>,
}

impl JumpMeasure {
    pub fn new(rates: Vec<f64>) -> Result<Self> {
        if rates.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(Error::InvalidParameter(
                "jump rates must be finite and nonnegative".into(),
            ));
        }
        Ok(Self { rates })
    }

    /// Measure with no marks (pure diffusion).
    pub fn empty() -> Self {
        Self { rates: Vec::new() }
    }

    pub fn n_marks(&self) -> usize {
        self.rates.len()
    }

    pub fn rate(&self, mark: usize) -> f64 {
        self.rates[mark]
    }

    pub fn rates(&self) -> &[f64] {
        &self.rates
    }

    /// nu(U) = sum of per-mark rates.
    pub fn total_rate(&self) -> f64 {
        self.rates.iter().sum()
    }
}

#[derive(Clone)]
pub struct CoefficientSet {
    pub drift: DriftFn,
    pub diffusion: DiffusionFn,
    pub jump: JumpFn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpecSource {
    GroundTruth,
    Surrogate,
}

#[derive(Clone)]
pub struct ProcessSpec {
    pub d: usize,
    pub m: usize,
    pub measure: JumpMeasure,
    pub coefficients: CoefficientSet,
    pub source: SpecSource,
}

impl ProcessSpec {
    pub fn new(
        d: usize,
        m: usize,
        measure: JumpMeasure,
        coefficients: CoefficientSet,
        source: SpecSource,
    ) -> Result<Self> {
        if d < 1 {
            return Err(Error::InvalidParameter("state dimension d must be >= 1".into()));
        }
        Ok(Self { d, m, measure, coefficients, source })
    }
}

/// Isotropic Gaussian initial law: mean + stddev * N(0, I).
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct InitialLaw {
    pub mean: Vec<f64>,
    pub stddev: f64,
}

impl InitialLaw {
    pub fn new(mean: Vec<f64>, stddev: f64) -> Result<Self> {
        if !stddev.is_finite() || stddev < 0.0 {
            return Err(Error::InvalidParameter("initial stddev must be >= 0".into()));
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("initial mean".into()));
        }
        Ok(Self { mean, stddev })
    }

    /// Deterministic start at `mean`.
    pub fn point(mean: Vec<f64>) -> Self {
        Self { mean, stddev: 0.0 }
    }
}

/// Evaluates all coefficients of `spec` at `(x, t)` with shape checks.
pub fn evaluate_coefficients(
    spec: &ProcessSpec,
    x: &[f64],
    t: f64,
) -> Result<(Vec<f64>, Vec<f64>, Vec<Vec<f64>>)> {
    if x.iter().any(|v| !v.is_finite()) || !t.is_finite() {
        return Err(Error::NonFinite(format!("coefficient input at t={t}")));
    }
    if x.len() != spec.d {
        return Err(Error::ShapeMismatch(format!(
            "state has {} entries, spec.d = {}",
            x.len(),
            spec.d
        )));
    }
    let f = (spec.coefficients.drift)(x, t);
    if f.len() != spec.d {
        return Err(Error::ShapeMismatch("drift output".into()));
    }
    let sigma = (spec.coefficients.diffusion)(x, t);
    if sigma.len() != spec.d * spec.m {
        return Err(Error::ShapeMismatch("diffusion output".into()));
    }
    let mut betas = Vec::with_capacity(spec.measure.n_marks());
    for s in 0..spec.measure.n_marks() {
        let b = (spec.coefficients.jump)(x, s, t);
        if b.len() != spec.d {
            return Err(Error::ShapeMismatch(format!("jump output for mark {s}")));
        }
        betas.push(b);
    }
    Ok((f, sigma, betas))
}

/// 1D bond-pricing model: drift `b + y0 + a x`, diffusion
/// `sigma0 sqrt(|x|)`, constant jump amplitude `y0`, unit mark rate.
pub fn make_example1(b: f64, a: f64, sigma0: f64, y0: f64) -> ProcessSpec {
    let drift: DriftFn = Arc::new(move |x: &[f64], _t| vec![b + y0 + a * x[0]]);
    let diffusion: DiffusionFn = Arc::new(move |x: &[f64], _t| vec![sigma0 * x[0].abs().sqrt()]);
    let jump: JumpFn = Arc::new(move |_x: &[f64], _s, _t| vec![y0]);
    ProcessSpec {
        d: 1,
        m: 1,
        measure: JumpMeasure::new(vec![1.0]).unwrap(),
        coefficients: CoefficientSet { drift, diffusion, jump },
        source: SpecSource::GroundTruth,
    }
}

/// Functional form of the diffusion / jump coefficient in the 1D
/// stock-return model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CoeffForm {
    Const,
    Linear,
    Langevin,
}

impl CoeffForm {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "const" => Ok(Self::Const),
            "linear" => Ok(Self::Linear),
            "langevin" => Ok(Self::Langevin),
            other => Err(Error::InvalidParameter(format!(
                "unknown coefficient form '{other}' (expected const|linear|langevin)"
            ))),
        }
    }

    fn apply(self, c: f64, x: f64) -> f64 {
        match self {
            Self::Const => c,
            Self::Linear => c * x,
            Self::Langevin => c * x.abs().sqrt(),
        }
    }
}

/// 1D stock-return model: constant drift `r0`, diffusion and jump of
/// the selected forms with coefficients `sigma0`, `beta0`, unit mark rate.
pub fn make_example2(
    form_sigma: CoeffForm,
    form_beta: CoeffForm,
    sigma0: f64,
    beta0: f64,
    r0: f64,
) -> ProcessSpec {
    let drift: DriftFn = Arc::new(move |_x: &[f64], _t| vec![r0]);
    let diffusion: DiffusionFn = Arc::new(move |x: &[f64], _t| vec![form_sigma.apply(sigma0, x[0])]);
    let jump: JumpFn = Arc::new(move |x: &[f64], _s, _t| vec![form_beta.apply(beta0, x[0])]);
    ProcessSpec {
        d: 1,
        m: 1,
        measure: JumpMeasure::new(vec![1.0]).unwrap(),
        coefficients: CoefficientSet { drift, diffusion, jump },
        source: SpecSource::GroundTruth,
    }
}

/// Parameters of the 2D double-well drift baked into `make_example3`.
pub mod example3_params {
    pub const SIGMA1: f64 = 1.0;
    pub const SIGMA2: f64 = 0.95;
    pub const MU11: f64 = 1.6;
    pub const MU12: f64 = 1.2;
    pub const MU21: f64 = 1.8;
    pub const MU22: f64 = 1.0;
}

/// The 2D drift magnitude `g`; the process drift is `-g`.
pub fn example3_g(x: &[f64]) -> Vec<f64> {
    use example3_params::*;
    let (x1, x2) = (x[0], x[1]);
    let n1 = (2.0 * std::f64::consts::PI).sqrt().recip() / SIGMA1
        * (-(x1 - MU11).powi(2) / (2.0 * SIGMA1 * SIGMA1)
            - (x2 - MU12).powi(2) / (2.0 * SIGMA1 * SIGMA1))
            .exp();
    let n2 = (2.0 * std::f64::consts::PI).sqrt().recip() / SIGMA2
        * (-(x1 - MU21).powi(2) / (2.0 * SIGMA2 * SIGMA2)
            - (x2 - MU22).powi(2) / (2.0 * SIGMA2 * SIGMA2))
            .exp();
    let w1 = n1 / (n1 + n2);
    let w2 = n2 / (n1 + n2);
    vec![
        w1 / SIGMA1 * (x1 - MU11) + w2 / SIGMA2 * (x1 - MU21),
        w1 / SIGMA1 * (x2 - MU21) + w2 / SIGMA2 * (x2 - MU22),
    ]
}

/// 2D model with correlated diffusion and jump matrices. Two
/// independent marks, each with unit rate; the jump amplitude for mark
/// `s` is column `s` of the symmetric matrix `[[b0, c2 b0], [c2 b0, b0]]`.
pub fn make_example3(c1: f64, c2: f64, sigma0: f64, beta0: f64) -> Result<ProcessSpec> {
    if c1.abs() > 1.0 || c2.abs() > 1.0 {
        return Err(Error::InvalidParameter(format!(
            "correlation coefficients must satisfy |c1| <= 1, |c2| <= 1 (got {c1}, {c2})"
        )));
    }
    let drift: DriftFn = Arc::new(move |x: &[f64], _t| {
        let g = example3_g(x);
        vec![-g[0], -g[1]]
    });
    let diffusion: DiffusionFn = Arc::new(move |x: &[f64], _t| {
        let r1 = sigma0 * x[0].abs().sqrt();
        let r2 = sigma0 * x[1].abs().sqrt();
        // row-major [[s r1, c1 s r2], [c1 s r1, s r2]] with s folded in
        vec![r1, c1 * r2, c1 * r1, r2]
    });
    let jump: JumpFn = Arc::new(move |_x: &[f64], s, _t| match s {
        0 => vec![beta0, c2 * beta0],
        _ => vec![c2 * beta0, beta0],
    });
    Ok(ProcessSpec {
        d: 2,
        m: 2,
        measure: JumpMeasure::new(vec![1.0, 1.0]).unwrap(),
        coefficients: CoefficientSet { drift, diffusion, jump },
        source: SpecSource::GroundTruth,
    })
}

fn param(params: &serde_json::Map<String, serde_json::Value>, key: &str, default: f64) -> Result<f64> {
    match params.get(key) {
        None => Ok(default),
        Some(v) => v
            .as_f64()
            .ok_or_else(|| Error::InvalidParameter(format!("parameter '{key}' must be a number"))),
    }
}

fn form_param(
    params: &serde_json::Map<String, serde_json::Value>,
    key: &str,
    default: CoeffForm,
) -> Result<CoeffForm> {
    match params.get(key) {
        None => Ok(default),
        Some(v) => CoeffForm::parse(v.as_str().ok_or_else(|| {
            Error::InvalidParameter(format!("parameter '{key}' must be a string"))
        })?),
    }
}

/// Builds a zoo model from its string identifier and key-value
/// parameters; unknown keys are rejected. Defaults reproduce the
/// stock experiment settings.
pub fn model_from_id(
    id: &str,
    params: &serde_json::Map<String, serde_json::Value>,
) -> Result<ProcessSpec> {
    let allowed: &[&str] = match id {
        "example1" => &["b", "a", "sigma0", "y0"],
        "example2" => &["form_sigma", "form_beta", "sigma0", "beta0", "r0"],
        "example3" => &["c1", "c2", "sigma0", "beta0"],
        other => {
            return Err(Error::InvalidParameter(format!(
                "unknown model id '{other}' (expected example1|example2|example3)"
            )))
        }
    };
    for key in params.keys() {
        if !allowed.contains(&key.as_str()) {
            return Err(Error::InvalidParameter(format!(
                "model '{id}' does not accept parameter '{key}'"
            )));
        }
    }
    match id {
        "example1" => Ok(make_example1(
            param(params, "b", 4.0)?,
            param(params, "a", -1.0)?,
            param(params, "sigma0", 0.4)?,
            param(params, "y0", 1.0)?,
        )),
        "example2" => Ok(make_example2(
            form_param(params, "form_sigma", CoeffForm::Langevin)?,
            form_param(params, "form_beta", CoeffForm::Langevin)?,
            param(params, "sigma0", 0.1)?,
            param(params, "beta0", 0.1)?,
            param(params, "r0", 0.05)?,
        )),
        "example3" => make_example3(
            param(params, "c1", -0.5)?,
            param(params, "c2", -0.5)?,
            param(params, "sigma0", 0.1)?,
            param(params, "beta0", 0.1)?,
        ),
        _ => unreachable!(),
    }
}

/// Default initial law for a zoo model id.
pub fn default_initial_law(id: &str) -> Result<InitialLaw> {
    match id {
        "example1" => Ok(InitialLaw::point(vec![2.0])),
        "example2" => Ok(InitialLaw::point(vec![1.0])),
        "example3" => Ok(InitialLaw::point(vec![1.7, 1.1])),
        other => Err(Error::InvalidParameter(format!("unknown model id '{other}'"))),
    }
}
