use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::linalg::{cholesky_jitter, solve_with_l};
use crate::error::{Error, Result};
use crate::par;
use crate::seed::{rng_for, stream};
use crate::stats;

pub const SIGMA_BOUNDS: (f64, f64) = (1e-3, 1e3);
pub const DEFAULT_RESTARTS: usize = 3;

/// ARD squared-exponential hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArdParams {
    /// Signal variance.
    pub nu: f64,
    /// Per-feature lengthscales.
    pub sigmas: Vec<f64>,
    /// Noise standard deviation.
    pub sigma_n: f64,
}

impl ArdParams {
    pub fn shared(nu: f64, sigma: f64, n_features: usize, sigma_n: f64) -> Self {
        ArdParams {
            nu,
            sigmas: vec![sigma; n_features],
            sigma_n,
        }
    }

    pub fn validate(&self, n_features: usize) -> Result<()> {
        if self.sigmas.len() != n_features {
            return Err(Error::invalid(format!(
                "{} lengthscales for {n_features} features",
                self.sigmas.len()
            )));
        }
        if !(self.nu > 0.0 && self.nu.is_finite())
            || self.sigmas.iter().any(|s| !(*s > 0.0))
            || !(self.sigma_n >= 0.0 && self.sigma_n.is_finite())
        {
            return Err(Error::invalid(format!("invalid kernel hyperparameters {self:?}")));
        }
        Ok(())
    }

    /// `[ln ν, ln σ_1 .. ln σ_F, ln σ_n]`.
    pub fn to_log(&self) -> Vec<f64> {
        let mut v = vec![self.nu.ln()];
        v.extend(self.sigmas.iter().map(|s| s.ln()));
        v.push(self.sigma_n.ln());
        v
    }

    pub fn from_log(v: &[f64]) -> Self {
        let f = v.len() - 2;
        ArdParams {
            nu: v[0].exp(),
            sigmas: v[1..=f].iter().map(|s| s.exp()).collect(),
            sigma_n: v[f + 1].exp(),
        }
    }
}

fn sq_scaled_dist(a: &DMatrix<f64>, i: usize, b: &DMatrix<f64>, j: usize, inv2: &[f64]) -> f64 {
    inv2.iter()
        .enumerate()
        .map(|(f, w)| {
            let d = a[(i, f)] - b[(j, f)];
            d * d * w
        })
        .sum()
}

/// Noise-free ARD covariance between the rows of `a` and `b`.
pub fn ard_kernel(a: &DMatrix<f64>, b: &DMatrix<f64>, theta: &ArdParams) -> DMatrix<f64> {
    let inv2: Vec<f64> = theta.sigmas.iter().map(|s| 1.0 / (2.0 * s * s)).collect();
    DMatrix::from_fn(a.nrows(), b.nrows(), |i, j| theta.nu * (-sq_scaled_dist(a, i, b, j, &inv2)).exp())
}

/// Training covariance: [`ard_kernel`] of `a` with itself plus `σ_n²` on
/// the diagonal.
pub fn ard_kernel_train(a: &DMatrix<f64>, theta: &ArdParams) -> DMatrix<f64> {
    let mut k = ard_kernel(a, a, theta);
    for i in 0..a.nrows() {
        k[(i, i)] += theta.sigma_n * theta.sigma_n;
    }
    k
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum Kernel {
    Ard(ArdParams),
    /// Dot product of inputs centered on `center`, with ridge `lambda`.
    Linear { center: Vec<f64>, lambda: f64 },
}

impl Kernel {
    fn cross(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Kernel::Ard(t) => ard_kernel(a, b, t),
            Kernel::Linear { center, .. } => DMatrix::from_fn(a.nrows(), b.nrows(), |i, j| {
                center
                    .iter()
                    .enumerate()
                    .map(|(f, c)| (a[(i, f)] - c) * (b[(j, f)] - c))
                    .sum()
            }),
        }
    }

    fn noise_var(&self) -> f64 {
        match self {
            Kernel::Ard(t) => t.sigma_n * t.sigma_n,
            Kernel::Linear { lambda, .. } => *lambda,
        }
    }

    fn prior_var(&self, x: &DMatrix<f64>, i: usize) -> f64 {
        match self {
            Kernel::Ard(t) => t.nu,
            Kernel::Linear { center, .. } => center.iter().enumerate().map(|(f, c)| (x[(i, f)] - c).powi(2)).sum(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    Krr,
    Gpr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelModel {
    pub kind: KernelKind,
    pub kernel: Kernel,
    train_inputs: DMatrix<f64>,
    pub alphas: Vec<f64>,
    pub alpha0: f64,
    /// Cholesky factor of the training covariance (GPR only).
    factor: Option<DMatrix<f64>>,
    pub jitter: f64,
    pub log_marginal_likelihood: Option<f64>,
}

fn check_xy(x: &DMatrix<f64>, y: &[f64]) -> Result<()> {
    if x.nrows() < 2 || x.nrows() != y.len() {
        return Err(Error::InsufficientData(format!(
            "kernel fit needs at least 2 aligned rows, got {} rows and {} targets",
            x.nrows(),
            y.len()
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("regression inputs".into()));
    }
    Ok(())
}

fn fit_kernel(x: &DMatrix<f64>, y: &[f64], kernel: Kernel, kind: KernelKind) -> Result<KernelModel> {
    check_xy(x, y)?;
    if let Kernel::Ard(t) = &kernel {
        t.validate(x.ncols())?;
    }
    let mut k = kernel.cross(x, x);
    let nv = kernel.noise_var();
    for i in 0..x.nrows() {
        k[(i, i)] += nv;
    }
    let fac = cholesky_jitter(&k)?;
    let alpha0 = stats::mean(y);
    let yc = DVector::from_iterator(y.len(), y.iter().map(|v| v - alpha0));
    let alphas = fac.solve(&yc);
    Ok(KernelModel {
        kind,
        kernel,
        train_inputs: x.clone(),
        alphas: alphas.iter().copied().collect(),
        alpha0,
        factor: (kind == KernelKind::Gpr).then_some(fac.l),
        jitter: fac.jitter,
        log_marginal_likelihood: None,
    })
}

/// Kernel ridge regression at fixed hyperparameters; `σ_n²` is the ridge.
pub fn fit_krr(x: &DMatrix<f64>, y: &[f64], theta: &ArdParams) -> Result<KernelModel> {
    fit_kernel(x, y, Kernel::Ard(theta.clone()), KernelKind::Krr)
}

/// Kernel ridge regression with a centered linear kernel.
pub fn fit_krr_linear(x: &DMatrix<f64>, y: &[f64], lambda: f64) -> Result<KernelModel> {
    let center = super::linalg::column_means(x);
    fit_kernel(x, y, Kernel::Linear { center, lambda }, KernelKind::Krr)
}

/// GP posterior at fixed hyperparameters.
pub fn fit_gpr_fixed(x: &DMatrix<f64>, y: &[f64], theta: &ArdParams) -> Result<KernelModel> {
    let mut m = fit_kernel(x, y, Kernel::Ard(theta.clone()), KernelKind::Gpr)?;
    m.log_marginal_likelihood = Some(log_marginal_likelihood(x, y, theta)?.value);
    Ok(m)
}

impl KernelModel {
    pub fn train_inputs(&self) -> &DMatrix<f64> {
        &self.train_inputs
    }

    pub fn theta(&self) -> Option<&ArdParams> {
        match &self.kernel {
            Kernel::Ard(t) => Some(t),
            Kernel::Linear { .. } => None,
        }
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> Vec<f64> {
        let ks = self.kernel.cross(x, &self.train_inputs);
        let a = DVector::from_column_slice(&self.alphas);
        (ks * a).iter().map(|v| self.alpha0 + v).collect()
    }

    /// Predictive mean and latent variance `k** − k*ᵀ K⁻¹ k*` (clamped at 0).
    pub fn predict_with_variance(&self, x: &DMatrix<f64>) -> Result<Vec<(f64, f64)>> {
        let l = self
            .factor
            .as_ref()
            .ok_or_else(|| Error::invalid("predictive variance needs a GPR model"))?;
        let ks = self.kernel.cross(x, &self.train_inputs);
        let a = DVector::from_column_slice(&self.alphas);
        let means = &ks * a;
        Ok(par::map_range(x.nrows(), |i| {
            let k = ks.row(i).transpose();
            let v = l.solve_lower_triangular(&k).expect("non-singular factor");
            let var = self.kernel.prior_var(x, i) - v.dot(&v);
            (self.alpha0 + means[i], var.max(0.0))
        }))
    }

    /// `K⁻¹ b` against the training covariance (GPR only).
    pub fn solve_train(&self, b: &DVector<f64>) -> Option<DVector<f64>> {
        self.factor.as_ref().map(|l| solve_with_l(l, b))
    }
}

/// Log marginal likelihood of centered `y` and its gradient with respect to
/// [`ArdParams::to_log`].
#[derive(Debug, Clone, PartialEq)]
pub struct LmlEval {
    pub value: f64,
    pub gradient: Vec<f64>,
}

pub fn log_marginal_likelihood(x: &DMatrix<f64>, y: &[f64], theta: &ArdParams) -> Result<LmlEval> {
    check_xy(x, y)?;
    theta.validate(x.ncols())?;
    let n = x.nrows();
    let kf = ard_kernel(x, x, theta);
    let mut k = kf.clone();
    let s2 = theta.sigma_n * theta.sigma_n;
    for i in 0..n {
        k[(i, i)] += s2;
    }
    let fac = cholesky_jitter(&k)?;
    let ym = stats::mean(y);
    let yc = DVector::from_iterator(n, y.iter().map(|v| v - ym));
    let alpha = fac.solve(&yc);
    let value = -0.5 * yc.dot(&alpha) - 0.5 * fac.log_det() - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
    if !value.is_finite() {
        return Err(Error::NonFinite("log marginal likelihood".into()));
    }
    let mut w = fac.inverse();
    w.neg_mut();
    w.ger(1.0, &alpha, &alpha, 1.0);
    let f = x.ncols();
    let mut grad = vec![0.0; f + 2];
    let mut g_nu = 0.0;
    let mut g_f = vec![0.0; f];
    for i in 0..n {
        g_nu += 0.5 * w[(i, i)] * kf[(i, i)];
        for j in 0..i {
            let wk = w[(i, j)] * kf[(i, j)];
            g_nu += wk;
            for (ff, g) in g_f.iter_mut().enumerate() {
                let d = x[(i, ff)] - x[(j, ff)];
                *g += wk * d * d;
            }
        }
    }
    grad[0] = g_nu;
    for (ff, g) in g_f.iter().enumerate() {
        grad[ff + 1] = g / (theta.sigmas[ff] * theta.sigmas[ff]);
    }
    grad[f + 1] = s2 * w.trace();
    Ok(LmlEval { value, gradient: grad })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GprOptions {
    pub restarts: usize,
    pub max_iter: usize,
    pub sigma_bounds: (f64, f64),
}

impl Default for GprOptions {
    fn default() -> Self {
        GprOptions {
            restarts: DEFAULT_RESTARTS,
            max_iter: 100,
            sigma_bounds: SIGMA_BOUNDS,
        }
    }
}

struct LogBounds {
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl LogBounds {
    fn clamp(&self, v: &mut [f64]) {
        for ((x, lo), hi) in v.iter_mut().zip(&self.lo).zip(&self.hi) {
            *x = x.clamp(*lo, *hi);
        }
    }
}

fn ascend(x: &DMatrix<f64>, y: &[f64], start: Vec<f64>, bounds: &LogBounds, max_iter: usize) -> Result<(Vec<f64>, f64)> {
    let mut th = start;
    bounds.clamp(&mut th);
    let mut cur = log_marginal_likelihood(x, y, &ArdParams::from_log(&th))?;
    let mut step = 0.1 / cur.gradient.iter().fold(1.0f64, |m, g| m.max(g.abs()));
    for _ in 0..max_iter {
        let mut accepted = None;
        for _ in 0..40 {
            let mut cand: Vec<f64> = th.iter().zip(&cur.gradient).map(|(t, g)| t + step * g).collect();
            bounds.clamp(&mut cand);
            if cand == th {
                break;
            }
            match log_marginal_likelihood(x, y, &ArdParams::from_log(&cand)) {
                Ok(e) if e.value > cur.value => {
                    accepted = Some((cand, e));
                    break;
                }
                _ => step *= 0.5,
            }
        }
        let Some((cand, next)) = accepted else { break };
        let s: Vec<f64> = cand.iter().zip(&th).map(|(a, b)| a - b).collect();
        let yv: Vec<f64> = next.gradient.iter().zip(&cur.gradient).map(|(a, b)| a - b).collect();
        let ss: f64 = s.iter().map(|v| v * v).sum();
        let sy: f64 = s.iter().zip(&yv).map(|(a, b)| a * b).sum();
        step = if sy < 0.0 { ss / -sy } else { step * 2.0 };
        step = step.clamp(1e-10, 1e3);
        let gain = next.value - cur.value;
        th = cand;
        cur = next;
        if gain <= 1e-10 * (1.0 + cur.value.abs()) {
            break;
        }
    }
    Ok((th, cur.value))
}

/// GPR with hyperparameters from multi-restart marginal-likelihood ascent in
/// log space. Restart 0 starts from `init` (or a data-scaled default).
pub fn fit_gpr(
    x: &DMatrix<f64>,
    y: &[f64],
    init: Option<&ArdParams>,
    options: &GprOptions,
    seed: u64,
) -> Result<KernelModel> {
    check_xy(x, y)?;
    let f = x.ncols();
    let vy = stats::pop_std(y).powi(2).max(1e-12);
    let sy = vy.sqrt();
    let (slo, shi) = options.sigma_bounds;
    let mut lo = vec![(1e-4 * vy).ln()];
    let mut hi = vec![(1e3 * vy).ln()];
    lo.extend(std::iter::repeat_n(slo.ln(), f));
    hi.extend(std::iter::repeat_n(shi.ln(), f));
    lo.push((1e-3 * sy).ln());
    hi.push((10.0 * sy).ln());
    let bounds = LogBounds { lo, hi };
    let default = ArdParams::shared(vy, (f.max(1) as f64).sqrt(), f, 0.1 * sy);
    let first = init.unwrap_or(&default);
    first.validate(f)?;
    let starts: Vec<Vec<f64>> = (0..options.restarts.max(1))
        .map(|r| {
            if r == 0 {
                return first.to_log();
            }
            let mut rng = rng_for(seed, &[stream::RESTART, r as u64]);
            let mut v = vec![vy.ln() + rng.random_range(-1.0..1.0)];
            let base = (f.max(1) as f64).sqrt().ln();
            v.extend((0..f).map(|_| base + rng.random_range(-1.5..1.5)));
            v.push(sy.ln() + rng.random_range(0.01f64.ln()..0.5f64.ln()));
            v
        })
        .collect();
    let runs = par::map_slice(&starts, |s| ascend(x, y, s.clone(), &bounds, options.max_iter));
    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut last_err = None;
    for r in runs {
        match r {
            Ok((th, v)) if best.as_ref().is_none_or(|b| v > b.1) => best = Some((th, v)),
            Ok(_) => {}
            Err(e) => last_err = Some(e),
        }
    }
    let (th, value) = match (best, last_err) {
        (Some(b), _) => b,
        (None, Some(e)) => return Err(e),
        (None, None) => unreachable!("at least one restart"),
    };
    let mut m = fit_kernel(x, y, Kernel::Ard(ArdParams::from_log(&th)), KernelKind::Gpr)?;
    m.log_marginal_likelihood = Some(value);
    Ok(m)
}
