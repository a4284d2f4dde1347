//! Monte Carlo study engine: simulation, one-step-ahead evaluation against
//! the simulated signal, and the full-path mode oracle.
//!
//! Every series draws from its own ChaCha8 stream (see [`child_seed`]) and
//! results are gathered in series order, so a report depends only on the
//! config, never on the thread count.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bellman::{run_scalar, StateBelief, UpdateOptions};
use crate::dynamics::LinearGaussianDynamics;
use crate::error::{Error, Result};
use crate::estimation::{FitOptions, QmleModel, ScalarModel};
use crate::kalman::qmle_transforms;
use crate::numerics::cholesky;
use crate::obsmodels::{ObsSeries, ObservationModel, ScalarFamily, ShapeParams};
use crate::particle::{csir_estimate, csir_filter_signal, StateSpaceModel};

/// Longest window accepted by the mode oracle.
pub const MODE_WINDOW_MAX: usize = 250;

/// Mean absolute error and root mean squared error of `pred` against `truth`.
pub fn metrics(pred: &[f64], truth: &[f64]) -> Result<(f64, f64)> {
    if pred.len() != truth.len() {
        return Err(Error::LengthMismatch(pred.len(), truth.len()));
    }
    if pred.is_empty() {
        return Err(Error::Config("metrics of an empty series".into()));
    }
    if truth.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("NaN in the true signal".into()));
    }
    let n = pred.len() as f64;
    let (mut abs, mut sq) = (0.0, 0.0);
    for (p, y) in pred.iter().zip(truth) {
        let e = p - y;
        abs += e.abs();
        sq += e * e;
    }
    Ok((abs / n, (sq / n).sqrt()))
}

/// Seed for stream `i` under master seed `master`: the first 64-bit word of
/// ChaCha8 keyed by `seed_from_u64(master)` and switched to stream `i`.
/// Distinct streams never overlap, so series are independent of each other
/// and of scheduling.
pub fn child_seed(master: u64, i: u64) -> u64 {
    let mut r = ChaCha8Rng::seed_from_u64(master);
    r.set_stream(i);
    r.next_u64()
}

/// A simulated series together with its latent states.
#[derive(Debug, Clone, PartialEq)]
pub struct Simulated {
    pub data: ObsSeries,
    pub states: Vec<DVector<f64>>,
}

/// Simulates `n` steps with `α_1` drawn from the stationary distribution.
pub fn simulate<R: Rng + ?Sized>(
    obs: &ObservationModel,
    dynamics: &LinearGaussianDynamics,
    n: usize,
    rng: &mut R,
) -> Result<Simulated> {
    obs.validate()?;
    if obs.state_dim() != dynamics.dim() {
        return Err(Error::Dimension("observation model and dynamics disagree on the state dimension".into()));
    }
    let m = dynamics.dim();
    let (mean, cov) = dynamics.stationary_moments()?;
    let l0 = cholesky(&cov)?.l();
    let lq = cholesky(dynamics.q())?.l();
    let mut z = DVector::zeros(m);
    let mut draw = |rng: &mut R| {
        z.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
        z.clone()
    };
    let mut data = ObsSeries::with_capacity(obs.obs_dim(), n);
    let mut states = Vec::with_capacity(n);
    let mut a = &mean + &l0 * draw(rng);
    for t in 0..n {
        if t > 0 {
            a = dynamics.predict_state(&a) + &lq * draw(rng);
        }
        data.push(&obs.sample(&a, rng)?);
        states.push(a.clone());
    }
    Ok(Simulated { data, states })
}

// ---------------------------------------------------------------------------
// Mode oracle

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModeOptions {
    /// Converged when the largest Newton step is below `tol`.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for ModeOptions {
    fn default() -> Self {
        ModeOptions { tol: 1e-10, max_iter: 100 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModePath {
    /// `â_{1|n}, …, â_{n|n}`.
    pub path: Vec<DVector<f64>>,
    pub objective: f64,
    pub iterations: usize,
}

impl ModePath {
    pub fn last(&self) -> &DVector<f64> {
        self.path.last().expect("mode path is never empty")
    }
}

fn check_window(n: usize) -> Result<()> {
    if n == 0 || n > MODE_WINDOW_MAX {
        return Err(Error::Config(format!("mode window must hold 1..={MODE_WINDOW_MAX} observations, got {n}")));
    }
    Ok(())
}

/// Joint log-density of the path and data; `prior` is the belief about `α_1`.
fn mode_objective(
    obs: &ObservationModel,
    dynamics: &LinearGaussianDynamics,
    q_inv: &DMatrix<f64>,
    data: &ObsSeries,
    prior: &StateBelief,
    path: &[DVector<f64>],
) -> f64 {
    let d0 = &path[0] - &prior.mean;
    let mut f = -0.5 * d0.dot(&(prior.info.as_matrix() * &d0));
    for (t, a) in path.iter().enumerate() {
        if t > 0 {
            let r = a - dynamics.predict_state(&path[t - 1]);
            f -= 0.5 * r.dot(&(q_inv * &r));
        }
        if let Some(y) = data.get(t) {
            match obs.logpdf(y, a) {
                Ok(l) => f += l,
                Err(_) => return f64::NEG_INFINITY,
            }
        }
    }
    if f.is_nan() {
        f64::NEG_INFINITY
    } else {
        f
    }
}

/// Solves the block-tridiagonal system with diagonal blocks `diag`, constant
/// sub-diagonal block `low` (row `t`, column `t−1`) and right-hand side `rhs`.
fn solve_block_tridiagonal(
    diag: &[DMatrix<f64>],
    low: &DMatrix<f64>,
    rhs: &[DVector<f64>],
) -> Option<Vec<DVector<f64>>> {
    let n = diag.len();
    let mut chols = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for t in 0..n {
        let (s, r) = if t == 0 {
            (diag[0].clone(), rhs[0].clone())
        } else {
            let prev: &nalgebra::Cholesky<f64, nalgebra::Dyn> = &chols[t - 1];
            let w = prev.solve(&low.transpose());
            (&diag[t] - low * &w, &rhs[t] - low * prev.solve(&y[t - 1]))
        };
        chols.push(cholesky(&s).ok()?);
        y.push(r);
    }
    let mut x = vec![DVector::zeros(0); n];
    x[n - 1] = chols[n - 1].solve(&y[n - 1]);
    for t in (0..n - 1).rev() {
        let r = &y[t] - low.transpose() * &x[t + 1];
        x[t] = chols[t].solve(&r);
    }
    Some(x)
}

/// Full-path mode `â_{1:n|n}` by Newton's method on the stacked state
/// vector. The negative Hessian is block tridiagonal and is factorised
/// block by block; when the realised observation information makes it
/// indefinite the expected information is used for that iteration.
/// `prior` is the predicted belief about the first state in the window.
pub fn mode_oracle(
    obs: &ObservationModel,
    dynamics: &LinearGaussianDynamics,
    data: &ObsSeries,
    prior: &StateBelief,
    start: Option<&[DVector<f64>]>,
    opts: &ModeOptions,
) -> Result<ModePath> {
    let n = data.len();
    check_window(n)?;
    obs.validate()?;
    data.validate_for(obs)?;
    let m = dynamics.dim();
    if obs.state_dim() != m || prior.dim() != m {
        return Err(Error::Dimension("mode oracle: state dimensions disagree".into()));
    }
    let q_inv = dynamics.q_inv()?.clone();
    let t_mat = dynamics.t();
    let tq = t_mat.transpose() * &q_inv;
    let tqt = &tq * t_mat;
    let low = -(&q_inv * t_mat);

    let mut path: Vec<DVector<f64>> = match start {
        Some(s) if s.len() == n && s.iter().all(|a| a.len() == m) => s.to_vec(),
        Some(_) => return Err(Error::Dimension("mode start path has the wrong shape".into())),
        None => {
            let mut p = vec![prior.mean.clone()];
            for t in 1..n {
                p.push(dynamics.predict_state(&p[t - 1]));
            }
            p
        }
    };
    let mut f = mode_objective(obs, dynamics, &q_inv, data, prior, &path);
    if !f.is_finite() {
        return Err(Error::NonFiniteObjective);
    }
    for iter in 1..=opts.max_iter {
        let mut grad = Vec::with_capacity(n);
        let mut diag_r = Vec::with_capacity(n);
        let mut diag_e = Vec::with_capacity(n);
        for t in 0..n {
            let mut g = DVector::zeros(m);
            let mut d = DMatrix::zeros(m, m);
            if t == 0 {
                g -= prior.info.as_matrix() * (&path[0] - &prior.mean);
                d += prior.info.as_matrix();
            } else {
                g -= &q_inv * (&path[t] - dynamics.predict_state(&path[t - 1]));
                d += &q_inv;
            }
            if t + 1 < n {
                g += &tq * (&path[t + 1] - dynamics.predict_state(&path[t]));
                d += &tqt;
            }
            let (mut dr, mut de) = (d.clone(), d);
            if let Some(y) = data.get(t) {
                let e = obs.eval(y, &path[t])?;
                g += e.score;
                dr += e.realised;
                de += e.expected;
            }
            grad.push(g);
            diag_r.push(dr);
            diag_e.push(de);
        }
        let dir = solve_block_tridiagonal(&diag_r, &low, &grad)
            .or_else(|| solve_block_tridiagonal(&diag_e, &low, &grad))
            .ok_or(Error::NotConverged(iter))?;
        let size = dir.iter().map(|v| v.amax()).fold(0.0, f64::max);
        if size < opts.tol {
            return Ok(ModePath { path, objective: f, iterations: iter });
        }
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let cand: Vec<DVector<f64>> = path.iter().zip(&dir).map(|(a, d)| a + d * step).collect();
            let fc = mode_objective(obs, dynamics, &q_inv, data, prior, &cand);
            if fc >= f - 1e-12 * f.abs().max(1.0) {
                path = cand;
                f = fc;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            return Err(Error::NotConverged(iter));
        }
        if step * size < opts.tol {
            return Ok(ModePath { path, objective: f, iterations: iter });
        }
    }
    Err(Error::NotConverged(opts.max_iter))
}

/// Scalar fast path of [`mode_oracle`] for a scalar family with AR(1)
/// dynamics. `prior = (mean, information)` of `α_1`. Data must already be
/// validated for `fam`.
pub fn mode_path_scalar(
    fam: &ScalarFamily,
    (c, tt, q): (f64, f64, f64),
    prior: (f64, f64),
    data: &ObsSeries,
    start: Option<&[f64]>,
    opts: &ModeOptions,
) -> Result<(Vec<f64>, usize)> {
    let n = data.len();
    check_window(n)?;
    if !(q > 0.0) || !(prior.1 > 0.0) {
        return Err(Error::DegenerateParams("mode oracle needs Q > 0 and positive prior information".into()));
    }
    let qi = 1.0 / q;
    let objective = |p: &[f64]| {
        let mut f = -0.5 * prior.1 * (p[0] - prior.0).powi(2);
        for t in 0..n {
            if t > 0 {
                f -= 0.5 * qi * (p[t] - c - tt * p[t - 1]).powi(2);
            }
            if let Some(y) = data.get(t) {
                f += fam.eval_unchecked(y, p[t]).logpdf;
            }
        }
        if f.is_nan() {
            f64::NEG_INFINITY
        } else {
            f
        }
    };
    let mut path: Vec<f64> = match start {
        Some(s) if s.len() == n => s.to_vec(),
        Some(_) => return Err(Error::Dimension("mode start path has the wrong length".into())),
        None => {
            let mut p = vec![prior.0];
            for t in 1..n {
                p.push(c + tt * p[t - 1]);
            }
            p
        }
    };
    let mut f = objective(&path);
    if !f.is_finite() {
        return Err(Error::NonFiniteObjective);
    }
    let low = -qi * tt;
    let mut g = vec![0.0; n];
    let mut dr = vec![0.0; n];
    let mut de = vec![0.0; n];
    let mut s = vec![0.0; n];
    let mut y = vec![0.0; n];
    let mut dir = vec![0.0; n];
    // Thomas algorithm; false when a pivot is not positive
    let solve = |d: &[f64], g: &[f64], s: &mut [f64], y: &mut [f64], x: &mut [f64]| -> bool {
        for t in 0..n {
            if t == 0 {
                s[0] = d[0];
                y[0] = g[0];
            } else {
                s[t] = d[t] - low * low / s[t - 1];
                y[t] = g[t] - low * y[t - 1] / s[t - 1];
            }
            if !(s[t] > 0.0) {
                return false;
            }
        }
        x[n - 1] = y[n - 1] / s[n - 1];
        for t in (0..n - 1).rev() {
            x[t] = (y[t] - low * x[t + 1]) / s[t];
        }
        true
    };
    for iter in 1..=opts.max_iter {
        for t in 0..n {
            let (mut gt, mut d) = if t == 0 {
                (-prior.1 * (path[0] - prior.0), prior.1)
            } else {
                (-qi * (path[t] - c - tt * path[t - 1]), qi)
            };
            if t + 1 < n {
                gt += tt * qi * (path[t + 1] - c - tt * path[t]);
                d += tt * tt * qi;
            }
            let (mut r, mut e) = (d, d);
            if let Some(obs) = data.get(t) {
                let ev = fam.eval_unchecked(obs, path[t]);
                gt += ev.score;
                r += ev.realised;
                e += ev.expected;
            }
            g[t] = gt;
            dr[t] = r;
            de[t] = e;
        }
        if !solve(&dr, &g, &mut s, &mut y, &mut dir) && !solve(&de, &g, &mut s, &mut y, &mut dir) {
            return Err(Error::NotConverged(iter));
        }
        let size = dir.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if !size.is_finite() {
            return Err(Error::NotConverged(iter));
        }
        if size < opts.tol {
            return Ok((path, iter));
        }
        let mut step = 1.0;
        let mut accepted = false;
        let mut cand = vec![0.0; n];
        for _ in 0..40 {
            cand.iter_mut().zip(path.iter().zip(&dir)).for_each(|(c, (a, d))| *c = a + step * d);
            let fc = objective(&cand);
            if fc >= f - 1e-12 * f.abs().max(1.0) {
                std::mem::swap(&mut path, &mut cand);
                f = fc;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            return Err(Error::NotConverged(iter));
        }
        if step * size < opts.tol {
            return Ok((path, iter));
        }
    }
    Err(Error::NotConverged(opts.max_iter))
}

// ---------------------------------------------------------------------------
// Study configuration

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Bellman,
    KalmanQmle,
    Csir,
    Mode,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Bellman => "bellman",
            Method::KalmanQmle => "kalman-qmle",
            Method::Csir => "csir",
            Method::Mode => "mode",
        }
    }
}

/// Which parameters the filters run with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamSource {
    #[default]
    True,
    Estimated,
}

/// Estimation half. Evaluation is always on the second half, so `last`
/// evaluates on the training data and flatters every estimated method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    #[default]
    First,
    Last,
}

/// Starting point of the optimiser when parameters are estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StartPoint {
    Truth,
    #[default]
    Data,
}

/// True parameters; anything left out takes the study default for the model.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrueParams {
    pub c: Option<f64>,
    #[serde(rename = "T")]
    pub t: Option<f64>,
    #[serde(rename = "Q")]
    pub q: Option<f64>,
    pub kappa: Option<f64>,
    pub nu: Option<f64>,
    pub sigma: Option<f64>,
}

impl TrueParams {
    /// Observation model and `(c, T, Q)`. Unset values default to
    /// `c = 0, T = 0.98, Q = 0.0225`, or `c = 0.02, T = 0.98, Q = 0.01` for
    /// the dependence families, with the registry's default shapes.
    pub fn resolve(&self, model: &str) -> Result<(ObservationModel, f64, f64, f64)> {
        let obs = ObservationModel::from_id(model, ShapeParams { kappa: self.kappa, nu: self.nu, sigma: self.sigma })?;
        let dep = matches!(obs.as_family(), Some(ScalarFamily::DepGauss | ScalarFamily::DepT { .. }));
        let (c0, q0) = if dep { (0.02, 0.01) } else { (0.0, 0.0225) };
        let (c, t, q) = (self.c.unwrap_or(c0), self.t.unwrap_or(0.98), self.q.unwrap_or(q0));
        if !(t.abs() < 1.0) || !(q > 0.0) || !c.is_finite() {
            return Err(Error::Config("parameters need |T| < 1, Q > 0 and finite c".into()));
        }
        Ok((obs, c, t, q))
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputPaths {
    /// JSON report.
    pub report: Option<String>,
    /// Per-series losses as CSV.
    pub series_csv: Option<String>,
    /// Wall-clock timings as JSON (kept apart so reports stay reproducible).
    pub timings: Option<String>,
}

fn default_n_series() -> usize {
    100
}
fn default_length() -> usize {
    5000
}
fn default_methods() -> Vec<Method> {
    vec![Method::Bellman]
}
fn default_particles() -> usize {
    1000
}
fn default_window() -> usize {
    MODE_WINDOW_MAX
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub model: String,
    #[serde(default)]
    pub truth: TrueParams,
    #[serde(default = "default_n_series")]
    pub n_series: usize,
    #[serde(default = "default_length")]
    pub length: usize,
    #[serde(default)]
    pub params: ParamSource,
    #[serde(default)]
    pub split: Split,
    #[serde(default)]
    pub start: StartPoint,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    /// Method the relative losses are measured against; the first method
    /// when absent.
    #[serde(default)]
    pub baseline: Option<Method>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_particles")]
    pub particles: usize,
    #[serde(default = "default_window")]
    pub mode_window: usize,
    #[serde(default)]
    pub output: OutputPaths,
}

impl StudyConfig {
    /// Desk-scale defaults for `model`.
    pub fn new(model: &str, methods: Vec<Method>) -> Self {
        StudyConfig {
            model: model.to_string(),
            truth: TrueParams::default(),
            n_series: default_n_series(),
            length: default_length(),
            params: ParamSource::True,
            split: Split::First,
            start: StartPoint::Data,
            methods,
            baseline: None,
            seed: 0,
            particles: default_particles(),
            mode_window: default_window(),
            output: OutputPaths::default(),
        }
    }

    /// The data-generating model; see [`TrueParams::resolve`].
    pub fn true_model(&self) -> Result<ScalarModel> {
        let (obs, c, t, q) = self.truth.resolve(&self.model)?;
        let Some(&family) = obs.as_family() else {
            return Err(Error::Config(format!("the study runs scalar families only, not `{}`", self.model)));
        };
        Ok(ScalarModel { family, c, t, q })
    }

    pub fn baseline(&self) -> Method {
        self.baseline.unwrap_or_else(|| self.methods.first().copied().unwrap_or(Method::Bellman))
    }

    pub fn validate(&self) -> Result<()> {
        let truth = self.true_model()?;
        if self.n_series == 0 {
            return Err(Error::Config("n_series must be at least 1".into()));
        }
        if self.length < 2 || !self.length.is_multiple_of(2) {
            return Err(Error::Config("series length must be even and at least 2".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("no methods selected".into()));
        }
        for (i, m) in self.methods.iter().enumerate() {
            if self.methods[..i].contains(m) {
                return Err(Error::Config(format!("method `{}` listed twice", m.name())));
            }
        }
        if !self.methods.contains(&self.baseline()) {
            return Err(Error::Config("baseline is not among the methods".into()));
        }
        if self.methods.contains(&Method::KalmanQmle) {
            if let Err(Error::NotApplicable(_)) = qmle_transforms(&truth.family, &ObsSeries::scalar(vec![1.0]), false) {
                return Err(Error::Config(format!("kalman-qmle is not available for `{}`", self.model)));
            }
        }
        if self.methods.contains(&Method::Csir) && self.particles < 2 {
            return Err(Error::Config("particles must be at least 2".into()));
        }
        if self.mode_window == 0 || self.mode_window > MODE_WINDOW_MAX {
            return Err(Error::Config(format!("mode_window must lie in 1..={MODE_WINDOW_MAX}")));
        }
        Ok(())
    }

    pub fn eval_range(&self) -> std::ops::Range<usize> {
        self.length / 2..self.length
    }

    pub fn estimation_range(&self) -> std::ops::Range<usize> {
        match self.split {
            Split::First => 0..self.length / 2,
            Split::Last => self.length / 2..self.length,
        }
    }
}

// ---------------------------------------------------------------------------
// Study report

/// Losses of one method on one series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesOutcome {
    pub series: usize,
    pub method: Method,
    pub mae: Option<f64>,
    pub rmse: Option<f64>,
    /// Estimated natural parameters, when estimated.
    pub estimates: Option<Vec<f64>>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    /// Averaged over the series on which every method succeeded.
    pub mae: f64,
    /// Root of the mean squared error pooled over the same series.
    pub rmse: f64,
    pub relative_mae: f64,
    pub relative_rmse: f64,
    pub succeeded: usize,
    pub failed: usize,
    pub estimate_names: Vec<String>,
    pub mean_estimates: Option<Vec<f64>>,
}

/// Wall-clock seconds summed over series, per method and phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseTiming {
    pub method: Method,
    pub estimation_seconds: f64,
    pub filtering_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub model: String,
    pub n_series: usize,
    pub length: usize,
    pub eval_start: usize,
    pub eval_len: usize,
    pub params: ParamSource,
    pub split: Split,
    pub baseline: Method,
    /// Series on which every method succeeded; the summaries average these.
    pub common_series: usize,
    pub methods: Vec<MethodSummary>,
    pub series: Vec<SeriesOutcome>,
    /// Not serialised: timings vary from run to run.
    #[serde(skip)]
    pub timings: Vec<PhaseTiming>,
}

impl StudyReport {
    pub fn summary(&self, m: Method) -> Option<&MethodSummary> {
        self.methods.iter().find(|s| s.method == m)
    }
}

struct MethodRun {
    mae_pred: Vec<f64>,
    rmse_pred: Vec<f64>,
    estimates: Option<Vec<f64>>,
    est_seconds: f64,
    filt_seconds: f64,
}

fn fit_options() -> FitOptions {
    FitOptions { standard_errors: false, ..Default::default() }
}

fn estimate_names(cfg: &StudyConfig, truth: &ScalarModel, m: Method) -> Vec<String> {
    if cfg.params != ParamSource::Estimated {
        return vec![];
    }
    match m {
        Method::Bellman | Method::Csir => truth.parameter_vector().map(|p| p.names().to_vec()).unwrap_or_default(),
        Method::KalmanQmle => ["c", "T", "Q", "H"].iter().map(|s| s.to_string()).collect(),
        Method::Mode => vec![],
    }
}

fn start_model(cfg: &StudyConfig, truth: &ScalarModel, est: &ObsSeries) -> ScalarModel {
    match cfg.start {
        StartPoint::Truth => *truth,
        StartPoint::Data => ScalarModel::default_start(truth.family, est),
    }
}

/// One-step-ahead predicted states `a_{t|t−1}` of the Bellman filter.
pub fn bellman_predictions(model: &ScalarModel, data: &ObsSeries) -> Result<Vec<f64>> {
    let mut pred = Vec::with_capacity(data.len());
    let opts = model.update_options(&UpdateOptions::default());
    run_scalar(&model.family, model.c, model.t, model.q, data, &opts, None, |_, r| pred.push(r.a_pred))?;
    Ok(pred)
}

/// Mode-estimator predictions: `signal(c + T ã_{t−1|t−1})` with
/// `ã_{t−1|t−1}` the last element of the mode over the preceding `window`
/// observations, for every `t` in `range` (`range.start ≥ 1`).
pub fn mode_predictions(
    model: &ScalarModel,
    data: &ObsSeries,
    range: std::ops::Range<usize>,
    window: usize,
) -> Result<Vec<f64>> {
    if range.start == 0 || range.end > data.len() {
        return Err(Error::Config("mode predictions need 1 ≤ start and end ≤ n".into()));
    }
    check_window(window)?;
    data.validate_for(&model.observation())?;
    let (mean, cov) = model.dynamics()?.stationary_moments()?;
    let prior = (mean[0], 1.0 / cov[(0, 0)]);
    let opts = ModeOptions::default();
    let mut out = Vec::with_capacity(range.len());
    let mut warm: Option<(usize, Vec<f64>)> = None;
    for t in range {
        let lo = t.saturating_sub(window);
        let start = warm.take().map(|(prev_lo, mut p)| {
            p.drain(..lo - prev_lo);
            let last = *p.last().unwrap();
            p.push(model.c + model.t * last);
            p
        });
        let win = data.slice(lo..t);
        let (path, _) =
            mode_path_scalar(&model.family, (model.c, model.t, model.q), prior, &win, start.as_deref(), &opts)
                .map_err(|e| e.at(t))?;
        let last = *path.last().unwrap();
        out.push(model.family.signal(model.c + model.t * last));
        warm = Some((lo, path));
    }
    Ok(out)
}

fn run_method(
    cfg: &StudyConfig,
    truth: &ScalarModel,
    method: Method,
    data: &ObsSeries,
    csir_seed: u64,
) -> Result<MethodRun> {
    let eval = cfg.eval_range();
    let est = data.slice(cfg.estimation_range());
    let estimated = cfg.params == ParamSource::Estimated;
    let t0 = Instant::now();
    match method {
        Method::Bellman => {
            let (model, estimates) = if estimated {
                let (m, r) = start_model(cfg, truth, &est).fit(&est, &UpdateOptions::default(), &fit_options())?;
                (m, Some(r.params.natural().to_vec()))
            } else {
                (*truth, None)
            };
            let est_seconds = t0.elapsed().as_secs_f64();
            let t1 = Instant::now();
            let pred = bellman_predictions(&model, data)?;
            let sig: Vec<f64> = pred[eval].iter().map(|&a| model.family.signal(a)).collect();
            Ok(MethodRun {
                mae_pred: sig.clone(),
                rmse_pred: sig,
                estimates,
                est_seconds,
                filt_seconds: t1.elapsed().as_secs_f64(),
            })
        }
        Method::KalmanQmle => {
            let qi = qmle_transforms(&truth.family, data, false)?;
            let base = QmleModel { d: qi.offset, c: truth.c, t: truth.t, q: truth.q, h: qi.h_start };
            let (model, estimates) = if estimated {
                let s = start_model(cfg, truth, &est);
                let init = QmleModel { c: s.c, t: s.t, q: s.q, ..base };
                let (m, r) = init.fit(qi.data.slice(cfg.estimation_range()).values(), &fit_options())?;
                (m, Some(r.params.natural().to_vec()))
            } else {
                (base, None)
            };
            let est_seconds = t0.elapsed().as_secs_f64();
            let t1 = Instant::now();
            let pred = model.predictions(qi.data.values());
            let sig: Vec<f64> = pred[eval].iter().map(|&a| truth.family.signal(a)).collect();
            Ok(MethodRun {
                mae_pred: sig.clone(),
                rmse_pred: sig,
                estimates,
                est_seconds,
                filt_seconds: t1.elapsed().as_secs_f64(),
            })
        }
        Method::Csir => {
            let build = |x: &[f64]| StateSpaceModel::scalar(truth.family.with_shape(&x[3..])?, x[0], x[1], x[2]);
            let (model, estimates) = if estimated {
                let init = start_model(cfg, truth, &est).parameter_vector()?;
                let r = csir_estimate(build, &init, &est, cfg.particles, csir_seed, &fit_options())?;
                (truth.from_natural(r.params.natural())?, Some(r.params.natural().to_vec()))
            } else {
                (*truth, None)
            };
            let est_seconds = t0.elapsed().as_secs_f64();
            let t1 = Instant::now();
            let ssm = StateSpaceModel::scalar(model.family, model.c, model.t, model.q)?;
            let fam = model.family;
            let g = move |a: f64| fam.signal(a);
            let out = csir_filter_signal(&ssm, data, cfg.particles, csir_seed, Some(&g))?;
            let mae_pred = out.pred_median[eval.clone()].iter().map(|&a| fam.signal(a)).collect();
            let rmse_pred = out.pred_signal_mean[eval].to_vec();
            Ok(MethodRun { mae_pred, rmse_pred, estimates, est_seconds, filt_seconds: t1.elapsed().as_secs_f64() })
        }
        Method::Mode => {
            let sig = mode_predictions(truth, data, eval, cfg.mode_window)?;
            Ok(MethodRun {
                mae_pred: sig.clone(),
                rmse_pred: sig,
                estimates: None,
                est_seconds: 0.0,
                filt_seconds: t0.elapsed().as_secs_f64(),
            })
        }
    }
}

type SeriesResult = Vec<(SeriesOutcome, f64, f64)>;

fn run_series(cfg: &StudyConfig, truth: &ScalarModel, i: usize) -> SeriesResult {
    let seed = child_seed(cfg.seed, i as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let csir_seed = child_seed(seed, 1);
    let fail = |m: Method, e: &Error| {
        (
            SeriesOutcome { series: i, method: m, mae: None, rmse: None, estimates: None, error: Some(e.to_string()) },
            0.0,
            0.0,
        )
    };
    let sim = match truth.dynamics().and_then(|d| simulate(&truth.observation(), &d, cfg.length, &mut rng)) {
        Ok(s) => s,
        Err(e) => return cfg.methods.iter().map(|&m| fail(m, &e)).collect(),
    };
    let signal: Vec<f64> = sim.states[cfg.eval_range()].iter().map(|a| truth.family.signal(a[0])).collect();
    cfg.methods
        .iter()
        .map(|&m| {
            let run = run_method(cfg, truth, m, &sim.data, csir_seed).and_then(|r| {
                let (mae, _) = metrics(&r.mae_pred, &signal)?;
                let (_, rmse) = metrics(&r.rmse_pred, &signal)?;
                if mae.is_finite() && rmse.is_finite() {
                    Ok((r, mae, rmse))
                } else {
                    Err(Error::NonFinite("prediction loss".into()))
                }
            });
            match run {
                Ok((r, mae, rmse)) => (
                    SeriesOutcome {
                        series: i,
                        method: m,
                        mae: Some(mae),
                        rmse: Some(rmse),
                        estimates: r.estimates,
                        error: None,
                    },
                    r.est_seconds,
                    r.filt_seconds,
                ),
                Err(e) => fail(m, &e),
            }
        })
        .collect()
}

/// Runs the Monte Carlo study described by `cfg`. Series run in parallel on
/// the current rayon pool; failures are recorded per series and method and
/// excluded from the averages.
pub fn run_study(cfg: &StudyConfig) -> Result<StudyReport> {
    cfg.validate()?;
    let truth = cfg.true_model()?;
    let results: Vec<SeriesResult> = (0..cfg.n_series).into_par_iter().map(|i| run_series(cfg, &truth, i)).collect();

    let k = cfg.methods.len();
    let common: Vec<usize> =
        (0..cfg.n_series).filter(|&i| results[i].iter().all(|(o, _, _)| o.error.is_none())).collect();
    let mut timings = Vec::with_capacity(k);
    let mut summaries = Vec::with_capacity(k);
    for (j, &m) in cfg.methods.iter().enumerate() {
        let succeeded = results.iter().filter(|r| r[j].0.error.is_none()).count();
        let (mut mae, mut mse) = (0.0, 0.0);
        for &i in &common {
            let o = &results[i][j].0;
            mae += o.mae.unwrap();
            mse += o.rmse.unwrap().powi(2);
        }
        let nc = common.len() as f64;
        let (mae, rmse) = if common.is_empty() { (f64::NAN, f64::NAN) } else { (mae / nc, (mse / nc).sqrt()) };
        let names = estimate_names(cfg, &truth, m);
        let mean_estimates = if names.is_empty() || common.is_empty() {
            None
        } else {
            let mut acc = vec![0.0; names.len()];
            for &i in &common {
                if let Some(e) = &results[i][j].0.estimates {
                    acc.iter_mut().zip(e).for_each(|(a, v)| *a += v / nc);
                }
            }
            Some(acc)
        };
        summaries.push(MethodSummary {
            method: m,
            mae,
            rmse,
            relative_mae: f64::NAN,
            relative_rmse: f64::NAN,
            succeeded,
            failed: cfg.n_series - succeeded,
            estimate_names: names,
            mean_estimates,
        });
        timings.push(PhaseTiming {
            method: m,
            estimation_seconds: results.iter().map(|r| r[j].1).sum(),
            filtering_seconds: results.iter().map(|r| r[j].2).sum(),
        });
    }
    let base = cfg.baseline();
    let b = summaries.iter().find(|s| s.method == base).map(|s| (s.mae, s.rmse)).unwrap();
    for s in &mut summaries {
        s.relative_mae = s.mae / b.0;
        s.relative_rmse = s.rmse / b.1;
    }
    let eval = cfg.eval_range();
    Ok(StudyReport {
        model: cfg.model.clone(),
        n_series: cfg.n_series,
        length: cfg.length,
        eval_start: eval.start,
        eval_len: eval.len(),
        params: cfg.params,
        split: cfg.split,
        baseline: base,
        common_series: common.len(),
        methods: summaries,
        series: results.into_iter().flat_map(|r| r.into_iter().map(|(o, _, _)| o)).collect(),
        timings,
    })
}
