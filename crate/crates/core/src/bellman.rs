//! The Bellman filter.
//!
//! Two variants live here. [`update_lg`] / [`filter_lg`] handle linear
//! Gaussian state dynamics with an arbitrary observation density: the
//! prediction step is exact and the update maximises
//! `ℓ(y | a) − ½(a − a_pred)ᵀ I_pred (a − a_pred)` by damped Newton, Fisher,
//! BHHH or hybrid iterations. [`step_general`] handles general (possibly
//! degenerate) dynamics by a joint Newton search over `(a_t, a_{t−1})` and an
//! envelope-theorem information update.
//!
//! Scalar states take a fast path that works on plain `f64`s; it is checked
//! against the matrix path in the tests.

use nalgebra::{DMatrix, DVector};

use crate::dynamics::{LinearGaussianDynamics, TransitionModel};
use crate::error::{Error, Result};
use crate::numerics::{cholesky, quad_form, spd_inverse, spd_log_det, SymMatrix};
use crate::obsmodels::{HybridWeight, ObsSeries, ObservationModel, ScalarEval, ScalarFamily};

/// Posterior summary: mode `mean` and information matrix `info`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateBelief {
    pub mean: DVector<f64>,
    pub info: SymMatrix,
}

impl StateBelief {
    pub fn new(mean: DVector<f64>, info: SymMatrix) -> Result<Self> {
        if mean.len() != info.dim() {
            return Err(Error::Dimension(format!(
                "belief mean has length {}, information is {}x{}",
                mean.len(),
                info.dim(),
                info.dim()
            )));
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("belief mean".into()));
        }
        if !info.is_pd() {
            return Err(Error::SingularInformation);
        }
        Ok(StateBelief { mean, info })
    }

    pub fn scalar(mean: f64, info: f64) -> Self {
        StateBelief { mean: DVector::from_element(1, mean), info: SymMatrix::scalar(info) }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// How the filter is started at `t = 0`.
#[derive(Debug, Clone, PartialEq)]
pub enum FilterInit {
    /// Unconditional mean and inverse unconditional covariance of the state.
    Unconditional,
    Fixed(StateBelief),
}

impl FilterInit {
    /// Near-flat start for a state with no stationary distribution:
    /// information `10⁴·I` around `mean`.
    pub fn diffuse(mean: DVector<f64>) -> Self {
        let m = mean.len();
        FilterInit::Fixed(StateBelief { mean, info: SymMatrix::identity(m).scaled(1e4) })
    }

    pub fn belief(&self, dynamics: &LinearGaussianDynamics) -> Result<StateBelief> {
        match self {
            FilterInit::Unconditional => {
                let (mean, cov) = dynamics.stationary_moments()?;
                let info = cov.inverse().map_err(|_| Error::SingularPrediction)?;
                Ok(StateBelief { mean, info })
            }
            FilterInit::Fixed(b) => {
                if b.dim() != dynamics.dim() {
                    return Err(Error::Dimension("initial belief does not match the state dimension".into()));
                }
                Ok(b.clone())
            }
        }
    }
}

impl SymMatrix {
    pub fn scaled(&self, s: f64) -> SymMatrix {
        SymMatrix::symmetrize(self.as_matrix() * s)
    }
}

/// Inner optimiser used for the update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UpdateMethod {
    Newton,
    Fisher,
    Bhhh,
    /// Optimise with Fisher steps; update the information with weight `w` on
    /// the expected and `1 − w` on the realised information.
    Hybrid(HybridWeight),
}

impl UpdateMethod {
    pub fn parse(name: &str, obs: &ObservationModel) -> Result<Self> {
        match name {
            "newton" => Ok(UpdateMethod::Newton),
            "fisher" => Ok(UpdateMethod::Fisher),
            "bhhh" => Ok(UpdateMethod::Bhhh),
            "hybrid" => Ok(UpdateMethod::Hybrid(obs.hybrid_weight()?)),
            other => Err(Error::Config(format!("unknown update method `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            UpdateMethod::Newton => "newton",
            UpdateMethod::Fisher => "fisher",
            UpdateMethod::Bhhh => "bhhh",
            UpdateMethod::Hybrid(_) => "hybrid",
        }
    }
}

/// Where the inner optimiser starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StartRule {
    Prediction,
    /// The maximiser of `ℓ(y | a)` when it exists, else the prediction.
    ObservationArgmax,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateOptions {
    pub method: UpdateMethod,
    /// Stop when the largest absolute state change falls below `tol`.
    pub tol: f64,
    pub max_iter: usize,
    /// Maximum number of step halvings per iteration.
    pub damping: usize,
    pub start: StartRule,
}

impl Default for UpdateOptions {
    fn default() -> Self {
        UpdateOptions {
            method: UpdateMethod::Newton,
            tol: 1e-4,
            max_iter: 40,
            damping: 10,
            start: StartRule::Prediction,
        }
    }
}

impl UpdateOptions {
    /// Newton when the realised information is nonnegative, otherwise the
    /// hybrid update at its minimal weight.
    pub fn for_model(obs: &ObservationModel) -> Self {
        let method = if obs.realised_info_nonnegative() {
            UpdateMethod::Newton
        } else {
            obs.hybrid_weight().map(UpdateMethod::Hybrid).unwrap_or(UpdateMethod::Fisher)
        };
        UpdateOptions { method, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) || self.max_iter == 0 {
            return Err(Error::Config("need tol > 0 and max_iter ≥ 1".into()));
        }
        if let UpdateMethod::Hybrid(w) = self.method {
            HybridWeight::new(w.value())?;
        }
        Ok(())
    }
}

/// Per-step terms of the approximate log-likelihood.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DecompositionTerms {
    /// `ℓ(y_t | a_{t|t})`.
    pub fit: f64,
    /// `½ log det I_{t|t−1}`.
    pub logdet_pred: f64,
    /// `½ log det I_{t|t}`.
    pub logdet_upd: f64,
    /// `½ ‖a_{t|t} − a_{t|t−1}‖²` in the `I_{t|t−1}` norm.
    pub penalty: f64,
}

impl DecompositionTerms {
    pub fn total(&self) -> f64 {
        self.fit + self.logdet_pred - self.logdet_upd - self.penalty
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterStepOutput {
    pub predicted: StateBelief,
    pub updated: StateBelief,
    /// `a_{t−1|t}` (general filter only).
    pub revised_prev: Option<DVector<f64>>,
    pub iterations: usize,
    pub converged: bool,
    /// Optimisation abandoned; the update equals the prediction.
    pub skipped: bool,
    /// A ridge was added to make the search Hessian positive definite.
    pub regularised: bool,
    /// Increase of the update objective from the start to the final iterate.
    pub objective_gain: f64,
    pub terms: DecompositionTerms,
}

// ---------------------------------------------------------------------------
// scalar fast path

/// Result of a scalar update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarUpdate {
    pub a_upd: f64,
    pub i_upd: f64,
    pub iterations: usize,
    pub converged: bool,
    pub skipped: bool,
    pub regularised: bool,
    pub objective_gain: f64,
    /// `ℓ(y | a_upd)`; zero when `y` is missing.
    pub fit: f64,
}

impl ScalarUpdate {
    pub fn terms(&self, a_pred: f64, i_pred: f64) -> DecompositionTerms {
        let d = self.a_upd - a_pred;
        DecompositionTerms {
            fit: self.fit,
            logdet_pred: 0.5 * i_pred.ln(),
            logdet_upd: 0.5 * self.i_upd.ln(),
            penalty: 0.5 * i_pred * d * d,
        }
    }
}

fn accept_tol(obj: f64) -> f64 {
    1e-12 * obj.abs().max(1.0)
}

/// Positive curvature for a scalar search step: `k` itself, or `k + δ` with
/// `δ = 1e-8, 1e-7, …` until positive.
fn scalar_ridge(k: f64) -> Result<(f64, bool)> {
    if k > 0.0 && k.is_finite() {
        return Ok((k, false));
    }
    if !k.is_finite() {
        return Err(Error::IndefiniteDirection);
    }
    let mut delta = 1e-8;
    while delta < 1e12 {
        if k + delta > 0.0 {
            return Ok((k + delta, true));
        }
        delta *= 10.0;
    }
    Err(Error::IndefiniteDirection)
}

fn search_curvature(method: UpdateMethod, e: &ScalarEval, fisher: bool) -> f64 {
    if fisher {
        return e.expected;
    }
    match method {
        UpdateMethod::Newton => e.realised,
        UpdateMethod::Fisher | UpdateMethod::Hybrid(_) => e.expected,
        UpdateMethod::Bhhh => e.score * e.score,
    }
}

fn update_curvature(method: UpdateMethod, e: &ScalarEval) -> f64 {
    match method {
        UpdateMethod::Newton => e.realised,
        UpdateMethod::Fisher => e.expected,
        UpdateMethod::Bhhh => e.score * e.score,
        UpdateMethod::Hybrid(w) => w.combine(e.expected, e.realised),
    }
}

/// Maximiser of `ℓ(y|a)` by Fisher scoring from `a0`, if it converges.
fn scalar_obs_argmax(fam: &ScalarFamily, y: &[f64], a0: f64) -> Option<f64> {
    let mut a = a0;
    for _ in 0..100 {
        let e = fam.eval_unchecked(y, a);
        if !(e.expected > 0.0) {
            return None;
        }
        let step = (e.score / e.expected).clamp(-5.0, 5.0);
        a += step;
        if !a.is_finite() {
            return None;
        }
        if step.abs() < 1e-10 {
            return Some(a);
        }
    }
    None
}

/// Bellman update for a scalar state. `y = None` is a missing observation.
/// Assumes the model parameters and `y` were validated by the caller.
pub fn update_scalar(
    fam: &ScalarFamily,
    y: Option<&[f64]>,
    a_pred: f64,
    i_pred: f64,
    opts: &UpdateOptions,
) -> Result<ScalarUpdate> {
    if !(i_pred > 0.0) || !a_pred.is_finite() {
        return Err(Error::SingularInformation);
    }
    let Some(y) = y else {
        return Ok(ScalarUpdate {
            a_upd: a_pred,
            i_upd: i_pred,
            iterations: 0,
            converged: true,
            skipped: false,
            regularised: false,
            objective_gain: 0.0,
            fit: 0.0,
        });
    };
    let objective = |e: &ScalarEval, a: f64| e.logpdf - 0.5 * i_pred * (a - a_pred) * (a - a_pred);

    let e_pred = fam.eval_unchecked(y, a_pred);
    let obj_pred = objective(&e_pred, a_pred);
    let mut a = a_pred;
    let mut e = e_pred;
    if opts.start == StartRule::ObservationArgmax {
        if let Some(a0) = scalar_obs_argmax(fam, y, a_pred) {
            let e0 = fam.eval_unchecked(y, a0);
            if objective(&e0, a0).is_finite() {
                a = a0;
                e = e0;
            }
        }
    }
    let mut obj = objective(&e, a);
    let mut regularised = false;
    let mut converged = false;
    let mut iterations = 0;

    'outer: while iterations < opts.max_iter {
        iterations += 1;
        let grad = e.score - i_pred * (a - a_pred);
        let mut accepted = None;
        for fisher in [false, true] {
            if fisher && matches!(opts.method, UpdateMethod::Fisher | UpdateMethod::Hybrid(_)) {
                break;
            }
            let (k, reg) = match scalar_ridge(i_pred + search_curvature(opts.method, &e, fisher)) {
                Ok(v) => v,
                Err(_) => continue,
            };
            let dir = grad / k;
            if dir.abs() < opts.tol {
                // already at the optimum to tolerance; take the tiny step
                let cand = a + dir;
                let ec = fam.eval_unchecked(y, cand);
                let oc = objective(&ec, cand);
                if oc.is_finite() && oc >= obj - accept_tol(obj) {
                    regularised |= reg;
                    accepted = Some((cand, ec, oc));
                    break;
                }
            }
            let mut step = 1.0;
            for _ in 0..=opts.damping {
                let cand = a + step * dir;
                let ec = fam.eval_unchecked(y, cand);
                let oc = objective(&ec, cand);
                if oc.is_finite() && oc >= obj - accept_tol(obj) {
                    regularised |= reg;
                    accepted = Some((cand, ec, oc));
                    break;
                }
                step *= 0.5;
            }
            if accepted.is_some() {
                break;
            }
        }
        let Some((cand, ec, oc)) = accepted else {
            // skip: the update is the prediction
            return Ok(ScalarUpdate {
                a_upd: a_pred,
                i_upd: i_pred,
                iterations,
                converged: false,
                skipped: true,
                regularised,
                objective_gain: 0.0,
                fit: e_pred.logpdf,
            });
        };
        let change = (cand - a).abs();
        a = cand;
        e = ec;
        obj = oc;
        if change < opts.tol {
            converged = true;
            break 'outer;
        }
    }
    let i_upd = i_pred + update_curvature(opts.method, &e);
    if !(i_upd > 0.0) || !i_upd.is_finite() {
        return Err(Error::InfoNotPd);
    }
    Ok(ScalarUpdate {
        a_upd: a,
        i_upd,
        iterations,
        converged,
        skipped: false,
        regularised,
        objective_gain: obj - obj_pred,
        fit: e.logpdf,
    })
}

/// One record of a scalar filter run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarStepRecord {
    pub a_pred: f64,
    pub i_pred: f64,
    pub update: ScalarUpdate,
}

/// Runs the scalar Bellman filter for `fam` under `α_t = c + T α_{t−1} + η_t`,
/// calling `visit` after each step. Returns the approximate log-likelihood.
pub fn run_scalar<F>(
    fam: &ScalarFamily,
    c: f64,
    t: f64,
    q: f64,
    data: &ObsSeries,
    opts: &UpdateOptions,
    init: Option<(f64, f64)>,
    mut visit: F,
) -> Result<f64>
where
    F: FnMut(usize, &ScalarStepRecord),
{
    let (mut a, mut info) = match init {
        Some(b) => b,
        None => {
            if !(t.abs() < 1.0 - 1e-10) {
                return Err(Error::NonStationary(t.abs()));
            }
            if !(q > 0.0) {
                return Err(Error::SingularPrediction);
            }
            (c / (1.0 - t), (1.0 - t * t) / q)
        }
    };
    let mut total = 0.0;
    for s in 0..data.len() {
        let a_pred = c + t * a;
        let p_pred = t * t / info + q;
        let i_pred = 1.0 / p_pred;
        if !(i_pred > 0.0) || !i_pred.is_finite() {
            return Err(Error::SingularPrediction.at(s));
        }
        let y = data.get(s);
        let up = update_scalar(fam, y, a_pred, i_pred, opts).map_err(|e| e.at(s))?;
        if y.is_some() {
            total += up.terms(a_pred, i_pred).total();
        }
        visit(s, &ScalarStepRecord { a_pred, i_pred, update: up });
        a = up.a_upd;
        info = up.i_upd;
    }
    Ok(total)
}

// ---------------------------------------------------------------------------
// matrix path

fn ridge_pd(k: &DMatrix<f64>) -> Result<(DMatrix<f64>, bool)> {
    if cholesky(k).is_ok() {
        return Ok((k.clone(), false));
    }
    let n = k.nrows();
    let mut delta = 1e-8;
    while delta < 1e12 {
        let kk = k + DMatrix::identity(n, n) * delta;
        if cholesky(&kk).is_ok() {
            return Ok((kk, true));
        }
        delta *= 10.0;
    }
    Err(Error::IndefiniteDirection)
}

fn update_info_term(
    method: UpdateMethod,
    score: &DVector<f64>,
    realised: &DMatrix<f64>,
    expected: &DMatrix<f64>,
) -> DMatrix<f64> {
    match method {
        UpdateMethod::Newton => realised.clone(),
        UpdateMethod::Fisher => expected.clone(),
        UpdateMethod::Bhhh => score * score.transpose(),
        UpdateMethod::Hybrid(w) => expected * w.value() + realised * (1.0 - w.value()),
    }
}

fn search_info_term(
    method: UpdateMethod,
    fisher: bool,
    score: &DVector<f64>,
    realised: &DMatrix<f64>,
    expected: &DMatrix<f64>,
) -> DMatrix<f64> {
    if fisher {
        return expected.clone();
    }
    match method {
        UpdateMethod::Newton => realised.clone(),
        UpdateMethod::Fisher | UpdateMethod::Hybrid(_) => expected.clone(),
        UpdateMethod::Bhhh => score * score.transpose(),
    }
}

fn vec_max_abs(v: &DVector<f64>) -> f64 {
    v.amax()
}

/// Bellman update with linear Gaussian dynamics: maximises
/// `ℓ(y | a) − ½(a − a_pred)ᵀ I_pred (a − a_pred)`.
pub fn update_lg(
    obs: &ObservationModel,
    y: Option<&[f64]>,
    pred: &StateBelief,
    opts: &UpdateOptions,
) -> Result<FilterStepOutput> {
    opts.validate()?;
    if pred.dim() != obs.state_dim() {
        return Err(Error::Dimension("predicted belief does not match the observation model".into()));
    }
    if let (ObservationModel::Family(fam), Some(yv)) = (obs, y) {
        fam.eval(yv, pred.mean[0])?;
    }
    if let ObservationModel::Family(fam) = obs {
        let up = update_scalar(fam, y, pred.mean[0], pred.info[(0, 0)], opts)?;
        let terms = if y.is_some() { up.terms(pred.mean[0], pred.info[(0, 0)]) } else { DecompositionTerms::default() };
        return Ok(FilterStepOutput {
            predicted: pred.clone(),
            updated: StateBelief::scalar(up.a_upd, up.i_upd),
            revised_prev: None,
            iterations: up.iterations,
            converged: up.converged,
            skipped: up.skipped,
            regularised: up.regularised,
            objective_gain: up.objective_gain,
            terms,
        });
    }
    update_lg_matrix(obs, y, pred, opts)
}

/// The matrix implementation of [`update_lg`], usable for any state
/// dimension; exposed so the scalar fast path can be checked against it.
pub fn update_lg_matrix(
    obs: &ObservationModel,
    y: Option<&[f64]>,
    pred: &StateBelief,
    opts: &UpdateOptions,
) -> Result<FilterStepOutput> {
    let Some(y) = y else {
        return Ok(FilterStepOutput {
            predicted: pred.clone(),
            updated: pred.clone(),
            revised_prev: None,
            iterations: 0,
            converged: true,
            skipped: false,
            regularised: false,
            objective_gain: 0.0,
            terms: DecompositionTerms::default(),
        });
    };
    let ip = pred.info.as_matrix();
    let objective = |logpdf: f64, a: &DVector<f64>| logpdf - 0.5 * quad_form(&(a - &pred.mean), ip);

    let e_pred = obs.eval(y, &pred.mean)?;
    let obj_pred = objective(e_pred.logpdf, &pred.mean);
    let mut a = pred.mean.clone();
    let mut e = e_pred.clone();
    if opts.start == StartRule::ObservationArgmax {
        if let ObservationModel::Family(fam) = obs {
            if let Some(a0) = scalar_obs_argmax(fam, y, a[0]) {
                let cand = DVector::from_element(1, a0);
                let ec = obs.eval(y, &cand)?;
                if objective(ec.logpdf, &cand).is_finite() {
                    a = cand;
                    e = ec;
                }
            }
        }
    }
    let mut obj = objective(e.logpdf, &a);
    let mut regularised = false;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iter {
        iterations += 1;
        let grad = &e.score - ip * (&a - &pred.mean);
        let mut accepted = None;
        for fisher in [false, true] {
            if fisher && matches!(opts.method, UpdateMethod::Fisher | UpdateMethod::Hybrid(_)) {
                break;
            }
            let k = ip + search_info_term(opts.method, fisher, &e.score, &e.realised, &e.expected);
            let Ok((k, reg)) = ridge_pd(&k) else { continue };
            let dir = cholesky(&k)?.solve(&grad);
            let mut step = 1.0;
            for _ in 0..=opts.damping {
                let cand = &a + &dir * step;
                if let Ok(ec) = obs.eval(y, &cand) {
                    let oc = objective(ec.logpdf, &cand);
                    if oc.is_finite() && oc >= obj - accept_tol(obj) {
                        regularised |= reg;
                        accepted = Some((cand, ec, oc));
                        break;
                    }
                }
                step *= 0.5;
            }
            if accepted.is_some() {
                break;
            }
        }
        let Some((cand, ec, oc)) = accepted else {
            let d = pred.info.log_det()?;
            return Ok(FilterStepOutput {
                predicted: pred.clone(),
                updated: pred.clone(),
                revised_prev: None,
                iterations,
                converged: false,
                skipped: true,
                regularised,
                objective_gain: 0.0,
                terms: DecompositionTerms {
                    fit: e_pred.logpdf,
                    logdet_pred: 0.5 * d,
                    logdet_upd: 0.5 * d,
                    penalty: 0.0,
                },
            });
        };
        let change = vec_max_abs(&(&cand - &a));
        a = cand;
        e = ec;
        obj = oc;
        if change < opts.tol {
            converged = true;
            break;
        }
    }
    let i_upd = ip + update_info_term(opts.method, &e.score, &e.realised, &e.expected);
    let i_upd = SymMatrix::symmetrize(i_upd);
    if !i_upd.is_pd() {
        return Err(Error::InfoNotPd);
    }
    let terms = DecompositionTerms {
        fit: e.logpdf,
        logdet_pred: 0.5 * pred.info.log_det()?,
        logdet_upd: 0.5 * i_upd.log_det()?,
        penalty: 0.5 * quad_form(&(&a - &pred.mean), ip),
    };
    Ok(FilterStepOutput {
        predicted: pred.clone(),
        updated: StateBelief { mean: a, info: i_upd },
        revised_prev: None,
        iterations,
        converged,
        skipped: false,
        regularised,
        objective_gain: obj - obj_pred,
        terms,
    })
}

/// Full Bellman filter with linear Gaussian state dynamics.
pub fn filter_lg(
    obs: &ObservationModel,
    dynamics: &LinearGaussianDynamics,
    data: &ObsSeries,
    opts: &UpdateOptions,
    init: &FilterInit,
) -> Result<Vec<FilterStepOutput>> {
    opts.validate()?;
    obs.validate()?;
    if obs.state_dim() != dynamics.dim() {
        return Err(Error::Dimension(format!(
            "observation model reads {} state coordinates, dynamics have {}",
            obs.state_dim(),
            dynamics.dim()
        )));
    }
    data.validate_for(obs)?;
    let start = init.belief(dynamics)?;
    if let ObservationModel::Family(fam) = obs {
        let mut out = Vec::with_capacity(data.len());
        run_scalar(
            fam,
            dynamics.c()[0],
            dynamics.t()[(0, 0)],
            dynamics.q()[(0, 0)],
            data,
            opts,
            Some((start.mean[0], start.info[(0, 0)])),
            |s, r| {
                let terms = if data.get(s).is_some() {
                    r.update.terms(r.a_pred, r.i_pred)
                } else {
                    DecompositionTerms::default()
                };
                out.push(FilterStepOutput {
                    predicted: StateBelief::scalar(r.a_pred, r.i_pred),
                    updated: StateBelief::scalar(r.update.a_upd, r.update.i_upd),
                    revised_prev: None,
                    iterations: r.update.iterations,
                    converged: r.update.converged,
                    skipped: r.update.skipped,
                    regularised: r.update.regularised,
                    objective_gain: r.update.objective_gain,
                    terms,
                });
            },
        )?;
        return Ok(out);
    }
    filter_lg_matrix(obs, dynamics, data, opts, &start)
}

/// Matrix-path filter for any state dimension.
pub fn filter_lg_matrix(
    obs: &ObservationModel,
    dynamics: &LinearGaussianDynamics,
    data: &ObsSeries,
    opts: &UpdateOptions,
    start: &StateBelief,
) -> Result<Vec<FilterStepOutput>> {
    let mut belief = start.clone();
    let mut out = Vec::with_capacity(data.len());
    for t in 0..data.len() {
        let pred = StateBelief {
            mean: dynamics.predict_state(&belief.mean),
            info: dynamics.predict_info(&belief.info).map_err(|e| e.at(t))?,
        };
        let step = update_lg_matrix(obs, data.get(t), &pred, opts).map_err(|e| e.at(t))?;
        belief = step.updated.clone();
        out.push(step);
    }
    Ok(out)
}

/// Sum of the per-step decomposition terms.
pub fn objective_from_steps(steps: &[FilterStepOutput]) -> f64 {
    steps.iter().map(|s| s.terms.total()).sum()
}

// ---------------------------------------------------------------------------
// general dynamics

/// Observation log-density with derivatives in `(a_t, a_{t−1})`; the general
/// filter allows the density to read the previous state as well.
#[derive(Debug, Clone, PartialEq)]
pub struct JointObsEval {
    pub logpdf: f64,
    /// Gradient, length `2m`.
    pub grad: DVector<f64>,
    /// Negative Hessian, `2m × 2m`.
    pub realised: DMatrix<f64>,
    /// Conditional expectation of `realised`.
    pub expected: DMatrix<f64>,
}

pub trait JointObservation {
    fn state_dim(&self) -> usize;

    fn eval_joint(&self, y: &[f64], a_t: &DVector<f64>, a_prev: &DVector<f64>) -> Result<JointObsEval>;
}

impl JointObservation for ObservationModel {
    fn state_dim(&self) -> usize {
        ObservationModel::state_dim(self)
    }

    fn eval_joint(&self, y: &[f64], a_t: &DVector<f64>, _a_prev: &DVector<f64>) -> Result<JointObsEval> {
        let m = a_t.len();
        let e = self.eval(y, a_t)?;
        let mut grad = DVector::zeros(2 * m);
        grad.rows_mut(0, m).copy_from(&e.score);
        let mut realised = DMatrix::zeros(2 * m, 2 * m);
        realised.view_mut((0, 0), (m, m)).copy_from(&e.realised);
        let mut expected = DMatrix::zeros(2 * m, 2 * m);
        expected.view_mut((0, 0), (m, m)).copy_from(&e.expected);
        Ok(JointObsEval { logpdf: e.logpdf, grad, realised, expected })
    }
}

/// Envelope-theorem information update for a fully free transition:
/// `J11 − J12 (I_prev + J22)⁻¹ J21 + R`, with `R` the observation
/// information (realised, expected or a mix) at the optimum.
pub fn info_update_general(
    derivs: &crate::dynamics::TransitionDerivatives,
    obs_info: &DMatrix<f64>,
    prev_info: &SymMatrix,
) -> Result<SymMatrix> {
    let d = prev_info.as_matrix() + &derivs.j22;
    let d_inv = spd_inverse(&d).map_err(|_| Error::SingularD)?;
    let s = &derivs.j11 - &derivs.j12 * d_inv * &derivs.j21 + obs_info;
    Ok(SymMatrix::symmetrize(s))
}

/// Marginal information of `a_t = M z + o` when `z` has information `k`:
/// `(M K⁻¹ Mᵀ)⁻¹`.
fn marginal_info(k: &DMatrix<f64>, mmat: &DMatrix<f64>) -> Result<SymMatrix> {
    let k_inv = spd_inverse(k).map_err(|_| Error::SingularD)?;
    let cov = mmat * k_inv * mmat.transpose();
    let info = spd_inverse(&cov).map_err(|_| Error::InfoNotPd)?;
    Ok(SymMatrix::symmetrize(info))
}

/// Block Newton direction for `K Δ = G` with `K = [[K11, K12], [K21, D]]`:
/// `Δu = S⁻¹(G1 − K12 D⁻¹ G2)`, `Δv = D⁻¹(G2 − K21 Δu)`.
fn block_direction(k: &DMatrix<f64>, g: &DVector<f64>, p: usize) -> Result<DVector<f64>> {
    let n = k.nrows();
    let m = n - p;
    let d = k.view((p, p), (m, m)).into_owned();
    let d_chol = cholesky(&d).map_err(|_| Error::SingularD)?;
    let g2 = g.rows(p, m).into_owned();
    let mut out = DVector::zeros(n);
    if p == 0 {
        out.copy_from(&d_chol.solve(&g2));
        return Ok(out);
    }
    let k12 = k.view((0, p), (p, m)).into_owned();
    let k21 = k.view((p, 0), (m, p)).into_owned();
    let s = k.view((0, 0), (p, p)) - &k12 * d_chol.solve(&k21);
    let s_chol = cholesky(&SymMatrix::symmetrize(s).into_inner()).map_err(|_| Error::IndefiniteDirection)?;
    let du = s_chol.solve(&(g.rows(0, p) - &k12 * d_chol.solve(&g2)));
    let dv = d_chol.solve(&(g2 - &k21 * &du));
    out.rows_mut(0, p).copy_from(&du);
    out.rows_mut(p, m).copy_from(&dv);
    Ok(out)
}

/// One step of the general Bellman filter: joint maximisation over the free
/// coordinates of `a_t` and the previous state `a_{t−1}`.
pub fn step_general(
    obs: &dyn JointObservation,
    trans: &dyn TransitionModel,
    prev: &StateBelief,
    y: Option<&[f64]>,
    opts: &UpdateOptions,
) -> Result<FilterStepOutput> {
    opts.validate()?;
    let m = trans.state_dim();
    if prev.dim() != m || obs.state_dim() != m {
        return Err(Error::Dimension("state dimensions of belief, transition and observation differ".into()));
    }
    let mask = trans.mask();
    let p = mask.free_dim();
    let n = p + m;
    let (ja, jb) = mask.jacobians();
    let offset = mask.embed(&DVector::zeros(p), &DVector::zeros(m));
    // a_t = [A B] z + o
    let mut mmat = DMatrix::zeros(m, n);
    mmat.view_mut((0, 0), (m, p)).copy_from(&ja);
    mmat.view_mut((0, p), (m, m)).copy_from(&jb);
    // (a_t, a_{t−1}) = mz z + (o, 0)
    let mut mz = DMatrix::zeros(2 * m, n);
    mz.view_mut((0, 0), (m, n)).copy_from(&mmat);
    mz.view_mut((m, p), (m, m)).fill_with_identity();
    let split = |z: &DVector<f64>| -> (DVector<f64>, DVector<f64>, DVector<f64>) {
        let u = z.rows(0, p).into_owned();
        let v = z.rows(p, m).into_owned();
        let a = &mmat * z + &offset;
        (u, v, a)
    };
    let ip = prev.info.as_matrix();
    let prior_hess = {
        let mut h = DMatrix::zeros(n, n);
        h.view_mut((p, p), (m, m)).copy_from(ip);
        h
    };

    // prediction
    let a_pred = trans.predict_state(&prev.mean)?;
    let z_pred = {
        let mut z = DVector::zeros(n);
        z.rows_mut(0, p).copy_from(&mask.extract_free(&a_pred));
        z.rows_mut(p, m).copy_from(&prev.mean);
        z
    };
    let tr_pred = trans.eval_free(&z_pred.rows(0, p).into_owned(), &prev.mean)?;
    let i_pred = marginal_info(&(&tr_pred.neg_hess + &prior_hess), &mmat)?;
    let predicted = StateBelief { mean: a_pred.clone(), info: i_pred };

    let Some(y) = y else {
        return Ok(FilterStepOutput {
            updated: predicted.clone(),
            predicted,
            revised_prev: Some(prev.mean.clone()),
            iterations: 0,
            converged: true,
            skipped: false,
            regularised: false,
            objective_gain: 0.0,
            terms: DecompositionTerms::default(),
        });
    };

    struct Point {
        z: DVector<f64>,
        obj: f64,
        grad: DVector<f64>,
        obs_logpdf: f64,
        obs_grad: DVector<f64>,
        realised: DMatrix<f64>,
        expected: DMatrix<f64>,
        trans_hess: DMatrix<f64>,
    }
    let evaluate = |z: &DVector<f64>| -> Result<Point> {
        let (u, v, a) = split(z);
        let oe = obs.eval_joint(y, &a, &v)?;
        let te = trans.eval_free(&u, &v)?;
        let dv = &v - &prev.mean;
        let obj = oe.logpdf + te.logpdf - 0.5 * quad_form(&dv, ip);
        let mut grad = mz.transpose() * &oe.grad + &te.grad;
        let pg = ip * &dv;
        for i in 0..m {
            grad[p + i] -= pg[i];
        }
        Ok(Point {
            z: z.clone(),
            obj,
            grad,
            obs_logpdf: oe.logpdf,
            obs_grad: oe.grad,
            realised: mz.transpose() * oe.realised * &mz,
            expected: mz.transpose() * oe.expected * &mz,
            trans_hess: te.neg_hess,
        })
    };
    let bhhh = |pt: &Point| {
        let s = mz.transpose() * &pt.obs_grad;
        &s * s.transpose()
    };

    let start = evaluate(&z_pred)?;
    let obj_start = start.obj;
    let mut cur = start;
    let mut regularised = false;
    let mut converged = false;
    let mut skipped = false;
    let mut iterations = 0;
    while iterations < opts.max_iter {
        iterations += 1;
        let mut accepted = None;
        for fisher in [false, true] {
            if fisher && matches!(opts.method, UpdateMethod::Fisher | UpdateMethod::Hybrid(_)) {
                break;
            }
            let obs_term = if fisher {
                cur.expected.clone()
            } else {
                match opts.method {
                    UpdateMethod::Newton => cur.realised.clone(),
                    UpdateMethod::Fisher | UpdateMethod::Hybrid(_) => cur.expected.clone(),
                    UpdateMethod::Bhhh => bhhh(&cur),
                }
            };
            let k = &cur.trans_hess + &prior_hess + obs_term;
            let Ok((k, reg)) = ridge_pd(&SymMatrix::symmetrize(k).into_inner()) else { continue };
            let Ok(dir) = block_direction(&k, &cur.grad, p) else { continue };
            let mut step = 1.0;
            for _ in 0..=opts.damping {
                let cand = &cur.z + &dir * step;
                if let Ok(pt) = evaluate(&cand) {
                    if pt.obj.is_finite() && pt.obj >= cur.obj - accept_tol(cur.obj) {
                        regularised |= reg;
                        accepted = Some(pt);
                        break;
                    }
                }
                step *= 0.5;
            }
            if accepted.is_some() {
                break;
            }
        }
        let Some(next) = accepted else {
            skipped = true;
            break;
        };
        let change = vec_max_abs(&(&next.z - &cur.z));
        cur = next;
        if change < opts.tol {
            converged = true;
            break;
        }
    }

    if skipped {
        let fit = obs.eval_joint(y, &a_pred, &prev.mean)?.logpdf;
        let d = predicted.info.log_det()?;
        return Ok(FilterStepOutput {
            updated: predicted.clone(),
            predicted,
            revised_prev: Some(prev.mean.clone()),
            iterations,
            converged: false,
            skipped: true,
            regularised,
            objective_gain: 0.0,
            terms: DecompositionTerms { fit, logdet_pred: 0.5 * d, logdet_upd: 0.5 * d, penalty: 0.0 },
        });
    }

    let obs_term = match opts.method {
        UpdateMethod::Newton => cur.realised.clone(),
        UpdateMethod::Fisher => cur.expected.clone(),
        UpdateMethod::Bhhh => bhhh(&cur),
        UpdateMethod::Hybrid(w) => &cur.expected * w.value() + &cur.realised * (1.0 - w.value()),
    };
    let k_upd = SymMatrix::symmetrize(&cur.trans_hess + &prior_hess + obs_term).into_inner();
    let i_upd = match marginal_info(&k_upd, &mmat) {
        Ok(info) if info.is_pd() => info,
        _ => {
            // fall back to the expected information
            regularised = true;
            let k_exp = SymMatrix::symmetrize(&cur.trans_hess + &prior_hess + &cur.expected).into_inner();
            let info = marginal_info(&k_exp, &mmat)?;
            if !info.is_pd() {
                return Err(Error::InfoNotPd);
            }
            info
        }
    };
    let (_, v_upd, a_upd) = split(&cur.z);
    let terms = DecompositionTerms {
        fit: cur.obs_logpdf,
        logdet_pred: 0.5 * spd_log_det(predicted.info.as_matrix())?,
        logdet_upd: 0.5 * i_upd.log_det()?,
        penalty: 0.5 * quad_form(&(&a_upd - &a_pred), predicted.info.as_matrix()),
    };
    Ok(FilterStepOutput {
        predicted,
        updated: StateBelief { mean: a_upd, info: i_upd },
        revised_prev: Some(v_upd),
        iterations,
        converged,
        skipped: false,
        regularised,
        objective_gain: cur.obj - obj_start,
        terms,
    })
}

/// Runs [`step_general`] over a series.
pub fn filter_general(
    obs: &dyn JointObservation,
    trans: &dyn TransitionModel,
    data: &ObsSeries,
    opts: &UpdateOptions,
    start: &StateBelief,
) -> Result<Vec<FilterStepOutput>> {
    let mut belief = start.clone();
    let mut out = Vec::with_capacity(data.len());
    for t in 0..data.len() {
        let step = step_general(obs, trans, &belief, data.get(t), opts).map_err(|e| e.at(t))?;
        belief = step.updated.clone();
        out.push(step);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// diagnostics

/// `∂a_{t|t}/∂a_{t|t−1}ᵀ = (I_pred + R(a_upd))⁻¹ I_pred` and its eigenvalues
/// (ascending real parts).
pub fn stability_jacobian(
    obs: &ObservationModel,
    y: &[f64],
    pred: &StateBelief,
    a_upd: &DVector<f64>,
) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let e = obs.eval(y, a_upd)?;
    let k = pred.info.as_matrix() + &e.realised;
    let k_inv = spd_inverse(&k).map_err(|_| Error::IndefiniteDirection)?;
    let jac = k_inv * pred.info.as_matrix();
    let mut eig: Vec<f64> = jac.complex_eigenvalues().iter().map(|z| z.re).collect();
    eig.sort_by(|a, b| a.total_cmp(b));
    Ok((jac, eig))
}
