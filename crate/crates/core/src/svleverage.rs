//! Stochastic volatility with generalised leverage.
//!
//! `y_t = μ + exp(h_t/2) ε_t`, `h_t = c + φ h_{t−1} + σ_η η_t` and
//! `η_t = Σ_{j=0}^k ρ_j ε_{t−j} + σ_ξ ξ_t` with `σ_ξ² = 1 − Σ ρ_j²`.
//!
//! The filter state is `a_t = (h_t, …, h_{t−k})`. Each step maximises over
//! `x_t = (h_t, a_{t−1})`, a vector of length `k + 2`. Both densities are
//! differentiated with respect to the whole of `x_t`: for `k = 0` they depend
//! on `h_{t−1}`, which is not part of `a_t`.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bellman::{
    step_general, DecompositionTerms, FilterStepOutput, JointObsEval, JointObservation, StateBelief, UpdateMethod,
    UpdateOptions,
};
use crate::dynamics::{DegeneracyMask, FreeTransitionEval, TransitionModel};
use crate::error::{Error, Result};
use crate::estimation::{fit, FitOptions, FitResult, ParameterVector, Transform};
use crate::numerics::{spd_inverse, SymMatrix};

/// Largest supported lag length.
pub const MAX_LAGS: usize = 10;
const MAX_X: usize = MAX_LAGS + 2;
const LN_2PI: f64 = 1.837_877_066_409_345_5;
const SIM_BURN_IN: usize = 500;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvLeverageParams {
    pub mu: f64,
    pub c: f64,
    pub phi: f64,
    pub sigma_eta: f64,
    /// `ρ_0, …, ρ_k`.
    pub rho: Vec<f64>,
}

/// Quantities shared by every evaluation at fixed parameters.
#[derive(Debug, Clone, Copy)]
struct Derived {
    /// `ρ_0 / (1 − Σ_{j≥1} ρ_j²)`.
    lev: f64,
    /// `σ_ε = sqrt(1 − ρ_0² / (1 − Σ_{j≥1} ρ_j²))`.
    sigma_eps: f64,
    /// `σ_h = σ_η sqrt(1 − Σ_{j≥1} ρ_j²)`.
    sigma_h: f64,
}

impl SvLeverageParams {
    pub fn new(mu: f64, c: f64, phi: f64, sigma_eta: f64, rho: Vec<f64>) -> Result<Self> {
        let p = SvLeverageParams { mu, c, phi, sigma_eta, rho };
        p.validate()?;
        Ok(p)
    }

    /// First parameter set of the leverage simulation study.
    pub fn study_set1() -> Self {
        SvLeverageParams { mu: 0.0015, c: -0.2, phi: 0.98, sigma_eta: 0.25, rho: vec![-0.7, -0.4, 0.3] }
    }

    /// Second parameter set: the roles of `ρ_0` and `ρ_1` swapped.
    pub fn study_set2() -> Self {
        SvLeverageParams { mu: 0.0015, c: -0.2, phi: 0.98, sigma_eta: 0.25, rho: vec![-0.4, -0.7, 0.3] }
    }

    pub fn k(&self) -> usize {
        self.rho.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParams(m.to_string()));
        if self.rho.is_empty() {
            return bad("need at least ρ_0");
        }
        if self.k() > MAX_LAGS {
            return bad("at most 10 lags are supported");
        }
        if ![self.mu, self.c, self.phi, self.sigma_eta].iter().chain(&self.rho).all(|v| v.is_finite()) {
            return bad("parameters must be finite");
        }
        if !(self.phi.abs() < 1.0) {
            return bad("|φ| must be below 1");
        }
        if !(self.sigma_eta > 0.0) {
            return bad("σ_η must be positive");
        }
        if !(self.rho.iter().map(|r| r * r).sum::<f64>() < 1.0) {
            return bad("Σ ρ_j² must be below 1");
        }
        Ok(())
    }

    fn derived(&self) -> Derived {
        let s1: f64 = self.rho[1..].iter().map(|r| r * r).sum();
        let rest = 1.0 - s1;
        Derived {
            lev: self.rho[0] / rest,
            sigma_eps: (1.0 - self.rho[0] * self.rho[0] / rest).sqrt(),
            sigma_h: self.sigma_eta * rest.sqrt(),
        }
    }

    /// Unconditional mean of `h` treated as an AR(1) chain.
    pub fn h_mean(&self) -> f64 {
        self.c / (1.0 - self.phi)
    }

    /// Stationary belief on `(h_t, …, h_{t−k})` of the AR(1) chain with
    /// innovation variance `σ_η²`.
    pub fn stationary_belief(&self) -> Result<StateBelief> {
        let m = self.k() + 1;
        let var = self.sigma_eta * self.sigma_eta / (1.0 - self.phi * self.phi);
        let cov = DMatrix::from_fn(m, m, |i, j| var * self.phi.powi((i as i32 - j as i32).abs()));
        let info = spd_inverse(&cov).map_err(|_| Error::InvalidParams("stationary covariance is singular".into()))?;
        StateBelief::new(DVector::from_element(m, self.h_mean()), SymMatrix::symmetrize(info))
    }
}

// ---------------------------------------------------------------------------
// simulation

#[derive(Debug, Clone, PartialEq)]
pub struct SvSample {
    pub y: Vec<f64>,
    pub h: Vec<f64>,
}

/// Draws `n` returns and log-volatilities. `ε_t` is drawn first and `η_t`
/// from its conditional law given `ε_t, …, ε_{t−k}`, after a burn-in.
pub fn sv_simulate(params: &SvLeverageParams, n: usize, seed: u64) -> Result<SvSample> {
    params.validate()?;
    let k = params.k();
    let sigma_xi = (1.0 - params.rho.iter().map(|r| r * r).sum::<f64>()).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut eps_hist = vec![0.0; k + 1];
    let mut h = params.h_mean();
    let mut out = SvSample { y: Vec::with_capacity(n), h: Vec::with_capacity(n) };
    for t in 0..SIM_BURN_IN + n {
        let e: f64 = StandardNormal.sample(&mut rng);
        let xi: f64 = StandardNormal.sample(&mut rng);
        eps_hist.rotate_right(1);
        eps_hist[0] = e;
        let eta: f64 = params.rho.iter().zip(&eps_hist).map(|(r, e)| r * e).sum::<f64>() + sigma_xi * xi;
        h = params.c + params.phi * h + params.sigma_eta * eta;
        if t >= SIM_BURN_IN {
            out.y.push(params.mu + (h / 2.0).exp() * e);
            out.h.push(h);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// densities on x = (h_t, h_{t−1}, …, h_{t−k−1})

type Vx = [f64; MAX_X];
type Mx = [[f64; MAX_X]; MAX_X];

#[derive(Clone, Copy)]
struct ObsCore {
    logpdf: f64,
    grad: Vx,
    hess: Mx,
    expected: Mx,
}

#[derive(Clone, Copy)]
struct TransCore {
    logpdf: f64,
    mu_h: f64,
    grad: Vx,
    hess: Mx,
}

fn lagged_shocks(p: &SvLeverageParams, x: &[f64], lags: &[f64], eps: &mut Vx) {
    for j in 1..=p.k() {
        eps[j] = (lags[j - 1] - p.mu) * (-x[j] / 2.0).exp();
    }
}

fn obs_core(p: &SvLeverageParams, d: &Derived, y: f64, lags: &[f64], x: &[f64]) -> ObsCore {
    let k = p.k();
    let n = k + 2;
    let mut eps = [0.0; MAX_X];
    lagged_shocks(p, x, lags, &mut eps);
    let scale = (x[0] / 2.0).exp();
    let e = d.lev * scale;
    let eta = (x[0] - p.c - p.phi * x[1]) / p.sigma_eta;
    let lsum: f64 = (1..=k).map(|j| p.rho[j] * eps[j]).sum();
    let m = e * (eta - lsum);
    let sigma = scale * d.sigma_eps;
    let r = y - p.mu - m;
    let s2 = sigma * sigma;

    let mut dmu = [0.0; MAX_X];
    dmu[0] = m / 2.0 + e / p.sigma_eta;
    dmu[1] -= p.phi * e / p.sigma_eta;
    for j in 1..=k {
        dmu[j] += e * p.rho[j] * eps[j] / 2.0;
    }
    let mut d2mu = [[0.0; MAX_X]; MAX_X];
    d2mu[0][0] = m / 4.0 + e / p.sigma_eta;
    for j in 1..n {
        d2mu[0][j] = dmu[j] / 2.0;
        d2mu[j][0] = dmu[j] / 2.0;
    }
    for j in 1..=k {
        d2mu[j][j] -= e * p.rho[j] * eps[j] / 4.0;
    }
    let dsig = sigma / 2.0;
    let d2sig = sigma / 4.0;

    let f_mu = r / s2;
    let f_sig = r * r / (s2 * sigma) - 1.0 / sigma;
    let f_mumu = -1.0 / s2;
    let f_musig = -2.0 * r / (s2 * sigma);
    let f_sigsig = 1.0 / s2 - 3.0 * r * r / (s2 * s2);

    let mut out = ObsCore {
        logpdf: -0.5 * LN_2PI - sigma.ln() - r * r / (2.0 * s2),
        grad: [0.0; MAX_X],
        hess: [[0.0; MAX_X]; MAX_X],
        expected: [[0.0; MAX_X]; MAX_X],
    };
    for i in 0..n {
        out.grad[i] = f_mu * dmu[i];
        for j in 0..n {
            out.hess[i][j] = f_mumu * dmu[i] * dmu[j] + f_mu * d2mu[i][j];
            out.expected[i][j] = f_mumu * dmu[i] * dmu[j];
        }
    }
    out.grad[0] += f_sig * dsig;
    out.hess[0][0] += f_sigsig * dsig * dsig + f_sig * d2sig;
    out.expected[0][0] += -2.0 / s2 * dsig * dsig;
    for j in 0..n {
        out.hess[0][j] += f_musig * dmu[j] * dsig;
        out.hess[j][0] += f_musig * dmu[j] * dsig;
    }
    out
}

fn trans_core(p: &SvLeverageParams, d: &Derived, lags: &[f64], x: &[f64]) -> TransCore {
    let k = p.k();
    let n = k + 2;
    let mut eps = [0.0; MAX_X];
    lagged_shocks(p, x, lags, &mut eps);
    let mu_h = p.c + p.phi * x[1] + p.sigma_eta * (1..=k).map(|j| p.rho[j] * eps[j]).sum::<f64>();
    let s2 = d.sigma_h * d.sigma_h;
    let dev = x[0] - mu_h;
    let mut cv = [0.0; MAX_X];
    cv[0] = -1.0;
    cv[1] += p.phi;
    for j in 1..=k {
        cv[j] -= p.sigma_eta * p.rho[j] * eps[j] / 2.0;
    }
    let mut out = TransCore {
        logpdf: -0.5 * LN_2PI - d.sigma_h.ln() - dev * dev / (2.0 * s2),
        mu_h,
        grad: [0.0; MAX_X],
        hess: [[0.0; MAX_X]; MAX_X],
    };
    for i in 0..n {
        out.grad[i] = dev / s2 * cv[i];
        for j in 0..n {
            out.hess[i][j] = -cv[i] * cv[j] / s2;
        }
    }
    for j in 1..=k {
        out.hess[j][j] += dev / s2 * p.sigma_eta / 4.0 * p.rho[j] * eps[j];
    }
    out
}

fn check_window(p: &SvLeverageParams, x: &[f64], lags: &[f64]) -> Result<()> {
    p.validate()?;
    if lags.len() < p.k() {
        return Err(Error::LagWindowMissing(p.k() - lags.len()));
    }
    if x.len() != p.k() + 2 {
        return Err(Error::Dimension(format!("x must have length k + 2 = {}", p.k() + 2)));
    }
    Ok(())
}

fn to_dvec(v: &Vx, n: usize) -> DVector<f64> {
    DVector::from_column_slice(&v[..n])
}

fn to_dmat(m: &Mx, n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i, j| m[i][j])
}

/// Observation log-density with derivatives in `x = (h_t, …, h_{t−k−1})`.
#[derive(Debug, Clone, PartialEq)]
pub struct SvObsEval {
    pub logpdf: f64,
    pub grad: DVector<f64>,
    pub hess: DMatrix<f64>,
    /// Conditional expectation of `hess` given the state.
    pub expected_hess: DMatrix<f64>,
}

/// `lags[j − 1] = y_{t−j}`.
pub fn sv_obs_eval(p: &SvLeverageParams, x: &[f64], y: f64, lags: &[f64]) -> Result<SvObsEval> {
    check_window(p, x, lags)?;
    let n = x.len();
    let o = obs_core(p, &p.derived(), y, lags, x);
    Ok(SvObsEval {
        logpdf: o.logpdf,
        grad: to_dvec(&o.grad, n),
        hess: to_dmat(&o.hess, n),
        expected_hess: to_dmat(&o.expected, n),
    })
}

/// Observation mean and standard deviation given `x`.
pub fn sv_obs_moments(p: &SvLeverageParams, x: &[f64], lags: &[f64]) -> Result<(f64, f64)> {
    check_window(p, x, lags)?;
    let d = p.derived();
    let sigma = (x[0] / 2.0).exp() * d.sigma_eps;
    let mut eps = [0.0; MAX_X];
    lagged_shocks(p, x, lags, &mut eps);
    let eta = (x[0] - p.c - p.phi * x[1]) / p.sigma_eta;
    let lsum: f64 = (1..=p.k()).map(|j| p.rho[j] * eps[j]).sum();
    let mean = p.mu + d.lev * (x[0] / 2.0).exp() * (eta - lsum);
    Ok((mean, sigma))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvTransEval {
    pub logpdf: f64,
    pub mu_h: f64,
    pub sigma_h: f64,
    pub grad: DVector<f64>,
    pub hess: DMatrix<f64>,
}

/// Log-density of `h_t` given the lags, with derivatives in `x`.
pub fn sv_trans_eval(p: &SvLeverageParams, x: &[f64], lags: &[f64]) -> Result<SvTransEval> {
    check_window(p, x, lags)?;
    let n = x.len();
    let d = p.derived();
    let g = trans_core(p, &d, lags, x);
    Ok(SvTransEval {
        logpdf: g.logpdf,
        mu_h: g.mu_h,
        sigma_h: d.sigma_h,
        grad: to_dvec(&g.grad, n),
        hess: to_dmat(&g.hess, n),
    })
}

// ---------------------------------------------------------------------------
// adapters for the general filter

/// The model at one time step, with its return lags bound, usable as both
/// observation and transition of [`step_general`].
#[derive(Debug, Clone, Copy)]
pub struct CataniaStep<'a> {
    pub params: &'a SvLeverageParams,
    /// `lags[j − 1] = y_{t−j}`.
    pub lags: &'a [f64],
}

impl CataniaStep<'_> {
    fn x_of(&self, h_t: f64, a_prev: &DVector<f64>) -> Vec<f64> {
        std::iter::once(h_t).chain(a_prev.iter().copied()).collect()
    }
}

impl JointObservation for CataniaStep<'_> {
    fn state_dim(&self) -> usize {
        self.params.k() + 1
    }

    fn eval_joint(&self, y: &[f64], a_t: &DVector<f64>, a_prev: &DVector<f64>) -> Result<JointObsEval> {
        let m = self.params.k() + 1;
        let x = self.x_of(a_t[0], a_prev);
        let e = sv_obs_eval(self.params, &x, y[0], self.lags)?;
        // h_t sits in slot 0 of a_t; every lag is read from a_{t−1}
        let slot = |i: usize| if i == 0 { 0 } else { m + i - 1 };
        let mut grad = DVector::zeros(2 * m);
        let mut realised = DMatrix::zeros(2 * m, 2 * m);
        let mut expected = DMatrix::zeros(2 * m, 2 * m);
        for i in 0..x.len() {
            grad[slot(i)] = e.grad[i];
            for j in 0..x.len() {
                realised[(slot(i), slot(j))] = -e.hess[(i, j)];
                expected[(slot(i), slot(j))] = -e.expected_hess[(i, j)];
            }
        }
        Ok(JointObsEval { logpdf: e.logpdf, grad, realised, expected })
    }
}

impl TransitionModel for CataniaStep<'_> {
    fn state_dim(&self) -> usize {
        self.params.k() + 1
    }

    fn mask(&self) -> DegeneracyMask {
        DegeneracyMask::lag_shift(self.params.k() + 1)
    }

    fn eval_free(&self, u: &DVector<f64>, a_prev: &DVector<f64>) -> Result<FreeTransitionEval> {
        let e = sv_trans_eval(self.params, &self.x_of(u[0], a_prev), self.lags)?;
        Ok(FreeTransitionEval { logpdf: e.logpdf, grad: e.grad, neg_hess: -e.hess })
    }

    fn predict_state(&self, a_prev: &DVector<f64>) -> Result<DVector<f64>> {
        let mu_h = sv_trans_eval(self.params, &self.x_of(0.0, a_prev), self.lags)?.mu_h;
        let m = a_prev.len();
        Ok(DVector::from_iterator(m, std::iter::once(mu_h).chain(a_prev.iter().take(m - 1).copied())))
    }
}

// ---------------------------------------------------------------------------
// specialised filter

/// Index of the first filtered observation: the first with a full window of
/// `k` lagged returns.
pub fn first_filtered(k: usize) -> usize {
    k
}

/// One filtered step on `(h_t, …, h_{t−k})`.
#[derive(Debug, Clone, Copy)]
pub struct SvStepRecord {
    m: usize,
    a_pred: Vx,
    a_upd: Vx,
    revised_prev: Vx,
    i_pred: Mx,
    i_upd: Mx,
    pub iterations: usize,
    pub converged: bool,
    pub skipped: bool,
    pub regularised: bool,
    pub terms: DecompositionTerms,
}

impl SvStepRecord {
    pub fn dim(&self) -> usize {
        self.m
    }

    pub fn a_pred(&self) -> &[f64] {
        &self.a_pred[..self.m]
    }

    pub fn a_upd(&self) -> &[f64] {
        &self.a_upd[..self.m]
    }

    pub fn revised_prev(&self) -> &[f64] {
        &self.revised_prev[..self.m]
    }

    pub fn i_pred(&self) -> DMatrix<f64> {
        to_dmat(&self.i_pred, self.m)
    }

    pub fn i_upd(&self) -> DMatrix<f64> {
        to_dmat(&self.i_upd, self.m)
    }

    /// One-step-ahead prediction of `h_t`.
    pub fn h_pred(&self) -> f64 {
        self.a_pred[0]
    }

    pub fn h_upd(&self) -> f64 {
        self.a_upd[0]
    }
}

fn chol(a: &Mx, n: usize, l: &mut Mx) -> bool {
    for j in 0..n {
        let mut s = a[j][j];
        for k in 0..j {
            s -= l[j][k] * l[j][k];
        }
        if !(s > 0.0) || !s.is_finite() {
            return false;
        }
        l[j][j] = s.sqrt();
        for i in j + 1..n {
            let mut s = a[i][j];
            for k in 0..j {
                s -= l[i][k] * l[j][k];
            }
            l[i][j] = s / l[j][j];
        }
    }
    true
}

fn chol_solve(l: &Mx, n: usize, b: &Vx) -> Vx {
    let mut z = [0.0; MAX_X];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i][k] * z[k];
        }
        z[i] = s / l[i][i];
    }
    let mut x = [0.0; MAX_X];
    for i in (0..n).rev() {
        let mut s = z[i];
        for k in i + 1..n {
            s -= l[k][i] * x[k];
        }
        x[i] = s / l[i][i];
    }
    x
}

fn chol_logdet(l: &Mx, n: usize) -> f64 {
    (0..n).map(|i| 2.0 * l[i][i].ln()).sum()
}

/// Information of the first `n − 1` coordinates: Schur complement of the
/// last diagonal entry.
fn drop_last(k: &Mx, n: usize) -> Result<Mx> {
    let last = n - 1;
    let d = k[last][last];
    if !(d > 0.0) {
        return Err(Error::SingularD);
    }
    let mut out = [[0.0; MAX_X]; MAX_X];
    for i in 0..last {
        for j in 0..last {
            out[i][j] = k[i][j] - k[i][last] * k[last][j] / d;
        }
    }
    for i in 0..last {
        for j in 0..i {
            let s = 0.5 * (out[i][j] + out[j][i]);
            out[i][j] = s;
            out[j][i] = s;
        }
    }
    Ok(out)
}

fn quad(v: &Vx, w: &Mx, n: usize) -> f64 {
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            s += v[i] * w[i][j] * v[j];
        }
    }
    s
}

#[derive(Clone, Copy)]
enum ObsTerm {
    Realised,
    Expected,
    Bhhh,
    Mix(f64),
}

struct Point {
    x: Vx,
    obj: f64,
    grad: Vx,
    obs: ObsCore,
    trans_hess: Mx,
}

fn sv_step(
    p: &SvLeverageParams,
    d: &Derived,
    y: f64,
    lags: &[f64],
    prev_mean: &Vx,
    prev_info: &Mx,
    opts: &UpdateOptions,
) -> Result<SvStepRecord> {
    let m = p.k() + 1;
    let n = m + 1;
    let mut x_pred = [0.0; MAX_X];
    x_pred[1..=m].copy_from_slice(&prev_mean[..m]);
    let tp = trans_core(p, d, lags, &x_pred);
    x_pred[0] = tp.mu_h;
    let tp = trans_core(p, d, lags, &x_pred);
    let mut k_pred = [[0.0; MAX_X]; MAX_X];
    for i in 0..n {
        for j in 0..n {
            k_pred[i][j] = -tp.hess[i][j] + if i >= 1 && j >= 1 { prev_info[i - 1][j - 1] } else { 0.0 };
        }
    }
    let i_pred = drop_last(&k_pred, n).map_err(|_| Error::SingularPrediction)?;
    let mut a_pred = [0.0; MAX_X];
    a_pred[..m].copy_from_slice(&x_pred[..m]);

    let evaluate = |x: &Vx| -> Point {
        let obs = obs_core(p, d, y, lags, x);
        let tr = trans_core(p, d, lags, x);
        let mut dv = [0.0; MAX_X];
        for i in 0..m {
            dv[i] = x[i + 1] - prev_mean[i];
        }
        let mut grad = [0.0; MAX_X];
        for i in 0..n {
            grad[i] = obs.grad[i] + tr.grad[i];
        }
        for i in 0..m {
            let mut s = 0.0;
            for j in 0..m {
                s += prev_info[i][j] * dv[j];
            }
            grad[i + 1] -= s;
        }
        let mut trans_hess = [[0.0; MAX_X]; MAX_X];
        for i in 0..n {
            for j in 0..n {
                trans_hess[i][j] = -tr.hess[i][j];
            }
        }
        Point { x: *x, obj: obs.logpdf + tr.logpdf - 0.5 * quad(&dv, prev_info, m), grad, obs, trans_hess }
    };
    // negative Hessian: transition + prior + observation term
    let assemble = |pt: &Point, term: ObsTerm| -> Mx {
        let mut k = [[0.0; MAX_X]; MAX_X];
        for i in 0..n {
            for j in 0..n {
                let prior = if i >= 1 && j >= 1 { prev_info[i - 1][j - 1] } else { 0.0 };
                let obs = match term {
                    ObsTerm::Realised => -pt.obs.hess[i][j],
                    ObsTerm::Expected => -pt.obs.expected[i][j],
                    ObsTerm::Bhhh => pt.obs.grad[i] * pt.obs.grad[j],
                    ObsTerm::Mix(w) => -w * pt.obs.expected[i][j] - (1.0 - w) * pt.obs.hess[i][j],
                };
                k[i][j] = pt.trans_hess[i][j] + prior + obs;
            }
        }
        for i in 0..n {
            for j in 0..i {
                let s = 0.5 * (k[i][j] + k[j][i]);
                k[i][j] = s;
                k[j][i] = s;
            }
        }
        k
    };

    let start = evaluate(&x_pred);
    let mut cur = start;
    let mut regularised = false;
    let mut converged = false;
    let mut skipped = false;
    let mut iterations = 0;
    let mut l = [[0.0; MAX_X]; MAX_X];
    while iterations < opts.max_iter {
        iterations += 1;
        let mut accepted: Option<Point> = None;
        for fisher in [false, true] {
            if fisher && matches!(opts.method, UpdateMethod::Fisher | UpdateMethod::Hybrid(_)) {
                break;
            }
            let k = if fisher {
                assemble(&cur, ObsTerm::Expected)
            } else {
                match opts.method {
                    UpdateMethod::Newton => assemble(&cur, ObsTerm::Realised),
                    UpdateMethod::Fisher | UpdateMethod::Hybrid(_) => assemble(&cur, ObsTerm::Expected),
                    UpdateMethod::Bhhh => assemble(&cur, ObsTerm::Bhhh),
                }
            };
            // ridge until positive definite
            let mut reg = false;
            let mut ok = chol(&k, n, &mut l);
            let mut delta = 1e-8;
            while !ok && delta < 1e12 {
                let mut kk = k;
                for (i, row) in kk.iter_mut().enumerate().take(n) {
                    row[i] += delta;
                }
                ok = chol(&kk, n, &mut l);
                reg = true;
                delta *= 10.0;
            }
            if !ok {
                continue;
            }
            let dir = chol_solve(&l, n, &cur.grad);
            let mut step = 1.0;
            for _ in 0..=opts.damping {
                let mut cand = cur.x;
                for i in 0..n {
                    cand[i] += step * dir[i];
                }
                let pt = evaluate(&cand);
                if pt.obj.is_finite() && pt.obj >= cur.obj - 1e-12 * cur.obj.abs().max(1.0) {
                    regularised |= reg;
                    accepted = Some(pt);
                    break;
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
        let change = (0..n).map(|i| (next.x[i] - cur.x[i]).abs()).fold(0.0, f64::max);
        cur = next;
        if change < opts.tol {
            converged = true;
            break;
        }
    }

    let mut lp = [[0.0; MAX_X]; MAX_X];
    if !chol(&i_pred, m, &mut lp) {
        return Err(Error::SingularPrediction);
    }
    let logdet_pred = 0.5 * chol_logdet(&lp, m);
    let mut record = SvStepRecord {
        m,
        a_pred,
        a_upd: a_pred,
        revised_prev: *prev_mean,
        i_pred,
        i_upd: i_pred,
        iterations,
        converged: false,
        skipped: true,
        regularised,
        terms: DecompositionTerms::default(),
    };
    if skipped {
        let fit = obs_core(p, d, y, lags, &x_pred).logpdf;
        record.terms = DecompositionTerms { fit, logdet_pred, logdet_upd: logdet_pred, penalty: 0.0 };
        return Ok(record);
    }

    let k_upd = match opts.method {
        UpdateMethod::Newton => assemble(&cur, ObsTerm::Realised),
        UpdateMethod::Fisher => assemble(&cur, ObsTerm::Expected),
        UpdateMethod::Bhhh => assemble(&cur, ObsTerm::Bhhh),
        UpdateMethod::Hybrid(w) => assemble(&cur, ObsTerm::Mix(w.value())),
    };
    let mut lu = [[0.0; MAX_X]; MAX_X];
    let i_upd = match drop_last(&k_upd, n) {
        Ok(info) if chol(&info, m, &mut lu) => info,
        _ => {
            // fall back to the expected information
            regularised = true;
            let info = drop_last(&assemble(&cur, ObsTerm::Expected), n)?;
            if !chol(&info, m, &mut lu) {
                return Err(Error::InfoNotPd);
            }
            info
        }
    };
    let mut diff = [0.0; MAX_X];
    for i in 0..m {
        diff[i] = cur.x[i] - a_pred[i];
    }
    record.a_upd[..m].copy_from_slice(&cur.x[..m]);
    record.revised_prev[..m].copy_from_slice(&cur.x[1..=m]);
    record.i_upd = i_upd;
    record.converged = converged;
    record.skipped = false;
    record.regularised = regularised;
    record.terms = DecompositionTerms {
        fit: cur.obs.logpdf,
        logdet_pred,
        logdet_upd: 0.5 * chol_logdet(&lu, m),
        penalty: 0.5 * quad(&diff, &i_pred, m),
    };
    Ok(record)
}

fn check_series(p: &SvLeverageParams, y: &[f64]) -> Result<()> {
    p.validate()?;
    if y.len() <= first_filtered(p.k()) {
        return Err(Error::Config(format!("need more than {} observations", first_filtered(p.k()))));
    }
    if let Some(i) = y.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("return at index {i}")));
    }
    Ok(())
}

fn belief_arrays(b: &StateBelief) -> (Vx, Mx) {
    let m = b.dim();
    let mut mean = [0.0; MAX_X];
    let mut info = [[0.0; MAX_X]; MAX_X];
    for i in 0..m {
        mean[i] = b.mean[i];
        for j in 0..m {
            info[i][j] = b.info[(i, j)];
        }
    }
    (mean, info)
}

/// Runs the filter and returns the approximate log-likelihood summed over the
/// filtered steps. `visit` sees every filtered step; the first
/// [`first_filtered`] observations only serve as lags.
pub fn sv_run<F>(p: &SvLeverageParams, y: &[f64], opts: &UpdateOptions, mut visit: F) -> Result<f64>
where
    F: FnMut(usize, &SvStepRecord),
{
    check_series(p, y)?;
    opts.validate()?;
    let d = p.derived();
    let k = p.k();
    let (mut mean, mut info) = belief_arrays(&p.stationary_belief()?);
    let mut lags = [0.0; MAX_X];
    let mut total = 0.0;
    for t in first_filtered(k)..y.len() {
        for j in 1..=k {
            lags[j - 1] = y[t - j];
        }
        let rec = sv_step(p, &d, y[t], &lags[..k], &mean, &info, opts).map_err(|e| e.at(t))?;
        total += rec.terms.total();
        mean = rec.a_upd;
        info = rec.i_upd;
        visit(t, &rec);
    }
    Ok(total)
}

#[derive(Debug, Clone)]
pub struct SvFilterOutput {
    /// One record per filtered step, starting at `start`.
    pub steps: Vec<SvStepRecord>,
    pub start: usize,
    pub objective: f64,
}

impl SvFilterOutput {
    /// `h_{t|t−1}` for every `t`; unfiltered warm-up steps carry the
    /// stationary mean.
    pub fn h_predictions(&self, n: usize, p: &SvLeverageParams) -> Vec<f64> {
        let mut out = vec![p.h_mean(); self.start];
        out.extend(self.steps.iter().map(|s| s.h_pred()));
        out.truncate(n);
        out
    }

    pub fn h_filtered(&self, n: usize, p: &SvLeverageParams) -> Vec<f64> {
        let mut out = vec![p.h_mean(); self.start];
        out.extend(self.steps.iter().map(|s| s.h_upd()));
        out.truncate(n);
        out
    }
}

pub fn sv_filter(p: &SvLeverageParams, y: &[f64], opts: &UpdateOptions) -> Result<SvFilterOutput> {
    let mut steps = Vec::with_capacity(y.len());
    let objective = sv_run(p, y, opts, |_, r| steps.push(*r))?;
    Ok(SvFilterOutput { steps, start: first_filtered(p.k()), objective })
}

/// The same filter run through [`step_general`] with [`CataniaStep`]; slow,
/// kept as a cross-check of the specialised implementation.
pub fn sv_filter_reference(p: &SvLeverageParams, y: &[f64], opts: &UpdateOptions) -> Result<Vec<FilterStepOutput>> {
    check_series(p, y)?;
    let k = p.k();
    let mut belief = p.stationary_belief()?;
    let mut out = Vec::with_capacity(y.len());
    for t in first_filtered(k)..y.len() {
        let lags: Vec<f64> = (1..=k).map(|j| y[t - j]).collect();
        let step = CataniaStep { params: p, lags: &lags };
        let s = step_general(&step, &step, &belief, Some(&y[t..t + 1]), opts).map_err(|e| e.at(t))?;
        belief = s.updated.clone();
        out.push(s);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// estimation

/// Transforms: `μ`, `c` identity; `φ` atanh; `σ_η` log; `ρ` the unit ball.
pub fn sv_parameter_vector(p: &SvLeverageParams, mu_step: f64) -> Result<ParameterVector> {
    p.validate()?;
    let k = p.k();
    let mut names = vec!["mu".to_string(), "c".into(), "phi".into(), "sigma_eta".into()];
    names.extend((0..=k).map(|j| format!("rho{j}")));
    let mut values = vec![p.mu, p.c, p.phi, p.sigma_eta];
    values.extend(&p.rho);
    let blocks =
        vec![Transform::Identity, Transform::Identity, Transform::Atanh, Transform::Log, Transform::Ball(k + 1)];
    Ok(ParameterVector::new(names, values, blocks)?.with_step(0, mu_step).with_step(1, 0.05))
}

pub fn sv_params_from(x: &[f64]) -> Result<SvLeverageParams> {
    SvLeverageParams::new(x[0], x[1], x[2], x[3], x[4..].to_vec())
}

/// Data-driven start: median return, `φ = 0.95`, `σ_η = 0.3`, no leverage
/// and `c` matching the log sample variance.
pub fn sv_default_start(y: &[f64], k: usize) -> SvLeverageParams {
    let mut sorted = y.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let mu = if sorted.is_empty() { 0.0 } else { sorted[sorted.len() / 2] };
    let var = y.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / y.len().max(1) as f64;
    let phi = 0.95;
    SvLeverageParams { mu, c: (1.0 - phi) * var.max(1e-300).ln(), phi, sigma_eta: 0.3, rho: vec![0.0; k + 1] }
}

#[derive(Debug, Clone)]
pub struct SvFit {
    pub params: SvLeverageParams,
    pub fit: FitResult,
    /// `−2 · objective + p · ln n`.
    pub bic: f64,
}

pub fn sv_fit(y: &[f64], init: &SvLeverageParams, opts: &UpdateOptions, fit_opts: &FitOptions) -> Result<SvFit> {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let sd = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let pv = sv_parameter_vector(init, 0.1 * sd.max(1e-12))?;
    let res = fit(|x| sv_run(&sv_params_from(x)?, y, opts, |_, _| {}), &pv, fit_opts)?;
    let params = sv_params_from(res.params.natural())?;
    let bic = -2.0 * res.objective + pv.len() as f64 * n.ln();
    Ok(SvFit { params, fit: res, bic })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{fd_gradient, fd_hessian, FD_HESSIAN_STEP, FD_STEP};
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn random_params(rng: &mut ChaCha8Rng, k: usize) -> SvLeverageParams {
        loop {
            let rho: Vec<f64> = (0..=k).map(|_| rng.random_range(-0.6..0.6)).collect();
            let p = SvLeverageParams {
                mu: rng.random_range(-0.1..0.1),
                c: rng.random_range(-0.5..0.5),
                phi: rng.random_range(0.5..0.99),
                sigma_eta: rng.random_range(0.1..0.6),
                rho,
            };
            if p.validate().is_ok() {
                return p;
            }
        }
    }

    fn rel_close(a: f64, b: f64, rel: f64) -> bool {
        (a - b).abs() <= rel * b.abs().max(1.0)
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for k in 0..=3 {
            for _ in 0..100 {
                let p = random_params(&mut rng, k);
                let x: Vec<f64> = (0..k + 2).map(|_| rng.random_range(-1.5..1.5)).collect();
                let lags: Vec<f64> = (0..k).map(|_| rng.random_range(-2.0..2.0)).collect();
                let y = rng.random_range(-2.0..2.0);
                let xv = DVector::from_vec(x.clone());
                let e = sv_obs_eval(&p, &x, y, &lags).unwrap();
                let f = |v: &DVector<f64>| sv_obs_eval(&p, v.as_slice(), y, &lags).unwrap().logpdf;
                let g = fd_gradient(f, &xv, FD_STEP).unwrap();
                let h = fd_hessian(f, &xv, FD_HESSIAN_STEP).unwrap();
                for i in 0..k + 2 {
                    assert!(rel_close(e.grad[i], g[i], 1e-5), "k={k} obs grad {i}: {} vs {}", e.grad[i], g[i]);
                    for j in 0..k + 2 {
                        assert!(rel_close(e.hess[(i, j)], h[(i, j)], 1e-4), "k={k} obs hess");
                    }
                }
                let t = sv_trans_eval(&p, &x, &lags).unwrap();
                let tf = |v: &DVector<f64>| sv_trans_eval(&p, v.as_slice(), &lags).unwrap().logpdf;
                let g = fd_gradient(tf, &xv, FD_STEP).unwrap();
                let h = fd_hessian(tf, &xv, FD_HESSIAN_STEP).unwrap();
                for i in 0..k + 2 {
                    assert!(rel_close(t.grad[i], g[i], 1e-5), "k={k} trans grad {i}");
                    for j in 0..k + 2 {
                        assert!(rel_close(t.hess[(i, j)], h[(i, j)], 1e-4), "k={k} trans hess");
                    }
                }
            }
        }
    }

    #[test]
    fn no_leverage_reduces_to_plain_sv() {
        let p = SvLeverageParams { mu: 0.0, c: -0.1, phi: 0.9, sigma_eta: 0.3, rho: vec![0.0, 0.0] };
        let x = [0.4, -0.2, 0.1];
        let lags = [0.7];
        let (mean, sd) = sv_obs_moments(&p, &x, &lags).unwrap();
        assert_eq!(mean, 0.0);
        assert_abs_diff_eq!(sd, (0.2f64).exp(), epsilon = 1e-15);
        let e = sv_obs_eval(&p, &x, 1.3, &lags).unwrap();
        // plain SV score in h_t: −½ + ½ y² e^{−h}
        assert_abs_diff_eq!(e.grad[0], -0.5 + 0.5 * 1.69 * (-0.4f64).exp(), epsilon = 1e-14);
        let t = sv_trans_eval(&p, &x, &lags).unwrap();
        assert_abs_diff_eq!(t.mu_h, -0.1 + 0.9 * -0.2, epsilon = 1e-15);
        assert_eq!(t.sigma_h, 0.3);
        let at_mean = [t.mu_h, -0.2, 0.1];
        assert!(sv_trans_eval(&p, &at_mean, &lags).unwrap().grad.iter().all(|g| g.abs() < 1e-15));
    }

    #[test]
    fn expected_hessian_matches_monte_carlo() {
        let p = SvLeverageParams { mu: 0.01, c: -0.2, phi: 0.95, sigma_eta: 0.3, rho: vec![-0.5, -0.3, 0.2] };
        let x = [0.3, 0.1, -0.2, 0.05];
        let lags = [0.8, -1.1];
        let (mean, sd) = sv_obs_moments(&p, &x, &lags).unwrap();
        let e = sv_obs_eval(&p, &x, mean, &lags).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let draws = 100_000;
        let n = x.len();
        let mut sum = DMatrix::zeros(n, n);
        let mut sumsq = DMatrix::zeros(n, n);
        for _ in 0..draws {
            let z: f64 = StandardNormal.sample(&mut rng);
            let h = sv_obs_eval(&p, &x, mean + sd * z, &lags).unwrap().hess;
            sumsq += h.component_mul(&h);
            sum += h;
        }
        let avg = &sum / draws as f64;
        for i in 0..n {
            for j in 0..n {
                let var = sumsq[(i, j)] / draws as f64 - avg[(i, j)].powi(2);
                let se = (var / draws as f64).sqrt();
                assert!((avg[(i, j)] - e.expected_hess[(i, j)]).abs() <= 3.0 * se + 1e-12, "({i},{j})");
            }
        }
    }

    #[test]
    fn lag_window_is_required() {
        let p = SvLeverageParams::study_set1();
        assert!(matches!(sv_obs_eval(&p, &[0.0; 4], 0.0, &[0.1]), Err(Error::LagWindowMissing(1))));
        assert!(matches!(sv_trans_eval(&p, &[0.0; 4], &[]), Err(Error::LagWindowMissing(2))));
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(SvLeverageParams::new(0.0, 0.0, 1.0, 0.2, vec![0.0]).is_err());
        assert!(SvLeverageParams::new(0.0, 0.0, 0.9, 0.0, vec![0.0]).is_err());
        assert!(SvLeverageParams::new(0.0, 0.0, 0.9, 0.2, vec![0.8, 0.7]).is_err());
        assert!(sv_simulate(&SvLeverageParams { rho: vec![0.9, 0.5], ..SvLeverageParams::study_set1() }, 5, 1).is_err());
    }

    #[test]
    fn simulation_matches_covariance_structure() {
        let p = SvLeverageParams { mu: 0.0, c: -0.2, phi: 0.9, sigma_eta: 0.3, rho: vec![-0.6] };
        let s = sv_simulate(&p, 100_000, 17).unwrap();
        // recover ε_t and η_t from the path
        let mut eps = Vec::new();
        let mut eta = Vec::new();
        for t in 1..s.y.len() {
            eps.push((s.y[t] - p.mu) * (-s.h[t] / 2.0).exp());
            eta.push((s.h[t] - p.c - p.phi * s.h[t - 1]) / p.sigma_eta);
        }
        let n = eps.len() as f64;
        let corr = eps.iter().zip(&eta).map(|(a, b)| a * b).sum::<f64>() / n;
        let se = ((1.0 + corr * corr) / n).sqrt();
        assert!((corr - -0.6).abs() < 3.0 * se, "corr {corr}");
        let a = sv_simulate(&p, 50, 3).unwrap();
        assert_eq!(a, sv_simulate(&p, 50, 3).unwrap());
        let set1 = sv_simulate(&SvLeverageParams::study_set1(), 100_000, 2).unwrap();
        let mean_h = set1.h.iter().sum::<f64>() / set1.h.len() as f64;
        assert!((mean_h - -10.0).abs() < 0.3, "mean h {mean_h}");
    }

    #[test]
    fn specialised_filter_matches_general_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for k in 0..=3 {
            let p = random_params(&mut rng, k);
            let s = sv_simulate(&p, 120, k as u64).unwrap();
            for method in [UpdateMethod::Newton, UpdateMethod::Fisher] {
                let opts = UpdateOptions { method, ..Default::default() };
                let fast = sv_filter(&p, &s.y, &opts).unwrap();
                let slow = sv_filter_reference(&p, &s.y, &opts).unwrap();
                assert_eq!(fast.steps.len(), slow.len());
                let mut obj = 0.0;
                for (a, b) in fast.steps.iter().zip(&slow) {
                    assert_eq!(a.iterations, b.iterations);
                    assert_eq!(a.skipped, b.skipped);
                    for i in 0..=k {
                        assert_abs_diff_eq!(a.a_upd()[i], b.updated.mean[i], epsilon = 1e-10);
                        assert_abs_diff_eq!(a.a_pred()[i], b.predicted.mean[i], epsilon = 1e-10);
                    }
                    let (ia, ib) = (a.i_upd(), b.updated.info.as_matrix().clone());
                    assert!((ia - &ib).amax() <= 1e-8 * ib.amax().max(1.0));
                    obj += b.terms.total();
                }
                assert_abs_diff_eq!(fast.objective, obj, epsilon = 1e-7);
            }
        }
    }

    #[test]
    fn lag_coordinates_stay_pinned() {
        let p = SvLeverageParams::study_set1();
        let s = sv_simulate(&p, 300, 8).unwrap();
        let out = sv_filter(&p, &s.y, &UpdateOptions::default()).unwrap();
        for st in &out.steps {
            assert_eq!(&st.a_upd()[1..], &st.revised_prev()[..2]);
        }
    }

    #[test]
    fn zero_lag_filter_matches_plain_sv() {
        use crate::bellman::run_scalar;
        use crate::obsmodels::{ObsSeries, ScalarFamily};
        let p = SvLeverageParams { mu: 0.0, c: -0.1, phi: 0.95, sigma_eta: 0.3, rho: vec![0.0] };
        let s = sv_simulate(&p, 500, 4).unwrap();
        let opts = UpdateOptions::default();
        let out = sv_filter(&p, &s.y, &opts).unwrap();
        let q = p.sigma_eta * p.sigma_eta;
        let mut plain = Vec::new();
        let obj =
            run_scalar(&ScalarFamily::SvGauss, p.c, p.phi, q, &ObsSeries::scalar(s.y.clone()), &opts, None, |_, r| {
                plain.push((r.a_pred, r.update.a_upd))
            })
            .unwrap();
        for (st, (ap, au)) in out.steps.iter().zip(&plain) {
            assert_abs_diff_eq!(st.h_pred(), *ap, epsilon = 1e-8);
            assert_abs_diff_eq!(st.h_upd(), *au, epsilon = 1e-8);
        }
        assert_abs_diff_eq!(out.objective, obj, epsilon = 1e-6);
    }
}
