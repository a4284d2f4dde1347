//! Approximate maximum likelihood for the hyperparameters.
//!
//! The objective is the sum over time of
//! `ℓ(y_t | a_{t|t}) + ½ log det I_{t|t−1} − ½ log det I_{t|t} − ½‖a_{t|t} − a_{t|t−1}‖²_{I_{t|t−1}}`,
//! started from the stationary distribution. For linear Gaussian models it is
//! the exact prediction-error log-likelihood.
//!
//! Parameters are optimised in unconstrained coordinates: Nelder–Mead first,
//! then a BFGS polish on central-difference gradients. Standard errors come
//! from a numerical Hessian mapped to natural coordinates by the delta method.

use nalgebra::{DMatrix, DVector};

use crate::bellman::{filter_lg, objective_from_steps, run_scalar, FilterInit, UpdateOptions};
use crate::dynamics::LinearGaussianDynamics;
use crate::error::{Error, Result};
use crate::kalman::kalman_loglik_scalar;
use crate::numerics::{fd_hessian, spd_inverse};
use crate::obsmodels::{ObsSeries, ObservationModel, ScalarFamily};

pub use crate::bellman::DecompositionTerms;

/// Closest allowed value to the boundary of the interval and ball transforms.
const BOUNDARY_EPS: f64 = 1e-12;

/// Bijection between a natural parameter block and `ℝ^len`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Transform {
    Identity,
    /// Positive values: `u = log x`.
    Log,
    /// Values above `lo`: `u = log(x − lo)`.
    LogAbove(f64),
    /// Interval `(−1, 1)`: `u = atanh x`. The closed boundary is clamped.
    Atanh,
    /// Open unit ball in `ℝ^k`: `z = ρ · atanh(‖ρ‖)/‖ρ‖`.
    Ball(usize),
}

impl Transform {
    pub fn len(&self) -> usize {
        match self {
            Transform::Ball(k) => *k,
            _ => 1,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn name(&self) -> &'static str {
        match self {
            Transform::Identity => "identity",
            Transform::Log => "log",
            Transform::LogAbove(_) => "log-above",
            Transform::Atanh => "atanh",
            Transform::Ball(_) => "ball",
        }
    }

    fn out_of_domain(&self, value: f64) -> Error {
        Error::OutOfDomain { transform: self.name(), value }
    }

    /// Natural → unconstrained.
    pub fn forward(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        match *self {
            Transform::Identity => out[0] = x[0],
            Transform::Log => {
                if !(x[0] > 0.0) {
                    return Err(self.out_of_domain(x[0]));
                }
                out[0] = x[0].ln();
            }
            Transform::LogAbove(lo) => {
                if !(x[0] > lo) {
                    return Err(self.out_of_domain(x[0]));
                }
                out[0] = (x[0] - lo).ln();
            }
            Transform::Atanh => {
                if !(x[0].abs() <= 1.0) {
                    return Err(self.out_of_domain(x[0]));
                }
                out[0] = x[0].clamp(-1.0 + BOUNDARY_EPS, 1.0 - BOUNDARY_EPS).atanh();
            }
            Transform::Ball(_) => {
                let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                if !(r <= 1.0) {
                    return Err(self.out_of_domain(r));
                }
                if r == 0.0 {
                    out.iter_mut().for_each(|o| *o = 0.0);
                } else {
                    let rc = r.min(1.0 - BOUNDARY_EPS);
                    let s = rc.atanh() / r;
                    for (o, v) in out.iter_mut().zip(x) {
                        *o = v * s;
                    }
                }
            }
        }
        Ok(())
    }

    /// Unconstrained → natural.
    pub fn inverse(&self, u: &[f64], out: &mut [f64]) {
        match *self {
            Transform::Identity => out[0] = u[0],
            Transform::Log => out[0] = u[0].exp(),
            Transform::LogAbove(lo) => out[0] = lo + u[0].exp(),
            Transform::Atanh => out[0] = u[0].tanh(),
            Transform::Ball(_) => {
                let n = u.iter().map(|v| v * v).sum::<f64>().sqrt();
                let s = if n < 1e-300 { 1.0 } else { n.tanh() / n };
                for (o, v) in out.iter_mut().zip(u) {
                    *o = v * s;
                }
            }
        }
    }
}

/// Named hyperparameters with per-block transforms.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector {
    names: Vec<String>,
    natural: Vec<f64>,
    blocks: Vec<Transform>,
    /// Initial Nelder–Mead step per unconstrained coordinate.
    steps: Vec<f64>,
}

impl ParameterVector {
    pub fn new(names: Vec<String>, natural: Vec<f64>, blocks: Vec<Transform>) -> Result<Self> {
        let total: usize = blocks.iter().map(|b| b.len()).sum();
        if names.len() != natural.len() || total != natural.len() {
            return Err(Error::Dimension(format!(
                "{} names, {} values and transforms covering {total} coordinates",
                names.len(),
                natural.len()
            )));
        }
        let steps = vec![0.3; natural.len()];
        let pv = ParameterVector { names, natural, blocks, steps };
        pv.to_unconstrained()?;
        Ok(pv)
    }

    /// Overrides the initial simplex step for coordinate `i`.
    pub fn with_step(mut self, i: usize, step: f64) -> Self {
        self.steps[i] = step;
        self
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn natural(&self) -> &[f64] {
        &self.natural
    }

    pub fn blocks(&self) -> &[Transform] {
        &self.blocks
    }

    pub fn steps(&self) -> &[f64] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.natural.len()
    }

    pub fn is_empty(&self) -> bool {
        self.natural.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|i| self.natural[i])
    }

    pub fn to_unconstrained(&self) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.natural.len()];
        let mut i = 0;
        for b in &self.blocks {
            let k = b.len();
            b.forward(&self.natural[i..i + k], &mut out[i..i + k])?;
            i += k;
        }
        Ok(out)
    }

    pub fn natural_from(&self, u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; u.len()];
        let mut i = 0;
        for b in &self.blocks {
            let k = b.len();
            b.inverse(&u[i..i + k], &mut out[i..i + k]);
            i += k;
        }
        out
    }

    pub fn with_natural(&self, natural: Vec<f64>) -> Result<Self> {
        let pv = ParameterVector { natural, ..self.clone() };
        pv.to_unconstrained()?;
        Ok(pv)
    }

    /// `∂ natural / ∂ unconstrained` at `u`, by central differences.
    pub fn jacobian(&self, u: &[f64]) -> DMatrix<f64> {
        let n = u.len();
        let mut jac = DMatrix::zeros(n, n);
        let mut up = u.to_vec();
        for j in 0..n {
            let h = 1e-6 * u[j].abs().max(1.0);
            up[j] = u[j] + h;
            let fp = self.natural_from(&up);
            up[j] = u[j] - h;
            let fm = self.natural_from(&up);
            up[j] = u[j];
            for i in 0..n {
                jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
        jac
    }
}

// ---------------------------------------------------------------------------
// optimisers

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub max_evals: usize,
    /// Nelder–Mead stops when the simplex objective spread falls below this.
    pub f_tol: f64,
    /// ... and the simplex diameter (unconstrained units) below this.
    pub x_tol: f64,
    pub polish: bool,
    pub polish_iters: usize,
    /// Relative step of the polish gradient.
    pub gradient_step: f64,
    /// Relative step of the standard-error Hessian.
    pub hessian_step: f64,
    pub standard_errors: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            max_evals: 3000,
            f_tol: 1e-7,
            x_tol: 1e-5,
            polish: true,
            polish_iters: 50,
            gradient_step: 1e-4,
            hessian_step: 1e-3,
            standard_errors: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub params: ParameterVector,
    /// Standard errors in natural coordinates; `None` when the negative
    /// Hessian could not be inverted.
    pub standard_errors: Option<Vec<f64>>,
    pub objective: f64,
    pub evaluations: usize,
    pub nm_iterations: usize,
    pub polish_iterations: usize,
    pub hessian_error: Option<Error>,
}

struct Counted<'a, F: Fn(&[f64]) -> f64> {
    f: &'a F,
    evals: std::cell::Cell<usize>,
}

impl<F: Fn(&[f64]) -> f64> Counted<'_, F> {
    fn call(&self, x: &[f64]) -> f64 {
        self.evals.set(self.evals.get() + 1);
        let v = (self.f)(x);
        if v.is_nan() {
            f64::NEG_INFINITY
        } else {
            v
        }
    }
}

/// Nelder–Mead maximisation of `f` from `x0`. Returns `(x, f(x), iterations)`.
pub fn nelder_mead<F: Fn(&[f64]) -> f64>(
    f: &F,
    x0: &[f64],
    steps: &[f64],
    opts: &FitOptions,
) -> (Vec<f64>, f64, usize) {
    let counted = Counted { f, evals: std::cell::Cell::new(0) };
    let n = x0.len();
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    simplex.push((x0.to_vec(), counted.call(x0)));
    for i in 0..n {
        let mut x = x0.to_vec();
        x[i] += steps[i];
        let fx = counted.call(&x);
        simplex.push((x, fx));
    }
    let mut iters = 0;
    // maximise: keep the simplex sorted best (largest) first
    let sort = |s: &mut Vec<(Vec<f64>, f64)>| s.sort_by(|a, b| b.1.total_cmp(&a.1));
    sort(&mut simplex);
    while counted.evals.get() < opts.max_evals {
        iters += 1;
        let best = simplex[0].1;
        let worst = simplex[n].1;
        let spread = if best.is_finite() && worst.is_finite() { best - worst } else { f64::INFINITY };
        let diam = simplex[1..]
            .iter()
            .map(|(x, _)| x.iter().zip(&simplex[0].0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
            .fold(0.0, f64::max);
        if spread <= opts.f_tol * best.abs().max(1.0) && diam <= opts.x_tol {
            break;
        }
        if diam < 1e-12 {
            break;
        }
        let mut centroid = vec![0.0; n];
        for (x, _) in &simplex[..n] {
            for (c, v) in centroid.iter_mut().zip(x) {
                *c += v / n as f64;
            }
        }
        let along = |t: f64| -> Vec<f64> { centroid.iter().zip(&simplex[n].0).map(|(c, w)| c + t * (c - w)).collect() };
        let xr = along(1.0);
        let fr = counted.call(&xr);
        if fr > simplex[0].1 {
            let xe = along(2.0);
            let fe = counted.call(&xe);
            simplex[n] = if fe > fr { (xe, fe) } else { (xr, fr) };
        } else if fr > simplex[n - 1].1 {
            simplex[n] = (xr, fr);
        } else {
            let (xc, fc) = if fr > simplex[n].1 {
                let xc = along(0.5);
                let fc = counted.call(&xc);
                (xc, fc)
            } else {
                let xc = along(-0.5);
                let fc = counted.call(&xc);
                (xc, fc)
            };
            if fc > simplex[n].1.max(fr) || (fc >= simplex[n].1 && fc.is_finite()) {
                simplex[n] = (xc, fc);
            } else {
                let x0 = simplex[0].0.clone();
                for item in simplex.iter_mut().skip(1) {
                    let xs: Vec<f64> = x0.iter().zip(&item.0).map(|(b, v)| b + 0.5 * (v - b)).collect();
                    let fs = counted.call(&xs);
                    *item = (xs, fs);
                }
            }
        }
        sort(&mut simplex);
    }
    let (x, fx) = simplex.swap_remove(0);
    (x, fx, iters)
}

fn fd_grad_of<F: Fn(&[f64]) -> f64>(f: &F, x: &[f64], rel: f64) -> Option<Vec<f64>> {
    let mut g = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let h = rel * x[i].abs().max(1.0);
        xp[i] = x[i] + h;
        let fp = f(&xp);
        xp[i] = x[i] - h;
        let fm = f(&xp);
        xp[i] = x[i];
        if !fp.is_finite() || !fm.is_finite() {
            return None;
        }
        g[i] = (fp - fm) / (2.0 * h);
    }
    Some(g)
}

/// BFGS ascent with backtracking, accepting only improving steps.
pub fn bfgs_polish<F: Fn(&[f64]) -> f64>(f: &F, x0: &[f64], f0: f64, opts: &FitOptions) -> (Vec<f64>, f64, usize) {
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut fx = f0;
    let Some(mut g) = fd_grad_of(f, &x, opts.gradient_step) else {
        return (x, fx, 0);
    };
    // inverse of the negative Hessian
    let mut hinv = DMatrix::<f64>::identity(n, n) * 1e-3;
    let mut iters = 0;
    while iters < opts.polish_iters {
        iters += 1;
        let gv = DVector::from_column_slice(&g);
        if gv.amax() < 1e-6 {
            break;
        }
        let mut dir = &hinv * &gv;
        if dir.dot(&gv) <= 0.0 {
            hinv = DMatrix::identity(n, n) * 1e-3;
            dir = &hinv * &gv;
        }
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..20 {
            let xn: Vec<f64> = x.iter().zip(dir.iter()).map(|(a, d)| a + step * d).collect();
            let fnew = f(&xn);
            if fnew.is_finite() && fnew > fx + 1e-4 * step * dir.dot(&gv) {
                accepted = Some((xn, fnew));
                break;
            }
            step *= 0.5;
        }
        let Some((xn, fnew)) = accepted else { break };
        let Some(gn) = fd_grad_of(f, &xn, opts.gradient_step) else { break };
        let s = DVector::from_iterator(n, xn.iter().zip(&x).map(|(a, b)| a - b));
        // gradient of −f
        let yv = DVector::from_iterator(n, g.iter().zip(&gn).map(|(a, b)| a - b));
        let sy = s.dot(&yv);
        if sy > 1e-12 {
            let rho = 1.0 / sy;
            let eye = DMatrix::<f64>::identity(n, n);
            let left = &eye - &s * yv.transpose() * rho;
            let right = &eye - &yv * s.transpose() * rho;
            hinv = left * &hinv * right + &s * s.transpose() * rho;
        }
        let gain = fnew - fx;
        x = xn;
        fx = fnew;
        g = gn;
        if gain < 1e-9 * fx.abs().max(1.0) {
            break;
        }
    }
    (x, fx, iters)
}

/// Maximises `objective` (a function of the natural parameters) starting at
/// `init`. Evaluation failures count as `−∞` so the search retreats.
pub fn fit<F>(objective: F, init: &ParameterVector, opts: &FitOptions) -> Result<FitResult>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    let u0 = init.to_unconstrained()?;
    let evals = std::cell::Cell::new(0usize);
    let f = |u: &[f64]| -> f64 {
        evals.set(evals.get() + 1);
        match objective(&init.natural_from(u)) {
            Ok(v) if v.is_finite() => v,
            _ => f64::NEG_INFINITY,
        }
    };
    let f0 = f(&u0);
    if !f0.is_finite() {
        return Err(Error::OptimFailed("objective is not finite at the initial parameters".into()));
    }
    let (mut u, mut fu, nm_iterations) = nelder_mead(&f, &u0, init.steps(), opts);
    let mut polish_iterations = 0;
    if opts.polish {
        let (up, fp, it) = bfgs_polish(&f, &u, fu, opts);
        polish_iterations = it;
        if fp >= fu {
            u = up;
            fu = fp;
        }
    }
    if !fu.is_finite() {
        return Err(Error::OptimFailed("no finite objective value found".into()));
    }
    let params = init.with_natural(init.natural_from(&u))?;
    let (standard_errors, hessian_error) = if opts.standard_errors {
        match standard_errors(&f, &u, init, opts.hessian_step) {
            Ok(se) => (Some(se), None),
            Err(e) => (None, Some(e)),
        }
    } else {
        (None, None)
    };
    Ok(FitResult {
        params,
        standard_errors,
        objective: fu,
        evaluations: evals.get(),
        nm_iterations,
        polish_iterations,
        hessian_error,
    })
}

fn standard_errors<F: Fn(&[f64]) -> f64>(f: &F, u: &[f64], pv: &ParameterVector, step: f64) -> Result<Vec<f64>> {
    let uv = DVector::from_column_slice(u);
    let h = fd_hessian(|x: &DVector<f64>| f(x.as_slice()), &uv, step).map_err(|_| Error::HessianNotInvertible)?;
    let cov_u = spd_inverse(&(-h)).map_err(|_| Error::HessianNotInvertible)?;
    let jac = pv.jacobian(u);
    let cov = &jac * cov_u * jac.transpose();
    Ok(cov.diagonal().iter().map(|v| v.max(0.0).sqrt()).collect())
}

// ---------------------------------------------------------------------------
// model objectives

/// Decomposition objective of the Bellman filter for any observation model
/// under linear Gaussian dynamics, started from the stationary distribution.
pub fn objective(
    obs: &ObservationModel,
    dynamics: &LinearGaussianDynamics,
    data: &ObsSeries,
    opts: &UpdateOptions,
) -> Result<f64> {
    let steps = filter_lg(obs, dynamics, data, opts, &FilterInit::Unconditional)?;
    let v = objective_from_steps(&steps);
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFiniteObjective)
    }
}

/// A scalar Table-2b family with AR(1) state dynamics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarModel {
    pub family: ScalarFamily,
    pub c: f64,
    pub t: f64,
    pub q: f64,
}

impl ScalarModel {
    /// `(c, T, Q)` followed by the family's shape parameters.
    pub fn parameter_vector(&self) -> Result<ParameterVector> {
        let mut names = vec!["c".to_string(), "T".to_string(), "Q".to_string()];
        let mut values = vec![self.c, self.t, self.q];
        let mut blocks = vec![Transform::Identity, Transform::Atanh, Transform::Log];
        for (n, v) in self.family.shape_names().iter().zip(self.family.shape_values()) {
            names.push(n.to_string());
            values.push(v);
            blocks.push(if *n == "nu" { Transform::LogAbove(2.0) } else { Transform::Log });
        }
        Ok(ParameterVector::new(names, values, blocks)?.with_step(0, 0.05))
    }

    pub fn from_natural(&self, x: &[f64]) -> Result<ScalarModel> {
        Ok(ScalarModel { family: self.family.with_shape(&x[3..])?, c: x[0], t: x[1], q: x[2] })
    }

    pub fn dynamics(&self) -> Result<LinearGaussianDynamics> {
        LinearGaussianDynamics::scalar(self.c, self.t, self.q)
    }

    pub fn observation(&self) -> ObservationModel {
        ObservationModel::Family(self.family)
    }

    /// Filter options for this model: the family default method with
    /// `tol` and `max_iter` taken from `base`.
    pub fn update_options(&self, base: &UpdateOptions) -> UpdateOptions {
        let d = UpdateOptions::for_model(&self.observation());
        UpdateOptions { method: d.method, ..*base }
    }

    /// The approximate log-likelihood (fast scalar path).
    pub fn objective(&self, data: &ObsSeries, base: &UpdateOptions) -> Result<f64> {
        self.family.validate()?;
        data.validate_for(&self.observation())?;
        let opts = self.update_options(base);
        let v = run_scalar(&self.family, self.c, self.t, self.q, data, &opts, None, |_, _| {})?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFiniteObjective)
        }
    }

    /// A data-driven starting point: `T = 0.95`, the state variance split
    /// evenly between signal and noise where it can be read off the data,
    /// and `c` matching the sample level.
    pub fn default_start(family: ScalarFamily, data: &ObsSeries) -> ScalarModel {
        let t = 0.95;
        let rows: Vec<&[f64]> = (0..data.len()).filter_map(|i| data.get(i)).collect();
        let n = rows.len().max(1) as f64;
        let mean = |f: &dyn Fn(&[f64]) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / n;
        let level = match family {
            ScalarFamily::Poisson | ScalarFamily::NegBin { .. } => mean(&|r| r[0]).max(1e-3).ln(),
            ScalarFamily::Exponential => -mean(&|r| r[0]).max(1e-6).ln(),
            ScalarFamily::Gamma { kappa } => (mean(&|r| r[0]) / kappa).max(1e-6).ln(),
            ScalarFamily::Weibull { .. } => mean(&|r| r[0]).max(1e-6).ln(),
            ScalarFamily::SvGauss | ScalarFamily::SvT { .. } => mean(&|r| r[0] * r[0]).max(1e-12).ln(),
            ScalarFamily::DepGauss | ScalarFamily::DepT { .. } => {
                let rho = mean(&|r| r[0] * r[1]).clamp(-0.95, 0.95);
                2.0 * rho.atanh()
            }
            ScalarFamily::LocalLevelT { .. } => mean(&|r| r[0]),
        };
        let state_var = 0.5;
        ScalarModel { family, c: level * (1.0 - t), t, q: state_var * (1.0 - t * t) }
    }

    /// Fits the model by approximate maximum likelihood.
    pub fn fit(&self, data: &ObsSeries, base: &UpdateOptions, opts: &FitOptions) -> Result<(ScalarModel, FitResult)> {
        let pv = self.parameter_vector()?;
        let res = fit(|x| self.from_natural(x)?.objective(data, base), &pv, opts)?;
        Ok((self.from_natural(res.params.natural())?, res))
    }
}

/// Scalar Kalman quasi-likelihood model `y = d + α + ε`, `ε ~ N(0, H)`,
/// with `d` fixed and `(c, T, Q, H)` estimated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QmleModel {
    pub d: f64,
    pub c: f64,
    pub t: f64,
    pub q: f64,
    pub h: f64,
}

impl QmleModel {
    pub fn parameter_vector(&self) -> Result<ParameterVector> {
        Ok(ParameterVector::new(
            vec!["c".into(), "T".into(), "Q".into(), "H".into()],
            vec![self.c, self.t, self.q, self.h],
            vec![Transform::Identity, Transform::Atanh, Transform::Log, Transform::Log],
        )?
        .with_step(0, 0.05))
    }

    pub fn from_natural(&self, x: &[f64]) -> QmleModel {
        QmleModel { d: self.d, c: x[0], t: x[1], q: x[2], h: x[3] }
    }

    pub fn loglik(&self, data: &[f64]) -> Result<f64> {
        kalman_loglik_scalar(self.d, 1.0, self.h, self.c, self.t, self.q, data)
    }

    pub fn fit(&self, data: &[f64], opts: &FitOptions) -> Result<(QmleModel, FitResult)> {
        let pv = self.parameter_vector()?;
        let res = fit(|x| self.from_natural(x).loglik(data), &pv, opts)?;
        Ok((self.from_natural(res.params.natural()), res))
    }

    /// One-step-ahead predicted states `a_{t|t−1}` for `t = 0..n`.
    pub fn predictions(&self, data: &[f64]) -> Vec<f64> {
        let mut a = self.c / (1.0 - self.t);
        let mut p = self.q / (1.0 - self.t * self.t);
        let mut out = Vec::with_capacity(data.len());
        for &y in data {
            out.push(a);
            if !y.is_nan() {
                let f = p + self.h;
                let k = p / f;
                a += k * (y - self.d - a);
                p -= k * p;
            }
            a = self.c + self.t * a;
            p = self.t * self.t * p + self.q;
        }
        out
    }
}
