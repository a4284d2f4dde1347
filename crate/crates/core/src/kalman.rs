//! Exact Kalman filter for linear Gaussian models, in information form (the
//! reference the Bellman filter must reproduce) and covariance form, plus the
//! data transforms behind the quasi-maximum-likelihood baselines.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use statrs::function::gamma::digamma;

use crate::bellman::{FilterInit, StateBelief};
use crate::dynamics::LinearGaussianDynamics;
use crate::error::{Error, Result};
use crate::numerics::{self, cholesky, spd_inverse, spd_log_det, SymMatrix};
use crate::obsmodels::{ObsEval, ObsSeries, ScalarFamily};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// `E[log χ²₁]`.
pub const LOG_CHI2_MEAN: f64 = -1.270_362_845_461_478;
/// `Var[log χ²₁] = π²/2`.
pub const LOG_CHI2_VAR: f64 = std::f64::consts::PI * std::f64::consts::PI / 2.0;
/// Floor applied to `|y|` before taking `log(y²)`.
pub const QMLE_FLOOR: f64 = 1e-8;

/// `y_t = d + Z α_t + ε_t`, `ε_t ~ N(0, H)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearGaussianObservation {
    d: DVector<f64>,
    z: DMatrix<f64>,
    h: SymMatrix,
    h_inv: DMatrix<f64>,
    h_log_det: f64,
}

impl LinearGaussianObservation {
    pub fn new(d: DVector<f64>, z: DMatrix<f64>, h: SymMatrix) -> Result<Self> {
        if z.nrows() != d.len() || h.dim() != d.len() {
            return Err(Error::Dimension(format!(
                "observation: d has length {}, Z is {}x{}, H is {}x{}",
                d.len(),
                z.nrows(),
                z.ncols(),
                h.dim(),
                h.dim()
            )));
        }
        let h_inv =
            spd_inverse(h.as_matrix()).map_err(|_| Error::DegenerateParams("H must be positive definite".into()))?;
        let h_log_det = spd_log_det(h.as_matrix())?;
        Ok(LinearGaussianObservation { d, z, h, h_inv, h_log_det })
    }

    pub fn scalar(d: f64, z: f64, h: f64) -> Result<Self> {
        Self::new(DVector::from_element(1, d), DMatrix::from_element(1, 1, z), SymMatrix::scalar(h))
    }

    pub fn obs_dim(&self) -> usize {
        self.d.len()
    }

    pub fn state_dim(&self) -> usize {
        self.z.ncols()
    }

    pub fn d(&self) -> &DVector<f64> {
        &self.d
    }

    pub fn z(&self) -> &DMatrix<f64> {
        &self.z
    }

    pub fn h(&self) -> &SymMatrix {
        &self.h
    }

    /// `ZᵀH⁻¹Z`.
    pub fn information(&self) -> DMatrix<f64> {
        self.z.transpose() * &self.h_inv * &self.z
    }

    pub fn eval(&self, y: &[f64], a: &DVector<f64>) -> Result<ObsEval> {
        if y.len() != self.obs_dim() || a.len() != self.state_dim() {
            return Err(Error::Dimension("linear Gaussian observation: y or a has wrong length".into()));
        }
        let e = DVector::from_column_slice(y) - &self.d - &self.z * a;
        let hi_e = &self.h_inv * &e;
        let info = self.information();
        Ok(ObsEval {
            logpdf: -0.5 * (self.obs_dim() as f64 * LN_2PI + self.h_log_det + e.dot(&hi_e)),
            score: self.z.transpose() * hi_e,
            realised: info.clone(),
            expected: info,
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, a: &DVector<f64>, rng: &mut R) -> Result<Vec<f64>> {
        let l = cholesky(self.h.as_matrix())?.l();
        let n = DVector::from_fn(self.obs_dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = &self.d + &self.z * a + l * n;
        Ok(y.as_slice().to_vec())
    }
}

/// One Kalman recursion.
#[derive(Debug, Clone, PartialEq)]
pub struct KalmanStep {
    pub predicted: StateBelief,
    pub updated: StateBelief,
    pub loglik: f64,
}

/// Information-form Kalman step; `y = None` skips the update.
pub fn kalman_step(
    obs: &LinearGaussianObservation,
    dynamics: &LinearGaussianDynamics,
    belief: &StateBelief,
    y: Option<&[f64]>,
) -> Result<KalmanStep> {
    let a_pred = dynamics.predict_state(&belief.mean);
    let i_pred = dynamics.predict_info(&belief.info).map_err(|_| Error::SingularInformation)?;
    let predicted = StateBelief { mean: a_pred, info: i_pred };
    let Some(y) = y else {
        return Ok(KalmanStep { updated: predicted.clone(), predicted, loglik: 0.0 });
    };
    let (updated, loglik) = kalman_update(obs, &predicted, y)?;
    Ok(KalmanStep { predicted, updated, loglik })
}

/// Information-form measurement update and the prediction-error log-density.
pub fn kalman_update(
    obs: &LinearGaussianObservation,
    predicted: &StateBelief,
    y: &[f64],
) -> Result<(StateBelief, f64)> {
    if y.len() != obs.obs_dim() {
        return Err(Error::Dimension(format!("expected {} observations, got {}", obs.obs_dim(), y.len())));
    }
    let v = DVector::from_column_slice(y) - obs.d() - obs.z() * &predicted.mean;
    let i_upd = predicted.info.as_matrix() + obs.information();
    let chol = cholesky(&i_upd).map_err(|_| Error::SingularInformation)?;
    let rhs = obs.z().transpose() * (&obs.h_inv * &v);
    let mean = &predicted.mean + chol.solve(&rhs);

    let p_pred = predicted.info.inverse().map_err(|_| Error::SingularInformation)?;
    let f = obs.z() * p_pred.as_matrix() * obs.z().transpose() + obs.h().as_matrix();
    let f_chol = cholesky(&f).map_err(|_| Error::SingularInformation)?;
    let loglik = -0.5
        * (obs.obs_dim() as f64 * LN_2PI
            + 2.0 * f_chol.l().diagonal().iter().map(|x| x.ln()).sum::<f64>()
            + v.dot(&f_chol.solve(&v)));
    Ok((StateBelief { mean, info: SymMatrix::symmetrize(i_upd) }, loglik))
}

/// Covariance-form state: mean and covariance `P`.
#[derive(Debug, Clone, PartialEq)]
pub struct CovState {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Covariance-form Kalman step: `(predicted, updated, loglik)`.
pub fn kalman_step_cov(
    obs: &LinearGaussianObservation,
    dynamics: &LinearGaussianDynamics,
    state: &CovState,
    y: Option<&[f64]>,
) -> Result<(CovState, CovState, f64)> {
    let t = dynamics.t();
    let pred = CovState {
        mean: dynamics.predict_state(&state.mean),
        cov: t * &state.cov * t.transpose() + dynamics.q().as_matrix(),
    };
    let Some(y) = y else {
        return Ok((pred.clone(), pred, 0.0));
    };
    let v = DVector::from_column_slice(y) - obs.d() - obs.z() * &pred.mean;
    let f = obs.z() * &pred.cov * obs.z().transpose() + obs.h().as_matrix();
    let f_inv = spd_inverse(&f).map_err(|_| Error::SingularInformation)?;
    let k = &pred.cov * obs.z().transpose() * &f_inv;
    let upd = CovState { mean: &pred.mean + &k * &v, cov: &pred.cov - &k * obs.z() * &pred.cov };
    let loglik = -0.5 * (obs.obs_dim() as f64 * LN_2PI + spd_log_det(&f)? + numerics::quad_form(&v, &f_inv));
    Ok((pred, upd, loglik))
}

/// A complete Kalman run.
#[derive(Debug, Clone, PartialEq)]
pub struct KalmanOutput {
    pub steps: Vec<KalmanStep>,
    pub loglik: f64,
}

pub fn kalman_filter(
    obs: &LinearGaussianObservation,
    dynamics: &LinearGaussianDynamics,
    data: &ObsSeries,
    init: &FilterInit,
) -> Result<KalmanOutput> {
    if data.dim() != obs.obs_dim() {
        return Err(Error::Dimension(format!(
            "data has {} columns, observation equation expects {}",
            data.dim(),
            obs.obs_dim()
        )));
    }
    let mut belief = init.belief(dynamics)?;
    let mut steps = Vec::with_capacity(data.len());
    let mut loglik = 0.0;
    for t in 0..data.len() {
        let step = kalman_step(obs, dynamics, &belief, data.get(t)).map_err(|e| e.at(t))?;
        loglik += step.loglik;
        belief = step.updated.clone();
        steps.push(step);
    }
    Ok(KalmanOutput { steps, loglik })
}

/// Scalar Kalman log-likelihood without storing the path; the QMLE objective.
pub fn kalman_loglik_scalar(d: f64, z: f64, h: f64, c: f64, t: f64, q: f64, data: &[f64]) -> Result<f64> {
    if !(h > 0.0) || !(q >= 0.0) || t.abs() >= 1.0 {
        return Err(Error::DegenerateParams("scalar Kalman: need H > 0, Q ≥ 0, |T| < 1".into()));
    }
    let mut a = c / (1.0 - t);
    let mut p = q / (1.0 - t * t);
    let mut ll = 0.0;
    for &y in data {
        if !y.is_nan() {
            let v = y - d - z * a;
            let f = z * z * p + h;
            ll += -0.5 * (LN_2PI + f.ln() + v * v / f);
            let k = p * z / f;
            a += k * v;
            p -= k * z * p;
        }
        a = c + t * a;
        p = t * t * p + q;
    }
    Ok(ll)
}

/// Inputs for a quasi-maximum-likelihood Kalman fit of a non-Gaussian family.
#[derive(Debug, Clone, PartialEq)]
pub struct QmleInput {
    /// Transformed observations.
    pub data: ObsSeries,
    /// Intercept of the linear observation equation (held fixed).
    pub offset: f64,
    /// Starting value for the observation noise variance `H`.
    pub h_start: f64,
    /// Indices where a zero return was floored.
    pub floored: Vec<usize>,
}

/// Maps data from `sv-gauss`, `sv-t` or `local-level-t` to a linear Gaussian
/// observation equation. Volatility families use `log y²` with the mean and
/// variance of the log-squared noise; zero returns are floored at
/// `log(1e-16)` and reported, or rejected when `strict`.
pub fn qmle_transforms(family: &ScalarFamily, y: &ObsSeries, strict: bool) -> Result<QmleInput> {
    family.validate()?;
    if y.dim() != 1 {
        return Err(Error::Dimension("QMLE transforms need a univariate series".into()));
    }
    match *family {
        ScalarFamily::SvGauss | ScalarFamily::SvT { .. } => {
            let (offset, h_start) = match *family {
                ScalarFamily::SvT { nu } => {
                    // ε² = (ν−2)/ν · t² and log t² = log χ²₁ − log(χ²_ν/ν)
                    let off = ((nu - 2.0) / nu).ln() + LOG_CHI2_MEAN - (digamma(nu / 2.0) + (2.0 / nu).ln());
                    (off, LOG_CHI2_VAR + trigamma(nu / 2.0))
                }
                _ => (LOG_CHI2_MEAN, LOG_CHI2_VAR),
            };
            let mut floored = Vec::new();
            let mut out = Vec::with_capacity(y.len());
            for (t, &v) in y.values().iter().enumerate() {
                if v.is_nan() {
                    out.push(f64::NAN);
                } else if v.abs() < QMLE_FLOOR {
                    if strict {
                        return Err(Error::ZeroObservation(t));
                    }
                    floored.push(t);
                    out.push((QMLE_FLOOR * QMLE_FLOOR).ln());
                } else {
                    out.push((v * v).ln());
                }
            }
            Ok(QmleInput { data: ObsSeries::scalar(out), offset, h_start, floored })
        }
        ScalarFamily::LocalLevelT { sigma, .. } => {
            Ok(QmleInput { data: y.clone(), offset: 0.0, h_start: sigma * sigma, floored: vec![] })
        }
        _ => Err(Error::NotApplicable(family.id())),
    }
}

/// `ψ'(x)` by differencing `ψ`; only used for a starting value.
fn trigamma(x: f64) -> f64 {
    let h = 1e-4 * x.max(1.0);
    (digamma(x + h) - digamma(x - h)) / (2.0 * h)
}
