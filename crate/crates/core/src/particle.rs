//! Continuous sampling importance resampling (CSIR) for scalar states.
//!
//! A bootstrap particle filter that resamples at every step by inverting a
//! piecewise-linear approximation of the weighted empirical CDF of the sorted
//! particles. With the random numbers held fixed the log-likelihood estimate
//! is continuous in the parameters, so it can be handed to a
//! derivative-free optimiser.

use std::borrow::Borrow;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dynamics::LinearGaussianDynamics;
use crate::error::{Error, Result};
use crate::estimation::{fit, FitOptions, FitResult, ParameterVector};
use crate::obsmodels::{ObsSeries, ObservationModel, ScalarFamily};
use crate::svleverage::{first_filtered, sv_obs_moments, sv_trans_eval, SvLeverageParams};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// What a model sees at time `t`: the data and the filtered means so far.
#[derive(Debug, Clone, Copy)]
pub struct StepContext<'a> {
    pub t: usize,
    pub data: &'a ObsSeries,
    /// Filtered means for times `0..t` (warm-up steps hold the initial mean).
    pub filtered: &'a [f64],
}

/// A model the CSIR filter can run: Gaussian transition of a scalar state
/// whose moments may depend on the parent particle and past data.
pub trait ParticleModel {
    fn state_dim(&self) -> usize;

    /// Mean and standard deviation of the initial particle cloud.
    fn initial(&self) -> Result<(f64, f64)>;

    /// First time step that is filtered; earlier observations only feed
    /// later steps.
    fn first_step(&self) -> usize {
        0
    }

    /// Conditional mean and standard deviation of `α_t` given the parent.
    fn transition(&self, ctx: &StepContext, parent: f64) -> (f64, f64);

    fn log_obs(&self, ctx: &StepContext, y: &[f64], alpha: f64, parent: f64) -> f64;
}

/// Any observation model with linear Gaussian state dynamics.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSpaceModel {
    pub obs: ObservationModel,
    pub dynamics: LinearGaussianDynamics,
}

impl StateSpaceModel {
    pub fn scalar(family: ScalarFamily, c: f64, t: f64, q: f64) -> Result<Self> {
        Ok(StateSpaceModel {
            obs: ObservationModel::Family(family),
            dynamics: LinearGaussianDynamics::scalar(c, t, q)?,
        })
    }
}

impl ParticleModel for StateSpaceModel {
    fn state_dim(&self) -> usize {
        self.dynamics.dim()
    }

    fn initial(&self) -> Result<(f64, f64)> {
        let (c, t, q) = (self.dynamics.c()[0], self.dynamics.t()[(0, 0)], self.dynamics.q()[(0, 0)]);
        if !(t.abs() < 1.0) {
            return Err(Error::NonStationary(t.abs()));
        }
        Ok((c / (1.0 - t), (q / (1.0 - t * t)).sqrt()))
    }

    fn transition(&self, _ctx: &StepContext, parent: f64) -> (f64, f64) {
        let (c, t, q) = (self.dynamics.c()[0], self.dynamics.t()[(0, 0)], self.dynamics.q()[(0, 0)]);
        (c + t * parent, q.sqrt())
    }

    fn log_obs(&self, _ctx: &StepContext, y: &[f64], alpha: f64, _parent: f64) -> f64 {
        match &self.obs {
            ObservationModel::Family(f) => f.eval_unchecked(y, alpha).logpdf,
            ObservationModel::LinearGaussian(lg) => {
                let h = lg.h()[(0, 0)];
                let e = y[0] - lg.d()[0] - lg.z()[(0, 0)] * alpha;
                -0.5 * (LN_2PI + h.ln() + e * e / h)
            }
        }
    }
}

/// The leverage model with its full state `(h_t, …, h_{t−k})`. Only `k = 0`
/// gives a scalar state; see [`CataniaUnivariate`] for `k > 0`.
impl ParticleModel for SvLeverageParams {
    fn state_dim(&self) -> usize {
        self.k() + 1
    }

    fn initial(&self) -> Result<(f64, f64)> {
        self.validate()?;
        Ok((self.h_mean(), self.sigma_eta / (1.0 - self.phi * self.phi).sqrt()))
    }

    fn first_step(&self) -> usize {
        first_filtered(self.k())
    }

    fn transition(&self, ctx: &StepContext, parent: f64) -> (f64, f64) {
        CataniaUnivariate { params: self }.transition(ctx, parent)
    }

    fn log_obs(&self, ctx: &StepContext, y: &[f64], alpha: f64, parent: f64) -> f64 {
        CataniaUnivariate { params: self }.log_obs(ctx, y, alpha, parent)
    }
}

/// Univariate CSIR for the leverage model: particles carry `h_t` only and the
/// older lags `h_{t−j}` are held at their filtered means. `P` is the
/// parameter set, owned or borrowed.
#[derive(Debug, Clone, Copy)]
pub struct CataniaUnivariate<P: Borrow<SvLeverageParams>> {
    pub params: P,
}

impl<P: Borrow<SvLeverageParams>> CataniaUnivariate<P> {
    /// `x = (h_t, parent, ĥ_{t−2}, …, ĥ_{t−k−1})` with plug-ins, and the return lags.
    fn window(&self, ctx: &StepContext, h_t: f64, parent: f64) -> ([f64; 12], [f64; 10]) {
        let p = self.params.borrow();
        let k = p.k();
        let mut x = [0.0; 12];
        let mut lags = [0.0; 10];
        x[0] = h_t;
        x[1] = parent;
        for j in 2..=k + 1 {
            x[j] = ctx.filtered.get(ctx.t.wrapping_sub(j)).copied().unwrap_or(p.h_mean());
        }
        for j in 1..=k {
            lags[j - 1] = ctx.data.row(ctx.t - j)[0];
        }
        (x, lags)
    }
}

impl<P: Borrow<SvLeverageParams>> ParticleModel for CataniaUnivariate<P> {
    fn state_dim(&self) -> usize {
        1
    }

    fn initial(&self) -> Result<(f64, f64)> {
        ParticleModel::initial(self.params.borrow())
    }

    fn first_step(&self) -> usize {
        first_filtered(self.params.borrow().k())
    }

    fn transition(&self, ctx: &StepContext, parent: f64) -> (f64, f64) {
        let p = self.params.borrow();
        let k = p.k();
        let (x, lags) = self.window(ctx, 0.0, parent);
        match sv_trans_eval(p, &x[..k + 2], &lags[..k]) {
            Ok(e) => (e.mu_h, e.sigma_h),
            Err(_) => (f64::NAN, f64::NAN),
        }
    }

    fn log_obs(&self, ctx: &StepContext, y: &[f64], alpha: f64, parent: f64) -> f64 {
        let p = self.params.borrow();
        let k = p.k();
        let (x, lags) = self.window(ctx, alpha, parent);
        match sv_obs_moments(p, &x[..k + 2], &lags[..k]) {
            Ok((mean, sd)) => {
                let e = (y[0] - mean) / sd;
                -0.5 * (LN_2PI + e * e) - sd.ln()
            }
            Err(_) => f64::NEG_INFINITY,
        }
    }
}

/// Weighted particle cloud; weights sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleCloud {
    pub particles: Vec<f64>,
    pub weights: Vec<f64>,
    pub ess: f64,
}

impl ParticleCloud {
    /// Builds a cloud from log-weights with max-subtraction. Returns the cloud
    /// and `log(mean unnormalised weight)`.
    pub fn from_log_weights(particles: Vec<f64>, logw: &[f64]) -> Option<(ParticleCloud, f64)> {
        let max = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return None;
        }
        let mut weights: Vec<f64> = logw.iter().map(|l| if l.is_nan() { 0.0 } else { (l - max).exp() }).collect();
        let sum: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= sum);
        let ess = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();
        let loglik = max + (sum / logw.len() as f64).ln();
        Some((ParticleCloud { particles, weights, ess }, loglik))
    }

    pub fn mean(&self) -> f64 {
        self.particles.iter().zip(&self.weights).map(|(p, w)| p * w).sum()
    }

    /// Sorted `(particle, weight)` pairs.
    fn sorted(&self) -> Vec<(f64, f64)> {
        let mut s: Vec<(f64, f64)> = self.particles.iter().copied().zip(self.weights.iter().copied()).collect();
        s.sort_by(|a, b| a.0.total_cmp(&b.0));
        s
    }

    /// Inverse of the piecewise-linear CDF at the sorted probabilities `u`.
    /// Half the weight of the extreme particles sits on them as atoms; the
    /// rest is spread uniformly between neighbours.
    fn invert_sorted(sorted: &[(f64, f64)], u: &[f64], out: &mut Vec<f64>) {
        out.clear();
        let n = sorted.len();
        let mut cum = 0.5 * sorted[0].1;
        let mut region = 0;
        for &ui in u {
            if ui < 0.5 * sorted[0].1 {
                out.push(sorted[0].0);
                continue;
            }
            while region + 1 < n {
                let mass = 0.5 * (sorted[region].1 + sorted[region + 1].1);
                if ui < cum + mass {
                    break;
                }
                cum += mass;
                region += 1;
            }
            if region + 1 >= n {
                out.push(sorted[n - 1].0);
            } else {
                let mass = 0.5 * (sorted[region].1 + sorted[region + 1].1);
                let frac = if mass > 0.0 { ((ui - cum) / mass).clamp(0.0, 1.0) } else { 0.0 };
                out.push(sorted[region].0 + frac * (sorted[region + 1].0 - sorted[region].0));
            }
        }
    }

    /// Weighted median from the piecewise-linear CDF.
    pub fn median(&self) -> f64 {
        let mut out = Vec::with_capacity(1);
        Self::invert_sorted(&self.sorted(), &[0.5], &mut out);
        out[0]
    }

    /// Systematic continuous resampling with offset `u0 ∈ [0, 1)`.
    pub fn resample(&self, u0: f64) -> Vec<f64> {
        let n = self.particles.len();
        let u: Vec<f64> = (0..n).map(|i| (i as f64 + u0) / n as f64).collect();
        let mut out = Vec::with_capacity(n);
        Self::invert_sorted(&self.sorted(), &u, &mut out);
        out
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CsirOutput {
    /// Mean and median of the propagated cloud, `α_{t|t−1}`.
    pub pred_mean: Vec<f64>,
    pub pred_median: Vec<f64>,
    /// Weighted mean and median, `α_{t|t}`.
    pub filt_mean: Vec<f64>,
    pub filt_median: Vec<f64>,
    pub ess: Vec<f64>,
    /// Mean of `signal(α)` over the propagated cloud; empty unless a signal
    /// map was supplied.
    pub pred_signal_mean: Vec<f64>,
    pub loglik: f64,
}

fn sample_median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Runs CSIR with `n_particles` particles. The random numbers depend only on
/// `seed`, the series length and `n_particles`, never on the parameters.
pub fn csir_filter<M: ParticleModel + ?Sized>(
    model: &M,
    data: &ObsSeries,
    n_particles: usize,
    seed: u64,
) -> Result<CsirOutput> {
    csir_filter_signal(model, data, n_particles, seed, None)
}

/// As [`csir_filter`], also averaging `signal` over each propagated cloud.
pub fn csir_filter_signal<M: ParticleModel + ?Sized>(
    model: &M,
    data: &ObsSeries,
    n_particles: usize,
    seed: u64,
    signal: Option<&dyn Fn(f64) -> f64>,
) -> Result<CsirOutput> {
    if model.state_dim() != 1 {
        return Err(Error::UnsupportedDimension(model.state_dim()));
    }
    if n_particles < 2 {
        return Err(Error::Config("need at least two particles".into()));
    }
    let (m0, s0) = model.initial()?;
    if !(m0.is_finite() && s0.is_finite() && s0 >= 0.0) {
        return Err(Error::DegenerateParams("initial distribution".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normals = vec![0.0; n_particles];
    let draw = |rng: &mut ChaCha8Rng, buf: &mut [f64]| buf.iter_mut().for_each(|z| *z = StandardNormal.sample(rng));
    draw(&mut rng, &mut normals);
    let mut cloud: Vec<f64> = normals.iter().map(|z| m0 + s0 * z).collect();

    let n = data.len();
    let start = model.first_step().min(n);
    let mut out = CsirOutput {
        pred_mean: vec![m0; start],
        pred_median: vec![m0; start],
        filt_mean: vec![m0; start],
        filt_median: vec![m0; start],
        ess: vec![n_particles as f64; start],
        pred_signal_mean: match signal {
            Some(g) => vec![g(m0); start],
            None => vec![],
        },
        loglik: 0.0,
    };
    let mut logw = vec![0.0; n_particles];
    let mut proposed = vec![0.0; n_particles];
    for t in start..n {
        draw(&mut rng, &mut normals);
        let u0: f64 = rng.random();
        let ctx = StepContext { t, data, filtered: &out.filt_mean };
        for i in 0..n_particles {
            let (mu, sd) = model.transition(&ctx, cloud[i]);
            proposed[i] = mu + sd * normals[i];
        }
        if proposed.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite(format!("propagated particle at t = {t}")));
        }
        let pm = proposed.iter().sum::<f64>() / n_particles as f64;
        out.pred_mean.push(pm);
        out.pred_median.push(sample_median(&proposed));
        if let Some(g) = signal {
            out.pred_signal_mean.push(proposed.iter().map(|&p| g(p)).sum::<f64>() / n_particles as f64);
        }
        let Some(y) = data.get(t) else {
            out.filt_mean.push(pm);
            out.filt_median.push(*out.pred_median.last().unwrap());
            out.ess.push(n_particles as f64);
            std::mem::swap(&mut cloud, &mut proposed);
            continue;
        };
        for i in 0..n_particles {
            logw[i] = model.log_obs(&ctx, y, proposed[i], cloud[i]);
        }
        let Some((pc, ll)) = ParticleCloud::from_log_weights(proposed.clone(), &logw) else {
            return Err(Error::WeightCollapse(t));
        };
        out.loglik += ll;
        out.filt_mean.push(pc.mean());
        out.filt_median.push(pc.median());
        out.ess.push(pc.ess);
        cloud = pc.resample(u0);
    }
    Ok(out)
}

/// Maximises the CSIR log-likelihood with common random numbers.
/// `build` maps natural parameters to a model.
pub fn csir_estimate<M, B>(
    build: B,
    init: &ParameterVector,
    data: &ObsSeries,
    n_particles: usize,
    seed: u64,
    opts: &FitOptions,
) -> Result<FitResult>
where
    M: ParticleModel,
    B: Fn(&[f64]) -> Result<M>,
{
    fit(|x| Ok(csir_filter(&build(x)?, data, n_particles, seed)?.loglik), init, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kalman::kalman_loglik_scalar;
    use approx::assert_abs_diff_eq;

    #[test]
    fn cloud_normalises_and_bounds_ess() {
        let (c, ll) = ParticleCloud::from_log_weights(vec![0.0, 1.0, 2.0], &[-1000.0, -1001.0, -1002.0]).unwrap();
        assert_abs_diff_eq!(c.weights.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        assert!(c.ess >= 1.0 && c.ess <= 3.0);
        assert!(ll.is_finite());
        assert!(ParticleCloud::from_log_weights(vec![0.0, 1.0], &[f64::NEG_INFINITY; 2]).is_none());
    }

    #[test]
    fn resampling_preserves_uniform_cloud_range() {
        let c = ParticleCloud { particles: vec![3.0, 1.0, 2.0], weights: vec![1.0 / 3.0; 3], ess: 3.0 };
        let r = c.resample(0.5);
        assert_eq!(r.len(), 3);
        assert!(r.iter().all(|x| (1.0..=3.0).contains(x)));
        assert_abs_diff_eq!(c.median(), 2.0, epsilon = 1e-12);
    }

    #[test]
    fn degenerate_transition_follows_recursion() {
        let m = StateSpaceModel::scalar(ScalarFamily::Poisson, 0.1, 0.5, 0.0).unwrap();
        let data = ObsSeries::scalar(vec![1.0, 0.0, 3.0, 2.0]);
        let out = csir_filter(&m, &data, 50, 1).unwrap();
        // stationary mean 0.2 is a fixed point
        for v in &out.filt_mean {
            assert_abs_diff_eq!(*v, 0.2, epsilon = 1e-12);
        }
    }

    #[test]
    fn loglik_close_to_kalman() {
        use crate::kalman::LinearGaussianObservation;
        let (c, t, q, h) = (0.1, 0.9, 0.2, 0.5);
        let m = StateSpaceModel {
            obs: ObservationModel::LinearGaussian(LinearGaussianObservation::scalar(0.0, 1.0, h).unwrap()),
            dynamics: LinearGaussianDynamics::scalar(c, t, q).unwrap(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut a = c / (1.0 - t);
        let y: Vec<f64> = (0..200)
            .map(|_| {
                a = c + t * a + q.sqrt() * rng.sample::<f64, _>(StandardNormal);
                a + h.sqrt() * rng.sample::<f64, _>(StandardNormal)
            })
            .collect();
        let exact = kalman_loglik_scalar(0.0, 1.0, h, c, t, q, &y).unwrap();
        let est = csir_filter(&m, &ObsSeries::scalar(y), 5000, 9).unwrap().loglik;
        assert!((est - exact).abs() < 1.0, "{est} vs {exact}");
    }

    #[test]
    fn deterministic_and_continuous_under_fixed_seed() {
        let data = ObsSeries::scalar(vec![0.3, -1.2, 0.8, 2.1, -0.4, 0.1, 0.9, -1.5]);
        let ll = |t: f64| {
            csir_filter(&StateSpaceModel::scalar(ScalarFamily::SvGauss, 0.0, t, 0.1).unwrap(), &data, 200, 5)
                .unwrap()
                .loglik
        };
        assert_eq!(ll(0.9).to_bits(), ll(0.9).to_bits());
        let grid: Vec<f64> = (0..200).map(|i| ll(0.8 + 0.0005 * i as f64)).collect();
        let slope = (grid[199] - grid[0]).abs() / 199.0;
        let max_jump = grid.windows(2).map(|w| (w[1] - w[0]).abs()).fold(0.0, f64::max);
        assert!(max_jump < 10.0 * slope.max(1e-6), "jump {max_jump} slope {slope}");
    }

    #[test]
    fn multidimensional_state_rejected() {
        let p = SvLeverageParams::study_set1();
        let data = ObsSeries::scalar(vec![0.0; 10]);
        assert_eq!(csir_filter(&p, &data, 10, 1), Err(Error::UnsupportedDimension(3)));
    }

    #[test]
    fn univariate_adapter_without_lags_is_plain_filter() {
        let p = SvLeverageParams { mu: 0.0, c: -0.1, phi: 0.95, sigma_eta: 0.3, rho: vec![-0.4] };
        let s = crate::svleverage::sv_simulate(&p, 200, 1).unwrap();
        let data = ObsSeries::scalar(s.y);
        let a = csir_filter(&CataniaUnivariate { params: &p }, &data, 100, 2).unwrap();
        let b = csir_filter(&p, &data, 100, 2).unwrap();
        assert_eq!(a, b);
        let p3 = SvLeverageParams::study_set1();
        let s = crate::svleverage::sv_simulate(&p3, 200, 1).unwrap();
        let data = ObsSeries::scalar(s.y);
        let a = csir_filter(&CataniaUnivariate { params: &p3 }, &data, 100, 2).unwrap();
        assert_eq!(a, csir_filter(&CataniaUnivariate { params: &p3 }, &data, 100, 2).unwrap());
        assert_eq!(a.pred_mean.len(), 200);
    }

    #[test]
    fn weight_collapse_reported() {
        // an infinite return has zero density under every particle
        let m = StateSpaceModel::scalar(ScalarFamily::SvGauss, 0.0, 0.5, 1e-12).unwrap();
        let data = ObsSeries::scalar(vec![f64::INFINITY]);
        assert!(matches!(csir_filter(&m, &data, 10, 1), Err(Error::WeightCollapse(0))));
    }
}
