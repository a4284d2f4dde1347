//! State transitions: linear Gaussian dynamics, the general transition
//! contract used by the joint-Newton filter, and bookkeeping for
//! deterministic (pinned) state coordinates.
//!
//! Sign convention: the `J` blocks of [`TransitionDerivatives`] hold the
//! *negative* Hessian of `ℓ(a_t | a_{t−1})`; `J1` and `J2` are plain gradients.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::numerics::{self, spd_inverse, spd_log_det, sym_eigenvalues, SymMatrix};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// `α_t = c + T α_{t−1} + η_t`, `η_t ~ N(0, Q)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearGaussianDynamics {
    c: DVector<f64>,
    t: DMatrix<f64>,
    q: SymMatrix,
    q_inv: Option<DMatrix<f64>>,
    q_log_det: f64,
}

impl LinearGaussianDynamics {
    pub fn new(c: DVector<f64>, t: DMatrix<f64>, q: SymMatrix) -> Result<Self> {
        let m = c.len();
        if t.nrows() != m || t.ncols() != m || q.dim() != m {
            return Err(Error::Dimension(format!(
                "dynamics: c has length {m}, T is {}x{}, Q is {}x{}",
                t.nrows(),
                t.ncols(),
                q.dim(),
                q.dim()
            )));
        }
        if c.iter().chain(t.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dynamics c or T".into()));
        }
        let eig = sym_eigenvalues(q.as_matrix());
        let scale = eig.iter().fold(0.0f64, |a, b| a.max(b.abs())).max(f64::MIN_POSITIVE);
        if eig.first().is_some_and(|&l| l < -1e-12 * scale) {
            return Err(Error::DegenerateParams("Q is not positive semidefinite".into()));
        }
        let (q_inv, q_log_det) = match (spd_inverse(q.as_matrix()), spd_log_det(q.as_matrix())) {
            (Ok(inv), Ok(ld)) => (Some(inv), ld),
            _ => (None, f64::NEG_INFINITY),
        };
        Ok(LinearGaussianDynamics { c, t, q, q_inv, q_log_det })
    }

    pub fn scalar(c: f64, t: f64, q: f64) -> Result<Self> {
        if q < 0.0 {
            return Err(Error::DegenerateParams(format!("Q = {q} is negative")));
        }
        Self::new(DVector::from_element(1, c), DMatrix::from_element(1, 1, t), SymMatrix::scalar(q))
    }

    pub fn dim(&self) -> usize {
        self.c.len()
    }

    pub fn c(&self) -> &DVector<f64> {
        &self.c
    }

    pub fn t(&self) -> &DMatrix<f64> {
        &self.t
    }

    pub fn q(&self) -> &SymMatrix {
        &self.q
    }

    /// `Q⁻¹`, or `SingularQ`.
    pub fn q_inv(&self) -> Result<&DMatrix<f64>> {
        self.q_inv.as_ref().ok_or(Error::SingularQ)
    }

    pub fn is_stationary(&self) -> bool {
        numerics::spectral_radius(&self.t) < 1.0 - 1e-10
    }

    pub fn stationary_moments(&self) -> Result<(DVector<f64>, SymMatrix)> {
        numerics::stationary_moments(&self.c, &self.t, &self.q)
    }

    pub fn predict_state(&self, a_prev: &DVector<f64>) -> DVector<f64> {
        &self.c + &self.t * a_prev
    }

    pub fn predict_info(&self, info_prev: &SymMatrix) -> Result<SymMatrix> {
        numerics::predict_info_lg(&self.t, &self.q, info_prev)
    }

    /// The constant derivative blocks of the Gaussian transition density at
    /// the point `(a_t, a_prev)`.
    pub fn derivatives(&self, a_t: &DVector<f64>, a_prev: &DVector<f64>) -> Result<TransitionDerivatives> {
        let qi = self.q_inv()?;
        let r = a_t - self.predict_state(a_prev);
        let qi_r = qi * &r;
        let qi_t = qi * &self.t;
        Ok(TransitionDerivatives {
            j1: -&qi_r,
            j2: self.t.transpose() * &qi_r,
            j11: qi.clone(),
            j12: -&qi_t,
            j21: -qi_t.transpose(),
            j22: self.t.transpose() * &qi_t,
        })
    }
}

/// Log-density of the linear Gaussian transition.
pub fn lg_transition_logpdf(
    dynamics: &LinearGaussianDynamics,
    a_t: &DVector<f64>,
    a_prev: &DVector<f64>,
) -> Result<f64> {
    let qi = dynamics.q_inv()?;
    let r = a_t - dynamics.predict_state(a_prev);
    Ok(-0.5 * (dynamics.dim() as f64 * LN_2PI + dynamics.q_log_det) - 0.5 * numerics::quad_form(&r, qi))
}

/// Gradient blocks `J1 = ∂ℓ/∂a_t`, `J2 = ∂ℓ/∂a_{t−1}` and negative-Hessian
/// blocks `J11`, `J12`, `J21`, `J22` of the transition log-density.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionDerivatives {
    pub j1: DVector<f64>,
    pub j2: DVector<f64>,
    pub j11: DMatrix<f64>,
    pub j12: DMatrix<f64>,
    pub j21: DMatrix<f64>,
    pub j22: DMatrix<f64>,
}

/// A state coordinate fixed as `a_t[index] = weightsᵀ a_{t−1} + offset`.
#[derive(Debug, Clone, PartialEq)]
pub struct PinnedCoord {
    pub index: usize,
    pub weights: DVector<f64>,
    pub offset: f64,
}

/// Partition of the state coordinates into free ones (driven by a proper
/// density) and pinned ones (deterministic linear functions of the previous
/// state), so that `a_t = A u + B a_{t−1} + o` with `u` the free coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct DegeneracyMask {
    dim: usize,
    free: Vec<usize>,
    pinned: Vec<PinnedCoord>,
}

impl DegeneracyMask {
    pub fn new(dim: usize, free: Vec<usize>, pinned: Vec<PinnedCoord>) -> Result<Self> {
        let mut seen = vec![false; dim];
        for &i in free.iter().chain(pinned.iter().map(|p| &p.index)) {
            if i >= dim || seen[i] {
                return Err(Error::Dimension(format!("coordinate {i} is out of range or listed twice in the mask")));
            }
            seen[i] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Dimension("free and pinned coordinates must cover the state".into()));
        }
        if pinned.iter().any(|p| p.weights.len() != dim) {
            return Err(Error::Dimension("pinned weights must match the state dimension".into()));
        }
        Ok(DegeneracyMask { dim, free, pinned })
    }

    /// Every coordinate free.
    pub fn full(dim: usize) -> Self {
        DegeneracyMask { dim, free: (0..dim).collect(), pinned: vec![] }
    }

    /// Every coordinate copied from the previous state (a constant state).
    pub fn constant(dim: usize) -> Self {
        let pinned = (0..dim)
            .map(|i| {
                let mut w = DVector::zeros(dim);
                w[i] = 1.0;
                PinnedCoord { index: i, weights: w, offset: 0.0 }
            })
            .collect();
        DegeneracyMask { dim, free: vec![], pinned }
    }

    /// First coordinate free, the rest shifted lags: `a_t[j] = a_{t−1}[j − 1]`.
    pub fn lag_shift(dim: usize) -> Self {
        let pinned = (1..dim)
            .map(|j| {
                let mut w = DVector::zeros(dim);
                w[j - 1] = 1.0;
                PinnedCoord { index: j, weights: w, offset: 0.0 }
            })
            .collect();
        DegeneracyMask { dim, free: vec![0], pinned }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn free(&self) -> &[usize] {
        &self.free
    }

    pub fn pinned(&self) -> &[PinnedCoord] {
        &self.pinned
    }

    pub fn free_dim(&self) -> usize {
        self.free.len()
    }

    pub fn is_full(&self) -> bool {
        self.pinned.is_empty()
    }

    /// `a_t` from the free coordinates and the previous state.
    pub fn embed(&self, u: &DVector<f64>, a_prev: &DVector<f64>) -> DVector<f64> {
        let mut a = DVector::zeros(self.dim);
        for (k, &i) in self.free.iter().enumerate() {
            a[i] = u[k];
        }
        for p in &self.pinned {
            a[p.index] = p.weights.dot(a_prev) + p.offset;
        }
        a
    }

    pub fn extract_free(&self, a_t: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.free.len(), self.free.iter().map(|&i| a_t[i]))
    }

    /// `(A, B)` with `a_t = A u + B a_{t−1} + o`.
    pub fn jacobians(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let mut a = DMatrix::zeros(self.dim, self.free.len());
        for (k, &i) in self.free.iter().enumerate() {
            a[(i, k)] = 1.0;
        }
        let mut b = DMatrix::zeros(self.dim, self.dim);
        for p in &self.pinned {
            b.row_mut(p.index).copy_from(&p.weights.transpose());
        }
        (a, b)
    }
}

/// Transition log-density of the free coordinates with its gradient and
/// negative Hessian in the stacked vector `(u, a_{t−1})`.
#[derive(Debug, Clone, PartialEq)]
pub struct FreeTransitionEval {
    pub logpdf: f64,
    pub grad: DVector<f64>,
    pub neg_hess: DMatrix<f64>,
}

/// General transition contract for the joint-Newton filter.
pub trait TransitionModel {
    fn state_dim(&self) -> usize;

    fn mask(&self) -> DegeneracyMask {
        DegeneracyMask::full(self.state_dim())
    }

    /// Evaluates `ℓ(u | a_{t−1})` for the free coordinates `u`.
    fn eval_free(&self, u: &DVector<f64>, a_prev: &DVector<f64>) -> Result<FreeTransitionEval>;

    /// `argmax_a ℓ(a | a_prev)`.
    fn predict_state(&self, a_prev: &DVector<f64>) -> Result<DVector<f64>>;
}

impl TransitionModel for LinearGaussianDynamics {
    fn state_dim(&self) -> usize {
        self.dim()
    }

    fn eval_free(&self, u: &DVector<f64>, a_prev: &DVector<f64>) -> Result<FreeTransitionEval> {
        let d = self.derivatives(u, a_prev)?;
        let m = self.dim();
        let mut grad = DVector::zeros(2 * m);
        grad.rows_mut(0, m).copy_from(&d.j1);
        grad.rows_mut(m, m).copy_from(&d.j2);
        let mut neg_hess = DMatrix::zeros(2 * m, 2 * m);
        neg_hess.view_mut((0, 0), (m, m)).copy_from(&d.j11);
        neg_hess.view_mut((0, m), (m, m)).copy_from(&d.j12);
        neg_hess.view_mut((m, 0), (m, m)).copy_from(&d.j21);
        neg_hess.view_mut((m, m), (m, m)).copy_from(&d.j22);
        Ok(FreeTransitionEval { logpdf: lg_transition_logpdf(self, u, a_prev)?, grad, neg_hess })
    }

    fn predict_state(&self, a_prev: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(LinearGaussianDynamics::predict_state(self, a_prev))
    }
}

/// The unmasked derivative blocks of any fully free transition model.
pub fn transition_derivatives<M: TransitionModel + ?Sized>(
    model: &M,
    a_t: &DVector<f64>,
    a_prev: &DVector<f64>,
) -> Result<TransitionDerivatives> {
    let m = model.state_dim();
    if !model.mask().is_full() {
        return Err(Error::NonDifferentiable);
    }
    let e = model.eval_free(a_t, a_prev)?;
    Ok(TransitionDerivatives {
        j1: e.grad.rows(0, m).into_owned(),
        j2: e.grad.rows(m, m).into_owned(),
        j11: e.neg_hess.view((0, 0), (m, m)).into_owned(),
        j12: e.neg_hess.view((0, m), (m, m)).into_owned(),
        j21: e.neg_hess.view((m, 0), (m, m)).into_owned(),
        j22: e.neg_hess.view((m, m), (m, m)).into_owned(),
    })
}

/// A state that never moves: every coordinate is pinned to its previous value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantDynamics {
    pub dim: usize,
}

impl TransitionModel for ConstantDynamics {
    fn state_dim(&self) -> usize {
        self.dim
    }

    fn mask(&self) -> DegeneracyMask {
        DegeneracyMask::constant(self.dim)
    }

    fn eval_free(&self, _u: &DVector<f64>, _a_prev: &DVector<f64>) -> Result<FreeTransitionEval> {
        Ok(FreeTransitionEval {
            logpdf: 0.0,
            grad: DVector::zeros(self.dim),
            neg_hess: DMatrix::zeros(self.dim, self.dim),
        })
    }

    fn predict_state(&self, a_prev: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(a_prev.clone())
    }
}
