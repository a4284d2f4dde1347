//! Dense linear-algebra kernels shared by the filters.
//!
//! Everything here works on small dense matrices (state dimensions of a few
//! dozen at most). Positive-definiteness is decided by a Cholesky
//! factorisation whose smallest pivot must exceed `1e-12` times the largest
//! diagonal entry.

use std::ops::Deref;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative pivot threshold for the Cholesky-based definiteness test.
pub const PD_PIVOT_TOL: f64 = 1e-12;
/// Relative tolerance on the smallest singular value for block inversion.
pub const SINGULAR_TOL: f64 = 1e-12;
/// Default relative step for central-difference gradients.
pub const FD_STEP: f64 = 1e-5;
/// Default relative step for central-difference Hessians.
pub const FD_HESSIAN_STEP: f64 = 1e-4;

/// A dense symmetric matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix(DMatrix<f64>);

impl SymMatrix {
    /// Checks squareness, finiteness and symmetry (to `1e-12` relative),
    /// then stores the exactly symmetrised matrix.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::Dimension(format!("symmetric matrix must be square, got {}x{}", m.nrows(), m.ncols())));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix entry".into()));
        }
        let scale = m.amax().max(f64::MIN_POSITIVE);
        let asym = (&m - m.transpose()).amax();
        if asym > 1e-12 * scale {
            return Err(Error::NotSymmetric(format!("max asymmetry {asym:e}")));
        }
        Ok(Self::symmetrize(m))
    }

    /// Averages `m` with its transpose; no checks.
    pub fn symmetrize(m: DMatrix<f64>) -> Self {
        let t = m.transpose();
        SymMatrix((m + t) * 0.5)
    }

    pub fn identity(n: usize) -> Self {
        SymMatrix(DMatrix::identity(n, n))
    }

    pub fn scalar(v: f64) -> Self {
        SymMatrix(DMatrix::from_element(1, 1, v))
    }

    pub fn from_diagonal(d: &[f64]) -> Self {
        SymMatrix(DMatrix::from_diagonal(&DVector::from_column_slice(d)))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    pub fn is_pd(&self) -> bool {
        cholesky(&self.0).is_ok()
    }

    /// Inverse through the Cholesky factor; fails with `SingularInformation`.
    pub fn inverse(&self) -> Result<SymMatrix> {
        spd_inverse(&self.0).map(SymMatrix::symmetrize)
    }

    /// `log det`, requiring positive definiteness.
    pub fn log_det(&self) -> Result<f64> {
        spd_log_det(&self.0)
    }
}

impl Deref for SymMatrix {
    type Target = DMatrix<f64>;
    fn deref(&self) -> &DMatrix<f64> {
        &self.0
    }
}

impl From<SymMatrix> for DMatrix<f64> {
    fn from(s: SymMatrix) -> Self {
        s.0
    }
}

/// Lower Cholesky factor with the scale-aware pivot test.
pub fn cholesky(m: &DMatrix<f64>) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    let n = m.nrows();
    if n != m.ncols() {
        return Err(Error::Dimension("cholesky of non-square matrix".into()));
    }
    if n == 0 {
        return Err(Error::Dimension("cholesky of empty matrix".into()));
    }
    let max_diag = (0..n).map(|i| m[(i, i)]).fold(f64::NEG_INFINITY, f64::max);
    if !(max_diag > 0.0) || !max_diag.is_finite() {
        return Err(Error::SingularInformation);
    }
    let chol = nalgebra::Cholesky::new(m.clone()).ok_or(Error::SingularInformation)?;
    let l = chol.l_dirty();
    let min_pivot = (0..n).map(|i| l[(i, i)] * l[(i, i)]).fold(f64::INFINITY, f64::min);
    if !(min_pivot >= PD_PIVOT_TOL * max_diag) {
        return Err(Error::SingularInformation);
    }
    Ok(chol)
}

pub fn is_pd(m: &DMatrix<f64>) -> bool {
    cholesky(m).is_ok()
}

pub fn spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(cholesky(m)?.inverse())
}

pub fn spd_solve(m: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    Ok(cholesky(m)?.solve(b))
}

pub fn spd_log_det(m: &DMatrix<f64>) -> Result<f64> {
    let chol = cholesky(m)?;
    let l = chol.l_dirty();
    Ok((0..m.nrows()).map(|i| 2.0 * l[(i, i)].ln()).sum())
}

/// Weighted squared norm `xᵀ W x`.
pub fn quad_form(x: &DVector<f64>, w: &DMatrix<f64>) -> f64 {
    x.dot(&(w * x))
}

/// Symmetric eigenvalues, ascending.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let mut ev: Vec<f64> = m.clone().symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    ev
}

fn check_nonsingular(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularBlock(format!("{what} has non-finite entries")));
    }
    let sv = m.clone().singular_values();
    let max = sv.max();
    let min = sv.min();
    if !(max > 0.0) || min <= SINGULAR_TOL * max {
        return Err(Error::SingularBlock(format!("{what}: smallest singular value {min:e}")));
    }
    Ok(())
}

/// A 2×2 partitioned matrix `[[a11, a12], [a21, a22]]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockSystem {
    pub a11: DMatrix<f64>,
    pub a12: DMatrix<f64>,
    pub a21: DMatrix<f64>,
    pub a22: DMatrix<f64>,
}

/// The four blocks of the inverse of a [`BlockSystem`].
#[derive(Debug, Clone, PartialEq)]
pub struct BlockInverse {
    pub b11: DMatrix<f64>,
    pub b12: DMatrix<f64>,
    pub b21: DMatrix<f64>,
    pub b22: DMatrix<f64>,
}

impl BlockSystem {
    pub fn new(a11: DMatrix<f64>, a12: DMatrix<f64>, a21: DMatrix<f64>, a22: DMatrix<f64>) -> Result<Self> {
        let (p, q) = (a11.nrows(), a22.nrows());
        let ok = a11.ncols() == p && a22.ncols() == q && a12.shape() == (p, q) && a21.shape() == (q, p);
        if !ok {
            return Err(Error::Dimension(format!(
                "block system {:?} {:?} {:?} {:?}",
                a11.shape(),
                a12.shape(),
                a21.shape(),
                a22.shape()
            )));
        }
        Ok(BlockSystem { a11, a12, a21, a22 })
    }

    pub fn assemble(&self) -> DMatrix<f64> {
        let (p, q) = (self.a11.nrows(), self.a22.nrows());
        let mut m = DMatrix::zeros(p + q, p + q);
        m.view_mut((0, 0), (p, p)).copy_from(&self.a11);
        m.view_mut((0, p), (p, q)).copy_from(&self.a12);
        m.view_mut((p, 0), (q, p)).copy_from(&self.a21);
        m.view_mut((p, p), (q, q)).copy_from(&self.a22);
        m
    }

    /// Schur complement `a11 − a12·a22⁻¹·a21`.
    pub fn schur_complement(&self) -> Result<DMatrix<f64>> {
        check_nonsingular(&self.a22, "A22")?;
        let lu = self.a22.clone().lu();
        let d_inv_a21 = lu.solve(&self.a21).ok_or_else(|| Error::SingularBlock("A22".into()))?;
        Ok(&self.a11 - &self.a12 * d_inv_a21)
    }
}

impl BlockInverse {
    pub fn assemble(&self) -> DMatrix<f64> {
        BlockSystem { a11: self.b11.clone(), a12: self.b12.clone(), a21: self.b21.clone(), a22: self.b22.clone() }
            .assemble()
    }
}

/// Analytic inverse of a partitioned matrix through the Schur complement
/// of the bottom-right block.
pub fn block_inverse(sys: &BlockSystem) -> Result<BlockInverse> {
    check_nonsingular(&sys.a22, "A22")?;
    let d_lu = sys.a22.clone().lu();
    let d_inv = d_lu.try_inverse().ok_or_else(|| Error::SingularBlock("A22".into()))?;
    let s = &sys.a11 - &sys.a12 * &d_inv * &sys.a21;
    check_nonsingular(&s, "Schur complement")?;
    let s_inv = s.lu().try_inverse().ok_or_else(|| Error::SingularBlock("Schur complement".into()))?;
    let d_inv_a21 = &d_inv * &sys.a21;
    let a12_d_inv = &sys.a12 * &d_inv;
    let b12 = -(&s_inv * &a12_d_inv);
    let b21 = -(&d_inv_a21 * &s_inv);
    let b22 = &d_inv + &d_inv_a21 * &s_inv * &a12_d_inv;
    Ok(BlockInverse { b11: s_inv, b12, b21, b22 })
}

/// Predicted information `(T·I⁻¹·Tᵀ + Q)⁻¹`; valid for singular `Q`.
pub fn predict_info_lg(t: &DMatrix<f64>, q: &SymMatrix, info_prev: &SymMatrix) -> Result<SymMatrix> {
    let m = t.nrows();
    if t.ncols() != info_prev.dim() || q.dim() != m {
        return Err(Error::Dimension("predict_info_lg: T, Q, I_prev not conformable".into()));
    }
    let p_prev = info_prev.inverse().map_err(|_| Error::SingularPrediction)?;
    let p_pred = t * p_prev.as_matrix() * t.transpose() + q.as_matrix();
    let info = spd_inverse(&p_pred).map_err(|_| Error::SingularPrediction)?;
    Ok(SymMatrix::symmetrize(info))
}

/// The Woodbury form `Q⁻¹ − Q⁻¹T(I + TᵀQ⁻¹T)⁻¹TᵀQ⁻¹`; needs invertible `Q`.
pub fn predict_info_lg_woodbury(t: &DMatrix<f64>, q: &SymMatrix, info_prev: &SymMatrix) -> Result<SymMatrix> {
    let q_inv = q.inverse().map_err(|_| Error::SingularPrediction)?;
    let qi_t = q_inv.as_matrix() * t;
    let inner = info_prev.as_matrix() + t.transpose() * &qi_t;
    let inner_inv = spd_inverse(&inner).map_err(|_| Error::SingularPrediction)?;
    let info = q_inv.as_matrix() - &qi_t * inner_inv * qi_t.transpose();
    Ok(SymMatrix::symmetrize(info))
}

pub fn spectral_radius(t: &DMatrix<f64>) -> f64 {
    t.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Kronecker product.
pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

/// Unconditional mean and covariance of `α_t = c + Tα_{t−1} + η_t`, `η_t ~ N(0, Q)`.
pub fn stationary_moments(c: &DVector<f64>, t: &DMatrix<f64>, q: &SymMatrix) -> Result<(DVector<f64>, SymMatrix)> {
    let m = t.nrows();
    if t.ncols() != m || c.len() != m || q.dim() != m {
        return Err(Error::Dimension("stationary_moments: c, T, Q not conformable".into()));
    }
    let rho = spectral_radius(t);
    if rho >= 1.0 - 1e-10 {
        return Err(Error::NonStationary(rho));
    }
    let eye = DMatrix::<f64>::identity(m, m);
    let mean = (&eye - t).lu().solve(c).ok_or(Error::NonStationary(rho))?;
    let big = DMatrix::<f64>::identity(m * m, m * m) - kron(t, t);
    let vec_q = DVector::from_column_slice(q.as_matrix().as_slice());
    let vec_cov = big.lu().solve(&vec_q).ok_or(Error::NonStationary(rho))?;
    let cov = DMatrix::from_column_slice(m, m, vec_cov.as_slice());
    Ok((mean, SymMatrix::symmetrize(cov)))
}

fn fd_steps(x: &DVector<f64>, rel: f64) -> Vec<f64> {
    x.iter().map(|xi| rel * xi.abs().max(1.0)).collect()
}

fn eval_finite<F: Fn(&DVector<f64>) -> f64>(f: &F, x: &DVector<f64>) -> Result<f64> {
    let v = f(x);
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("f({:?})", x.as_slice())))
    }
}

/// Central-difference gradient with per-coordinate step `rel·max(1, |x_i|)`.
pub fn fd_gradient<F>(f: F, x: &DVector<f64>, rel: f64) -> Result<DVector<f64>>
where
    F: Fn(&DVector<f64>) -> f64,
{
    let h = fd_steps(x, rel);
    let mut g = DVector::zeros(x.len());
    let mut xp = x.clone();
    for i in 0..x.len() {
        xp[i] = x[i] + h[i];
        let fp = eval_finite(&f, &xp)?;
        xp[i] = x[i] - h[i];
        let fm = eval_finite(&f, &xp)?;
        xp[i] = x[i];
        g[i] = (fp - fm) / (2.0 * h[i]);
    }
    Ok(g)
}

/// Central-difference Hessian (symmetric by construction).
pub fn fd_hessian<F>(f: F, x: &DVector<f64>, rel: f64) -> Result<DMatrix<f64>>
where
    F: Fn(&DVector<f64>) -> f64,
{
    let n = x.len();
    let h = fd_steps(x, rel);
    let f0 = eval_finite(&f, x)?;
    let mut hess = DMatrix::zeros(n, n);
    let mut xp = x.clone();
    for i in 0..n {
        xp[i] = x[i] + h[i];
        let fp = eval_finite(&f, &xp)?;
        xp[i] = x[i] - h[i];
        let fm = eval_finite(&f, &xp)?;
        xp[i] = x[i];
        hess[(i, i)] = (fp - 2.0 * f0 + fm) / (h[i] * h[i]);
        for j in 0..i {
            let mut corner = |si: f64, sj: f64| -> Result<f64> {
                xp[i] = x[i] + si * h[i];
                xp[j] = x[j] + sj * h[j];
                let v = eval_finite(&f, &xp);
                xp[i] = x[i];
                xp[j] = x[j];
                v
            };
            let v = corner(1.0, 1.0)? - corner(1.0, -1.0)? - corner(-1.0, 1.0)? + corner(-1.0, -1.0)?;
            let hij = v / (4.0 * h[i] * h[j]);
            hess[(i, j)] = hij;
            hess[(j, i)] = hij;
        }
    }
    Ok(hess)
}

/// Scalar convenience wrapper around [`fd_gradient`].
pub fn fd_derivative<F: Fn(f64) -> f64>(f: F, x: f64, rel: f64) -> Result<f64> {
    let g = fd_gradient(|v: &DVector<f64>| f(v[0]), &DVector::from_element(1, x), rel)?;
    Ok(g[0])
}

/// Scalar convenience wrapper around [`fd_hessian`].
pub fn fd_second_derivative<F: Fn(f64) -> f64>(f: F, x: f64, rel: f64) -> Result<f64> {
    let h = fd_hessian(|v: &DVector<f64>| f(v[0]), &DVector::from_element(1, x), rel)?;
    Ok(h[(0, 0)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(rng: &mut ChaCha8Rng, n: usize, ridge: f64) -> DMatrix<f64> {
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        &a * a.transpose() + DMatrix::identity(n, n) * ridge
    }

    #[test]
    fn block_inverse_identity() {
        let sys = BlockSystem::new(
            DMatrix::identity(2, 2),
            DMatrix::zeros(2, 2),
            DMatrix::zeros(2, 2),
            DMatrix::identity(2, 2),
        )
        .unwrap();
        let inv = block_inverse(&sys).unwrap();
        assert_eq!(inv.b11, DMatrix::identity(2, 2));
        assert_eq!(inv.b12, DMatrix::zeros(2, 2));
        assert_eq!(inv.b21, DMatrix::zeros(2, 2));
        assert_eq!(inv.b22, DMatrix::identity(2, 2));
    }

    #[test]
    fn block_inverse_matches_dense_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let full = random_spd(&mut rng, 4, 1.0);
        let sys = BlockSystem::new(
            full.view((0, 0), (2, 2)).into(),
            full.view((0, 2), (2, 2)).into(),
            full.view((2, 0), (2, 2)).into(),
            full.view((2, 2), (2, 2)).into(),
        )
        .unwrap();
        let dense = full.clone().try_inverse().unwrap();
        let inv = block_inverse(&sys).unwrap().assemble();
        assert!((&inv - &dense).amax() <= 1e-10 * dense.amax());
    }

    #[test]
    fn block_inverse_singular_d() {
        let sys =
            BlockSystem::new(DMatrix::identity(2, 2), DMatrix::zeros(2, 2), DMatrix::zeros(2, 2), DMatrix::zeros(2, 2))
                .unwrap();
        assert!(matches!(block_inverse(&sys), Err(Error::SingularBlock(_))));
    }

    #[test]
    fn block_system_rejects_bad_shapes() {
        let r = BlockSystem::new(
            DMatrix::identity(2, 2),
            DMatrix::zeros(2, 3),
            DMatrix::zeros(2, 2),
            DMatrix::identity(2, 2),
        );
        assert!(matches!(r, Err(Error::Dimension(_))));
    }

    proptest! {
        #[test]
        fn block_inverse_round_trip(seed in 0u64..10_000, p in 1usize..6, q in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = p + q;
            // well-conditioned non-symmetric system
            let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-0.3..0.3)) + DMatrix::identity(n, n) * 2.0;
            let sys = BlockSystem::new(
                a.view((0, 0), (p, p)).into(),
                a.view((0, p), (p, q)).into(),
                a.view((p, 0), (q, p)).into(),
                a.view((p, p), (q, q)).into(),
            ).unwrap();
            let inv = block_inverse(&sys).unwrap().assemble();
            let prod = &inv * &a;
            let err = (prod - DMatrix::<f64>::identity(n, n)).amax();
            prop_assert!(err <= 1e-10, "err {err:e}");
        }

        #[test]
        fn woodbury_forms_agree(seed in 0u64..10_000, m in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = DMatrix::from_fn(m, m, |_, _| rng.random_range(-0.9..0.9));
            let q = SymMatrix::symmetrize(random_spd(&mut rng, m, 0.2));
            let info = SymMatrix::symmetrize(random_spd(&mut rng, m, 0.2));
            let direct = predict_info_lg(&t, &q, &info).unwrap();
            let wood = predict_info_lg_woodbury(&t, &q, &info).unwrap();
            let err = (direct.as_matrix() - wood.as_matrix()).amax();
            prop_assert!(err <= 1e-10 * direct.amax().max(1.0), "err {err:e}");
        }

        #[test]
        fn stationary_cov_is_fixed_point(seed in 0u64..10_000, m in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut t = DMatrix::from_fn(m, m, |_, _| rng.random_range(-1.0..1.0));
            let rho = spectral_radius(&t);
            if rho > 0.95 { t *= 0.95 / rho; }
            let q = SymMatrix::symmetrize(random_spd(&mut rng, m, 0.1));
            let c = DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0));
            let (mean, cov) = stationary_moments(&c, &t, &q).unwrap();
            let next = &t * cov.as_matrix() * t.transpose() + q.as_matrix();
            prop_assert!((next - cov.as_matrix()).amax() <= 1e-10 * cov.amax().max(1.0));
            let mean_next = &c + &t * &mean;
            prop_assert!((mean_next - &mean).amax() <= 1e-10 * mean.amax().max(1.0));
        }
    }

    #[test]
    fn predict_info_unit_dynamics_no_noise() {
        let t = DMatrix::from_element(1, 1, 1.0);
        let out = predict_info_lg(&t, &SymMatrix::scalar(0.0), &SymMatrix::scalar(5.0)).unwrap();
        assert_abs_diff_eq!(out[(0, 0)], 5.0, epsilon = 1e-12);
    }

    #[test]
    fn predict_info_stationary_fixed_point() {
        // stationary variance Q/(1 - T^2) = 0.0225 / 0.0396
        let var = 0.0225 / (1.0 - 0.98f64 * 0.98);
        assert_abs_diff_eq!(var, 0.568182, epsilon = 1e-6);
        let t = DMatrix::from_element(1, 1, 0.98);
        let q = SymMatrix::scalar(0.0225);
        let info = SymMatrix::scalar(1.0 / var);
        let a = predict_info_lg(&t, &q, &info).unwrap();
        let b = predict_info_lg_woodbury(&t, &q, &info).unwrap();
        assert_abs_diff_eq!(a[(0, 0)], 1.0 / var, epsilon = 1e-10);
        assert_abs_diff_eq!(b[(0, 0)], 1.0 / var, epsilon = 1e-10);
    }

    #[test]
    fn predict_info_singular_prediction() {
        let t = DMatrix::from_element(1, 1, 0.0);
        let r = predict_info_lg(&t, &SymMatrix::scalar(0.0), &SymMatrix::scalar(1.0));
        assert_eq!(r, Err(Error::SingularPrediction));
    }

    #[test]
    fn stationary_moments_scalar() {
        let (m, v) = stationary_moments(
            &DVector::from_element(1, 0.0),
            &DMatrix::from_element(1, 1, 0.98),
            &SymMatrix::scalar(0.0225),
        )
        .unwrap();
        assert_abs_diff_eq!(m[0], 0.0);
        assert_abs_diff_eq!(v[(0, 0)], 0.568182, epsilon = 1e-6);

        let (m, v) = stationary_moments(
            &DVector::from_element(1, 0.02),
            &DMatrix::from_element(1, 1, 0.98),
            &SymMatrix::scalar(0.01),
        )
        .unwrap();
        assert_abs_diff_eq!(m[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(v[(0, 0)], 0.252525, epsilon = 1e-6);
    }

    #[test]
    fn stationary_moments_unit_root() {
        let t = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.5]);
        let r = stationary_moments(&DVector::zeros(2), &t, &SymMatrix::identity(2));
        assert!(matches!(r, Err(Error::NonStationary(_))));
    }

    #[test]
    fn fd_gradient_quadratic() {
        let g = fd_gradient(|x| x[0] * x[0], &DVector::from_element(1, 3.0), 1e-5).unwrap();
        assert_abs_diff_eq!(g[0], 6.0, epsilon = 1e-8);
    }

    #[test]
    fn fd_gradient_constant() {
        let g = fd_gradient(|_| 4.2, &DVector::from_vec(vec![1.0, -2.0]), FD_STEP).unwrap();
        assert_eq!(g, DVector::zeros(2));
    }

    #[test]
    fn fd_gradient_poisson_score() {
        // log p(y=3 | a) = 3a - exp(a) - log 3!
        let lp = |a: f64| 3.0 * a - a.exp() - 6f64.ln();
        let d = fd_derivative(lp, 0.0, FD_STEP).unwrap();
        assert_abs_diff_eq!(d, 2.0, epsilon = 1e-6);
    }

    #[test]
    fn fd_rejects_non_finite() {
        let r = fd_gradient(|x| (x[0]).ln(), &DVector::from_element(1, 0.0), FD_STEP);
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    #[test]
    fn fd_hessian_mixed() {
        let f = |x: &DVector<f64>| x[0] * x[0] * x[1] + x[1].sin();
        let x = DVector::from_vec(vec![0.7, -0.3]);
        let h = fd_hessian(f, &x, FD_HESSIAN_STEP).unwrap();
        assert_abs_diff_eq!(h[(0, 0)], 2.0 * x[1], epsilon = 1e-6);
        assert_abs_diff_eq!(h[(0, 1)], 2.0 * x[0], epsilon = 1e-6);
        assert_abs_diff_eq!(h[(1, 1)], -x[1].sin(), epsilon = 1e-6);
    }

    #[test]
    fn sym_matrix_checks() {
        assert!(SymMatrix::new(DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.1, 1.0])).is_err());
        let s = SymMatrix::new(DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0])).unwrap();
        assert!(s.is_pd());
        assert_abs_diff_eq!(s.log_det().unwrap(), (2.0f64 - 0.25).ln(), epsilon = 1e-14);
        assert!(!SymMatrix::from_diagonal(&[1.0, 0.0]).is_pd());
        // pivot threshold is relative to the largest diagonal
        assert!(!SymMatrix::from_diagonal(&[1e6, 1e-7]).is_pd());
        assert!(SymMatrix::from_diagonal(&[1e6, 1e-5]).is_pd());
    }
}
