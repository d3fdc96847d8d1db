//! Closed-form Gaussian geometry: Wasserstein and entropic OT distances,
//! Ornstein–Uhlenbeck moment propagation, scores and moment estimators.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{PfiError, Result};
use crate::linalg::{self, sym_eigen_desc};

/// Point clouds are stored one sample per column (d × n).
pub type PointCloud = DMatrix<f64>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianState {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianState {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(PfiError::Dimension(format!(
                "mean has length {d} but covariance is {}x{}",
                cov.nrows(),
                cov.ncols()
            )));
        }
        if !cov.iter().chain(mean.iter()).all(|v| v.is_finite()) {
            return Err(PfiError::NonFinite("Gaussian parameters".into()));
        }
        if linalg::relative_asymmetry(&cov) > 1e-12 {
            return Err(PfiError::NotPositiveDefinite("covariance is not symmetric".into()));
        }
        let (vals, _) = sym_eigen_desc(&cov);
        if vals.iter().any(|&v| v <= 0.0) {
            return Err(PfiError::NotPositiveDefinite(format!(
                "covariance has eigenvalue {:e}",
                vals.min()
            )));
        }
        Ok(Self { mean, cov: linalg::symmetrize(&cov) })
    }

    pub fn isotropic(mean: DVector<f64>, var: f64) -> Result<Self> {
        let d = mean.len();
        Self::new(mean, DMatrix::identity(d, d) * var)
    }

    pub fn standard(d: usize) -> Self {
        Self { mean: DVector::zeros(d), cov: DMatrix::identity(d, d) }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Eigenvalues (descending) and eigenvectors of the covariance.
    pub fn eigen(&self) -> (DVector<f64>, DMatrix<f64>) {
        sym_eigen_desc(&self.cov)
    }

    pub fn log_pdf(&self, x: &DVector<f64>) -> Result<f64> {
        let chol = nalgebra::Cholesky::new(self.cov.clone())
            .ok_or_else(|| PfiError::NotPositiveDefinite("log_pdf".into()))?;
        let diff = x - &self.mean;
        let sol = chol.solve(&diff);
        let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let d = self.dim() as f64;
        Ok(-0.5 * (diff.dot(&sol) + logdet + d * (2.0 * std::f64::consts::PI).ln()))
    }

    /// Draw `n` samples as a d × n cloud.
    pub fn sample(&self, n: usize, rng: &mut crate::rng::Rng) -> Result<PointCloud> {
        let l = linalg::cholesky(&self.cov)?;
        let z = crate::rng::normal_mat(rng, self.dim(), n);
        let mut x = l * z;
        for mut col in x.column_iter_mut() {
            col += &self.mean;
        }
        Ok(x)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OUParams {
    pub omega: DMatrix<f64>,
    pub diffusion: DMatrix<f64>,
    pub initial: GaussianState,
}

impl OUParams {
    pub fn new(omega: DMatrix<f64>, diffusion: DMatrix<f64>, initial: GaussianState) -> Result<Self> {
        let d = initial.dim();
        if omega.shape() != (d, d) || diffusion.shape() != (d, d) {
            return Err(PfiError::Dimension("OU matrices must be d x d".into()));
        }
        let abscissa = linalg::spectral_abscissa(&omega);
        if abscissa >= 0.0 {
            return Err(PfiError::Spectral(format!(
                "drift matrix has eigenvalue with real part {abscissa:e} >= 0"
            )));
        }
        if linalg::relative_asymmetry(&diffusion) > 1e-12 {
            return Err(PfiError::NotPositiveDefinite("diffusion is not symmetric".into()));
        }
        let (vals, _) = sym_eigen_desc(&diffusion);
        if vals.len() > 0 && vals.min() < -1e-12 * vals.max().abs().max(1.0) {
            return Err(PfiError::NotPositiveDefinite("diffusion has a negative eigenvalue".into()));
        }
        Ok(Self { omega, diffusion, initial })
    }

    pub fn dim(&self) -> usize {
        self.initial.dim()
    }
}

/// Moments of the OU process `dx = Ωx dt + sqrt(2D) dW` at time `t`.
///
/// The noise integral uses the block-exponential identity, which stays exact
/// for defective drift matrices.
pub fn ou_propagate(params: &OUParams, t: f64) -> Result<GaussianState> {
    if t < 0.0 {
        return Err(PfiError::InvalidParameter(format!("negative time {t}")));
    }
    if t == 0.0 {
        return Ok(params.initial.clone());
    }
    let e = linalg::expm(&(&params.omega * t));
    if !e.iter().all(|v| v.is_finite()) {
        return Err(PfiError::NonFinite("matrix exponential".into()));
    }
    let mean = &e * &params.initial.mean;
    let noise = linalg::gramian_integral(&params.omega, &(&params.diffusion * 2.0), t);
    let cov = linalg::symmetrize(&(&e * &params.initial.cov * e.transpose() + noise));
    GaussianState::new(mean, cov)
}

fn bures_cross_term(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let rb = linalg::sqrtm_psd(b)?;
    Ok(linalg::symmetrize(&(&rb * a * &rb)))
}

/// Squared 2-Wasserstein distance between two Gaussians.
pub fn w2_gaussian(a: &GaussianState, b: &GaussianState) -> Result<f64> {
    check_same_dim(a, b)?;
    let x = bures_cross_term(&a.cov, &b.cov)?;
    let cross = linalg::sqrtm_psd(&x)?.trace();
    let value = (&a.mean - &b.mean).norm_squared() + a.cov.trace() + b.cov.trace() - 2.0 * cross;
    Ok(value.max(0.0))
}

/// Eigenvalues of `Σ_b^{1/2} Σ_a Σ_b^{1/2}`, clamped at zero.
fn cross_spectrum(a: &GaussianState, b: &GaussianState) -> Result<DVector<f64>> {
    let x = bures_cross_term(&a.cov, &b.cov)?;
    let (vals, _) = sym_eigen_desc(&x);
    Ok(vals.map(|v| v.max(0.0)))
}

/// Entropy-regularised transport cost between Gaussians.
///
/// Matches `min <π, |x-y|^2> + ε KL(π | a⊗b)`. With `eps == 0` this is
/// exactly [`w2_gaussian`].
pub fn w2_entropic_gaussian(a: &GaussianState, b: &GaussianState, eps: f64) -> Result<f64> {
    check_same_dim(a, b)?;
    if eps < 0.0 {
        return Err(PfiError::InvalidParameter(format!("negative epsilon {eps}")));
    }
    if eps == 0.0 {
        return w2_gaussian(a, b);
    }
    let spec = cross_spectrum(a, b)?;
    let mut acc = (&a.mean - &b.mean).norm_squared() + a.cov.trace() + b.cov.trace();
    for &x in spec.iter() {
        // (ε/2)·μ with μ = -1 + sqrt(1 + 16x/ε²), written to stay finite as ε → 0.
        let y = 16.0 * x / (eps * eps);
        let root = (1.0 + y).sqrt();
        let half_eps_mu = (8.0 * x / eps) / (1.0 + root);
        let mu = y / (1.0 + root);
        acc += 0.5 * eps * (1.0 + 0.5 * mu).ln() - half_eps_mu;
    }
    Ok(acc)
}

/// Debiased Sinkhorn divergence between Gaussians; zero iff `a == b`.
pub fn sinkhorn_div_gaussian(a: &GaussianState, b: &GaussianState, eps: f64) -> Result<f64> {
    if eps == 0.0 {
        return w2_gaussian(a, b);
    }
    let ab = w2_entropic_gaussian(a, b, eps)?;
    let aa = w2_entropic_gaussian(a, a, eps)?;
    let bb = w2_entropic_gaussian(b, b, eps)?;
    Ok((ab - 0.5 * (aa + bb)).max(0.0))
}

/// Spectral weights `ξ_k = sqrt(ε²/16 + x_k)` where `x_k` are the eigenvalues
/// of `Σ_b^{1/2} Σ_a Σ_b^{1/2}`; for `a = b = σ²I` every weight is
/// `sqrt(ε²/16 + σ⁴)`.
pub fn entropic_spectral_weights(a: &GaussianState, b: &GaussianState, eps: f64) -> Result<DVector<f64>> {
    let spec = cross_spectrum(a, b)?;
    Ok(spec.map(|x| (eps * eps / 16.0 + x).sqrt()))
}

/// Score `-Σ⁻¹(x - m)`.
pub fn gaussian_score(s: &GaussianState, x: &DVector<f64>) -> Result<DVector<f64>> {
    if x.len() != s.dim() {
        return Err(PfiError::Dimension("score argument".into()));
    }
    let chol = nalgebra::Cholesky::new(s.cov.clone())
        .ok_or_else(|| PfiError::NotPositiveDefinite("score".into()))?;
    Ok(-chol.solve(&(x - &s.mean)))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GaussianFit {
    pub state: GaussianState,
    /// True when covariance eigenvalues had to be raised to the floor.
    pub floored: bool,
}

/// Relative eigenvalue floor used when a sample covariance is degenerate.
pub const COV_FLOOR: f64 = 1e-12;

pub fn sample_mean(samples: &PointCloud) -> DVector<f64> {
    samples.column_mean()
}

/// Unbiased sample covariance (1/(n-1)).
pub fn sample_cov(samples: &PointCloud) -> DMatrix<f64> {
    let n = samples.ncols();
    let mean = samples.column_mean();
    let mut centered = samples.clone();
    for mut col in centered.column_iter_mut() {
        col -= &mean;
    }
    linalg::symmetrize(&(&centered * centered.transpose() / (n as f64 - 1.0)))
}

/// Fit a Gaussian to a d × n cloud with sample moments.
pub fn fit_gaussian(samples: &PointCloud) -> Result<GaussianFit> {
    let d = samples.nrows();
    let n = samples.ncols();
    if n < d + 1 {
        return Err(PfiError::TooFewSamples { needed: d + 1, got: n });
    }
    let mean = sample_mean(samples);
    let cov = sample_cov(samples);
    let (cov, floored) = floor_covariance(&cov);
    Ok(GaussianFit { state: GaussianState { mean, cov }, floored })
}

/// Raise eigenvalues below `COV_FLOOR · tr` (or an absolute floor for a
/// zero matrix) and report whether anything changed.
pub fn floor_covariance(cov: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let (vals, vecs) = sym_eigen_desc(cov);
    let tr = cov.trace();
    let floor = if tr > 0.0 { COV_FLOOR * tr } else { COV_FLOOR };
    if vals.iter().all(|&v| v > floor) {
        return (cov.clone(), false);
    }
    let raised = vals.map(|v| v.max(floor));
    let rebuilt = &vecs * DMatrix::from_diagonal(&raised) * vecs.transpose();
    (linalg::symmetrize(&rebuilt), true)
}

fn check_same_dim(a: &GaussianState, b: &GaussianState) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(PfiError::Dimension(format!("{} vs {}", a.dim(), b.dim())));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};
    use approx::assert_relative_eq;

    pub(crate) fn random_spd(d: usize, rng: &mut crate::rng::Rng) -> DMatrix<f64> {
        let a = crate::rng::normal_mat(rng, d, d);
        &a * a.transpose() / d as f64 + DMatrix::identity(d, d) * 0.2
    }

    #[test]
    fn rejects_bad_covariances() {
        let m = DVector::zeros(2);
        assert!(GaussianState::new(m.clone(), DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.4, 1.0])).is_err());
        assert!(GaussianState::new(m.clone(), DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0])).is_err());
        assert!(GaussianState::new(m, DMatrix::identity(3, 3)).is_err());
    }

    #[test]
    fn spectral_roundtrip() {
        let mut rng = stream(1, Purpose::Evaluation, 0);
        let s = GaussianState::new(DVector::zeros(4), random_spd(4, &mut rng)).unwrap();
        let (vals, vecs) = s.eigen();
        let rec = &vecs * DMatrix::from_diagonal(&vals) * vecs.transpose();
        assert!((rec - &s.cov).norm() / s.cov.norm() < 1e-10);
    }

    #[test]
    fn propagate_identity_and_stationary() {
        let init = GaussianState::new(DVector::from_vec(vec![1.0, -2.0]), DMatrix::identity(2, 2)).unwrap();
        let p = OUParams::new(-DMatrix::identity(2, 2), DMatrix::identity(2, 2), init.clone()).unwrap();
        assert_eq!(ou_propagate(&p, 0.0).unwrap(), init);
        for t in [0.1, 1.0, 5.0] {
            let s = ou_propagate(&p, t).unwrap();
            assert_relative_eq!(s.cov, DMatrix::identity(2, 2), epsilon = 1e-12);
            assert_relative_eq!(s.mean, &init.mean * (-t).exp(), epsilon = 1e-12);
        }
    }

    #[test]
    fn propagate_rejects_unstable_drift() {
        let init = GaussianState::standard(2);
        assert!(OUParams::new(DMatrix::identity(2, 2) * 0.1, DMatrix::identity(2, 2), init).is_err());
    }

    #[test]
    fn w2_trivial_cases() {
        let a = GaussianState::isotropic(DVector::zeros(3), 2.0).unwrap();
        assert!(w2_gaussian(&a, &a).unwrap().abs() < 1e-12);
        let m = DVector::from_vec(vec![1.0, 2.0, -1.0]);
        let b = GaussianState::isotropic(m.clone(), 0.5).unwrap();
        let expect = m.norm_squared() + 3.0 * (2f64.sqrt() - 0.5f64.sqrt()).powi(2);
        assert_relative_eq!(w2_gaussian(&a, &b).unwrap(), expect, epsilon = 1e-12);
    }

    #[test]
    fn w2_symmetric() {
        let mut rng = stream(2, Purpose::Evaluation, 0);
        let a = GaussianState::new(crate::rng::normal_vec(&mut rng, 4), random_spd(4, &mut rng)).unwrap();
        let b = GaussianState::new(crate::rng::normal_vec(&mut rng, 4), random_spd(4, &mut rng)).unwrap();
        assert_relative_eq!(w2_gaussian(&a, &b).unwrap(), w2_gaussian(&b, &a).unwrap(), epsilon = 1e-10);
    }

    #[test]
    fn entropic_zero_eps_routes_to_w2() {
        let mut rng = stream(3, Purpose::Evaluation, 0);
        let a = GaussianState::new(crate::rng::normal_vec(&mut rng, 3), random_spd(3, &mut rng)).unwrap();
        let b = GaussianState::new(crate::rng::normal_vec(&mut rng, 3), random_spd(3, &mut rng)).unwrap();
        assert_eq!(w2_entropic_gaussian(&a, &b, 0.0).unwrap(), w2_gaussian(&a, &b).unwrap());
        assert_eq!(sinkhorn_div_gaussian(&a, &b, 0.0).unwrap(), w2_gaussian(&a, &b).unwrap());
        assert!(sinkhorn_div_gaussian(&a, &a, 0.3).unwrap().abs() < 1e-12);
    }

    #[test]
    fn isotropic_spectral_weights() {
        // Symbolic value for a = b = σ²I: sqrt(ε²/16 + σ⁴).
        let s2: f64 = 1.7;
        let eps = 0.4;
        let a = GaussianState::isotropic(DVector::zeros(3), s2).unwrap();
        let w = entropic_spectral_weights(&a, &a, eps).unwrap();
        for v in w.iter() {
            assert_relative_eq!(*v, (eps * eps / 16.0 + s2 * s2).sqrt(), epsilon = 1e-12);
        }
    }

    #[test]
    fn score_cases() {
        let s = GaussianState::standard(3);
        let x = DVector::from_vec(vec![0.3, -1.0, 2.0]);
        assert_relative_eq!(gaussian_score(&s, &x).unwrap(), -&x, epsilon = 1e-14);
        let t = GaussianState::new(x.clone(), DMatrix::identity(3, 3) * 2.0).unwrap();
        assert!(gaussian_score(&t, &x).unwrap().norm() == 0.0);
    }

    #[test]
    fn score_matches_log_pdf_differences() {
        let s = GaussianState::new(
            DVector::from_vec(vec![0.5, -0.2]),
            DMatrix::from_row_slice(2, 2, &[2.0, 0.6, 0.6, 0.5]),
        )
        .unwrap();
        let x = DVector::from_vec(vec![1.1, 0.4]);
        let h = 1e-5;
        let mut fd = DVector::zeros(2);
        for i in 0..2 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            fd[i] = (s.log_pdf(&xp).unwrap() - s.log_pdf(&xm).unwrap()) / (2.0 * h);
        }
        assert!((gaussian_score(&s, &x).unwrap() - fd).amax() < 1e-6);
    }

    #[test]
    fn fit_degenerate_is_flagged() {
        let cloud = DMatrix::from_fn(2, 10, |i, _| i as f64);
        let fit = fit_gaussian(&cloud).unwrap();
        assert!(fit.floored);
        assert!(fit_gaussian(&DMatrix::zeros(3, 3)).is_err());
        let ok = DMatrix::from_fn(2, 10, |i, j| ((i * 7 + j * 3) % 5) as f64);
        assert!(!fit_gaussian(&ok).unwrap().floored);
    }
}
