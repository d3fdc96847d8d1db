//! Analytics of linear-force inference on isotropic Ornstein–Uhlenbeck data:
//! the continuous-time loss, its closed-form minimisers, the vanishing
//! regularisation limits and the first-order finite-sample correction.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{PfiError, Result};
use crate::gaussian::{ou_propagate, GaussianState, OUParams};
use crate::linalg::{self, skew_part, sym_eigen_desc, symmetrize};
use crate::quad::{integrate, integrate_scalar, QuadConfig};
use crate::rng::{self, Purpose, Rng};

/// `dx = (Ω_s I + Ω_a) x dt + sqrt(2D) dW` with isotropic initial covariance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IsotropicOUSpec {
    /// Signed symmetric rate; must be negative.
    pub omega_s: f64,
    pub omega_a: DMatrix<f64>,
    pub diffusion: f64,
    pub sigma0_sq: f64,
    pub m0: DVector<f64>,
    pub horizon: f64,
    pub snapshots: usize,
}

impl IsotropicOUSpec {
    pub fn new(
        omega_s: f64,
        omega_a: DMatrix<f64>,
        diffusion: f64,
        sigma0_sq: f64,
        m0: DVector<f64>,
        horizon: f64,
        snapshots: usize,
    ) -> Result<Self> {
        let spec = Self { omega_s, omega_a, diffusion, sigma0_sq, m0, horizon, snapshots };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.m0.len();
        if self.omega_a.shape() != (d, d) {
            return Err(PfiError::Dimension("omega_a must be d x d".into()));
        }
        let asym = (&self.omega_a + self.omega_a.transpose()).amax();
        if asym > 1e-12 * self.omega_a.amax().max(1.0) {
            return Err(PfiError::InvalidParameter("omega_a is not skew-symmetric".into()));
        }
        if !(self.omega_s < 0.0) {
            return Err(PfiError::Spectral(format!(
                "omega_s = {} must be negative (contraction)",
                self.omega_s
            )));
        }
        if self.diffusion < 0.0 || self.sigma0_sq <= 0.0 || self.horizon <= 0.0 || self.snapshots == 0 {
            return Err(PfiError::InvalidParameter(
                "need D >= 0, sigma0_sq > 0, T > 0, K >= 1".into(),
            ));
        }
        Ok(())
    }

    /// The parameter set used for the bias-versus-regularisation study:
    /// d = 10, |m0| = 20 in a random direction, Σ0 = 1, D = 8, Ω_s = -2,
    /// Ω_a = 3|Ω_s| A with A a random unit-radius skew matrix, K = 10,
    /// Δt = 0.05.
    pub fn reference(seed: u64) -> Self {
        let d = 10;
        let mut rng = rng::stream(seed, Purpose::Theory, 0);
        let a = random_skew_matrix(d, &mut rng);
        let dir = rng::normal_vec(&mut rng, d);
        let m0 = dir.normalize() * 20.0;
        Self::new(-2.0, a * 6.0, 8.0, 1.0, m0, 0.5, 10).expect("reference spec is valid")
    }

    pub fn dim(&self) -> usize {
        self.m0.len()
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.snapshots as f64
    }

    pub fn omega(&self) -> DMatrix<f64> {
        DMatrix::identity(self.dim(), self.dim()) * self.omega_s + &self.omega_a
    }

    pub fn mean_at(&self, t: f64) -> DVector<f64> {
        linalg::expm(&(&self.omega_a * t)) * &self.m0 * (self.omega_s * t).exp()
    }

    /// Isotropic variance `Σ0 e^{2Ω_s t} + (D/Ω_s)(e^{2Ω_s t} - 1)`.
    pub fn var_at(&self, t: f64) -> f64 {
        let e = (2.0 * self.omega_s * t).exp();
        self.sigma0_sq * e + self.diffusion / self.omega_s * (e - 1.0)
    }

    pub fn to_ou_params(&self) -> Result<OUParams> {
        let d = self.dim();
        OUParams::new(
            self.omega(),
            DMatrix::identity(d, d) * self.diffusion,
            GaussianState::isotropic(self.m0.clone(), self.sigma0_sq)?,
        )
    }
}

/// Which discretisation convention produced a regularisation value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaConvention {
    /// The `λ̃` of the continuous-time formulas, used as is.
    Continuous,
    /// The per-interval `λ` of the discrete loss (`λ Δt_i E‖∇f‖²`). For a
    /// linear force the discrete minimiser tends to the continuous one with
    /// `λ̃ = λ K` as `Δt → 0`.
    Discrete,
}

impl LambdaConvention {
    /// Convert a value in this convention to the `λ̃` used by the closed forms.
    pub fn to_continuous(self, value: f64, spec: &IsotropicOUSpec) -> f64 {
        match self {
            LambdaConvention::Continuous => value,
            LambdaConvention::Discrete => value * spec.snapshots as f64,
        }
    }
}

/// Eigen-structure of `P = ∫ m_t m_tᵀ dt`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PSpectrum {
    pub p: DMatrix<f64>,
    /// Descending.
    pub gammas: DVector<f64>,
    /// Columns are the eigenvectors `u_i`.
    pub u: DMatrix<f64>,
}

impl PSpectrum {
    /// Numerical rank: eigenvalues above `tol · max(γ_1, tiny)`.
    pub fn rank(&self, tol: f64) -> usize {
        let top = self.gammas.get(0).copied().unwrap_or(0.0);
        if top <= 0.0 {
            return 0;
        }
        self.gammas.iter().filter(|&&g| g > tol * top).count()
    }
}

pub const RANK_TOL: f64 = 1e-10;

pub fn compute_p(spec: &IsotropicOUSpec) -> PSpectrum {
    let d = spec.dim();
    let cfg = QuadConfig::default();
    let flat = integrate(
        |t| {
            let m = spec.mean_at(t);
            let outer = &m * m.transpose();
            DVector::from_column_slice(outer.as_slice())
        },
        0.0,
        spec.horizon,
        cfg,
    );
    let p = symmetrize(&DMatrix::from_column_slice(d, d, flat.as_slice()));
    let (gammas, u) = sym_eigen_desc(&p);
    let gammas = gammas.map(|g| g.max(0.0));
    PSpectrum { p, gammas, u }
}

/// Time integrals of the covariance weights appearing in the loss.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct NoiseIntegrals {
    /// `∫ σ⁴/ξ dt`
    pub q: f64,
    /// `∫ σ²/ξ dt`
    pub r: f64,
    /// `∫ 1/ξ dt`, weight of the constant diffusion-mismatch term.
    pub s: f64,
}

pub fn noise_integrals(spec: &IsotropicOUSpec, eps: f64) -> NoiseIntegrals {
    let cfg = QuadConfig::default();
    let xi = |t: f64| {
        let v = spec.var_at(t);
        (eps * eps / 16.0 + v * v).sqrt()
    };
    let v = integrate(
        |t| {
            let s2 = spec.var_at(t);
            let x = xi(t);
            DVector::from_vec(vec![s2 * s2 / x, s2 / x, 1.0 / x])
        },
        0.0,
        spec.horizon,
        cfg,
    );
    NoiseIntegrals { q: v[0], r: v[1], s: v[2] }
}

/// Continuous-time loss for isotropic data, evaluated with the closed-form
/// covariance integrals `q`, `r` and `s`.
pub fn continuous_loss(
    omega_hat: &DMatrix<f64>,
    d_hat: &DMatrix<f64>,
    spec: &IsotropicOUSpec,
    lambda: f64,
    eps: f64,
) -> f64 {
    let ps = compute_p(spec);
    let ni = noise_integrals(spec, eps);
    continuous_loss_with(omega_hat, d_hat, spec, &ps, &ni, lambda * spec.horizon)
}

/// Same as [`continuous_loss`] with precomputed integrals and `λ̃ = λT`.
pub fn continuous_loss_with(
    omega_hat: &DMatrix<f64>,
    d_hat: &DMatrix<f64>,
    spec: &IsotropicOUSpec,
    ps: &PSpectrum,
    ni: &NoiseIntegrals,
    lambda_tilde: f64,
) -> f64 {
    let d = spec.dim();
    let id = DMatrix::<f64>::identity(d, d);
    let c = omega_hat - spec.omega();
    let s = omega_hat + omega_hat.transpose() - &id * (2.0 * spec.omega_s);
    let dd = d_hat - &id * spec.diffusion;
    (c.transpose() * &c * &ps.p).trace()
        + 0.25 * ni.q * s.norm_squared()
        + ni.r * linalg::frob_dot(&s, &dd)
        + ni.s * dd.norm_squared()
        + lambda_tilde * omega_hat.norm_squared()
}

/// Gradient of [`continuous_loss_with`] with respect to `omega_hat`.
pub fn continuous_loss_gradient(
    omega_hat: &DMatrix<f64>,
    d_hat: &DMatrix<f64>,
    spec: &IsotropicOUSpec,
    ps: &PSpectrum,
    ni: &NoiseIntegrals,
    lambda_tilde: f64,
) -> DMatrix<f64> {
    let d = spec.dim();
    let id = DMatrix::<f64>::identity(d, d);
    let c = omega_hat - spec.omega();
    let s = omega_hat + omega_hat.transpose() - &id * (2.0 * spec.omega_s);
    let dd = d_hat - &id * spec.diffusion;
    &c * &ps.p * 2.0 + s * ni.q + dd * (2.0 * ni.r) + omega_hat * (2.0 * lambda_tilde)
}

/// Continuous-time loss for arbitrary OU data by time quadrature over the
/// eigenpairs of `Σ_t`.
pub fn continuous_loss_general(
    omega_hat: &DMatrix<f64>,
    d_hat: &DMatrix<f64>,
    params: &OUParams,
    horizon: f64,
    lambda: f64,
    eps: f64,
) -> Result<f64> {
    let c = omega_hat - &params.omega;
    let dd = (d_hat - &params.diffusion) * 2.0;
    // Evaluate the integrand on a fixed grid first so errors surface early.
    ou_propagate(params, horizon)?;
    let integrand = |t: f64| -> f64 {
        let state = ou_propagate(params, t).expect("propagation checked at horizon");
        let m = &state.mean;
        let mean_term = (&c * m).norm_squared();
        let (sig2, w) = sym_eigen_desc(&state.cov);
        let xi = sig2.map(|s| (eps * eps / 16.0 + s * s).sqrt());
        let d = sig2.len();
        let ct = w.transpose() * &c * &w;
        let dw = w.transpose() * &dd * &w;
        let mut acc = 0.0;
        for i in 0..d {
            for p in 0..d {
                let inner = sig2[p] * ct[(i, p)] + sig2[i] * ct[(p, i)] + dw[(i, p)];
                acc += xi[i] / (xi[i] + xi[p]).powi(2) * inner * inner;
            }
        }
        mean_term + acc
    };
    let value = integrate_scalar(integrand, 0.0, horizon, QuadConfig::default());
    Ok(value + lambda * horizon * omega_hat.norm_squared())
}

/// Coefficients `c_ij` of the regularised minimiser in the eigenbasis of `P`.
fn c_coefficients(
    gammas: &DVector<f64>,
    q: f64,
    lambda_tilde: f64,
    eta: &DMatrix<f64>,
    omega: &DMatrix<f64>,
) -> DMatrix<f64> {
    let d = gammas.len();
    let qt_inv = 1.0 / (q + lambda_tilde);
    let l_inv = 1.0 / lambda_tilde;
    let gp = 0.5 * (l_inv + qt_inv);
    DMatrix::from_fn(d, d, |i, j| {
        let (gi, gj) = (gammas[i], gammas[j]);
        let num = lambda_tilde * qt_inv * eta[(i, j)] * (1.0 + gi * l_inv) + omega[(i, j)] * (1.0 + gi * qt_inv);
        let den = qt_inv * l_inv * gi * gj + gp * (gi + gj) + 1.0;
        num / den
    })
}

/// Closed-form minimiser of the regularised continuous loss, `λ̃ = λT > 0`.
pub fn analytic_minimizer(
    spec: &IsotropicOUSpec,
    lambda_tilde: f64,
    d_hat: &DMatrix<f64>,
    eps: f64,
) -> Result<DMatrix<f64>> {
    let ps = compute_p(spec);
    let ni = noise_integrals(spec, eps);
    analytic_minimizer_with(spec, &ps, &ni, lambda_tilde, d_hat)
}

pub fn analytic_minimizer_with(
    spec: &IsotropicOUSpec,
    ps: &PSpectrum,
    ni: &NoiseIntegrals,
    lambda_tilde: f64,
    d_hat: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    if !(lambda_tilde > 0.0) {
        return Err(PfiError::InvalidParameter(
            "analytic minimiser needs lambda > 0; use no_regularization_family".into(),
        ));
    }
    let d = spec.dim();
    let id = DMatrix::<f64>::identity(d, d);
    let y = &id * spec.omega_s + (d_hat - &id * spec.diffusion) * (ni.r / lambda_tilde);
    let eta = ps.u.transpose() * y * &ps.u;
    let omega = ps.u.transpose() * &spec.omega_a * &ps.u;
    let c = c_coefficients(&ps.gammas, ni.q, lambda_tilde, &eta, &omega);
    Ok(spec.omega() - &ps.u * c * ps.u.transpose())
}

/// Thresholds for the validity regime of the projector approximation.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ApproxRegime {
    /// Require `λ̃ / q` below this.
    pub max_lambda_over_q: f64,
    /// Require every eigenvalue of P to sit at least this factor away from
    /// λ̃ on either side: `max(γ_i/λ̃, λ̃/γ_i)` above this for every i.
    pub min_separation: f64,
}

impl Default for ApproxRegime {
    fn default() -> Self {
        Self { max_lambda_over_q: 0.1, min_separation: 10.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ApproxMinimizer {
    pub omega_hat: DMatrix<f64>,
    pub in_regime: bool,
    pub lambda_over_q: f64,
    pub min_separation: f64,
    /// Number of eigenvalues of P below λ̃ (dimension of the projector).
    pub projector_rank: usize,
}

/// `Ω - Q Ω_a Q` with `Q` projecting onto eigenvectors of `P` with `γ_i < λ̃`.
pub fn approx_minimizer(spec: &IsotropicOUSpec, lambda_tilde: f64, regime: ApproxRegime) -> ApproxMinimizer {
    let ps = compute_p(spec);
    let ni = noise_integrals(spec, 0.0);
    approx_minimizer_with(spec, &ps, &ni, lambda_tilde, regime)
}

pub fn approx_minimizer_with(
    spec: &IsotropicOUSpec,
    ps: &PSpectrum,
    ni: &NoiseIntegrals,
    lambda_tilde: f64,
    regime: ApproxRegime,
) -> ApproxMinimizer {
    let d = spec.dim();
    let mut q = DMatrix::zeros(d, d);
    let mut rank = 0;
    for i in 0..d {
        if ps.gammas[i] < lambda_tilde {
            let u = ps.u.column(i);
            q += u * u.transpose();
            rank += 1;
        }
    }
    let lambda_over_q = lambda_tilde / ni.q;
    let min_separation = ps
        .gammas
        .iter()
        .map(|&g| (g / lambda_tilde).max(lambda_tilde / g))
        .fold(f64::INFINITY, f64::min);
    let in_regime = lambda_over_q < regime.max_lambda_over_q && min_separation >= regime.min_separation;
    if !in_regime {
        log::warn!(
            "projector approximation outside its regime: lambda/q = {lambda_over_q:.3e}, eigenvalue separation = {min_separation:.3e}"
        );
    }
    let omega_hat = spec.omega() - &q * &spec.omega_a * &q;
    ApproxMinimizer { omega_hat, in_regime, lambda_over_q, min_separation, projector_rank: rank }
}

fn range_projector(ps: &PSpectrum, rank: usize) -> DMatrix<f64> {
    let u = ps.u.columns(0, rank);
    &u * u.transpose()
}

/// Sum over `i ≤ l, j ≤ d` of the diffusion-mismatch coupling, the part of
/// the vanishing-regularisation solution that lives on `range(P)`.
fn mismatch_coupling(ps: &PSpectrum, ni: &NoiseIntegrals, rank: usize, mu: &DMatrix<f64>) -> DMatrix<f64> {
    let d = ps.gammas.len();
    let q_inv = 1.0 / ni.q;
    let mut coef = DMatrix::zeros(d, d);
    for i in 0..rank {
        for j in 0..d {
            let (gi, gj) = (ps.gammas[i], ps.gammas[j]);
            coef[(i, j)] = 2.0 * gi * ni.r * q_inv * mu[(i, j)] / (2.0 * q_inv * gi * gj + gi + gj);
        }
    }
    &ps.u * coef * ps.u.transpose()
}

/// Limit of the regularised minimiser as `λ → 0⁺`.
pub fn limit_lambda_zero(spec: &IsotropicOUSpec, d_hat: &DMatrix<f64>, eps: f64) -> DMatrix<f64> {
    let ps = compute_p(spec);
    let ni = noise_integrals(spec, eps);
    limit_lambda_zero_with(spec, &ps, &ni, d_hat, RANK_TOL)
}

pub fn limit_lambda_zero_with(
    spec: &IsotropicOUSpec,
    ps: &PSpectrum,
    ni: &NoiseIntegrals,
    d_hat: &DMatrix<f64>,
    rank_tol: f64,
) -> DMatrix<f64> {
    let d = spec.dim();
    let id = DMatrix::<f64>::identity(d, d);
    let l = ps.rank(rank_tol);
    let comp = &id - range_projector(ps, l);
    let dd = d_hat - &id * spec.diffusion;
    let mu = ps.u.transpose() * &dd * &ps.u;
    spec.omega()
        - &comp * (&spec.omega_a + &dd * (ni.r / ni.q)) * &comp
        - mismatch_coupling(ps, ni, l, &mu)
}

/// Minimisers of the unregularised loss: `particular + K` for any skew `K`
/// with `K P = 0`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoRegularizationFamily {
    pub particular: DMatrix<f64>,
    pub rank: usize,
    /// Dimension of `{K skew : K P = 0}`, i.e. `(d-l)(d-l-1)/2`.
    pub kernel_dim: usize,
    /// True iff `rank(P) >= d - 1`.
    pub unique: bool,
    /// Orthonormal (Frobenius) basis of the kernel.
    pub kernel_basis: Vec<DMatrix<f64>>,
}

pub fn no_regularization_family(spec: &IsotropicOUSpec, d_hat: &DMatrix<f64>, eps: f64) -> NoRegularizationFamily {
    let ps = compute_p(spec);
    let ni = noise_integrals(spec, eps);
    no_regularization_family_with(spec, &ps, &ni, d_hat, RANK_TOL)
}

pub fn no_regularization_family_with(
    spec: &IsotropicOUSpec,
    ps: &PSpectrum,
    ni: &NoiseIntegrals,
    d_hat: &DMatrix<f64>,
    rank_tol: f64,
) -> NoRegularizationFamily {
    let d = spec.dim();
    let id = DMatrix::<f64>::identity(d, d);
    let l = ps.rank(rank_tol);
    let comp = &id - range_projector(ps, l);
    let dd = d_hat - &id * spec.diffusion;
    let mu = ps.u.transpose() * &dd * &ps.u;
    let particular =
        spec.omega() - &comp * &dd * &comp * (ni.r / ni.q) - mismatch_coupling(ps, ni, l, &mu);
    let mut kernel_basis = Vec::new();
    let scale = std::f64::consts::FRAC_1_SQRT_2;
    for a in l..d {
        for b in (a + 1)..d {
            let ua = ps.u.column(a);
            let ub = ps.u.column(b);
            kernel_basis.push((&ua * ub.transpose() - &ub * ua.transpose()) * scale);
        }
    }
    let kernel_dim = kernel_basis.len();
    NoRegularizationFamily { particular, rank: l, kernel_dim, unique: l + 1 >= d, kernel_basis }
}

/// GOE matrix: symmetric, diagonal variance 2, off-diagonal variance 1.
pub fn goe_sample(d: usize, rng: &mut Rng) -> DMatrix<f64> {
    let mut h = DMatrix::zeros(d, d);
    for i in 0..d {
        let z: f64 = StandardNormal.sample(rng);
        h[(i, i)] = z * std::f64::consts::SQRT_2;
        for j in 0..i {
            let z: f64 = StandardNormal.sample(rng);
            h[(i, j)] = z;
            h[(j, i)] = z;
        }
    }
    h
}

/// One draw of the first-order finite-sample correction `Ω̂₁`.
///
/// `Z = (Y + W/2) / (λ̃ √n Δt)`; see the crate README for why the sample
/// size enters with a positive square root.
pub fn finite_sample_correction(
    spec: &IsotropicOUSpec,
    lambda_tilde: f64,
    n: usize,
    dt: f64,
    rng: &mut Rng,
) -> Result<DMatrix<f64>> {
    let ps = compute_p(spec);
    let ni = noise_integrals(spec, 0.0);
    finite_sample_correction_with(spec, &ps, &ni, lambda_tilde, n, dt, rng)
}

pub fn finite_sample_correction_with(
    spec: &IsotropicOUSpec,
    ps: &PSpectrum,
    ni: &NoiseIntegrals,
    lambda_tilde: f64,
    n: usize,
    dt: f64,
    rng: &mut Rng,
) -> Result<DMatrix<f64>> {
    let d = spec.dim();
    if n <= d || !(dt > 0.0) || !(lambda_tilde > 0.0) {
        return Err(PfiError::InvalidParameter("need n > d, dt > 0 and lambda > 0".into()));
    }
    let s0 = spec.sigma0_sq;
    let st = spec.var_at(spec.horizon);
    let mt = spec.mean_at(spec.horizon);
    let h0 = rng::normal_vec(rng, d);
    let ht = rng::normal_vec(rng, d);
    let g0 = goe_sample(d, rng);
    let gt = goe_sample(d, rng);
    let y = &h0 * spec.m0.transpose() * s0.sqrt() - &ht * mt.transpose() * st.sqrt();
    let w = g0 * s0 - gt * st;
    let z = (y + w * 0.5) / (lambda_tilde * (n as f64).sqrt() * dt);
    let eta = ps.u.transpose() * symmetrize(&z) * &ps.u;
    let omega = ps.u.transpose() * skew_part(&z) * &ps.u;
    let c = c_coefficients(&ps.gammas, ni.q, lambda_tilde, &eta, &omega);
    Ok(-(&ps.u * c * ps.u.transpose()))
}

/// Monte-Carlo estimate of `E‖Ω̂₁‖²_F` over `n_draws` independent draws.
pub fn variance_estimate(
    spec: &IsotropicOUSpec,
    lambda_tilde: f64,
    n: usize,
    dt: f64,
    n_draws: usize,
    seed: u64,
) -> Result<f64> {
    let ps = compute_p(spec);
    let ni = noise_integrals(spec, 0.0);
    let draws = crate::par::map_range(n_draws, |k| {
        let mut rng = rng::stream(seed, Purpose::Theory, k as u64);
        finite_sample_correction_with(spec, &ps, &ni, lambda_tilde, n, dt, &mut rng).map(|m| m.norm_squared())
    });
    let values: Vec<f64> = draws.into_iter().collect::<Result<_>>()?;
    Ok(crate::par::kahan_sum(values) / n_draws as f64)
}

/// Random skew matrix `U - Uᵀ` (U uniform on [0,1]) with unit spectral radius
/// (zero for `d = 1`).
pub fn random_skew_matrix(d: usize, rng: &mut Rng) -> DMatrix<f64> {
    let u = DMatrix::from_fn(d, d, |_, _| rng.gen::<f64>());
    let a = &u - u.transpose();
    // Singular values of a skew matrix are the moduli of its eigenvalues.
    let (vals, _) = sym_eigen_desc(&(a.transpose() * &a));
    let radius = vals[0].max(0.0).sqrt();
    if radius > 0.0 {
        a / radius
    } else {
        a
    }
}

/// Random PSD matrix `W diag(e) Wᵀ / max(e)` with `W` the eigenbasis of
/// `U + Uᵀ` and `e` uniform on [0.9, 1].
pub fn random_symmetric_psd_matrix(d: usize, rng: &mut Rng) -> DMatrix<f64> {
    let u = DMatrix::from_fn(d, d, |_, _| rng.gen::<f64>());
    let (_, w) = sym_eigen_desc(&(&u + u.transpose()));
    let e = DVector::from_fn(d, |_, _| rng.gen_range(0.9..=1.0));
    let top = e.max();
    symmetrize(&(&w * DMatrix::from_diagonal(&(e / top)) * w.transpose()))
}

/// `‖Ω̂ - Ω‖²_F / ‖Ω‖²_F`.
pub fn relative_bias(omega_hat: &DMatrix<f64>, omega: &DMatrix<f64>) -> f64 {
    (omega_hat - omega).norm_squared() / omega.norm_squared()
}

/// Fraction of the true skew part recovered in the `k` leading eigendirections
/// of `P`: `‖Q_k Ω̂_a Q_k‖²_F / ‖Ω_a‖²_F`.
pub fn skew_recovery_fraction(omega_hat: &DMatrix<f64>, spec: &IsotropicOUSpec, ps: &PSpectrum, k: usize) -> f64 {
    let q = range_projector(ps, k);
    let a_hat = skew_part(omega_hat);
    (&q * a_hat * &q).norm_squared() / spec.omega_a.norm_squared()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TheoryReport {
    pub p: DMatrix<f64>,
    pub gammas: DVector<f64>,
    pub eigvecs: DMatrix<f64>,
    pub q: f64,
    pub r: f64,
    pub q_tilde: f64,
    pub lambda_tilde: f64,
    pub lambda_convention: LambdaConvention,
    pub gamma_plus: f64,
    pub gamma_minus: f64,
    pub omega_hat: DMatrix<f64>,
    /// Relative bias `‖Ω̂ - Ω‖²/‖Ω‖²`.
    pub bias: f64,
    /// `E‖Ω̂₁‖²_F` when a sample size was supplied.
    pub variance: Option<f64>,
}

/// Assemble a report for one regularisation value.
///
/// `lambda` is interpreted in `convention` and converted to `λ̃` internally.
pub fn theory_report(
    spec: &IsotropicOUSpec,
    lambda: f64,
    convention: LambdaConvention,
    d_hat: &DMatrix<f64>,
    eps: f64,
    variance: Option<(usize, usize, u64)>,
) -> Result<TheoryReport> {
    let ps = compute_p(spec);
    let ni = noise_integrals(spec, eps);
    let lt = convention.to_continuous(lambda, spec);
    let omega_hat = analytic_minimizer_with(spec, &ps, &ni, lt, d_hat)?;
    let variance = match variance {
        Some((n, draws, seed)) => Some(variance_estimate(spec, lt, n, spec.dt(), draws, seed)?),
        None => None,
    };
    let qt = ni.q + lt;
    Ok(TheoryReport {
        bias: relative_bias(&omega_hat, &spec.omega()),
        p: ps.p,
        gammas: ps.gammas,
        eigvecs: ps.u,
        q: ni.q,
        r: ni.r,
        q_tilde: qt,
        lambda_tilde: lt,
        lambda_convention: convention,
        gamma_plus: 0.5 * (1.0 / lt + 1.0 / qt),
        gamma_minus: 0.5 * (1.0 / lt - 1.0 / qt),
        omega_hat,
        variance,
    })
}
