//! Multivariate Gaussians and the matrix-normal-inverse-Wishart (MNIW) family.
//!
//! The MNIW distribution over `(F, Σ)` with `F` of shape `d × n` is
//!
//! ```text
//! Σ ~ IW(Ψ, ν),    F | Σ ~ MN(M0, Σ, V)      (vec F ~ N(vec M0, V ⊗ Σ))
//! ```
//!
//! It is conjugate to the linear-Gaussian regression `y = F x + e`,
//! `e ~ N(0, Σ)`.  In natural coordinates the posterior is obtained by adding
//! the transition statistics `(Σ y yᵀ, Σ y xᵀ, Σ x xᵀ, N)` to the prior, which is
//! what makes incremental and batch updates agree.

use std::ops::{Add, AddAssign, Mul, Sub};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};

use crate::error::{ensure_finite, Result, SolarError};
use crate::linalg::{self, cholesky, logdet, min_eigenvalue, mv_digamma, mv_lgamma, symmetrize};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// A multivariate normal stored together with the Cholesky factor of its covariance.
#[derive(Clone, Debug)]
pub struct Gaussian {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
}

impl Gaussian {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(SolarError::Dimension(format!(
                "gaussian mean has length {} but covariance is {}x{}",
                mean.len(),
                cov.nrows(),
                cov.ncols()
            )));
        }
        ensure_finite(mean.iter(), "gaussian mean")?;
        let cov = symmetrize(&cov);
        let chol = cholesky(&cov, "gaussian covariance")?;
        Ok(Self { mean, cov, chol })
    }

    pub fn standard(dim: usize) -> Self {
        Self::new(DVector::zeros(dim), DMatrix::identity(dim, dim)).expect("identity is PD")
    }

    /// Builds a Gaussian from information-form parameters `(J, h)`.
    pub fn from_information(precision: &DMatrix<f64>, linear: &DVector<f64>) -> Result<Self> {
        let chol = cholesky(precision, "gaussian precision")?;
        let cov = symmetrize(&chol.inverse());
        let mean = chol.solve(linear);
        Self::new(mean, cov)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    /// Lower Cholesky factor of the covariance.
    pub fn cov_factor(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn precision(&self) -> DMatrix<f64> {
        symmetrize(&self.chol.inverse())
    }

    pub fn log_det_cov(&self) -> f64 {
        logdet(&self.chol)
    }

    pub fn log_density(&self, x: &DVector<f64>) -> f64 {
        let diff = x - &self.mean;
        let z = self
            .chol
            .l_dirty()
            .solve_lower_triangular(&diff)
            .expect("factor has positive diagonal");
        -0.5 * (self.dim() as f64 * LN_2PI + self.log_det_cov() + z.norm_squared())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let z = DVector::from_fn(self.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        &self.mean + self.chol.l_dirty().lower_triangle() * z
    }

    /// Distribution of `A x + b` for `x` drawn from `self`.
    pub fn affine(&self, a: &DMatrix<f64>, b: &DVector<f64>) -> Result<Self> {
        if a.ncols() != self.dim() || a.nrows() != b.len() {
            return Err(SolarError::Dimension("affine map does not match gaussian".into()));
        }
        Self::new(a * &self.mean + b, a * &self.cov * a.transpose())
    }
}

/// `KL(q ‖ p)` between two Gaussians of equal dimension.
pub fn gaussian_kl(q: &Gaussian, p: &Gaussian) -> Result<f64> {
    if q.dim() != p.dim() {
        return Err(SolarError::Dimension(format!(
            "gaussian_kl: dimensions {} and {}",
            q.dim(),
            p.dim()
        )));
    }
    if q.mean == p.mean && q.cov == p.cov {
        return Ok(0.0);
    }
    let d = q.dim() as f64;
    let p_inv_q = p.chol.solve(&q.cov);
    let diff = &p.mean - &q.mean;
    let maha = diff.dot(&p.chol.solve(&diff));
    let kl = 0.5 * (p_inv_q.trace() + maha - d + p.log_det_cov() - q.log_det_cov());
    Ok(kl.max(0.0))
}

/// Sufficient statistics of a set of transitions `x → y` with `x = [s; a]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionStats {
    pub count: f64,
    /// `Σ x xᵀ`, `n × n`.
    pub sxx: DMatrix<f64>,
    /// `Σ y xᵀ`, `d × n` (the input–output cross moment, oriented like `F`).
    pub syx: DMatrix<f64>,
    /// `Σ y yᵀ`, `d × d`.
    pub syy: DMatrix<f64>,
}

impl TransitionStats {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self {
            count: 0.0,
            sxx: DMatrix::zeros(in_dim, in_dim),
            syx: DMatrix::zeros(out_dim, in_dim),
            syy: DMatrix::zeros(out_dim, out_dim),
        }
    }

    pub fn from_transitions(inputs: &[DVector<f64>], outputs: &[DVector<f64>]) -> Result<Self> {
        if inputs.len() != outputs.len() {
            return Err(SolarError::Dimension("transition inputs and outputs differ in length".into()));
        }
        let (Some(x0), Some(y0)) = (inputs.first(), outputs.first()) else {
            return Err(SolarError::Empty("no transitions".into()));
        };
        let mut stats = Self::zeros(y0.len(), x0.len());
        for (x, y) in inputs.iter().zip(outputs) {
            stats.add_transition(x, y)?;
        }
        Ok(stats)
    }

    pub fn add_transition(&mut self, x: &DVector<f64>, y: &DVector<f64>) -> Result<()> {
        if x.len() != self.in_dim() || y.len() != self.out_dim() {
            return Err(SolarError::Dimension("transition does not match statistics shape".into()));
        }
        self.count += 1.0;
        self.sxx += x * x.transpose();
        self.syx += y * x.transpose();
        self.syy += y * y.transpose();
        Ok(())
    }

    pub fn out_dim(&self) -> usize {
        self.syy.nrows()
    }

    pub fn in_dim(&self) -> usize {
        self.sxx.nrows()
    }

    pub fn scale(&self, factor: f64) -> Self {
        Self {
            count: self.count * factor,
            sxx: &self.sxx * factor,
            syx: &self.syx * factor,
            syy: &self.syy * factor,
        }
    }

    fn check_shape(&self, out_dim: usize, in_dim: usize) -> Result<()> {
        if self.out_dim() != out_dim
            || self.in_dim() != in_dim
            || self.syx.nrows() != out_dim
            || self.syx.ncols() != in_dim
        {
            return Err(SolarError::Dimension(format!(
                "statistics are {}x{} but parameters need {}x{}",
                self.out_dim(),
                self.in_dim(),
                out_dim,
                in_dim
            )));
        }
        Ok(())
    }

    fn check_psd(&self) -> Result<()> {
        ensure_finite(self.sxx.iter().chain(self.syx.iter()).chain(self.syy.iter()), "transition statistics")?;
        if self.count < 0.0 {
            return Err(SolarError::InvalidParameter("negative transition count".into()));
        }
        for (m, name) in [(&self.sxx, "Sxx"), (&self.syy, "Syy")] {
            let scale = 1.0 + m.abs().max();
            if linalg::max_abs_diff(m, &m.transpose()) > 1e-9 * scale || min_eigenvalue(m) < -1e-9 * scale {
                return Err(SolarError::NotPositiveDefinite(format!("{name} is indefinite")));
            }
        }
        Ok(())
    }

    fn is_empty(&self) -> bool {
        self.count == 0.0
            && self.sxx.iter().all(|v| *v == 0.0)
            && self.syx.iter().all(|v| *v == 0.0)
            && self.syy.iter().all(|v| *v == 0.0)
    }
}

impl Add for &TransitionStats {
    type Output = TransitionStats;

    fn add(self, rhs: &TransitionStats) -> TransitionStats {
        TransitionStats {
            count: self.count + rhs.count,
            sxx: &self.sxx + &rhs.sxx,
            syx: &self.syx + &rhs.syx,
            syy: &self.syy + &rhs.syy,
        }
    }
}

impl AddAssign<&TransitionStats> for TransitionStats {
    fn add_assign(&mut self, rhs: &TransitionStats) {
        self.count += rhs.count;
        self.sxx += &rhs.sxx;
        self.syx += &rhs.syx;
        self.syy += &rhs.syy;
    }
}

/// Natural parameters of an MNIW distribution, in the same layout as [`TransitionStats`].
///
/// `yy = Ψ + M0 V⁻¹ M0ᵀ`, `yx = M0 V⁻¹`, `xx = V⁻¹`, `count = ν + n + d + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct MniwNatural {
    pub yy: DMatrix<f64>,
    pub yx: DMatrix<f64>,
    pub xx: DMatrix<f64>,
    pub count: f64,
}

impl Add<&TransitionStats> for &MniwNatural {
    type Output = MniwNatural;

    fn add(self, s: &TransitionStats) -> MniwNatural {
        MniwNatural {
            yy: &self.yy + &s.syy,
            yx: &self.yx + &s.syx,
            xx: &self.xx + &s.sxx,
            count: self.count + s.count,
        }
    }
}

impl Add for &MniwNatural {
    type Output = MniwNatural;

    fn add(self, o: &MniwNatural) -> MniwNatural {
        MniwNatural { yy: &self.yy + &o.yy, yx: &self.yx + &o.yx, xx: &self.xx + &o.xx, count: self.count + o.count }
    }
}

impl Sub for &MniwNatural {
    type Output = MniwNatural;

    fn sub(self, o: &MniwNatural) -> MniwNatural {
        MniwNatural { yy: &self.yy - &o.yy, yx: &self.yx - &o.yx, xx: &self.xx - &o.xx, count: self.count - o.count }
    }
}

impl Mul<f64> for &MniwNatural {
    type Output = MniwNatural;

    fn mul(self, k: f64) -> MniwNatural {
        MniwNatural { yy: &self.yy * k, yx: &self.yx * k, xx: &self.xx * k, count: self.count * k }
    }
}

/// Expected sufficient statistics `E[Σ⁻¹]`, `E[Σ⁻¹F]`, `E[FᵀΣ⁻¹F]`, `E[log|Σ|]`.
#[derive(Clone, Debug)]
pub struct MniwExpectations {
    pub sigma_inv: DMatrix<f64>,
    pub sigma_inv_f: DMatrix<f64>,
    pub ft_sigma_inv_f: DMatrix<f64>,
    pub logdet_sigma: f64,
}

impl MniwExpectations {
    /// Point-mass expectations at fixed `(F, Σ)`.
    pub fn plug_in(f: &DMatrix<f64>, sigma: &DMatrix<f64>) -> Result<Self> {
        let chol = cholesky(sigma, "dynamics noise covariance")?;
        let sigma_inv = symmetrize(&chol.inverse());
        let sigma_inv_f = &sigma_inv * f;
        let ft_sigma_inv_f = symmetrize(&(f.transpose() * &sigma_inv_f));
        Ok(Self { sigma_inv, sigma_inv_f, ft_sigma_inv_f, logdet_sigma: logdet(&chol) })
    }

    /// `Σ_i E[log N(y_i; F x_i, Σ)]` for the given statistics.
    pub fn expected_loglik(&self, stats: &TransitionStats) -> f64 {
        let d = stats.out_dim() as f64;
        -0.5 * stats.count * (d * LN_2PI + self.logdet_sigma) - 0.5 * (&self.sigma_inv).component_mul(&stats.syy).sum()
            + self.sigma_inv_f.component_mul(&stats.syx).sum()
            - 0.5 * self.ft_sigma_inv_f.component_mul(&stats.sxx).sum()
    }
}

/// Standard parameters of a matrix-normal-inverse-Wishart distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct MniwParams {
    psi: DMatrix<f64>,
    nu: f64,
    m0: DMatrix<f64>,
    v: DMatrix<f64>,
}

impl MniwParams {
    pub fn new(psi: DMatrix<f64>, nu: f64, m0: DMatrix<f64>, v: DMatrix<f64>) -> Result<Self> {
        let d = psi.nrows();
        let n = v.nrows();
        if psi.ncols() != d || v.ncols() != n || m0.nrows() != d || m0.ncols() != n {
            return Err(SolarError::Dimension(format!(
                "MNIW shapes: Psi {}x{}, M0 {}x{}, V {}x{}",
                psi.nrows(),
                psi.ncols(),
                m0.nrows(),
                m0.ncols(),
                v.nrows(),
                v.ncols()
            )));
        }
        ensure_finite(m0.iter(), "MNIW mean")?;
        if !(nu > d as f64 - 1.0) || !nu.is_finite() {
            return Err(SolarError::InvalidParameter(format!("MNIW needs nu > {} but got {nu}", d as f64 - 1.0)));
        }
        let psi = symmetrize(&psi);
        let v = symmetrize(&v);
        cholesky(&psi, "MNIW scale Psi")?;
        cholesky(&v, "MNIW column covariance V")?;
        Ok(Self { psi, nu, m0, v })
    }

    /// Weakly informative default: `Ψ = I`, `ν = d + 2`, `M0 = 0`, `V = I`, so `E[Σ] = I`.
    pub fn default_prior(state_dim: usize, action_dim: usize) -> Self {
        let n = state_dim + action_dim;
        Self::new(
            DMatrix::identity(state_dim, state_dim),
            state_dim as f64 + 2.0,
            DMatrix::zeros(state_dim, n),
            DMatrix::identity(n, n),
        )
        .expect("default prior is valid")
    }

    pub fn psi(&self) -> &DMatrix<f64> {
        &self.psi
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn m0(&self) -> &DMatrix<f64> {
        &self.m0
    }

    pub fn v(&self) -> &DMatrix<f64> {
        &self.v
    }

    pub fn out_dim(&self) -> usize {
        self.psi.nrows()
    }

    pub fn in_dim(&self) -> usize {
        self.v.nrows()
    }

    pub fn natural(&self) -> MniwNatural {
        let v_inv = linalg::spd_inverse(&self.v, "V").expect("validated at construction");
        let yx = &self.m0 * &v_inv;
        let yy = symmetrize(&(&self.psi + &yx * self.m0.transpose()));
        MniwNatural {
            yy,
            yx,
            xx: v_inv,
            count: self.nu + (self.in_dim() + self.out_dim() + 1) as f64,
        }
    }

    pub fn from_natural(eta: &MniwNatural) -> Result<Self> {
        let d = eta.yy.nrows();
        let n = eta.xx.nrows();
        let xx_chol = cholesky(&eta.xx, "MNIW natural precision block")?;
        let v = symmetrize(&xx_chol.inverse());
        let m0 = xx_chol.solve(&eta.yx.transpose()).transpose();
        let psi = symmetrize(&(&eta.yy - &m0 * eta.yx.transpose()));
        let nu = eta.count - (n + d + 1) as f64;
        Self::new(psi, nu, m0, v)
    }

    pub fn expectations(&self) -> Result<MniwExpectations> {
        let d = self.out_dim();
        let psi_chol = cholesky(&self.psi, "Psi")?;
        let psi_inv = symmetrize(&psi_chol.inverse());
        let sigma_inv = &psi_inv * self.nu;
        let sigma_inv_f = &sigma_inv * &self.m0;
        let ft_sigma_inv_f = symmetrize(&(&self.v * d as f64 + self.m0.transpose() * &sigma_inv_f));
        let logdet_sigma = logdet(&psi_chol) - d as f64 * std::f64::consts::LN_2 - mv_digamma(self.nu / 2.0, d);
        Ok(MniwExpectations { sigma_inv, sigma_inv_f, ft_sigma_inv_f, logdet_sigma })
    }

    /// Log normaliser of the density in natural coordinates.
    pub fn log_partition(&self) -> Result<f64> {
        let d = self.out_dim() as f64;
        let n = self.in_dim() as f64;
        let psi_ld = logdet(&cholesky(&self.psi, "Psi")?);
        let v_ld = logdet(&cholesky(&self.v, "V")?);
        Ok(0.5 * self.nu * d * std::f64::consts::LN_2 + mv_lgamma(self.nu / 2.0, self.out_dim()) - 0.5 * self.nu * psi_ld
            + 0.5 * d * n * LN_2PI
            + 0.5 * d * v_ld)
    }

    /// Joint log density at `(F, Σ)`.
    pub fn log_density(&self, f: &DMatrix<f64>, sigma: &DMatrix<f64>) -> Result<f64> {
        let eta = self.natural();
        let e = MniwExpectations::plug_in(f, sigma)?;
        Ok(-0.5 * eta.yy.component_mul(&e.sigma_inv).sum() + eta.yx.component_mul(&e.sigma_inv_f).sum()
            - 0.5 * eta.xx.component_mul(&e.ft_sigma_inv_f).sum()
            - 0.5 * eta.count * e.logdet_sigma
            - self.log_partition()?)
    }

    /// `E[Σ] = Ψ / (ν − d − 1)`, defined only for `ν > d + 1`.
    pub fn expected_sigma(&self) -> Result<DMatrix<f64>> {
        let d = self.out_dim() as f64;
        if self.nu <= d + 1.0 {
            return Err(SolarError::MomentUndefined(format!(
                "E[Sigma] requires nu > {} but nu = {}",
                d + 1.0,
                self.nu
            )));
        }
        Ok(&self.psi / (self.nu - d - 1.0))
    }

    /// Posterior-mean point estimate `(M0, E[Σ])`, falling back to the mode `Ψ/(ν+d+1)`
    /// of the inverse-Wishart when the mean is undefined.
    pub fn point_estimate(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let sigma = self
            .expected_sigma()
            .unwrap_or_else(|_| &self.psi / (self.nu + self.out_dim() as f64 + 1.0));
        (self.m0.clone(), sigma)
    }
}

/// Exact conjugate posterior of `prior` after observing `stats`.
pub fn mniw_update(prior: &MniwParams, stats: &TransitionStats) -> Result<MniwParams> {
    stats.check_shape(prior.out_dim(), prior.in_dim())?;
    stats.check_psd()?;
    if stats.is_empty() {
        return Ok(prior.clone());
    }
    MniwParams::from_natural(&(&prior.natural() + stats))
}

/// `E_{(F,Σ)~params}[Σ_i log N(y_i; F x_i, Σ)]`.
pub fn mniw_expected_loglik(params: &MniwParams, stats: &TransitionStats) -> Result<f64> {
    stats.check_shape(params.out_dim(), params.in_dim())?;
    if stats.count == 0.0 && stats.is_empty() {
        return Ok(0.0);
    }
    Ok(params.expectations()?.expected_loglik(stats))
}

/// `KL(q ‖ p)` between two MNIW distributions of identical shape.
pub fn mniw_kl(q: &MniwParams, p: &MniwParams) -> Result<f64> {
    if q.out_dim() != p.out_dim() || q.in_dim() != p.in_dim() {
        return Err(SolarError::Dimension("mniw_kl: parameter shapes differ".into()));
    }
    if q == p {
        return Ok(0.0);
    }
    let delta = &q.natural() - &p.natural();
    let e = q.expectations()?;
    let kl = -0.5 * delta.yy.component_mul(&e.sigma_inv).sum() + delta.yx.component_mul(&e.sigma_inv_f).sum()
        - 0.5 * delta.xx.component_mul(&e.ft_sigma_inv_f).sum()
        - 0.5 * delta.count * e.logdet_sigma
        - q.log_partition()?
        + p.log_partition()?;
    Ok(kl.max(0.0))
}

/// Draws `(F, Σ)` using the Bartlett decomposition for the Wishart precision.
pub fn mniw_sample<R: Rng + ?Sized>(params: &MniwParams, rng: &mut R) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let d = params.out_dim();
    let n = params.in_dim();
    let psi_inv = linalg::spd_inverse(&params.psi, "Psi")?;
    let l_w = cholesky(&psi_inv, "Psi inverse")?.l();
    let mut a = DMatrix::zeros(d, d);
    for i in 0..d {
        let dof = params.nu - i as f64;
        let chi = ChiSquared::new(dof).map_err(|e| SolarError::InvalidParameter(format!("chi-square dof {dof}: {e}")))?;
        a[(i, i)] = chi.sample(rng).sqrt();
        for j in 0..i {
            a[(i, j)] = rng.sample::<f64, _>(StandardNormal);
        }
    }
    // Σ⁻¹ = (L_W A)(L_W A)ᵀ
    let la = &l_w * &a;
    let la_inv = la
        .solve_lower_triangular(&DMatrix::identity(d, d))
        .ok_or_else(|| SolarError::Singular("Bartlett factor".into()))?;
    let sigma = symmetrize(&(la_inv.transpose() * &la_inv));
    let l_sigma = cholesky(&sigma, "sampled Sigma")?.l();
    let l_v = cholesky(&params.v, "V")?.l();
    let z = DMatrix::from_fn(d, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let f = &params.m0 + l_sigma * z * l_v.transpose();
    Ok((f, sigma))
}
