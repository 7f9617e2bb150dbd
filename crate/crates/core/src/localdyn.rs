//! Message passing in the latent linear-Gaussian chain and variational EM for
//! per-time-step dynamics under a shared MNIW prior.
//!
//! Evidence enters as unnormalised Gaussian potentials `exp(hᵀs − ½ sᵀ diag(J) s)`.
//! Transitions enter through expected natural parameters, which for a point
//! estimate reduce to the usual `N(s'; F x, Σ)` factor.

use std::ops::AddAssign;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Result, SolarError};
use crate::lingauss::{mniw_kl, mniw_update, Gaussian, MniwExpectations, MniwParams, TransitionStats};
use crate::linalg::{cholesky, logdet, symmetrize, vstack};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Diagonal Gaussian evidence in information form.
#[derive(Clone, Debug, PartialEq)]
pub struct EvidencePotential {
    pub h: DVector<f64>,
    /// Diagonal of the precision; zero means no information.
    pub j: DVector<f64>,
}

impl EvidencePotential {
    pub fn new(h: DVector<f64>, j: DVector<f64>) -> Result<Self> {
        if h.len() != j.len() {
            return Err(SolarError::Dimension("potential h and J differ in length".into()));
        }
        ensure_finite(h.iter().chain(j.iter()), "evidence potential")?;
        if j.iter().any(|&v| v < 0.0) {
            return Err(SolarError::InvalidParameter("negative potential precision".into()));
        }
        Ok(Self { h, j })
    }

    pub fn from_mean_var(mean: &DVector<f64>, var: &DVector<f64>) -> Result<Self> {
        if var.iter().any(|&v| v <= 0.0) {
            return Err(SolarError::InvalidParameter("potential variance must be positive".into()));
        }
        let j = var.map(|v| 1.0 / v);
        Self::new(mean.component_mul(&j), j)
    }

    pub fn uninformative(dim: usize) -> Self {
        Self { h: DVector::zeros(dim), j: DVector::zeros(dim) }
    }

    pub fn dim(&self) -> usize {
        self.h.len()
    }

    /// `E_q[log ψ(s)]` for `s ~ N(mean, cov)`.
    pub fn expected_log(&self, mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
        let mut v = self.h.dot(mean);
        for i in 0..self.dim() {
            v -= 0.5 * self.j[i] * (cov[(i, i)] + mean[i] * mean[i]);
        }
        v
    }
}

/// One time step of the local dynamics.
#[derive(Clone, Debug, PartialEq)]
pub struct DynStep {
    pub f: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
    /// The MNIW posterior that `f` and `sigma` summarise, when available.
    pub posterior: Option<MniwParams>,
}

/// Time-varying linear-Gaussian dynamics `s_{t+1} ~ N(F_t [s_t; a_t], Σ_t)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TvlgDynamics {
    pub steps: Vec<DynStep>,
    state_dim: usize,
    action_dim: usize,
}

impl TvlgDynamics {
    pub fn new(steps: Vec<DynStep>, state_dim: usize, action_dim: usize) -> Result<Self> {
        for (t, s) in steps.iter().enumerate() {
            if s.f.nrows() != state_dim || s.f.ncols() != state_dim + action_dim {
                return Err(SolarError::Dimension(format!("dynamics step {t}: F is {}x{}", s.f.nrows(), s.f.ncols())));
            }
            if s.sigma.nrows() != state_dim || s.sigma.ncols() != state_dim {
                return Err(SolarError::Dimension(format!("dynamics step {t}: Sigma has wrong shape")));
            }
            cholesky(&s.sigma, "dynamics noise")?;
        }
        Ok(Self { steps, state_dim, action_dim })
    }

    pub fn time_invariant(f: &DMatrix<f64>, sigma: &DMatrix<f64>, transitions: usize) -> Result<Self> {
        let d = f.nrows();
        let step = DynStep { f: f.clone(), sigma: sigma.clone(), posterior: None };
        Self::new(vec![step; transitions], d, f.ncols().saturating_sub(d))
    }

    /// Point estimates taken as posterior means.
    pub fn from_posteriors(posteriors: Vec<MniwParams>) -> Result<Self> {
        let first = posteriors.first().ok_or_else(|| SolarError::Empty("no dynamics posteriors".into()))?;
        let (d, n) = (first.out_dim(), first.in_dim());
        let steps = posteriors
            .into_iter()
            .map(|p| {
                let (f, sigma) = p.point_estimate();
                DynStep { f, sigma, posterior: Some(p) }
            })
            .collect();
        Self::new(steps, d, n - d)
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    /// Number of transitions (`T − 1`).
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Expected natural parameters of step `t`, falling back to the point estimate.
    pub fn expectations(&self, t: usize) -> Result<MniwExpectations> {
        let step = &self.steps[t];
        match &step.posterior {
            Some(p) => p.expectations(),
            None => MniwExpectations::plug_in(&step.f, &step.sigma),
        }
    }

    pub fn all_expectations(&self) -> Result<Vec<MniwExpectations>> {
        (0..self.len()).map(|t| self.expectations(t)).collect()
    }

    /// Mean of the next state.
    pub fn predict(&self, t: usize, s: &DVector<f64>, a: &DVector<f64>) -> DVector<f64> {
        &self.steps[t].f * vstack(s, a)
    }
}

/// Blocks of the expected transition factor
/// `−½ s'ᵀ P s' + s'ᵀ (Lss s + Lsa a) − ½ [s;a]ᵀ A [s;a] − ½ E log|Σ|`.
struct PairBlocks {
    p: DMatrix<f64>,
    lss: DMatrix<f64>,
    lsa: DMatrix<f64>,
    ass: DMatrix<f64>,
    asa: DMatrix<f64>,
    aaa: DMatrix<f64>,
    logdet: f64,
}

impl PairBlocks {
    fn new(e: &MniwExpectations, d: usize) -> Result<Self> {
        let n = e.sigma_inv_f.ncols();
        if e.sigma_inv.nrows() != d || n < d {
            return Err(SolarError::Dimension("dynamics do not match latent dimension".into()));
        }
        let m = n - d;
        Ok(Self {
            p: e.sigma_inv.clone(),
            lss: e.sigma_inv_f.columns(0, d).into_owned(),
            lsa: e.sigma_inv_f.columns(d, m).into_owned(),
            ass: e.ft_sigma_inv_f.view((0, 0), (d, d)).into_owned(),
            asa: e.ft_sigma_inv_f.view((0, d), (d, m)).into_owned(),
            aaa: e.ft_sigma_inv_f.view((d, d), (m, m)).into_owned(),
            logdet: e.logdet_sigma,
        })
    }
}

/// Quantities from one forward step that the backward pass and gradient code reuse.
#[derive(Clone, Debug)]
struct ForwardStep {
    m_chol: Cholesky<f64, Dyn>,
    lss: DMatrix<f64>,
    gain: DMatrix<f64>,
    offset: DVector<f64>,
}

/// Filtered belief in information form.
#[derive(Clone, Debug)]
pub struct Belief {
    pub precision: DMatrix<f64>,
    pub linear: DVector<f64>,
    /// Log normaliser of the unnormalised forward message.
    log_c: f64,
    steps: usize,
}

impl Belief {
    /// Standard-normal prior fused with the first potential.
    pub fn initial(potential: &EvidencePotential) -> Self {
        let d = potential.dim();
        Self {
            precision: DMatrix::identity(d, d) + DMatrix::from_diagonal(&potential.j),
            linear: potential.h.clone(),
            log_c: -0.5 * d as f64 * LN_2PI,
            steps: 1,
        }
    }

    pub fn dim(&self) -> usize {
        self.linear.len()
    }

    /// Number of observations absorbed so far.
    pub fn len(&self) -> usize {
        self.steps
    }

    pub fn is_empty(&self) -> bool {
        self.steps == 0
    }

    pub fn gaussian(&self) -> Result<Gaussian> {
        Gaussian::from_information(&self.precision, &self.linear)
    }

    pub fn mean(&self) -> Result<DVector<f64>> {
        Ok(cholesky(&self.precision, "belief precision")?.solve(&self.linear))
    }

    fn advance(&self, e: &MniwExpectations, action: &DVector<f64>, next: &EvidencePotential) -> Result<(Self, ForwardStep)> {
        let d = self.dim();
        if next.dim() != d {
            return Err(SolarError::Dimension("potential does not match belief".into()));
        }
        let b = PairBlocks::new(e, d)?;
        if action.len() != b.lsa.ncols() {
            return Err(SolarError::Dimension("action does not match dynamics".into()));
        }
        let m = symmetrize(&(&self.precision + &b.ass));
        let m_chol = cholesky(&m, "forward message precision")?;
        let b0 = &self.linear - &b.asa * action;
        let offset = m_chol.solve(&b0);
        let gain = m_chol.solve(&b.lss.transpose());
        let precision = symmetrize(&(&b.p - &b.lss * &gain)) + DMatrix::from_diagonal(&next.j);
        let linear = &b.lsa * action + &b.lss * &offset + &next.h;
        let log_c = self.log_c - 0.5 * action.dot(&(&b.aaa * action)) - 0.5 * b.logdet + 0.5 * b0.dot(&offset)
            - 0.5 * logdet(&m_chol);
        let belief = Self { precision, linear, log_c, steps: self.steps + 1 };
        Ok((belief, ForwardStep { m_chol, lss: b.lss, gain, offset }))
    }

    /// One filtering step through transition `t` of `dynamics`.
    pub fn update(
        &self,
        dynamics: &TvlgDynamics,
        t: usize,
        action: &DVector<f64>,
        potential: &EvidencePotential,
    ) -> Result<Self> {
        if t >= dynamics.len() {
            return Err(SolarError::Dimension(format!("no dynamics for transition {t}")));
        }
        Ok(self.advance(&dynamics.expectations(t)?, action, potential)?.0)
    }

    /// `log ∫ α(s) ds` of the forward message.
    fn log_normalizer(&self) -> Result<(f64, Cholesky<f64, Dyn>)> {
        let chol = cholesky(&self.precision, "final message precision")?;
        let mean = chol.solve(&self.linear);
        let lz = self.log_c + 0.5 * self.linear.dot(&mean) + 0.5 * self.dim() as f64 * LN_2PI - 0.5 * logdet(&chol);
        Ok((lz, chol))
    }
}

/// Anything that maps a raw observation to latent evidence.
pub trait PotentialEncoder: Sync {
    fn latent_dim(&self) -> usize;
    fn encode(&self, observation: &[f64]) -> Result<EvidencePotential>;
}

/// Forward Kalman filter over a history of `t` potentials and `t − 1` actions.
pub fn filter_belief(
    dynamics: &TvlgDynamics,
    potentials: &[EvidencePotential],
    actions: &[DVector<f64>],
) -> Result<Belief> {
    let first = potentials.first().ok_or_else(|| SolarError::Empty("no observations to filter".into()))?;
    if actions.len() + 1 != potentials.len() {
        return Err(SolarError::Dimension(format!(
            "filtering needs one fewer action than observations, got {} and {}",
            actions.len(),
            potentials.len()
        )));
    }
    let mut belief = Belief::initial(first);
    for (t, (a, p)) in actions.iter().zip(&potentials[1..]).enumerate() {
        belief = belief.update(dynamics, t, a, p)?;
    }
    Ok(belief)
}

/// Smoothed marginals and pairwise moments of one trajectory.
#[derive(Clone, Debug)]
pub struct SmoothedPosterior {
    pub means: Vec<DVector<f64>>,
    pub covs: Vec<DMatrix<f64>>,
    /// `Cov(s_t, s_{t+1})`.
    pub cross: Vec<DMatrix<f64>>,
    /// Log partition function of `p(s_1) Π ψ_t Π exp E[log p(s_{t+1} | s_t, a_t)]`.
    pub log_z: f64,
    actions: Vec<DVector<f64>>,
    forward: Vec<ForwardStep>,
    final_chol: Cholesky<f64, Dyn>,
}

impl SmoothedPosterior {
    pub fn horizon(&self) -> usize {
        self.means.len()
    }

    pub fn marginal(&self, t: usize) -> Result<Gaussian> {
        Gaussian::new(self.means[t].clone(), self.covs[t].clone())
    }

    /// Backward-conditional gains `G_t` with `E[s_t | s_{t+1}] = G_t s_{t+1} + g_t`.
    pub fn gain(&self, t: usize) -> &DMatrix<f64> {
        &self.forward[t].gain
    }

    /// Expected sufficient statistics of transition `t`.
    pub fn pair_stats(&self, t: usize) -> TransitionStats {
        let (mu, mu_next, a) = (&self.means[t], &self.means[t + 1], &self.actions[t]);
        let d = mu.len();
        let m = a.len();
        let x = vstack(mu, a);
        let mut sxx = &x * x.transpose();
        sxx.view_mut((0, 0), (d, d)).add_assign(&self.covs[t]);
        let mut syx = mu_next * x.transpose();
        syx.view_mut((0, 0), (d, d)).add_assign(&self.cross[t].transpose());
        let syy = &self.covs[t + 1] + mu_next * mu_next.transpose();
        debug_assert_eq!(sxx.ncols(), d + m);
        TransitionStats { count: 1.0, sxx: symmetrize(&sxx), syx, syy: symmetrize(&syy) }
    }

    pub fn total_stats(&self) -> Option<TransitionStats> {
        let mut iter = (0..self.horizon() - 1).map(|t| self.pair_stats(t));
        let mut acc = iter.next()?;
        for s in iter {
            acc += &s;
        }
        Some(acc)
    }

    /// Applies the inverse of the joint precision of `(s_1, …, s_T)` to a stacked vector.
    pub fn solve_precision(&self, rhs: &[DVector<f64>]) -> Vec<DVector<f64>> {
        let t_len = self.horizon();
        let mut b = Vec::with_capacity(t_len);
        let mut carry = rhs[0].clone();
        for t in 0..t_len - 1 {
            let step = &self.forward[t];
            let next = &rhs[t + 1] + &step.lss * step.m_chol.solve(&carry);
            b.push(carry);
            carry = next;
        }
        let mut out = vec![DVector::zeros(0); t_len];
        out[t_len - 1] = self.final_chol.solve(&carry);
        for t in (0..t_len - 1).rev() {
            let step = &self.forward[t];
            out[t] = step.m_chol.solve(&(&b[t] + step.lss.transpose() * &out[t + 1]));
        }
        out
    }

    /// Pulls adjoints of the smoothed means and covariances back onto the
    /// potential parameters `(h_t, J_t)`.
    pub fn evidence_backprop(
        &self,
        grad_mean: &[DVector<f64>],
        grad_cov: &[DMatrix<f64>],
    ) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
        let t_len = self.horizon();
        let w = self.solve_precision(grad_mean);
        let mut grad_j: Vec<DVector<f64>> = (0..t_len).map(|t| -w[t].component_mul(&self.means[t])).collect();
        let diag_sandwich = |x: &DMatrix<f64>, a: &DMatrix<f64>| -> DVector<f64> {
            let xa = x * a;
            DVector::from_fn(x.nrows(), |i, _| xa.row(i).dot(&x.row(i)))
        };
        for k in 0..t_len {
            let g = symmetrize(&grad_cov[k]);
            if g.iter().all(|v| *v == 0.0) {
                continue;
            }
            // Σ_{t,k} for t ≤ k, walking down with Σ_{t-1,k} = G_{t-1} Σ_{t,k}.
            let mut x = self.covs[k].clone();
            for t in (0..=k).rev() {
                grad_j[t] -= diag_sandwich(&x, &g);
                if t > 0 {
                    x = &self.forward[t - 1].gain * x;
                }
            }
            // Σ_{t,k} = (G_k ⋯ G_{t-1} Σ_tt)ᵀ for t > k.
            let mut prod = self.forward.get(k).map(|f| f.gain.clone());
            for t in k + 1..t_len {
                let p = prod.expect("gain exists below the final step");
                let x = (&p * &self.covs[t]).transpose();
                grad_j[t] -= diag_sandwich(&x, &g);
                prod = self.forward.get(t).map(|f| p * &f.gain);
            }
        }
        (w, grad_j)
    }
}

/// Forward filtering and backward smoothing against given expected natural parameters.
pub fn smooth_with_expectations(
    potentials: &[EvidencePotential],
    actions: &[DVector<f64>],
    exps: &[MniwExpectations],
) -> Result<SmoothedPosterior> {
    let first = potentials.first().ok_or_else(|| SolarError::Empty("no potentials".into()))?;
    let t_len = potentials.len();
    if exps.len() < t_len - 1 {
        return Err(SolarError::Dimension(format!("need {} dynamics steps, got {}", t_len - 1, exps.len())));
    }
    if actions.len() < t_len - 1 {
        return Err(SolarError::Dimension(format!("need {} actions, got {}", t_len - 1, actions.len())));
    }
    let mut belief = Belief::initial(first);
    let mut forward = Vec::with_capacity(t_len - 1);
    for t in 0..t_len - 1 {
        let (next, step) = belief.advance(&exps[t], &actions[t], &potentials[t + 1])?;
        forward.push(step);
        belief = next;
    }
    let (log_z, final_chol) = belief.log_normalizer()?;
    let mut means = vec![DVector::zeros(0); t_len];
    let mut covs = vec![DMatrix::zeros(0, 0); t_len];
    let mut cross = Vec::with_capacity(t_len - 1);
    means[t_len - 1] = final_chol.solve(&belief.linear);
    covs[t_len - 1] = symmetrize(&final_chol.inverse());
    for t in (0..t_len - 1).rev() {
        let step = &forward[t];
        means[t] = &step.gain * &means[t + 1] + &step.offset;
        let c = symmetrize(&step.m_chol.inverse());
        let gs = &step.gain * &covs[t + 1];
        covs[t] = symmetrize(&(c + &gs * step.gain.transpose()));
        cross.push(gs);
    }
    cross.reverse();
    ensure_finite(means.iter().flat_map(|m| m.iter()), "smoothed means")?;
    Ok(SmoothedPosterior { means, covs, cross, log_z, actions: actions[..t_len - 1].to_vec(), forward, final_chol })
}

/// Kalman smoothing of one trajectory under `dynamics`.
pub fn e_step_smooth(
    potentials: &[EvidencePotential],
    actions: &[DVector<f64>],
    dynamics: &TvlgDynamics,
) -> Result<SmoothedPosterior> {
    smooth_with_expectations(potentials, actions, &dynamics.all_expectations()?)
}

/// Per-step conjugate updates of `prior` with statistics pooled over trajectories.
pub fn m_step_blr(smoothed: &[SmoothedPosterior], prior: &MniwParams) -> Result<TvlgDynamics> {
    let first = smoothed.first().ok_or_else(|| SolarError::Empty("m-step needs at least one trajectory".into()))?;
    let transitions = first.horizon() - 1;
    if smoothed.iter().any(|s| s.horizon() != first.horizon()) {
        return Err(SolarError::Dimension("trajectories in a batch must share a horizon".into()));
    }
    let posteriors = (0..transitions)
        .map(|t| {
            let mut stats = TransitionStats::zeros(prior.out_dim(), prior.in_dim());
            for s in smoothed {
                stats += &s.pair_stats(t);
            }
            mniw_update(prior, &stats)
        })
        .collect::<Result<Vec<_>>>()?;
    TvlgDynamics::from_posteriors(posteriors)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmConfig {
    pub max_iters: usize,
    pub rel_tol: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self { max_iters: 50, rel_tol: 1e-6 }
    }
}

#[derive(Clone, Debug)]
pub struct EmResult {
    pub dynamics: TvlgDynamics,
    pub smoothed: Vec<SmoothedPosterior>,
    /// Objective after each E-step.
    pub trace: Vec<f64>,
}

fn smooth_batch(
    potentials: &[Vec<EvidencePotential>],
    actions: &[Vec<DVector<f64>>],
    exps: &[MniwExpectations],
) -> Result<Vec<SmoothedPosterior>> {
    potentials
        .par_iter()
        .zip(actions.par_iter())
        .map(|(p, a)| smooth_with_expectations(p, a, exps))
        .collect()
}

/// Variational EM for local dynamics with the global factor as prior.
///
/// The tracked objective is `Σ_n log Z_n − Σ_t KL(q(F_t, Σ_t) ‖ prior)` with the
/// encoder potentials held fixed; coordinate ascent makes it non-decreasing.
pub fn infer_local_dynamics(
    potentials: &[Vec<EvidencePotential>],
    actions: &[Vec<DVector<f64>>],
    prior: &MniwParams,
    cfg: EmConfig,
) -> Result<EmResult> {
    let first = potentials.first().ok_or_else(|| SolarError::Empty("empty trajectory batch".into()))?;
    if potentials.len() != actions.len() {
        return Err(SolarError::Dimension("potentials and actions batches differ".into()));
    }
    let transitions = first.len().saturating_sub(1);
    if transitions == 0 {
        return Err(SolarError::InvalidParameter("trajectories need at least two steps".into()));
    }
    let mut dynamics = TvlgDynamics::from_posteriors(vec![prior.clone(); transitions])?;
    let mut trace = Vec::new();
    let mut smoothed;
    loop {
        smoothed = smooth_batch(potentials, actions, &dynamics.all_expectations()?)?;
        let mut objective: f64 = smoothed.iter().map(|s| s.log_z).sum();
        for step in &dynamics.steps {
            objective -= mniw_kl(step.posterior.as_ref().expect("EM keeps posteriors"), prior)?;
        }
        if !objective.is_finite() {
            return Err(SolarError::NonFinite("EM objective".into()));
        }
        let converged = trace
            .last()
            .is_some_and(|&prev: &f64| (objective - prev).abs() <= cfg.rel_tol * prev.abs().max(1.0));
        trace.push(objective);
        if converged || trace.len() >= cfg.max_iters.max(1) {
            break;
        }
        dynamics = m_step_blr(&smoothed, prior)?;
    }
    Ok(EmResult { dynamics, smoothed, trace })
}
