//! Linear-Gaussian policies, the maximum-entropy LQR backward pass and the
//! KL-constrained policy update solved by bisection on the dual variable.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::costmodel::StepCost;
use crate::envs::{run_episode, EnvConfig, Trajectory};
use crate::error::{ensure_finite, Result, SolarError};
use crate::lingauss::Gaussian;
use crate::linalg::{cholesky, clamp_eigenvalues, logdet, symmetrize};
use crate::localdyn::{Belief, PotentialEncoder, TvlgDynamics};

/// Eigenvalue floor applied to `Q_aa` before inversion.
pub const QAA_FLOOR: f64 = 1e-6;

/// Upper-bracket widening of the dual search when `lambda_max` is still infeasible.
const BRACKET_EXPANSIONS: usize = 12;
const BRACKET_GROWTH: f64 = 100.0;

/// `π(a_t | s_t) = N(K_t s_t + k_t, S_t)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearGaussianPolicy {
    pub gains: Vec<DMatrix<f64>>,
    pub offsets: Vec<DVector<f64>>,
    pub covs: Vec<DMatrix<f64>>,
}

impl LinearGaussianPolicy {
    pub fn new(gains: Vec<DMatrix<f64>>, offsets: Vec<DVector<f64>>, covs: Vec<DMatrix<f64>>) -> Result<Self> {
        if gains.len() != offsets.len() || gains.len() != covs.len() || gains.is_empty() {
            return Err(SolarError::Dimension("policy arrays must be non-empty and aligned".into()));
        }
        for (t, ((k, o), s)) in gains.iter().zip(&offsets).zip(&covs).enumerate() {
            if k.nrows() != o.len() || s.nrows() != o.len() || s.ncols() != o.len() {
                return Err(SolarError::Dimension(format!("policy step {t} has inconsistent shapes")));
            }
            ensure_finite(k.iter().chain(o.iter()), "policy")?;
            cholesky(s, "policy covariance")?;
        }
        Ok(Self { gains, offsets, covs })
    }

    /// Zero-mean exploration policy with covariance `sigma² I`.
    pub fn initial(horizon: usize, state_dim: usize, action_dim: usize, sigma: f64) -> Self {
        Self {
            gains: vec![DMatrix::zeros(action_dim, state_dim); horizon],
            offsets: vec![DVector::zeros(action_dim); horizon],
            covs: vec![DMatrix::identity(action_dim, action_dim) * (sigma * sigma); horizon],
        }
    }

    pub fn horizon(&self) -> usize {
        self.gains.len()
    }

    pub fn state_dim(&self) -> usize {
        self.gains[0].ncols()
    }

    pub fn action_dim(&self) -> usize {
        self.gains[0].nrows()
    }

    pub fn mean_action(&self, t: usize, s: &DVector<f64>) -> DVector<f64> {
        &self.gains[t] * s + &self.offsets[t]
    }

    pub fn sample_action<R: Rng + ?Sized>(&self, t: usize, s: &DVector<f64>, rng: &mut R) -> Result<DVector<f64>> {
        if self.covs[t].iter().all(|v| *v == 0.0) {
            return Ok(self.mean_action(t, s));
        }
        let l = cholesky(&self.covs[t], "policy covariance")?.l();
        let z = DVector::from_fn(self.action_dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        Ok(self.mean_action(t, s) + l * z)
    }
}

/// Second-order expansions of the Q and value functions at each step.
#[derive(Clone, Debug, Default)]
pub struct ValueExpansion {
    pub q_ss: Vec<DMatrix<f64>>,
    pub q_s: Vec<DVector<f64>>,
    pub q_aa: Vec<DMatrix<f64>>,
    pub q_a: Vec<DVector<f64>>,
    pub q_sa: Vec<DMatrix<f64>>,
    pub v_ss: Vec<DMatrix<f64>>,
    pub v_s: Vec<DVector<f64>>,
}

/// Backward Riccati-style recursion for the cost `Σ_t ½ xᵀ C_t x + c_tᵀ x` with
/// `x = [s; a]` and dynamics mean `F_t x`.
pub fn lqr_backward(dynamics: &TvlgDynamics, costs: &[StepCost]) -> Result<(LinearGaussianPolicy, ValueExpansion)> {
    let t_len = costs.len();
    if t_len == 0 {
        return Err(SolarError::Empty("no step costs".into()));
    }
    if dynamics.len() + 1 < t_len {
        return Err(SolarError::Dimension(format!(
            "{} step costs need {} transitions, got {}",
            t_len,
            t_len - 1,
            dynamics.len()
        )));
    }
    let ds = dynamics.state_dim();
    let da = dynamics.action_dim();
    let n = ds + da;
    for c in costs {
        if c.cxx.nrows() != n || c.cx.len() != n {
            return Err(SolarError::Dimension("step cost does not match dynamics".into()));
        }
    }
    let mut policy = LinearGaussianPolicy::initial(t_len, ds, da, 1.0);
    let mut ve = ValueExpansion::default();
    let mut v_ss = DMatrix::zeros(ds, ds);
    let mut v_s = DVector::zeros(ds);
    for t in (0..t_len).rev() {
        let mut qxx = costs[t].cxx.clone();
        let mut qx = costs[t].cx.clone();
        if t + 1 < t_len {
            let f = &dynamics.steps[t].f;
            qxx += f.transpose() * &v_ss * f;
            qx += f.transpose() * &v_s;
        }
        let qxx = symmetrize(&qxx);
        let q_ss = qxx.view((0, 0), (ds, ds)).into_owned();
        let q_sa = qxx.view((0, ds), (ds, da)).into_owned();
        let q_aa = clamp_eigenvalues(&qxx.view((ds, ds), (da, da)).into_owned(), QAA_FLOOR);
        let q_s = qx.rows(0, ds).into_owned();
        let q_a = qx.rows(ds, da).into_owned();
        ensure_finite(q_aa.iter().chain(q_sa.iter()).chain(q_a.iter()), "Q function")?;
        let chol = cholesky(&q_aa, "regularised Q_aa")?;
        let k_gain = -chol.solve(&q_sa.transpose());
        let k_off = -chol.solve(&q_a);
        let cov = symmetrize(&chol.inverse());
        v_ss = symmetrize(
            &(&q_ss + k_gain.transpose() * &q_aa * &k_gain + &q_sa * &k_gain + k_gain.transpose() * q_sa.transpose()),
        );
        v_s = &q_s + k_gain.transpose() * &q_aa * &k_off + k_gain.transpose() * &q_a + &q_sa * &k_off;
        policy.gains[t] = k_gain;
        policy.offsets[t] = k_off;
        policy.covs[t] = cov;
        ve.q_ss.push(q_ss);
        ve.q_s.push(q_s);
        ve.q_aa.push(q_aa);
        ve.q_a.push(q_a);
        ve.q_sa.push(q_sa);
        ve.v_ss.push(v_ss.clone());
        ve.v_s.push(v_s.clone());
    }
    for v in [&mut ve.q_ss, &mut ve.q_aa, &mut ve.q_sa, &mut ve.v_ss] {
        v.reverse();
    }
    for v in [&mut ve.q_s, &mut ve.q_a, &mut ve.v_s] {
        v.reverse();
    }
    Ok((policy, ve))
}

/// Gaussian state marginals under `policy` and the mean dynamics plus noise.
pub fn state_marginals(
    policy: &LinearGaussianPolicy,
    dynamics: &TvlgDynamics,
    init: &Gaussian,
) -> Result<Vec<(DVector<f64>, DMatrix<f64>)>> {
    let t_len = policy.horizon();
    let ds = init.dim();
    let mut out = Vec::with_capacity(t_len);
    let mut mu = init.mean().clone();
    let mut cov = init.cov().clone();
    for t in 0..t_len {
        out.push((mu.clone(), cov.clone()));
        if t + 1 == t_len {
            break;
        }
        let k = &policy.gains[t];
        let a_mu = policy.mean_action(t, &mu);
        let da = a_mu.len();
        let mut joint = DMatrix::zeros(ds + da, ds + da);
        joint.view_mut((0, 0), (ds, ds)).copy_from(&cov);
        let sk = &cov * k.transpose();
        joint.view_mut((0, ds), (ds, da)).copy_from(&sk);
        joint.view_mut((ds, 0), (da, ds)).copy_from(&sk.transpose());
        joint.view_mut((ds, ds), (da, da)).copy_from(&(k * &sk + &policy.covs[t]));
        let step = &dynamics.steps[t];
        mu = &step.f * crate::linalg::vstack(&mu, &a_mu);
        cov = symmetrize(&(&step.f * joint * step.f.transpose() + &step.sigma));
    }
    Ok(out)
}

/// `Σ_t E_{s_t ~ p_new}[KL(π_new(·|s_t) ‖ π_old(·|s_t))]`.
pub fn traj_kl(
    new: &LinearGaussianPolicy,
    old: &LinearGaussianPolicy,
    dynamics: &TvlgDynamics,
    init: &Gaussian,
) -> Result<f64> {
    if new.horizon() != old.horizon() || new.action_dim() != old.action_dim() || new.state_dim() != old.state_dim() {
        return Err(SolarError::Dimension("policies differ in shape".into()));
    }
    if new == old {
        return Ok(0.0);
    }
    let da = new.action_dim() as f64;
    let marginals = state_marginals(new, dynamics, init)?;
    let mut total = 0.0;
    for (t, (mu, cov)) in marginals.iter().enumerate() {
        let old_chol = cholesky(&old.covs[t], "old policy covariance")?;
        let new_chol = cholesky(&new.covs[t], "new policy covariance")?;
        let dk = &new.gains[t] - &old.gains[t];
        let delta = &dk * mu + &new.offsets[t] - &old.offsets[t];
        let w = old_chol.solve(&dk);
        let quad = delta.dot(&old_chol.solve(&delta)) + (dk.transpose() * w).component_mul(cov).sum();
        let tr = old_chol.solve(&new.covs[t]).trace();
        let kl = 0.5 * (tr - da + logdet(&old_chol) - logdet(&new_chol) + quad);
        total += kl.max(0.0);
    }
    Ok(total)
}

/// Step costs `ĉ_t / λ − log π̄_t(a | s)` up to constants.
pub fn augmented_costs(costs: &[StepCost], old: &LinearGaussianPolicy, lambda: f64) -> Result<Vec<StepCost>> {
    if costs.len() != old.horizon() {
        return Err(SolarError::Dimension("costs and policy horizon differ".into()));
    }
    costs
        .iter()
        .enumerate()
        .map(|(t, c)| {
            let ds = old.state_dim();
            let da = old.action_dim();
            let prec = cholesky(&old.covs[t], "old policy covariance")?.inverse();
            let mut d = DMatrix::zeros(da, ds + da);
            d.view_mut((0, 0), (da, ds)).copy_from(&(-&old.gains[t]));
            d.view_mut((0, ds), (da, da)).fill_with_identity();
            let mut out = c.scaled(1.0 / lambda);
            out.cxx += d.transpose() * &prec * &d;
            out.cxx = symmetrize(&out.cxx);
            out.cx -= d.transpose() * (&prec * &old.offsets[t]);
            Ok(out)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DualState {
    pub lambda: f64,
    pub epsilon: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub max_iters: usize,
    /// Relative tolerance on `|KL − ε|`.
    pub tol: f64,
}

impl DualState {
    pub fn new(epsilon: f64) -> Self {
        Self { lambda: 1.0, epsilon, lambda_min: 1e-4, lambda_max: 1e4, max_iters: 30, tol: 0.1 }
    }
}

#[derive(Clone, Debug)]
pub struct KlUpdate {
    pub policy: LinearGaussianPolicy,
    pub achieved_kl: f64,
    /// Dual variable of the returned solution; `None` when the constraint was inactive.
    pub lambda: Option<f64>,
    /// Set when the bracket was exhausted without meeting the tolerance.
    pub warning: bool,
    pub evaluations: usize,
}

/// KL-constrained LQR update around `old`.
pub fn kl_constrained_update(
    old: &LinearGaussianPolicy,
    dynamics: &TvlgDynamics,
    costs: &[StepCost],
    dual: DualState,
    init: &Gaussian,
) -> Result<KlUpdate> {
    if !(dual.epsilon > 0.0) || !(dual.lambda_min > 0.0) || dual.lambda_max <= dual.lambda_min {
        return Err(SolarError::InvalidParameter("invalid dual state".into()));
    }
    let (unconstrained, _) = lqr_backward(dynamics, costs)?;
    let kl_u = traj_kl(&unconstrained, old, dynamics, init)?;
    if kl_u <= dual.epsilon {
        return Ok(KlUpdate { policy: unconstrained, achieved_kl: kl_u, lambda: None, warning: false, evaluations: 1 });
    }
    let solve = |lambda: f64| -> Result<(LinearGaussianPolicy, f64)> {
        let (p, _) = lqr_backward(dynamics, &augmented_costs(costs, old, lambda)?)?;
        let kl = traj_kl(&p, old, dynamics, init)?;
        Ok((p, kl))
    };
    let within = |kl: f64| (kl - dual.epsilon).abs() <= dual.tol * dual.epsilon;
    let mut lo = dual.lambda_min.ln();
    let mut hi = dual.lambda_max.ln();
    let mut evaluations = 1;
    // Best feasible (KL ≤ ε) solution seen so far, which is the one at `hi`.
    let mut feasible: Option<(LinearGaussianPolicy, f64, f64)> = None;
    // Steep cost-to-go can keep the KL above ε at `lambda_max`; widen upwards.
    for _ in 0..BRACKET_EXPANSIONS {
        let (p, kl) = solve(hi.exp())?;
        evaluations += 1;
        if within(kl) {
            return Ok(KlUpdate { policy: p, achieved_kl: kl, lambda: Some(hi.exp()), warning: false, evaluations });
        }
        if kl < dual.epsilon {
            feasible = Some((p, kl, hi.exp()));
            break;
        }
        lo = hi;
        hi += BRACKET_GROWTH.ln();
    }
    let start = dual.lambda.ln().clamp(lo, hi);
    let mut x = start;
    for _ in 0..dual.max_iters {
        let lambda = x.exp();
        let (p, kl) = solve(lambda)?;
        evaluations += 1;
        if within(kl) {
            return Ok(KlUpdate { policy: p, achieved_kl: kl, lambda: Some(lambda), warning: false, evaluations });
        }
        if kl > dual.epsilon {
            lo = x;
        } else {
            hi = x;
            feasible = Some((p, kl, lambda));
        }
        x = 0.5 * (lo + hi);
    }
    let (policy, achieved_kl, lambda) = match feasible {
        Some(f) => f,
        None => {
            let (p, kl) = solve(hi.exp())?;
            evaluations += 1;
            (p, kl, hi.exp())
        }
    };
    log::warn!("KL bisection exhausted: achieved {achieved_kl:.4} for target {}", dual.epsilon);
    Ok(KlUpdate { policy, achieved_kl, lambda: Some(lambda), warning: true, evaluations })
}

/// Where the policy input comes from during a rollout.
#[derive(Clone, Copy)]
pub enum Observer<'a> {
    /// Mean of the latent belief filtered under `dynamics`.
    Latent { encoder: &'a dyn PotentialEncoder, dynamics: &'a TvlgDynamics },
    /// The observation vector itself.
    Direct,
    /// A zero input; only sensible for policies with zero gains.
    Blind,
}

/// Runs one episode with `a_t ~ N(K_t x_t + k_t, S_t)`, clipped to the action bounds.
pub fn rollout<R: Rng + ?Sized>(
    env: &EnvConfig,
    policy: &LinearGaussianPolicy,
    observer: Observer<'_>,
    rng: &mut R,
) -> Result<Trajectory> {
    if policy.horizon() < env.horizon {
        return Err(SolarError::Dimension(format!(
            "policy horizon {} shorter than episode {}",
            policy.horizon(),
            env.horizon
        )));
    }
    if policy.action_dim() != env.action_dim() {
        return Err(SolarError::Dimension("policy and environment action sizes differ".into()));
    }
    if let Observer::Latent { encoder, dynamics } = observer {
        if encoder.latent_dim() != policy.state_dim() || dynamics.state_dim() != policy.state_dim() {
            return Err(SolarError::Dimension("latent size differs from policy input".into()));
        }
    }
    let mut belief: Option<Belief> = None;
    let mut last_action: Option<DVector<f64>> = None;
    run_episode(env, rng, |t, obs, rng| {
        let x = match observer {
            Observer::Direct => DVector::from_column_slice(obs),
            Observer::Blind => DVector::zeros(policy.state_dim()),
            Observer::Latent { encoder, dynamics } => {
                let pot = encoder.encode(obs)?;
                let next = match (&belief, &last_action) {
                    (Some(b), Some(a)) => b.update(dynamics, t - 1, a, &pot)?,
                    _ => Belief::initial(&pot),
                };
                let mean = next.mean()?;
                belief = Some(next);
                mean
            }
        };
        if x.len() != policy.state_dim() {
            return Err(SolarError::Dimension("policy input has the wrong size".into()));
        }
        let a = env.clip_action(policy.sample_action(t, &x, rng)?.as_slice());
        last_action = Some(DVector::from_column_slice(&a));
        Ok(a)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_lqs(
        rng: &mut ChaCha8Rng,
        ds: usize,
        da: usize,
        t_len: usize,
    ) -> (TvlgDynamics, Vec<StepCost>, DMatrix<f64>, DMatrix<f64>) {
        let f = DMatrix::from_fn(ds, ds + da, |_, _| rng.random_range(-0.8..0.8));
        let sigma = DMatrix::identity(ds, ds) * 0.1;
        let a = DMatrix::from_fn(ds, ds, |_, _| rng.random_range(-1.0..1.0));
        let q = &a * a.transpose() + DMatrix::identity(ds, ds) * 0.1;
        let b = DMatrix::from_fn(da, da, |_, _| rng.random_range(-1.0..1.0));
        let r = &b * b.transpose() + DMatrix::identity(da, da) * 0.1;
        let mut cxx = DMatrix::zeros(ds + da, ds + da);
        cxx.view_mut((0, 0), (ds, ds)).copy_from(&q);
        cxx.view_mut((ds, ds), (da, da)).copy_from(&r);
        let cost = StepCost { cxx, cx: DVector::zeros(ds + da), c0: 0.0 };
        (
            TvlgDynamics::time_invariant(&f, &sigma, t_len - 1).unwrap(),
            vec![cost; t_len],
            q,
            r,
        )
    }

    /// Plain discrete Riccati iteration on `(A, B, Q, R)`.
    fn riccati_gains(f: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>, t_len: usize) -> Vec<DMatrix<f64>> {
        let ds = q.nrows();
        let da = r.nrows();
        let a = f.columns(0, ds).into_owned();
        let b = f.columns(ds, da).into_owned();
        let mut p = q.clone();
        let mut gains = vec![DMatrix::zeros(da, ds)];
        for _ in 1..t_len {
            let s = r + b.transpose() * &p * &b;
            let s_inv = s.try_inverse().unwrap();
            let k = -&s_inv * b.transpose() * &p * &a;
            p = q + a.transpose() * &p * &a - a.transpose() * &p * &b * &s_inv * b.transpose() * &p * &a;
            gains.push(k);
        }
        gains.reverse();
        gains
    }

    #[test]
    fn action_only_cost_gives_zero_gains() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (dynamics, _, _, _) = random_lqs(&mut rng, 2, 2, 10);
        let mut cxx = DMatrix::zeros(4, 4);
        cxx.view_mut((2, 2), (2, 2)).fill_with_identity();
        let costs = vec![StepCost { cxx: cxx * 2.0, cx: DVector::zeros(4), c0: 0.0 }; 10];
        let (p, _) = lqr_backward(&dynamics, &costs).unwrap();
        for t in 0..10 {
            assert!(p.gains[t].amax() < 1e-14);
            assert!(p.offsets[t].amax() < 1e-14);
        }
    }

    #[test]
    fn gains_match_riccati_iteration() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (ds, da) in [(1, 1), (3, 2), (4, 4)] {
            let (dynamics, costs, q, r) = random_lqs(&mut rng, ds, da, 50);
            let (p, _) = lqr_backward(&dynamics, &costs).unwrap();
            let oracle = riccati_gains(&dynamics.steps[0].f, &q, &r, 50);
            for t in 0..50 {
                let scale = oracle[t].amax().max(1e-12);
                assert!((&p.gains[t] - &oracle[t]).amax() / scale < 1e-8, "t={t}");
            }
        }
    }

    #[test]
    fn single_step_problem_has_closed_form_action() {
        let dynamics = TvlgDynamics::time_invariant(&DMatrix::identity(1, 2), &DMatrix::identity(1, 1), 0).unwrap();
        let cost = StepCost {
            cxx: DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 2.0]),
            cx: DVector::from_vec(vec![0.1, -0.8]),
            c0: 0.0,
        };
        let (p, _) = lqr_backward(&dynamics, &[cost]).unwrap();
        let s = DVector::from_element(1, 0.7);
        // argmin_a ½(2a² + 2·0.5·s·a) − 0.8a
        let expected = (0.8 - 0.5 * 0.7) / 2.0;
        assert!((p.mean_action(0, &s)[0] - expected).abs() < 1e-14);
        assert!((p.covs[0][(0, 0)] - 0.5).abs() < 1e-14);
    }

    #[test]
    fn traj_kl_of_identical_policies_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (dynamics, costs, _, _) = random_lqs(&mut rng, 2, 1, 5);
        let (p, _) = lqr_backward(&dynamics, &costs).unwrap();
        assert_eq!(traj_kl(&p, &p, &dynamics, &Gaussian::standard(2)).unwrap(), 0.0);
    }

    #[test]
    fn traj_kl_mean_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (dynamics, _, _, _) = random_lqs(&mut rng, 2, 2, 1);
        let old = LinearGaussianPolicy::initial(1, 2, 2, 0.5);
        let mut new = old.clone();
        new.offsets[0] = DVector::from_vec(vec![0.3, -0.1]);
        let kl = traj_kl(&new, &old, &dynamics, &Gaussian::standard(2)).unwrap();
        assert!((kl - 0.1 / (2.0 * 0.25)).abs() < 1e-14);
    }

    #[test]
    fn unconstrained_update_when_epsilon_is_large() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (dynamics, costs, _, _) = random_lqs(&mut rng, 2, 1, 8);
        let old = LinearGaussianPolicy::initial(8, 2, 1, 1.0);
        let up = kl_constrained_update(&old, &dynamics, &costs, DualState::new(1e12), &Gaussian::standard(2)).unwrap();
        assert_eq!(up.policy, lqr_backward(&dynamics, &costs).unwrap().0);
        assert!(up.lambda.is_none());
    }

    #[test]
    fn bisection_hits_the_target_and_recomputes_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let init = Gaussian::standard(3);
        let (mut dynamics, mut costs, _, _) = random_lqs(&mut rng, 3, 2, 10);
        for c in &mut costs {
            c.cx = DVector::from_fn(5, |_, _| rng.random_range(-1.0..1.0));
        }
        dynamics.steps[0].f[(0, 3)] += 0.5;
        let old = LinearGaussianPolicy::initial(10, 3, 2, 1.0);
        let up = kl_constrained_update(&old, &dynamics, &costs, DualState::new(1.0), &init).unwrap();
        assert!(!up.warning);
        assert!((up.achieved_kl - 1.0).abs() <= 0.1);
        let lambda = up.lambda.unwrap();
        let (again, _) = lqr_backward(&dynamics, &augmented_costs(&costs, &old, lambda).unwrap()).unwrap();
        assert_eq!(again, up.policy);
    }

    #[test]
    fn tiny_epsilon_keeps_the_old_policy() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let init = Gaussian::standard(2);
        let (dynamics, mut costs, _, _) = random_lqs(&mut rng, 2, 1, 6);
        for c in &mut costs {
            c.cx = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
        }
        let old = LinearGaussianPolicy::initial(6, 2, 1, 1.0);
        let up = kl_constrained_update(&old, &dynamics, &costs, DualState::new(1e-8), &init).unwrap();
        let marg = state_marginals(&up.policy, &dynamics, &init).unwrap();
        for (t, (mu, _)) in marg.iter().enumerate() {
            let diff = up.policy.mean_action(t, mu) - old.mean_action(t, mu);
            assert!(diff.amax() < 1e-3);
        }
    }

    #[test]
    fn achieved_kl_is_monotone_in_lambda() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let init = Gaussian::standard(2);
        let (dynamics, mut costs, _, _) = random_lqs(&mut rng, 2, 2, 8);
        for c in &mut costs {
            c.cx = DVector::from_fn(4, |_, _| rng.random_range(-1.0..1.0));
        }
        let old = LinearGaussianPolicy::initial(8, 2, 2, 0.7);
        let mut prev = f64::INFINITY;
        for i in 0..40 {
            let lambda = 10f64.powf(-4.0 + 0.2 * i as f64);
            let (p, _) = lqr_backward(&dynamics, &augmented_costs(&costs, &old, lambda).unwrap()).unwrap();
            let kl = traj_kl(&p, &old, &dynamics, &init).unwrap();
            assert!(kl <= prev * (1.0 + 1e-9) + 1e-12, "lambda {lambda}: {kl} > {prev}");
            prev = kl;
        }
    }

    #[test]
    fn traj_kl_matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (dynamics, costs, _, _) = random_lqs(&mut rng, 1, 1, 3);
        let (mut new, _) = lqr_backward(&dynamics, &costs).unwrap();
        new.offsets[1][0] = 0.4;
        let old = LinearGaussianPolicy::new(
            vec![DMatrix::from_element(1, 1, 0.2); 3],
            vec![DVector::from_element(1, -0.3); 3],
            vec![DMatrix::from_element(1, 1, 0.8); 3],
        )
        .unwrap();
        let init = Gaussian::new(DVector::from_element(1, 0.5), DMatrix::from_element(1, 1, 0.3)).unwrap();
        let exact = traj_kl(&new, &old, &dynamics, &init).unwrap();
        let n = 100_000;
        let f = &dynamics.steps[0].f;
        let noise = dynamics.steps[0].sigma[(0, 0)].sqrt();
        let samples: Vec<f64> = (0..n)
            .map(|_| {
                let mut s = init.sample(&mut rng);
                let mut total = 0.0;
                for t in 0..3 {
                    let a = new.sample_action(t, &s, &mut rng).unwrap();
                    let pn = Gaussian::new(new.mean_action(t, &s), new.covs[t].clone()).unwrap();
                    let po = Gaussian::new(old.mean_action(t, &s), old.covs[t].clone()).unwrap();
                    total += pn.log_density(&a) - po.log_density(&a);
                    let next = f * crate::linalg::vstack(&s, &a);
                    s = next + DVector::from_element(1, noise * rng.sample::<f64, _>(StandardNormal));
                }
                total
            })
            .collect();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        let se = (var / n as f64).sqrt();
        assert!((mean - exact).abs() < 3.0 * se, "mc {mean} exact {exact} se {se}");
    }

    fn nav_lqr_policy(env: &EnvConfig) -> LinearGaussianPolicy {
        let goal = env.goal.unwrap();
        let mut f = DMatrix::zeros(2, 4);
        f.view_mut((0, 0), (2, 2)).fill_with_identity();
        f.view_mut((0, 2), (2, 2)).copy_from(&(DMatrix::identity(2, 2) * crate::envs::DT));
        let dyn_ = TvlgDynamics::time_invariant(&f, &(DMatrix::identity(2, 2) * 1e-6), env.horizon - 1).unwrap();
        let cost = crate::costmodel::goal_state_cost(&DVector::from_vec(goal.to_vec()), 1.0, crate::envs::ACTION_WEIGHT)
            .unwrap()
            .step_cost(2);
        lqr_backward(&dyn_, &vec![cost; env.horizon]).unwrap().0
    }

    #[test]
    fn lqr_on_true_state_reaches_the_goal() {
        let env = EnvConfig::nav_fixed_goal().with_mode(crate::envs::ObsMode::State);
        let mut policy = nav_lqr_policy(&env);
        policy.covs.iter_mut().for_each(|c| c.fill(0.0));
        let mut r = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let tr = rollout(&env, &policy, Observer::Direct, &mut r).unwrap();
            assert!(tr.final_distance() < 0.1, "final distance {}", tr.final_distance());
        }
    }

    #[test]
    fn deterministic_policy_gives_identical_rollouts() {
        let env = EnvConfig { start: Some([-1.0, 1.5]), ..EnvConfig::nav_fixed_goal().with_mode(crate::envs::ObsMode::State) };
        let mut policy = nav_lqr_policy(&env);
        policy.covs.iter_mut().for_each(|c| c.fill(0.0));
        let a = rollout(&env, &policy, Observer::Direct, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = rollout(&env, &policy, Observer::Direct, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a.actions, b.actions);
        assert_eq!(a.true_states, b.true_states);
    }

    #[test]
    fn initial_policy_is_random_exploration() {
        let env = EnvConfig::nav_random_goal();
        let sigma = 0.5;
        let policy = LinearGaussianPolicy::initial(env.horizon, 4, 2, sigma);
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let actions: Vec<f64> = (0..40)
            .flat_map(|_| rollout(&env, &policy, Observer::Blind, &mut r).unwrap().actions.into_iter().flatten())
            .collect();
        let n = actions.len() as f64;
        let mean = actions.iter().sum::<f64>() / n;
        let sd = (actions.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 0.03 && (sd - sigma).abs() < 0.03, "mean {mean}, sd {sd}");
    }
}
