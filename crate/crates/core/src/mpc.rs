//! Cross-entropy-method planning through the mean of the latent dynamics,
//! executed in a receding-horizon loop.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::costmodel::{goal_state_cost, QuadraticCost};
use crate::ctrl::Observer;
use crate::envs::{run_episode, EnvConfig, EnvKind, ObsMode, Trajectory, ACTION_WEIGHT, DT};
use crate::error::{Result, SolarError};
use crate::localdyn::{Belief, TvlgDynamics};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CemConfig {
    pub horizon: usize,
    pub population: usize,
    pub elite_frac: f64,
    pub iterations: usize,
    /// Standard deviation of the initial sampling distribution.
    pub init_std: f64,
    /// Weight on the previous distribution when refitting (0 = plain refit).
    pub smoothing: f64,
    pub var_floor: f64,
}

impl Default for CemConfig {
    fn default() -> Self {
        Self { horizon: 10, population: 128, elite_frac: 0.1, iterations: 5, init_std: 1.0, smoothing: 0.0, var_floor: 1e-8 }
    }
}

impl CemConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.population == 0 || self.iterations == 0 {
            return Err(SolarError::Config("CEM horizon, population and iterations must be positive".into()));
        }
        if !(self.elite_frac > 0.0 && self.elite_frac <= 1.0) {
            return Err(SolarError::Config("elite fraction must lie in (0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.smoothing) || !(self.init_std > 0.0) || !(self.var_floor > 0.0) {
            return Err(SolarError::Config("invalid CEM smoothing, spread or floor".into()));
        }
        Ok(())
    }

    fn elites(&self) -> usize {
        ((self.population as f64 * self.elite_frac).round() as usize).clamp(1, self.population)
    }
}

#[derive(Clone, Debug)]
pub struct CemPlan {
    pub actions: Vec<DVector<f64>>,
    /// Score of the returned mean sequence.
    pub score: f64,
    /// Best sampled score after each iteration.
    pub best_scores: Vec<f64>,
}

/// Step costs indexed by absolute time; the last entry repeats past the end.
fn cost_at(costs: &[QuadraticCost], t: usize) -> &QuadraticCost {
    &costs[t.min(costs.len() - 1)]
}

/// `Σ_k ĉ_{t0+k+1}(s_{k+1}, a_k)` along the mean latent rollout.
pub fn score_sequence(
    s0: &DVector<f64>,
    t0: usize,
    actions: &[DVector<f64>],
    dynamics: &TvlgDynamics,
    costs: &[QuadraticCost],
) -> f64 {
    let mut s = s0.clone();
    let mut total = 0.0;
    for (k, a) in actions.iter().enumerate() {
        let step = (t0 + k).min(dynamics.len() - 1);
        s = dynamics.predict(step, &s, a);
        total += cost_at(costs, t0 + k + 1).eval(&s, a);
    }
    total
}

/// Plans `cfg.horizon` actions from latent state `s0` at time `t0`.
#[allow(clippy::too_many_arguments)]
pub fn cem_plan<R: Rng + ?Sized>(
    s0: &DVector<f64>,
    t0: usize,
    dynamics: &TvlgDynamics,
    costs: &[QuadraticCost],
    bounds: &[(f64, f64)],
    cfg: &CemConfig,
    warm_start: Option<&[DVector<f64>]>,
    rng: &mut R,
) -> Result<CemPlan> {
    cfg.validate()?;
    if dynamics.is_empty() || costs.is_empty() {
        return Err(SolarError::Empty("planning needs dynamics and costs".into()));
    }
    let da = dynamics.action_dim();
    if bounds.len() != da || s0.len() != dynamics.state_dim() {
        return Err(SolarError::Dimension("planner inputs disagree with the dynamics".into()));
    }
    let h = cfg.horizon;
    let clip = |mut a: DVector<f64>| {
        for (v, (lo, hi)) in a.iter_mut().zip(bounds) {
            *v = v.clamp(*lo, *hi);
        }
        a
    };
    let mut mean: Vec<DVector<f64>> = match warm_start {
        Some(w) if w.len() == h && w.iter().all(|a| a.len() == da) => w.to_vec(),
        Some(_) => return Err(SolarError::Dimension("warm start has the wrong shape".into())),
        None => vec![DVector::zeros(da); h],
    };
    let mut var = vec![DVector::from_element(da, cfg.init_std * cfg.init_std); h];
    let n_elite = cfg.elites();
    let mut best: Option<(f64, Vec<DVector<f64>>)> = None;
    let mut best_scores = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations {
        let mut pop: Vec<(f64, Vec<DVector<f64>>)> = (0..cfg.population)
            .map(|_| {
                let seq: Vec<DVector<f64>> = (0..h)
                    .map(|k| {
                        let z = DVector::from_fn(da, |_, _| rng.sample::<f64, _>(StandardNormal));
                        clip(&mean[k] + var[k].map(f64::sqrt).component_mul(&z))
                    })
                    .collect();
                (score_sequence(s0, t0, &seq, dynamics, costs), seq)
            })
            .collect();
        if let Some(b) = best.take() {
            pop.pop();
            pop.push(b);
        }
        pop.sort_by(|a, b| a.0.total_cmp(&b.0));
        best = Some(pop[0].clone());
        best_scores.push(pop[0].0);
        for k in 0..h {
            let mu = pop[..n_elite].iter().fold(DVector::zeros(da), |acc, (_, s)| acc + &s[k]) / n_elite as f64;
            let v = pop[..n_elite]
                .iter()
                .fold(DVector::zeros(da), |acc, (_, s)| acc + (&s[k] - &mu).map(|x| x * x))
                / n_elite as f64;
            mean[k] = clip(&mean[k] * cfg.smoothing + mu * (1.0 - cfg.smoothing));
            var[k] = (&var[k] * cfg.smoothing + v * (1.0 - cfg.smoothing)).map(|x| x.max(cfg.var_floor));
        }
    }
    let score = score_sequence(s0, t0, &mean, dynamics, costs);
    Ok(CemPlan { actions: mean, score, best_scores })
}

/// Receding-horizon control: filter, plan, execute the first action, shift the plan.
pub fn rollout_mpc<R: Rng + ?Sized>(
    env: &EnvConfig,
    observer: Observer<'_>,
    dynamics: &TvlgDynamics,
    costs: &[QuadraticCost],
    cfg: &CemConfig,
    rng: &mut R,
) -> Result<Trajectory> {
    cfg.validate()?;
    let mut belief: Option<Belief> = None;
    let mut last_action: Option<DVector<f64>> = None;
    let mut plan: Option<Vec<DVector<f64>>> = None;
    run_episode(env, rng, |t, obs, rng| {
        let s = match observer {
            Observer::Direct => DVector::from_column_slice(obs),
            Observer::Blind => DVector::zeros(dynamics.state_dim()),
            Observer::Latent { encoder, dynamics: filt } => {
                let pot = encoder.encode(obs)?;
                let next = match (&belief, &last_action) {
                    (Some(b), Some(a)) => b.update(filt, t - 1, a, &pot)?,
                    _ => Belief::initial(&pot),
                };
                let m = next.mean()?;
                belief = Some(next);
                m
            }
        };
        let warm = plan.take().map(|mut p: Vec<DVector<f64>>| {
            let tail = p.last().cloned().expect("plans are non-empty");
            p.remove(0);
            p.push(tail);
            p
        });
        let out = cem_plan(&s, t, dynamics, costs, &env.action_bounds, cfg, warm.as_deref(), rng)?;
        let a = env.clip_action(out.actions[0].as_slice());
        last_action = Some(DVector::from_column_slice(&a));
        plan = Some(out.actions);
        Ok(a)
    })
}

/// Point-mass navigation in which the agent must sit on a waypoint at a
/// given time before finishing at the goal; the state cost is zero at all
/// other steps.
#[derive(Clone, Debug, PartialEq)]
pub struct WaypointTask {
    pub env: EnvConfig,
    pub waypoint: [f64; 2],
    pub waypoint_time: usize,
    pub weight: f64,
    pub radius: f64,
}

impl Default for WaypointTask {
    fn default() -> Self {
        let env = EnvConfig {
            start: Some([-2.0, -2.0]),
            goal: Some([2.0, 2.0]),
            ..EnvConfig::nav_fixed_goal().with_mode(ObsMode::State)
        };
        Self { env, waypoint: [-2.0, 2.0], waypoint_time: 25, weight: 10.0, radius: 0.25 }
    }
}

impl WaypointTask {
    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        if self.env.kind != EnvKind::NavFixedGoal || self.env.obs_mode != ObsMode::State {
            return Err(SolarError::Config("waypoint task runs on state-mode fixed-goal navigation".into()));
        }
        if self.waypoint_time == 0 || self.waypoint_time >= self.env.horizon {
            return Err(SolarError::Config("waypoint time must fall inside the episode".into()));
        }
        Ok(())
    }

    /// Exact point-mass dynamics `p' = p + Δt a`.
    pub fn dynamics(&self) -> Result<TvlgDynamics> {
        let mut f = DMatrix::zeros(2, 4);
        f.view_mut((0, 0), (2, 2)).fill_with_identity();
        f.view_mut((0, 2), (2, 2)).fill_diagonal(DT);
        TvlgDynamics::time_invariant(&f, &(DMatrix::identity(2, 2) * 1e-6), self.env.horizon - 1)
    }

    /// One cost per time step `0..=T`: waypoint pull at `waypoint_time`, goal pull at the end.
    pub fn costs(&self) -> Result<Vec<QuadraticCost>> {
        let goal = self.env.goal.ok_or_else(|| SolarError::Config("waypoint task needs a goal".into()))?;
        let t_len = self.env.horizon;
        (0..=t_len)
            .map(|t| {
                let (target, w) = if t == self.waypoint_time {
                    (self.waypoint, self.weight)
                } else if t >= t_len - 1 {
                    (goal, self.weight)
                } else {
                    (goal, 0.0)
                };
                goal_state_cost(&DVector::from_vec(target.to_vec()), w, ACTION_WEIGHT)
            })
            .collect()
    }

    /// Whether the agent was within `radius` of the waypoint at the waypoint time.
    pub fn passes_waypoint(&self, traj: &Trajectory) -> bool {
        let s = &traj.true_states[self.waypoint_time];
        ((s[0] - self.waypoint[0]).powi(2) + (s[1] - self.waypoint[1]).powi(2)).sqrt() < self.radius
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_problem() -> (TvlgDynamics, Vec<QuadraticCost>, DVector<f64>) {
        let f = DMatrix::from_row_slice(1, 2, &[0.9, 0.5]);
        let dyn_ = TvlgDynamics::time_invariant(&f, &DMatrix::identity(1, 1), 5).unwrap();
        let cost = QuadraticCost::new(DMatrix::from_element(1, 1, 2.0), DVector::from_vec(vec![-1.0]), 0.1, 0.0).unwrap();
        (dyn_, vec![cost], DVector::from_vec(vec![1.5]))
    }

    #[test]
    fn one_step_plan_matches_closed_form() {
        let (dyn_, costs, s0) = scalar_problem();
        // ½·2·(0.9 s + 0.5 a)² − (0.9 s + 0.5 a) + 0.1 a² is minimised at a*.
        let a_star = (1.0 * 0.5 - 2.0 * 0.9 * 1.5 * 0.5) / (2.0 * 0.25 + 0.2);
        let cfg = CemConfig { horizon: 1, iterations: 10, ..Default::default() };
        let plan = cem_plan(&s0, 0, &dyn_, &costs, &[(-5.0, 5.0)], &cfg, None, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!((plan.actions[0][0] - a_star).abs() < 0.05, "{} vs {a_star}", plan.actions[0][0]);
    }

    #[test]
    fn flat_cost_leaves_the_mean_in_place() {
        let (dyn_, _, s0) = scalar_problem();
        let costs = vec![QuadraticCost::zeros(1, 0.0)];
        let cfg = CemConfig { horizon: 3, iterations: 1, ..Default::default() };
        let warm = vec![DVector::from_vec(vec![0.4]); 3];
        let plan =
            cem_plan(&s0, 0, &dyn_, &costs, &[(-5.0, 5.0)], &cfg, Some(&warm), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let tol = 3.0 * cfg.init_std / (cfg.elites() as f64).sqrt();
        for a in &plan.actions {
            assert!((a[0] - 0.4).abs() < tol, "{} drifted beyond {tol}", a[0]);
        }
    }

    #[test]
    fn two_step_plan_is_near_grid_optimum() {
        let (dyn_, costs, s0) = scalar_problem();
        let grid: Vec<f64> = (0..=400).map(|i| -2.0 + i as f64 * 0.01).collect();
        let mut grid_best = f64::INFINITY;
        for &a0 in &grid {
            for &a1 in &grid {
                let seq = [DVector::from_vec(vec![a0]), DVector::from_vec(vec![a1])];
                grid_best = grid_best.min(score_sequence(&s0, 0, &seq, &dyn_, &costs));
            }
        }
        let cfg = CemConfig { horizon: 2, iterations: 10, ..Default::default() };
        let plan = cem_plan(&s0, 0, &dyn_, &costs, &[(-2.0, 2.0)], &cfg, None, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert!((plan.score - grid_best).abs() <= 0.05 * grid_best.abs(), "{} vs {grid_best}", plan.score);
    }

    #[test]
    fn best_score_never_gets_worse_and_actions_stay_in_bounds() {
        let (dyn_, costs, s0) = scalar_problem();
        let cfg = CemConfig { horizon: 4, iterations: 8, init_std: 3.0, ..Default::default() };
        let plan = cem_plan(&s0, 0, &dyn_, &costs, &[(-0.3, 0.3)], &cfg, None, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert!(plan.best_scores.windows(2).all(|w| w[1] <= w[0]));
        assert!(plan.actions.iter().all(|a| a[0].abs() <= 0.3));
    }

    #[test]
    fn planning_with_true_model_reaches_the_goal() {
        let task = WaypointTask::default();
        let env = EnvConfig::nav_fixed_goal().with_mode(ObsMode::State);
        let goal = DVector::from_vec(env.goal.unwrap().to_vec());
        let costs = vec![goal_state_cost(&goal, 1.0, ACTION_WEIGHT).unwrap()];
        let dyn_ = task.dynamics().unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let a = rollout_mpc(&env, Observer::Direct, &dyn_, &costs, &CemConfig::default(), &mut r).unwrap();
        assert!(a.final_distance() < 0.3, "final distance {}", a.final_distance());
        let b = rollout_mpc(&env, Observer::Direct, &dyn_, &costs, &CemConfig::default(), &mut ChaCha8Rng::seed_from_u64(5))
            .unwrap();
        let c = rollout_mpc(&env, Observer::Direct, &dyn_, &costs, &CemConfig::default(), &mut ChaCha8Rng::seed_from_u64(5))
            .unwrap();
        assert_eq!(b.actions, c.actions);
    }
}
