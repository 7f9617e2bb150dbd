//! Experiment orchestration: random-policy pretraining, the latent
//! LQR-FLM loop, transfer of a pretrained model, metrics and checkpoints.
//!
//! The learner only ever sees [`Episode`] values. In sparse mode the true
//! costs are stripped from a trajectory before it reaches the learner and
//! survive only in the ground-truth summaries used for reporting.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::costmodel::{fit_local_quadratic, fit_sparse_cost, CostParam, QuadraticCost, StepCost, DEFAULT_RIDGE};
use crate::ctrl::{kl_constrained_update, rollout, DualState, LinearGaussianPolicy, Observer};
use crate::envs::{sparse_label, EnvConfig, ObsMode, Trajectory, ACTION_WEIGHT, LABELED_STEPS, SPAWN};
use crate::error::{Result, SolarError};
use crate::linalg::{psd_factor, psd_project, symmetrize};
use crate::lingauss::Gaussian;
use crate::localdyn::{infer_local_dynamics, EmConfig, TvlgDynamics};
use crate::mpc::CemConfig;
use crate::persist::{get_dynamics, get_policy, put_dynamics, put_policy, Checkpoint};
use crate::svae::{train_model, CostSignal, Model, ModelConfig, ObsLikelihood, TrainHyper, TrainSeq};

pub const METRICS_HEADER: &str = "iteration,mean_cost,final_distance,achieved_kl,elbo,episodes_collected";

/// Network shapes and likelihood; input and action sizes come from the environment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub latent_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    /// Defaults to Bernoulli pixels for images and `N(·, 0.01 I)` for state vectors.
    #[serde(default)]
    pub likelihood: Option<ObsLikelihood>,
    #[serde(default = "default_cost_param")]
    pub cost_param: CostParam,
}

fn default_cost_param() -> CostParam {
    CostParam::PsdCholesky
}

impl ModelSpec {
    pub fn model_config(&self, env: &EnvConfig) -> ModelConfig {
        let likelihood = self.likelihood.unwrap_or(match env.obs_mode {
            ObsMode::Image => ObsLikelihood::Bernoulli,
            ObsMode::State => ObsLikelihood::Gaussian { var: 0.01 },
        });
        ModelConfig {
            latent_dim: self.latent_dim,
            action_dim: env.action_dim(),
            obs_dim: env.obs_dim(),
            encoder_hidden: self.encoder_hidden.clone(),
            decoder_hidden: self.decoder_hidden.clone(),
            likelihood,
            cost_param: self.cost_param,
            action_weight: ACTION_WEIGHT,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicySpec {
    /// KL step size per policy update.
    pub epsilon: f64,
    /// Standard deviation of the initial zero-mean policy.
    pub sigma_init: f64,
}

impl Default for PolicySpec {
    fn default() -> Self {
        Self { epsilon: 1.0, sigma_init: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// RL iterations `K`.
    pub iterations: usize,
    /// Random-policy episodes collected before model training.
    pub n_init: usize,
    /// Episodes collected per RL iteration.
    pub n: usize,
    #[serde(default)]
    pub finetune: bool,
    #[serde(default)]
    pub sparse_reward: bool,
    /// Sparse mode: share of the initial episodes that start on the goal and hold still.
    #[serde(default = "default_goal_examples")]
    pub goal_examples: f64,
    /// Ridge on the logistic success model.
    #[serde(default = "default_sparse_ridge")]
    pub sparse_ridge: f64,
    /// Pretrained model to start from; skips initial collection and training.
    #[serde(default)]
    pub transfer_from: Option<PathBuf>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    /// Goals pooled by `pretrain`; empty means the environment's own goal.
    #[serde(default)]
    pub pretrain_goals: Vec<[f64; 2]>,
    pub env: EnvConfig,
    pub model: ModelSpec,
    #[serde(default)]
    pub train: TrainHyper,
    #[serde(default)]
    pub policy: PolicySpec,
    #[serde(default)]
    pub em: EmConfig,
    #[serde(default)]
    pub cem: CemConfig,
}

fn default_goal_examples() -> f64 {
    0.1
}

fn default_sparse_ridge() -> f64 {
    1e-2
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| SolarError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| SolarError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.n == 0 {
            return Err(SolarError::Config("iterations and episodes per iteration must be at least 1".into()));
        }
        if self.n_init == 0 && self.transfer_from.is_none() {
            return Err(SolarError::Config("n_init must be at least 1".into()));
        }
        if !(self.policy.epsilon > 0.0) || !(self.policy.sigma_init >= 0.0) {
            return Err(SolarError::Config("epsilon must be positive and sigma_init non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.goal_examples) || !(self.sparse_ridge > 0.0) {
            return Err(SolarError::Config("goal_examples must lie in [0, 1) and sparse_ridge be positive".into()));
        }
        if self.model.latent_dim == 0 {
            return Err(SolarError::Config("latent_dim must be positive".into()));
        }
        if self.em.max_iters == 0 {
            return Err(SolarError::Config("em.max_iters must be positive".into()));
        }
        self.env.validate()?;
        self.train.validate()?;
        self.cem.validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        self.model.model_config(&self.env)
    }
}

/// Learning signal attached to an episode.
#[derive(Clone, Debug, PartialEq)]
pub enum Feedback {
    Costs(Vec<f64>),
    /// Oracle success flags; only the last few steps carry information.
    Labels(Vec<bool>),
}

/// The learner's view of one episode.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub feedback: Feedback,
}

impl Episode {
    pub fn horizon(&self) -> usize {
        self.actions.len()
    }

    fn train_seq(&self) -> Result<TrainSeq> {
        let signal = match &self.feedback {
            Feedback::Costs(c) => CostSignal::Dense(c.clone()),
            // Labels cover only the episode tail, so they do not shape the global cost.
            Feedback::Labels(_) => CostSignal::None,
        };
        TrainSeq::new(&self.observations, &self.actions, signal)
    }
}

/// Ground truth kept for reporting.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Outcome {
    cost: f64,
    final_distance: f64,
    success: bool,
}

fn split(traj: Trajectory, sparse: bool) -> (Episode, Outcome) {
    let outcome = Outcome { cost: traj.total_cost(), final_distance: traj.final_distance(), success: traj.succeeded() };
    let feedback = if sparse { Feedback::Labels(sparse_label(&traj)) } else { Feedback::Costs(traj.costs) };
    (Episode { observations: traj.observations, actions: traj.actions, feedback }, outcome)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub mean_cost: f64,
    pub final_distance: f64,
    pub success_rate: f64,
    pub achieved_kl: f64,
    pub lambda: Option<f64>,
    pub em_iters: usize,
    /// Final value of the local-dynamics EM objective.
    pub elbo: f64,
    /// Cumulative count, including the initial batch.
    pub episodes_collected: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub records: Vec<IterationRecord>,
    pub pretrain_elbo: Vec<f64>,
    pub env_steps: usize,
    pub checkpoints: Vec<PathBuf>,
    /// Set when a run aborted; the records cover the completed iterations.
    pub error: Option<String>,
}

impl RunReport {
    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| SolarError::Parse(e.to_string()))?;
        fs::write(path, text)?;
        Ok(())
    }
}

/// Everything needed to act after a run.
#[derive(Clone, Debug)]
pub struct Artifacts {
    pub model: Model,
    pub policy: LinearGaussianPolicy,
    pub dynamics: TvlgDynamics,
}

/// Writes the CSV header and one row per record, replacing `path`.
pub fn emit_metrics(report: &RunReport, path: &Path) -> Result<()> {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in &report.records {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.iteration, r.mean_cost, r.final_distance, r.achieved_kl, r.elbo, r.episodes_collected
        ));
    }
    let mut f = fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

fn seeds<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<u64> {
    (0..n).map(|_| rng.random()).collect()
}

fn collect<R: Rng + ?Sized>(
    env: &EnvConfig,
    policy: &LinearGaussianPolicy,
    observer: Observer<'_>,
    count: usize,
    rng: &mut R,
) -> Result<Vec<Trajectory>> {
    seeds(rng, count)
        .into_par_iter()
        .map(|s| rollout(env, policy, observer, &mut ChaCha8Rng::seed_from_u64(s)))
        .collect()
}

/// Episodes that start on the goal under a zero action.
fn collect_goal_examples<R: Rng + ?Sized>(env: &EnvConfig, state_dim: usize, count: usize, rng: &mut R) -> Result<Vec<Trajectory>> {
    let hold = LinearGaussianPolicy::initial(env.horizon, state_dim, env.action_dim(), 0.0);
    seeds(rng, count)
        .into_par_iter()
        .map(|s| {
            let mut r = ChaCha8Rng::seed_from_u64(s);
            let goal = env.goal.unwrap_or_else(|| [r.random_range(-SPAWN..=SPAWN), r.random_range(-SPAWN..=SPAWN)]);
            let cfg = EnvConfig { goal: Some(goal), start: Some(goal), ..env.clone() };
            rollout(&cfg, &hold, Observer::Blind, &mut r)
        })
        .collect()
}

fn to_matrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    DMatrix::from_fn(rows[0].len(), rows.len(), |i, j| rows[j][i])
}

fn psd_cost(cost: &QuadraticCost) -> Result<QuadraticCost> {
    let quad = psd_project(cost.quad());
    QuadraticCost::from_factor(psd_factor(&quad), cost.lin.clone(), cost.alpha, cost.offset)
}

/// Result of fitting dynamics and cost to one batch.
struct LocalFit {
    dynamics: TvlgDynamics,
    costs: Vec<StepCost>,
    init: Gaussian,
    em_iters: usize,
    objective: f64,
}

/// Labelled latent points accumulated across batches in sparse mode.
#[derive(Default)]
struct LabelPool {
    states: Vec<DVector<f64>>,
    actions: Vec<DVector<f64>>,
    labels: Vec<bool>,
}

struct Learner<'a> {
    cfg: &'a RunConfig,
    model: Model,
    pool: LabelPool,
}

impl Learner<'_> {
    fn fit(&mut self, batch: &[Episode]) -> Result<LocalFit> {
        let pots = batch
            .iter()
            .map(|e| self.model.potentials(&to_matrix(&e.observations)))
            .collect::<Result<Vec<_>>>()?;
        let actions: Vec<Vec<DVector<f64>>> = batch
            .iter()
            .map(|e| e.actions.iter().map(|a| DVector::from_column_slice(a)).collect())
            .collect();
        let em = infer_local_dynamics(&pots, &actions, self.model.q_dyn(), self.cfg.em)?;
        let mut states = Vec::new();
        let mut acts = Vec::new();
        let mut costs = Vec::new();
        for ((ep, post), a) in batch.iter().zip(&em.smoothed).zip(&actions) {
            match &ep.feedback {
                Feedback::Costs(c) => {
                    states.extend(post.means.iter().cloned());
                    acts.extend(a.iter().cloned());
                    costs.extend_from_slice(c);
                }
                Feedback::Labels(l) => {
                    let t = ep.horizon();
                    for i in t.saturating_sub(LABELED_STEPS)..t {
                        self.pool.states.push(post.means[i].clone());
                        self.pool.actions.push(a[i].clone());
                        self.pool.labels.push(l[i]);
                    }
                }
            }
        }
        let cost = if self.cfg.sparse_reward {
            let p = &self.pool;
            let fitted = fit_sparse_cost(&p.states, &p.actions, &p.labels, ACTION_WEIGHT, self.cfg.sparse_ridge)?;
            psd_cost(&fitted.cost)?
        } else {
            fit_local_quadratic(&states, &acts, &costs, ACTION_WEIGHT, DEFAULT_RIDGE, CostParam::PsdCholesky)?
        };
        let step = cost.step_cost(self.model.action_dim());
        let horizon = batch[0].horizon();
        let init = initial_state(&em.smoothed.iter().map(|s| (&s.means[0], &s.covs[0])).collect::<Vec<_>>())?;
        Ok(LocalFit {
            dynamics: em.dynamics,
            costs: vec![step; horizon],
            init,
            em_iters: em.trace.len(),
            objective: *em.trace.last().expect("EM runs at least once"),
        })
    }
}

/// Moment-matched Gaussian over the first smoothed latent of each episode.
fn initial_state(firsts: &[(&DVector<f64>, &DMatrix<f64>)]) -> Result<Gaussian> {
    let n = firsts.len() as f64;
    let d = firsts[0].0.len();
    let mean = firsts.iter().fold(DVector::zeros(d), |acc, (m, _)| acc + *m) / n;
    let mut cov = DMatrix::identity(d, d) * 1e-6;
    for (m, c) in firsts {
        let dm = *m - &mean;
        cov += (&dm * dm.transpose() + *c) / n;
    }
    Gaussian::new(mean, symmetrize(&cov))
}

fn mix(a: u64, b: u64) -> u64 {
    ChaCha8Rng::seed_from_u64(a ^ b.rotate_left(32)).random()
}

/// Collects `n_init` random-policy episodes and trains a fresh model on them.
fn pretrain<R: Rng + ?Sized>(
    cfg: &RunConfig,
    variants: &[EnvConfig],
    rng: &mut R,
) -> Result<(Model, Vec<Episode>, Vec<f64>)> {
    let mcfg = cfg.model_config();
    let model = Model::new(&mcfg, rng)?;
    let initial = LinearGaussianPolicy::initial(cfg.env.horizon, mcfg.latent_dim, mcfg.action_dim, cfg.policy.sigma_init);
    let examples = if cfg.sparse_reward { (cfg.goal_examples * cfg.n_init as f64).round() as usize } else { 0 };
    let mut trajs = Vec::with_capacity(cfg.n_init);
    let per = cfg.n_init - examples;
    for (i, env) in variants.iter().enumerate() {
        let count = per / variants.len() + usize::from(i < per % variants.len());
        trajs.extend(collect(env, &initial, Observer::Blind, count, rng)?);
    }
    trajs.extend(collect_goal_examples(&cfg.env, mcfg.latent_dim, examples, rng)?);
    let episodes: Vec<Episode> = trajs.into_iter().map(|t| split(t, cfg.sparse_reward).0).collect();
    let data = episodes.iter().map(Episode::train_seq).collect::<Result<Vec<_>>>()?;
    let hyper = TrainHyper { seed: mix(cfg.train.seed, rng.random()), ..cfg.train };
    let trained = train_model(&data, model, &hyper)?;
    Ok((trained.model, episodes, trained.elbo_trace))
}

fn check_variants(variants: &[EnvConfig]) -> Result<()> {
    let first = variants.first().ok_or_else(|| SolarError::Empty("no task variants".into()))?;
    for v in variants {
        v.validate()?;
        if v.kind != first.kind
            || v.obs_dim() != first.obs_dim()
            || v.action_dim() != first.action_dim()
            || v.horizon != first.horizon
        {
            return Err(SolarError::Config("task variants must share dynamics, horizon and observation shape".into()));
        }
    }
    Ok(())
}

/// Pools random-policy data across task variants and trains one base model.
pub fn pretrain_base_model(variants: &[EnvConfig], cfg: &RunConfig) -> Result<Model> {
    cfg.validate()?;
    check_variants(variants)?;
    if variants[0].obs_dim() != cfg.env.obs_dim() || variants[0].action_dim() != cfg.env.action_dim() {
        return Err(SolarError::Config("task variants do not match the configured environment".into()));
    }
    let cfg = RunConfig { sparse_reward: false, ..cfg.clone() };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (model, _, _) = pretrain(&cfg, variants, &mut rng)?;
    Ok(model)
}

/// Environment variants for `pretrain`: one per configured goal.
pub fn goal_variants(cfg: &RunConfig) -> Vec<EnvConfig> {
    if cfg.pretrain_goals.is_empty() {
        vec![cfg.env.clone()]
    } else {
        cfg.pretrain_goals.iter().map(|g| EnvConfig { goal: Some(*g), ..cfg.env.clone() }).collect()
    }
}

pub fn load_model(path: &Path) -> Result<Model> {
    Model::from_checkpoint(&Checkpoint::load(path)?)
}

fn load_transfer(path: &Path, cfg: &RunConfig) -> Result<Model> {
    let model = load_model(path)?;
    let want = cfg.model_config();
    if model.latent_dim() != want.latent_dim {
        return Err(SolarError::Config(format!(
            "transferred model has latent dimension {}, configuration asks for {}",
            model.latent_dim(),
            want.latent_dim
        )));
    }
    if model.obs_dim() != want.obs_dim || model.action_dim() != want.action_dim {
        return Err(SolarError::Config("transferred model does not match the environment's observation or action size".into()));
    }
    Ok(model)
}

pub fn save_agent(policy: &LinearGaussianPolicy, dynamics: &TvlgDynamics, path: &Path) -> Result<()> {
    let mut ck = Checkpoint::default();
    put_policy(&mut ck, "policy", policy);
    put_dynamics(&mut ck, "dynamics", dynamics);
    ck.save(path)
}

pub fn load_agent(path: &Path) -> Result<(LinearGaussianPolicy, TvlgDynamics)> {
    let ck = Checkpoint::load(path)?;
    Ok((get_policy(&ck, "policy")?, get_dynamics(&ck, "dynamics")?))
}

/// Runs the full loop; see [`run_solar_with_artifacts`].
pub fn run_solar(cfg: &RunConfig) -> Result<RunReport> {
    run_solar_with_artifacts(cfg).map(|(r, _)| r)
}

/// Pretrains (or loads) a model, then alternates local fitting, KL-constrained
/// policy updates and data collection. On failure the partial report is
/// written to `out_dir` before the error is returned.
pub fn run_solar_with_artifacts(cfg: &RunConfig) -> Result<(RunReport, Artifacts)> {
    cfg.validate()?;
    let mut report = RunReport::default();
    if let Some(dir) = &cfg.out_dir {
        fs::create_dir_all(dir)?;
    }
    match run_inner(cfg, &mut report) {
        Ok(artifacts) => {
            if let Some(dir) = &cfg.out_dir {
                report.save_json(&dir.join("report.json"))?;
            }
            Ok((report, artifacts))
        }
        Err(e) => {
            report.error = Some(e.to_string());
            if let Some(dir) = &cfg.out_dir {
                report.save_json(&dir.join("report.json"))?;
            }
            Err(e)
        }
    }
}

fn run_inner(cfg: &RunConfig, report: &mut RunReport) -> Result<Artifacts> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let horizon = cfg.env.horizon;
    let latent = cfg.model.latent_dim;
    let da = cfg.env.action_dim();
    let mut policy = LinearGaussianPolicy::initial(horizon, latent, da, cfg.policy.sigma_init);
    let (model, mut batch, mut history) = match &cfg.transfer_from {
        Some(path) => {
            let model = load_transfer(path, cfg)?;
            let trajs = collect(&cfg.env, &policy, Observer::Blind, cfg.n, &mut rng)?;
            let batch: Vec<Episode> = trajs.into_iter().map(|t| split(t, cfg.sparse_reward).0).collect();
            (model, batch.clone(), batch)
        }
        None => {
            let (model, episodes, trace) = pretrain(cfg, std::slice::from_ref(&cfg.env), &mut rng)?;
            report.pretrain_elbo = trace;
            if let Some(dir) = &cfg.out_dir {
                let path = dir.join("model_pretrained.ckpt");
                model.to_checkpoint().save(&path)?;
                report.checkpoints.push(path);
            }
            (model, episodes.clone(), episodes)
        }
    };
    let mut collected = batch.len();
    let mut learner = Learner { cfg, model, pool: LabelPool::default() };
    let mut lambda = DualState::new(cfg.policy.epsilon).lambda;
    let mut dynamics = None;
    for k in 1..=cfg.iterations {
        let fit = learner.fit(&batch)?;
        let dual = DualState { lambda, ..DualState::new(cfg.policy.epsilon) };
        let upd = kl_constrained_update(&policy, &fit.dynamics, &fit.costs, dual, &fit.init)?;
        if let Some(l) = upd.lambda {
            lambda = l;
        }
        policy = upd.policy;
        let observer = Observer::Latent { encoder: &learner.model, dynamics: &fit.dynamics };
        let trajs = collect(&cfg.env, &policy, observer, cfg.n, &mut rng)?;
        let (eps, outcomes): (Vec<Episode>, Vec<Outcome>) =
            trajs.into_iter().map(|t| split(t, cfg.sparse_reward)).unzip();
        collected += eps.len();
        let n = outcomes.len() as f64;
        let record = IterationRecord {
            iteration: k,
            mean_cost: outcomes.iter().map(|o| o.cost).sum::<f64>() / n,
            final_distance: outcomes.iter().map(|o| o.final_distance).sum::<f64>() / n,
            success_rate: outcomes.iter().filter(|o| o.success).count() as f64 / n,
            achieved_kl: upd.achieved_kl,
            lambda: upd.lambda,
            em_iters: fit.em_iters,
            elbo: fit.objective,
            episodes_collected: collected,
        };
        log::info!(
            "iteration {k}: cost {:.2}, final distance {:.3}, success {:.2}, kl {:.3}",
            record.mean_cost,
            record.final_distance,
            record.success_rate,
            record.achieved_kl
        );
        report.records.push(record);
        if cfg.finetune {
            history.extend(eps.iter().cloned());
            let data = history.iter().map(Episode::train_seq).collect::<Result<Vec<_>>>()?;
            let hyper = TrainHyper {
                iterations: (cfg.train.iterations / 10).max(1),
                seed: mix(cfg.train.seed, rng.random()),
                ..cfg.train
            };
            learner.model = train_model(&data, learner.model.clone(), &hyper)?.model;
        }
        batch = eps;
        dynamics = Some(fit.dynamics);
    }
    report.env_steps = collected * horizon;
    let dynamics = dynamics.expect("at least one iteration");
    if let Some(dir) = &cfg.out_dir {
        let model_path = dir.join("model.ckpt");
        learner.model.to_checkpoint().save(&model_path)?;
        let agent_path = dir.join("policy.ckpt");
        save_agent(&policy, &dynamics, &agent_path)?;
        report.checkpoints.push(model_path);
        report.checkpoints.push(agent_path);
    }
    Ok(Artifacts { model: learner.model, policy, dynamics })
}

/// Summary of policy rollouts under the true environment.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub episodes: usize,
    pub mean_cost: f64,
    pub final_distance: f64,
    pub success_rate: f64,
}

pub fn summarize(trajs: &[Trajectory]) -> EvalSummary {
    let n = trajs.len().max(1) as f64;
    EvalSummary {
        episodes: trajs.len(),
        mean_cost: trajs.iter().map(Trajectory::total_cost).sum::<f64>() / n,
        final_distance: trajs.iter().map(Trajectory::final_distance).sum::<f64>() / n,
        success_rate: trajs.iter().filter(|t| t.succeeded()).count() as f64 / n,
    }
}

/// Rolls out `artifacts.policy` on the latent belief for `episodes` episodes.
pub fn evaluate(env: &EnvConfig, artifacts: &Artifacts, episodes: usize, seed: u64) -> Result<EvalSummary> {
    let observer = Observer::Latent { encoder: &artifacts.model, dynamics: &artifacts.dynamics };
    let trajs = collect(env, &artifacts.policy, observer, episodes, &mut ChaCha8Rng::seed_from_u64(seed))?;
    Ok(summarize(&trajs))
}

/// Receding-horizon CEM through the model's global dynamics and learned cost.
pub fn evaluate_mpc(env: &EnvConfig, model: &Model, cem: &CemConfig, episodes: usize, seed: u64) -> Result<EvalSummary> {
    let dynamics = TvlgDynamics::from_posteriors(vec![model.q_dyn().clone(); env.horizon - 1])?;
    let costs = vec![model.cost().clone(); env.horizon + 1];
    let observer = Observer::Latent { encoder: model, dynamics: &dynamics };
    let trajs = seeds(&mut ChaCha8Rng::seed_from_u64(seed), episodes)
        .into_par_iter()
        .map(|s| crate::mpc::rollout_mpc(env, observer, &dynamics, &costs, cem, &mut ChaCha8Rng::seed_from_u64(s)))
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(&trajs))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn smoke_config() -> RunConfig {
        RunConfig {
            seed: 3,
            iterations: 1,
            n_init: 4,
            n: 1,
            finetune: false,
            sparse_reward: false,
            goal_examples: 0.1,
            sparse_ridge: 1e-2,
            transfer_from: None,
            out_dir: None,
            pretrain_goals: Vec::new(),
            env: EnvConfig { horizon: 10, ..EnvConfig::nav_fixed_goal().with_mode(ObsMode::State) },
            model: ModelSpec {
                latent_dim: 2,
                encoder_hidden: vec![4],
                decoder_hidden: vec![4],
                likelihood: None,
                cost_param: CostParam::PsdCholesky,
            },
            train: TrainHyper { iterations: 5, minibatch: 2, ..TrainHyper::default() },
            policy: PolicySpec::default(),
            em: EmConfig::default(),
            cem: CemConfig::default(),
        }
    }

    #[test]
    fn toml_round_trip_and_unknown_keys() {
        let cfg = smoke_config();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
        let bad = format!("bogus = 1\n{text}");
        assert!(matches!(RunConfig::from_toml(&bad), Err(SolarError::Config(_))));
    }

    #[test]
    fn validation() {
        let mut cfg = smoke_config();
        cfg.iterations = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = smoke_config();
        cfg.n_init = 0;
        assert!(cfg.validate().is_err());
        cfg.transfer_from = Some(PathBuf::from("base.ckpt"));
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn sparse_split_hides_costs() {
        let traj = Trajectory {
            kind: crate::envs::EnvKind::NavFixedGoal,
            seed: 0,
            goal: [0.0, 0.0],
            observations: vec![vec![0.0, 0.0]; 6],
            actions: vec![vec![0.0, 0.0]; 6],
            costs: vec![1.0; 6],
            sparse_labels: None,
            true_states: vec![vec![0.0, 0.0]; 7],
        };
        let (ep, outcome) = split(traj.clone(), true);
        assert_eq!(ep.feedback, Feedback::Labels(vec![false, true, true, true, true, true]));
        assert!(outcome.success);
        let (ep, _) = split(traj, false);
        assert_eq!(ep.feedback, Feedback::Costs(vec![1.0; 6]));
    }

    #[test]
    fn initial_state_moments() {
        let m1 = DVector::from_vec(vec![1.0, 0.0]);
        let m2 = DVector::from_vec(vec![-1.0, 0.0]);
        let c = DMatrix::identity(2, 2) * 0.5;
        let g = initial_state(&[(&m1, &c), (&m2, &c)]).unwrap();
        assert!(g.mean().amax() < 1e-12);
        assert!((g.cov()[(0, 0)] - 1.5 - 1e-6).abs() < 1e-12);
        assert!((g.cov()[(1, 1)] - 0.5 - 1e-6).abs() < 1e-12);
    }
}
