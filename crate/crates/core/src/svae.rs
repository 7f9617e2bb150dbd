//! Deep Bayesian linear-quadratic model: encoder potentials, a global MNIW
//! factor over `(F, Σ)`, a neural decoder and a quadratic cost, trained by
//! maximising a structured evidence lower bound.
//!
//! The local factor `q(s_{1:T})` is the normalised product of the prior
//! chain (under expected dynamics) and the encoder potentials, so its
//! contribution to the bound collapses to `log Z − Σ_t E_q[log ψ_t(s_t)]`.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::costmodel::{softplus, sigmoid, sparse_loglik_and_grad, CostParam, QuadraticCost, SparseCostParams};
use crate::error::{Result, SolarError};
use crate::linalg::{cholesky, cholesky_backward, gauss_hermite};
use crate::lingauss::{mniw_kl, MniwExpectations, MniwParams, TransitionStats};
use crate::localdyn::{smooth_with_expectations, EvidencePotential, PotentialEncoder, SmoothedPosterior};
use crate::nets::{AdamState, GaussianHead, Mlp, MlpGrad};
use crate::persist::{get_cost, get_mniw, put_cost, put_mniw, Checkpoint};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Observation model `p(o | s)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ObsLikelihood {
    /// Per-pixel Bernoulli on decoder logits.
    Bernoulli,
    /// Isotropic Gaussian around the decoder output with fixed variance.
    Gaussian { var: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub action_dim: usize,
    pub obs_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub likelihood: ObsLikelihood,
    pub cost_param: CostParam,
    pub action_weight: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    encoder: Mlp,
    decoder: Mlp,
    q_dyn: MniwParams,
    prior: MniwParams,
    cost: QuadraticCost,
    likelihood: ObsLikelihood,
    action_dim: usize,
}

/// What the learner sees about costs for one trajectory.
#[derive(Clone, Debug, PartialEq)]
pub enum CostSignal {
    None,
    Dense(Vec<f64>),
    Sparse(Vec<bool>),
}

/// One trajectory prepared for training: observations as columns.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSeq {
    pub observations: DMatrix<f64>,
    pub actions: Vec<DVector<f64>>,
    pub signal: CostSignal,
}

impl TrainSeq {
    pub fn new(observations: &[Vec<f64>], actions: &[Vec<f64>], signal: CostSignal) -> Result<Self> {
        let first = observations.first().ok_or_else(|| SolarError::Empty("trajectory has no observations".into()))?;
        if observations.iter().any(|o| o.len() != first.len()) {
            return Err(SolarError::Dimension("observation widths differ".into()));
        }
        if actions.len() != observations.len() {
            return Err(SolarError::Dimension("need one action per observation".into()));
        }
        let len_ok = match &signal {
            CostSignal::None => true,
            CostSignal::Dense(c) => c.len() == observations.len(),
            CostSignal::Sparse(f) => f.len() == observations.len(),
        };
        if !len_ok {
            return Err(SolarError::Dimension("cost signal length differs from horizon".into()));
        }
        Ok(Self {
            observations: DMatrix::from_fn(first.len(), observations.len(), |i, t| observations[t][i]),
            actions: actions.iter().map(|a| DVector::from_column_slice(a)).collect(),
            signal,
        })
    }

    pub fn horizon(&self) -> usize {
        self.observations.ncols()
    }
}

/// How the per-step expectations in the bound are evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Estimator {
    /// Reparameterised draws from each smoothed marginal.
    Sample { count: usize },
    /// Tensor-product Gauss–Hermite rule on each marginal.
    GaussHermite { points: usize },
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ElboTerms {
    pub image: f64,
    pub cost: f64,
    /// `log Z − Σ E[log ψ]`, or minus the per-step VAE KL under `vae_only`.
    pub local: f64,
    /// `KL(q(F, Σ) ‖ p(F, Σ)) / B`.
    pub dyn_kl: f64,
}

impl ElboTerms {
    pub fn total(&self) -> f64 {
        self.image + self.cost + self.local - self.dyn_kl
    }

    fn first_non_finite(&self) -> Option<&'static str> {
        [("image", self.image), ("cost", self.cost), ("local", self.local), ("dynamics KL", self.dyn_kl)]
            .into_iter()
            .find(|(_, v)| !v.is_finite())
            .map(|(n, _)| n)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrad {
    pub encoder: MlpGrad,
    pub decoder: MlpGrad,
    pub cost: Vec<f64>,
}

impl ModelGrad {
    pub fn flat(&self) -> Vec<f64> {
        let mut out = self.encoder.flat();
        out.extend(self.decoder.flat());
        out.extend_from_slice(&self.cost);
        out
    }

    fn add_assign(&mut self, other: &ModelGrad) {
        self.encoder.add_assign(&other.encoder);
        self.decoder.add_assign(&other.decoder);
        self.cost.iter_mut().zip(&other.cost).for_each(|(a, b)| *a += b);
    }
}

#[derive(Clone, Debug)]
pub struct ElboOutput {
    pub value: f64,
    pub terms: ElboTerms,
    pub grad: ModelGrad,
    /// Expected transition statistics summed over the batch.
    pub stats: TransitionStats,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainHyper {
    pub natgrad_step: f64,
    pub adam_step: f64,
    pub minibatch: usize,
    pub iterations: usize,
    pub samples: usize,
    pub seed: u64,
    #[serde(default)]
    pub vae_only: bool,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self { natgrad_step: 1e-4, adam_step: 1e-3, minibatch: 16, iterations: 1000, samples: 1, seed: 0, vae_only: false }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.natgrad_step > 0.0 && self.adam_step > 0.0) {
            return Err(SolarError::Config("step sizes must be positive".into()));
        }
        if self.minibatch == 0 || self.samples == 0 {
            return Err(SolarError::Config("minibatch and sample counts must be positive".into()));
        }
        Ok(())
    }

    /// Number of minibatches `B` that cover a dataset of `n` trajectories.
    pub fn batches(&self, n: usize) -> f64 {
        n.div_ceil(self.minibatch).max(1) as f64
    }
}

impl Model {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let d = cfg.latent_dim;
        if d == 0 || cfg.action_dim == 0 || cfg.obs_dim == 0 {
            return Err(SolarError::Config("model dimensions must be positive".into()));
        }
        if let ObsLikelihood::Gaussian { var } = cfg.likelihood {
            if !(var > 0.0) {
                return Err(SolarError::Config("observation variance must be positive".into()));
            }
        }
        let chain = |a: usize, hidden: &[usize], b: usize| {
            std::iter::once(a).chain(hidden.iter().copied()).chain(std::iter::once(b)).collect::<Vec<_>>()
        };
        let encoder = Mlp::random(&chain(cfg.obs_dim, &cfg.encoder_hidden, 2 * d), rng)?;
        let decoder = Mlp::random(&chain(d, &cfg.decoder_hidden, cfg.obs_dim), rng)?;
        let prior = MniwParams::default_prior(d, cfg.action_dim);
        let cost = match cfg.cost_param {
            CostParam::Full => QuadraticCost::zeros(d, cfg.action_weight),
            CostParam::PsdCholesky => {
                QuadraticCost::from_factor(DMatrix::identity(d, d) * 0.1, DVector::zeros(d), cfg.action_weight, 0.0)?
            }
        };
        Self::from_parts(encoder, decoder, prior.clone(), prior, cost, cfg.likelihood, cfg.action_dim)
    }

    pub fn from_parts(
        encoder: Mlp,
        decoder: Mlp,
        q_dyn: MniwParams,
        prior: MniwParams,
        cost: QuadraticCost,
        likelihood: ObsLikelihood,
        action_dim: usize,
    ) -> Result<Self> {
        let d = decoder.input_dim();
        let ok = encoder.output_dim() == 2 * d
            && decoder.output_dim() == encoder.input_dim()
            && q_dyn.out_dim() == d
            && q_dyn.in_dim() == d + action_dim
            && prior.out_dim() == d
            && prior.in_dim() == d + action_dim
            && cost.state_dim() == d;
        if !ok {
            return Err(SolarError::Dimension("model components have inconsistent shapes".into()));
        }
        Ok(Self { encoder, decoder, q_dyn, prior, cost, likelihood, action_dim })
    }

    pub fn latent_dim(&self) -> usize {
        self.decoder.input_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn obs_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn encoder(&self) -> &Mlp {
        &self.encoder
    }

    pub fn encoder_mut(&mut self) -> &mut Mlp {
        &mut self.encoder
    }

    pub fn decoder(&self) -> &Mlp {
        &self.decoder
    }

    pub fn decoder_mut(&mut self) -> &mut Mlp {
        &mut self.decoder
    }

    pub fn q_dyn(&self) -> &MniwParams {
        &self.q_dyn
    }

    pub fn prior(&self) -> &MniwParams {
        &self.prior
    }

    pub fn cost(&self) -> &QuadraticCost {
        &self.cost
    }

    pub fn likelihood(&self) -> ObsLikelihood {
        self.likelihood
    }

    pub fn set_q_dyn(&mut self, q: MniwParams) -> Result<()> {
        if q.out_dim() != self.q_dyn.out_dim() || q.in_dim() != self.q_dyn.in_dim() {
            return Err(SolarError::Dimension("dynamics factor shape changed".into()));
        }
        self.q_dyn = q;
        Ok(())
    }

    pub fn set_cost(&mut self, cost: QuadraticCost) -> Result<()> {
        if cost.state_dim() != self.latent_dim() {
            return Err(SolarError::Dimension("cost has the wrong state dimension".into()));
        }
        self.cost = cost;
        Ok(())
    }

    /// Encoder, decoder and cost parameters in one flat vector.
    pub fn sgd_params(&self) -> Vec<f64> {
        let mut p = self.encoder.params();
        p.extend(self.decoder.params());
        p.extend(self.cost.to_flat());
        p
    }

    pub fn set_sgd_params(&mut self, flat: &[f64]) -> Result<()> {
        let ne = self.encoder.num_params();
        let nd = self.decoder.num_params();
        if flat.len() != ne + nd + self.cost.num_params() {
            return Err(SolarError::Dimension("flat parameter vector has the wrong length".into()));
        }
        self.encoder.set_params(&flat[..ne])?;
        self.decoder.set_params(&flat[ne..ne + nd])?;
        self.cost.set_flat(&flat[ne + nd..])
    }

    fn heads(&self, observations: &DMatrix<f64>) -> Result<(Vec<GaussianHead>, crate::nets::MlpCache)> {
        let (out, cache) = self.encoder.forward(observations)?;
        let heads = out.column_iter().map(|c| GaussianHead::from_output(c.as_slice())).collect::<Result<Vec<_>>>()?;
        Ok((heads, cache))
    }

    /// Evidence potentials for every column of `observations`.
    pub fn potentials(&self, observations: &DMatrix<f64>) -> Result<Vec<EvidencePotential>> {
        let (heads, _) = self.heads(observations)?;
        heads.iter().map(|h| EvidencePotential::from_mean_var(&h.mean, &h.var())).collect()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::default();
        let lik = match self.likelihood {
            ObsLikelihood::Bernoulli => ("bernoulli".to_string(), vec![]),
            ObsLikelihood::Gaussian { var } => ("gaussian".to_string(), vec![var]),
        };
        ck.push("model", format!("likelihood={},da={}", lik.0, self.action_dim), lik.1);
        self.encoder.write_sections(&mut ck, "encoder");
        self.decoder.write_sections(&mut ck, "decoder");
        put_mniw(&mut ck, "q_dyn", &self.q_dyn);
        put_mniw(&mut ck, "prior", &self.prior);
        put_cost(&mut ck, "cost", &self.cost);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta = ck.get("model")?;
        let h = crate::persist::parse_header(&meta.header)?;
        let likelihood = match (h.get("likelihood").map(String::as_str), meta.values.as_slice()) {
            (Some("bernoulli"), []) => ObsLikelihood::Bernoulli,
            (Some("gaussian"), [var]) => ObsLikelihood::Gaussian { var: *var },
            other => return Err(SolarError::Parse(format!("bad likelihood record {other:?}"))),
        };
        let action_dim = h
            .get("da")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| SolarError::Parse("model header lacks action dimension".into()))?;
        Self::from_parts(
            Mlp::read_section(ck, "encoder")?,
            Mlp::read_section(ck, "decoder")?,
            get_mniw(ck, "q_dyn")?,
            get_mniw(ck, "prior")?,
            get_cost(ck, "cost")?,
            likelihood,
            action_dim,
        )
    }
}

impl PotentialEncoder for Model {
    fn latent_dim(&self) -> usize {
        Model::latent_dim(self)
    }

    fn encode(&self, observation: &[f64]) -> Result<EvidencePotential> {
        encode(self, observation)
    }
}

pub fn encode(model: &Model, observation: &[f64]) -> Result<EvidencePotential> {
    let out = model.encoder.forward_one(&DVector::from_column_slice(observation))?;
    let head = GaussianHead::from_output(out.as_slice())?;
    EvidencePotential::from_mean_var(&head.mean, &head.var())
}

/// Standard-normal nodes and weights used for every marginal of one trajectory.
struct Nodes {
    /// `eps[t][k]`
    eps: Vec<Vec<DVector<f64>>>,
    weights: Vec<f64>,
}

impl Nodes {
    fn draw<R: Rng + ?Sized>(est: Estimator, t_len: usize, d: usize, rng: &mut R) -> Result<Self> {
        match est {
            Estimator::Sample { count } => {
                if count == 0 {
                    return Err(SolarError::Config("sample count must be positive".into()));
                }
                let eps = (0..t_len)
                    .map(|_| (0..count).map(|_| DVector::from_fn(d, |_, _| rng.sample(StandardNormal))).collect())
                    .collect();
                Ok(Self { eps, weights: vec![1.0 / count as f64; count] })
            }
            Estimator::GaussHermite { points } => {
                let (x, w) = gauss_hermite(points);
                let total = points.checked_pow(d as u32).filter(|&n| n <= 1 << 16).ok_or_else(|| {
                    SolarError::Config(format!("{points}^{d} quadrature nodes is too many"))
                })?;
                let mut grid = Vec::with_capacity(total);
                let mut weights = Vec::with_capacity(total);
                for mut k in 0..total {
                    let mut e = DVector::zeros(d);
                    let mut wk = 1.0;
                    for i in 0..d {
                        e[i] = x[k % points];
                        wk *= w[k % points];
                        k /= points;
                    }
                    grid.push(e);
                    weights.push(wk);
                }
                Ok(Self { eps: vec![grid; t_len], weights })
            }
        }
    }
}

/// Gaussian marginals `N(m_t, L_t L_tᵀ)` whose expectations are being taken.
struct Marginals {
    means: Vec<DVector<f64>>,
    chols: Vec<DMatrix<f64>>,
}

impl Marginals {
    fn from_smoothed(post: &SmoothedPosterior) -> Result<Self> {
        let chols = post.covs.iter().map(|c| cholesky(c, "smoothed marginal").map(|ch| ch.l())).collect::<Result<_>>()?;
        Ok(Self { means: post.means.clone(), chols })
    }

    fn from_heads(heads: &[GaussianHead]) -> Self {
        Self {
            means: heads.iter().map(|h| h.mean.clone()).collect(),
            chols: heads.iter().map(|h| DMatrix::from_diagonal(&h.logvar.map(|l| (0.5 * l).exp()))).collect(),
        }
    }

    fn point(&self, t: usize, eps: &DVector<f64>) -> DVector<f64> {
        &self.means[t] + &self.chols[t] * eps
    }

    /// Turns per-node adjoints of `s` into adjoints of `(m_t, L_t)`.
    fn pull_back(&self, nodes: &Nodes, grad_s: &[Vec<DVector<f64>>]) -> (Vec<DVector<f64>>, Vec<DMatrix<f64>>) {
        let d = self.means[0].len();
        let mut gm = Vec::with_capacity(self.means.len());
        let mut gl = Vec::with_capacity(self.means.len());
        for t in 0..self.means.len() {
            let mut m = DVector::zeros(d);
            let mut l = DMatrix::zeros(d, d);
            for (g, e) in grad_s[t].iter().zip(&nodes.eps[t]) {
                m += g;
                l += g * e.transpose();
            }
            gm.push(m);
            gl.push(l.lower_triangle());
        }
        (gm, gl)
    }
}

struct TermOut {
    value: f64,
    /// Weighted adjoints of each node, `[t][k]`.
    grad_s: Vec<Vec<DVector<f64>>>,
}

fn image_term(
    model: &Model,
    obs: &DMatrix<f64>,
    marg: &Marginals,
    nodes: &Nodes,
    grad_dec: &mut MlpGrad,
) -> Result<TermOut> {
    let t_len = obs.ncols();
    let k_len = nodes.weights.len();
    let d = model.latent_dim();
    let mut s = DMatrix::zeros(d, t_len * k_len);
    for t in 0..t_len {
        for k in 0..k_len {
            s.set_column(t * k_len + k, &marg.point(t, &nodes.eps[t][k]));
        }
    }
    let (y, cache) = model.decoder.forward(&s)?;
    let mut dy = DMatrix::zeros(y.nrows(), y.ncols());
    let mut value = 0.0;
    for t in 0..t_len {
        let o = obs.column(t);
        for (k, &w) in nodes.weights.iter().enumerate() {
            let col = t * k_len + k;
            for i in 0..y.nrows() {
                let z = y[(i, col)];
                let (ll, g) = match model.likelihood {
                    ObsLikelihood::Bernoulli => (o[i] * z - softplus(z), o[i] - sigmoid(z)),
                    ObsLikelihood::Gaussian { var } => {
                        let r = o[i] - z;
                        (-0.5 * (r * r / var + var.ln() + LN_2PI), r / var)
                    }
                };
                value += w * ll;
                dy[(i, col)] = w * g;
            }
        }
    }
    let (g, ds) = model.decoder.backward(&cache, &dy)?;
    grad_dec.add_assign(&g);
    let grad_s = (0..t_len).map(|t| (0..k_len).map(|k| ds.column(t * k_len + k).into_owned()).collect()).collect();
    Ok(TermOut { value, grad_s })
}

fn cost_term(
    model: &Model,
    seq: &TrainSeq,
    marg: &Marginals,
    nodes: &Nodes,
    grad_cost: &mut [f64],
) -> TermOut {
    let t_len = seq.horizon();
    let d = model.latent_dim();
    let k_len = nodes.weights.len();
    let mut grad_s = vec![vec![DVector::zeros(d); k_len]; t_len];
    let mut value = 0.0;
    let sparse = SparseCostParams { cost: model.cost.clone() };
    for t in 0..t_len {
        let a = &seq.actions[t];
        for (k, &w) in nodes.weights.iter().enumerate() {
            let s = marg.point(t, &nodes.eps[t][k]);
            let (ll, g) = match &seq.signal {
                CostSignal::None => continue,
                CostSignal::Dense(c) => {
                    let r = c[t] - model.cost.eval(&s, a);
                    (-0.5 * (r * r + LN_2PI), model.cost.grad(&s, a, r * w))
                }
                CostSignal::Sparse(f) => {
                    let (ll, g) = sparse_loglik_and_grad(&sparse, &s, a, f[t]);
                    let mut g = g;
                    g.quad *= w;
                    g.lin *= w;
                    g.offset *= w;
                    g.state *= w;
                    (ll, g)
                }
            };
            value += w * ll;
            QuadraticCost::flat_grad(&g).iter().zip(grad_cost.iter_mut()).for_each(|(a, b)| *b += a);
            grad_s[t][k] = g.state;
        }
    }
    TermOut { value, grad_s }
}

struct TrajOut {
    terms: ElboTerms,
    grad: ModelGrad,
    stats: Option<TransitionStats>,
}

fn traj_elbo<R: Rng + ?Sized>(
    model: &Model,
    seq: &TrainSeq,
    exps: &[MniwExpectations],
    est: Estimator,
    vae_only: bool,
    rng: &mut R,
) -> Result<TrajOut> {
    let t_len = seq.horizon();
    let d = model.latent_dim();
    let (heads, enc_cache) = model.heads(&seq.observations)?;
    let pots = heads.iter().map(|h| EvidencePotential::from_mean_var(&h.mean, &h.var())).collect::<Result<Vec<_>>>()?;
    let post = smooth_with_expectations(&pots, &seq.actions, exps)?;
    let smoothed = Marginals::from_smoothed(&post)?;
    let nodes = Nodes::draw(est, t_len, d, rng)?;

    let mut grad = ModelGrad { encoder: model.encoder.zero_grad(), decoder: model.decoder.zero_grad(), cost: vec![0.0; model.cost.num_params()] };
    let mut terms = ElboTerms::default();
    let cost = cost_term(model, seq, &smoothed, &nodes, &mut grad.cost);
    terms.cost = cost.value;

    let mut d_mean = vec![DVector::zeros(d); t_len];
    let mut d_logvar = vec![DVector::zeros(d); t_len];
    if vae_only {
        let marg = Marginals::from_heads(&heads);
        let img = image_term(model, &seq.observations, &marg, &nodes, &mut grad.decoder)?;
        terms.image = img.value;
        let (gm, gl) = marg.pull_back(&nodes, &img.grad_s);
        for (t, h) in heads.iter().enumerate() {
            let var = h.var();
            // KL(N(μ, v) ‖ N(0, I)) per step.
            terms.local -= 0.5 * (0..d).map(|i| var[i] + h.mean[i].powi(2) - 1.0 - h.logvar[i]).sum::<f64>();
            d_mean[t] = &gm[t] - &h.mean;
            d_logvar[t] = DVector::from_fn(d, |i, _| gl[t][(i, i)] * 0.5 * var[i].sqrt() - 0.5 * (var[i] - 1.0));
        }
    } else {
        let img = image_term(model, &seq.observations, &smoothed, &nodes, &mut grad.decoder)?;
        terms.image = img.value;
        terms.local = post.log_z - pots.iter().enumerate().map(|(t, p)| p.expected_log(&post.means[t], &post.covs[t])).sum::<f64>();
        let grad_s: Vec<Vec<DVector<f64>>> = img
            .grad_s
            .iter()
            .zip(&cost.grad_s)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
            .collect();
        let (mut gm, gl) = smoothed.pull_back(&nodes, &grad_s);
        let mut gp: Vec<DMatrix<f64>> = gl.iter().zip(&smoothed.chols).map(|(g, l)| cholesky_backward(l, g)).collect();
        // Indirect part of −Σ E[log ψ_t]; the explicit (h, J) partials cancel against log Z.
        for (t, p) in pots.iter().enumerate() {
            gm[t] -= &p.h - p.j.component_mul(&post.means[t]);
            for i in 0..d {
                gp[t][(i, i)] += 0.5 * p.j[i];
            }
        }
        let (dh, dj) = post.evidence_backprop(&gm, &gp);
        for (t, p) in pots.iter().enumerate() {
            d_mean[t] = dh[t].component_mul(&p.j);
            d_logvar[t] = -(dh[t].component_mul(&p.h) + dj[t].component_mul(&p.j));
        }
    }

    let mut d_out = DMatrix::zeros(2 * d, t_len);
    for (t, h) in heads.iter().enumerate() {
        for i in 0..d {
            d_out[(i, t)] = d_mean[t][i];
            d_out[(d + i, t)] = if h.clamped[i] { 0.0 } else { d_logvar[t][i] };
        }
    }
    let (g_enc, _) = model.encoder.backward(&enc_cache, &d_out)?;
    grad.encoder = g_enc;
    Ok(TrajOut { terms, grad, stats: post.total_stats() })
}

/// Bound on the minibatch's share of the log evidence, with gradients for the
/// encoder, decoder and cost, and expected dynamics statistics for `q(F, Σ)`.
///
/// `batches` is `B`, the number of minibatches covering the dataset.
pub fn elbo<R: Rng + ?Sized>(
    model: &Model,
    batch: &[TrainSeq],
    batches: f64,
    est: Estimator,
    vae_only: bool,
    rng: &mut R,
) -> Result<ElboOutput> {
    let first = batch.first().ok_or_else(|| SolarError::Empty("empty minibatch".into()))?;
    if !(batches >= 1.0) {
        return Err(SolarError::InvalidParameter("number of minibatches must be at least 1".into()));
    }
    let t_len = first.horizon();
    if batch.iter().any(|s| s.horizon() != t_len) {
        return Err(SolarError::Dimension("trajectories in a minibatch must share a horizon".into()));
    }
    if t_len < 2 {
        return Err(SolarError::Dimension("trajectories need at least two steps".into()));
    }
    let exps = vec![model.q_dyn.expectations()?; t_len - 1];
    let seeds: Vec<u64> = batch.iter().map(|_| rng.next_u64()).collect();
    let outs = batch
        .par_iter()
        .zip(seeds)
        .map(|(seq, seed)| traj_elbo(model, seq, &exps, est, vae_only, &mut ChaCha8Rng::seed_from_u64(seed)))
        .collect::<Result<Vec<_>>>()?;

    let mut terms = ElboTerms { dyn_kl: mniw_kl(&model.q_dyn, &model.prior)? / batches, ..Default::default() };
    let d = model.latent_dim();
    let mut stats = TransitionStats::zeros(d, d + model.action_dim);
    let mut grad = ModelGrad { encoder: model.encoder.zero_grad(), decoder: model.decoder.zero_grad(), cost: vec![0.0; model.cost.num_params()] };
    for o in &outs {
        terms.image += o.terms.image;
        terms.cost += o.terms.cost;
        terms.local += o.terms.local;
        grad.add_assign(&o.grad);
        if let Some(s) = &o.stats {
            stats += s;
        }
    }
    if let Some(term) = terms.first_non_finite() {
        return Err(SolarError::NonFinite(format!("ELBO {term} term")));
    }
    Ok(ElboOutput { value: terms.total(), terms, grad, stats })
}

/// `ω ← (1 − ρ) ω + ρ (ω⁰ + B · E[t])` in natural coordinates, halving `ρ`
/// while the result is not a valid MNIW.
pub fn natural_gradient_update(
    omega: &MniwParams,
    prior: &MniwParams,
    stats: &TransitionStats,
    batches: f64,
    step: f64,
) -> Result<MniwParams> {
    if !(0.0..=1.0).contains(&step) {
        return Err(SolarError::InvalidParameter(format!("natural-gradient step {step} outside [0, 1]")));
    }
    let current = omega.natural();
    let target = &prior.natural() + &stats.scale(batches);
    let mut rho = step;
    for _ in 0..=10 {
        let next = &(&current * (1.0 - rho)) + &(&target * rho);
        if let Ok(p) = MniwParams::from_natural(&next) {
            return Ok(p);
        }
        rho *= 0.5;
    }
    Err(SolarError::StepExhausted { halvings: 10 })
}

#[derive(Clone, Debug)]
pub struct TrainResult {
    pub model: Model,
    pub elbo_trace: Vec<f64>,
}

/// Alternates Adam steps on the networks and cost with natural-gradient steps on `q(F, Σ)`.
pub fn train_model(data: &[TrainSeq], init: Model, hyper: &TrainHyper) -> Result<TrainResult> {
    hyper.validate()?;
    if data.is_empty() {
        return Err(SolarError::Empty("no training trajectories".into()));
    }
    let mut model = init;
    let mut trace = Vec::with_capacity(hyper.iterations);
    if hyper.iterations == 0 {
        return Ok(TrainResult { model, elbo_trace: trace });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let batches = hyper.batches(data.len());
    let mut params = model.sgd_params();
    let mut adam = AdamState::new(params.len(), hyper.adam_step);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    let est = Estimator::Sample { count: hyper.samples };
    for it in 0..hyper.iterations {
        if cursor + hyper.minibatch > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let take = hyper.minibatch.min(order.len());
        let batch: Vec<TrainSeq> = order[cursor..cursor + take].iter().map(|&i| data[i].clone()).collect();
        cursor += take;
        let out = elbo(&model, &batch, batches, est, hyper.vae_only, &mut rng)
            .map_err(|e| SolarError::NonFinite(format!("training iteration {it}: {e}")))?;
        trace.push(out.value);
        let ascent: Vec<f64> = out.grad.flat().iter().map(|g| -g).collect();
        adam.step(&mut params, &ascent)?;
        model.set_sgd_params(&params)?;
        let q = natural_gradient_update(&model.q_dyn, &model.prior, &out.stats, batches, hyper.natgrad_step)?;
        model.q_dyn = q;
        if it % 100 == 0 {
            log::debug!("train iteration {it}: elbo {:.3}", out.value);
        }
    }
    Ok(TrainResult { model, elbo_trace: trace })
}
