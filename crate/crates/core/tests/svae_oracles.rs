use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use solar::costmodel::{CostParam, QuadraticCost};
use solar::envs::{run_episode, EnvConfig, ObsMode};
use solar::lingauss::{mniw_kl, mniw_sample, MniwParams};
use solar::nets::Mlp;
use solar::svae::{elbo, train_model, CostSignal, Estimator, Model, ModelConfig, ObsLikelihood, TrainHyper, TrainSeq};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

fn bernoulli_ll(o: &[f64], logits: &DVector<f64>) -> f64 {
    o.iter().zip(logits.iter()).map(|(o, z)| o * z - (1.0 + z.exp()).ln()).sum()
}

struct Tiny {
    model: Model,
    seq: TrainSeq,
    obs: Vec<Vec<f64>>,
    actions: Vec<f64>,
    costs: Vec<f64>,
}

/// One-dimensional latent, one-dimensional action, two steps, three binary pixels.
fn tiny(prior: MniwParams, q: MniwParams) -> Tiny {
    let mut r = ChaCha8Rng::seed_from_u64(11);
    let mut encoder = Mlp::random(&[3, 2], &mut r).unwrap();
    *encoder.weight_mut(0) = DMatrix::from_row_slice(2, 3, &[0.8, -0.5, 0.3, 0.2, -0.4, 0.1]);
    *encoder.bias_mut(0) = DVector::from_vec(vec![0.1, -0.3]);
    // Hidden kinks sit far outside the posterior mass so quadrature sees a smooth integrand.
    let mut decoder = Mlp::random(&[1, 4, 3], &mut r).unwrap();
    *decoder.weight_mut(0) = DMatrix::from_column_slice(4, 1, &[0.6, -0.4, 0.3, -0.7]);
    *decoder.bias_mut(0) = DVector::from_element(4, 9.0);
    *decoder.bias_mut(1) = DVector::from_vec(vec![-3.0, -4.0, 2.0]);
    let cost = QuadraticCost::new(DMatrix::from_element(1, 1, 1.5), DVector::from_vec(vec![-0.4]), 0.05, 0.2).unwrap();
    let model = Model::from_parts(encoder, decoder, q, prior, cost, ObsLikelihood::Bernoulli, 1).unwrap();
    let obs = vec![vec![1.0, 0.0, 1.0], vec![0.0, 1.0, 1.0]];
    let actions = vec![0.7, -0.2];
    let costs = vec![0.9, 0.3];
    let seq = TrainSeq::new(&obs, &[vec![actions[0]], vec![actions[1]]], CostSignal::Dense(costs.clone())).unwrap();
    Tiny { model, seq, obs, actions, costs }
}

struct Grid {
    points: Vec<f64>,
    step: f64,
}

impl Grid {
    fn new(lo: f64, hi: f64, n: usize) -> Self {
        let step = (hi - lo) / (n - 1) as f64;
        Self { points: (0..n).map(|i| lo + i as f64 * step).collect(), step }
    }
}

/// Per-step log-likelihood of the observation and cost at each grid node.
fn step_loglik(t: &Tiny, grid: &Grid) -> Vec<Vec<f64>> {
    (0..2)
        .map(|k| {
            grid.points
                .iter()
                .map(|&s| {
                    let logits = t.model.decoder().forward_one(&DVector::from_vec(vec![s])).unwrap();
                    let c_hat = 0.5 * 1.5 * s * s - 0.4 * s + 0.05 * t.actions[k].powi(2) + 0.2;
                    bernoulli_ll(&t.obs[k], &logits) - 0.5 * ((t.costs[k] - c_hat).powi(2) + LN_2PI)
                })
                .collect()
        })
        .collect()
}

/// ELBO by explicit conditioning of the two-step joint on a dense grid.
fn grid_elbo(t: &Tiny, batches: f64) -> f64 {
    let grid = Grid::new(-10.0, 10.0, 1201);
    let n = grid.points.len();
    let enc: Vec<(f64, f64)> = t
        .obs
        .iter()
        .map(|o| {
            let y = t.model.encoder().forward_one(&DVector::from_column_slice(o)).unwrap();
            (y[0], y[1].clamp(-10.0, 5.0).exp())
        })
        .collect();
    let e = t.model.q_dyn().expectations().unwrap();
    let (si, sif, fsf, ld) = (e.sigma_inv[(0, 0)], &e.sigma_inv_f, &e.ft_sigma_inv_f, e.logdet_sigma);
    let a = t.actions[0];
    let prior_chain = |s1: f64, s2: f64| {
        let x = [s1, a];
        let quad: f64 = (0..2).map(|i| (0..2).map(|j| x[i] * fsf[(i, j)] * x[j]).sum::<f64>()).sum();
        let lin = s2 * (sif[(0, 0)] * s1 + sif[(0, 1)] * a);
        -0.5 * s1 * s1 - 0.5 * LN_2PI + (-0.5 * si * s2 * s2 + lin - 0.5 * quad - 0.5 * ld - 0.5 * LN_2PI)
    };
    let log_psi = |k: usize, s: f64| {
        let (m, v) = enc[k];
        m / v * s - 0.5 * s * s / v
    };
    let mut log_joint = vec![0.0; n * n];
    let mut max = f64::NEG_INFINITY;
    for (i, &s1) in grid.points.iter().enumerate() {
        for (j, &s2) in grid.points.iter().enumerate() {
            let v = prior_chain(s1, s2) + log_psi(0, s1) + log_psi(1, s2);
            log_joint[i * n + j] = v;
            max = max.max(v);
        }
    }
    let area = grid.step * grid.step;
    let z: f64 = log_joint.iter().map(|v| (v - max).exp()).sum::<f64>() * area;
    let log_z = max + z.ln();
    let ll = step_loglik(t, &grid);
    let mut expect = 0.0;
    for i in 0..n {
        for j in 0..n {
            let lq = log_joint[i * n + j] - log_z;
            let q = lq.exp() * area;
            if q == 0.0 {
                continue;
            }
            let s1 = grid.points[i];
            let s2 = grid.points[j];
            expect += q * (ll[0][i] + ll[1][j] + prior_chain(s1, s2) - lq);
        }
    }
    expect - mniw_kl(t.model.q_dyn(), t.model.prior()).unwrap() / batches
}

fn concentrated(nu: f64) -> MniwParams {
    MniwParams::new(
        DMatrix::from_element(1, 1, 0.4 * nu),
        nu,
        DMatrix::from_row_slice(1, 2, &[0.8, 0.3]),
        DMatrix::from_diagonal(&DVector::from_vec(vec![0.05, 0.08])),
    )
    .unwrap()
}

#[test]
fn elbo_matches_grid_integration() {
    let q = MniwParams::new(
        DMatrix::from_element(1, 1, 0.6),
        5.0,
        DMatrix::from_row_slice(1, 2, &[0.7, -0.2]),
        DMatrix::from_diagonal(&DVector::from_vec(vec![0.3, 0.2])),
    )
    .unwrap();
    let t = tiny(MniwParams::default_prior(1, 1), q);
    let out = elbo(&t.model, std::slice::from_ref(&t.seq), 2.0, Estimator::GaussHermite { points: 80 }, false, &mut ChaCha8Rng::seed_from_u64(0))
        .unwrap();
    let oracle = grid_elbo(&t, 2.0);
    assert!((out.value - oracle).abs() < 1e-3, "elbo {} vs grid {}", out.value, oracle);
}

#[test]
fn elbo_lower_bounds_the_log_evidence() {
    let prior = concentrated(40.0);
    let t = tiny(prior.clone(), concentrated(60.0));
    let out = elbo(&t.model, std::slice::from_ref(&t.seq), 1.0, Estimator::GaussHermite { points: 80 }, false, &mut ChaCha8Rng::seed_from_u64(0))
        .unwrap();

    // log p(o, c | a) = log E_θ ∫ p(s | a, θ) p(o, c | s, a) ds, with θ drawn from the prior.
    let grid = Grid::new(-8.0, 8.0, 321);
    let ll = step_loglik(&t, &grid);
    let lik: Vec<Vec<f64>> = ll.iter().map(|v| v.iter().map(|x| x.exp()).collect()).collect();
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let draws = 4000;
    let mut acc = 0.0;
    for _ in 0..draws {
        let (f, sigma) = mniw_sample(&prior, &mut r).unwrap();
        let var = sigma[(0, 0)];
        let mut inner = 0.0;
        for (i, &s1) in grid.points.iter().enumerate() {
            let p1 = (-0.5 * s1 * s1).exp() / LN_2PI.exp().sqrt();
            let mean = f[(0, 0)] * s1 + f[(0, 1)] * t.actions[0];
            let mut row = 0.0;
            for (j, &s2) in grid.points.iter().enumerate() {
                row += (-0.5 * (s2 - mean).powi(2) / var).exp() * lik[1][j];
            }
            inner += p1 * lik[0][i] * row / (2.0 * std::f64::consts::PI * var).sqrt();
        }
        acc += inner * grid.step * grid.step;
    }
    let log_evidence = (acc / draws as f64).ln();
    assert!(out.value <= log_evidence + 1e-3, "elbo {} exceeds log evidence {}", out.value, log_evidence);
    assert!(out.value > log_evidence - 10.0, "bound is implausibly loose: {} vs {}", out.value, log_evidence);
}

fn identity_state_model(action_dim: usize) -> Model {
    let d = 2;
    let mut r = ChaCha8Rng::seed_from_u64(0);
    let cfg = ModelConfig {
        latent_dim: d,
        action_dim,
        obs_dim: d,
        encoder_hidden: vec![],
        decoder_hidden: vec![],
        likelihood: ObsLikelihood::Gaussian { var: 1e-2 },
        cost_param: CostParam::Full,
        action_weight: 0.0,
    };
    let mut model = Model::new(&cfg, &mut r).unwrap();
    let mut w = DMatrix::zeros(2 * d, d);
    w.view_mut((0, 0), (d, d)).fill_with_identity();
    *model.encoder_mut().weight_mut(0) = w;
    *model.encoder_mut().bias_mut(0) = DVector::from_vec(vec![0.0, 0.0, (1e-3f64).ln(), (1e-3f64).ln()]);
    *model.decoder_mut().weight_mut(0) = DMatrix::identity(d, d);
    *model.decoder_mut().bias_mut(0) = DVector::zeros(d);
    model
}

#[test]
fn recovers_linear_dynamics_from_state_observations() {
    let f_true = DMatrix::from_row_slice(2, 4, &[0.95, 0.1, 0.2, 0.0, -0.05, 0.9, 0.0, 0.2]);
    let noise = 0.05;
    let mut r = ChaCha8Rng::seed_from_u64(21);
    let data: Vec<TrainSeq> = (0..40)
        .map(|_| {
            let mut s = DVector::from_fn(2, |_, _| r.sample::<f64, _>(StandardNormal));
            let mut obs = Vec::new();
            let mut acts = Vec::new();
            for _ in 0..30 {
                let a = DVector::from_fn(2, |_, _| r.sample::<f64, _>(StandardNormal));
                obs.push(s.as_slice().to_vec());
                acts.push(a.as_slice().to_vec());
                let x = DVector::from_iterator(4, s.iter().chain(a.iter()).copied());
                s = &f_true * x + DVector::from_fn(2, |_, _| noise * r.sample::<f64, _>(StandardNormal));
            }
            TrainSeq::new(&obs, &acts, CostSignal::None).unwrap()
        })
        .collect();
    let hyper = TrainHyper { natgrad_step: 0.2, adam_step: 1e-3, minibatch: 8, iterations: 150, samples: 1, seed: 3, vae_only: false };
    let trained = train_model(&data, identity_state_model(2), &hyper).unwrap();
    let m0 = trained.model.q_dyn().m0();
    let err = (m0 - &f_true).abs().max();
    assert!(err < 0.1, "E[F] = {m0} differs from true F by {err}");
}

fn moving_average(xs: &[f64], w: usize) -> Vec<f64> {
    xs.windows(w).map(|s| s.iter().sum::<f64>() / w as f64).collect()
}

#[test]
fn nav_pretraining_elbo_trend_increases() {
    let env = EnvConfig::nav_fixed_goal().with_mode(ObsMode::Image);
    let mut r = ChaCha8Rng::seed_from_u64(4);
    let data: Vec<TrainSeq> = (0..100)
        .map(|_| {
            let tr = run_episode(&env, &mut r, |_, _, rng| {
                Ok(vec![rng.sample::<f64, _>(StandardNormal), rng.sample::<f64, _>(StandardNormal)])
            })
            .unwrap();
            TrainSeq::new(&tr.observations, &tr.actions, CostSignal::Dense(tr.costs.clone())).unwrap()
        })
        .collect();
    let cfg = ModelConfig {
        latent_dim: 4,
        action_dim: 2,
        obs_dim: env.obs_dim(),
        encoder_hidden: vec![32],
        decoder_hidden: vec![32],
        likelihood: ObsLikelihood::Bernoulli,
        cost_param: CostParam::Full,
        action_weight: 0.001,
    };
    let model = Model::new(&cfg, &mut r).unwrap();
    let hyper = TrainHyper { natgrad_step: 1e-2, adam_step: 1e-3, minibatch: 4, iterations: 1000, samples: 1, seed: 9, vae_only: false };
    let trace = train_model(&data, model, &hyper).unwrap().elbo_trace;
    let avg = moving_average(&trace, 500);
    assert!(avg.last().unwrap() > avg.first().unwrap(), "{} -> {}", avg[0], avg.last().unwrap());
}

