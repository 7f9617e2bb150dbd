//! Fully connected networks with ReLU hidden layers, exact reverse-mode
//! gradients over column batches, and the Adam optimiser.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Result, SolarError};
use crate::persist::Checkpoint;

pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 5.0;

#[derive(Clone, Debug)]
pub struct Mlp {
    widths: Vec<usize>,
    weights: Vec<DMatrix<f64>>,
    biases: Vec<DVector<f64>>,
    /// Bumped on every parameter change so stale caches can be detected.
    generation: u64,
}

impl PartialEq for Mlp {
    fn eq(&self, other: &Self) -> bool {
        self.widths == other.widths && self.weights == other.weights && self.biases == other.biases
    }
}

/// Activations saved by a forward pass.
#[derive(Clone, Debug)]
pub struct MlpCache {
    inputs: Vec<DMatrix<f64>>,
    generation: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpGrad {
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
}

impl MlpGrad {
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }

    pub fn add_assign(&mut self, other: &MlpGrad) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
    }
}

impl Mlp {
    pub fn zeros(widths: &[usize]) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(SolarError::Config(format!("invalid layer widths {widths:?}")));
        }
        Ok(Self {
            widths: widths.to_vec(),
            weights: widths.windows(2).map(|w| DMatrix::zeros(w[1], w[0])).collect(),
            biases: widths[1..].iter().map(|&n| DVector::zeros(n)).collect(),
            generation: 0,
        })
    }

    /// He-scaled Gaussian weights, zero biases.
    pub fn random<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(widths)?;
        for w in &mut net.weights {
            let scale = (2.0 / w.ncols() as f64).sqrt();
            w.iter_mut().for_each(|v| *v = scale * rng.sample::<f64, _>(StandardNormal));
        }
        Ok(net)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("at least two widths")
    }

    pub fn layers(&self) -> usize {
        self.weights.len()
    }

    pub fn weight_mut(&mut self, layer: usize) -> &mut DMatrix<f64> {
        self.generation += 1;
        &mut self.weights[layer]
    }

    pub fn bias_mut(&mut self, layer: usize) -> &mut DVector<f64> {
        self.generation += 1;
        &mut self.biases[layer]
    }

    pub fn weight(&self, layer: usize) -> &DMatrix<f64> {
        &self.weights[layer]
    }

    pub fn bias(&self, layer: usize) -> &DVector<f64> {
        &self.biases[layer]
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().zip(&self.biases).map(|(w, b)| w.len() + b.len()).sum()
    }

    /// Weights (column-major) then biases, layer by layer.
    pub fn params(&self) -> Vec<f64> {
        MlpGrad { weights: self.weights.clone(), biases: self.biases.clone() }.flat()
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(SolarError::Dimension(format!(
                "network has {} parameters, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let mut k = 0;
        for (w, b) in self.weights.iter_mut().zip(&mut self.biases) {
            w.copy_from_slice(&flat[k..k + w.len()]);
            k += w.len();
            b.copy_from_slice(&flat[k..k + b.len()]);
            k += b.len();
        }
        self.generation += 1;
        Ok(())
    }

    pub fn zero_grad(&self) -> MlpGrad {
        MlpGrad {
            weights: self.weights.iter().map(|w| DMatrix::zeros(w.nrows(), w.ncols())).collect(),
            biases: self.biases.iter().map(|b| DVector::zeros(b.len())).collect(),
        }
    }

    /// Forward pass over the columns of `x`.
    pub fn forward(&self, x: &DMatrix<f64>) -> Result<(DMatrix<f64>, MlpCache)> {
        if x.nrows() != self.input_dim() {
            return Err(SolarError::Dimension(format!(
                "network input has {} rows, expected {}",
                x.nrows(),
                self.input_dim()
            )));
        }
        let mut inputs = Vec::with_capacity(self.layers());
        let mut h = x.clone();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = w * &h;
            for mut col in z.column_iter_mut() {
                col += b;
            }
            if l + 1 < self.layers() {
                z.apply(|v| *v = v.max(0.0));
            }
            inputs.push(std::mem::replace(&mut h, z));
        }
        Ok((h, MlpCache { inputs, generation: self.generation }))
    }

    pub fn forward_one(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let (y, _) = self.forward(&DMatrix::from_column_slice(x.len(), 1, x.as_slice()))?;
        Ok(y.column(0).into_owned())
    }

    /// Reverse pass: parameter gradients and the gradient with respect to the input.
    pub fn backward(&self, cache: &MlpCache, grad_out: &DMatrix<f64>) -> Result<(MlpGrad, DMatrix<f64>)> {
        if cache.generation != self.generation {
            return Err(SolarError::StaleCache("parameters changed since the forward pass".into()));
        }
        let batch = cache.inputs[0].ncols();
        if grad_out.nrows() != self.output_dim() || grad_out.ncols() != batch {
            return Err(SolarError::Dimension("output gradient has the wrong shape".into()));
        }
        let mut grad = self.zero_grad();
        let mut delta = grad_out.clone();
        for l in (0..self.layers()).rev() {
            let input = &cache.inputs[l];
            grad.weights[l] = &delta * input.transpose();
            grad.biases[l] = delta.column_sum();
            let mut back = self.weights[l].transpose() * &delta;
            if l > 0 {
                // input is the ReLU output of the previous layer.
                back.zip_apply(input, |g, a| {
                    if a <= 0.0 {
                        *g = 0.0
                    }
                });
            }
            delta = back;
        }
        Ok((grad, delta))
    }

    pub fn apply_flat_update(&mut self, delta: &[f64]) -> Result<()> {
        let mut p = self.params();
        if delta.len() != p.len() {
            return Err(SolarError::Dimension("update has the wrong length".into()));
        }
        p.iter_mut().zip(delta).for_each(|(a, d)| *a += d);
        self.set_params(&p)
    }

    pub fn write_sections(&self, ck: &mut Checkpoint, name: &str) {
        let header = format!(
            "widths={}",
            self.widths.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
        );
        ck.push(name, header, self.params());
    }

    pub fn read_section(ck: &Checkpoint, name: &str) -> Result<Self> {
        let sec = ck.get(name)?;
        let widths = sec
            .header
            .strip_prefix("widths=")
            .ok_or_else(|| SolarError::Parse(format!("section {name} lacks layer widths")))?
            .split(',')
            .map(|s| s.parse::<usize>().map_err(|e| SolarError::Parse(e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        let mut net = Self::zeros(&widths)?;
        net.set_params(&sec.values)?;
        Ok(net)
    }
}

/// Mean and clamped log-variance read off the two halves of a network output.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianHead {
    pub mean: DVector<f64>,
    pub logvar: DVector<f64>,
    /// Entries where the raw log-variance hit a clamp; their gradient is zero.
    pub clamped: Vec<bool>,
}

impl GaussianHead {
    pub fn from_output(out: &[f64]) -> Result<Self> {
        if out.len() % 2 != 0 {
            return Err(SolarError::Dimension("Gaussian head needs an even output width".into()));
        }
        let d = out.len() / 2;
        let raw = &out[d..];
        Ok(Self {
            mean: DVector::from_column_slice(&out[..d]),
            logvar: DVector::from_iterator(d, raw.iter().map(|v| v.clamp(LOGVAR_MIN, LOGVAR_MAX))),
            clamped: raw.iter().map(|v| !(LOGVAR_MIN..=LOGVAR_MAX).contains(v)).collect(),
        })
    }

    pub fn var(&self) -> DVector<f64> {
        self.logvar.map(f64::exp)
    }
}

/// `s = μ + exp(½ logvar) ⊙ ε` with `ε ~ N(0, I)`; returns the sample and the noise.
pub fn reparam_sample<R: Rng + ?Sized>(head: &GaussianHead, rng: &mut R) -> (DVector<f64>, DVector<f64>) {
    let eps = DVector::from_fn(head.mean.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
    (reparam_with(head, &eps), eps)
}

pub fn reparam_with(head: &GaussianHead, eps: &DVector<f64>) -> DVector<f64> {
    &head.mean + head.logvar.map(|l| (0.5 * l).exp()).component_mul(eps)
}

/// Pulls `∂L/∂s` back to `(∂L/∂μ, ∂L/∂logvar)` for a fixed noise draw.
pub fn reparam_backward(head: &GaussianHead, eps: &DVector<f64>, grad_s: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
    let mut g_lv = DVector::from_fn(eps.len(), |i, _| grad_s[i] * 0.5 * (0.5 * head.logvar[i]).exp() * eps[i]);
    for (g, &c) in g_lv.iter_mut().zip(&head.clamped) {
        if c {
            *g = 0.0;
        }
    }
    (grad_s.clone(), g_lv)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize, lr: f64) -> Self {
        Self { step: 0, m: vec![0.0; len], v: vec![0.0; len], lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    /// Descends on `grads` (pass negated gradients to ascend).
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(SolarError::Dimension("Adam state does not match parameters".into()));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(SolarError::NonFinite("gradient passed to Adam".into()));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Central finite-difference check of a network gradient; returns the worst relative error.
#[doc(hidden)]
pub fn max_relative_fd_error<F>(params: &[f64], analytic: &[f64], h: f64, mut f: F) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    let mut p = params.to_vec();
    let mut worst = 0.0f64;
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + h;
        let fp = f(&p);
        p[i] = orig - h;
        let fm = f(&p);
        p[i] = orig;
        let fd = (fp - fm) / (2.0 * h);
        let err = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-4);
        worst = worst.max(err);
    }
    worst
}
