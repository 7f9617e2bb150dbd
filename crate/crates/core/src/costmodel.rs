//! Quadratic latent cost models, least-squares cost fitting and the Bernoulli
//! success model used when only sparse binary labels are available.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Result, SolarError};
use crate::linalg::{psd_factor, psd_project, symmetrize};

pub const DEFAULT_ACTION_WEIGHT: f64 = 0.001;
pub const DEFAULT_RIDGE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostParam {
    Full,
    PsdCholesky,
}

/// `ĉ(s, a) = ½ sᵀ C s + cᵀ s + α ‖a‖² + b`.
///
/// Under [`CostParam::PsdCholesky`] the free parameters are the entries of a
/// lower-triangular `L` and `C = L Lᵀ`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticCost {
    quad: DMatrix<f64>,
    factor: Option<DMatrix<f64>>,
    pub lin: DVector<f64>,
    pub alpha: f64,
    pub offset: f64,
}

/// Derivatives of `ĉ` (or of a scalar multiple of it) at one point.
#[derive(Clone, Debug)]
pub struct CostGrad {
    /// With respect to `C` (full) or `L` (psd_cholesky).
    pub quad: DMatrix<f64>,
    pub lin: DVector<f64>,
    pub offset: f64,
    pub state: DVector<f64>,
    pub action: DVector<f64>,
}

/// Time-step cost written as a quadratic in `x = [s; a]`: `½ xᵀ cxx x + cxᵀ x + c0`.
#[derive(Clone, Debug, PartialEq)]
pub struct StepCost {
    pub cxx: DMatrix<f64>,
    pub cx: DVector<f64>,
    pub c0: f64,
}

impl StepCost {
    pub fn zeros(n: usize) -> Self {
        Self { cxx: DMatrix::zeros(n, n), cx: DVector::zeros(n), c0: 0.0 }
    }

    pub fn eval(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.cxx * x)) + self.cx.dot(x) + self.c0
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self { cxx: &self.cxx * k, cx: &self.cx * k, c0: self.c0 * k }
    }
}

impl QuadraticCost {
    pub fn new(quad: DMatrix<f64>, lin: DVector<f64>, alpha: f64, offset: f64) -> Result<Self> {
        if quad.nrows() != lin.len() || quad.ncols() != lin.len() {
            return Err(SolarError::Dimension("cost matrix and vector disagree".into()));
        }
        if alpha < 0.0 {
            return Err(SolarError::InvalidParameter(format!("action weight {alpha} is negative")));
        }
        ensure_finite(quad.iter().chain(lin.iter()).chain([alpha, offset].iter()), "quadratic cost")?;
        Ok(Self { quad: symmetrize(&quad), factor: None, lin, alpha, offset })
    }

    /// PSD parameterisation through a lower-triangular factor; the upper triangle
    /// is ignored and negative diagonal entries are flipped.
    pub fn from_factor(factor: DMatrix<f64>, lin: DVector<f64>, alpha: f64, offset: f64) -> Result<Self> {
        let mut l = factor.lower_triangle();
        for j in 0..l.ncols() {
            if l[(j, j)] < 0.0 {
                let col = -l.column(j);
                l.set_column(j, &col);
            }
        }
        let mut qc = Self::new(&l * l.transpose(), lin, alpha, offset)?;
        qc.factor = Some(l);
        Ok(qc)
    }

    pub fn zeros(state_dim: usize, alpha: f64) -> Self {
        Self::new(DMatrix::zeros(state_dim, state_dim), DVector::zeros(state_dim), alpha, 0.0).expect("valid")
    }

    pub fn param(&self) -> CostParam {
        if self.factor.is_some() {
            CostParam::PsdCholesky
        } else {
            CostParam::Full
        }
    }

    pub fn state_dim(&self) -> usize {
        self.lin.len()
    }

    pub fn quad(&self) -> &DMatrix<f64> {
        &self.quad
    }

    pub fn factor(&self) -> Option<&DMatrix<f64>> {
        self.factor.as_ref()
    }

    pub fn eval(&self, s: &DVector<f64>, a: &DVector<f64>) -> f64 {
        0.5 * s.dot(&(&self.quad * s)) + self.lin.dot(s) + self.alpha * a.norm_squared() + self.offset
    }

    /// Gradient of `scale · ĉ(s, a)`.
    pub fn grad(&self, s: &DVector<f64>, a: &DVector<f64>, scale: f64) -> CostGrad {
        let ss = s * s.transpose();
        let quad = match &self.factor {
            None => &ss * (0.5 * scale),
            Some(l) => (&ss * l).lower_triangle() * scale,
        };
        CostGrad {
            quad,
            lin: s * scale,
            offset: scale,
            state: (&self.quad * s + &self.lin) * scale,
            action: a * (2.0 * self.alpha * scale),
        }
    }

    /// Free parameters in a flat vector: the matrix (`C` or `L`, column-major), `c`, `b`.
    pub fn to_flat(&self) -> Vec<f64> {
        let m = self.factor.as_ref().unwrap_or(&self.quad);
        m.iter().chain(self.lin.iter()).cloned().chain(std::iter::once(self.offset)).collect()
    }

    pub fn flat_grad(g: &CostGrad) -> Vec<f64> {
        g.quad.iter().chain(g.lin.iter()).cloned().chain(std::iter::once(g.offset)).collect()
    }

    pub fn num_params(&self) -> usize {
        let d = self.state_dim();
        d * d + d + 1
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        let d = self.state_dim();
        if flat.len() != self.num_params() {
            return Err(SolarError::Dimension(format!(
                "cost expects {} parameters, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let m = DMatrix::from_column_slice(d, d, &flat[..d * d]);
        let lin = DVector::from_column_slice(&flat[d * d..d * d + d]);
        let offset = flat[d * d + d];
        *self = match self.param() {
            CostParam::Full => Self::new(m, lin, self.alpha, offset)?,
            CostParam::PsdCholesky => Self::from_factor(m, lin, self.alpha, offset)?,
        };
        Ok(())
    }

    /// The same cost in `[s; a]` coordinates.
    pub fn step_cost(&self, action_dim: usize) -> StepCost {
        let d = self.state_dim();
        let n = d + action_dim;
        let mut cxx = DMatrix::zeros(n, n);
        cxx.view_mut((0, 0), (d, d)).copy_from(&self.quad);
        for i in d..n {
            cxx[(i, i)] = 2.0 * self.alpha;
        }
        let mut cx = DVector::zeros(n);
        cx.rows_mut(0, d).copy_from(&self.lin);
        StepCost { cxx, cx, c0: self.offset }
    }
}

pub fn eval_cost(qc: &QuadraticCost, s: &DVector<f64>, a: &DVector<f64>) -> f64 {
    qc.eval(s, a)
}

/// `ĉ(s, 0) = weight · ‖s − goal‖²`.
pub fn goal_state_cost(goal: &DVector<f64>, weight: f64, alpha: f64) -> Result<QuadraticCost> {
    ensure_finite(goal.iter(), "goal")?;
    let d = goal.len();
    QuadraticCost::new(
        DMatrix::identity(d, d) * (2.0 * weight),
        goal * (-2.0 * weight),
        alpha,
        weight * goal.norm_squared(),
    )
}

/// Monomials `s_i s_j (i ≤ j)`, `s_i`, `1`.
fn quadratic_features(s: &DVector<f64>) -> Vec<f64> {
    let d = s.len();
    let mut f = Vec::with_capacity(d * (d + 1) / 2 + d + 1);
    for i in 0..d {
        for j in i..d {
            f.push(s[i] * s[j]);
        }
    }
    f.extend(s.iter());
    f.push(1.0);
    f
}

fn cost_from_weights(w: &DVector<f64>, d: usize, alpha: f64) -> Result<QuadraticCost> {
    let mut quad = DMatrix::zeros(d, d);
    let mut k = 0;
    for i in 0..d {
        for j in i..d {
            if i == j {
                quad[(i, i)] = 2.0 * w[k];
            } else {
                quad[(i, j)] = w[k];
                quad[(j, i)] = w[k];
            }
            k += 1;
        }
    }
    let lin = DVector::from_iterator(d, w.rows(k, d).iter().cloned());
    QuadraticCost::new(quad, lin, alpha, w[k + d])
}

fn check_samples(states: &[DVector<f64>], actions: &[DVector<f64>], n_targets: usize) -> Result<usize> {
    if states.is_empty() {
        return Err(SolarError::Empty("no cost samples".into()));
    }
    if states.len() != actions.len() || states.len() != n_targets {
        return Err(SolarError::Dimension("cost samples are not aligned".into()));
    }
    let d = states[0].len();
    if states.iter().any(|s| s.len() != d) {
        return Err(SolarError::Dimension("states differ in dimension".into()));
    }
    Ok(d)
}

/// Ridge-regularised least-squares fit of `(C, c, b)` with known action weight `alpha`.
pub fn fit_local_quadratic(
    states: &[DVector<f64>],
    actions: &[DVector<f64>],
    costs: &[f64],
    alpha: f64,
    ridge: f64,
    param: CostParam,
) -> Result<QuadraticCost> {
    let d = check_samples(states, actions, costs.len())?;
    if ridge < 0.0 {
        return Err(SolarError::InvalidParameter("negative ridge".into()));
    }
    let p = d * (d + 1) / 2 + d + 1;
    let n = states.len();
    let extra = if ridge > 0.0 { p } else { 0 };
    let mut x = DMatrix::zeros(n + extra, p);
    let mut y = DVector::zeros(n + extra);
    for (r, ((s, a), c)) in states.iter().zip(actions).zip(costs).enumerate() {
        for (k, v) in quadratic_features(s).into_iter().enumerate() {
            x[(r, k)] = v;
        }
        y[r] = c - alpha * a.norm_squared();
    }
    for k in 0..extra {
        x[(n + k, k)] = ridge.sqrt();
    }
    ensure_finite(x.iter().chain(y.iter()), "cost regression data")?;
    let svd = x.svd(true, true);
    let smax = svd.singular_values.max();
    let tol = smax * 1e-12 * (n + extra).max(p) as f64;
    if svd.singular_values.len() < p || svd.singular_values.iter().any(|&sv| sv <= tol) {
        return Err(SolarError::Singular("cost design matrix is rank deficient; use ridge > 0".into()));
    }
    let w = svd.solve(&y, 0.0).map_err(|e| SolarError::Singular(e.to_string()))?;
    let fitted = cost_from_weights(&w, d, alpha)?;
    match param {
        CostParam::Full => Ok(fitted),
        CostParam::PsdCholesky => {
            let projected = psd_project(fitted.quad());
            QuadraticCost::from_factor(psd_factor(&projected), fitted.lin, alpha, fitted.offset)
        }
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Success probability model `p(f = 1 | s, a) = sigmoid(−ĉ(s, a))`.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseCostParams {
    pub cost: QuadraticCost,
}

impl SparseCostParams {
    pub fn success_probability(&self, s: &DVector<f64>, a: &DVector<f64>) -> f64 {
        sigmoid(-self.cost.eval(s, a))
    }
}

/// Bernoulli log-likelihood of label `f` and its gradient.
pub fn sparse_loglik_and_grad(
    params: &SparseCostParams,
    s: &DVector<f64>,
    a: &DVector<f64>,
    f: bool,
) -> (f64, CostGrad) {
    let c = params.cost.eval(s, a);
    let (ll, dll_dc) = if f {
        (-softplus(c), -sigmoid(c))
    } else {
        (-softplus(-c), sigmoid(-c))
    };
    (ll, params.cost.grad(s, a, dll_dc))
}

/// Regularised logistic regression (Newton / IRLS) of labels on quadratic features.
pub fn fit_sparse_cost(
    states: &[DVector<f64>],
    actions: &[DVector<f64>],
    labels: &[bool],
    alpha: f64,
    ridge: f64,
) -> Result<SparseCostParams> {
    let d = check_samples(states, actions, labels.len())?;
    if ridge <= 0.0 {
        return Err(SolarError::InvalidParameter("logistic fit needs ridge > 0".into()));
    }
    let p = d * (d + 1) / 2 + d + 1;
    let feats: Vec<DVector<f64>> = states.iter().map(|s| DVector::from_vec(quadratic_features(s))).collect();
    let act: Vec<f64> = actions.iter().map(|a| alpha * a.norm_squared()).collect();
    let objective = |w: &DVector<f64>| -> f64 {
        let mut ll = 0.0;
        for ((x, &ac), &f) in feats.iter().zip(&act).zip(labels) {
            let c = w.dot(x) + ac;
            ll -= if f { softplus(c) } else { softplus(-c) };
        }
        ll - 0.5 * ridge * w.norm_squared()
    };
    let mut w = DVector::zeros(p);
    let mut current = objective(&w);
    for _ in 0..100 {
        let mut grad = -&w * ridge;
        let mut hess = DMatrix::identity(p, p) * ridge;
        for ((x, &ac), &f) in feats.iter().zip(&act).zip(labels) {
            let c = w.dot(x) + ac;
            let prob = sigmoid(-c);
            grad += x * (prob - f as u8 as f64);
            hess += x * x.transpose() * (prob * (1.0 - prob));
        }
        let step = crate::linalg::cholesky(&hess, "logistic Hessian")?.solve(&grad);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let cand = &w + &step * t;
            let val = objective(&cand);
            if val >= current {
                let gain = val - current;
                w = cand;
                current = val;
                accepted = gain > 1e-12 * (1.0 + current.abs());
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Ok(SparseCostParams { cost: cost_from_weights(&w, d, alpha)? })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    #[test]
    fn evaluation_examples() {
        let qc = QuadraticCost::new(DMatrix::identity(2, 2), v(&[0.0, 0.0]), 0.0, 0.0).unwrap();
        assert_eq!(qc.eval(&v(&[1.0, 1.0]), &v(&[0.0])), 1.0);
        let qc = QuadraticCost::new(DMatrix::identity(2, 2), v(&[0.3, 0.1]), 0.5, 2.5).unwrap();
        assert_eq!(qc.eval(&v(&[0.0, 0.0]), &v(&[0.0])), 2.5);
    }

    #[test]
    fn factor_form_matches_full_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = DMatrix::from_fn(3, 3, |i, j| if j <= i { rng.random_range(-1.0..1.0) } else { 0.0 });
        let lin = v(&[0.1, -0.2, 0.3]);
        let psd = QuadraticCost::from_factor(l.clone(), lin.clone(), 0.01, 0.4).unwrap();
        let full = QuadraticCost::new(&l * l.transpose(), lin, 0.01, 0.4).unwrap();
        let s = v(&[0.5, -1.0, 2.0]);
        let a = v(&[0.3]);
        assert!((psd.eval(&s, &a) - full.eval(&s, &a)).abs() < 1e-12);
    }

    #[test]
    fn step_cost_agrees_with_eval() {
        let qc = QuadraticCost::new(DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]), v(&[0.1, -0.3]), 0.01, 0.7)
            .unwrap();
        let s = v(&[0.4, -0.9]);
        let a = v(&[1.5, -0.5]);
        let x = crate::linalg::vstack(&s, &a);
        assert!((qc.step_cost(2).eval(&x) - qc.eval(&s, &a)).abs() < 1e-14);
    }

    #[test]
    fn goal_cost_examples() {
        let goal = v(&[0.5, -1.5]);
        let qc = goal_state_cost(&goal, 2.0, 0.0).unwrap();
        assert!(qc.eval(&goal, &v(&[0.0])).abs() < 1e-12);
        let unit = goal_state_cost(&v(&[0.0, 0.0]), 1.0, 0.0).unwrap();
        assert_eq!(unit.eval(&v(&[1.0, 0.0]), &v(&[0.0])), 1.0);
        let s = v(&[2.0, 0.25]);
        assert!((qc.eval(&s, &v(&[0.0])) - 2.0 * (&s - &goal).norm_squared()).abs() < 1e-12);
    }

    #[test]
    fn planted_quadratic_is_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let truth = QuadraticCost::new(
            DMatrix::from_row_slice(2, 2, &[1.5, -0.4, -0.4, 0.8]),
            v(&[0.2, -0.7]),
            0.001,
            0.9,
        )
        .unwrap();
        let states: Vec<_> = (0..200).map(|_| v(&[rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)])).collect();
        let actions: Vec<_> = (0..200).map(|_| v(&[rng.random_range(-1.0..1.0)])).collect();
        let costs: Vec<_> = states.iter().zip(&actions).map(|(s, a)| truth.eval(s, a)).collect();
        let fit = fit_local_quadratic(&states, &actions, &costs, 0.001, 1e-9, CostParam::Full).unwrap();
        assert!(crate::linalg::max_abs_diff(fit.quad(), truth.quad()) < 1e-6);
        assert!((&fit.lin - &truth.lin).amax() < 1e-6);
        assert!((fit.offset - truth.offset).abs() < 1e-6);
    }

    #[test]
    fn constant_costs_give_constant_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let states: Vec<_> = (0..50).map(|_| v(&[rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])).collect();
        let actions = vec![v(&[0.0]); 50];
        let fit = fit_local_quadratic(&states, &actions, &[3.0; 50], 0.0, 1e-3, CostParam::Full).unwrap();
        assert!(fit.quad().amax() < 1e-3);
        assert!(fit.lin.amax() < 1e-3);
        assert!((fit.offset - 3.0).abs() < 1e-3);
    }

    #[test]
    fn rank_deficient_design_without_ridge_is_an_error() {
        let states = vec![v(&[1.0, 1.0]); 20];
        let actions = vec![v(&[0.0]); 20];
        assert!(matches!(
            fit_local_quadratic(&states, &actions, &[1.0; 20], 0.0, 0.0, CostParam::Full),
            Err(SolarError::Singular(_))
        ));
    }

    #[test]
    fn psd_fit_is_the_projection_of_the_full_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let truth = QuadraticCost::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -2.0]), v(&[0.0, 0.0]), 0.0, 0.0)
            .unwrap();
        let states: Vec<_> = (0..100).map(|_| v(&[rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)])).collect();
        let actions = vec![v(&[0.0]); 100];
        let costs: Vec<_> = states.iter().zip(&actions).map(|(s, a)| truth.eval(s, a)).collect();
        let full = fit_local_quadratic(&states, &actions, &costs, 0.0, 1e-9, CostParam::Full).unwrap();
        let psd = fit_local_quadratic(&states, &actions, &costs, 0.0, 1e-9, CostParam::PsdCholesky).unwrap();
        assert!(crate::linalg::min_eigenvalue(psd.quad()) >= -1e-10);
        // Projection of diag(1, -2) is diag(1, 0).
        let expected = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        assert!(crate::linalg::max_abs_diff(psd.quad(), &expected) < 1e-6);
        assert!(crate::linalg::max_abs_diff(&psd_project(full.quad()), psd.quad()) < 1e-10);
    }

    #[test]
    fn sparse_likelihood_limits() {
        let zero = SparseCostParams { cost: QuadraticCost::zeros(2, 0.0) };
        let s = v(&[0.0, 0.0]);
        let a = v(&[0.0]);
        for f in [false, true] {
            assert!((sparse_loglik_and_grad(&zero, &s, &a, f).0 - 0.5f64.ln()).abs() < 1e-15);
        }
        let mut big = QuadraticCost::zeros(2, 0.0);
        big.offset = 800.0;
        let (ll, _) = sparse_loglik_and_grad(&SparseCostParams { cost: big }, &s, &a, false);
        assert!(ll.abs() < 1e-300);
    }

    #[test]
    fn sparse_gradients_match_finite_differences() {
        for param in [CostParam::Full, CostParam::PsdCholesky] {
            let base = match param {
                CostParam::Full => {
                    QuadraticCost::new(DMatrix::from_row_slice(2, 2, &[0.7, 0.2, 0.2, -0.4]), v(&[0.3, -0.1]), 0.05, -0.2)
                }
                CostParam::PsdCholesky => {
                    QuadraticCost::from_factor(DMatrix::from_row_slice(2, 2, &[0.9, 0.0, -0.3, 0.6]), v(&[0.3, -0.1]), 0.05, -0.2)
                }
            }
            .unwrap();
            let s = v(&[0.8, -0.6]);
            let a = v(&[0.4]);
            for f in [false, true] {
                let (_, g) = sparse_loglik_and_grad(&SparseCostParams { cost: base.clone() }, &s, &a, f);
                let flat = base.to_flat();
                let analytic = QuadraticCost::flat_grad(&g);
                let h = 1e-5;
                for k in 0..flat.len() {
                    let mut plus = base.clone();
                    let mut minus = base.clone();
                    let mut fp = flat.clone();
                    fp[k] += h;
                    plus.set_flat(&fp).unwrap();
                    let mut fm = flat.clone();
                    fm[k] -= h;
                    minus.set_flat(&fm).unwrap();
                    let lp = sparse_loglik_and_grad(&SparseCostParams { cost: plus }, &s, &a, f).0;
                    let lm = sparse_loglik_and_grad(&SparseCostParams { cost: minus }, &s, &a, f).0;
                    let fd = (lp - lm) / (2.0 * h);
                    let an = analytic[k];
                    assert!((fd - an).abs() <= 1e-4 * fd.abs().max(1e-6) + 1e-9, "{param:?} k={k} fd={fd} an={an}");
                }
                let ds = (0..2)
                    .map(|i| {
                        let mut sp = s.clone();
                        sp[i] += h;
                        let mut sm = s.clone();
                        sm[i] -= h;
                        let sc = SparseCostParams { cost: base.clone() };
                        (sparse_loglik_and_grad(&sc, &sp, &a, f).0 - sparse_loglik_and_grad(&sc, &sm, &a, f).0) / (2.0 * h)
                    })
                    .collect::<Vec<_>>();
                for i in 0..2 {
                    assert!((ds[i] - g.state[i]).abs() <= 1e-4 * ds[i].abs().max(1e-6));
                }
            }
        }
    }

    #[test]
    fn logistic_fit_separates_planted_boundary() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let states: Vec<_> = (0..1000).map(|_| v(&[rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)])).collect();
        let actions = vec![v(&[0.0]); 1000];
        let labels: Vec<bool> = states.iter().map(|s| s.norm_squared() < 1.0).collect();
        let fit = fit_sparse_cost(&states, &actions, &labels, 0.0, 1e-3).unwrap();
        let correct = states
            .iter()
            .zip(&labels)
            .filter(|(s, &l)| (fit.success_probability(s, &v(&[0.0])) > 0.5) == l)
            .count();
        assert!(correct > 950, "accuracy {correct}/1000");
    }
}
