//! Hyperparameter optimization for L2-regularized logistic regression.
//!
//! Upper variable `lambda` (per-feature log regularization weights), lower
//! variable `w`:
//!
//! ```text
//! g_i(lambda, w) = mean_train log(1 + exp(-y x'w)) + 1/2 sum_j exp(lambda_j) w_j^2
//! f_i(lambda, w) = mean_val   log(1 + exp(-y x'w))
//! ```
//!
//! Worker `i` (1-based index `j`) draws features from `N(0, j^2)` when `j`
//! is even and from `chi^2(j)` otherwise, clipped to ten standard deviations
//! around the mean and scaled by `1/sqrt(p)`. Labels follow
//! `sign(x'w_true + noise * e)` with a shared `w_true`.

use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{digest_of, AnalyticOracle, BilevelOracle, OracleSample, Problem, ProblemError};
use crate::compressors::Vector;
use crate::simnet::{substream, RngStream};

fn default_n() -> usize {
    5
}
fn default_samples() -> usize {
    500
}
fn default_batch() -> usize {
    50
}
fn default_noise() -> f64 {
    0.1
}

/// Regeneration attempts per worker before giving up on single-label data.
const MAX_REGENERATIONS: u16 = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogisticSpec {
    #[serde(default = "default_n")]
    pub n: usize,
    /// Feature dimension; both levels have dimension `p`.
    pub p: usize,
    /// Training points per worker.
    #[serde(default = "default_samples")]
    pub train: usize,
    /// Validation points per worker.
    #[serde(default = "default_samples")]
    pub val: usize,
    /// Minibatch size of the stochastic oracles.
    #[serde(default = "default_batch")]
    pub batch: usize,
    /// Label noise rate.
    #[serde(default = "default_noise")]
    pub noise: f64,
    pub seed: u64,
}

impl LogisticSpec {
    pub fn new(n: usize, p: usize, samples: usize, seed: u64) -> Self {
        Self {
            n,
            p,
            train: samples,
            val: samples,
            batch: default_batch(),
            noise: default_noise(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), ProblemError> {
        let bad = |m: &str| Err(ProblemError::InvalidSpec(m.to_string()));
        if self.n == 0 || self.n > usize::from(u16::MAX) {
            return bad("n must be in 1..=65535");
        }
        if self.p == 0 {
            return bad("p must be >= 1");
        }
        if self.train == 0 || self.val == 0 {
            return bad("train and val must be >= 1");
        }
        if self.batch == 0 {
            return bad("batch must be >= 1");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise must be finite and >= 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Dataset {
    x: DMatrix<f64>,
    y: Vec<f64>,
}

impl Dataset {
    fn rows(&self) -> usize {
        self.y.len()
    }

    fn single_label(&self) -> bool {
        self.y.iter().all(|&l| l == self.y[0])
    }

    /// Mean loss, gradient and Hessian-vector product over `rows`.
    fn eval<I>(&self, rows: I, w: &Vector, z: Option<&Vector>) -> (f64, Vector, Vector)
    where
        I: Iterator<Item = usize>,
    {
        let p = w.len();
        let mut loss = 0.0;
        let mut grad = Vector::zeros(p);
        let mut hvp = Vector::zeros(p);
        let mut count = 0usize;
        for r in rows {
            let xr = self.x.row(r).transpose();
            let m = self.y[r] * xr.dot(w);
            loss += log1p_exp(-m);
            grad.axpy(-self.y[r] * sigmoid(-m), &xr, 1.0);
            if let Some(z) = z {
                let c = sigmoid(m) * sigmoid(-m) * xr.dot(z);
                hvp.axpy(c, &xr, 1.0);
            }
            count += 1;
        }
        let c = count as f64;
        (loss / c, grad / c, hvp / c)
    }

    fn hessian(&self, w: &Vector) -> DMatrix<f64> {
        let p = w.len();
        let mut h = DMatrix::zeros(p, p);
        for r in 0..self.rows() {
            let xr = self.x.row(r).transpose();
            let m = self.y[r] * xr.dot(w);
            h.ger(sigmoid(m) * sigmoid(-m), &xr, &xr, 1.0);
        }
        h / self.rows() as f64
    }
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

fn log1p_exp(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

#[derive(Debug, Clone)]
pub struct LogisticWorker {
    id: usize,
    train: Dataset,
    val: Dataset,
    batch: usize,
}

impl LogisticWorker {
    fn regularizer_grad(lambda: &Vector, w: &Vector) -> Vector {
        lambda.map(f64::exp).component_mul(w)
    }
}

impl BilevelOracle for LogisticWorker {
    fn worker_id(&self) -> usize {
        self.id
    }

    fn dim_x(&self) -> usize {
        self.train.x.ncols()
    }

    fn dim_y(&self) -> usize {
        self.train.x.ncols()
    }

    fn sigma(&self) -> Option<f64> {
        None
    }

    fn population(&self, lambda: &Vector, w: &Vector, z: &Vector) -> OracleSample {
        let (_, g_train, h_train) = self.train.eval(0..self.train.rows(), w, Some(z));
        let (_, g_val, _) = self.val.eval(0..self.val.rows(), w, None);
        self.assemble(lambda, w, z, g_train, h_train, g_val)
    }

    fn sample(&self, lambda: &Vector, w: &Vector, z: &Vector, rng: &mut RngStream) -> OracleSample {
        let xi: Vec<usize> = (0..self.batch).map(|_| rng.random_range(0..self.train.rows())).collect();
        let phi: Vec<usize> = (0..self.batch).map(|_| rng.random_range(0..self.val.rows())).collect();
        let (_, g_train, h_train) = self.train.eval(xi.into_iter(), w, Some(z));
        let (_, g_val, _) = self.val.eval(phi.into_iter(), w, None);
        self.assemble(lambda, w, z, g_train, h_train, g_val)
    }
}

impl LogisticWorker {
    fn assemble(
        &self,
        lambda: &Vector,
        w: &Vector,
        z: &Vector,
        g_train: Vector,
        h_train: Vector,
        g_val: Vector,
    ) -> OracleSample {
        let reg = lambda.map(f64::exp);
        OracleSample {
            grad_x_f: Vector::zeros(lambda.len()),
            grad_y_f: g_val,
            grad_y_g: g_train + Self::regularizer_grad(lambda, w),
            jvp_xy: reg.component_mul(w).component_mul(z),
            hvp_yy: h_train + reg.component_mul(z),
        }
    }
}

/// The logistic suite; its analytic oracle solves the averaged inner
/// problem with damped Newton.
#[derive(Debug, Clone)]
pub struct LogisticHpo {
    workers: Vec<Arc<LogisticWorker>>,
    p: usize,
    digest: String,
}

/// Inner solve tolerance on the gradient norm.
const NEWTON_TOL: f64 = 1e-12;

impl LogisticHpo {
    pub fn generate(spec: &LogisticSpec) -> Result<Self, ProblemError> {
        spec.validate()?;
        let p = spec.p;
        let mut rng = substream(spec.seed, 0, 0, 0);
        let w_true = Vector::from_fn(p, |_, _| {
            let v: f64 = StandardNormal.sample(&mut rng);
            v / (p as f64).sqrt()
        });
        let mut workers = Vec::with_capacity(spec.n);
        for i in 0..spec.n {
            let j = i + 1;
            let mut made = None;
            for attempt in 0..MAX_REGENERATIONS {
                let mut rng = substream(spec.seed, 1, i as u16, attempt);
                let train = draw_dataset(j, spec.train, p, &w_true, spec.noise, &mut rng);
                let val = draw_dataset(j, spec.val, p, &w_true, spec.noise, &mut rng);
                if !train.single_label() && !val.single_label() {
                    made = Some((train, val));
                    break;
                }
            }
            let (train, val) = made.ok_or_else(|| {
                ProblemError::InvalidSpec(format!("worker {i}: could not draw data with both labels"))
            })?;
            workers.push(Arc::new(LogisticWorker {
                id: i,
                train,
                val,
                batch: spec.batch,
            }));
        }
        let digest = digest_of(serde_json::to_string(spec).expect("serializable").as_bytes());
        Ok(Self { workers, p, digest })
    }

    pub fn workers(&self) -> &[Arc<LogisticWorker>] {
        &self.workers
    }

    fn n(&self) -> f64 {
        self.workers.len() as f64
    }

    fn lower_objective(&self, lambda: &Vector, w: &Vector) -> f64 {
        let data: f64 = self
            .workers
            .iter()
            .map(|wk| wk.train.eval(0..wk.train.rows(), w, None).0)
            .sum::<f64>()
            / self.n();
        data + 0.5 * lambda.map(f64::exp).dot(&w.component_mul(w))
    }

    fn lower_grad(&self, lambda: &Vector, w: &Vector) -> Vector {
        let mut g = Vector::zeros(self.p);
        for wk in &self.workers {
            g += wk.train.eval(0..wk.train.rows(), w, None).1;
        }
        g / self.n() + LogisticWorker::regularizer_grad(lambda, w)
    }

    fn lower_hessian(&self, lambda: &Vector, w: &Vector) -> DMatrix<f64> {
        let mut h = DMatrix::zeros(self.p, self.p);
        for wk in &self.workers {
            h += wk.train.hessian(w);
        }
        h /= self.n();
        for (j, l) in lambda.iter().enumerate() {
            h[(j, j)] += l.exp();
        }
        h
    }

    fn upper_value_grad(&self, w: &Vector) -> (f64, Vector) {
        let mut v = 0.0;
        let mut g = Vector::zeros(self.p);
        for wk in &self.workers {
            let (l, gr, _) = wk.val.eval(0..wk.val.rows(), w, None);
            v += l;
            g += gr;
        }
        (v / self.n(), g / self.n())
    }

    /// Damped Newton on the averaged lower objective.
    pub fn solve_inner(&self, lambda: &Vector) -> Vector {
        let mut w = Vector::zeros(self.p);
        for _ in 0..200 {
            let g = self.lower_grad(lambda, &w);
            if g.norm() <= NEWTON_TOL {
                break;
            }
            let h = self.lower_hessian(lambda, &w);
            let step = Cholesky::new(h).expect("regularized Hessian is positive definite").solve(&g);
            let f0 = self.lower_objective(lambda, &w);
            let slope = g.dot(&step);
            let mut t = 1.0;
            loop {
                let cand = &w - &step * t;
                if self.lower_objective(lambda, &cand) <= f0 - 1e-4 * t * slope || t < 1e-10 {
                    w = cand;
                    break;
                }
                t *= 0.5;
            }
            if (&step * t).norm() <= 1e-16 * (1.0 + w.norm()) {
                break;
            }
        }
        w
    }

    pub fn into_problem(self) -> Problem {
        let p = self.p;
        let digest = self.digest.clone();
        let workers: Vec<Arc<dyn BilevelOracle>> =
            self.workers.iter().map(|w| w.clone() as Arc<dyn BilevelOracle>).collect();
        Problem::new(workers, Some(Arc::new(self)), Vector::zeros(p), Vector::zeros(p), None, digest)
            .expect("consistent by construction")
    }
}

fn draw_dataset(j: usize, rows: usize, p: usize, w_true: &Vector, noise: f64, rng: &mut RngStream) -> Dataset {
    let jf = j as f64;
    let scale = 1.0 / (p as f64).sqrt();
    let x = if j % 2 == 0 {
        DMatrix::from_fn(rows, p, |_, _| {
            let v: f64 = StandardNormal.sample(rng);
            (jf * v).clamp(-10.0 * jf, 10.0 * jf) * scale
        })
    } else {
        let chi = ChiSquared::new(jf).expect("positive degrees of freedom");
        let sd = (2.0 * jf).sqrt();
        let (lo, hi) = ((jf - 10.0 * sd).max(0.0), jf + 10.0 * sd);
        DMatrix::from_fn(rows, p, |_, _| chi.sample(rng).clamp(lo, hi) * scale)
    };
    let y = (0..rows)
        .map(|r| {
            let e: f64 = StandardNormal.sample(rng);
            if x.row(r).transpose().dot(w_true) + noise * e >= 0.0 {
                1.0
            } else {
                -1.0
            }
        })
        .collect();
    Dataset { x, y }
}

impl AnalyticOracle for LogisticHpo {
    fn y_star(&self, lambda: &Vector) -> Vector {
        self.solve_inner(lambda)
    }

    fn z_star(&self, lambda: &Vector) -> Vector {
        let w = self.solve_inner(lambda);
        let (_, gf) = self.upper_value_grad(&w);
        let h = self.lower_hessian(lambda, &w);
        -Cholesky::new(h).expect("positive definite").solve(&gf)
    }

    fn hypergrad(&self, lambda: &Vector) -> Vector {
        let w = self.solve_inner(lambda);
        let (_, gf) = self.upper_value_grad(&w);
        let h = self.lower_hessian(lambda, &w);
        let z = -Cholesky::new(h).expect("positive definite").solve(&gf);
        lambda.map(f64::exp).component_mul(&w).component_mul(&z)
    }

    fn phi_value(&self, lambda: &Vector) -> f64 {
        self.upper_value_grad(&self.solve_inner(lambda)).0
    }
}

/// Builds the logistic hyperparameter suite as a [`Problem`].
pub fn make_logistic_hpo(spec: &LogisticSpec) -> Result<Problem, ProblemError> {
    Ok(LogisticHpo::generate(spec)?.into_problem())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::SymmetricEigen;

    fn tiny() -> LogisticHpo {
        LogisticHpo::generate(&LogisticSpec::new(1, 2, 8, 3)).unwrap()
    }

    #[test]
    fn heavy_regularization_drives_weights_to_zero() {
        let hpo = LogisticHpo::generate(&LogisticSpec::new(2, 5, 40, 1)).unwrap();
        let w = hpo.solve_inner(&Vector::from_element(5, 20.0));
        assert!(w.norm() <= 1e-6, "{}", w.norm());
    }

    #[test]
    fn inner_solve_is_stationary() {
        let hpo = tiny();
        let lambda = Vector::from_vec(vec![0.3, -0.5]);
        let w = hpo.solve_inner(&lambda);
        assert!(hpo.lower_grad(&lambda, &w).norm() <= 1e-11);
    }

    #[test]
    fn hypergrad_matches_finite_differences_at_origin() {
        let hpo = tiny();
        let lambda = Vector::zeros(2);
        let g = hpo.hypergrad(&lambda);
        let h = 1e-5;
        let fd = Vector::from_fn(2, |i, _| {
            let mut p = lambda.clone();
            let mut m = lambda.clone();
            p[i] += h;
            m[i] -= h;
            (hpo.phi_value(&p) - hpo.phi_value(&m)) / (2.0 * h)
        });
        assert!((&g - &fd).norm() / g.norm() <= 1e-3, "{g} vs {fd}");
    }

    #[test]
    fn lower_hessian_dominated_by_regularizer() {
        let hpo = LogisticHpo::generate(&LogisticSpec::new(3, 4, 30, 8)).unwrap();
        let lambda = Vector::from_vec(vec![-1.0, 0.5, 2.0, -0.2]);
        let w = Vector::from_vec(vec![0.1, -0.3, 0.2, 1.0]);
        let h = hpo.lower_hessian(&lambda, &w);
        let lo = SymmetricEigen::new(h).eigenvalues.min();
        assert!(lo >= (-1.0f64).exp() - 1e-12);
    }

    #[test]
    fn minibatch_oracle_is_unbiased_for_the_full_batch() {
        let hpo = LogisticHpo::generate(&LogisticSpec::new(2, 3, 20, 4)).unwrap();
        let wk = &hpo.workers()[1];
        let lambda = Vector::from_vec(vec![0.1, 0.0, -0.2]);
        let w = Vector::from_vec(vec![0.5, -0.5, 0.25]);
        let z = Vector::from_vec(vec![1.0, 2.0, -1.0]);
        let pop = wk.population(&lambda, &w, &z);
        let trials = 20_000;
        let mut mean = Vector::zeros(3);
        for t in 0..trials {
            let mut rng = substream(9, t, 0, 0);
            mean += wk.sample(&lambda, &w, &z, &mut rng).grad_y_g;
        }
        mean /= f64::from(trials);
        assert!((mean - pop.grad_y_g).norm() < 0.01);
    }

    #[test]
    fn workers_have_both_labels() {
        let hpo = LogisticHpo::generate(&LogisticSpec::new(5, 10, 8, 2)).unwrap();
        for w in hpo.workers() {
            assert!(!w.train.single_label() && !w.val.single_label());
        }
    }
}
