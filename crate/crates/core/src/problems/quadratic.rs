//! Strongly convex quadratic bilevel suite with closed-form solution map.
//!
//! Worker `i` holds
//!
//! ```text
//! g_i(x, y) = 1/2 y'A_i y - x'B_i y + c_i'y
//! f_i(x, y) = 1/2 |y - t_i|^2 + mu_x/2 |x|^2
//! ```
//!
//! so `y*(x) = Abar^-1 (Bbar' x - cbar)`, `z*(x) = -Abar^-1 (y*(x) - tbar)`
//! and `grad Phi(x) = mu_x x - Bbar z*(x)`.

use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, Dyn, SymmetricEigen};
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use super::{digest_of, AnalyticOracle, BilevelOracle, OracleSample, Problem, ProblemError};
use crate::compressors::Vector;
use crate::simnet::{substream, RngStream};

fn default_mu_x() -> f64 {
    1.0
}

fn default_x_radius() -> f64 {
    10.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadraticSpec {
    /// Number of workers.
    pub n: usize,
    pub d_x: usize,
    pub d_y: usize,
    /// Smallest eigenvalue of every `A_i`.
    pub mu_g: f64,
    /// Largest eigenvalue of every `A_i`.
    pub l_g: f64,
    #[serde(default = "default_mu_x")]
    pub mu_x: f64,
    /// Scale of the centered per-worker perturbations of `B_i`, `c_i`, `t_i`.
    #[serde(default)]
    pub hetero: f64,
    /// Oracle noise: `E|noise|^2 = sigma^2` per gradient oracle.
    #[serde(default)]
    pub sigma: f64,
    pub seed: u64,
    /// Radius of the region `|x| <= x_radius` over which `C_f` is bounded.
    #[serde(default = "default_x_radius")]
    pub x_radius: f64,
}

impl QuadraticSpec {
    pub fn new(n: usize, d_x: usize, d_y: usize, seed: u64) -> Self {
        Self {
            n,
            d_x,
            d_y,
            mu_g: 1.0,
            l_g: 4.0,
            mu_x: default_mu_x(),
            hetero: 0.0,
            sigma: 0.0,
            seed,
            x_radius: default_x_radius(),
        }
    }

    pub fn with_sigma(mut self, sigma: f64) -> Self {
        self.sigma = sigma;
        self
    }

    pub fn with_hetero(mut self, hetero: f64) -> Self {
        self.hetero = hetero;
        self
    }

    pub fn validate(&self) -> Result<(), ProblemError> {
        let bad = |m: &str| Err(ProblemError::InvalidSpec(m.to_string()));
        if self.n == 0 || self.n > usize::from(u16::MAX) {
            return bad("n must be in 1..=65535");
        }
        if self.d_x == 0 || self.d_y == 0 {
            return bad("d_x and d_y must be positive");
        }
        if !(self.mu_g > 0.0 && self.mu_g <= self.l_g && self.l_g.is_finite()) {
            return bad("require 0 < mu_g <= l_g < inf");
        }
        if !(self.mu_x >= 0.0 && self.mu_x.is_finite()) {
            return bad("mu_x must be finite and >= 0");
        }
        if !(self.hetero >= 0.0 && self.hetero.is_finite()) {
            return bad("hetero must be finite and >= 0");
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return bad("sigma must be finite and >= 0");
        }
        if !(self.x_radius > 0.0 && self.x_radius.is_finite()) {
            return bad("x_radius must be positive");
        }
        Ok(())
    }
}

/// Explicit per-worker matrices, for hand-built instances.
#[derive(Debug, Clone)]
pub struct QuadraticParts {
    /// `(A_i, B_i, c_i, t_i)` per worker; `B_i` is `d_x x d_y`.
    pub workers: Vec<(DMatrix<f64>, DMatrix<f64>, Vector, Vector)>,
    pub mu_x: f64,
    pub sigma: f64,
    pub x_radius: f64,
}

#[derive(Debug, Clone)]
pub struct QuadraticWorker {
    id: usize,
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    c: Vector,
    t: Vector,
    mu_x: f64,
    sigma: f64,
}

impl QuadraticWorker {
    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn c(&self) -> &Vector {
        &self.c
    }

    pub fn t(&self) -> &Vector {
        &self.t
    }
}

fn normal(rng: &mut RngStream) -> f64 {
    StandardNormal.sample(rng)
}

fn normals(len: usize, scale: f64, rng: &mut RngStream) -> Vector {
    Vector::from_fn(len, |_, _| {
        let n: f64 = StandardNormal.sample(rng);
        scale * n
    })
}

impl BilevelOracle for QuadraticWorker {
    fn worker_id(&self) -> usize {
        self.id
    }

    fn dim_x(&self) -> usize {
        self.b.nrows()
    }

    fn dim_y(&self) -> usize {
        self.a.nrows()
    }

    fn sigma(&self) -> Option<f64> {
        Some(self.sigma)
    }

    fn population(&self, x: &Vector, y: &Vector, z: &Vector) -> OracleSample {
        OracleSample {
            grad_x_f: x * self.mu_x,
            grad_y_f: y - &self.t,
            grad_y_g: &self.a * y - self.b.tr_mul(x) + &self.c,
            jvp_xy: -(&self.b * z),
            hvp_yy: &self.a * z,
        }
    }

    fn sample(&self, x: &Vector, y: &Vector, z: &Vector, rng: &mut RngStream) -> OracleSample {
        let mut s = self.population(x, y, z);
        if self.sigma == 0.0 {
            return s;
        }
        let (dx, dy) = (self.dim_x(), self.dim_y());
        // xi: lower-level sample, shared by grad_y G and both Jacobian products
        s.grad_y_g += normals(dy, self.sigma / (dy as f64).sqrt(), rng);
        let zn = z.norm();
        s.jvp_xy += normals(dx, self.sigma * zn / ((dx * dy) as f64).sqrt(), rng);
        s.hvp_yy += normals(dy, self.sigma * zn / dy as f64, rng);
        // phi: upper-level sample, one isotropic draw for the full gradient of F
        let fnoise = normals(dx + dy, self.sigma / ((dx + dy) as f64).sqrt(), rng);
        s.grad_x_f += fnoise.rows(0, dx);
        s.grad_y_f += fnoise.rows(dx, dy);
        s
    }
}

/// Quadratic suite with its averaged closed form.
#[derive(Debug, Clone)]
pub struct QuadraticBilevel {
    workers: Vec<Arc<QuadraticWorker>>,
    a_bar: DMatrix<f64>,
    a_bar_chol: Cholesky<f64, Dyn>,
    b_bar: DMatrix<f64>,
    c_bar: Vector,
    t_bar: Vector,
    mu_x: f64,
    mu_g: f64,
    l_g: f64,
    c_f: f64,
    digest: String,
}

fn mean_of<T, F>(items: &[T], f: F) -> DMatrix<f64>
where
    F: Fn(&T) -> DMatrix<f64>,
{
    let mut it = items.iter();
    let mut acc = f(it.next().expect("non-empty"));
    for x in it {
        acc += f(x);
    }
    acc / items.len() as f64
}

impl QuadraticBilevel {
    /// Builds the suite from explicit matrices.
    pub fn from_parts(parts: QuadraticParts, digest: String) -> Result<Self, ProblemError> {
        if parts.workers.is_empty() {
            return Err(ProblemError::InvalidSpec("at least one worker required".into()));
        }
        let d_y = parts.workers[0].0.nrows();
        let d_x = parts.workers[0].1.nrows();
        let mut mu_g = f64::INFINITY;
        let mut l_g: f64 = 0.0;
        let mut workers = Vec::with_capacity(parts.workers.len());
        for (id, (a, b, c, t)) in parts.workers.into_iter().enumerate() {
            if a.shape() != (d_y, d_y) || b.shape() != (d_x, d_y) || c.len() != d_y || t.len() != d_y {
                return Err(ProblemError::InvalidSpec(format!("worker {id}: inconsistent shapes")));
            }
            if (&a - a.transpose()).amax() > 1e-12 * a.amax().max(1.0) {
                return Err(ProblemError::Internal(format!("worker {id}: A not symmetric")));
            }
            let eig = SymmetricEigen::new(a.clone()).eigenvalues;
            let lo = eig.min();
            if !(lo > 0.0) {
                return Err(ProblemError::Internal(format!("worker {id}: A not positive definite")));
            }
            mu_g = mu_g.min(lo);
            l_g = l_g.max(eig.max());
            workers.push(Arc::new(QuadraticWorker {
                id,
                a,
                b,
                c,
                t,
                mu_x: parts.mu_x,
                sigma: parts.sigma,
            }));
        }
        let a_bar = mean_of(&workers, |w| w.a.clone());
        let b_bar = mean_of(&workers, |w| w.b.clone());
        let n = workers.len() as f64;
        let c_bar = workers.iter().fold(Vector::zeros(d_y), |acc, w| acc + &w.c) / n;
        let t_bar = workers.iter().fold(Vector::zeros(d_y), |acc, w| acc + &w.t) / n;
        let a_bar_chol = Cholesky::new(a_bar.clone())
            .ok_or_else(|| ProblemError::Internal("averaged A not positive definite".into()))?;

        // On |x| <= x_radius: |y*(x)| <= (|Bbar| R + |cbar|) / lambda_min(Abar), and
        // |grad_y f_i| = |y - t_i| <= that + |t_i|.
        let b_norm = b_bar.clone().svd(false, false).singular_values.max();
        let y_max = (b_norm * parts.x_radius + c_bar.norm()) / mu_g;
        let t_max = workers.iter().map(|w| w.t.norm()).fold(0.0, f64::max);
        let c_f = y_max + t_max;

        Ok(Self {
            workers,
            a_bar,
            a_bar_chol,
            b_bar,
            c_bar,
            t_bar,
            mu_x: parts.mu_x,
            mu_g,
            l_g,
            c_f,
            digest,
        })
    }

    /// Draws a random instance from `spec`.
    pub fn generate(spec: &QuadraticSpec) -> Result<Self, ProblemError> {
        spec.validate()?;
        let (n, d_x, d_y) = (spec.n, spec.d_x, spec.d_y);

        // A = Q diag(lambda) Q' with lambda spanning [mu_g, l_g]
        let mut rng = substream(spec.seed, 0, 0, 0);
        let g = DMatrix::from_fn(d_y, d_y, |_, _| normal(&mut rng));
        let q = g.qr().q();
        let mut lambdas = vec![spec.mu_g; d_y];
        if d_y > 1 {
            lambdas[d_y - 1] = spec.l_g;
            let u = Uniform::new_inclusive(spec.mu_g, spec.l_g).expect("mu_g <= l_g");
            for l in lambdas.iter_mut().take(d_y - 1).skip(1) {
                *l = u.sample(&mut rng);
            }
        }
        let a: DMatrix<f64> = &q * DMatrix::from_diagonal(&Vector::from_vec(lambdas)) * q.transpose();
        let a = (&a + a.transpose()) * 0.5;

        let b_scale = 1.0 / (d_x as f64).sqrt();
        let mut rng = substream(spec.seed, 0, 0, 1);
        let b0 = DMatrix::from_fn(d_x, d_y, |_, _| b_scale * normal(&mut rng));
        let mut rng = substream(spec.seed, 0, 0, 2);
        let c0 = normals(d_y, 1.0, &mut rng);
        let t0 = normals(d_y, 1.0, &mut rng);

        let mut db: Vec<DMatrix<f64>> = Vec::with_capacity(n);
        let mut dc: Vec<Vector> = Vec::with_capacity(n);
        let mut dt: Vec<Vector> = Vec::with_capacity(n);
        for w in 0..n {
            let mut rng = substream(spec.seed, 1, w as u16, 0);
            db.push(DMatrix::from_fn(d_x, d_y, |_, _| b_scale * normal(&mut rng)));
            dc.push(normals(d_y, 1.0, &mut rng));
            dt.push(normals(d_y, 1.0, &mut rng));
        }
        let db_mean = mean_of(&db, |m| m.clone());
        let dc_mean = dc.iter().fold(Vector::zeros(d_y), |acc, v| acc + v) / n as f64;
        let dt_mean = dt.iter().fold(Vector::zeros(d_y), |acc, v| acc + v) / n as f64;

        let h = spec.hetero;
        let workers = (0..n)
            .map(|w| {
                (
                    a.clone(),
                    &b0 + (&db[w] - &db_mean) * h,
                    &c0 + (&dc[w] - &dc_mean) * h,
                    &t0 + (&dt[w] - &dt_mean) * h,
                )
            })
            .collect();
        let parts = QuadraticParts {
            workers,
            mu_x: spec.mu_x,
            sigma: spec.sigma,
            x_radius: spec.x_radius,
        };
        let digest = digest_of(serde_json::to_string(spec).expect("serializable").as_bytes());
        let out = Self::from_parts(parts, digest)?;
        if out.mu_g < spec.mu_g * (1.0 - 1e-9) || out.l_g > spec.l_g * (1.0 + 1e-9) {
            return Err(ProblemError::Internal("generated spectrum outside [mu_g, l_g]".into()));
        }
        Ok(out)
    }

    pub fn workers(&self) -> &[Arc<QuadraticWorker>] {
        &self.workers
    }

    pub fn dim_x(&self) -> usize {
        self.b_bar.nrows()
    }

    pub fn dim_y(&self) -> usize {
        self.a_bar.nrows()
    }

    /// Smallest eigenvalue over all `A_i`.
    pub fn mu_g(&self) -> f64 {
        self.mu_g
    }

    pub fn l_g(&self) -> f64 {
        self.l_g
    }

    /// Bound on `|grad_y f_i|` over the region used to size the clip radius.
    pub fn c_f(&self) -> f64 {
        self.c_f
    }

    pub fn rho(&self) -> f64 {
        self.c_f / self.mu_g
    }

    pub fn a_bar(&self) -> &DMatrix<f64> {
        &self.a_bar
    }

    pub fn b_bar(&self) -> &DMatrix<f64> {
        &self.b_bar
    }

    pub fn into_problem(self) -> Problem {
        let (dx, dy) = (self.dim_x(), self.dim_y());
        let rho = self.rho();
        let digest = self.digest.clone();
        let workers: Vec<Arc<dyn BilevelOracle>> =
            self.workers.iter().map(|w| w.clone() as Arc<dyn BilevelOracle>).collect();
        Problem::new(
            workers,
            Some(Arc::new(self)),
            Vector::zeros(dx),
            Vector::zeros(dy),
            Some(rho),
            digest,
        )
        .expect("consistent by construction")
    }
}

impl AnalyticOracle for QuadraticBilevel {
    fn y_star(&self, x: &Vector) -> Vector {
        self.a_bar_chol.solve(&(self.b_bar.tr_mul(x) - &self.c_bar))
    }

    fn z_star(&self, x: &Vector) -> Vector {
        -self.a_bar_chol.solve(&(self.y_star(x) - &self.t_bar))
    }

    fn hypergrad(&self, x: &Vector) -> Vector {
        x * self.mu_x - &self.b_bar * self.z_star(x)
    }

    fn phi_value(&self, x: &Vector) -> f64 {
        let y = self.y_star(x);
        let upper: f64 =
            self.workers.iter().map(|w| 0.5 * (&y - &w.t).norm_squared()).sum::<f64>() / self.workers.len() as f64;
        upper + 0.5 * self.mu_x * x.norm_squared()
    }
}

/// Builds the quadratic suite as a [`Problem`].
pub fn make_quadratic(spec: &QuadraticSpec) -> Result<Problem, ProblemError> {
    Ok(QuadraticBilevel::generate(spec)?.into_problem())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{compute_directions, compute_directions_accumulated};
    use crate::simnet::stream_from_seed;

    pub(crate) fn scalar_suite(sigma: f64) -> QuadraticBilevel {
        let one = DMatrix::from_element(1, 1, 1.0);
        QuadraticBilevel::from_parts(
            QuadraticParts {
                workers: vec![(one.clone(), one, Vector::zeros(1), Vector::zeros(1))],
                mu_x: 1.0,
                sigma,
                x_radius: 10.0,
            },
            "scalar".into(),
        )
        .unwrap()
    }

    fn v(xs: &[f64]) -> Vector {
        Vector::from_column_slice(xs)
    }

    #[test]
    fn scalar_closed_form() {
        let q = scalar_suite(0.0);
        for x in [-2.0, 0.0, 0.5, 3.0] {
            assert!((q.y_star(&v(&[x]))[0] - x).abs() < 1e-15);
            assert!((q.phi_value(&v(&[x])) - x * x).abs() < 1e-14);
            assert!((q.hypergrad(&v(&[x]))[0] - 2.0 * x).abs() < 1e-14);
        }
        assert_eq!(q.hypergrad(&v(&[0.0]))[0], 0.0);
    }

    fn central_difference(q: &QuadraticBilevel, x: &Vector, h: f64) -> Vector {
        Vector::from_fn(x.len(), |i, _| {
            let mut p = x.clone();
            let mut m = x.clone();
            p[i] += h;
            m[i] -= h;
            (q.phi_value(&p) - q.phi_value(&m)) / (2.0 * h)
        })
    }

    #[test]
    fn hypergrad_matches_finite_differences() {
        let q = QuadraticBilevel::generate(&QuadraticSpec::new(4, 5, 3, 7)).unwrap();
        let mut rng = stream_from_seed(100);
        for _ in 0..10 {
            let x = normals(5, 1.0, &mut rng);
            let g = q.hypergrad(&x);
            let fd = central_difference(&q, &x, 1e-5);
            assert!((&g - &fd).norm() / g.norm() <= 1e-5, "{g} vs {fd}");
        }
    }

    #[test]
    fn y_star_zeroes_lower_gradient() {
        let q = QuadraticBilevel::generate(&QuadraticSpec::new(3, 6, 4, 1).with_hetero(2.0)).unwrap();
        let p = q.clone().into_problem();
        let mut rng = stream_from_seed(5);
        for _ in 0..100 {
            let x = normals(6, 3.0, &mut rng);
            let y = q.y_star(&x);
            assert!(p.mean_grad_y_g(&x, &y).norm() < 1e-10);
        }
    }

    #[test]
    fn z_star_is_bounded_by_cf_over_mu() {
        let q = QuadraticBilevel::generate(&QuadraticSpec::new(4, 5, 3, 7).with_hetero(1.0)).unwrap();
        let mut rng = stream_from_seed(6);
        for _ in 0..100 {
            let dir = normals(5, 1.0, &mut rng);
            let r: f64 = rand::Rng::random::<f64>(&mut rng) * 10.0;
            let x = dir.normalize() * r;
            assert!(q.z_star(&x).norm() <= q.c_f() / q.mu_g());
        }
    }

    #[test]
    fn spectrum_respects_bounds() {
        let spec = QuadraticSpec {
            mu_g: 0.5,
            l_g: 3.0,
            ..QuadraticSpec::new(5, 4, 6, 11)
        };
        let q = QuadraticBilevel::generate(&spec).unwrap();
        for w in q.workers() {
            let e = SymmetricEigen::new(w.a().clone()).eigenvalues;
            assert!(e.min() >= 0.5 - 1e-9 && e.max() <= 3.0 + 1e-9);
        }
    }

    #[test]
    fn homogeneous_workers_identical() {
        let q = QuadraticBilevel::generate(&QuadraticSpec::new(4, 3, 2, 9)).unwrap();
        let (x, y) = (v(&[0.3, -1.0, 2.0]), v(&[0.7, 0.1]));
        let z = Vector::zeros(2);
        let g0 = q.workers()[0].population(&x, &y, &z).grad_y_g;
        for w in q.workers() {
            assert_eq!(w.population(&x, &y, &z).grad_y_g, g0);
        }
    }

    #[test]
    fn heterogeneity_grows_with_knob() {
        let (x, y) = (v(&[0.3, -1.0, 2.0]), v(&[0.7, 0.1]));
        let z = Vector::zeros(2);
        let mut last = -1.0;
        for h in [0.0, 0.1, 0.5, 1.0, 2.0, 10.0] {
            let q = QuadraticBilevel::generate(&QuadraticSpec::new(4, 3, 2, 9).with_hetero(h)).unwrap();
            let p = q.clone().into_problem();
            let mean = p.mean_grad_y_g(&x, &y);
            let spread = q
                .workers()
                .iter()
                .map(|w| (w.population(&x, &y, &z).grad_y_g - &mean).norm())
                .fold(0.0, f64::max);
            assert!(spread >= last);
            last = spread;
        }
        assert!(last > 0.0);
    }

    #[test]
    fn noiseless_directions() {
        let q = scalar_suite(0.0);
        let w = &q.workers()[0];
        let mut rng = stream_from_seed(0);
        let d = compute_directions(w.as_ref(), &v(&[1.0]), &v(&[1.0]), &v(&[0.0]), &mut rng).unwrap();
        assert_eq!(d.dy[0], 0.0);
        assert_eq!(d.dx[0], 1.0);
        let q = QuadraticBilevel::generate(&QuadraticSpec::new(2, 3, 2, 4)).unwrap();
        let w = &q.workers()[1];
        let (x, y) = (v(&[0.2, 0.4, -0.6]), v(&[1.0, -1.0]));
        let d = compute_directions(w.as_ref(), &x, &y, &Vector::zeros(2), &mut rng).unwrap();
        assert_eq!(d.dx, &x * 1.0);
        let acc = compute_directions_accumulated(w.as_ref(), &x, &y, &v(&[0.5, 0.5]), 7, &mut rng).unwrap();
        let one = compute_directions(w.as_ref(), &x, &y, &v(&[0.5, 0.5]), &mut rng).unwrap();
        assert!((acc.dz - one.dz).norm() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let q = scalar_suite(0.0);
        let w = &q.workers()[0];
        let err = compute_directions(w.as_ref(), &v(&[1.0, 2.0]), &v(&[1.0]), &v(&[0.0]), &mut stream_from_seed(0));
        assert!(matches!(err, Err(ProblemError::DimensionMismatch { what: "x", .. })));
    }

    #[test]
    fn rejects_bad_spec() {
        let mut s = QuadraticSpec::new(2, 2, 2, 0);
        s.mu_g = 5.0;
        assert!(QuadraticBilevel::generate(&s).is_err());
        assert!(QuadraticBilevel::generate(&QuadraticSpec::new(0, 2, 2, 0)).is_err());
    }
}
