//! Bilevel test problems.
//!
//! Each worker `i` owns a pair `(f_i, g_i)` and answers stochastic
//! first-order queries plus Jacobian-vector products through
//! [`BilevelOracle`]. Problems with a computable solution map additionally
//! expose an [`AnalyticOracle`] for `y*(x)`, `z*(x)`, `grad Phi(x)` and
//! `Phi(x)`.

mod logistic;
mod quadratic;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use logistic::{make_logistic_hpo, LogisticHpo, LogisticSpec, LogisticWorker};
pub use quadratic::{make_quadratic, QuadraticBilevel, QuadraticParts, QuadraticSpec, QuadraticWorker};

use crate::compressors::Vector;
use crate::simnet::RngStream;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ProblemError {
    #[error("dimension mismatch: {what} has length {got}, expected {expected}")]
    DimensionMismatch {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("invalid problem spec: {0}")]
    InvalidSpec(String),
    #[error("problem has no analytic oracle")]
    Unsupported,
    #[error("internal: {0}")]
    Internal(String),
}

/// Everything one worker's oracle returns for a single sample pair
/// `(phi, xi)` at `(x, y)` with Jacobian products applied to `z`.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleSample {
    /// `grad_x F(x, y; phi)`
    pub grad_x_f: Vector,
    /// `grad_y F(x, y; phi)`
    pub grad_y_f: Vector,
    /// `grad_y G(x, y; xi)`
    pub grad_y_g: Vector,
    /// `grad^2_xy G(x, y; xi) z`, length `d_x`
    pub jvp_xy: Vector,
    /// `grad^2_yy G(x, y; xi) z`, length `d_y`
    pub hvp_yy: Vector,
}

/// Local update directions of one worker.
#[derive(Debug, Clone, PartialEq)]
pub struct Directions {
    pub dx: Vector,
    pub dy: Vector,
    pub dz: Vector,
}

impl From<OracleSample> for Directions {
    fn from(s: OracleSample) -> Self {
        Directions {
            dx: s.jvp_xy + s.grad_x_f,
            dy: s.grad_y_g,
            dz: s.hvp_yy + s.grad_y_f,
        }
    }
}

impl Directions {
    pub fn is_finite(&self) -> bool {
        self.dx.iter().chain(self.dy.iter()).chain(self.dz.iter()).all(|v| v.is_finite())
    }
}

/// Stochastic oracle of one worker.
pub trait BilevelOracle: Send + Sync {
    fn worker_id(&self) -> usize;
    fn dim_x(&self) -> usize;
    fn dim_y(&self) -> usize;
    /// Oracle noise level when it is known in closed form.
    fn sigma(&self) -> Option<f64>;
    /// Draws one sample pair and evaluates every oracle on it.
    fn sample(&self, x: &Vector, y: &Vector, z: &Vector, rng: &mut RngStream) -> OracleSample;
    /// Population (expected) values of the same quantities.
    fn population(&self, x: &Vector, y: &Vector, z: &Vector) -> OracleSample;
}

/// Ground truth for the averaged problem.
pub trait AnalyticOracle: Send + Sync {
    fn y_star(&self, x: &Vector) -> Vector;
    fn z_star(&self, x: &Vector) -> Vector;
    fn hypergrad(&self, x: &Vector) -> Vector;
    fn phi_value(&self, x: &Vector) -> f64;
}

/// Serializable description of a problem instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ProblemSpec {
    Quadratic(QuadraticSpec),
    Logistic(LogisticSpec),
}

impl ProblemSpec {
    pub fn build(&self) -> Result<Problem, ProblemError> {
        match self {
            ProblemSpec::Quadratic(s) => make_quadratic(s),
            ProblemSpec::Logistic(s) => make_logistic_hpo(s),
        }
    }

    pub fn workers(&self) -> usize {
        match self {
            ProblemSpec::Quadratic(s) => s.n,
            ProblemSpec::Logistic(s) => s.n,
        }
    }

    pub fn set_workers(&mut self, n: usize) {
        match self {
            ProblemSpec::Quadratic(s) => s.n = n,
            ProblemSpec::Logistic(s) => s.n = n,
        }
    }
}

/// A built problem: worker oracles, optional ground truth, starting point.
#[derive(Clone)]
pub struct Problem {
    workers: Vec<Arc<dyn BilevelOracle>>,
    analytic: Option<Arc<dyn AnalyticOracle>>,
    x0: Vector,
    y0: Vector,
    rho_hint: Option<f64>,
    digest: String,
}

impl std::fmt::Debug for Problem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Problem")
            .field("workers", &self.workers.len())
            .field("d_x", &self.dim_x())
            .field("d_y", &self.dim_y())
            .field("analytic", &self.analytic.is_some())
            .field("digest", &self.digest)
            .finish()
    }
}

impl Problem {
    pub fn new(
        workers: Vec<Arc<dyn BilevelOracle>>,
        analytic: Option<Arc<dyn AnalyticOracle>>,
        x0: Vector,
        y0: Vector,
        rho_hint: Option<f64>,
        digest: String,
    ) -> Result<Self, ProblemError> {
        let first = workers
            .first()
            .ok_or_else(|| ProblemError::InvalidSpec("at least one worker required".into()))?;
        let (dx, dy) = (first.dim_x(), first.dim_y());
        for w in &workers {
            if w.dim_x() != dx || w.dim_y() != dy {
                return Err(ProblemError::InvalidSpec("workers disagree on dimensions".into()));
            }
        }
        check_len("x0", &x0, dx)?;
        check_len("y0", &y0, dy)?;
        Ok(Self {
            workers,
            analytic,
            x0,
            y0,
            rho_hint,
            digest,
        })
    }

    pub fn workers(&self) -> &[Arc<dyn BilevelOracle>] {
        &self.workers
    }

    pub fn n(&self) -> usize {
        self.workers.len()
    }

    pub fn dim_x(&self) -> usize {
        self.workers[0].dim_x()
    }

    pub fn dim_y(&self) -> usize {
        self.workers[0].dim_y()
    }

    pub fn analytic(&self) -> Option<&dyn AnalyticOracle> {
        self.analytic.as_deref()
    }

    pub fn x0(&self) -> &Vector {
        &self.x0
    }

    pub fn y0(&self) -> &Vector {
        &self.y0
    }

    /// Suggested clipping radius `C_f / mu_g`, when the suite can compute it.
    pub fn rho_hint(&self) -> Option<f64> {
        self.rho_hint
    }

    pub fn digest(&self) -> &str {
        &self.digest
    }

    /// Population value of `grad_y g(x, y)` averaged over workers.
    pub fn mean_grad_y_g(&self, x: &Vector, y: &Vector) -> Vector {
        let z = Vector::zeros(self.dim_y());
        let mut acc = Vector::zeros(self.dim_y());
        for w in &self.workers {
            acc += w.population(x, y, &z).grad_y_g;
        }
        acc / self.n() as f64
    }
}

pub(crate) fn digest_of(bytes: &[u8]) -> String {
    hex::encode(&Sha256::digest(bytes)[..8])
}

fn check_len(what: &'static str, v: &Vector, expected: usize) -> Result<(), ProblemError> {
    if v.len() == expected {
        Ok(())
    } else {
        Err(ProblemError::DimensionMismatch {
            what,
            got: v.len(),
            expected,
        })
    }
}

fn check_point(oracle: &dyn BilevelOracle, x: &Vector, y: &Vector, z: &Vector) -> Result<(), ProblemError> {
    check_len("x", x, oracle.dim_x())?;
    check_len("y", y, oracle.dim_y())?;
    check_len("z", z, oracle.dim_y())
}

/// One fresh sample pair, combined into the three local directions.
pub fn compute_directions(
    oracle: &dyn BilevelOracle,
    x: &Vector,
    y: &Vector,
    z: &Vector,
    rng: &mut RngStream,
) -> Result<Directions, ProblemError> {
    check_point(oracle, x, y, z)?;
    Ok(oracle.sample(x, y, z, rng).into())
}

/// Average of `rounds` independent single-sample directions.
pub fn compute_directions_accumulated(
    oracle: &dyn BilevelOracle,
    x: &Vector,
    y: &Vector,
    z: &Vector,
    rounds: u32,
    rng: &mut RngStream,
) -> Result<Directions, ProblemError> {
    if rounds == 0 {
        return Err(ProblemError::InvalidSpec("accumulation rounds must be >= 1".into()));
    }
    let mut acc = compute_directions(oracle, x, y, z, rng)?;
    if rounds == 1 {
        return Ok(acc);
    }
    for _ in 1..rounds {
        let d: Directions = oracle.sample(x, y, z, rng).into();
        acc.dx += d.dx;
        acc.dy += d.dy;
        acc.dz += d.dz;
    }
    let r = f64::from(rounds);
    acc.dx /= r;
    acc.dy /= r;
    acc.dz /= r;
    Ok(acc)
}

/// Exact hypergradient from the problem's analytic oracle.
pub fn hypergrad(problem: &Problem, x: &Vector) -> Result<Vector, ProblemError> {
    let a = problem.analytic().ok_or(ProblemError::Unsupported)?;
    check_len("x", x, problem.dim_x())?;
    Ok(a.hypergrad(x))
}
