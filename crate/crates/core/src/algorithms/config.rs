use serde::{Deserialize, Serialize};

use crate::compressors::{msc_exact_omega, omega_of, CompressorSpec};
use crate::problems::{digest_of, Problem};

use super::RunError;

fn default_theta() -> f64 {
    0.1
}

fn default_rounds() -> u32 {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    NcSoba,
    CSoba,
    CmSoba,
    EfSoba,
    CmSobaMsc,
    EfSobaMsc,
}

impl Algorithm {
    pub const ALL: [Algorithm; 6] = [
        Algorithm::NcSoba,
        Algorithm::CSoba,
        Algorithm::CmSoba,
        Algorithm::EfSoba,
        Algorithm::CmSobaMsc,
        Algorithm::EfSobaMsc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::NcSoba => "nc-soba",
            Algorithm::CSoba => "c-soba",
            Algorithm::CmSoba => "cm-soba",
            Algorithm::EfSoba => "ef-soba",
            Algorithm::CmSobaMsc => "cm-soba-msc",
            Algorithm::EfSobaMsc => "ef-soba-msc",
        }
    }

    pub fn uses_momentum(self) -> bool {
        !matches!(self, Algorithm::NcSoba | Algorithm::CSoba)
    }

    pub fn is_error_feedback(self) -> bool {
        matches!(self, Algorithm::EfSoba | Algorithm::EfSobaMsc)
    }

    pub fn is_msc(self) -> bool {
        matches!(self, Algorithm::CmSobaMsc | Algorithm::EfSobaMsc)
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Algorithm choice and hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgoConfig {
    pub algo: Algorithm,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Momentum weight, used by the momentum and error feedback variants.
    #[serde(default = "default_theta")]
    pub theta: f64,
    /// Clipping radius; falls back to the problem's hint.
    #[serde(default)]
    pub rho: Option<f64>,
    /// Error feedback scaling; defaults to `1 / (1 + omega_u)`.
    #[serde(default)]
    pub delta_u: Option<f64>,
    #[serde(default)]
    pub delta_l: Option<f64>,
    /// Sampling and compression rounds of the MSC variants.
    #[serde(default = "default_rounds")]
    pub msc_rounds: u32,
    #[serde(default = "CompressorSpec::identity")]
    pub upper: CompressorSpec,
    #[serde(default = "CompressorSpec::identity")]
    pub lower: CompressorSpec,
}

impl AlgoConfig {
    pub fn new(algo: Algorithm, alpha: f64, beta: f64, gamma: f64) -> Self {
        Self {
            algo,
            alpha,
            beta,
            gamma,
            theta: default_theta(),
            rho: None,
            delta_u: None,
            delta_l: None,
            msc_rounds: default_rounds(),
            upper: CompressorSpec::Identity,
            lower: CompressorSpec::Identity,
        }
    }

    pub fn with_compressors(mut self, upper: CompressorSpec, lower: CompressorSpec) -> Self {
        self.upper = upper;
        self.lower = lower;
        self
    }

    pub fn with_theta(mut self, theta: f64) -> Self {
        self.theta = theta;
        self
    }

    pub fn with_rho(mut self, rho: f64) -> Self {
        self.rho = Some(rho);
        self
    }

    pub fn with_deltas(mut self, delta_u: f64, delta_l: f64) -> Self {
        self.delta_u = Some(delta_u);
        self.delta_l = Some(delta_l);
        self
    }

    pub fn with_msc_rounds(mut self, rounds: u32) -> Self {
        self.msc_rounds = rounds;
        self
    }

    pub fn with_steps(mut self, alpha: f64, beta: f64, gamma: f64) -> Self {
        self.alpha = alpha;
        self.beta = beta;
        self.gamma = gamma;
        self
    }

    /// Short hex digest of the canonical JSON form.
    pub fn digest(&self) -> String {
        digest_of(&serde_json::to_vec(self).expect("config serializes"))
    }

    /// Checks dimension-free constraints. Errors name the offending field.
    pub fn validate(&self) -> Result<(), RunError> {
        let bad = |field: &str, msg: &str| Err(RunError::Config(format!("{field}: {msg}")));
        for (field, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(field, "stepsize must be positive and finite");
            }
        }
        if !(self.theta > 0.0 && self.theta <= 1.0) {
            return bad("theta", "must be in (0, 1]");
        }
        if let Some(rho) = self.rho {
            if !(rho > 0.0 && rho.is_finite()) {
                return bad("rho", "must be positive and finite");
            }
        }
        for (field, d) in [("delta_u", self.delta_u), ("delta_l", self.delta_l)] {
            if let Some(d) = d {
                if !(d > 0.0 && d <= 1.0) {
                    return bad(field, "must be in (0, 1]");
                }
            }
        }
        if self.msc_rounds == 0 {
            return bad("msc_rounds", "must be >= 1");
        }
        if self.msc_rounds != 1 && !self.algo.is_msc() {
            return bad("msc_rounds", "only the msc variants take more than one round");
        }
        for (field, spec) in [("upper", &self.upper), ("lower", &self.lower)] {
            if matches!(spec, CompressorSpec::Msc { .. }) {
                return bad(field, "msc is selected through the algorithm, not the compressor");
            }
        }
        Ok(())
    }

    /// Binds the config to a problem: effective compressors, radius and
    /// error feedback coefficients.
    pub fn resolve(&self, problem: &Problem) -> Result<Resolved, RunError> {
        self.validate()?;
        let (dx, dy) = (problem.dim_x(), problem.dim_y());
        if problem.n() > usize::from(u16::MAX) {
            return Err(RunError::Config("problem: at most 65535 workers".into()));
        }
        let (upper, lower) = match self.algo {
            Algorithm::NcSoba => (CompressorSpec::Identity, CompressorSpec::Identity),
            _ => (self.upper.clone(), self.lower.clone()),
        };
        upper
            .validate(dx)
            .map_err(|e| RunError::Config(format!("upper: {e}")))?;
        lower
            .validate(dy)
            .map_err(|e| RunError::Config(format!("lower: {e}")))?;
        let rho = self
            .rho
            .or(problem.rho_hint())
            .ok_or_else(|| RunError::Config("rho: required for problems without a radius hint".into()))?;
        let rounds = if self.algo.is_msc() { self.msc_rounds } else { 1 };
        let omega = |spec: &CompressorSpec, dim| {
            // The variance of the composite MSC message is what matters for
            // the scaling; a single round is the inner compressor itself.
            if rounds > 1 {
                msc_exact_omega(spec, rounds, dim)
            } else {
                omega_of(spec, dim)
            }
            .map(|w| w.value())
            .map_err(|e| RunError::Config(e.to_string()))
        };
        let delta_u = match self.delta_u {
            Some(d) => d,
            None => 1.0 / (1.0 + omega(&upper, dx)?),
        };
        let delta_l = match self.delta_l {
            Some(d) => d,
            None => 1.0 / (1.0 + omega(&lower, dy)?),
        };
        let wrap = |spec: CompressorSpec| {
            if self.algo.is_msc() {
                CompressorSpec::msc(spec, rounds)
            } else {
                spec
            }
        };
        Ok(Resolved {
            algo: self.algo,
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
            theta: self.theta,
            rho,
            delta_u,
            delta_l,
            samples: rounds,
            upper: wrap(upper),
            lower: wrap(lower),
        })
    }
}

/// An [`AlgoConfig`] bound to a problem.
#[derive(Debug, Clone, PartialEq)]
pub struct Resolved {
    pub algo: Algorithm,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub theta: f64,
    pub rho: f64,
    pub delta_u: f64,
    pub delta_l: f64,
    /// Oracle samples averaged per direction.
    pub samples: u32,
    /// Effective compressors, MSC-wrapped for the MSC variants.
    pub upper: CompressorSpec,
    pub lower: CompressorSpec,
}
