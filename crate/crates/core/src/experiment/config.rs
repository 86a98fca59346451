use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::algorithms::AlgoConfig;
use crate::compressors::CompressorSpec;
use crate::problems::ProblemSpec;

use super::ExperimentError;

/// Stepsize grid from the usual search range.
pub const DEFAULT_GRID: [f64; 6] = [0.001, 0.005, 0.01, 0.05, 0.1, 0.5];

fn default_grid() -> Vec<f64> {
    DEFAULT_GRID.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlgoBlock {
    pub label: String,
    #[serde(flatten)]
    pub config: AlgoConfig,
}

// Flattening would accept unknown keys, so the label is split off by hand
// and the rest goes through the strict AlgoConfig deserializer.
impl<'de> Deserialize<'de> for AlgoBlock {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let mut map = serde_json::Map::deserialize(d)?;
        let label = match map.remove("label") {
            Some(serde_json::Value::String(s)) => s,
            Some(_) => return Err(D::Error::custom("label must be a string")),
            None => return Err(D::Error::missing_field("label")),
        };
        let config = AlgoConfig::deserialize(serde_json::Value::Object(map)).map_err(D::Error::custom)?;
        Ok(Self { label, config })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Workers,
    KUpper,
    KLower,
    #[serde(rename = "R")]
    R,
    Hetero,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Workers => "workers",
            SweepAxis::KUpper => "k_upper",
            SweepAxis::KLower => "k_lower",
            SweepAxis::R => "R",
            SweepAxis::Hetero => "hetero",
        }
    }

    fn integral(self) -> bool {
        !matches!(self, SweepAxis::Hetero)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSettings {
    #[serde(default = "default_grid")]
    pub alpha: Vec<f64>,
    #[serde(default = "default_grid")]
    pub beta: Vec<f64>,
    #[serde(default = "default_grid")]
    pub gamma: Vec<f64>,
    /// Rounds per candidate; defaults to a tenth of the experiment's rounds.
    #[serde(default)]
    pub rounds: Option<u64>,
}

impl Default for GridSettings {
    fn default() -> Self {
        Self {
            alpha: default_grid(),
            beta: default_grid(),
            gamma: default_grid(),
            rounds: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemSpec,
    #[serde(rename = "algo")]
    pub algos: Vec<AlgoBlock>,
    pub rounds: u64,
    pub seeds: Vec<u64>,
    pub output_dir: String,
    #[serde(default)]
    pub sweep: Option<Sweep>,
    #[serde(default)]
    pub grid: Option<GridSettings>,
}

fn invalid(field: impl Into<String>, msg: impl std::fmt::Display) -> ExperimentError {
    ExperimentError::Invalid {
        field: field.into(),
        msg: msg.to_string(),
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ExperimentError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ExperimentError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path).map_err(|source| ExperimentError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Grid settings in effect, with the search budget filled in.
    pub fn grid_settings(&self) -> GridSettings {
        let mut g = self.grid.clone().unwrap_or_default();
        g.rounds = Some(g.rounds.unwrap_or((self.rounds / 10).max(1)));
        g
    }

    /// The sweep values, or a single `None` when there is no sweep.
    pub fn sweep_points(&self) -> Vec<Option<(SweepAxis, f64)>> {
        match &self.sweep {
            Some(s) => s.values.iter().map(|&v| Some((s.axis, v))).collect(),
            None => vec![None],
        }
    }

    /// Problem and algorithm config for one sweep point.
    pub fn instantiate(
        &self,
        block: &AlgoBlock,
        point: Option<(SweepAxis, f64)>,
    ) -> Result<(ProblemSpec, AlgoConfig), ExperimentError> {
        let mut problem = self.problem.clone();
        let mut algo = block.config.clone();
        if let Some((axis, v)) = point {
            let field = || format!("sweep.values ({}={v})", axis.name());
            match axis {
                SweepAxis::Workers => problem.set_workers(v as usize),
                SweepAxis::KUpper => algo.upper = CompressorSpec::rand_k(v as usize),
                SweepAxis::KLower => algo.lower = CompressorSpec::rand_k(v as usize),
                SweepAxis::R => {
                    if algo.algo.is_msc() {
                        algo.msc_rounds = v as u32;
                    }
                }
                SweepAxis::Hetero => match &mut problem {
                    ProblemSpec::Quadratic(q) => q.hetero = v,
                    ProblemSpec::Logistic(_) => {
                        return Err(invalid(field(), "hetero sweeps need the quadratic suite"))
                    }
                },
            }
        }
        Ok((problem, algo))
    }

    /// Checks every field, building each problem instance once so that
    /// compressor shapes are validated against real dimensions.
    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.algos.is_empty() {
            return Err(invalid("algo", "at least one [[algo]] block is required"));
        }
        if self.seeds.is_empty() {
            return Err(invalid("seeds", "at least one seed is required"));
        }
        if self.output_dir.trim().is_empty() {
            return Err(invalid("output_dir", "must not be empty"));
        }
        let mut uniq = HashSet::new();
        if let Some(s) = self.seeds.iter().find(|s| !uniq.insert(**s)) {
            return Err(invalid("seeds", format!("duplicate seed {s}")));
        }
        if self.rounds >= u64::from(u32::MAX) {
            return Err(invalid("rounds", "must be below 2^32 - 1"));
        }
        let mut labels = HashSet::new();
        for (i, b) in self.algos.iter().enumerate() {
            let ok = !b.label.is_empty()
                && b.label.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
                && !b.label.starts_with('.');
            if !ok {
                return Err(invalid(format!("algo[{i}].label"), "use letters, digits, '-', '_' or '.'"));
            }
            if !labels.insert(b.label.as_str()) {
                return Err(invalid(format!("algo[{i}].label"), format!("duplicate label {:?}", b.label)));
            }
        }
        let mut seen = HashSet::new();
        if let Some(s) = &self.sweep {
            if s.values.is_empty() {
                return Err(invalid("sweep.values", "must not be empty"));
            }
            for (j, &v) in s.values.iter().enumerate() {
                let field = format!("sweep.values[{j}]");
                if !v.is_finite() || v < 0.0 || (s.axis.integral() && (v.fract() != 0.0 || v < 1.0 || v > f64::from(u32::MAX))) {
                    return Err(invalid(field, format!("{v} is not a valid {}", s.axis.name())));
                }
                if !seen.insert(v.to_bits()) {
                    return Err(invalid(field, format!("duplicate value {v}")));
                }
            }
        }
        if let Some(g) = &self.grid {
            for (name, vals) in [("alpha", &g.alpha), ("beta", &g.beta), ("gamma", &g.gamma)] {
                if vals.is_empty() {
                    return Err(invalid(format!("grid.{name}"), "must not be empty"));
                }
                if let Some(v) = vals.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
                    return Err(invalid(format!("grid.{name}"), format!("{v} is not a positive stepsize")));
                }
            }
            if g.rounds == Some(0) {
                return Err(invalid("grid.rounds", "must be >= 1"));
            }
        }
        for point in self.sweep_points() {
            let (problem, _) = self.instantiate(&self.algos[0], point)?;
            let built = problem.build().map_err(|e| invalid("problem", e))?;
            for (i, b) in self.algos.iter().enumerate() {
                let (_, algo) = self.instantiate(b, point)?;
                algo.resolve(&built).map_err(|e| {
                    let msg = e.to_string();
                    let msg = msg.strip_prefix("invalid algorithm config: ").unwrap_or(&msg);
                    invalid(format!("algo[{i}]"), msg)
                })?;
            }
        }
        Ok(())
    }
}
