//! Config-driven experiments: batches of seeded runs with optional
//! parameter sweeps, stepsize grid search and bit-budget comparisons.
//!
//! A run writes `<output_dir>/<label>/seed-<s>[/sweep-<axis>-<v>]/trace.csv`
//! for every combination plus `<output_dir>/manifest.json`. Nothing in the
//! outputs depends on timing or scheduling, so reruns are byte-identical.

mod config;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

pub use config::{AlgoBlock, ExperimentConfig, GridSettings, Sweep, SweepAxis, DEFAULT_GRID};

use crate::algorithms::{run, AlgoConfig, RunError, RunOptions};
use crate::metrics::{averaged_stationarity, read_csv, write_csv, MetricsError, RunTrace};
use crate::problems::{digest_of, Problem};

/// Environment variable that relocates every output directory.
pub const OUTPUT_ROOT_ENV: &str = "SOBA_OUTPUT_ROOT";

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config field {field}: {msg}")]
    Invalid { field: String, msg: String },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("runs diverged: {}", .0.join(", "))]
    Diverged(Vec<String>),
    #[error("grid search for {label:?}: every candidate diverged")]
    SearchFailed { label: String },
    #[error("{what}: {source}")]
    Run { what: String, source: RunError },
}

impl ExperimentError {
    /// Process exit status for the command line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Parse(_) | ExperimentError::Invalid { .. } => 2,
            ExperimentError::Diverged(_) => 3,
            ExperimentError::SearchFailed { .. } => 4,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Output root: `$SOBA_OUTPUT_ROOT` when set, else `default`.
pub fn output_root(default: &Path) -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
        .unwrap_or_else(|| default.to_path_buf())
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct ManifestRun {
    pub label: String,
    pub seed: u64,
    pub sweep_axis: Option<String>,
    pub sweep_value: Option<f64>,
    pub path: String,
    pub status: String,
    pub rounds_recorded: usize,
    pub final_grad_norm_sq: Option<f64>,
    pub final_uplink_bits: u64,
    pub cfg_digest: String,
    pub problem_digest: String,
    pub trace_digest: String,
    pub config: AlgoConfig,
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub config_digest: String,
    pub config: ExperimentConfig,
    pub runs: Vec<ManifestRun>,
}

/// Result of a batch: where it went and what each run produced.
#[derive(Debug, Clone)]
pub struct ExperimentSummary {
    pub output_dir: PathBuf,
    pub manifest: Manifest,
}

fn sweep_dir(point: Option<(SweepAxis, f64)>) -> Option<String> {
    point.map(|(axis, v)| format!("sweep-{}-{v}", axis.name()))
}

fn config_digest(cfg: &ExperimentConfig) -> String {
    digest_of(cfg.to_toml_string().as_bytes())
}

fn build_problems(cfg: &ExperimentConfig) -> Result<Vec<Problem>, ExperimentError> {
    cfg.sweep_points()
        .into_iter()
        .map(|point| {
            let (spec, _) = cfg.instantiate(&cfg.algos[0], point)?;
            spec.build().map_err(|e| ExperimentError::Invalid {
                field: "problem".into(),
                msg: e.to_string(),
            })
        })
        .collect()
}

struct Job {
    block: usize,
    seed: u64,
    point: usize,
}

/// Runs every `(algo, seed, sweep value)` combination and writes traces and
/// the manifest under `root/output_dir`. Divergent runs keep their partial
/// traces and make the call fail with [`ExperimentError::Diverged`] after
/// everything has been written.
pub fn run_experiment(cfg: &ExperimentConfig, root: &Path) -> Result<ExperimentSummary, ExperimentError> {
    cfg.validate()?;
    let out = root.join(&cfg.output_dir);
    let points = cfg.sweep_points();
    let problems = build_problems(cfg)?;
    let mut jobs = Vec::new();
    for block in 0..cfg.algos.len() {
        for &seed in &cfg.seeds {
            for point in 0..points.len() {
                jobs.push(Job { block, seed, point });
            }
        }
    }
    let results: Vec<_> = jobs
        .par_iter()
        .map(|j| {
            let (_, algo) = cfg.instantiate(&cfg.algos[j.block], points[j.point])?;
            let res = run(&algo, &problems[j.point], cfg.rounds, j.seed, &RunOptions::default());
            Ok((algo, res))
        })
        .collect::<Result<_, ExperimentError>>()?;

    let mut runs = Vec::with_capacity(jobs.len());
    let mut diverged = Vec::new();
    for (j, (algo, res)) in jobs.iter().zip(results) {
        let label = &cfg.algos[j.block].label;
        let mut rel = PathBuf::from(label).join(format!("seed-{}", j.seed));
        if let Some(d) = sweep_dir(points[j.point]) {
            rel.push(d);
        }
        let (trace, status) = match res {
            Ok(t) => (t, "ok"),
            Err(RunError::Divergence { trace, .. }) => (*trace, "diverged"),
            Err(source) => {
                return Err(ExperimentError::Run {
                    what: rel.display().to_string(),
                    source,
                })
            }
        };
        let dir = out.join(&rel);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        write_csv(&trace, &dir.join("trace.csv"))?;
        rel.push("trace.csv");
        let path = rel.to_string_lossy().replace('\\', "/");
        if status != "ok" {
            diverged.push(path.clone());
        }
        let last = trace.last().copied().unwrap_or_default();
        runs.push(ManifestRun {
            label: label.clone(),
            seed: j.seed,
            sweep_axis: points[j.point].map(|(a, _)| a.name().to_string()),
            sweep_value: points[j.point].map(|(_, v)| v),
            path,
            status: status.into(),
            rounds_recorded: trace.rows().len(),
            final_grad_norm_sq: last.grad_norm_sq,
            final_uplink_bits: last.uplink_bits,
            cfg_digest: trace.header().cfg_digest.clone(),
            problem_digest: trace.header().problem_digest.clone(),
            trace_digest: digest_of(trace.to_csv_string().as_bytes()),
            config: algo,
        });
    }
    let manifest = Manifest {
        config_digest: config_digest(cfg),
        config: cfg.clone(),
        runs,
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    if diverged.is_empty() {
        Ok(ExperimentSummary {
            output_dir: out,
            manifest,
        })
    } else {
        Err(ExperimentError::Diverged(diverged))
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ExperimentError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let mut text = serde_json::to_string_pretty(value).expect("manifest serializes");
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

/// One scored stepsize triple.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Candidate {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Averaged stationarity, `None` if the run diverged.
    pub score: Option<f64>,
}

/// Index of the lowest finite score. Ties go to the smaller `alpha`, then
/// `beta`, then `gamma`.
pub fn select_best(candidates: &[Candidate]) -> Option<usize> {
    let key = |c: &Candidate| (c.alpha, c.beta, c.gamma);
    let mut best: Option<usize> = None;
    for (i, c) in candidates.iter().enumerate() {
        let Some(s) = c.score.filter(|s| s.is_finite()) else { continue };
        best = match best {
            None => Some(i),
            Some(b) => {
                let bs = candidates[b].score.expect("scored");
                let better = s < bs || (s == bs && key(c).partial_cmp(&key(&candidates[b])) == Some(std::cmp::Ordering::Less));
                Some(if better { i } else { b })
            }
        };
    }
    best
}

#[derive(Debug, Clone, Serialize)]
pub struct GridChoice {
    pub label: String,
    pub config: AlgoConfig,
    pub score: f64,
    pub candidates: Vec<Candidate>,
}

#[derive(Debug, Clone, Serialize)]
struct GridManifest<'a> {
    config_digest: String,
    search_rounds: u64,
    search_seed: u64,
    choices: &'a [GridChoice],
}

/// Scores every stepsize triple of the grid on one algorithm block.
pub fn search_block(
    block: &AlgoBlock,
    problem: &Problem,
    grid: &GridSettings,
    rounds: u64,
    seed: u64,
) -> Result<GridChoice, ExperimentError> {
    let mut triples = Vec::new();
    for &a in &grid.alpha {
        for &b in &grid.beta {
            for &g in &grid.gamma {
                triples.push((a, b, g));
            }
        }
    }
    let candidates: Vec<Candidate> = triples
        .par_iter()
        .map(|&(alpha, beta, gamma)| {
            let cfg = block.config.clone().with_steps(alpha, beta, gamma);
            let score = run(&cfg, problem, rounds, seed, &RunOptions::default())
                .ok()
                .and_then(|t| averaged_stationarity(&t).ok())
                .filter(|s| s.is_finite());
            Candidate {
                alpha,
                beta,
                gamma,
                score,
            }
        })
        .collect();
    let best = select_best(&candidates).ok_or_else(|| ExperimentError::SearchFailed {
        label: block.label.clone(),
    })?;
    let c = candidates[best];
    Ok(GridChoice {
        label: block.label.clone(),
        config: block.config.clone().with_steps(c.alpha, c.beta, c.gamma),
        score: c.score.expect("selected candidates are scored"),
        candidates,
    })
}

/// Grid search over stepsizes for every algorithm block, on the base
/// problem and the first seed, for `K / 10` rounds unless configured. The
/// selection is written to `<output_dir>/grid.json`.
pub fn grid_search(cfg: &ExperimentConfig, root: &Path) -> Result<Vec<GridChoice>, ExperimentError> {
    cfg.validate()?;
    let settings = cfg.grid_settings();
    let rounds = settings.rounds.expect("filled in");
    let seed = cfg.seeds[0];
    let problem = cfg.problem.build().map_err(|e| ExperimentError::Invalid {
        field: "problem".into(),
        msg: e.to_string(),
    })?;
    let choices = cfg
        .algos
        .iter()
        .map(|b| search_block(b, &problem, &settings, rounds, seed))
        .collect::<Result<Vec<_>, _>>()?;
    let manifest = GridManifest {
        config_digest: config_digest(cfg),
        search_rounds: rounds,
        search_seed: seed,
        choices: &choices,
    };
    write_json(&root.join(&cfg.output_dir).join("grid.json"), &manifest)?;
    Ok(choices)
}

/// Bits spent by one run to reach the target, or its best value.
#[derive(Debug, Clone, PartialEq)]
pub enum Reach {
    Hit { round: u64, uplink_bits: u64 },
    Unreached { best_grad_norm_sq: Option<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareReport {
    pub target: f64,
    pub a: (PathBuf, Reach),
    pub b: (PathBuf, Reach),
}

impl CompareReport {
    /// `bits(a) / bits(b)` when both runs reach the target.
    pub fn ratio(&self) -> Option<f64> {
        match (&self.a.1, &self.b.1) {
            (Reach::Hit { uplink_bits: x, .. }, Reach::Hit { uplink_bits: y, .. }) => {
                if x == y {
                    Some(1.0)
                } else if *y == 0 {
                    None
                } else {
                    Some(*x as f64 / *y as f64)
                }
            }
            _ => None,
        }
    }
}

impl fmt::Display for CompareReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "target grad_norm_sq <= {:e}", self.target)?;
        for (name, (path, reach)) in [("A", &self.a), ("B", &self.b)] {
            match reach {
                Reach::Hit { round, uplink_bits } => {
                    writeln!(f, "{name} {}: {uplink_bits} uplink bits at round {round}", path.display())?
                }
                Reach::Unreached { best_grad_norm_sq } => {
                    let best = best_grad_norm_sq.map_or("n/a".to_string(), |v| format!("{v:e}"));
                    writeln!(f, "{name} {}: unreached (best grad_norm_sq {best})", path.display())?
                }
            }
        }
        match self.ratio() {
            Some(r) => write!(f, "ratio A/B: {r}"),
            None => write!(f, "ratio A/B: unreached"),
        }
    }
}

fn trace_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join("trace.csv")
    } else {
        p.to_path_buf()
    }
}

/// Uplink bits at the first round with `grad_norm_sq <= target`.
pub fn reach(trace: &RunTrace, target: f64) -> Reach {
    match trace.first_below(target) {
        Some(r) => Reach::Hit {
            round: r.round,
            uplink_bits: r.uplink_bits,
        },
        None => Reach::Unreached {
            best_grad_norm_sq: trace.rows().iter().filter_map(|r| r.grad_norm_sq).reduce(f64::min),
        },
    }
}

/// Compares two run directories (or trace files) at a stationarity target.
pub fn compare_bits(a: &Path, b: &Path, target: f64) -> Result<CompareReport, ExperimentError> {
    let (pa, pb) = (trace_path(a), trace_path(b));
    let (ta, tb) = (read_csv(&pa)?, read_csv(&pb)?);
    Ok(CompareReport {
        target,
        a: (pa, reach(&ta, target)),
        b: (pb, reach(&tb, target)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
rounds = 40
seeds = [1, 2]
output_dir = "out"

[problem]
kind = "quadratic"
n = 2
d_x = 4
d_y = 3
mu_g = 1.0
l_g = 4.0
sigma = 0.1
seed = 7

[[algo]]
label = "nc"
algo = "nc-soba"
alpha = 0.1
beta = 0.1
gamma = 0.1

[[algo]]
label = "c"
algo = "c-soba"
alpha = 0.1
beta = 0.1
gamma = 0.1
upper = { kind = "rand-k", k = 2 }
lower = { kind = "rand-k", k = 1 }
"#;

    fn files_under(dir: &Path) -> Vec<PathBuf> {
        let mut out = Vec::new();
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                out.extend(files_under(&p));
            } else {
                out.push(p);
            }
        }
        out.sort();
        out
    }

    #[test]
    fn parses_and_counts_outputs() {
        let cfg = ExperimentConfig::from_toml_str(BASE).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let s = run_experiment(&cfg, dir.path()).unwrap();
        let files = files_under(&s.output_dir);
        assert_eq!(files.iter().filter(|p| p.ends_with("trace.csv")).count(), 4);
        assert!(s.output_dir.join("manifest.json").exists());
        assert!(s.output_dir.join("c/seed-2/trace.csv").exists());
    }

    #[test]
    fn worker_sweep_multiplies_outputs() {
        let text = format!("{BASE}\n[sweep]\naxis = \"workers\"\nvalues = [1, 2, 4, 8]\n");
        let cfg = ExperimentConfig::from_toml_str(&text).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let s = run_experiment(&cfg, dir.path()).unwrap();
        assert_eq!(s.manifest.runs.len(), 16);
        assert!(s.output_dir.join("nc/seed-1/sweep-workers-8/trace.csv").exists());
    }

    #[test]
    fn reruns_are_byte_identical() {
        let cfg = ExperimentConfig::from_toml_str(BASE).unwrap();
        let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let s1 = run_experiment(&cfg, d1.path()).unwrap();
        let s2 = run_experiment(&cfg, d2.path()).unwrap();
        let (f1, f2) = (files_under(&s1.output_dir), files_under(&s2.output_dir));
        assert_eq!(f1.len(), f2.len());
        for (a, b) in f1.iter().zip(&f2) {
            assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap(), "{}", a.display());
        }
    }

    fn field_of(text: &str) -> String {
        match ExperimentConfig::from_toml_str(text) {
            Err(ExperimentError::Invalid { field, .. }) => field,
            other => panic!("expected a validation error, got {other:?}"),
        }
    }

    #[test]
    fn validation_names_fields() {
        assert_eq!(field_of(&BASE.replace("seeds = [1, 2]", "seeds = []")), "seeds");
        assert_eq!(field_of(&BASE.replace("label = \"c\"", "label = \"nc\"")), "algo[1].label");
        assert_eq!(field_of(&BASE.replace("k = 2", "k = 9")), "algo[1]");
        assert_eq!(field_of(&BASE.replace("l_g = 4.0", "l_g = 0.5")), "problem");
        let sweep = format!("{BASE}\n[sweep]\naxis = \"workers\"\nvalues = [1, 2.5]\n");
        assert_eq!(field_of(&sweep), "sweep.values[1]");
        let grid = format!("{BASE}\n[grid]\nalpha = [0.1, -1.0]\n");
        assert_eq!(field_of(&grid), "grid.alpha");
        let msg = ExperimentConfig::from_toml_str(&BASE.replace("alpha = 0.1\nbeta", "alpha = 0.0\nbeta"))
            .unwrap_err()
            .to_string();
        assert!(msg.contains("algo[0]") && msg.contains("alpha"), "{msg}");
    }

    #[test]
    fn unknown_keys_are_parse_errors() {
        let err = ExperimentConfig::from_toml_str(&BASE.replace("rounds = 40", "rounds = 40\nbogus = 1")).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let err = ExperimentConfig::from_toml_str(&BASE.replace("gamma = 0.1\nupper", "gamma = 0.1\nbogus = 1\nupper"))
            .unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn single_point_grid_returns_that_point() {
        let text = format!("{BASE}\n[grid]\nalpha = [0.05]\nbeta = [0.2]\ngamma = [0.3]\n");
        let cfg = ExperimentConfig::from_toml_str(&text).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let choices = grid_search(&cfg, dir.path()).unwrap();
        for c in &choices {
            assert_eq!((c.config.alpha, c.config.beta, c.config.gamma), (0.05, 0.2, 0.3));
        }
        assert!(dir.path().join("out/grid.json").exists());
    }

    #[test]
    fn tie_break_is_lexicographic() {
        let c = |alpha, beta, gamma, score| Candidate {
            alpha,
            beta,
            gamma,
            score,
        };
        let cands = [
            c(0.1, 0.1, 0.1, Some(1.0)),
            c(0.01, 0.5, 0.5, Some(1.0)),
            c(0.01, 0.1, 0.5, Some(1.0)),
            c(0.01, 0.1, 0.2, Some(1.0)),
            c(0.001, 0.1, 0.1, None),
            c(0.5, 0.5, 0.5, Some(f64::NAN)),
        ];
        assert_eq!(select_best(&cands), Some(3));
        let mut rev = cands;
        rev.reverse();
        assert_eq!(select_best(&rev), Some(2));
        assert_eq!(select_best(&[c(0.1, 0.1, 0.1, None)]), None);
    }

    #[test]
    fn all_divergent_grid_fails_with_code_4() {
        let text = format!("{BASE}\n[grid]\nalpha = [1e6]\nbeta = [1e6]\ngamma = [1e6]\n");
        let cfg = ExperimentConfig::from_toml_str(&text).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let err = grid_search(&cfg, dir.path()).unwrap_err();
        assert_eq!(err.exit_code(), 4, "{err}");
    }

    #[test]
    fn divergence_keeps_partial_outputs() {
        let text = BASE.replace("alpha = 0.1\nbeta = 0.1\ngamma = 0.1\nupper", "alpha = 1e6\nbeta = 1e6\ngamma = 1e6\nupper");
        let cfg = ExperimentConfig::from_toml_str(&text).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let err = run_experiment(&cfg, dir.path()).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert!(dir.path().join("out/c/seed-1/trace.csv").exists());
        assert!(dir.path().join("out/nc/seed-1/trace.csv").exists());
        assert!(dir.path().join("out/manifest.json").exists());
    }

    #[test]
    fn compare_identical_and_unreached() {
        let cfg = ExperimentConfig::from_toml_str(BASE).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let s = run_experiment(&cfg, dir.path()).unwrap();
        let a = s.output_dir.join("nc/seed-1");
        let r = compare_bits(&a, &a, 10.0).unwrap();
        assert_eq!(r.ratio(), Some(1.0));
        let r = compare_bits(&a, &s.output_dir.join("c/seed-1"), 0.0).unwrap();
        assert!(matches!(r.a.1, Reach::Unreached { best_grad_norm_sq: Some(_) }));
        assert!(r.to_string().contains("unreached"));
    }
}
