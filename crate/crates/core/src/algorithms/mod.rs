//! Server and worker state machines of SOBA and its compressed variants.
//!
//! One round is a superstep: every worker draws a fresh sample pair,
//! builds its local directions and uplinks three compressed messages; the
//! server reduces them in worker order, updates `(x, y, z)` and broadcasts
//! the new iterate. Worker randomness is keyed by `(seed, round, worker,
//! slot)`, so the schedule used for the worker phase never changes results.

mod config;

use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;

pub use config::{AlgoConfig, Algorithm, Resolved};

use crate::compressors::{compress, CompressError, CompressedMessage, Vector, FLOAT_BITS};
use crate::metrics::{measure, RunTrace, TraceHeader};
use crate::problems::{compute_directions_accumulated, BilevelOracle, Problem, ProblemError};
use crate::simnet::{slot, substream, BitLedger, LogEntry, MessageLog, INIT_ROUND};

/// Any state norm above this aborts the run.
pub const DIVERGENCE_NORM: f64 = 1e12;

/// Server-side state. Vectors an algorithm does not use have length zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub x: Vector,
    pub y: Vector,
    pub z: Vector,
    /// Momentum of the momentum variants.
    pub h_x: Vector,
    /// Error feedback aggregate, the mean of the workers' `m_x`.
    pub hhat_x: Vector,
    pub m_y: Vector,
    pub m_z: Vector,
    pub round: u64,
}

impl ServerState {
    fn vectors(&self) -> [&Vector; 7] {
        [&self.x, &self.y, &self.z, &self.h_x, &self.hhat_x, &self.m_y, &self.m_z]
    }

    /// Little-endian bytes of every vector, for exact comparisons.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.round.to_le_bytes().to_vec();
        for v in self.vectors() {
            out.extend_from_slice(&(v.len() as u64).to_le_bytes());
            for e in v.iter() {
                out.extend_from_slice(&e.to_le_bytes());
            }
        }
        out
    }

    fn is_sane(&self) -> bool {
        self.vectors()
            .iter()
            .all(|v| v.iter().all(|e| e.is_finite()) && v.norm() <= DIVERGENCE_NORM)
    }
}

/// Per-worker error feedback memories; empty for the other algorithms.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkerState {
    pub h_xi: Vector,
    pub m_xi: Vector,
    pub m_yi: Vector,
    pub m_zi: Vector,
}

impl WorkerState {
    fn empty() -> Self {
        Self {
            h_xi: Vector::zeros(0),
            m_xi: Vector::zeros(0),
            m_yi: Vector::zeros(0),
            m_zi: Vector::zeros(0),
        }
    }
}

/// Euclidean projection onto the ball of radius `rho`.
pub fn clip(z: &Vector, rho: f64) -> Vector {
    let norm = z.norm();
    if norm <= rho {
        z.clone()
    } else {
        z * (rho / norm)
    }
}

/// Order in which the worker phase of a round is executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Schedule {
    #[default]
    InOrder,
    Reversed,
    /// A fresh permutation per round drawn from this seed.
    Shuffled(u64),
    Parallel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    pub schedule: Schedule,
    /// Keep every uplink message in a [`MessageLog`].
    pub keep_log: bool,
    /// Record a trace row every this many rounds (the last round always).
    pub measure_every: u64,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            schedule: Schedule::InOrder,
            keep_log: false,
            measure_every: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundOutcome {
    pub uplink_bits: u64,
    pub broadcast_bits: u64,
    /// The round's uplink messages in worker order.
    pub messages: Vec<LogEntry>,
}

/// Failure inside a single round.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum StepError {
    #[error("state became non-finite or exceeded the divergence bound")]
    Diverged,
    #[error("error feedback bookkeeping violated: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error("{0:?} is not handled by this round function")]
    WrongAlgorithm(Algorithm),
}

impl From<CompressError> for StepError {
    fn from(e: CompressError) -> Self {
        match e {
            CompressError::NonFiniteInput => StepError::Diverged,
            other => StepError::Inconsistent(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RunError {
    #[error("invalid algorithm config: {0}")]
    Config(String),
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error("diverged at round {round}")]
    Divergence { round: u64, trace: Box<RunTrace> },
    #[error("round {round}: {source}")]
    Step { round: u64, source: StepError },
}

impl RunError {
    /// Rows recorded before a divergence.
    pub fn partial_trace(&self) -> Option<&RunTrace> {
        match self {
            RunError::Divergence { trace, .. } => Some(trace),
            _ => None,
        }
    }
}

struct WorkerOutput {
    msgs: [CompressedMessage; 3],
    mats: [Vector; 3],
    state: Option<WorkerState>,
}

const SLOTS: [u16; 3] = [slot::UPPER, slot::LOWER_Y, slot::LOWER_Z];

fn worker_step(
    cfg: &Resolved,
    oracle: &dyn BilevelOracle,
    id: usize,
    server: &ServerState,
    ws: &WorkerState,
    seed: u64,
) -> Result<WorkerOutput, StepError> {
    let round = server.round as u32;
    let w = id as u16;
    let mut rng = substream(seed, round, w, slot::ORACLE);
    let d = compute_directions_accumulated(oracle, &server.x, &server.y, &server.z, cfg.samples, &mut rng)?;
    if !d.is_finite() {
        return Err(StepError::Diverged);
    }
    let (inputs, state) = if cfg.algo.is_error_feedback() {
        let h_xi = &ws.h_xi * (1.0 - cfg.theta) + &d.dx * cfg.theta;
        let inputs = [&h_xi - &ws.m_xi, d.dy - &ws.m_yi, d.dz - &ws.m_zi];
        (inputs, Some(h_xi))
    } else {
        ([d.dx, d.dy, d.dz], None)
    };
    let specs = [&cfg.upper, &cfg.lower, &cfg.lower];
    let mut msgs = Vec::with_capacity(3);
    let mut mats = Vec::with_capacity(3);
    for ((input, spec), s) in inputs.iter().zip(specs).zip(SLOTS) {
        let mut rng = substream(seed, round, w, s);
        let m = compress(spec, input, &mut rng)?;
        mats.push(m.materialize());
        msgs.push(m);
    }
    let state = state.map(|h_xi| {
        let mut m_xi = ws.m_xi.clone();
        m_xi.axpy(cfg.delta_u, &mats[0], 1.0);
        let mut m_yi = ws.m_yi.clone();
        m_yi.axpy(cfg.delta_l, &mats[1], 1.0);
        let mut m_zi = ws.m_zi.clone();
        m_zi.axpy(cfg.delta_l, &mats[2], 1.0);
        WorkerState { h_xi, m_xi, m_yi, m_zi }
    });
    Ok(WorkerOutput {
        msgs: msgs.try_into().expect("three messages"),
        mats: mats.try_into().expect("three vectors"),
        state,
    })
}

/// Runs the worker phase under `schedule` and returns outputs indexed by worker.
fn worker_phase(
    cfg: &Resolved,
    problem: &Problem,
    server: &ServerState,
    workers: &[WorkerState],
    seed: u64,
    schedule: Schedule,
) -> Result<Vec<WorkerOutput>, StepError> {
    let n = problem.n();
    let empty = WorkerState::empty();
    let ws = |i: usize| workers.get(i).unwrap_or(&empty);
    let one = |i: usize| worker_step(cfg, problem.workers()[i].as_ref(), i, server, ws(i), seed);
    if schedule == Schedule::Parallel {
        return (0..n).into_par_iter().map(one).collect();
    }
    let mut order: Vec<usize> = (0..n).collect();
    match schedule {
        Schedule::Reversed => order.reverse(),
        Schedule::Shuffled(s) => order.shuffle(&mut substream(s, server.round as u32, 0, 0)),
        _ => {}
    }
    let mut slots: Vec<Option<WorkerOutput>> = (0..n).map(|_| None).collect();
    for i in order {
        slots[i] = Some(one(i)?);
    }
    Ok(slots.into_iter().map(|o| o.expect("every worker ran")).collect())
}

/// Mean of message `idx` over workers, summed in worker order.
fn mean_of(outputs: &[WorkerOutput], idx: usize) -> Vector {
    let mut acc = Vector::zeros(outputs[0].mats[idx].len());
    for o in outputs {
        acc += &o.mats[idx];
    }
    acc / outputs.len() as f64
}

fn finish(
    problem: &Problem,
    server: &mut ServerState,
    outputs: Vec<WorkerOutput>,
) -> Result<RoundOutcome, StepError> {
    if !server.is_sane() {
        return Err(StepError::Diverged);
    }
    let round = server.round as u32;
    server.round += 1;
    let mut uplink_bits = 0;
    let mut messages = Vec::with_capacity(3 * outputs.len());
    for (w, o) in outputs.into_iter().enumerate() {
        for (m, s) in o.msgs.into_iter().zip(SLOTS) {
            uplink_bits += m.bit_cost();
            messages.push(LogEntry {
                round,
                worker: w as u16,
                slot: s,
                message: m,
            });
        }
    }
    Ok(RoundOutcome {
        uplink_bits,
        broadcast_bits: broadcast_bits(problem),
        messages,
    })
}

/// Bits of one uncompressed broadcast of `(x, y, z)`.
pub fn broadcast_bits(problem: &Problem) -> u64 {
    FLOAT_BITS * (problem.dim_x() + 2 * problem.dim_y()) as u64
}

fn lower_updates(cfg: &Resolved, server: &mut ServerState, dy: &Vector, dz: &Vector) {
    server.y.axpy(-cfg.beta, dy, 1.0);
    let mut z = server.z.clone();
    z.axpy(-cfg.gamma, dz, 1.0);
    server.z = clip(&z, cfg.rho);
}

/// One round of C-SOBA (NC-SOBA when the compressors are the identity).
pub fn round_c_soba(
    cfg: &Resolved,
    problem: &Problem,
    server: &mut ServerState,
    seed: u64,
    schedule: Schedule,
) -> Result<RoundOutcome, StepError> {
    if !matches!(cfg.algo, Algorithm::NcSoba | Algorithm::CSoba) {
        return Err(StepError::WrongAlgorithm(cfg.algo));
    }
    let outputs = worker_phase(cfg, problem, server, &[], seed, schedule)?;
    let (dx, dy, dz) = (mean_of(&outputs, 0), mean_of(&outputs, 1), mean_of(&outputs, 2));
    server.x.axpy(-cfg.alpha, &dx, 1.0);
    lower_updates(cfg, server, &dy, &dz);
    finish(problem, server, outputs)
}

/// One round of CM-SOBA or CM-SOBA-MSC: `x` moves along the momentum from
/// before this round, then the momentum absorbs the new messages.
pub fn round_cm_soba(
    cfg: &Resolved,
    problem: &Problem,
    server: &mut ServerState,
    seed: u64,
    schedule: Schedule,
) -> Result<RoundOutcome, StepError> {
    if !matches!(cfg.algo, Algorithm::CmSoba | Algorithm::CmSobaMsc) {
        return Err(StepError::WrongAlgorithm(cfg.algo));
    }
    let outputs = worker_phase(cfg, problem, server, &[], seed, schedule)?;
    let (dx, dy, dz) = (mean_of(&outputs, 0), mean_of(&outputs, 1), mean_of(&outputs, 2));
    server.x.axpy(-cfg.alpha, &server.h_x, 1.0);
    server.h_x = &server.h_x * (1.0 - cfg.theta) + dx * cfg.theta;
    lower_updates(cfg, server, &dy, &dz);
    finish(problem, server, outputs)
}

/// Server-side unbiased lower-level estimates `m + mean(messages)`.
fn ef_estimates_from(server: &ServerState, outputs: &[WorkerOutput]) -> (Vector, Vector) {
    (&server.m_y + mean_of(outputs, 1), &server.m_z + mean_of(outputs, 2))
}

/// The error feedback estimates `(D_y, D_z)` the server would use in the
/// next round, without changing any state.
pub fn ef_direction_estimates(
    cfg: &Resolved,
    problem: &Problem,
    server: &ServerState,
    workers: &[WorkerState],
    seed: u64,
) -> Result<(Vector, Vector), StepError> {
    if !cfg.algo.is_error_feedback() {
        return Err(StepError::WrongAlgorithm(cfg.algo));
    }
    let outputs = worker_phase(cfg, problem, server, workers, seed, Schedule::InOrder)?;
    Ok(ef_estimates_from(server, &outputs))
}

/// One round of EF-SOBA or EF-SOBA-MSC.
pub fn round_ef_soba(
    cfg: &Resolved,
    problem: &Problem,
    server: &mut ServerState,
    workers: &mut [WorkerState],
    seed: u64,
    schedule: Schedule,
) -> Result<RoundOutcome, StepError> {
    if !cfg.algo.is_error_feedback() {
        return Err(StepError::WrongAlgorithm(cfg.algo));
    }
    let mut outputs = worker_phase(cfg, problem, server, workers, seed, schedule)?;
    let (dy_hat, dz_hat) = ef_estimates_from(server, &outputs);
    server.x.axpy(-cfg.alpha, &server.hhat_x, 1.0);
    lower_updates(cfg, server, &dy_hat, &dz_hat);
    server.hhat_x.axpy(cfg.delta_u, &mean_of(&outputs, 0), 1.0);
    server.m_y.axpy(cfg.delta_l, &mean_of(&outputs, 1), 1.0);
    server.m_z.axpy(cfg.delta_l, &mean_of(&outputs, 2), 1.0);
    for (ws, o) in workers.iter_mut().zip(outputs.iter_mut()) {
        *ws = o.state.take().expect("error feedback workers return state");
    }
    check_bookkeeping(server, workers)?;
    finish(problem, server, outputs)
}

/// MSC variants: the base round with `R`-sample directions and MSC messages,
/// both already folded into the resolved config.
pub fn round_msc_variant(
    cfg: &Resolved,
    problem: &Problem,
    server: &mut ServerState,
    workers: &mut [WorkerState],
    seed: u64,
    schedule: Schedule,
) -> Result<RoundOutcome, StepError> {
    match cfg.algo {
        Algorithm::CmSobaMsc => round_cm_soba(cfg, problem, server, seed, schedule),
        Algorithm::EfSobaMsc => round_ef_soba(cfg, problem, server, workers, seed, schedule),
        other => Err(StepError::WrongAlgorithm(other)),
    }
}

/// Dispatches one round by algorithm.
pub fn step(
    cfg: &Resolved,
    problem: &Problem,
    server: &mut ServerState,
    workers: &mut [WorkerState],
    seed: u64,
    schedule: Schedule,
) -> Result<RoundOutcome, StepError> {
    match cfg.algo {
        Algorithm::NcSoba | Algorithm::CSoba => round_c_soba(cfg, problem, server, seed, schedule),
        Algorithm::CmSoba => round_cm_soba(cfg, problem, server, seed, schedule),
        Algorithm::EfSoba => round_ef_soba(cfg, problem, server, workers, seed, schedule),
        Algorithm::CmSobaMsc | Algorithm::EfSobaMsc => {
            round_msc_variant(cfg, problem, server, workers, seed, schedule)
        }
    }
}

fn mean_vec<'a>(vs: impl Iterator<Item = &'a Vector>, len: usize, n: usize) -> Vector {
    let mut acc = Vector::zeros(len);
    for v in vs {
        acc += v;
    }
    acc / n as f64
}

fn check_bookkeeping(server: &ServerState, workers: &[WorkerState]) -> Result<(), StepError> {
    let n = workers.len();
    let pairs = [
        ("hhat_x", &server.hhat_x, mean_vec(workers.iter().map(|w| &w.m_xi), server.x.len(), n)),
        ("m_y", &server.m_y, mean_vec(workers.iter().map(|w| &w.m_yi), server.y.len(), n)),
        ("m_z", &server.m_z, mean_vec(workers.iter().map(|w| &w.m_zi), server.y.len(), n)),
    ];
    for (name, held, mean) in pairs {
        let gap = (held - &mean).amax();
        if !(gap <= 1e-9 * (1.0 + held.amax())) {
            return Err(StepError::Inconsistent(format!("{name} drifted from the worker mean by {gap:e}")));
        }
    }
    Ok(())
}

/// Initial state: `x0, y0` from the problem, `z = 0`. Momentum variants
/// start from one uncompressed, unbilled direction sample per worker, and
/// error feedback sets `m_x,i = h_x,i` with zero lower-level memories.
pub fn init_state(
    cfg: &Resolved,
    problem: &Problem,
    seed: u64,
) -> Result<(ServerState, Vec<WorkerState>), StepError> {
    let (dx, dy) = (problem.dim_x(), problem.dim_y());
    let z = Vector::zeros(dy);
    let mut server = ServerState {
        x: problem.x0().clone(),
        y: problem.y0().clone(),
        z: z.clone(),
        h_x: Vector::zeros(0),
        hhat_x: Vector::zeros(0),
        m_y: Vector::zeros(0),
        m_z: Vector::zeros(0),
        round: 0,
    };
    if !cfg.algo.uses_momentum() {
        return Ok((server, Vec::new()));
    }
    let mut h = Vec::with_capacity(problem.n());
    for (i, oracle) in problem.workers().iter().enumerate() {
        let mut rng = substream(seed, INIT_ROUND, i as u16, slot::ORACLE);
        let d = compute_directions_accumulated(oracle.as_ref(), &server.x, &server.y, &z, cfg.samples, &mut rng)?;
        h.push(d.dx);
    }
    let h_bar = mean_vec(h.iter(), dx, h.len());
    if !cfg.algo.is_error_feedback() {
        server.h_x = h_bar;
        return Ok((server, Vec::new()));
    }
    server.hhat_x = h_bar;
    server.m_y = Vector::zeros(dy);
    server.m_z = Vector::zeros(dy);
    let workers = h
        .into_iter()
        .map(|h_xi| WorkerState {
            m_xi: h_xi.clone(),
            h_xi,
            m_yi: Vector::zeros(dy),
            m_zi: Vector::zeros(dy),
        })
        .collect();
    Ok((server, workers))
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub trace: RunTrace,
    pub ledger: BitLedger,
    pub log: Option<MessageLog>,
    pub server: ServerState,
    pub workers: Vec<WorkerState>,
}

/// Runs `rounds` rounds and returns the trace.
pub fn run(cfg: &AlgoConfig, problem: &Problem, rounds: u64, seed: u64, opts: &RunOptions) -> Result<RunTrace, RunError> {
    run_detailed(cfg, problem, rounds, seed, opts).map(|r| r.trace)
}

/// Like [`run`], also returning the ledger, message log and final state.
pub fn run_detailed(
    cfg: &AlgoConfig,
    problem: &Problem,
    rounds: u64,
    seed: u64,
    opts: &RunOptions,
) -> Result<RunReport, RunError> {
    let resolved = cfg.resolve(problem)?;
    if rounds >= u64::from(INIT_ROUND) {
        return Err(RunError::Config(format!("rounds: must be below {INIT_ROUND}")));
    }
    if opts.measure_every == 0 {
        return Err(RunError::Config("measure_every: must be >= 1".into()));
    }
    let mut trace = RunTrace::new(TraceHeader {
        cfg_digest: cfg.digest(),
        seed,
        problem_digest: problem.digest().to_string(),
    });
    let (mut server, mut workers) =
        init_state(&resolved, problem, seed).map_err(|source| RunError::Step { round: 0, source })?;
    let analytic = problem.analytic();
    let mut ledger = BitLedger::new();
    let mut log = opts.keep_log.then(MessageLog::new);
    trace.push(measure(&server, analytic), 0.0);
    for k in 0..rounds {
        let started = Instant::now();
        let outcome = match step(&resolved, problem, &mut server, &mut workers, seed, opts.schedule) {
            Ok(o) => o,
            Err(StepError::Diverged) => {
                return Err(RunError::Divergence {
                    round: k,
                    trace: Box::new(trace),
                })
            }
            Err(source) => return Err(RunError::Step { round: k, source }),
        };
        for e in &outcome.messages {
            ledger.record(&e.message);
        }
        ledger.record_broadcast(outcome.broadcast_bits);
        ledger.close_round(k + 1);
        if let Some(log) = log.as_mut() {
            for e in outcome.messages {
                log.push(e);
            }
        }
        if (k + 1).is_multiple_of(opts.measure_every) || k + 1 == rounds {
            let mut row = measure(&server, analytic);
            row.uplink_bits = ledger.uplink_bits();
            row.broadcast_bits = ledger.broadcast_bits();
            trace.push(row, started.elapsed().as_secs_f64());
        }
    }
    Ok(RunReport {
        trace,
        ledger,
        log,
        server,
        workers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compressors::CompressorSpec;
    use crate::problems::{QuadraticSpec, make_quadratic};

    fn quad(sigma: f64) -> Problem {
        make_quadratic(&QuadraticSpec::new(3, 6, 4, 11).with_sigma(sigma).with_hetero(0.5)).unwrap()
    }

    #[test]
    fn clip_examples() {
        let v = |a: &[f64]| Vector::from_column_slice(a);
        assert_eq!(clip(&v(&[3.0, 4.0]), 10.0), v(&[3.0, 4.0]));
        assert_eq!(clip(&v(&[6.0, 8.0]), 5.0), v(&[3.0, 4.0]));
        assert_eq!(clip(&v(&[3.0, 4.0]), 5.0), v(&[3.0, 4.0]));
        assert_eq!(clip(&v(&[0.0, 0.0]), 1.0), v(&[0.0, 0.0]));
    }

    #[test]
    fn zero_rounds_gives_initial_row_only() {
        let p = quad(0.1);
        let t = run(&AlgoConfig::new(Algorithm::CSoba, 0.1, 0.1, 0.1), &p, 0, 1, &RunOptions::default()).unwrap();
        assert_eq!(t.rows().len(), 1);
        assert_eq!(t.rows()[0].round, 0);
        assert_eq!(t.rows()[0].uplink_bits, 0);
    }

    #[test]
    fn nc_soba_ignores_configured_compressors() {
        let p = quad(0.0);
        let cfg = AlgoConfig::new(Algorithm::NcSoba, 0.1, 0.1, 0.1)
            .with_compressors(CompressorSpec::rand_k(2), CompressorSpec::rand_k(1));
        let r = cfg.resolve(&p).unwrap();
        assert!(r.upper.is_identity() && r.lower.is_identity());
    }

    #[test]
    fn default_deltas_follow_omega() {
        let p = quad(0.0);
        let cfg = AlgoConfig::new(Algorithm::EfSoba, 0.1, 0.1, 0.1)
            .with_compressors(CompressorSpec::rand_k(2), CompressorSpec::rand_k(1));
        let r = cfg.resolve(&p).unwrap();
        assert_eq!(r.delta_u, 1.0 / 3.0);
        assert_eq!(r.delta_l, 1.0 / 4.0);
    }

    #[test]
    fn config_errors_name_the_field() {
        let p = quad(0.0);
        let mut cfg = AlgoConfig::new(Algorithm::CSoba, 0.1, -1.0, 0.1);
        assert!(cfg.resolve(&p).unwrap_err().to_string().contains("beta"));
        cfg.beta = 0.1;
        cfg.theta = 0.0;
        assert!(cfg.resolve(&p).unwrap_err().to_string().contains("theta"));
        cfg.theta = 0.5;
        cfg.upper = CompressorSpec::rand_k(7);
        assert!(cfg.resolve(&p).unwrap_err().to_string().contains("upper"));
        cfg.upper = CompressorSpec::Identity;
        cfg.msc_rounds = 3;
        assert!(cfg.resolve(&p).unwrap_err().to_string().contains("msc_rounds"));
    }

    #[test]
    fn ef_bookkeeping_holds_under_compression() {
        let p = quad(0.2);
        let cfg = AlgoConfig::new(Algorithm::EfSoba, 0.05, 0.05, 0.05)
            .with_compressors(CompressorSpec::rand_k(2), CompressorSpec::rand_k(1));
        let rep = run_detailed(&cfg, &p, 50, 3, &RunOptions::default()).unwrap();
        check_bookkeeping(&rep.server, &rep.workers).unwrap();
    }

    #[test]
    fn wrong_round_function_is_rejected() {
        let p = quad(0.0);
        let r = AlgoConfig::new(Algorithm::EfSoba, 0.1, 0.1, 0.1).resolve(&p).unwrap();
        let (mut s, _) = init_state(&r, &p, 0).unwrap();
        assert_eq!(
            round_c_soba(&r, &p, &mut s, 0, Schedule::InOrder),
            Err(StepError::WrongAlgorithm(Algorithm::EfSoba))
        );
    }

    #[test]
    fn divergence_reports_round_and_partial_trace() {
        let p = quad(0.0);
        let cfg = AlgoConfig::new(Algorithm::CSoba, 1e3, 1e3, 1e3).with_rho(1e6);
        match run(&cfg, &p, 1000, 0, &RunOptions::default()) {
            Err(RunError::Divergence { round, trace }) => {
                assert_eq!(trace.rows().len() as u64, round + 1);
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
