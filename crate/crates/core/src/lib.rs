//! Distributed stochastic bilevel optimization with compressed uplink.
//!
//! The crate simulates a parameter server with `n` workers running the
//! single-loop SOBA recursion for `(x, y, z)` and its compressed variants:
//! plain compression, compression with momentum, error feedback, and the
//! multi-step compression wrappers of the latter two. Communication is
//! accounted bit-exactly, and the quadratic test suite provides closed-form
//! ground truth so convergence can be checked directly.
//!
//! Modules:
//! - [`compressors`]: unbiased compressors, MSC, wire format, bit costs
//! - [`problems`]: stochastic bilevel oracles and test suites
//! - [`algorithms`]: server/worker state machines and the run loop
//! - [`simnet`]: RNG streams, bit ledger, message log
//! - [`metrics`]: per-round measurement and CSV traces
//! - [`experiment`]: config-driven runner, grid search, bit comparison

pub mod algorithms;
pub mod compressors;
pub mod experiment;
pub mod metrics;
pub mod problems;
pub mod simnet;

pub use algorithms::{run, AlgoConfig, Algorithm, RunError, RunOptions};
pub use compressors::{compress, msc_compress, omega_of, CompressedMessage, CompressorSpec, Vector};
pub use metrics::{RunTrace, TraceRow};
pub use problems::{Problem, ProblemSpec};
