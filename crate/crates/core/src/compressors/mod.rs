//! Unbiased compression operators and their messages.
//!
//! Every compressor here satisfies `E[C(x)] = x` and
//! `E||C(x) - x||^2 <= omega * ||x||^2` for the omega reported by
//! [`omega_of`]. Messages carry their payload in the form that goes on the
//! wire, and [`CompressedMessage::bit_cost`] depends only on the shape
//! parameters of the message, never on its values.

mod wire;

pub use wire::WireError;

use nalgebra::DVector;
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::simnet::RngStream;

pub type Vector = DVector<f64>;

/// Bits per transmitted floating point entry.
pub const FLOAT_BITS: u64 = 64;

/// Largest quantizer level count accepted (keeps level codes within 32 bits).
pub const MAX_LEVELS: u32 = 1 << 30;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CompressError {
    #[error("invalid compressor spec: {0}")]
    InvalidSpec(String),
    #[error("compressor input contains non-finite entries")]
    NonFiniteInput,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CompressorKind {
    Identity,
    RandKScaled,
    StochasticQuantizer,
    Msc,
}

impl CompressorKind {
    pub(crate) fn tag(self) -> u8 {
        match self {
            CompressorKind::Identity => 0,
            CompressorKind::RandKScaled => 1,
            CompressorKind::StochasticQuantizer => 2,
            CompressorKind::Msc => 3,
        }
    }
}

/// Compressor configuration.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum CompressorSpec {
    Identity,
    /// Keep `k` coordinates chosen uniformly without replacement, scaled by `d/k`.
    RandK { k: usize },
    /// Unbiased stochastic rounding of `|x_i| / ||x||` onto `levels` levels.
    Quantizer { levels: u32 },
    /// Multi-step compression: `rounds` residual passes of `inner`.
    Msc {
        inner: Box<CompressorSpec>,
        rounds: u32,
    },
}

impl CompressorSpec {
    pub fn identity() -> Self {
        CompressorSpec::Identity
    }

    pub fn rand_k(k: usize) -> Self {
        CompressorSpec::RandK { k }
    }

    pub fn quantizer(levels: u32) -> Self {
        CompressorSpec::Quantizer { levels }
    }

    pub fn msc(inner: CompressorSpec, rounds: u32) -> Self {
        CompressorSpec::Msc {
            inner: Box::new(inner),
            rounds,
        }
    }

    pub fn kind(&self) -> CompressorKind {
        match self {
            CompressorSpec::Identity => CompressorKind::Identity,
            CompressorSpec::RandK { .. } => CompressorKind::RandKScaled,
            CompressorSpec::Quantizer { .. } => CompressorKind::StochasticQuantizer,
            CompressorSpec::Msc { .. } => CompressorKind::Msc,
        }
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, CompressorSpec::Identity)
    }

    /// Checks the spec against an input dimension.
    pub fn validate(&self, dim: usize) -> Result<(), CompressError> {
        if dim == 0 {
            return Err(CompressError::InvalidSpec("dimension must be positive".into()));
        }
        match self {
            CompressorSpec::Identity => Ok(()),
            CompressorSpec::RandK { k } => {
                if *k == 0 || *k > dim {
                    Err(CompressError::InvalidSpec(format!(
                        "rand-k requires 1 <= k <= d, got k={k}, d={dim}"
                    )))
                } else {
                    Ok(())
                }
            }
            CompressorSpec::Quantizer { levels } => {
                if *levels == 0 || *levels > MAX_LEVELS {
                    Err(CompressError::InvalidSpec(format!(
                        "quantizer levels must be in 1..={MAX_LEVELS}, got {levels}"
                    )))
                } else {
                    Ok(())
                }
            }
            CompressorSpec::Msc { inner, rounds } => {
                if *rounds == 0 {
                    return Err(CompressError::InvalidSpec("msc requires rounds >= 1".into()));
                }
                if matches!(**inner, CompressorSpec::Msc { .. }) {
                    return Err(CompressError::InvalidSpec("msc inner spec cannot be msc".into()));
                }
                inner.validate(dim)
            }
        }
    }
}

/// Compression variance parameter.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Omega(pub f64);

impl Omega {
    pub fn value(self) -> f64 {
        self.0
    }

    pub fn is_lossless(self) -> bool {
        self.0 == 0.0
    }

    /// Contraction factor `omega / (1 + omega)` of one scaled residual pass.
    pub fn contraction(self) -> f64 {
        self.0 / (1.0 + self.0)
    }
}

/// Declared variance parameter of `spec` on inputs of dimension `dim`.
///
/// For MSC this returns `w * (w / (1 + w))^R`, the declared value. The
/// exact second moment of the MSC estimator is given by
/// [`msc_exact_omega`].
pub fn omega_of(spec: &CompressorSpec, dim: usize) -> Result<Omega, CompressError> {
    spec.validate(dim)?;
    Ok(Omega(match spec {
        CompressorSpec::Identity => 0.0,
        CompressorSpec::RandK { k } => dim as f64 / *k as f64 - 1.0,
        CompressorSpec::Quantizer { levels } => quantizer_omega(dim, *levels),
        CompressorSpec::Msc { inner, rounds } => {
            let w = omega_of(inner, dim)?;
            w.0 * w.contraction().powi(*rounds as i32)
        }
    }))
}

/// Second moment bound `q^R / (1 - q^R)` with `q = w / (1 + w)`, attained
/// with equality when the inner compressor attains its own bound (rand-k).
pub fn msc_exact_omega(inner: &CompressorSpec, rounds: u32, dim: usize) -> Result<Omega, CompressError> {
    CompressorSpec::msc(inner.clone(), rounds).validate(dim)?;
    let w = omega_of(inner, dim)?;
    if w.is_lossless() {
        return Ok(Omega(0.0));
    }
    let qr = w.contraction().powi(rounds as i32);
    Ok(Omega(qr / (1.0 - qr)))
}

fn quantizer_omega(dim: usize, levels: u32) -> f64 {
    let d = dim as f64;
    let s = f64::from(levels);
    (d / (s * s)).min(d.sqrt() / s)
}

pub(crate) fn ceil_log2(n: u64) -> u32 {
    if n <= 1 {
        0
    } else {
        64 - (n - 1).leading_zeros()
    }
}

pub(crate) fn level_code_bits(levels: u32) -> u32 {
    ceil_log2(2 * u64::from(levels) + 1)
}

/// Payload of a compressed message, in wire form.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Dense(Vec<f64>),
    /// Sorted, distinct indices with the already scaled values.
    Sparse { indices: Vec<u32>, values: Vec<f64> },
    /// Signed level codes in `-levels..=levels` and the shared scale `||x||`.
    Quantized { levels: u32, scale: f64, codes: Vec<i32> },
    /// One inner message per MSC round.
    Msc { rounds: Vec<CompressedMessage> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressedMessage {
    dim: usize,
    payload: Payload,
}

impl CompressedMessage {
    #[cfg(test)]
    pub(crate) fn from_parts(dim: usize, payload: Payload) -> Self {
        Self { dim, payload }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn payload(&self) -> &Payload {
        &self.payload
    }

    pub fn origin_kind(&self) -> CompressorKind {
        match &self.payload {
            Payload::Dense(_) => CompressorKind::Identity,
            Payload::Sparse { .. } => CompressorKind::RandKScaled,
            Payload::Quantized { .. } => CompressorKind::StochasticQuantizer,
            Payload::Msc { .. } => CompressorKind::Msc,
        }
    }

    /// Exact wire cost in bits; a function of the shape only.
    pub fn bit_cost(&self) -> u64 {
        let d = self.dim as u64;
        match &self.payload {
            Payload::Dense(_) => FLOAT_BITS * d,
            Payload::Sparse { indices, .. } => {
                indices.len() as u64 * (u64::from(ceil_log2(d)) + FLOAT_BITS)
            }
            Payload::Quantized { levels, .. } => {
                d * u64::from(level_code_bits(*levels)) + FLOAT_BITS
            }
            Payload::Msc { rounds } => rounds.iter().map(|m| m.bit_cost()).sum(),
        }
    }

    /// Dense vector the receiver reconstructs.
    pub fn materialize(&self) -> Vector {
        match &self.payload {
            Payload::Dense(v) => Vector::from_column_slice(v),
            Payload::Sparse { indices, values } => {
                let mut out = Vector::zeros(self.dim);
                for (&i, &v) in indices.iter().zip(values) {
                    out[i as usize] = v;
                }
                out
            }
            Payload::Quantized {
                levels,
                scale,
                codes,
            } => {
                let s = f64::from(*levels);
                Vector::from_iterator(self.dim, codes.iter().map(|&c| scale * f64::from(c) / s))
            }
            Payload::Msc { rounds } => {
                let omega = message_omega(&rounds[0]);
                msc_reconstruct(rounds, omega, self.dim)
            }
        }
    }

    /// Canonical byte layout: kind tag (1 byte), dim (u32 LE), payload.
    pub fn to_bytes(&self) -> Vec<u8> {
        wire::encode(self)
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self, WireError> {
        wire::decode(data)
    }
}

/// Omega of the (non-MSC) compressor that produced `msg`.
fn message_omega(msg: &CompressedMessage) -> Omega {
    let d = msg.dim as f64;
    Omega(match &msg.payload {
        Payload::Dense(_) => 0.0,
        Payload::Sparse { indices, .. } => d / indices.len() as f64 - 1.0,
        Payload::Quantized { levels, .. } => quantizer_omega(msg.dim, *levels),
        Payload::Msc { .. } => unreachable!("nested msc messages are rejected on construction"),
    })
}

/// Replays the MSC accumulation `v <- v + C(x - v) / (1 + w)` and applies
/// the debiasing scale. A single round reduces to the inner message itself.
fn msc_reconstruct(rounds: &[CompressedMessage], omega: Omega, dim: usize) -> Vector {
    if rounds.len() == 1 {
        return rounds[0].materialize();
    }
    let v = msc_accumulate(rounds, omega, dim);
    let debias = 1.0 - omega.contraction().powi(rounds.len() as i32);
    v / debias
}

fn msc_accumulate(rounds: &[CompressedMessage], omega: Omega, dim: usize) -> Vector {
    let shrink = 1.0 / (1.0 + omega.0);
    let mut v = Vector::zeros(dim);
    for m in rounds {
        v.axpy(shrink, &m.materialize(), 1.0);
    }
    v
}

fn check_finite(x: &Vector) -> Result<(), CompressError> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(CompressError::NonFiniteInput)
    }
}

/// Compresses `x` under `spec`, drawing all randomness from `rng`.
pub fn compress(spec: &CompressorSpec, x: &Vector, rng: &mut RngStream) -> Result<CompressedMessage, CompressError> {
    let dim = x.len();
    spec.validate(dim)?;
    check_finite(x)?;
    Ok(match spec {
        CompressorSpec::Identity => CompressedMessage {
            dim,
            payload: Payload::Dense(x.as_slice().to_vec()),
        },
        CompressorSpec::RandK { k } => rand_k(x, *k, rng),
        CompressorSpec::Quantizer { levels } => quantize(x, *levels, rng),
        CompressorSpec::Msc { inner, rounds } => return msc_compress(inner, *rounds, x, rng),
    })
}

fn rand_k(x: &Vector, k: usize, rng: &mut RngStream) -> CompressedMessage {
    let dim = x.len();
    let mut indices: Vec<u32> = index::sample(rng, dim, k).into_iter().map(|i| i as u32).collect();
    indices.sort_unstable();
    let scale = dim as f64 / k as f64;
    let values = indices.iter().map(|&i| scale * x[i as usize]).collect();
    CompressedMessage {
        dim,
        payload: Payload::Sparse { indices, values },
    }
}

fn quantize(x: &Vector, levels: u32, rng: &mut RngStream) -> CompressedMessage {
    let dim = x.len();
    let scale = x.norm();
    let s = f64::from(levels);
    let codes = x
        .iter()
        .map(|&v| {
            if scale == 0.0 {
                return 0;
            }
            let r = (v.abs() / scale * s).min(s);
            let floor = r.floor();
            let up = rng.random::<f64>() < r - floor;
            let level = floor as i32 + i32::from(up);
            if v < 0.0 {
                -level
            } else {
                level
            }
        })
        .collect();
    CompressedMessage {
        dim,
        payload: Payload::Quantized {
            levels,
            scale,
            codes,
        },
    }
}

/// Multi-step compression of `x` with `rounds` passes of `inner`.
///
/// Round `r` transmits `C(x - v)` and sets `v <- v + C(x - v) / (1 + w)`;
/// the receiver outputs `v / (1 - (w / (1 + w))^R)`. Every round is billed
/// even when the residual is zero.
pub fn msc_compress(
    inner: &CompressorSpec,
    rounds: u32,
    x: &Vector,
    rng: &mut RngStream,
) -> Result<CompressedMessage, CompressError> {
    let dim = x.len();
    CompressorSpec::msc(inner.clone(), rounds).validate(dim)?;
    check_finite(x)?;
    let omega = omega_of(inner, dim)?;
    let shrink = 1.0 / (1.0 + omega.0);
    let mut v = Vector::zeros(dim);
    let mut msgs = Vec::with_capacity(rounds as usize);
    for _ in 0..rounds {
        let residual = x - &v;
        let m = compress(inner, &residual, rng)?;
        v.axpy(shrink, &m.materialize(), 1.0);
        msgs.push(m);
    }
    Ok(CompressedMessage {
        dim,
        payload: Payload::Msc { rounds: msgs },
    })
}

/// Bit cost of one message under `spec` at dimension `dim`, without compressing.
pub fn bit_cost_of(spec: &CompressorSpec, dim: usize) -> Result<u64, CompressError> {
    spec.validate(dim)?;
    let d = dim as u64;
    Ok(match spec {
        CompressorSpec::Identity => FLOAT_BITS * d,
        CompressorSpec::RandK { k } => *k as u64 * (u64::from(ceil_log2(d)) + FLOAT_BITS),
        CompressorSpec::Quantizer { levels } => d * u64::from(level_code_bits(*levels)) + FLOAT_BITS,
        CompressorSpec::Msc { inner, rounds } => u64::from(*rounds) * bit_cost_of(inner, dim)?,
    })
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BudgetError {
    #[error("budget {budget} infeasible: need at least 2 kept coordinates and positive dimensions")]
    Infeasible { budget: usize },
}

/// Splits a budget of kept coordinates between upper-level and lower-level
/// rand-k compressors so that `(1 + w_u) / (1 + w_l)` is as close as
/// possible (in log scale) to `sqrt(d_x / d_y)`.
///
/// Ties go to the pair that keeps more coordinates in total, then to the
/// larger upper-level `k`.
pub fn recommended_k_pair(d_x: usize, d_y: usize, budget: usize) -> Result<(usize, usize), BudgetError> {
    if budget < 2 || d_x == 0 || d_y == 0 {
        return Err(BudgetError::Infeasible { budget });
    }
    let target = 0.5 * (d_x as f64 / d_y as f64).ln();
    let err = |ku: usize, kl: usize| {
        let ratio = (d_x as f64 / ku as f64) / (d_y as f64 / kl as f64);
        (ratio.ln() - target).abs()
    };
    // For fixed k_u the error is unimodal in k_l, so only the two integers
    // around the ideal k_l and the clamp bounds need checking.
    let mut best: Option<(f64, usize, usize)> = None;
    for ku in 1..=d_x.min(budget - 1) {
        let kl_max = d_y.min(budget - ku);
        let ideal = ku as f64 * (d_y as f64 / d_x as f64) * target.exp();
        let lo = (ideal.floor() as usize).clamp(1, kl_max);
        let hi = (ideal.ceil() as usize).clamp(1, kl_max);
        for kl in [lo, hi] {
            let e = err(ku, kl);
            let better = match best {
                None => true,
                Some((be, bu, bl)) => {
                    e < be || (e == be && (ku + kl > bu + bl || (ku + kl == bu + bl && ku > bu)))
                }
            };
            if better {
                best = Some((e, ku, kl));
            }
        }
    }
    best.map(|(_, ku, kl)| (ku, kl)).ok_or(BudgetError::Infeasible { budget })
}
