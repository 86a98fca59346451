//! Canonical byte layout of compressed messages.
//!
//! ```text
//! tag: u8 | dim: u32 LE | body
//! Identity   body = dim x f64 LE
//! RandK      body = k: u32 LE | bits: k x (index: ceil(log2 d) bits, value: 64 bits), zero padded
//! Quantizer  body = levels: u32 LE | bits: scale 64 bits, dim x code (ceil(log2(2s+1)) bits), zero padded
//! Msc        body = rounds: u32 LE | rounds x (len: u32 LE | inner message)
//! ```
//!
//! Bit fields are packed least-significant-bit first. Quantizer codes are
//! stored as `level + levels`, so they are unsigned.

use bitvec::prelude::*;

use super::{ceil_log2, level_code_bits, CompressedMessage, Payload, MAX_LEVELS};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum WireError {
    #[error("message truncated")]
    Truncated,
    #[error("unknown kind tag {0}")]
    UnknownTag(u8),
    #[error("invalid field: {0}")]
    Invalid(&'static str),
    #[error("{0} trailing bytes")]
    Trailing(usize),
}

type Bits = BitVec<u8, Lsb0>;

fn push_bits(bits: &mut Bits, value: u64, width: u32) {
    if width > 0 {
        bits.extend_from_bitslice(&value.view_bits::<Lsb0>()[..width as usize]);
    }
}

pub(super) fn encode(msg: &CompressedMessage) -> Vec<u8> {
    let mut out = vec![msg.origin_kind().tag()];
    out.extend_from_slice(&(msg.dim as u32).to_le_bytes());
    match &msg.payload {
        Payload::Dense(values) => {
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Payload::Sparse { indices, values } => {
            out.extend_from_slice(&(indices.len() as u32).to_le_bytes());
            let w = ceil_log2(msg.dim as u64);
            let mut bits = Bits::new();
            for (&i, v) in indices.iter().zip(values) {
                push_bits(&mut bits, u64::from(i), w);
                push_bits(&mut bits, v.to_bits(), 64);
            }
            out.extend_from_slice(bits.as_raw_slice());
        }
        Payload::Quantized {
            levels,
            scale,
            codes,
        } => {
            out.extend_from_slice(&levels.to_le_bytes());
            let w = level_code_bits(*levels);
            let mut bits = Bits::new();
            push_bits(&mut bits, scale.to_bits(), 64);
            for &c in codes {
                push_bits(&mut bits, (i64::from(c) + i64::from(*levels)) as u64, w);
            }
            out.extend_from_slice(bits.as_raw_slice());
        }
        Payload::Msc { rounds } => {
            out.extend_from_slice(&(rounds.len() as u32).to_le_bytes());
            for m in rounds {
                let inner = encode(m);
                out.extend_from_slice(&(inner.len() as u32).to_le_bytes());
                out.extend_from_slice(&inner);
            }
        }
    }
    out
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        let end = self.pos.checked_add(n).ok_or(WireError::Truncated)?;
        let s = self.data.get(self.pos..end).ok_or(WireError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.data.len() - self.pos
    }
}

/// Reads a bit-packed block of exactly `total_bits` bits (rounded up to
/// whole bytes) and checks that the padding is zero.
fn take_bits<'a>(cur: &mut Cursor<'a>, total_bits: u64) -> Result<&'a BitSlice<u8, Lsb0>, WireError> {
    let nbytes = usize::try_from(total_bits.div_ceil(8)).map_err(|_| WireError::Truncated)?;
    if nbytes > cur.remaining() {
        return Err(WireError::Truncated);
    }
    let raw = cur.take(nbytes)?;
    let bits = raw.view_bits::<Lsb0>();
    if bits[total_bits as usize..].any() {
        return Err(WireError::Invalid("nonzero padding bits"));
    }
    Ok(&bits[..total_bits as usize])
}

fn read_field(bits: &BitSlice<u8, Lsb0>, pos: &mut usize, width: u32) -> u64 {
    if width == 0 {
        return 0;
    }
    let v = bits[*pos..*pos + width as usize].load_le::<u64>();
    *pos += width as usize;
    v
}

fn finite(v: f64) -> Result<f64, WireError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(WireError::Invalid("non-finite value"))
    }
}

pub(super) fn decode(data: &[u8]) -> Result<CompressedMessage, WireError> {
    let mut cur = Cursor { data, pos: 0 };
    let msg = decode_one(&mut cur, true)?;
    match cur.remaining() {
        0 => Ok(msg),
        n => Err(WireError::Trailing(n)),
    }
}

fn decode_one(cur: &mut Cursor<'_>, allow_msc: bool) -> Result<CompressedMessage, WireError> {
    let tag = cur.u8()?;
    let dim = cur.u32()? as usize;
    if dim == 0 {
        return Err(WireError::Invalid("zero dimension"));
    }
    let payload = match tag {
        0 => {
            let bytes = dim.checked_mul(8).ok_or(WireError::Truncated)?;
            if bytes > cur.remaining() {
                return Err(WireError::Truncated);
            }
            let raw = cur.take(bytes)?;
            let values = raw
                .chunks_exact(8)
                .map(|c| finite(f64::from_le_bytes(c.try_into().unwrap())))
                .collect::<Result<Vec<_>, _>>()?;
            Payload::Dense(values)
        }
        1 => {
            let k = cur.u32()? as usize;
            if k == 0 || k > dim {
                return Err(WireError::Invalid("rand-k count out of range"));
            }
            let w = ceil_log2(dim as u64);
            let bits = take_bits(cur, k as u64 * (u64::from(w) + 64))?;
            let mut pos = 0;
            let mut indices = Vec::with_capacity(k);
            let mut values = Vec::with_capacity(k);
            for _ in 0..k {
                let i = read_field(bits, &mut pos, w);
                if i >= dim as u64 {
                    return Err(WireError::Invalid("index out of range"));
                }
                if indices.last().is_some_and(|&p: &u32| u64::from(p) >= i) {
                    return Err(WireError::Invalid("indices not strictly increasing"));
                }
                indices.push(i as u32);
                values.push(finite(f64::from_bits(read_field(bits, &mut pos, 64)))?);
            }
            Payload::Sparse { indices, values }
        }
        2 => {
            let levels = cur.u32()?;
            if levels == 0 || levels > MAX_LEVELS {
                return Err(WireError::Invalid("quantizer levels out of range"));
            }
            let w = level_code_bits(levels);
            let bits = take_bits(cur, 64 + dim as u64 * u64::from(w))?;
            let mut pos = 0;
            let scale = finite(f64::from_bits(read_field(bits, &mut pos, 64)))?;
            if scale < 0.0 {
                return Err(WireError::Invalid("negative scale"));
            }
            let span = 2 * u64::from(levels);
            let codes = (0..dim)
                .map(|_| {
                    let c = read_field(bits, &mut pos, w);
                    if c > span {
                        Err(WireError::Invalid("level code out of range"))
                    } else {
                        Ok((c as i64 - i64::from(levels)) as i32)
                    }
                })
                .collect::<Result<Vec<_>, _>>()?;
            Payload::Quantized {
                levels,
                scale,
                codes,
            }
        }
        3 if allow_msc => {
            let r = cur.u32()? as usize;
            if r == 0 {
                return Err(WireError::Invalid("msc with zero rounds"));
            }
            let mut rounds: Vec<CompressedMessage> = Vec::new();
            for _ in 0..r {
                let len = cur.u32()? as usize;
                let body = cur.take(len)?;
                let mut inner_cur = Cursor { data: body, pos: 0 };
                let m = decode_one(&mut inner_cur, false)?;
                if inner_cur.remaining() != 0 {
                    return Err(WireError::Trailing(inner_cur.remaining()));
                }
                if m.dim != dim {
                    return Err(WireError::Invalid("msc inner dimension mismatch"));
                }
                if let Some(first) = rounds.first() {
                    if !same_shape(first, &m) {
                        return Err(WireError::Invalid("msc inner messages differ in shape"));
                    }
                }
                rounds.push(m);
            }
            Payload::Msc { rounds }
        }
        3 => return Err(WireError::Invalid("nested msc message")),
        t => return Err(WireError::UnknownTag(t)),
    };
    Ok(CompressedMessage { dim, payload })
}

fn same_shape(a: &CompressedMessage, b: &CompressedMessage) -> bool {
    match (&a.payload, &b.payload) {
        (Payload::Dense(_), Payload::Dense(_)) => true,
        (Payload::Sparse { indices: i, .. }, Payload::Sparse { indices: j, .. }) => i.len() == j.len(),
        (Payload::Quantized { levels: s, .. }, Payload::Quantized { levels: t, .. }) => s == t,
        _ => false,
    }
}
