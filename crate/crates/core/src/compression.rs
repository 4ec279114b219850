//! Update compression: top-t sparsification composed with unbiased
//! probabilistic quantization, plus exact bits-on-wire accounting.
//!
//! The bit charge for a compressed payload is exactly `t * N_b`: the sparse
//! index side information is deliberately not counted, so a real codec would
//! pay roughly `t * log2(N_P)` bits on top of what the energy model charges.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParameterVector;
use crate::rng::{self, RngStream};

/// Governs the compression operator and its bit accounting.
///
/// With `identity` set, compression is bypassed entirely (exact dense
/// payloads) while the bit charge stays at `t * N_b` of the configured
/// `delta`/`n_bits`, matching an uncompressed baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompressionPolicy {
    /// Fraction of parameters kept by sparsification, in (0, 1].
    pub delta: f64,
    /// Quantization bits per kept entry.
    pub n_bits: u8,
    /// Bits of a clear-text parameter (default 32).
    #[serde(default = "default_n_bits_clear")]
    pub n_bits_clear: u8,
    /// Bypass the compression operator (oracle/baseline mode).
    #[serde(default)]
    pub identity: bool,
}

fn default_n_bits_clear() -> u8 {
    32
}

impl CompressionPolicy {
    pub fn uncompressed() -> Self {
        CompressionPolicy { delta: 1.0, n_bits: 32, n_bits_clear: 32, identity: false }
    }

    pub fn identity() -> Self {
        CompressionPolicy { identity: true, ..Self::uncompressed() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "delta must be in (0, 1], got {}",
                self.delta
            )));
        }
        if self.n_bits == 0 || self.n_bits > self.n_bits_clear {
            return Err(Error::InvalidConfig(format!(
                "n_bits must be in [1, {}], got {}",
                self.n_bits_clear, self.n_bits
            )));
        }
        Ok(())
    }

    /// Number of entries kept: `max(1, round(delta * N_P))`.
    pub fn t(&self, n_params: usize) -> usize {
        let t = libm::round(self.delta * n_params as f64) as usize;
        t.clamp(1, n_params)
    }
}

/// Uncompressed model size in bits: `b_W = N_P * N_bc`.
pub fn model_bits(n_params: usize, n_bits_clear: u8) -> u64 {
    n_params as u64 * n_bits_clear as u64
}

/// Bits sent for one compressed payload: exactly `t * N_b`.
pub fn payload_bits(policy: &CompressionPolicy, n_params: usize) -> u64 {
    policy.t(n_params) as u64 * policy.n_bits as u64
}

/// A quantized sparse payload: the reconstructed entry at each stored index
/// is `l2_norm * sign * level / (2^n_bits - 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedUpdate {
    pub indices: Vec<u32>,
    pub levels: Vec<u32>,
    pub signs: Vec<i8>,
    pub l2_norm: f64,
    pub n_params: usize,
    pub n_bits: u8,
}

impl CompressedUpdate {
    pub fn zero(n_params: usize, n_bits: u8) -> Self {
        CompressedUpdate {
            indices: Vec::new(),
            levels: Vec::new(),
            signs: Vec::new(),
            l2_norm: 0.0,
            n_params,
            n_bits,
        }
    }
}

/// What travels on the wire for one device's round contribution.
#[derive(Debug, Clone, PartialEq)]
pub enum Update {
    Quantized(CompressedUpdate),
    /// Identity-policy payload: the exact values, charged like the policy.
    Dense(ParameterVector),
}

impl Update {
    pub fn n_params(&self) -> usize {
        match self {
            Update::Quantized(u) => u.n_params,
            Update::Dense(v) => v.n_params(),
        }
    }
}

/// Keeps the `t` largest-magnitude entries and zeroes the rest. Ties break
/// toward the lowest index.
pub fn sparsify_top_t(w: &ParameterVector, t: usize) -> Result<ParameterVector> {
    let n = w.n_params();
    if t == 0 || t > n {
        return Err(Error::InvalidConfig(format!("t={t} out of range [1, {n}]")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    // Descending |w|, ascending index among ties.
    order.sort_by(|&a, &b| {
        w.values()[b]
            .abs()
            .partial_cmp(&w.values()[a].abs())
            .unwrap_or(core::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut out = vec![0.0; n];
    for &i in &order[..t] {
        out[i] = w.values()[i];
    }
    ParameterVector::new(out)
}

/// Unbiased randomized rounding of a (sparse) vector onto `2^n_bits - 1`
/// levels of `|w_n| / ||w||_2`, keeping signs and the L2 norm.
///
/// A zero-norm input maps to the all-zero payload.
pub fn quantize_probabilistic(
    sparse: &ParameterVector,
    n_bits: u8,
    rng: &mut RngStream,
) -> Result<CompressedUpdate> {
    if n_bits == 0 || n_bits > 32 {
        return Err(Error::InvalidConfig(format!("n_bits must be in [1, 32], got {n_bits}")));
    }
    let norm = sparse.l2_norm();
    if norm == 0.0 {
        return Ok(CompressedUpdate::zero(sparse.n_params(), n_bits));
    }
    let n_levels = ((1u64 << n_bits) - 1) as f64;
    let mut update = CompressedUpdate::zero(sparse.n_params(), n_bits);
    update.l2_norm = norm;
    for (i, &v) in sparse.values().iter().enumerate() {
        if v == 0.0 {
            continue;
        }
        let r = v.abs() / norm;
        let scaled = r * n_levels;
        let mut level = libm::floor(scaled);
        // r = 1 lands on the top level with probability one.
        if level >= n_levels {
            level = n_levels;
        } else if rng::next_f64(rng) >= 1.0 - (scaled - level) {
            level += 1.0;
        }
        update.indices.push(i as u32);
        update.levels.push(level as u32);
        update.signs.push(if v < 0.0 { -1 } else { 1 });
    }
    Ok(update)
}

/// The composed operator: sparsify, then quantize (or pass through under an
/// identity policy).
pub fn compress(
    w: &ParameterVector,
    policy: &CompressionPolicy,
    rng: &mut RngStream,
) -> Result<Update> {
    policy.validate()?;
    if policy.identity {
        return Ok(Update::Dense(w.clone()));
    }
    let sparse = sparsify_top_t(w, policy.t(w.n_params()))?;
    Ok(Update::Quantized(quantize_probabilistic(&sparse, policy.n_bits, rng)?))
}

/// Reconstructs the dense vector a payload stands for.
pub fn decompress(update: &Update) -> Result<ParameterVector> {
    match update {
        Update::Dense(v) => Ok(v.clone()),
        Update::Quantized(u) => {
            let mut out = vec![0.0; u.n_params];
            let n_levels = ((1u64 << u.n_bits) - 1) as f64;
            for ((&i, &level), &sign) in u.indices.iter().zip(&u.levels).zip(&u.signs) {
                let i = i as usize;
                if i >= u.n_params {
                    return Err(Error::MalformedPayload(format!(
                        "index {i} out of range for {} params",
                        u.n_params
                    )));
                }
                if level as u64 > (1u64 << u.n_bits) - 1 {
                    return Err(Error::MalformedPayload(format!(
                        "level {level} exceeds {} bits",
                        u.n_bits
                    )));
                }
                out[i] = u.l2_norm * sign as f64 * level as f64 / n_levels;
            }
            ParameterVector::new(out)
        }
    }
}

/// Serialized payload layout (logging/debug only; the energy model charges
/// `t * N_b` regardless). Little-endian:
/// header `(N_P: u32, t: u32, N_b: u8, l2_norm: f64)`, then `indices: u32[t]`,
/// then per entry one sign bit followed by `N_b` level bits, byte-aligned
/// per entry (LSB-first within the entry's bytes).
pub fn encode_payload(u: &CompressedUpdate) -> Vec<u8> {
    let t = u.indices.len();
    let entry_bytes = (1 + u.n_bits as usize).div_ceil(8);
    let mut out = Vec::with_capacity(17 + 4 * t + entry_bytes * t);
    out.extend_from_slice(&(u.n_params as u32).to_le_bytes());
    out.extend_from_slice(&(t as u32).to_le_bytes());
    out.push(u.n_bits);
    out.extend_from_slice(&u.l2_norm.to_le_bytes());
    for &i in &u.indices {
        out.extend_from_slice(&i.to_le_bytes());
    }
    for (&level, &sign) in u.levels.iter().zip(&u.signs) {
        let mut packed: u64 = if sign < 0 { 1 } else { 0 };
        packed |= (level as u64) << 1;
        out.extend_from_slice(&packed.to_le_bytes()[..entry_bytes]);
    }
    out
}

/// Inverse of [`encode_payload`], validating all bounds.
pub fn decode_payload(bytes: &[u8]) -> Result<CompressedUpdate> {
    let err = |msg: &str| Error::MalformedPayload(msg.into());
    if bytes.len() < 17 {
        return Err(err("truncated header"));
    }
    let n_params = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let t = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let n_bits = bytes[8];
    let l2_norm = f64::from_le_bytes(bytes[9..17].try_into().unwrap());
    if n_bits == 0 || n_bits > 32 {
        return Err(err("n_bits out of range"));
    }
    if !(l2_norm.is_finite() && l2_norm >= 0.0) {
        return Err(err("invalid l2_norm"));
    }
    let entry_bytes = (1 + n_bits as usize).div_ceil(8);
    let expected = 17 + 4 * t + entry_bytes * t;
    if bytes.len() != expected {
        return Err(Error::MalformedPayload(format!(
            "expected {expected} bytes, got {}",
            bytes.len()
        )));
    }
    let mut update = CompressedUpdate::zero(n_params, n_bits);
    update.l2_norm = l2_norm;
    let mut offset = 17;
    for _ in 0..t {
        let i = u32::from_le_bytes(bytes[offset..offset + 4].try_into().unwrap());
        if i as usize >= n_params {
            return Err(Error::MalformedPayload(format!(
                "index {i} out of range for {n_params} params"
            )));
        }
        update.indices.push(i);
        offset += 4;
    }
    let max_level = (1u64 << n_bits) - 1;
    for _ in 0..t {
        let mut buf = [0u8; 8];
        buf[..entry_bytes].copy_from_slice(&bytes[offset..offset + entry_bytes]);
        let packed = u64::from_le_bytes(buf);
        let level = (packed >> 1) & ((1u64 << n_bits) - 1);
        if level > max_level {
            return Err(err("level out of range"));
        }
        update.signs.push(if packed & 1 == 1 { -1 } else { 1 });
        update.levels.push(level as u32);
        offset += entry_bytes;
    }
    Ok(update)
}
