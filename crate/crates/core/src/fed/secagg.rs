//! Pairwise-mask secure aggregation over the ring `Z_M`, `M = 2^62`.
//!
//! Each client quantizes `w·clamp(v, −c, c)·s` (with `w` its sample count) to
//! field elements and appends `w` itself as one extra slot, so the server
//! learns only the masked sum and the total sample count.
//!
//! Masks: for every pair `i < j`, client `i` adds and client `j` subtracts
//! `PRG(seed_ij)`, where `seed_ij = SHA-256(session_seed ‖ i ‖ j)` (u64 and
//! u32 little-endian) and `PRG(seed)` is the stream of blocks
//! `SHA-256(seed ‖ counter u64 LE)`, each split into four little-endian u64
//! words reduced to their low 62 bits.
//!
//! Overflow: a weighted slot is bounded by `w·c·s = w·2^23` at the defaults,
//! so the centred sum stays below `2^61` for total weights under `2^38`.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const FIELD_BITS: u32 = 62;
pub const MODULUS: u64 = 1 << FIELD_BITS;
const MASK: u64 = MODULUS - 1;
const HALF: u64 = MODULUS / 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SecAggConfig {
    pub scale: f64,
    pub clip: f64,
}

impl Default for SecAggConfig {
    fn default() -> Self {
        Self { scale: (1u64 << 20) as f64, clip: 8.0 }
    }
}

impl SecAggConfig {
    fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.clip > 0.0) {
            return Err(Error::Config(format!("secagg scale {} and clip {} must be positive", self.scale, self.clip)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SecAggSession {
    participants: Vec<u32>,
    session_seed: u64,
    cfg: SecAggConfig,
}

impl SecAggSession {
    pub fn new(participants: &[u32], session_seed: u64, cfg: SecAggConfig) -> Result<Self> {
        cfg.validate()?;
        let set: BTreeSet<u32> = participants.iter().copied().collect();
        if set.is_empty() {
            return Err(Error::Protocol("secure aggregation session needs participants".into()));
        }
        if set.len() != participants.len() {
            return Err(Error::Protocol("duplicate participant id".into()));
        }
        Ok(Self { participants: set.into_iter().collect(), session_seed, cfg })
    }

    pub fn participants(&self) -> &[u32] {
        &self.participants
    }

    pub fn config(&self) -> &SecAggConfig {
        &self.cfg
    }

    /// Symmetric in `(a, b)`.
    pub fn pair_seed(&self, a: u32, b: u32) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.session_seed.to_le_bytes());
        h.update(a.min(b).to_le_bytes());
        h.update(a.max(b).to_le_bytes());
        h.finalize().into()
    }

    fn check_member(&self, client: u32) -> Result<()> {
        if self.participants.binary_search(&client).is_err() {
            return Err(Error::Protocol(format!("client {client} is not part of this session")));
        }
        Ok(())
    }
}

/// Deterministic stream of `len` elements of `[0, M)`.
pub fn prg(seed: &[u8; 32], len: usize) -> Vec<u64> {
    let mut out = Vec::with_capacity(len + 3);
    let mut counter = 0u64;
    while out.len() < len {
        let mut h = Sha256::new();
        h.update(seed);
        h.update(counter.to_le_bytes());
        let block = h.finalize();
        for w in block.chunks_exact(8) {
            out.push(u64::from_le_bytes(w.try_into().expect("8 bytes")) & MASK);
        }
        counter += 1;
    }
    out.truncate(len);
    out
}

fn to_field(x: i64) -> u64 {
    (x as u64) & MASK
}

fn from_field(x: u64) -> i64 {
    let x = x & MASK;
    if x >= HALF {
        x as i64 - MODULUS as i64
    } else {
        x as i64
    }
}

/// `round(clamp(v, −c, c)·s)` embedded in `[0, M)` by two's complement.
pub fn quantize(v: &[f32], scale: f64, clip: f64) -> Vec<u64> {
    v.iter().map(|&x| to_field(((x as f64).clamp(-clip, clip) * scale).round() as i64)).collect()
}

pub fn dequantize(q: &[u64], scale: f64) -> Vec<f32> {
    q.iter().map(|&x| (from_field(x) as f64 / scale) as f32).collect()
}

/// Client-side weighted encoding: `round(w·clamp(v)·s)` per element plus a
/// trailing slot holding `w`.
pub fn weighted_field_vector(session: &SecAggSession, v: &[f32], weight: u64) -> Result<Vec<u64>> {
    if weight == 0 {
        return Err(Error::Protocol("sample_count must be at least 1".into()));
    }
    let SecAggConfig { scale, clip } = session.cfg;
    let w = weight as f64;
    let mut q: Vec<u64> = v.iter().map(|&x| to_field((w * (x as f64).clamp(-clip, clip) * scale).round() as i64)).collect();
    q.push(to_field(weight as i64));
    Ok(q)
}

/// `q + Σ_{j>i} PRG(seed_ij) − Σ_{j<i} PRG(seed_ij) mod M`.
pub fn secure_mask(session: &SecAggSession, client: u32, q: &[u64]) -> Result<Vec<u64>> {
    session.check_member(client)?;
    let mut out: Vec<u64> = q.iter().map(|&x| x & MASK).collect();
    for &other in &session.participants {
        if other == client {
            continue;
        }
        let stream = prg(&session.pair_seed(client, other), q.len());
        if other > client {
            out.iter_mut().zip(&stream).for_each(|(x, &m)| *x = x.wrapping_add(m) & MASK);
        } else {
            out.iter_mut().zip(&stream).for_each(|(x, &m)| *x = x.wrapping_sub(m) & MASK);
        }
    }
    Ok(out)
}

/// Field-sums the masked vectors of every participant, then divides by the
/// total weight carried in the trailing slot. A missing client aborts.
pub fn secure_aggregate<V: AsRef<[u64]>>(session: &SecAggSession, masked: &[(u32, V)]) -> Result<Vec<f32>> {
    let mut seen = BTreeSet::new();
    for (id, _) in masked {
        session.check_member(*id)?;
        if !seen.insert(*id) {
            return Err(Error::Protocol(format!("client {id} reported twice")));
        }
    }
    if let Some(&missing) = session.participants.iter().find(|id| !seen.contains(id)) {
        return Err(Error::MissingParticipant(missing));
    }
    let len = masked[0].1.as_ref().len();
    if len < 2 {
        return Err(Error::Protocol("masked vector lacks the weight slot".into()));
    }
    let mut sum = vec![0u64; len];
    for (id, v) in masked {
        let v = v.as_ref();
        if v.len() != len {
            return Err(Error::Protocol(format!("client {id} sent {} elements, expected {len}", v.len())));
        }
        sum.iter_mut().zip(v).for_each(|(s, &x)| *s = s.wrapping_add(x) & MASK);
    }
    let total = from_field(sum[len - 1]);
    if total <= 0 {
        return Err(Error::Protocol(format!("aggregated sample count {total} is not positive")));
    }
    let denom = session.cfg.scale * total as f64;
    Ok(sum[..len - 1].iter().map(|&x| (from_field(x) as f64 / denom) as f32).collect())
}
