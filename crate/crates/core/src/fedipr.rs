//! Ownership watermarks in adapter parameters.
//!
//! A key holds secret ±1 bits `b` and a seed for a Gaussian projection
//! `P[N×d]` with entries `N(0, 1/d)`. Embedding adds `γ·Σ max(0, 1 − b_k·(P·w)_k)`
//! to the training loss for the flattened adapters `w`; verification counts
//! bits where `sign((P·w)_k) = b_k`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::peft::AdapterSet;

pub const DEFAULT_GAMMA: f64 = 0.05;
pub const DEFAULT_THRESHOLD: f64 = 0.9;

/// Client-private watermark key. Deliberately not convertible into anything
/// the federation layer can send.
#[derive(Debug, Clone, PartialEq)]
pub struct WatermarkKey {
    pub client_id: u32,
    pub seed: u64,
    pub gamma: f64,
    bits: Vec<i8>,
    /// Projection width; fixed on first use when absent from the key file.
    pub dim: Option<usize>,
}

#[derive(Serialize, Deserialize)]
struct KeyFile {
    client_id: u32,
    seed: u64,
    n_bits: usize,
    gamma: f64,
    bits_hex: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dim: Option<usize>,
}

impl WatermarkKey {
    /// Fresh key with bits drawn from `seed`.
    pub fn generate(client_id: u32, seed: u64, n_bits: usize, gamma: f64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(2);
        let bits = (0..n_bits).map(|_| if rng.random::<bool>() { 1 } else { -1 }).collect();
        Self::with_bits(client_id, seed, bits, gamma)
    }

    pub fn with_bits(client_id: u32, seed: u64, bits: Vec<i8>, gamma: f64) -> Result<Self> {
        if bits.is_empty() {
            return Err(Error::Key("watermark needs at least one bit".into()));
        }
        if bits.iter().any(|&b| b != 1 && b != -1) {
            return Err(Error::Key("watermark bits must be ±1".into()));
        }
        if !(gamma >= 0.0) {
            return Err(Error::Key(format!("gamma must be non-negative, got {gamma}")));
        }
        Ok(Self { client_id, seed, gamma, bits, dim: None })
    }

    pub fn bits(&self) -> &[i8] {
        &self.bits
    }

    pub fn n_bits(&self) -> usize {
        self.bits.len()
    }

    /// Row-major `P[N×d]`, entries `N(0, 1/d)`.
    pub fn projection(&self, d: usize) -> Result<Vec<f32>> {
        self.check_dim(d)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(1);
        let std = 1.0 / (d as f64).sqrt();
        Ok((0..self.n_bits() * d)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                (z * std) as f32
            })
            .collect())
    }

    fn check_dim(&self, d: usize) -> Result<()> {
        if let Some(k) = self.dim {
            if k != d {
                return Err(Error::Key(format!("key projects {k} parameters, adapters have {d}")));
            }
        }
        if self.n_bits() > d {
            return Err(Error::Key(format!("{} bits exceed the {d} available parameters", self.n_bits())));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let mut packed = vec![0u8; self.bits.len().div_ceil(8)];
        for (i, &b) in self.bits.iter().enumerate() {
            if b > 0 {
                packed[i / 8] |= 0x80 >> (i % 8);
            }
        }
        let f = KeyFile {
            client_id: self.client_id,
            seed: self.seed,
            n_bits: self.bits.len(),
            gamma: self.gamma,
            bits_hex: hex::encode(packed),
            dim: self.dim,
        };
        Ok(serde_json::to_string_pretty(&f)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: KeyFile = serde_json::from_str(s).map_err(|e| Error::Key(format!("bad key file: {e}")))?;
        let packed = hex::decode(&f.bits_hex).map_err(|e| Error::Key(format!("bad bits_hex: {e}")))?;
        if packed.len() != f.n_bits.div_ceil(8) {
            return Err(Error::Key(format!("bits_hex holds {} bytes, n_bits {} needs {}", packed.len(), f.n_bits, f.n_bits.div_ceil(8))));
        }
        let bits = (0..f.n_bits).map(|i| if packed[i / 8] & (0x80 >> (i % 8)) != 0 { 1 } else { -1 }).collect();
        let mut key = Self::with_bits(f.client_id, f.seed, bits, f.gamma)?;
        key.dim = f.dim;
        Ok(key)
    }
}

/// Keys bound to a fixed adapter width, ready for repeated use in training.
#[derive(Debug, Clone)]
pub struct Projector {
    d: usize,
    n: usize,
    p: Vec<f32>,
    signs: Vec<f32>,
    gamma: f32,
}

impl Projector {
    pub fn new(key: &WatermarkKey, d: usize) -> Result<Self> {
        Ok(Self {
            d,
            n: key.n_bits(),
            p: key.projection(d)?,
            signs: key.bits.iter().map(|&b| b as f32).collect(),
            gamma: key.gamma as f32,
        })
    }

    /// `γ·Σ_k max(0, 1 − b_k·(P·w)_k)` for a flat `[d]` adapter vector on `g`.
    pub fn loss(&self, g: &mut Graph<f32>, flat: Var) -> Result<Var> {
        if g.shape(flat).iter().product::<usize>() != self.d {
            return Err(Error::Key(format!(
                "projection expects {} parameters, got shape {:?}",
                self.d,
                g.shape(flat)
            )));
        }
        let w = g.reshape(flat, &[1, self.d])?;
        let p = g.constant(&[self.n, self.d], self.p.clone())?;
        let proj = g.matmul_t(w, p)?;
        let proj = g.reshape(proj, &[self.n])?;
        let h = g.hinge(proj, &self.signs)?;
        Ok(g.scale(h, self.gamma))
    }

    /// `P·w` in f64.
    pub fn project(&self, w: &[f32]) -> Result<Vec<f64>> {
        if w.len() != self.d {
            return Err(Error::Key(format!("projection expects {} parameters, got {}", self.d, w.len())));
        }
        Ok(self
            .p
            .chunks_exact(self.d)
            .map(|row| row.iter().zip(w).map(|(&a, &b)| a as f64 * b as f64).sum())
            .collect())
    }
}

/// Scalar embed loss for `adapters`, evaluated on a fresh graph.
pub fn embed_loss(adapters: &AdapterSet, key: &WatermarkKey) -> Result<f32> {
    let (w, _) = adapters.flatten();
    let proj = Projector::new(key, w.len())?;
    let mut g = Graph::new();
    let flat = g.constant(&[w.len()], w)?;
    let loss = proj.loss(&mut g, flat)?;
    Ok(g.item(loss))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Owned,
    NotOwned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub client_id: u32,
    pub detection_rate: f64,
    pub agreements: usize,
    pub n_bits: usize,
    pub threshold: f64,
    pub verdict: Verdict,
}

/// Fraction of bits with `sign((P·w)_k) = b_k`; a zero projection counts as a miss.
pub fn verify(adapters: &AdapterSet, key: &WatermarkKey, threshold: f64) -> Result<VerificationReport> {
    let (w, _) = adapters.flatten();
    let proj = Projector::new(key, w.len())?;
    let agreements = proj
        .project(&w)?
        .iter()
        .zip(key.bits())
        .filter(|(&x, &b)| x * b as f64 > 0.0)
        .count();
    let rate = agreements as f64 / key.n_bits() as f64;
    Ok(VerificationReport {
        client_id: key.client_id,
        detection_rate: rate,
        agreements,
        n_bits: key.n_bits(),
        threshold,
        verdict: if rate >= threshold { Verdict::Owned } else { Verdict::NotOwned },
    })
}

/// Each key may use at most `d / keys.len()` bits of the adapter width.
pub fn check_capacity(keys: &[WatermarkKey], d: usize) -> Result<()> {
    if keys.is_empty() {
        return Ok(());
    }
    let per_client = d / keys.len();
    if let Some(k) = keys.iter().find(|k| k.n_bits() > per_client) {
        return Err(Error::Config(format!(
            "client {} embeds {} bits but capacity is {per_client} per client ({d} parameters / {} clients)",
            k.client_id,
            k.n_bits(),
            keys.len()
        )));
    }
    Ok(())
}

/// `P(Binomial(n, 1/2) ≥ ceil(τ·n))`: chance that an unrelated key passes.
pub fn chance_pass_probability(n: usize, threshold: f64) -> f64 {
    let k0 = (threshold * n as f64).ceil() as usize;
    let ln_half_n = n as f64 * 0.5f64.ln();
    let mut ln_choose = 0.0f64; // ln C(n, 0)
    let mut total = 0.0;
    for k in 0..=n {
        if k > 0 {
            ln_choose += ((n - k + 1) as f64).ln() - (k as f64).ln();
        }
        if k >= k0 {
            total += (ln_choose + ln_half_n).exp();
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{MiniLM, ModelConfig};
    use crate::peft::{attach_lora, LoraSpec};

    fn adapters() -> AdapterSet {
        let m = MiniLM::<f32>::new(ModelConfig::default()).unwrap();
        let mut a = attach_lora(&m, &LoraSpec::default(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let v: Vec<f32> = a.flat_values().iter().map(|_| rng.random_range(-0.1..0.1)).collect();
        a.unflatten(&v).unwrap();
        a
    }

    #[test]
    fn key_json_round_trip() {
        let k = WatermarkKey::generate(3, 77, 13, 0.05).unwrap();
        let back = WatermarkKey::from_json(&k.to_json().unwrap()).unwrap();
        assert_eq!(back, k);
        assert!(WatermarkKey::from_json("{").is_err());
    }

    #[test]
    fn constructed_bits_verify_fully() {
        let a = adapters();
        let probe = WatermarkKey::generate(0, 5, 64, 0.05).unwrap();
        let w = a.flat_values();
        let proj = Projector::new(&probe, w.len()).unwrap();
        let bits = proj.project(&w).unwrap().iter().map(|&x| if x > 0.0 { 1 } else { -1 }).collect();
        let key = WatermarkKey::with_bits(0, 5, bits, 0.05).unwrap();
        let r = verify(&a, &key, DEFAULT_THRESHOLD).unwrap();
        assert_eq!(r.detection_rate, 1.0);
        assert_eq!(r.verdict, Verdict::Owned);
        // Flipping every bit makes every margin count against the key.
        let flipped: Vec<i8> = key.bits().iter().map(|b| -b).collect();
        let flipped = WatermarkKey::with_bits(0, 5, flipped, 0.05).unwrap();
        assert!(embed_loss(&a, &flipped).unwrap() > 0.0);
        assert_eq!(verify(&a, &flipped, 0.9).unwrap().detection_rate, 0.0);
    }

    #[test]
    fn satisfied_margins_give_zero_loss() {
        let mut a = adapters();
        let probe = WatermarkKey::generate(0, 5, 16, 0.05).unwrap();
        let bits: Vec<i8> = probe.bits().to_vec();
        // Push w along Pᵀb until every margin exceeds 1.
        let w = a.flat_values();
        let p = probe.projection(w.len()).unwrap();
        let mut dir = vec![0.0f32; w.len()];
        for (row, &b) in p.chunks_exact(w.len()).zip(&bits) {
            dir.iter_mut().zip(row).for_each(|(d, &x)| *d += b as f32 * x);
        }
        let w2: Vec<f32> = w.iter().zip(&dir).map(|(a, d)| a + 10.0 * d).collect();
        a.unflatten(&w2).unwrap();
        assert_eq!(embed_loss(&a, &probe).unwrap(), 0.0);
    }

    #[test]
    fn capacity_and_dimension_guards() {
        let keys = vec![
            WatermarkKey::generate(0, 1, 64, 0.05).unwrap(),
            WatermarkKey::generate(1, 2, 65, 0.05).unwrap(),
        ];
        assert!(check_capacity(&keys[..1], 128).is_ok());
        assert!(matches!(check_capacity(&keys, 128), Err(Error::Config(_))));
        let mut k = keys[0].clone();
        k.dim = Some(10);
        assert!(matches!(verify(&adapters(), &k, 0.9), Err(Error::Key(_))));
    }

    #[test]
    fn verify_is_read_only() {
        let a = adapters();
        let before = a.flat_values();
        let k = WatermarkKey::generate(0, 9, 32, 0.05).unwrap();
        verify(&a, &k, 0.9).unwrap();
        assert_eq!(a.flat_values(), before);
    }

    #[test]
    fn binomial_tail_values() {
        // P(X ≥ 2 | n = 2) = 1/4
        assert!((chance_pass_probability(2, 0.9) - 0.25).abs() < 1e-15);
        assert!((chance_pass_probability(10, 0.0) - 1.0).abs() < 1e-12);
    }
}
