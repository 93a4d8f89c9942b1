use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Sample-count-weighted mean, accumulated in f64.
///
/// With one update the result is bit-identical to the input: `w·v / w` is
/// exact in f64 for any f32 `v` and `w < 2^29`.
pub fn fedavg<V: AsRef<[f32]>>(updates: &[(V, u64)]) -> Result<Vec<f32>> {
    let Some((first, _)) = updates.first() else {
        return Err(Error::Protocol("fedavg needs at least one update".into()));
    };
    let len = first.as_ref().len();
    let mut acc = vec![0.0f64; len];
    let mut total = 0.0f64;
    for (i, (v, count)) in updates.iter().enumerate() {
        let v = v.as_ref();
        if v.len() != len {
            return Err(Error::Protocol(format!("update {i} has length {}, expected {len}", v.len())));
        }
        if *count == 0 {
            return Err(Error::Protocol(format!("update {i} has sample_count 0")));
        }
        let w = *count as f64;
        total += w;
        for (a, &x) in acc.iter_mut().zip(v) {
            *a += w * x as f64;
        }
    }
    Ok(acc.into_iter().map(|a| (a / total) as f32).collect())
}

/// `v + N(0, sigma²)` per element from a seeded stream. `sigma = 0` is the identity.
pub fn add_dp_noise(v: &[f32], sigma: f64, seed: u64) -> Result<Vec<f32>> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::Config(format!("DP sigma must be finite and non-negative, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(v.to_vec());
    }
    let normal = Normal::new(0.0, sigma).expect("sigma validated");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(v.iter().map(|&x| (x as f64 + normal.sample(&mut rng)) as f32).collect())
}
