//! Seeded Gaussian embeddings for exercising the head and trainer without
//! images or pretrained weights.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::tensor::Tensor;

/// `n` samples in `d` dimensions with unit covariance. Normal samples are
/// centred at `−separation·1`, anomalous ones at `+separation·1`. The first
/// `n_anomalous` rows are anomalous; callers shuffle if they care.
pub fn gaussian_embeddings(
    n: usize,
    n_anomalous: usize,
    d: usize,
    separation: f32,
    seed: u64,
) -> Result<(Tensor, Vec<u8>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<u8> = (0..n).map(|i| u8::from(i < n_anomalous)).collect();
    let mut data = Vec::with_capacity(n * d);
    for &y in &labels {
        let mean = if y == 1 { separation } else { -separation };
        for _ in 0..d {
            let z: f32 = StandardNormal.sample(&mut rng);
            data.push(mean + z);
        }
    }
    Ok((Tensor::new(vec![n, d], data)?, labels))
}
