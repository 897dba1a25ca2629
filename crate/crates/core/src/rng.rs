//! Counter-style seeding plus thin wrappers over the variates the sampler
//! needs.
//!
//! Every random consumer derives a private ChaCha stream from a master seed
//! and a tuple of counters, so results never depend on execution order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

pub type Stream = ChaCha8Rng;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hashes a master seed with a list of counters into one 64-bit seed.
pub fn mix(seed: u64, counters: &[u64]) -> u64 {
    counters
        .iter()
        .fold(splitmix64(seed), |acc, &c| splitmix64(acc ^ splitmix64(c)))
}

pub fn stream(seed: u64, counters: &[u64]) -> Stream {
    ChaCha8Rng::seed_from_u64(mix(seed, counters))
}

/// Fills `out` with i.i.d. standard normals.
pub fn fill_normal(rng: &mut impl Rng, out: &mut [f64]) {
    for x in out {
        *x = rng.sample(StandardNormal);
    }
}

/// Gamma(shape, rate). `rand_distr` draws it by Marsaglia–Tsang and takes
/// a scale, so the rate is inverted.
pub fn gamma(rng: &mut impl Rng, shape: f64, rate: f64) -> f64 {
    Gamma::new(shape, 1.0 / rate)
        .expect("shape and rate are positive")
        .sample(rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counters_change_the_stream() {
        assert_ne!(mix(1, &[0, 1]), mix(1, &[1, 0]));
        assert_ne!(mix(1, &[0]), mix(2, &[0]));
        assert_eq!(mix(9, &[3, 4]), mix(9, &[3, 4]));
    }

    #[test]
    fn normal_moments() {
        let mut rng = stream(3, &[]);
        let mut buf = vec![0.0; 200_001];
        fill_normal(&mut rng, &mut buf);
        let n = buf.len() as f64;
        let mean = buf.iter().sum::<f64>() / n;
        let var = buf.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.01, "{mean}");
        assert!((var - 1.0).abs() < 0.01, "{var}");
    }

    #[test]
    fn gamma_mean_matches_shape_over_rate() {
        let mut rng = stream(5, &[]);
        for &(k, rate) in &[(2.0, 0.5), (0.5, 2.0), (7.5, 3.0)] {
            let n = 100_000;
            let m = (0..n).map(|_| gamma(&mut rng, k, rate)).sum::<f64>() / n as f64;
            let want = k / rate;
            assert!((m - want).abs() / want < 0.02, "k={k} rate={rate}: {m} vs {want}");
        }
    }
}
