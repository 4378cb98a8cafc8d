use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::scalar::{sc, Scalar};

/// Derives a stage-specific seed so independent stages never share streams.
pub fn derive_seed(stage: &str, base: u64, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(stage.as_bytes());
    h.update(base.to_le_bytes());
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

pub fn rng_for(stage: &str, base: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(stage, base, index))
}

/// Standard normal via Box-Muller.
pub fn normal<F: Scalar>(rng: &mut ChaCha8Rng) -> F {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    sc((-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos())
}

/// Beta(2,2) sample: the median of three uniforms.
pub fn beta22(rng: &mut ChaCha8Rng) -> f64 {
    let mut u = [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()];
    u.sort_by(|a, b| a.partial_cmp(b).unwrap());
    u[1]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_differ_by_stage_and_index() {
        let a = derive_seed("pretrain", 1, 0);
        let b = derive_seed("pretrain", 1, 1);
        let c = derive_seed("corpus", 1, 0);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, derive_seed("pretrain", 1, 0));
    }

    #[test]
    fn normal_moments_are_plausible() {
        let mut rng = rng_for("test-normal", 7, 0);
        let n = 20_000;
        let samples: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.03, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn beta22_moments_are_plausible() {
        let mut rng = rng_for("test-beta", 7, 0);
        let n = 20_000;
        let samples: Vec<f64> = (0..n).map(|_| beta22(&mut rng)).collect();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        // Beta(2,2): mean 1/2, variance 1/20.
        assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
        assert!((var - 0.05).abs() < 0.005, "var {var}");
        assert!(samples.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }
}
