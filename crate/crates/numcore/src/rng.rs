use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::Tensor;

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Standard-normal tensor; bit-identical for a fixed seed.
pub fn seeded_gaussian(seed: u64, shape: &[usize]) -> Tensor {
    let mut rng = seeded_rng(seed);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).expect("length matches shape")
}

/// Uniform `[lo, hi)` tensor.
pub fn seeded_uniform(seed: u64, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let mut rng = seeded_rng(seed);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).expect("length matches shape")
}

/// Derives independent child seeds from a parent seed and a path of labels.
pub trait SplitSeed {
    fn split(self, label: u64) -> u64;
}

impl SplitSeed for u64 {
    fn split(self, label: u64) -> u64 {
        // splitmix64 over the combined word
        let mut z = self ^ label.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_is_bit_identical() {
        let a = seeded_gaussian(42, &[3, 5]);
        let b = seeded_gaussian(42, &[3, 5]);
        assert_eq!(a, b);
        assert_ne!(a, seeded_gaussian(43, &[3, 5]));
    }

    #[test]
    fn moments_of_a_million_samples() {
        let t = seeded_gaussian(7, &[1_000_000]);
        let n = t.len() as f64;
        let mean = t.sum() / n;
        let var = t.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.01, "var {var}");
    }

    #[test]
    fn split_seeds_differ() {
        let s = 5u64;
        assert_ne!(s.split(0), s.split(1));
        assert_eq!(s.split(3), s.split(3));
    }
}
