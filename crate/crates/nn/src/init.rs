use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// I.i.d. `N(0, sigma^2)` entries.
pub fn gaussian_init<T: Scalar, R: Rng + ?Sized>(shape: &[usize], sigma: f64, rng: &mut R) -> Tensor<T> {
    let normal = Normal::new(0.0, sigma).expect("sigma must be finite and non-negative");
    Tensor::from_fn(shape, |_| T::lit(normal.sample(rng)))
}

/// Glorot normal: `sigma = sqrt(2 / (fan_in + fan_out))`, with the fans read
/// from the last two dims (`[.., out, in]`, as dense and grouped-dense weights
/// are stored).
pub fn glorot_init<T: Scalar, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<T> {
    let (fan_out, fan_in) = match shape {
        [.., o, i] => (*o, *i),
        [i] => (1, *i),
        [] => (1, 1),
    };
    gaussian_init(shape, (2.0 / (fan_in + fan_out) as f64).sqrt(), rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn moments_and_determinism() {
        let n = 1_000_000;
        let sigma = 0.01;
        let t: Tensor<f64> = gaussian_init(&[n], sigma, &mut ChaCha8Rng::seed_from_u64(42));
        let mean = t.data().iter().sum::<f64>() / n as f64;
        let std = (t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        assert!(mean.abs() < 3.0 * sigma / 1e3, "mean {mean}");
        assert!((std / sigma - 1.0).abs() < 0.01, "std {std}");
        let again: Tensor<f64> = gaussian_init(&[n], sigma, &mut ChaCha8Rng::seed_from_u64(42));
        assert_eq!(t, again);
    }

    #[test]
    fn glorot_scale_follows_the_fans() {
        let t: Tensor<f64> = glorot_init(&[4, 200, 600], &mut ChaCha8Rng::seed_from_u64(1));
        let n = t.len() as f64;
        let std = (t.data().iter().map(|v| v * v).sum::<f64>() / n).sqrt();
        assert!((std / (2.0f64 / 800.0).sqrt() - 1.0).abs() < 0.01, "std {std}");
    }
}
