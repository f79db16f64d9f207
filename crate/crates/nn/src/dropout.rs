use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{NnError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::Mode;

/// Inverted dropout. Returns the output and the applied mask (train mode only);
/// survivors are scaled by `1 / (1 - rate)`.
pub fn dropout<T: Scalar, R: Rng + ?Sized>(
    input: &Tensor<T>,
    rate: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<(Tensor<T>, Option<Vec<T>>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(NnError::Config(format!("dropout rate {rate} outside [0, 1)")));
    }
    if mode == Mode::Eval || rate == 0.0 {
        return Ok((input.clone(), None));
    }
    let keep = T::lit(1.0 / (1.0 - rate));
    // a 32-bit draw below `rate * 2^32` drops the unit
    let threshold = (rate * 4_294_967_296.0).round() as u64;
    let mask: Vec<T> = (0..input.len())
        .map(|_| if (rng.next_u32() as u64) < threshold { T::zero() } else { keep })
        .collect();
    let data = input.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
    let out = Tensor::new(input.shape().to_vec(), data)?;
    Ok((out, Some(mask)))
}

#[derive(Debug, Clone)]
pub struct Dropout<T> {
    pub rate: f64,
    rng: ChaCha8Rng,
    mask: Option<Vec<T>>,
}

impl<T: Scalar> Dropout<T> {
    pub fn new(rate: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(NnError::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        Ok(Dropout {
            rate,
            rng: ChaCha8Rng::seed_from_u64(seed),
            mask: None,
        })
    }

    pub fn forward(&mut self, input: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let (out, mask) = dropout(input, self.rate, mode, &mut self.rng)?;
        self.mask = mask;
        Ok(out)
    }

    pub fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        match self.mask.take() {
            None => Ok(grad.clone()),
            Some(mask) => {
                let data = grad.data().iter().zip(&mask).map(|(&g, &m)| g * m).collect();
                Tensor::new(grad.shape().to_vec(), data)
            }
        }
    }
}
