//! Batch normalization over the (N, H, W) axes of an `[N,C,H,W]` tensor.

use crate::error::{shape_err, NnError, Result};
use crate::param::{Buffer, Module, Parameter};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::Mode;

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct BnCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
}

/// Batch statistics of one training-mode pass.
#[derive(Debug, Clone)]
pub struct BnStats {
    pub mean: Vec<f64>,
    /// Biased variance, the one used for normalization.
    pub var: Vec<f64>,
    pub count: usize,
}

fn check_affine<T: Scalar>(input: &Tensor<T>, gamma: &[T], beta: &[T]) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = input.dims4("batchnorm")?;
    if gamma.len() != c || beta.len() != c {
        return Err(shape_err("batchnorm affine", format!("[{c}]"), &[gamma.len(), beta.len()]));
    }
    Ok((n, c, h * w))
}

const SUM_LANES: usize = 8;

/// Sum in `f64` over independent lanes so the loop vectorizes.
fn lane_sum<T: Scalar>(v: &[T]) -> f64 {
    let mut acc = [0.0f64; SUM_LANES];
    let chunks = v.chunks_exact(SUM_LANES);
    let rest: f64 = chunks.remainder().iter().map(|x| x.to_f64_lossy()).sum();
    for ch in chunks {
        for l in 0..SUM_LANES {
            acc[l] += ch[l].to_f64_lossy();
        }
    }
    acc.iter().sum::<f64>() + rest
}

fn lane_sq_dev<T: Scalar>(v: &[T], m: f64) -> f64 {
    let mut acc = [0.0f64; SUM_LANES];
    let chunks = v.chunks_exact(SUM_LANES);
    let rest: f64 = chunks.remainder().iter().map(|x| (x.to_f64_lossy() - m).powi(2)).sum();
    for ch in chunks {
        for l in 0..SUM_LANES {
            let d = ch[l].to_f64_lossy() - m;
            acc[l] += d * d;
        }
    }
    acc.iter().sum::<f64>() + rest
}

fn lane_dot<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    let mut acc = [0.0f64; SUM_LANES];
    let (ca, cb) = (a.chunks_exact(SUM_LANES), b.chunks_exact(SUM_LANES));
    let rest: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x.to_f64_lossy() * y.to_f64_lossy()).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..SUM_LANES {
            acc[l] += x[l].to_f64_lossy() * y[l].to_f64_lossy();
        }
    }
    acc.iter().sum::<f64>() + rest
}

/// Normalize with batch statistics. Sums are carried in `f64` regardless of `T`.
pub fn batchnorm_train<T: Scalar>(
    input: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    eps: f64,
) -> Result<(Tensor<T>, BnCache<T>, BnStats)> {
    let (n, c, hw) = check_affine(input, gamma, beta)?;
    let count = n * hw;
    if count < 2 {
        return Err(NnError::Invalid {
            op: "batchnorm",
            msg: format!("train mode needs N*H*W >= 2, got {count}"),
        });
    }
    let x = input.data();
    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    for ch in 0..c {
        let m = (0..n).map(|b| lane_sum(&x[(b * c + ch) * hw..][..hw])).sum::<f64>() / count as f64;
        let ss: f64 = (0..n).map(|b| lane_sq_dev(&x[(b * c + ch) * hw..][..hw], m)).sum();
        mean[ch] = m;
        var[ch] = ss / count as f64;
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::lit(1.0 / (v + eps).sqrt())).collect();
    let mut xhat = Vec::with_capacity(x.len());
    let mut out = Vec::with_capacity(x.len());
    for b in 0..n {
        for ch in 0..c {
            let (m, k) = (T::lit(mean[ch]), inv_std[ch]);
            let (g, be) = (gamma[ch], beta[ch]);
            let plane = &x[(b * c + ch) * hw..][..hw];
            let start = xhat.len();
            xhat.extend(plane.iter().map(|&v| (v - m) * k));
            out.extend(xhat[start..].iter().map(|&v| g * v + be));
        }
    }
    let xhat = Tensor::new(input.shape().to_vec(), xhat)?;
    let out = Tensor::new(input.shape().to_vec(), out)?;
    Ok((out, BnCache { xhat, inv_std }, BnStats { mean, var, count }))
}

pub fn batchnorm_eval<T: Scalar>(
    input: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
    eps: f64,
) -> Result<Tensor<T>> {
    let (_, c, hw) = check_affine(input, gamma, beta)?;
    let scale: Vec<T> = (0..c).map(|ch| gamma[ch] / (running_var[ch] + T::lit(eps)).sqrt()).collect();
    let mut out = Vec::with_capacity(input.len());
    for (p, plane) in input.data().chunks_exact(hw.max(1)).enumerate() {
        let ch = p % c;
        let (m, k, b) = (running_mean[ch], scale[ch], beta[ch]);
        out.extend(plane.iter().map(|&v| (v - m) * k + b));
    }
    Tensor::new(input.shape().to_vec(), out)
}

/// Returns `(d input, d gamma, d beta)` for a training-mode pass.
pub fn batchnorm_backward<T: Scalar>(grad_out: &Tensor<T>, cache: &BnCache<T>, gamma: &[T]) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    if grad_out.shape() != cache.xhat.shape() {
        return Err(shape_err("batchnorm backward", format!("{:?}", cache.xhat.shape()), grad_out.shape()));
    }
    let (n, c, h, w) = grad_out.dims4("batchnorm backward")?;
    let hw = h * w;
    let count = (n * hw) as f64;
    let dy = grad_out.data();
    let xh = cache.xhat.data();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    let mut sum_dy = vec![0.0f64; c];
    let mut sum_dy_xh = vec![0.0f64; c];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            sum_dy[ch] += lane_sum(&dy[base..base + hw]);
            sum_dy_xh[ch] += lane_dot(&dy[base..base + hw], &xh[base..base + hw]);
        }
    }
    for ch in 0..c {
        dbeta[ch] = T::lit(sum_dy[ch]);
        dgamma[ch] = T::lit(sum_dy_xh[ch]);
    }
    let mut d = Vec::with_capacity(dy.len());
    for b in 0..n {
        for ch in 0..c {
            let k = gamma[ch] * cache.inv_std[ch];
            let m1 = T::lit(sum_dy[ch] / count);
            let m2 = T::lit(sum_dy_xh[ch] / count);
            let base = (b * c + ch) * hw;
            d.extend(dy[base..base + hw].iter().zip(&xh[base..base + hw]).map(|(&g, &x)| k * (g - m1 - x * m2)));
        }
    }
    let dx = Tensor::new(grad_out.shape().to_vec(), d)?;
    Ok((dx, dgamma, dbeta))
}

/// Batch norm with learnable affine (gamma = 1, beta = 0 at init) and running
/// statistics for eval mode.
#[derive(Debug, Clone)]
pub struct BatchNorm2d<T> {
    pub gamma: Parameter<T>,
    pub beta: Parameter<T>,
    pub running_mean: Buffer<T>,
    pub running_var: Buffer<T>,
    pub momentum: f64,
    pub eps: f64,
    cache: Option<CacheKind<T>>,
}

#[derive(Debug, Clone)]
enum CacheKind<T> {
    Train(BnCache<T>),
    Eval,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(name: &str, channels: usize) -> Self {
        BatchNorm2d {
            gamma: Parameter::new(format!("{name}.gamma"), Tensor::full(&[channels], T::one())),
            beta: Parameter::new(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: Buffer {
                name: format!("{name}.running_mean"),
                value: Tensor::zeros(&[channels]),
            },
            running_var: Buffer {
                name: format!("{name}.running_var"),
                value: Tensor::full(&[channels], T::one()),
            },
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
            cache: None,
        }
    }

    pub fn forward(&mut self, input: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        match mode {
            Mode::Train => {
                let (out, cache, stats) = batchnorm_train(input, self.gamma.value.data(), self.beta.value.data(), self.eps)?;
                let mom = self.momentum;
                let unbias = stats.count as f64 / (stats.count - 1) as f64;
                for (r, &m) in self.running_mean.value.data_mut().iter_mut().zip(&stats.mean) {
                    *r = T::lit(mom * r.to_f64_lossy() + (1.0 - mom) * m);
                }
                for (r, &v) in self.running_var.value.data_mut().iter_mut().zip(&stats.var) {
                    *r = T::lit(mom * r.to_f64_lossy() + (1.0 - mom) * v * unbias);
                }
                self.cache = Some(CacheKind::Train(cache));
                Ok(out)
            }
            Mode::Eval => {
                self.cache = Some(CacheKind::Eval);
                batchnorm_eval(
                    input,
                    self.gamma.value.data(),
                    self.beta.value.data(),
                    self.running_mean.value.data(),
                    self.running_var.value.data(),
                    self.eps,
                )
            }
        }
    }

    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        match self.cache.take() {
            Some(CacheKind::Train(cache)) => {
                let (dx, dg, db) = batchnorm_backward(grad_out, &cache, self.gamma.value.data())?;
                for (g, d) in self.gamma.grad.data_mut().iter_mut().zip(dg) {
                    *g += d;
                }
                for (g, d) in self.beta.grad.data_mut().iter_mut().zip(db) {
                    *g += d;
                }
                Ok(dx)
            }
            Some(CacheKind::Eval) => {
                // Eval mode is an affine map; parameter gradients are not needed.
                let (_, c, h, w) = grad_out.dims4("batchnorm backward")?;
                let hw = h * w;
                let g = self.gamma.value.data();
                let rv = self.running_var.value.data();
                let eps = T::lit(self.eps);
                let dy = grad_out.data();
                Ok(Tensor::from_fn(grad_out.shape(), |i| {
                    let ch = (i / hw) % c;
                    dy[i] * g[ch] / (rv[ch] + eps).sqrt()
                }))
            }
            None => Err(NnError::Invalid {
                op: "BatchNorm2d::backward",
                msg: "called before forward".into(),
            }),
        }
    }
}

impl<T: Scalar> Module<T> for BatchNorm2d<T> {
    fn params(&self) -> Vec<&Parameter<T>> {
        vec![&self.gamma, &self.beta]
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        vec![&mut self.gamma, &mut self.beta]
    }

    fn buffers(&self) -> Vec<&Buffer<T>> {
        vec![&self.running_mean, &self.running_var]
    }

    fn buffers_mut(&mut self) -> Vec<&mut Buffer<T>> {
        vec![&mut self.running_mean, &mut self.running_var]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_values_normalize_to_plus_minus_one() {
        let x = Tensor::new(vec![2, 1, 1, 1], vec![1.0, 3.0]).unwrap();
        let (y, _, _) = batchnorm_train(&x, &[1.0], &[0.0], 0.0).unwrap();
        assert_eq!(y.data(), &[-1.0, 1.0]);
    }

    #[test]
    fn standardized_input_passes_through() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![-1.0f64, 1.0, -1.0, 1.0]).unwrap();
        let (y, _, _) = batchnorm_train(&x, &[1.0], &[0.0], BN_EPS).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            // (1 + eps)^{-1/2} shrink
            assert!((a - b).abs() <= 0.5 * BN_EPS + 1e-15);
        }
    }

    #[test]
    fn zero_gamma_gives_beta() {
        let x = Tensor::from_fn(&[3, 2, 2, 2], |i| (i as f64).sin() * 4.0);
        let (y, _, _) = batchnorm_train(&x, &[0.0, 0.0], &[0.25, -2.0], BN_EPS).unwrap();
        for (i, v) in y.data().iter().enumerate() {
            let ch = (i / 4) % 2;
            assert_eq!(*v, [0.25, -2.0][ch]);
        }
    }

    #[test]
    fn single_element_batch_rejected_in_train_mode() {
        let mut bn = BatchNorm2d::<f64>::new("bn", 3);
        let x = Tensor::zeros(&[1, 3, 1, 1]);
        assert!(bn.forward(&x, Mode::Train).is_err());
        assert!(bn.forward(&x, Mode::Eval).is_ok());
    }

    #[test]
    fn running_statistics_track_batches() {
        let mut bn = BatchNorm2d::<f64>::new("bn", 1);
        let x = Tensor::new(vec![2, 1, 1, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        bn.forward(&x, Mode::Train).unwrap();
        // mean 4, unbiased var 20/3
        let rm = bn.running_mean.value.data()[0];
        let rv = bn.running_var.value.data()[0];
        assert!((rm - 0.4).abs() < 1e-12);
        assert!((rv - (0.9 + 0.1 * 20.0 / 3.0)).abs() < 1e-12);
    }
}
