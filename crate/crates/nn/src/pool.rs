//! 2x2 max pooling and global spatial pooling.

use crate::error::{shape_err, NnError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// 2x2 / stride 2 max pool. Odd extents are handled as if the last row/column
/// were replicated, so the output is `ceil(H/2) x ceil(W/2)`.
///
/// Returns the pooled tensor and, per output cell, the flat input index of
/// the first (row-major) maximum of its window.
pub fn maxpool2d<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, h, w) = input.dims4("maxpool2d")?;
    if h == 0 || w == 0 {
        return Err(shape_err("maxpool2d", "non-empty spatial dims", input.shape()));
    }
    let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    let mut arg = vec![0usize; n * c * ho * wo];
    let x = input.data();
    let o = out.data_mut();
    if h % 2 == 0 && w % 2 == 0 {
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                let r0 = base + 2 * oy * w;
                let (top, bottom) = (&x[r0..r0 + w], &x[r0 + w..r0 + 2 * w]);
                let orow = (plane * ho + oy) * wo;
                for ox in 0..wo {
                    let cands = [(top[2 * ox], 0), (top[2 * ox + 1], 1), (bottom[2 * ox], w), (bottom[2 * ox + 1], w + 1)];
                    let mut best = cands[0];
                    for cand in &cands[1..] {
                        if cand.0 > best.0 {
                            best = *cand;
                        }
                    }
                    o[orow + ox] = best.0;
                    arg[orow + ox] = r0 + 2 * ox + best.1;
                }
            }
        }
        return Ok((out, arg));
    }
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let (y, xx) = (2 * oy + dy, 2 * ox + dx);
                    if y < h && xx < w {
                        let idx = base + y * w + xx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                let oi = (plane * ho + oy) * wo + ox;
                o[oi] = x[best];
                arg[oi] = best;
            }
        }
    }
    Ok((out, arg))
}

/// Route each output gradient to the recorded argmax.
pub fn maxpool2d_backward<T: Scalar>(grad_out: &Tensor<T>, argmax: &[usize], input_shape: &[usize]) -> Result<Tensor<T>> {
    if grad_out.len() != argmax.len() {
        return Err(shape_err("maxpool2d backward", format!("{} elements", argmax.len()), grad_out.shape()));
    }
    let mut grad = Tensor::zeros(input_shape);
    let g = grad.data_mut();
    for (&idx, &d) in argmax.iter().zip(grad_out.data()) {
        g[idx] += d;
    }
    Ok(grad)
}

#[derive(Debug, Clone, Default)]
pub struct MaxPool2d {
    argmax: Vec<usize>,
    input_shape: Vec<usize>,
}

impl MaxPool2d {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward<T: Scalar>(&mut self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let (out, arg) = maxpool2d(input)?;
        self.argmax = arg;
        self.input_shape = input.shape().to_vec();
        Ok(out)
    }

    pub fn backward<T: Scalar>(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        if self.input_shape.is_empty() {
            return Err(NnError::Invalid {
                op: "MaxPool2d::backward",
                msg: "called before forward".into(),
            });
        }
        maxpool2d_backward(grad_out, &self.argmax, &self.input_shape)
    }
}

fn spatial<T: Scalar>(input: &Tensor<T>, op: &'static str) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = input.dims4(op)?;
    if h * w == 0 {
        return Err(shape_err(op, "H, W >= 1", input.shape()));
    }
    Ok((n, c, h * w))
}

/// Per-channel spatial mean: `[N,C,H,W] -> [N,C]`.
pub fn global_avg_pool<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, hw) = spatial(input, "global_avg_pool")?;
    let scale = T::lit(hw as f64).recip();
    let x = input.data();
    Tensor::new(
        vec![n, c],
        (0..n * c).map(|p| x[p * hw..(p + 1) * hw].iter().copied().sum::<T>() * scale).collect(),
    )
}

pub fn global_avg_pool_backward<T: Scalar>(grad_out: &Tensor<T>, input_shape: &[usize]) -> Result<Tensor<T>> {
    let hw: usize = input_shape[2..].iter().product();
    let scale = T::lit(hw as f64).recip();
    let g = grad_out.data();
    Ok(Tensor::from_fn(input_shape, |i| g[i / hw] * scale))
}

/// Per-channel spatial maximum plus the flat index of the first maximum.
pub fn global_max_pool<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, hw) = spatial(input, "global_max_pool")?;
    let x = input.data();
    let mut arg = Vec::with_capacity(n * c);
    let mut vals = Vec::with_capacity(n * c);
    for p in 0..n * c {
        let base = p * hw;
        let mut best = base;
        for i in base + 1..base + hw {
            if x[i] > x[best] {
                best = i;
            }
        }
        arg.push(best);
        vals.push(x[best]);
    }
    Ok((Tensor::new(vec![n, c], vals)?, arg))
}

pub fn global_max_pool_backward<T: Scalar>(grad_out: &Tensor<T>, argmax: &[usize], input_shape: &[usize]) -> Result<Tensor<T>> {
    maxpool2d_backward(grad_out, argmax, input_shape)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn max_of_window_and_argmax_routing() {
        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let (y, arg) = maxpool2d(&x).unwrap();
        assert_eq!(y.data(), &[4.0]);
        let g = maxpool2d_backward(&Tensor::full(&[1, 1, 1, 1], 1.0), &arg, x.shape()).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn constant_halves_spatial_dims() {
        let x = Tensor::full(&[2, 3, 8, 6], 2.5);
        let (y, _) = maxpool2d(&x).unwrap();
        assert_eq!(y.shape(), &[2, 3, 4, 3]);
        assert!(y.data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn ties_go_to_first_maximum() {
        let x = t(&[1, 1, 2, 2], &[7.0, 7.0, 7.0, 7.0]);
        let (_, arg) = maxpool2d(&x).unwrap();
        assert_eq!(arg, vec![0]);
    }

    #[test]
    fn odd_extent_replicates_edge() {
        let x = t(&[1, 1, 3, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
        let (y, _) = maxpool2d(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[5.0, 6.0, 8.0, 9.0]);
        assert!(maxpool2d(&Tensor::<f64>::zeros(&[1, 1, 0, 4])).is_err());
    }

    #[test]
    fn global_pools() {
        let x = t(&[1, 1, 2, 2], &[0.0, 2.0, 4.0, 6.0]);
        assert_eq!(global_avg_pool(&x).unwrap().data(), &[3.0]);
        assert_eq!(global_max_pool(&x).unwrap().0.data(), &[6.0]);
        let c = Tensor::full(&[2, 2, 3, 3], -1.5);
        assert!(global_avg_pool(&c).unwrap().data().iter().all(|&v| v == -1.5));
        assert!(global_max_pool(&c).unwrap().0.data().iter().all(|&v| v == -1.5));
        let sym = t(&[1, 1, 2, 2], &[0.3, -0.3, 1.7, -1.7]);
        assert_eq!(global_avg_pool(&sym).unwrap().data(), &[0.0]);
    }
}
