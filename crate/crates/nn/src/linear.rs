//! Fully connected and group-sparse (block-diagonal) affine layers.

use crate::error::{shape_err, NnError, Result};
use crate::matmul::{gemm, View};
use crate::param::{Module, Parameter};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `input [N,Din] * W^T + b` with `W: [Dout,Din]`.
pub fn dense<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (n, din) = input.dims2("dense")?;
    let (dout, wdin) = weight.dims2("dense weight")?;
    if wdin != din {
        return Err(shape_err("dense weight", format!("[_, {din}]"), weight.shape()));
    }
    let mut out = Tensor::zeros(&[n, dout]);
    gemm(
        T::one(),
        View::new(input.data(), n, din),
        View::transposed(weight.data(), dout, din),
        T::zero(),
        out.data_mut(),
        dout,
    );
    if let Some(b) = bias {
        if b.shape() != [dout] {
            return Err(shape_err("dense bias", format!("[{dout}]"), b.shape()));
        }
        for row in out.data_mut().chunks_mut(dout) {
            for (v, &bv) in row.iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
    }
    Ok(out)
}

/// Returns `d input`; accumulates into `grad_w` and `grad_b`.
pub fn dense_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    grad_w: &mut Tensor<T>,
    grad_b: Option<&mut Tensor<T>>,
) -> Result<Tensor<T>> {
    let (n, din) = input.dims2("dense backward")?;
    let (dout, _) = weight.dims2("dense backward")?;
    if grad_out.shape() != [n, dout] {
        return Err(shape_err("dense backward", format!("[{n}, {dout}]"), grad_out.shape()));
    }
    let mut dx = Tensor::zeros(&[n, din]);
    gemm(
        T::one(),
        View::new(grad_out.data(), n, dout),
        View::new(weight.data(), dout, din),
        T::zero(),
        dx.data_mut(),
        din,
    );
    gemm(
        T::one(),
        View::transposed(grad_out.data(), n, dout),
        View::new(input.data(), n, din),
        T::one(),
        grad_w.data_mut(),
        din,
    );
    if let Some(gb) = grad_b {
        for row in grad_out.data().chunks(dout) {
            for (acc, &d) in gb.data_mut().iter_mut().zip(row) {
                *acc += d;
            }
        }
    }
    Ok(dx)
}

fn group_dims(din: usize, dout: usize, groups: usize) -> Result<(usize, usize)> {
    if groups == 0 || !din.is_multiple_of(groups) || !dout.is_multiple_of(groups) {
        return Err(NnError::Config(format!(
            "group_dense dims {din}->{dout} not divisible by {groups} groups"
        )));
    }
    Ok((din / groups, dout / groups))
}

/// Block-diagonal affine map: input chunk `g` (contiguous, `Din/G` wide) maps
/// densely to output chunk `g`. `weight: [G, Dout/G, Din/G]`, no bias.
pub fn group_dense<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, din) = input.dims2("group_dense")?;
    let (groups, og, ig) = match weight.shape()[..] {
        [g, o, i] => (g, o, i),
        _ => return Err(shape_err("group_dense weight", "[G, Dout/G, Din/G]", weight.shape())),
    };
    if ig * groups != din {
        return Err(shape_err("group_dense weight", format!("[{groups}, _, {}]", din / groups.max(1)), weight.shape()));
    }
    let dout = og * groups;
    let mut out = Tensor::zeros(&[n, dout]);
    for g in 0..groups {
        let wg = &weight.data()[g * og * ig..(g + 1) * og * ig];
        gemm(
            T::one(),
            View::new(&input.data()[g * ig..], n, ig).with_ld(din),
            View::transposed(wg, og, ig),
            T::zero(),
            &mut out.data_mut()[g * og..],
            dout,
        );
    }
    Ok(out)
}

pub fn group_dense_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    grad_w: &mut Tensor<T>,
) -> Result<Tensor<T>> {
    let (n, din) = input.dims2("group_dense backward")?;
    let (groups, og, ig) = match weight.shape()[..] {
        [g, o, i] => (g, o, i),
        _ => return Err(shape_err("group_dense weight", "[G, Dout/G, Din/G]", weight.shape())),
    };
    let dout = og * groups;
    if grad_out.shape() != [n, dout] {
        return Err(shape_err("group_dense backward", format!("[{n}, {dout}]"), grad_out.shape()));
    }
    let mut dx = Tensor::zeros(&[n, din]);
    for g in 0..groups {
        let wg = &weight.data()[g * og * ig..(g + 1) * og * ig];
        gemm(
            T::one(),
            View::new(&grad_out.data()[g * og..], n, og).with_ld(dout),
            View::new(wg, og, ig),
            T::zero(),
            &mut dx.data_mut()[g * ig..],
            din,
        );
        gemm(
            T::one(),
            View::transposed(&grad_out.data()[g * og..], n, og).with_ld(dout),
            View::new(&input.data()[g * ig..], n, ig).with_ld(din),
            T::one(),
            &mut grad_w.data_mut()[g * og * ig..(g + 1) * og * ig],
            ig,
        );
    }
    Ok(dx)
}

#[derive(Debug, Clone)]
pub struct Dense<T> {
    pub weight: Parameter<T>,
    pub bias: Option<Parameter<T>>,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Dense<T> {
    /// `weight: [Dout, Din]`; a zero bias is created when `bias` is set.
    pub fn new(name: &str, weight: Tensor<T>, bias: bool) -> Result<Self> {
        let (dout, _) = weight.dims2("Dense::new")?;
        Ok(Dense {
            weight: Parameter::new(format!("{name}.weight"), weight),
            bias: bias.then(|| Parameter::new(format!("{name}.bias"), Tensor::zeros(&[dout]))),
            input: None,
        })
    }

    pub fn forward(&mut self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let out = dense(input, &self.weight.value, self.bias.as_ref().map(|b| &b.value))?;
        self.input = Some(input.clone());
        Ok(out)
    }

    /// Forward without caching, for inference.
    pub fn apply(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        dense(input, &self.weight.value, self.bias.as_ref().map(|b| &b.value))
    }

    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let input = self.input.take().ok_or(NnError::Invalid {
            op: "Dense::backward",
            msg: "called before forward".into(),
        })?;
        dense_backward(
            &input,
            &self.weight.value,
            grad_out,
            &mut self.weight.grad,
            self.bias.as_mut().map(|b| &mut b.grad),
        )
    }
}

impl<T: Scalar> Module<T> for Dense<T> {
    fn params(&self) -> Vec<&Parameter<T>> {
        std::iter::once(&self.weight).chain(self.bias.as_ref()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        std::iter::once(&mut self.weight).chain(self.bias.as_mut()).collect()
    }
}

#[derive(Debug, Clone)]
pub struct GroupDense<T> {
    pub groups: usize,
    pub weight: Parameter<T>,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> GroupDense<T> {
    /// `weight: [G, Dout/G, Din/G]`.
    pub fn new(name: &str, weight: Tensor<T>) -> Result<Self> {
        let groups = match weight.shape()[..] {
            [g, _, _] if g > 0 => g,
            _ => return Err(shape_err("GroupDense::new", "[G, Dout/G, Din/G]", weight.shape())),
        };
        Ok(GroupDense {
            groups,
            weight: Parameter::new(format!("{name}.weight"), weight),
            input: None,
        })
    }

    /// Weight shape for a `din -> dout` layer with `groups` blocks.
    pub fn weight_shape(din: usize, dout: usize, groups: usize) -> Result<[usize; 3]> {
        let (ig, og) = group_dims(din, dout, groups)?;
        Ok([groups, og, ig])
    }

    pub fn forward(&mut self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let out = group_dense(input, &self.weight.value)?;
        self.input = Some(input.clone());
        Ok(out)
    }

    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let input = self.input.take().ok_or(NnError::Invalid {
            op: "GroupDense::backward",
            msg: "called before forward".into(),
        })?;
        group_dense_backward(&input, &self.weight.value, grad_out, &mut self.weight.grad)
    }
}

impl<T: Scalar> Module<T> for GroupDense<T> {
    fn params(&self) -> Vec<&Parameter<T>> {
        vec![&self.weight]
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        vec![&mut self.weight]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_and_small_dense() {
        let x = Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, 4.0, 0.0, 1.0]).unwrap();
        let eye = Tensor::from_fn(&[3, 3], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
        assert_eq!(dense(&x, &eye, Some(&Tensor::zeros(&[3]))).unwrap().data(), x.data());
        let x = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let w = Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap();
        assert_eq!(dense(&x, &w, Some(&Tensor::zeros(&[1]))).unwrap().data(), &[3.0]);
    }

    #[test]
    fn one_group_equals_dense() {
        let x = Tensor::from_fn(&[3, 4], |i| (i as f64 * 0.7).cos());
        let w = Tensor::from_fn(&[5, 4], |i| (i as f64 * 1.3).sin());
        let a = dense(&x, &w, None).unwrap();
        let b = group_dense(&x, &w.clone().reshape(&[1, 5, 4]).unwrap()).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn grouped_identity_blocks() {
        let x = Tensor::from_fn(&[2, 4], |i| i as f64 - 3.0);
        let w = Tensor::from_fn(&[2, 2, 2], |i| if (i / 2) % 2 == i % 2 { 1.0 } else { 0.0 });
        assert_eq!(group_dense(&x, &w).unwrap().data(), x.data());
    }

    #[test]
    fn grouped_weight_counts() {
        let s = GroupDense::<f32>::weight_shape(2048, 128, 4).unwrap();
        assert_eq!(s.iter().product::<usize>(), 65536);
        assert_eq!(2048 * 128, 262144);
        assert!(GroupDense::<f32>::weight_shape(10, 8, 4).is_err());
    }

    #[test]
    fn no_cross_group_leakage() {
        let w = Tensor::from_fn(&[2, 3, 2], |i| 1.0 + i as f64);
        let mut x = Tensor::zeros(&[1, 4]);
        x.data_mut()[0] = 1.0; // first chunk only
        let y = group_dense(&x, &w).unwrap();
        assert!(y.data()[3..].iter().all(|&v| v == 0.0));
        assert!(y.data()[..3].iter().all(|&v| v != 0.0));
    }
}
