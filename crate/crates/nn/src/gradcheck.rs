//! Central finite-difference checks of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::activation::{lrelu, lrelu_backward, sigmoid, sigmoid_backward};
use crate::conv::{conv2d, conv2d_backward, ConvSpec};
use crate::dropout::dropout;
use crate::error::Result;
use crate::linear::{dense, dense_backward, group_dense, group_dense_backward};
use crate::loss::{softmax_cross_entropy, softmax_cross_entropy_backward};
use crate::norm::{batchnorm_backward, batchnorm_eval, batchnorm_train};
use crate::pool::{
    global_avg_pool, global_avg_pool_backward, global_max_pool, global_max_pool_backward, maxpool2d,
    maxpool2d_backward,
};
use crate::param::Module;
use crate::tensor::Tensor;
use crate::Mode;

/// Central-difference step.
pub const STEP: f64 = 1e-5;
/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Entries checked per tensor; larger tensors are sampled.
pub const MAX_CHECKED: usize = 200;

/// Denominator floor that switches the comparison from relative to absolute
/// for gradients much smaller than one.
pub const REL_FLOOR: f64 = 1e-3;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub checked: usize,
}

impl GradReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }

    pub fn merge(self, other: GradReport) -> GradReport {
        if other.max_rel_err > self.max_rel_err {
            GradReport {
                checked: self.checked + other.checked,
                ..other
            }
        } else {
            GradReport {
                checked: self.checked + other.checked,
                ..self
            }
        }
    }
}

impl Default for GradReport {
    fn default() -> Self {
        GradReport {
            max_rel_err: 0.0,
            worst_index: 0,
            checked: 0,
        }
    }
}

/// At most `max` evenly spread indices into a buffer of length `len`.
pub fn spread_indices(len: usize, max: usize) -> Vec<usize> {
    if len <= max {
        return (0..len).collect();
    }
    (0..max).map(|i| i * len / max + (i * 7919) % (len / max).max(1)).collect()
}

/// Compare `analytic[i]` with `(loss(x + h e_i) - loss(x - h e_i)) / 2h` for each
/// index in `indices`. `access` exposes the perturbed buffer inside `state`.
pub fn check<S>(
    state: &mut S,
    analytic: &[f64],
    indices: &[usize],
    h: f64,
    access: impl Fn(&mut S) -> &mut [f64],
    mut loss: impl FnMut(&mut S) -> f64,
) -> GradReport {
    let mut report = GradReport::default();
    for &i in indices {
        let orig = access(state)[i];
        access(state)[i] = orig + h;
        let up = loss(state);
        access(state)[i] = orig - h;
        let down = loss(state);
        access(state)[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let e = rel_err(analytic[i], numeric);
        if e > report.max_rel_err || report.checked == 0 {
            report.max_rel_err = report.max_rel_err.max(e);
            if e >= report.max_rel_err {
                report.worst_index = i;
            }
        }
        report.checked += 1;
    }
    report
}

/// Uniform values in `[-1, 1)` from a fixed seed.
pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random::<f64>() * 2.0 - 1.0)
}

/// Checks every input of a tensor-valued op against the scalar loss
/// `sum(forward(inputs) * r)` for a fixed random `r`. `backward` receives the
/// inputs and `r` and must return one gradient per input, in order.
pub fn check_op(
    inputs: Vec<Tensor<f64>>,
    forward: impl Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
    backward: impl Fn(&[Tensor<f64>], &Tensor<f64>) -> Result<Vec<Tensor<f64>>>,
) -> Result<GradReport> {
    let out = forward(&inputs)?;
    let r = random_tensor(out.shape(), 0x5eed ^ out.len() as u64);
    let grads = backward(&inputs, &r)?;
    check_projection(inputs, &r, &grads, forward)
}

/// Compares precomputed gradients of `sum(forward(inputs) * r)` against
/// central differences.
pub fn check_projection(
    inputs: Vec<Tensor<f64>>,
    r: &Tensor<f64>,
    grads: &[Tensor<f64>],
    forward: impl Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
) -> Result<GradReport> {
    let mut state = inputs;
    let mut report = GradReport::default();
    for (k, g) in grads.iter().enumerate() {
        let indices = spread_indices(g.len(), MAX_CHECKED);
        let mut failed = None;
        let rep = check(
            &mut state,
            g.data(),
            &indices,
            STEP,
            |s| s[k].data_mut(),
            |s| match forward(s) {
                Ok(y) => y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum(),
                Err(e) => {
                    failed.get_or_insert(e);
                    f64::NAN
                }
            },
        );
        if let Some(e) = failed {
            return Err(e);
        }
        report = report.merge(rep);
    }
    Ok(report)
}

/// Checks the input gradients and every parameter gradient of a layer stack
/// against central differences of `sum(forward(model, inputs) * r)`.
/// `forward` always runs on a fresh clone of `model`, so stochastic layers
/// must draw identical masks on every call. `backward` runs after one forward
/// on a zeroed clone and returns one gradient per input.
pub fn check_module<M, E>(
    model: &M,
    inputs: Vec<Tensor<f64>>,
    seed: u64,
    forward: impl Fn(&mut M, &[Tensor<f64>]) -> std::result::Result<Tensor<f64>, E>,
    backward: impl Fn(&mut M, &Tensor<f64>) -> std::result::Result<Vec<Tensor<f64>>, E>,
) -> std::result::Result<GradReport, E>
where
    M: Module<f64> + Clone,
{
    let mut probe = model.clone();
    probe.zero_grad();
    let out = forward(&mut probe, &inputs)?;
    let r = random_tensor(out.shape(), seed);
    let input_grads = backward(&mut probe, &r)?;
    let param_grads: Vec<Tensor<f64>> = probe.params().iter().map(|p| p.grad.clone()).collect();

    let mut failed = None;
    let mut state = (model.clone(), inputs);
    let mut report = GradReport::default();
    let mut loss = |s: &mut (M, Vec<Tensor<f64>>)| match forward(&mut s.0.clone(), &s.1) {
        Ok(y) => y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum(),
        Err(e) => {
            failed.get_or_insert(e);
            f64::NAN
        }
    };
    for (k, g) in input_grads.iter().enumerate() {
        let idx = spread_indices(g.len(), MAX_CHECKED);
        report = report.merge(check(&mut state, g.data(), &idx, STEP, |s| s.1[k].data_mut(), &mut loss));
    }
    for (j, g) in param_grads.iter().enumerate() {
        let idx = spread_indices(g.len(), MAX_CHECKED);
        report = report.merge(check(&mut state, g.data(), &idx, STEP, |s| param_data(&mut s.0, j), &mut loss));
    }
    match failed {
        Some(e) => Err(e),
        None => Ok(report),
    }
}

fn param_data<M: Module<f64>>(model: &mut M, j: usize) -> &mut [f64] {
    model.params_mut().swap_remove(j).value.data_mut()
}

fn conv_case(spec: ConvSpec, n: usize, h: usize, w: usize, seed: u64) -> Result<GradReport> {
    let mut inputs = vec![random_tensor(&[n, spec.in_channels, h, w], seed), random_tensor(&spec.weight_shape(), seed + 1)];
    if spec.bias {
        inputs.push(random_tensor(&[spec.out_channels], seed + 2));
    }
    check_op(
        inputs,
        |t| conv2d(&t[0], &spec, &t[1], t.get(2)),
        |t, r| {
            let g = conv2d_backward(&t[0], &spec, &t[1], r)?;
            let mut out = vec![g.input, g.weight];
            out.extend(g.bias);
            Ok(out)
        },
    )
}

/// Finite-difference checks of every differentiable op in this crate, in
/// double precision. Returns one named report per case.
pub fn nn_suite() -> Result<Vec<(String, GradReport)>> {
    let mut out = Vec::new();
    let plain = ConvSpec { bias: true, ..ConvSpec::same(3, 4, 3, 1, 1) };
    out.push(("conv2d 3x3 + bias".to_string(), conv_case(plain, 2, 6, 5, 10)?));
    out.push(("conv2d grouped G=2".to_string(), conv_case(ConvSpec::same(4, 6, 3, 1, 2), 2, 5, 6, 20)?));
    out.push(("conv2d dilated 2, G=2, wide".to_string(), conv_case(ConvSpec::same(4, 4, 3, 2, 2), 1, 5, 20, 30)?));
    let strided = ConvSpec { stride: 2, ..ConvSpec::same(2, 3, 3, 1, 1) };
    out.push(("conv2d stride 2".to_string(), conv_case(strided, 2, 7, 7, 40)?));

    out.push((
        "maxpool2d".to_string(),
        check_op(
            vec![random_tensor(&[2, 3, 6, 5], 50)],
            |t| Ok(maxpool2d(&t[0])?.0),
            |t, r| {
                let (_, arg) = maxpool2d(&t[0])?;
                Ok(vec![maxpool2d_backward(r, &arg, t[0].shape())?])
            },
        )?,
    ));
    out.push((
        "global average pool".to_string(),
        check_op(
            vec![random_tensor(&[2, 3, 4, 5], 60)],
            |t| global_avg_pool(&t[0]),
            |t, r| Ok(vec![global_avg_pool_backward(r, t[0].shape())?]),
        )?,
    ));
    out.push((
        "global max pool".to_string(),
        check_op(
            vec![random_tensor(&[2, 3, 4, 5], 70)],
            |t| Ok(global_max_pool(&t[0])?.0),
            |t, r| {
                let (_, arg) = global_max_pool(&t[0])?;
                Ok(vec![global_max_pool_backward(r, &arg, t[0].shape())?])
            },
        )?,
    ));
    out.push((
        "batchnorm train".to_string(),
        check_op(
            vec![random_tensor(&[3, 2, 3, 4], 80), random_tensor(&[2], 81), random_tensor(&[2], 82)],
            |t| Ok(batchnorm_train(&t[0], t[1].data(), t[2].data(), crate::norm::BN_EPS)?.0),
            |t, r| {
                let (_, cache, _) = batchnorm_train(&t[0], t[1].data(), t[2].data(), crate::norm::BN_EPS)?;
                let (dx, dg, db) = batchnorm_backward(r, &cache, t[1].data())?;
                Ok(vec![dx, Tensor::new(vec![2], dg)?, Tensor::new(vec![2], db)?])
            },
        )?,
    ));
    let running_mean = [0.3, -0.2];
    let running_var = [1.5, 0.7];
    out.push((
        "batchnorm eval".to_string(),
        check_op(
            vec![random_tensor(&[2, 2, 3, 3], 90)],
            |t| batchnorm_eval(&t[0], &[1.2, 0.8], &[0.1, -0.1], &running_mean, &running_var, crate::norm::BN_EPS),
            |t, r| {
                let (_, c, h, w) = t[0].dims4("bn eval")?;
                let hw = h * w;
                let scale: Vec<f64> = (0..c)
                    .map(|ch| [1.2, 0.8][ch] / (running_var[ch] + crate::norm::BN_EPS).sqrt())
                    .collect();
                Ok(vec![Tensor::from_fn(r.shape(), |i| r.data()[i] * scale[(i / hw) % c])])
            },
        )?,
    ));
    out.push((
        "leaky relu".to_string(),
        check_op(
            vec![random_tensor(&[4, 7], 100)],
            |t| Ok(lrelu(&t[0], crate::activation::LRELU_SLOPE)),
            |t, r| Ok(vec![lrelu_backward(&t[0], r, crate::activation::LRELU_SLOPE)?]),
        )?,
    ));
    out.push((
        "sigmoid".to_string(),
        check_op(
            vec![random_tensor(&[4, 7], 110).map(|v| 4.0 * v)],
            |t| Ok(sigmoid(&t[0])),
            |t, r| Ok(vec![sigmoid_backward(&sigmoid(&t[0]), r)?]),
        )?,
    ));
    out.push((
        "dense + bias".to_string(),
        check_op(
            vec![random_tensor(&[3, 5], 120), random_tensor(&[4, 5], 121), random_tensor(&[4], 122)],
            |t| dense(&t[0], &t[1], Some(&t[2])),
            |t, r| {
                let mut gw = Tensor::zeros(t[1].shape());
                let mut gb = Tensor::zeros(t[2].shape());
                let dx = dense_backward(&t[0], &t[1], r, &mut gw, Some(&mut gb))?;
                Ok(vec![dx, gw, gb])
            },
        )?,
    ));
    out.push((
        "group dense G=4".to_string(),
        check_op(
            vec![random_tensor(&[3, 16], 130), random_tensor(&[4, 2, 4], 131)],
            |t| group_dense(&t[0], &t[1]),
            |t, r| {
                let mut gw = Tensor::zeros(t[1].shape());
                let dx = group_dense_backward(&t[0], &t[1], r, &mut gw)?;
                Ok(vec![dx, gw])
            },
        )?,
    ));
    let labels = [2usize, 0, 4];
    out.push((
        "softmax cross-entropy".to_string(),
        check_op(
            vec![random_tensor(&[3, 5], 140).map(|v| 3.0 * v)],
            |t| Tensor::new(vec![1], vec![softmax_cross_entropy(&t[0], &labels)?.0]),
            |t, r| {
                let (_, probs) = softmax_cross_entropy(&t[0], &labels)?;
                Ok(vec![softmax_cross_entropy_backward(&probs, &labels)?.map(|g| g * r.data()[0])])
            },
        )?,
    ));
    out.push((
        "dropout (fixed mask)".to_string(),
        check_op(
            vec![random_tensor(&[4, 6], 150)],
            |t| Ok(dropout(&t[0], 0.2, Mode::Train, &mut ChaCha8Rng::seed_from_u64(7))?.0),
            |t, r| {
                let (_, mask) = dropout(&t[0], 0.2, Mode::Train, &mut ChaCha8Rng::seed_from_u64(7))?;
                let mask = mask.expect("train mode with positive rate returns a mask");
                Ok(vec![Tensor::from_fn(r.shape(), |i| r.data()[i] * mask[i])])
            },
        )?,
    ));
    Ok(out)
}
