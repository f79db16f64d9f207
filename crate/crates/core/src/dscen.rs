//! Deep spatial context encoder: a stack of multi-scale group convolution
//! blocks with pooling and dropout, capped by channel attention.

use rand::Rng;
use sarnn::activation::{lrelu, lrelu_backward, sigmoid_scalar, LRELU_SLOPE};
use sarnn::linear::{dense, dense_backward};
use sarnn::pool::{global_avg_pool, global_avg_pool_backward, global_max_pool, global_max_pool_backward};
use sarnn::{
    gaussian_init, BatchNorm2d, Buffer, Conv2d, ConvSpec, Dropout, LeakyRelu, MaxPool2d, Mode, Module, NnError,
    Parameter, Scalar, Tensor,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Standard deviation of the Gaussian weight initialization.
pub const INIT_SIGMA: f64 = 0.01;

#[derive(Debug, Error)]
pub enum DscenError {
    #[error("dscen config: {0}")]
    Config(String),
    #[error("dscen input: expected [N, 1, {side}, {side}], got {got:?}")]
    Input { side: usize, got: Vec<usize> },
    #[error(transparent)]
    Nn(#[from] NnError),
}

pub type Result<T> = std::result::Result<T, DscenError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    /// Plain conv, then a grouped branch and a dilated grouped branch whose
    /// halves are concatenated.
    #[default]
    Msgc,
    /// Two plain 3x3 convolutions, the baseline for the size comparison.
    Standard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MsgcBlockSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub groups: usize,
    pub dilation: usize,
}

impl MsgcBlockSpec {
    pub fn new(in_channels: usize, out_channels: usize) -> Self {
        MsgcBlockSpec {
            in_channels,
            out_channels,
            groups: 4,
            dilation: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (fn_, g) = (self.out_channels, self.groups);
        if self.in_channels == 0 || fn_ == 0 || g == 0 || self.dilation == 0 {
            return Err(DscenError::Config("block channels, groups and dilation must be positive".into()));
        }
        if fn_ % 2 != 0 || (fn_ / 2) % g != 0 || fn_ % g != 0 {
            return Err(DscenError::Config(format!(
                "block width {fn_} must be even with {fn_}/2 divisible by {g} groups"
            )));
        }
        Ok(())
    }

    pub fn top(&self) -> ConvSpec {
        ConvSpec::same(self.in_channels, self.out_channels, 3, 1, 1)
    }

    pub fn grouped(&self) -> ConvSpec {
        ConvSpec::same(self.out_channels, self.out_channels / 2, 3, 1, self.groups)
    }

    pub fn dilated(&self) -> ConvSpec {
        ConvSpec::same(self.out_channels, self.out_channels / 2, 3, self.dilation, self.groups)
    }

    /// Convolution weights only; batch-norm affine terms are counted separately.
    pub fn conv_weight_count(&self, kind: BlockKind) -> usize {
        match kind {
            BlockKind::Msgc => self.top().weight_count() + self.grouped().weight_count() + self.dilated().weight_count(),
            BlockKind::Standard => {
                self.top().weight_count()
                    + ConvSpec::same(self.out_channels, self.out_channels, 3, 1, 1).weight_count()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CaBlockSpec {
    pub channels: usize,
    pub reduction: usize,
}

impl CaBlockSpec {
    pub fn hidden(&self) -> usize {
        self.channels / self.reduction.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.reduction == 0 || self.hidden() == 0 {
            return Err(DscenError::Config(format!(
                "attention reduction {} leaves no hidden units for {} channels",
                self.reduction, self.channels
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DscenSpec {
    pub widths: Vec<usize>,
    pub groups: usize,
    pub dilation: usize,
    pub dropout: f64,
    pub patch: usize,
    pub reduction: usize,
    pub attention: bool,
    pub block: BlockKind,
}

impl Default for DscenSpec {
    fn default() -> Self {
        DscenSpec {
            widths: vec![16, 32, 64, 128],
            groups: 4,
            dilation: 2,
            dropout: 0.2,
            patch: 64,
            reduction: 4,
            attention: true,
            block: BlockKind::Msgc,
        }
    }
}

impl DscenSpec {
    pub fn depth(&self) -> usize {
        self.widths.len()
    }

    pub fn blocks(&self) -> Vec<MsgcBlockSpec> {
        let mut cin = 1;
        self.widths
            .iter()
            .map(|&w| {
                let b = MsgcBlockSpec {
                    in_channels: cin,
                    out_channels: w,
                    groups: self.groups,
                    dilation: self.dilation,
                };
                cin = w;
                b
            })
            .collect()
    }

    pub fn attention_spec(&self) -> CaBlockSpec {
        CaBlockSpec {
            channels: *self.widths.last().unwrap_or(&0),
            reduction: self.reduction,
        }
    }

    pub fn final_side(&self) -> usize {
        self.patch >> self.depth()
    }

    /// Length of the flattened spatial feature.
    pub fn output_len(&self) -> usize {
        self.widths.last().copied().unwrap_or(0) * self.final_side() * self.final_side()
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() {
            return Err(DscenError::Config("at least one block is required".into()));
        }
        if self.depth() >= usize::BITS as usize || self.patch == 0 || !self.patch.is_multiple_of(1 << self.depth()) {
            return Err(DscenError::Config(format!(
                "patch side {} not divisible by 2^{}",
                self.patch,
                self.depth()
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(DscenError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        for b in self.blocks() {
            match self.block {
                BlockKind::Msgc => b.validate()?,
                BlockKind::Standard if b.out_channels == 0 => {
                    return Err(DscenError::Config("block width must be positive".into()))
                }
                BlockKind::Standard => {}
            }
        }
        if self.attention {
            self.attention_spec().validate()?;
        }
        Ok(())
    }
}

fn conv_layer<T: Scalar, R: Rng + ?Sized>(name: &str, spec: ConvSpec, rng: &mut R) -> Result<Conv2d<T>> {
    Ok(Conv2d::new(name, spec, gaussian_init(&spec.weight_shape(), INIT_SIGMA, rng))?)
}

/// Stack `[N,Ca,H,W]` and `[N,Cb,H,W]` into `[N,Ca+Cb,H,W]`.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, ca, h, w) = a.dims4("concat_channels")?;
    let (nb, cb, hb, wb) = b.dims4("concat_channels")?;
    if (n, h, w) != (nb, hb, wb) {
        return Err(NnError::Invalid {
            op: "concat_channels",
            msg: format!("{:?} vs {:?}", a.shape(), b.shape()),
        }
        .into());
    }
    let (sa, sb) = (ca * h * w, cb * h * w);
    let mut data = Vec::with_capacity(n * (sa + sb));
    for i in 0..n {
        data.extend_from_slice(&a.data()[i * sa..(i + 1) * sa]);
        data.extend_from_slice(&b.data()[i * sb..(i + 1) * sb]);
    }
    Ok(Tensor::new(vec![n, ca + cb, h, w], data)?)
}

/// Inverse of [`concat_channels`]: the first `ca` channels and the rest.
pub fn split_channels<T: Scalar>(x: &Tensor<T>, ca: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = x.dims4("split_channels")?;
    if ca > c {
        return Err(NnError::Invalid {
            op: "split_channels",
            msg: format!("split at {ca} of {c} channels"),
        }
        .into());
    }
    let (sa, s) = (ca * h * w, c * h * w);
    let mut a = Vec::with_capacity(n * sa);
    let mut b = Vec::with_capacity(n * (s - sa));
    for i in 0..n {
        a.extend_from_slice(&x.data()[i * s..i * s + sa]);
        b.extend_from_slice(&x.data()[i * s + sa..(i + 1) * s]);
    }
    Ok((Tensor::new(vec![n, ca, h, w], a)?, Tensor::new(vec![n, c - ca, h, w], b)?))
}

#[derive(Debug, Clone)]
enum Body<T> {
    Msgc {
        grouped: Conv2d<T>,
        dilated: Conv2d<T>,
    },
    Standard {
        second: Conv2d<T>,
    },
}

/// One convolution block; `Msgc` or `Standard` depending on the spec.
#[derive(Debug, Clone)]
pub struct ConvBlock<T> {
    pub spec: MsgcBlockSpec,
    top: Conv2d<T>,
    bn_top: BatchNorm2d<T>,
    act_top: LeakyRelu<T>,
    body: Body<T>,
    bn_out: BatchNorm2d<T>,
    act_out: LeakyRelu<T>,
}

impl<T: Scalar> ConvBlock<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, spec: MsgcBlockSpec, kind: BlockKind, rng: &mut R) -> Result<Self> {
        if kind == BlockKind::Msgc {
            spec.validate()?;
        }
        let top = conv_layer(&format!("{name}.top"), spec.top(), rng)?;
        let body = match kind {
            BlockKind::Msgc => Body::Msgc {
                grouped: conv_layer(&format!("{name}.grouped"), spec.grouped(), rng)?,
                dilated: conv_layer(&format!("{name}.dilated"), spec.dilated(), rng)?,
            },
            BlockKind::Standard => Body::Standard {
                second: conv_layer(
                    &format!("{name}.second"),
                    ConvSpec::same(spec.out_channels, spec.out_channels, 3, 1, 1),
                    rng,
                )?,
            },
        };
        Ok(ConvBlock {
            spec,
            top,
            bn_top: BatchNorm2d::new(&format!("{name}.bn_top"), spec.out_channels),
            act_top: LeakyRelu::default(),
            body,
            bn_out: BatchNorm2d::new(&format!("{name}.bn_out"), spec.out_channels),
            act_out: LeakyRelu::default(),
        })
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let t = self.act_top.forward(&self.bn_top.forward(&self.top.forward(x)?, mode)?);
        let mixed = match &mut self.body {
            Body::Msgc { grouped, dilated } => concat_channels(&grouped.forward(&t)?, &dilated.forward(&t)?)?,
            Body::Standard { second } => second.forward(&t)?,
        };
        Ok(self.act_out.forward(&self.bn_out.forward(&mixed, mode)?))
    }

    pub fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.bn_out.backward(&self.act_out.backward(grad)?)?;
        let dt = match &mut self.body {
            Body::Msgc { grouped, dilated } => {
                let (ga, gb) = split_channels(&g, self.spec.out_channels / 2)?;
                let mut dt = grouped.backward(&ga)?;
                dt.add_assign(&dilated.backward(&gb)?)?;
                dt
            }
            Body::Standard { second } => second.backward(&g)?,
        };
        Ok(self.top.backward(&self.bn_top.backward(&self.act_top.backward(&dt)?)?)?)
    }
}

impl<T: Scalar> Module<T> for ConvBlock<T> {
    fn params(&self) -> Vec<&Parameter<T>> {
        let mut p = self.top.params();
        p.extend(self.bn_top.params());
        match &self.body {
            Body::Msgc { grouped, dilated } => {
                p.extend(grouped.params());
                p.extend(dilated.params());
            }
            Body::Standard { second } => p.extend(second.params()),
        }
        p.extend(self.bn_out.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut p = self.top.params_mut();
        p.extend(self.bn_top.params_mut());
        match &mut self.body {
            Body::Msgc { grouped, dilated } => {
                p.extend(grouped.params_mut());
                p.extend(dilated.params_mut());
            }
            Body::Standard { second } => p.extend(second.params_mut()),
        }
        p.extend(self.bn_out.params_mut());
        p
    }

    fn buffers(&self) -> Vec<&Buffer<T>> {
        let mut b = self.bn_top.buffers();
        b.extend(self.bn_out.buffers());
        b
    }

    fn buffers_mut(&mut self) -> Vec<&mut Buffer<T>> {
        let mut b = self.bn_top.buffers_mut();
        b.extend(self.bn_out.buffers_mut());
        b
    }
}

#[derive(Debug, Clone)]
struct CaCache<T> {
    input: Tensor<T>,
    gate: Vec<T>,
    max_arg: Vec<usize>,
    avg: Tensor<T>,
    max: Tensor<T>,
    hidden_avg: Tensor<T>,
    hidden_max: Tensor<T>,
}

/// Channel attention: a shared two-layer MLP over the average- and
/// max-pooled channel descriptors, summed and squashed into a per-channel gate.
#[derive(Debug, Clone)]
pub struct CaBlock<T> {
    pub spec: CaBlockSpec,
    pub reduce: Parameter<T>,
    pub expand: Parameter<T>,
    cache: Option<CaCache<T>>,
}

impl<T: Scalar> CaBlock<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, spec: CaBlockSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let (c, h) = (spec.channels, spec.hidden());
        Ok(CaBlock {
            spec,
            reduce: Parameter::new(format!("{name}.reduce.weight"), gaussian_init(&[h, c], INIT_SIGMA, rng)),
            expand: Parameter::new(format!("{name}.expand.weight"), gaussian_init(&[c, h], INIT_SIGMA, rng)),
            cache: None,
        })
    }

    fn mlp(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let pre = dense(x, &self.reduce.value, None)?;
        let out = dense(&lrelu(&pre, LRELU_SLOPE), &self.expand.value, None)?;
        Ok((pre, out))
    }

    /// Per-channel gate in (0, 1), shape `[N, C]`.
    pub fn gate(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let avg = global_avg_pool(x)?;
        let (max, _) = global_max_pool(x)?;
        let (_, oa) = self.mlp(&avg)?;
        let (_, om) = self.mlp(&max)?;
        Ok(Tensor::from_fn(oa.shape(), |i| sigmoid_scalar(oa.data()[i] + om.data()[i])))
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, c, h, w) = x.dims4("CaBlock::forward")?;
        if c != self.spec.channels {
            return Err(DscenError::Config(format!("attention expects {} channels, got {c}", self.spec.channels)));
        }
        let avg = global_avg_pool(x)?;
        let (max, max_arg) = global_max_pool(x)?;
        let (hidden_avg, oa) = self.mlp(&avg)?;
        let (hidden_max, om) = self.mlp(&max)?;
        let gate: Vec<T> = oa.data().iter().zip(om.data()).map(|(&a, &b)| sigmoid_scalar(a + b)).collect();
        let hw = h * w;
        let out = Tensor::from_fn(&[n, c, h, w], |i| x.data()[i] * gate[i / hw]);
        self.cache = Some(CaCache {
            input: x.clone(),
            gate,
            max_arg,
            avg,
            max,
            hidden_avg,
            hidden_max,
        });
        Ok(out)
    }

    pub fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self.cache.take().ok_or(NnError::Invalid {
            op: "CaBlock::backward",
            msg: "called before forward".into(),
        })?;
        let x = &cache.input;
        let (n, c, h, w) = x.dims4("CaBlock::backward")?;
        let hw = h * w;
        let dy = grad.data();
        let mut dx = Tensor::from_fn(x.shape(), |i| dy[i] * cache.gate[i / hw]);
        let dz = Tensor::from_fn(&[n, c], |p| {
            let s = cache.gate[p];
            let dot: T = (p * hw..(p + 1) * hw).map(|i| dy[i] * x.data()[i]).sum();
            dot * s * (T::one() - s)
        });
        let paths = [(&cache.avg, &cache.hidden_avg, None), (&cache.max, &cache.hidden_max, Some(&cache.max_arg))];
        for (pooled, pre, arg) in paths {
            let act = lrelu(pre, LRELU_SLOPE);
            let dact = dense_backward(&act, &self.expand.value, &dz, &mut self.expand.grad, None)?;
            let dpre = lrelu_backward(pre, &dact, LRELU_SLOPE)?;
            let dpooled = dense_backward(pooled, &self.reduce.value, &dpre, &mut self.reduce.grad, None)?;
            let back = match arg {
                None => global_avg_pool_backward(&dpooled, x.shape())?,
                Some(arg) => global_max_pool_backward(&dpooled, arg, x.shape())?,
            };
            dx.add_assign(&back)?;
        }
        Ok(dx)
    }
}

impl<T: Scalar> Module<T> for CaBlock<T> {
    fn params(&self) -> Vec<&Parameter<T>> {
        vec![&self.reduce, &self.expand]
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        vec![&mut self.reduce, &mut self.expand]
    }
}

#[derive(Debug, Clone)]
struct Stage<T> {
    block: ConvBlock<T>,
    pool: MaxPool2d,
    dropout: Dropout<T>,
}

/// The spatial encoder. Input `[N, 1, P, P]` in `[0, 1]`, output the
/// flattened feature `[N, output_len]`.
#[derive(Debug, Clone)]
pub struct Dscen<T> {
    pub spec: DscenSpec,
    stages: Vec<Stage<T>>,
    attention: Option<CaBlock<T>>,
    feature_shape: Vec<usize>,
}

impl<T: Scalar> Dscen<T> {
    /// Weights are drawn from `rng`; each dropout layer gets its own stream
    /// seeded from `dropout_seed`.
    pub fn new<R: Rng + ?Sized>(spec: DscenSpec, rng: &mut R, dropout_seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut stages = Vec::with_capacity(spec.depth());
        for (i, b) in spec.blocks().into_iter().enumerate() {
            stages.push(Stage {
                block: ConvBlock::new(&format!("dscen.block{}", i + 1), b, spec.block, rng)?,
                pool: MaxPool2d::new(),
                dropout: Dropout::new(spec.dropout, dropout_seed.wrapping_add(i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))?,
            });
        }
        let attention = if spec.attention {
            Some(CaBlock::new("dscen.attention", spec.attention_spec(), rng)?)
        } else {
            None
        };
        Ok(Dscen {
            spec,
            stages,
            attention,
            feature_shape: Vec::new(),
        })
    }

    pub fn check_input(&self, x: &Tensor<T>) -> Result<usize> {
        let side = self.spec.patch;
        match x.shape()[..] {
            [n, 1, h, w] if h == side && w == side => Ok(n),
            _ => Err(DscenError::Input {
                side,
                got: x.shape().to_vec(),
            }),
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let n = self.check_input(x)?;
        let mut h = x.clone();
        for s in &mut self.stages {
            h = s.dropout.forward(&s.pool.forward(&s.block.forward(&h, mode)?)?, mode)?;
        }
        if let Some(ca) = &mut self.attention {
            h = ca.forward(&h)?;
        }
        self.feature_shape = h.shape().to_vec();
        Ok(h.reshape(&[n, self.spec.output_len()])?)
    }

    /// Gradient with respect to the input patches.
    pub fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        if self.feature_shape.is_empty() {
            return Err(NnError::Invalid {
                op: "Dscen::backward",
                msg: "called before forward".into(),
            }
            .into());
        }
        let mut g = grad.clone().reshape(&self.feature_shape)?;
        if let Some(ca) = &mut self.attention {
            g = ca.backward(&g)?;
        }
        for s in self.stages.iter_mut().rev() {
            g = s.block.backward(&s.pool.backward(&s.dropout.backward(&g)?)?)?;
        }
        Ok(g)
    }

    pub fn attention(&self) -> Option<&CaBlock<T>> {
        self.attention.as_ref()
    }
}

impl<T: Scalar> Module<T> for Dscen<T> {
    fn params(&self) -> Vec<&Parameter<T>> {
        let mut p: Vec<_> = self.stages.iter().flat_map(|s| s.block.params()).collect();
        if let Some(ca) = &self.attention {
            p.extend(ca.params());
        }
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut p: Vec<_> = self.stages.iter_mut().flat_map(|s| s.block.params_mut()).collect();
        if let Some(ca) = &mut self.attention {
            p.extend(ca.params_mut());
        }
        p
    }

    fn buffers(&self) -> Vec<&Buffer<T>> {
        self.stages.iter().flat_map(|s| s.block.buffers()).collect()
    }

    fn buffers_mut(&mut self) -> Vec<&mut Buffer<T>> {
        self.stages.iter_mut().flat_map(|s| s.block.buffers_mut()).collect()
    }
}

/// Learnable values of an encoder built from `spec`, batch-norm affine terms
/// and attention included, computed without allocating weights.
pub fn parameter_count(spec: &DscenSpec) -> usize {
    let blocks: usize = spec
        .blocks()
        .iter()
        .map(|b| b.conv_weight_count(spec.block) + 4 * b.out_channels)
        .sum();
    let ca = if spec.attention {
        let a = spec.attention_spec();
        2 * a.channels * a.hidden()
    } else {
        0
    };
    blocks + ca
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn channel_concat_round_trips() {
        let a = Tensor::from_fn(&[2, 3, 2, 2], |i| i as f64);
        let b = Tensor::from_fn(&[2, 1, 2, 2], |i| -(i as f64));
        let c = concat_channels(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 4, 2, 2]);
        assert_eq!(&c.data()[12..16], &b.data()[0..4]);
        let (a2, b2) = split_channels(&c, 3).unwrap();
        assert_eq!((a2, b2), (a, b));
    }

    #[test]
    fn counted_parameters_match_allocated() {
        for block in [BlockKind::Msgc, BlockKind::Standard] {
            let spec = DscenSpec {
                widths: vec![8, 16],
                patch: 16,
                block,
                ..DscenSpec::default()
            };
            let net: Dscen<f32> = Dscen::new(spec.clone(), &mut ChaCha8Rng::seed_from_u64(0), 0).unwrap();
            assert_eq!(net.param_count(), parameter_count(&spec));
        }
    }

    #[test]
    fn rejects_bad_configs() {
        let bad = [
            DscenSpec { widths: vec![], ..DscenSpec::default() },
            DscenSpec { patch: 60, ..DscenSpec::default() },
            DscenSpec { widths: vec![16, 30, 64, 128], ..DscenSpec::default() },
            DscenSpec { widths: vec![16, 32, 64, 2], ..DscenSpec::default() },
            DscenSpec { dropout: 1.0, ..DscenSpec::default() },
        ];
        for spec in bad {
            assert!(spec.validate().is_err(), "{spec:?}");
        }
        DscenSpec::default().validate().unwrap();
    }
}
