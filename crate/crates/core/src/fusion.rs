//! Fusion-Net head and the single-stream baselines, each wrapped with the
//! spatial encoder where the variant needs it.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sarnn::loss::{argmax_rows, softmax};
use sarnn::{gaussian_init, glorot_init, Buffer, Dense, GroupDense, Mode, Module, NnError, Parameter, Relu, Scalar, Sigmoid, Tensor};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dscen::{Dscen, DscenError, DscenSpec, INIT_SIGMA};

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("fusion config: {0}")]
    Config(String),
    #[error("fusion input: {0}")]
    Input(String),
    #[error(transparent)]
    Dscen(#[from] DscenError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

pub type Result<T> = std::result::Result<T, FusionError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Sigmoid,
    Relu,
}

/// Which classifier to build: the two-stream Fusion-Net, a single stream, or
/// plain feature concatenation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Stream {
    #[default]
    Fusion,
    Dscen,
    Nsjsm,
    Concat,
}

impl Stream {
    pub const ALL: [Stream; 4] = [Stream::Fusion, Stream::Dscen, Stream::Nsjsm, Stream::Concat];

    pub fn uses_spatial(self) -> bool {
        self != Stream::Nsjsm
    }

    pub fn uses_statistical(self) -> bool {
        self != Stream::Dscen
    }

    pub fn name(self) -> &'static str {
        match self {
            Stream::Fusion => "fusion",
            Stream::Dscen => "dscen",
            Stream::Nsjsm => "nsjsm",
            Stream::Concat => "concat",
        }
    }
}

impl fmt::Display for Stream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stream {
    type Err = FusionError;

    fn from_str(s: &str) -> Result<Self> {
        Stream::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| FusionError::Config(format!("unknown stream `{s}` (fusion|dscen|nsjsm|concat)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionSpec {
    pub spatial_dim: usize,
    pub statistical_dim: usize,
    pub hidden: usize,
    pub groups: usize,
    pub classes: usize,
    pub activation: Activation,
}

impl Default for FusionSpec {
    fn default() -> Self {
        FusionSpec {
            spatial_dim: 2048,
            statistical_dim: 4160,
            hidden: 128,
            groups: 4,
            classes: 4,
            activation: Activation::Sigmoid,
        }
    }
}

impl FusionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(FusionError::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.groups == 0 || !self.hidden.is_multiple_of(self.groups) {
            return Err(FusionError::Config(format!(
                "hidden width {} not divisible by {} groups",
                self.hidden, self.groups
            )));
        }
        if self.hidden < self.classes {
            return Err(FusionError::Config(format!(
                "hidden width {} below class count {}",
                self.hidden, self.classes
            )));
        }
        Ok(())
    }

    /// General checks plus positive widths for the streams `stream` reads.
    pub fn validate_for(&self, stream: Stream) -> Result<()> {
        self.validate()?;
        if (stream.uses_spatial() && self.spatial_dim == 0) || (stream.uses_statistical() && self.statistical_dim == 0) {
            return Err(FusionError::Config(format!("{stream} variant needs positive feature widths")));
        }
        Ok(())
    }

    /// Input width rounded up to a multiple of the group count; the extra
    /// columns are zero.
    pub fn padded(&self, dim: usize) -> usize {
        dim.div_ceil(self.groups) * self.groups
    }

    /// Weights of the two per-stream sparse layers.
    pub fn sparse_weight_count(&self) -> usize {
        (self.padded(self.spatial_dim) + self.padded(self.statistical_dim)) * self.hidden / self.groups
    }
}

fn pad_columns<T: Scalar>(x: &Tensor<T>, width: usize) -> Result<Tensor<T>> {
    let (n, d) = x.dims2("pad_columns")?;
    if d == width {
        return Ok(x.clone());
    }
    Ok(Tensor::from_fn(&[n, width], |i| {
        let (r, c) = (i / width, i % width);
        if c < d {
            x.data()[r * d + c]
        } else {
            T::zero()
        }
    }))
}

fn take_columns<T: Scalar>(x: &Tensor<T>, start: usize, width: usize) -> Result<Tensor<T>> {
    let (n, d) = x.dims2("take_columns")?;
    Ok(Tensor::from_fn(&[n, width], |i| x.data()[(i / width) * d + start + i % width]))
}

fn concat_columns<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, da) = a.dims2("concat_columns")?;
    let (nb, db) = b.dims2("concat_columns")?;
    if n != nb {
        return Err(FusionError::Input(format!("{n} spatial rows vs {nb} statistical rows")));
    }
    let w = da + db;
    Ok(Tensor::from_fn(&[n, w], |i| {
        let (r, c) = (i / w, i % w);
        if c < da {
            a.data()[r * da + c]
        } else {
            b.data()[r * db + c - da]
        }
    }))
}

#[derive(Debug, Clone)]
enum Act<T> {
    Sigmoid(Sigmoid<T>),
    Relu(Relu<T>),
}

impl<T: Scalar> Act<T> {
    fn new(kind: Activation) -> Self {
        match kind {
            Activation::Sigmoid => Act::Sigmoid(Sigmoid::default()),
            Activation::Relu => Act::Relu(Relu::new()),
        }
    }

    fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        match self {
            Act::Sigmoid(a) => a.forward(x),
            Act::Relu(a) => a.forward(x),
        }
    }

    fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(match self {
            Act::Sigmoid(a) => a.backward(g)?,
            Act::Relu(a) => a.backward(g)?,
        })
    }
}

#[derive(Debug, Clone)]
enum Head<T> {
    Fusion {
        spatial: GroupDense<T>,
        statistical: GroupDense<T>,
        act_spatial: Act<T>,
        act_statistical: Act<T>,
        fuse: Dense<T>,
        act_fuse: Act<T>,
        classifier: Dense<T>,
    },
    Linear {
        classifier: Dense<T>,
    },
}

/// Gradients with respect to the model inputs.
#[derive(Debug, Clone, Default)]
pub struct InputGrads<T> {
    pub patches: Option<Tensor<T>>,
    pub statistical: Option<Tensor<T>>,
}

/// A complete classifier: optional spatial encoder plus a head.
#[derive(Debug, Clone)]
pub struct FusionModel<T> {
    pub stream: Stream,
    pub spec: FusionSpec,
    pub dscen: Option<Dscen<T>>,
    head: Head<T>,
}

impl<T: Scalar> FusionModel<T> {
    /// `spec.spatial_dim` is overwritten by the encoder's output length when
    /// the variant has a spatial stream. All weights and dropout masks derive
    /// from `seed`.
    pub fn new(stream: Stream, dscen: &DscenSpec, mut spec: FusionSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = if stream.uses_spatial() {
            let net = Dscen::new(dscen.clone(), &mut rng, seed ^ 0xd5ce_u64)?;
            spec.spatial_dim = net.spec.output_len();
            Some(net)
        } else {
            None
        };
        spec.validate_for(stream)?;
        let (h, c, g) = (spec.hidden, spec.classes, spec.groups);
        // The sigmoid reduction and fusion layers start at Glorot scale; the
        // classifier keeps the small encoder init.
        let mut init = |shape: &[usize], glorot: bool| {
            if glorot {
                glorot_init::<T, _>(shape, &mut rng)
            } else {
                gaussian_init::<T, _>(shape, INIT_SIGMA, &mut rng)
            }
        };
        let classifier_in = match stream {
            Stream::Fusion => h,
            Stream::Dscen => spec.spatial_dim,
            Stream::Nsjsm => spec.statistical_dim,
            Stream::Concat => spec.spatial_dim + spec.statistical_dim,
        };
        let head = match stream {
            Stream::Fusion => {
                let ws = GroupDense::<T>::weight_shape(spec.padded(spec.spatial_dim), h, g)?;
                let wt = GroupDense::<T>::weight_shape(spec.padded(spec.statistical_dim), h, g)?;
                Head::Fusion {
                    spatial: GroupDense::new("head.spatial", init(&ws, true))?,
                    statistical: GroupDense::new("head.statistical", init(&wt, true))?,
                    act_spatial: Act::new(spec.activation),
                    act_statistical: Act::new(spec.activation),
                    fuse: Dense::new("head.fuse", init(&[h, 2 * h], true), false)?,
                    act_fuse: Act::new(spec.activation),
                    classifier: Dense::new("head.classifier", init(&[c, h], false), true)?,
                }
            }
            _ => Head::Linear {
                classifier: Dense::new("head.classifier", init(&[c, classifier_in], false), true)?,
            },
        };
        Ok(FusionModel {
            stream,
            spec,
            dscen: encoder,
            head,
        })
    }

    fn check_inputs(&self, patches: Option<&Tensor<T>>, statistical: Option<&Tensor<T>>) -> Result<usize> {
        let mut rows = None;
        if self.stream.uses_spatial() {
            let p = patches.ok_or_else(|| FusionError::Input(format!("{} variant needs patches", self.stream)))?;
            rows = Some(p.shape()[0]);
        }
        if self.stream.uses_statistical() {
            let s = statistical
                .ok_or_else(|| FusionError::Input(format!("{} variant needs statistical features", self.stream)))?;
            let (n, d) = s.dims2("FusionModel::forward")?;
            if d != self.spec.statistical_dim {
                return Err(FusionError::Input(format!(
                    "statistical width {d}, expected {}",
                    self.spec.statistical_dim
                )));
            }
            if rows.is_some_and(|r| r != n) {
                return Err(FusionError::Input(format!("{} patches vs {n} descriptors", rows.unwrap_or(0))));
            }
            rows = Some(n);
        }
        rows.ok_or_else(|| FusionError::Input("no inputs".into()))
    }

    /// Logits `[N, C]`.
    pub fn forward(&mut self, patches: Option<&Tensor<T>>, statistical: Option<&Tensor<T>>, mode: Mode) -> Result<Tensor<T>> {
        self.check_inputs(patches, statistical)?;
        let spatial = match (&mut self.dscen, patches) {
            (Some(net), Some(p)) => Some(net.forward(p, mode)?),
            _ => None,
        };
        self.head_forward(spatial.as_ref(), statistical)
    }

    /// Head only, for precomputed spatial features.
    pub fn head_forward(&mut self, spatial: Option<&Tensor<T>>, statistical: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let spec = self.spec;
        let missing = |what: &str| FusionError::Input(format!("missing {what} features"));
        match &mut self.head {
            Head::Fusion {
                spatial: sp,
                statistical: st,
                act_spatial,
                act_statistical,
                fuse,
                act_fuse,
                classifier,
            } => {
                let fs = spatial.ok_or_else(|| missing("spatial"))?;
                let ft = statistical.ok_or_else(|| missing("statistical"))?;
                let hs = act_spatial.forward(&sp.forward(&pad_columns(fs, spec.padded(fs.dims2("head")?.1))?)?);
                let ht = act_statistical.forward(&st.forward(&pad_columns(ft, spec.padded(ft.dims2("head")?.1))?)?);
                let fused = act_fuse.forward(&fuse.forward(&concat_columns(&hs, &ht)?)?);
                Ok(classifier.forward(&fused)?)
            }
            Head::Linear { classifier } => {
                let x = match self.stream {
                    Stream::Dscen => spatial.ok_or_else(|| missing("spatial"))?.clone(),
                    Stream::Nsjsm => statistical.ok_or_else(|| missing("statistical"))?.clone(),
                    _ => concat_columns(
                        spatial.ok_or_else(|| missing("spatial"))?,
                        statistical.ok_or_else(|| missing("statistical"))?,
                    )?,
                };
                Ok(classifier.forward(&x)?)
            }
        }
    }

    /// Back-propagates logit gradients through the head and the encoder,
    /// accumulating parameter gradients.
    pub fn backward(&mut self, grad: &Tensor<T>) -> Result<InputGrads<T>> {
        let (spatial, statistical) = self.head_backward(grad)?;
        let patches = match (&mut self.dscen, spatial) {
            (Some(net), Some(g)) => Some(net.backward(&g)?),
            _ => None,
        };
        Ok(InputGrads { patches, statistical })
    }

    /// Gradients with respect to the spatial and statistical features.
    pub fn head_backward(&mut self, grad: &Tensor<T>) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
        let (ds, dt) = (self.spec.spatial_dim, self.spec.statistical_dim);
        match &mut self.head {
            Head::Fusion {
                spatial,
                statistical,
                act_spatial,
                act_statistical,
                fuse,
                act_fuse,
                classifier,
            } => {
                let h = self.spec.hidden;
                let g = fuse.backward(&act_fuse.backward(&classifier.backward(grad)?)?)?;
                let gs = act_spatial.backward(&take_columns(&g, 0, h)?)?;
                let gt = act_statistical.backward(&take_columns(&g, h, h)?)?;
                let fs = take_columns(&spatial.backward(&gs)?, 0, ds)?;
                let ft = take_columns(&statistical.backward(&gt)?, 0, dt)?;
                Ok((Some(fs), Some(ft)))
            }
            Head::Linear { classifier } => {
                let g = classifier.backward(grad)?;
                Ok(match self.stream {
                    Stream::Dscen => (Some(g), None),
                    Stream::Nsjsm => (None, Some(g)),
                    _ => (Some(take_columns(&g, 0, ds)?), Some(take_columns(&g, ds, dt)?)),
                })
            }
        }
    }

    /// Class probabilities in eval mode.
    pub fn probabilities(&mut self, patches: Option<&Tensor<T>>, statistical: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        Ok(softmax(&self.forward(patches, statistical, Mode::Eval)?)?)
    }

    /// Parameters of the head alone.
    pub fn head_params(&self) -> Vec<&Parameter<T>> {
        match &self.head {
            Head::Fusion {
                spatial,
                statistical,
                fuse,
                classifier,
                ..
            } => {
                let mut p = spatial.params();
                p.extend(statistical.params());
                p.extend(fuse.params());
                p.extend(classifier.params());
                p
            }
            Head::Linear { classifier } => classifier.params(),
        }
    }
}

fn head_params_mut<T: Scalar>(head: &mut Head<T>) -> Vec<&mut Parameter<T>> {
    match head {
        Head::Fusion {
            spatial,
            statistical,
            fuse,
            classifier,
            ..
        } => {
            let mut p = spatial.params_mut();
            p.extend(statistical.params_mut());
            p.extend(fuse.params_mut());
            p.extend(classifier.params_mut());
            p
        }
        Head::Linear { classifier } => classifier.params_mut(),
    }
}

impl<T: Scalar> Module<T> for FusionModel<T> {
    fn params(&self) -> Vec<&Parameter<T>> {
        let mut p = self.dscen.as_ref().map(|d| d.params()).unwrap_or_default();
        p.extend(self.head_params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut p = self.dscen.as_mut().map(|d| d.params_mut()).unwrap_or_default();
        p.extend(head_params_mut(&mut self.head));
        p
    }

    fn buffers(&self) -> Vec<&Buffer<T>> {
        self.dscen.as_ref().map(|d| d.buffers()).unwrap_or_default()
    }

    fn buffers_mut(&mut self) -> Vec<&mut Buffer<T>> {
        self.dscen.as_mut().map(|d| d.buffers_mut()).unwrap_or_default()
    }
}

/// Row-wise argmax; ties go to the lowest class index.
pub fn predict<T: Scalar>(scores: &Tensor<T>) -> Result<Vec<usize>> {
    Ok(argmax_rows(scores)?)
}
