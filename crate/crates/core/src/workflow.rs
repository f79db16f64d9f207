//! Glue between scenes, descriptors and models: dataset assembly and
//! sliding-window classification.

use sarnn::{Scalar, Tensor};
use thiserror::Error;

use crate::fusion::{FusionError, FusionModel};
use crate::nsjsm::{Extractor, NsjsmError};
use crate::pipeline::{self, CenterGrid, ClassMap, PipelineError, Sample};
use crate::train::Dataset;

#[derive(Debug, Error)]
pub enum WorkflowError {
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("descriptor at centre {center:?}: {source}")]
    Descriptor { center: (usize, usize), source: NsjsmError },
    #[error(transparent)]
    Model(#[from] FusionError),
    #[error(transparent)]
    Nn(#[from] sarnn::NnError),
    #[error("{0}")]
    Input(String),
}

pub type Result<T> = std::result::Result<T, WorkflowError>;

/// Single-channel image with its geometry.
#[derive(Debug, Clone, Copy)]
pub struct ImageView<'a> {
    pub data: &'a [f32],
    pub height: usize,
    pub width: usize,
}

impl ImageView<'_> {
    pub fn patch(&self, center: (usize, usize), side: usize) -> Vec<f32> {
        pipeline::extract_patch(self.data, self.width, center, side)
    }
}

pub fn descriptor(extractor: &Extractor, patch: &[f32], center: (usize, usize)) -> Result<Vec<f32>> {
    let p: Vec<f64> = patch.iter().map(|&v| v as f64).collect();
    let f = extractor
        .extract(&p)
        .map_err(|source| WorkflowError::Descriptor { center, source })?;
    Ok(f.into_iter().map(|v| v as f32).collect())
}

/// Which inputs a dataset carries.
#[derive(Debug, Clone, Copy)]
pub struct Inputs<'a> {
    pub patches: bool,
    pub extractor: Option<&'a Extractor>,
}

/// Dataset over `samples`, with the eight square symmetries of every patch
/// when `augment` is set. Descriptors are computed per variant.
pub fn build_dataset(image: ImageView, samples: &[Sample], side: usize, augment: bool, inputs: Inputs) -> Result<Dataset> {
    let variants = if augment { 8 } else { 1 };
    let mut set = Dataset {
        patch_side: side,
        statistical_dim: inputs.extractor.map_or(0, |e| e.feature_len()),
        variants,
        ..Dataset::default()
    };
    for s in samples {
        let base = image.patch(s.center, side);
        let copies = if augment { pipeline::augment(&base, side) } else { vec![base] };
        for p in copies {
            if let Some(ex) = inputs.extractor {
                set.statistical.extend(descriptor(ex, &p, s.center)?);
            }
            if inputs.patches {
                set.patches.extend(p);
            }
        }
        set.labels.push(s.label as usize);
    }
    Ok(set)
}

/// Descriptors of every grid centre, grid order.
pub fn grid_descriptors(image: ImageView, grid: &CenterGrid, side: usize, extractor: &Extractor) -> Result<Vec<f32>> {
    let mut out = Vec::with_capacity(grid.len() * extractor.feature_len());
    for c in grid.centers() {
        out.extend(descriptor(extractor, &image.patch(c, side), c)?);
    }
    Ok(out)
}

/// Eval-mode class probabilities of the patches at `centers`. Precomputed
/// descriptors (aligned with `centers`) are used when given, otherwise the
/// extractor runs on the fly.
pub fn predict_centers<T: Scalar>(
    model: &mut FusionModel<T>,
    image: ImageView,
    centers: &[(usize, usize)],
    side: usize,
    descriptors: Option<&[f32]>,
    extractor: Option<&Extractor>,
) -> Result<Vec<f32>> {
    let n = centers.len();
    let patches = if model.stream.uses_spatial() {
        let mut data = Vec::with_capacity(n * side * side);
        for &c in centers {
            data.extend(image.patch(c, side).into_iter().map(|v| T::lit(v as f64)));
        }
        Some(Tensor::new(vec![n, 1, side, side], data)?)
    } else {
        None
    };
    let statistical = if model.stream.uses_statistical() {
        let d = model.spec.statistical_dim;
        let values = match (descriptors, extractor) {
            (Some(v), _) if v.len() == n * d => v.to_vec(),
            (Some(v), _) => {
                return Err(WorkflowError::Input(format!(
                    "{} descriptor values for {n} centres of width {d}",
                    v.len()
                )))
            }
            (None, Some(ex)) => {
                let mut v = Vec::with_capacity(n * d);
                for &c in centers {
                    v.extend(descriptor(ex, &image.patch(c, side), c)?);
                }
                v
            }
            (None, None) => return Err(WorkflowError::Input("statistical stream needs descriptors or an extractor".into())),
        };
        Some(Tensor::new(vec![n, d], values.into_iter().map(|v| T::lit(v as f64)).collect())?)
    } else {
        None
    };
    let probs = model.probabilities(patches.as_ref(), statistical.as_ref())?;
    Ok(probs.data().iter().map(|v| v.to_f64_lossy() as f32).collect())
}

/// Stride-grid inference over the whole image followed by bilinear
/// upsampling of the class probabilities.
#[allow(clippy::too_many_arguments)]
pub fn classify_scene<T: Scalar>(
    model: &mut FusionModel<T>,
    image: ImageView,
    side: usize,
    stride: usize,
    batch: usize,
    grid_descriptors: Option<&[f32]>,
    extractor: Option<&Extractor>,
) -> Result<ClassMap> {
    let grid = CenterGrid::new(image.height, image.width, side, stride)?;
    let d = model.spec.statistical_dim;
    if let Some(g) = grid_descriptors {
        if model.stream.uses_statistical() && g.len() != grid.len() * d {
            return Err(WorkflowError::Input(format!(
                "{} cached descriptor values for a grid of {} centres",
                g.len(),
                grid.len()
            )));
        }
    }
    let classes = model.spec.classes;
    let centers = grid.centers();
    let mut probs = Vec::with_capacity(centers.len() * classes);
    for (k, chunk) in centers.chunks(batch.max(1)).enumerate() {
        let start = k * batch.max(1);
        let cached = grid_descriptors
            .filter(|_| model.stream.uses_statistical())
            .map(|g| &g[start * d..(start + chunk.len()) * d]);
        probs.extend(predict_centers(model, image, chunk, side, cached, extractor)?);
    }
    Ok(pipeline::upsample(&grid, &probs, classes, image.height, image.width)?)
}
