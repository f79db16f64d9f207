//! Data plumbing: synthetic speckled scenes, patch sampling and
//! augmentation, sliding-window inference and accuracy metrics.

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Label value for pixels without ground truth.
pub const UNLABELED: u8 = 255;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("synthetic scene: {0}")]
    Synth(String),
    #[error("sampling: {0}")]
    Sampling(String),
    #[error("inference: {0}")]
    Inference(String),
    #[error("metrics: {0}")]
    Metrics(String),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

/// Deterministic backscatter pattern of one class, before speckle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Texture {
    /// `1 + contrast * sin(2 pi <x, n> / period)` with `n` at `orientation`
    /// degrees from the row axis.
    Grating { orientation: f64, period: f64, contrast: f64 },
    /// Log-normal field `exp(contrast * g - contrast^2 / 2)` of a unit-variance
    /// Gaussian field `g` with Gaussian correlation of `correlation` pixels.
    Field { correlation: f64, contrast: f64 },
    Flat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub texture: Texture,
    /// Independent looks averaged into the intensity.
    pub looks: u32,
    /// Mean intensity of the class.
    pub level: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub classes: Vec<ClassSpec>,
    /// Scene side in pixels.
    pub side: usize,
    /// Scatterers summed per resolution cell and look.
    pub scatterers: usize,
    /// Width of the unlabeled band left around region boundaries.
    pub boundary_band: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            classes: vec![
                ClassSpec {
                    texture: Texture::Grating {
                        orientation: 30.0,
                        period: 10.0,
                        contrast: 0.7,
                    },
                    looks: 1,
                    level: 1.0,
                },
                ClassSpec {
                    texture: Texture::Field {
                        correlation: 1.5,
                        contrast: 0.8,
                    },
                    looks: 2,
                    level: 1.0,
                },
                ClassSpec {
                    texture: Texture::Field {
                        correlation: 6.0,
                        contrast: 0.8,
                    },
                    looks: 4,
                    level: 1.0,
                },
                ClassSpec {
                    texture: Texture::Flat,
                    looks: 1,
                    level: 0.6,
                },
            ],
            side: 512,
            scatterers: 16,
            boundary_band: 0,
            seed: 1,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self, patch: usize) -> Result<()> {
        let fail = |m: String| Err(PipelineError::Synth(m));
        if self.classes.len() < 2 || self.classes.len() > UNLABELED as usize {
            return fail(format!("need 2..=255 classes, got {}", self.classes.len()));
        }
        if self.scatterers < 10 {
            return fail(format!("at least 10 scatterers per cell, got {}", self.scatterers));
        }
        for (i, c) in self.classes.iter().enumerate() {
            if c.looks == 0 {
                return fail(format!("class {i}: looks must be >= 1"));
            }
            if !(c.level.is_finite() && c.level > 0.0) {
                return fail(format!("class {i}: level must be positive"));
            }
            let ok = match c.texture {
                Texture::Grating { period, contrast, orientation } => {
                    period > 0.0 && (0.0..1.0).contains(&contrast) && orientation.is_finite()
                }
                Texture::Field { correlation, contrast } => correlation > 0.0 && contrast >= 0.0 && contrast.is_finite(),
                Texture::Flat => true,
            };
            if !ok {
                return fail(format!("class {i}: invalid texture {:?}", c.texture));
            }
        }
        let (rows, cols) = grid_shape(self.classes.len());
        let smallest = self.side / rows.max(cols) * 3 / 4;
        if smallest < patch {
            return fail(format!(
                "scene side {} leaves regions of ~{smallest} px, smaller than one {patch} px patch",
                self.side
            ));
        }
        Ok(())
    }
}

/// A single-channel image with per-pixel class labels, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledScene {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub image: Vec<f32>,
    pub labels: Vec<u8>,
}

impl LabeledScene {
    pub fn validate(&self) -> Result<()> {
        let n = self.height * self.width;
        if self.image.len() != n || self.labels.len() != n {
            return Err(PipelineError::Synth(format!(
                "{}x{} scene with {} pixels and {} labels",
                self.height,
                self.width,
                self.image.len(),
                self.labels.len()
            )));
        }
        if let Some(bad) = self.labels.iter().find(|&&l| l != UNLABELED && l as usize >= self.classes) {
            return Err(PipelineError::Synth(format!("label {bad} outside {} classes", self.classes)));
        }
        Ok(())
    }
}

/// Region grid used for `c` classes: as square as possible.
fn grid_shape(c: usize) -> (usize, usize) {
    let cols = (c as f64).sqrt().ceil() as usize;
    (c.div_ceil(cols), cols)
}

/// Split positions of `parts` bands over `len` pixels, each interior cut
/// jittered by up to a quarter band.
fn cuts<R: Rng>(len: usize, parts: usize, rng: &mut R) -> Vec<usize> {
    let band = len as f64 / parts as f64;
    let mut out = vec![0];
    for i in 1..parts {
        let jitter = rng.random_range(-0.25..=0.25) * band;
        out.push((i as f64 * band + jitter).round() as usize);
    }
    out.push(len);
    out
}

fn gaussian_blur_1d(src: &[f64], dst: &mut [f64], len: usize, stride: usize, count: usize, step: usize, kernel: &[f64]) {
    let r = kernel.len() / 2;
    for line in 0..count {
        let base = line * step;
        for i in 0..len {
            let mut acc = 0.0;
            for (t, &kv) in kernel.iter().enumerate() {
                let j = crate::gabor::reflect(i as isize + t as isize - r as isize, len);
                acc += kv * src[base + j * stride];
            }
            dst[base + i * stride] = acc;
        }
    }
}

/// Unit-variance Gaussian random field with Gaussian correlation.
fn gaussian_field<R: Rng>(side: usize, correlation: f64, rng: &mut R) -> Vec<f64> {
    let mut a: Vec<f64> = (0..side * side).map(|_| rng.sample(StandardNormal)).collect();
    let sigma = correlation / std::f64::consts::SQRT_2;
    let r = (3.0 * sigma).ceil().max(1.0) as usize;
    let kernel: Vec<f64> = (0..=2 * r)
        .map(|t| {
            let d = t as f64 - r as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let mut b = vec![0.0; side * side];
    gaussian_blur_1d(&a, &mut b, side, 1, side, side, &kernel);
    gaussian_blur_1d(&b, &mut a, side, side, side, 1, &kernel);
    let mean = a.iter().sum::<f64>() / a.len() as f64;
    let sd = (a.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / a.len() as f64).sqrt();
    a.iter().map(|v| (v - mean) / sd.max(f64::MIN_POSITIVE)).collect()
}

fn texture_map<R: Rng>(spec: &ClassSpec, side: usize, rng: &mut R) -> Vec<f64> {
    match spec.texture {
        Texture::Grating {
            orientation,
            period,
            contrast,
        } => {
            let (s, c) = orientation.to_radians().sin_cos();
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            (0..side * side)
                .map(|i| {
                    let (y, x) = ((i / side) as f64, (i % side) as f64);
                    let t = std::f64::consts::TAU * (x * c + y * s) / period + phase;
                    spec.level * (1.0 + contrast * t.sin())
                })
                .collect()
        }
        Texture::Field { correlation, contrast } => gaussian_field(side, correlation, rng)
            .into_iter()
            .map(|g| spec.level * (contrast * g - contrast * contrast / 2.0).exp())
            .collect(),
        Texture::Flat => vec![spec.level; side * side],
    }
}

/// Intensity of one look: `|sum_k A_k e^{i theta_k}|^2 / K` with Rayleigh
/// `A_k` of unit mean square and uniform phases.
pub fn single_look<R: Rng>(scatterers: usize, rng: &mut R) -> f64 {
    let (mut re, mut im) = (0.0f64, 0.0f64);
    for _ in 0..scatterers {
        // a Rayleigh amplitude with a uniform phase is a circular complex
        // Gaussian
        let x: f64 = rng.sample(StandardNormal);
        let y: f64 = rng.sample(StandardNormal);
        re += x;
        im += y;
    }
    (re * re + im * im) / (2.0 * scatterers as f64)
}

/// Mean of `looks` independent single-look intensities.
pub fn multilook<R: Rng>(looks: u32, scatterers: usize, rng: &mut R) -> f64 {
    (0..looks).map(|_| single_look(scatterers, rng)).sum::<f64>() / looks as f64
}

/// Region grid with jittered cuts; classes are shuffled onto the cells and
/// spare cells get random classes. Pixels store amplitude, the square root
/// of texture times speckle intensity.
pub fn synth_scene(spec: &SynthSpec, patch: usize) -> Result<LabeledScene> {
    spec.validate(patch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let side = spec.side;
    let c = spec.classes.len();
    let (rows, cols) = grid_shape(c);
    let row_cuts = cuts(side, rows, &mut rng);
    let col_cuts = cuts(side, cols, &mut rng);
    let mut cell_class: Vec<usize> = (0..rows * cols).map(|i| if i < c { i } else { rng.random_range(0..c) }).collect();
    cell_class.shuffle(&mut rng);

    let band = spec.boundary_band as isize;
    let mut labels = vec![UNLABELED; side * side];
    let mut region = vec![0usize; side * side];
    for (ri, rw) in row_cuts.windows(2).enumerate() {
        for (ci, cw) in col_cuts.windows(2).enumerate() {
            let cls = cell_class[ri * cols + ci];
            for y in rw[0]..rw[1] {
                for x in cw[0]..cw[1] {
                    region[y * side + x] = cls;
                    let inner = |v: usize, lo: usize, hi: usize, edge_lo: bool, edge_hi: bool| {
                        (edge_lo || v as isize - lo as isize >= band) && (edge_hi || hi as isize - 1 - v as isize >= band)
                    };
                    let keep = inner(y, rw[0], rw[1], ri == 0, ri + 1 == rows)
                        && inner(x, cw[0], cw[1], ci == 0, ci + 1 == cols);
                    if keep {
                        labels[y * side + x] = cls as u8;
                    }
                }
            }
        }
    }

    let textures: Vec<Vec<f64>> = spec.classes.iter().map(|cs| texture_map(cs, side, &mut rng)).collect();
    let image = (0..side * side)
        .map(|i| {
            let cls = region[i];
            let speckle = multilook(spec.classes[cls].looks, spec.scatterers, &mut rng);
            (textures[cls][i] * speckle).sqrt() as f32
        })
        .collect();
    Ok(LabeledScene {
        height: side,
        width: side,
        classes: c,
        image,
        labels,
    })
}

/// Max-min scaling to `[0, 1]`. A constant image maps to 0.5 and is reported
/// through the returned flag.
pub fn normalize(image: &[f32]) -> (Vec<f32>, bool) {
    let (lo, hi) = image
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(hi > lo) {
        log::warn!("constant image normalized to 0.5");
        return (vec![0.5; image.len()], true);
    }
    let span = (hi - lo) as f64;
    (image.iter().map(|&v| ((v - lo) as f64 / span) as f32).collect(), false)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    /// Row and column of the patch centre.
    pub center: (usize, usize),
    pub label: u8,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub patch: usize,
    pub samples: Vec<Sample>,
}

impl SampleSet {
    pub fn split(&self, which: Split) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.split == which)
    }
}

/// A centre `c` owns rows `c - side/2 .. c + side/2`; valid centres keep
/// the whole patch inside the image.
pub fn valid_center_range(extent: usize, patch: usize) -> Option<(usize, usize)> {
    let half = patch / 2;
    (extent >= patch).then(|| (half, extent - (patch - half)))
}

/// `per_class` random centres per class, without replacement, among pixels
/// whose patch lies fully inside the image; the first `train_frac` of each
/// class are training samples, the rest validation.
pub fn sample_patches(scene: &LabeledScene, per_class: usize, train_frac: f64, patch: usize, seed: u64) -> Result<SampleSet> {
    scene.validate().map_err(|e| PipelineError::Sampling(e.to_string()))?;
    if !(0.0..=1.0).contains(&train_frac) {
        return Err(PipelineError::Sampling(format!("train fraction {train_frac} outside [0, 1]")));
    }
    let (y0, y1) = valid_center_range(scene.height, patch)
        .ok_or_else(|| PipelineError::Sampling(format!("image smaller than a {patch} px patch")))?;
    let (x0, x1) = valid_center_range(scene.width, patch)
        .ok_or_else(|| PipelineError::Sampling(format!("image smaller than a {patch} px patch")))?;
    let mut eligible: Vec<Vec<(usize, usize)>> = vec![Vec::new(); scene.classes];
    for y in y0..=y1 {
        for x in x0..=x1 {
            let l = scene.labels[y * scene.width + x];
            if l != UNLABELED {
                eligible[l as usize].push((y, x));
            }
        }
    }
    let short: Vec<String> = eligible
        .iter()
        .enumerate()
        .filter(|(_, e)| e.len() < per_class)
        .map(|(c, e)| format!("class {c}: {} of {per_class}", e.len()))
        .collect();
    if !short.is_empty() {
        return Err(PipelineError::Sampling(format!("too few eligible centres ({})", short.join(", "))));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_train = (per_class as f64 * train_frac).round() as usize;
    let mut samples = Vec::with_capacity(per_class * scene.classes);
    for (c, centers) in eligible.iter().enumerate() {
        let picks = index::sample(&mut rng, centers.len(), per_class);
        for (k, i) in picks.into_iter().enumerate() {
            samples.push(Sample {
                center: centers[i],
                label: c as u8,
                split: if k < n_train { Split::Train } else { Split::Val },
            });
        }
    }
    Ok(SampleSet { patch, samples })
}

/// Copy of the `side x side` window owned by `center`.
pub fn extract_patch(image: &[f32], width: usize, center: (usize, usize), side: usize) -> Vec<f32> {
    let (top, left) = (center.0 - side / 2, center.1 - side / 2);
    let mut out = Vec::with_capacity(side * side);
    for y in top..top + side {
        out.extend_from_slice(&image[y * width + left..][..side]);
    }
    out
}

/// Quarter turn counter-clockwise of a square patch.
pub fn rotate90(p: &[f32], side: usize) -> Vec<f32> {
    let mut out = vec![0.0; p.len()];
    for y in 0..side {
        for x in 0..side {
            out[(side - 1 - x) * side + y] = p[y * side + x];
        }
    }
    out
}

pub fn flip_horizontal(p: &[f32], side: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(p.len());
    for row in p.chunks_exact(side) {
        out.extend(row.iter().rev());
    }
    out
}

/// The eight symmetries of the square: rotations by 0, 90, 180 and 270
/// degrees, then the same four after a horizontal flip.
pub fn augment(p: &[f32], side: usize) -> Vec<Vec<f32>> {
    let mut out = Vec::with_capacity(8);
    for start in [p.to_vec(), flip_horizontal(p, side)] {
        let mut cur = start;
        for _ in 0..4 {
            let next = rotate90(&cur, side);
            out.push(cur);
            cur = next;
        }
    }
    out
}

/// Patch centres evaluated by sliding-window inference.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CenterGrid {
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
    pub stride: usize,
}

impl CenterGrid {
    pub fn new(height: usize, width: usize, patch: usize, stride: usize) -> Result<Self> {
        if stride == 0 {
            return Err(PipelineError::Inference("stride must be positive".into()));
        }
        let axis = |extent: usize| -> Result<Vec<usize>> {
            let (lo, hi) = valid_center_range(extent, patch)
                .ok_or_else(|| PipelineError::Inference(format!("extent {extent} smaller than a {patch} px patch")))?;
            Ok((lo..=hi).step_by(stride).collect())
        };
        Ok(CenterGrid {
            rows: axis(height)?,
            cols: axis(width)?,
            stride,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len() * self.cols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Centres in row-major grid order.
    pub fn centers(&self) -> Vec<(usize, usize)> {
        self.rows.iter().flat_map(|&y| self.cols.iter().map(move |&x| (y, x))).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassMap {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub labels: Vec<u8>,
    /// Per-pixel class probabilities, pixel-major.
    pub probabilities: Vec<f32>,
}

/// Bracketing grid cells and the weight of the upper one for pixel `p`;
/// outside the grid hull the nearest cell wins.
fn bracket(axis: &[usize], p: usize) -> (usize, usize, f64) {
    let last = axis.len() - 1;
    if p <= axis[0] {
        return (0, 0, 0.0);
    }
    if p >= axis[last] {
        return (last, last, 0.0);
    }
    let i = axis.partition_point(|&c| c <= p) - 1;
    let t = (p - axis[i]) as f64 / (axis[i + 1] - axis[i]) as f64;
    (i, i + 1, t)
}

/// Bilinear interpolation of grid probabilities to every pixel, then argmax
/// (lowest class on ties).
pub fn upsample(grid: &CenterGrid, probs: &[f32], classes: usize, height: usize, width: usize) -> Result<ClassMap> {
    if probs.len() != grid.len() * classes || grid.is_empty() {
        return Err(PipelineError::Inference(format!(
            "{} probabilities for {} cells of {classes} classes",
            probs.len(),
            grid.len()
        )));
    }
    let gw = grid.cols.len();
    let col_w: Vec<_> = (0..width).map(|x| bracket(&grid.cols, x)).collect();
    let mut out = vec![0.0f32; height * width * classes];
    let mut labels = vec![0u8; height * width];
    let mut acc = vec![0.0f64; classes];
    for y in 0..height {
        let (r0, r1, ty) = bracket(&grid.rows, y);
        for (x, &(c0, c1, tx)) in col_w.iter().enumerate() {
            acc.fill(0.0);
            for (r, wy) in [(r0, 1.0 - ty), (r1, ty)] {
                for (c, wx) in [(c0, 1.0 - tx), (c1, tx)] {
                    let w = wy * wx;
                    if w == 0.0 {
                        continue;
                    }
                    let cell = &probs[(r * gw + c) * classes..][..classes];
                    for (a, &p) in acc.iter_mut().zip(cell) {
                        *a += w * p as f64;
                    }
                }
            }
            let pix = y * width + x;
            let mut best = 0;
            for (k, &a) in acc.iter().enumerate() {
                out[pix * classes + k] = a as f32;
                if a > acc[best] {
                    best = k;
                }
            }
            labels[pix] = best as u8;
        }
    }
    Ok(ClassMap {
        height,
        width,
        classes,
        labels,
        probabilities: out,
    })
}

/// Sliding-window inference: `classify` receives batches of at most `batch`
/// centres and returns their class probabilities, row-major.
pub fn infer_map(
    height: usize,
    width: usize,
    classes: usize,
    patch: usize,
    stride: usize,
    batch: usize,
    mut classify: impl FnMut(&[(usize, usize)]) -> std::result::Result<Vec<f32>, String>,
) -> Result<ClassMap> {
    let grid = CenterGrid::new(height, width, patch, stride)?;
    let centers = grid.centers();
    let mut probs = Vec::with_capacity(centers.len() * classes);
    for chunk in centers.chunks(batch.max(1)) {
        let p = classify(chunk).map_err(PipelineError::Inference)?;
        if p.len() != chunk.len() * classes {
            return Err(PipelineError::Inference(format!(
                "classifier returned {} values for {} centres",
                p.len(),
                chunk.len()
            )));
        }
        probs.extend(p);
    }
    upsample(&grid, &probs, classes, height, width)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// `confusion[truth][predicted]`.
    pub confusion: Vec<Vec<u64>>,
    pub overall_accuracy: f64,
    pub average_accuracy: f64,
    pub kappa: f64,
    /// Recall per class; `None` for classes absent from the truth.
    pub per_class: Vec<Option<f64>>,
}

impl Metrics {
    pub fn from_confusion(confusion: Vec<Vec<u64>>) -> Result<Self> {
        let c = confusion.len();
        if c == 0 || confusion.iter().any(|r| r.len() != c) {
            return Err(PipelineError::Metrics("confusion matrix must be square and non-empty".into()));
        }
        let total: u64 = confusion.iter().flatten().sum();
        if total == 0 {
            return Err(PipelineError::Metrics("no labelled pixels to evaluate".into()));
        }
        let n = total as f64;
        let trace: u64 = (0..c).map(|i| confusion[i][i]).sum();
        let overall_accuracy = trace as f64 / n;
        let rows: Vec<u64> = confusion.iter().map(|r| r.iter().sum()).collect();
        let cols: Vec<u64> = (0..c).map(|j| confusion.iter().map(|r| r[j]).sum()).collect();
        let per_class: Vec<Option<f64>> = (0..c)
            .map(|i| (rows[i] > 0).then(|| confusion[i][i] as f64 / rows[i] as f64))
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        if present.len() < c {
            log::warn!("{} classes absent from the truth are left out of AA", c - present.len());
        }
        let average_accuracy = present.iter().sum::<f64>() / present.len() as f64;
        let pe = (0..c).map(|i| rows[i] as f64 * cols[i] as f64).sum::<f64>() / (n * n);
        let kappa = if pe < 1.0 { (overall_accuracy - pe) / (1.0 - pe) } else { 1.0 };
        Ok(Metrics {
            confusion,
            overall_accuracy,
            average_accuracy,
            kappa,
            per_class,
        })
    }

    /// Plain-text report: per-class accuracy, then OA, AA and kappa.
    pub fn report(&self, title: &str) -> String {
        let mut s = format!("{title}\n");
        for (i, a) in self.per_class.iter().enumerate() {
            match a {
                Some(v) => s += &format!("  class {i:<3} {v:.4}\n"),
                None => s += &format!("  class {i:<3} -\n"),
            }
        }
        s += &format!("  OA        {:.4}\n", self.overall_accuracy);
        s += &format!("  AA        {:.4}\n", self.average_accuracy);
        s += &format!("  Kappa     {:.4}\n", self.kappa);
        s
    }
}

/// Compares a predicted map with the truth, skipping unlabelled pixels.
pub fn evaluate(predicted: &[u8], truth: &[u8], classes: usize) -> Result<Metrics> {
    if predicted.len() != truth.len() {
        return Err(PipelineError::Metrics(format!(
            "{} predictions for {} labels",
            predicted.len(),
            truth.len()
        )));
    }
    let mut confusion = vec![vec![0u64; classes]; classes];
    for (&p, &t) in predicted.iter().zip(truth) {
        if t == UNLABELED {
            continue;
        }
        let (t, p) = (t as usize, p as usize);
        if t >= classes || p >= classes {
            return Err(PipelineError::Metrics(format!("label {t} or prediction {p} outside {classes} classes")));
        }
        confusion[t][p] += 1;
    }
    Metrics::from_confusion(confusion)
}
