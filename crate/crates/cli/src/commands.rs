//! The subcommands, callable without the argument parser.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sarfusion::dscen::{self, BlockKind};
use sarfusion::fusion::FusionModel;
use sarfusion::gradsuite;
use sarfusion::nsjsm::Extractor;
use sarfusion::pipeline::{self, CenterGrid, ClassMap, Metrics, Sample, Split};
use sarfusion::train::{self, Dataset, History};
use sarfusion::workflow::{self, ImageView, Inputs};
use sarnn::gradcheck::TOLERANCE;
use sarnn::Module;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{build_model, Checkpoint, CheckpointMeta};
use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::formats::{self, Descriptors, Image, Labels};

/// `prefix` with `suffix` appended to the file name.
pub fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Scene amplitude scaled to `[0, 1]`.
pub fn normalized(image: &Image) -> Vec<f32> {
    let (data, constant) = pipeline::normalize(&image.data);
    if constant {
        log::warn!("image is constant; every pixel normalized to 0.5");
    }
    data
}

pub fn view<'a>(data: &'a [f32], image: &Image) -> ImageView<'a> {
    ImageView {
        data,
        height: image.height,
        width: image.width,
    }
}

pub fn extractor(config: &RunConfig) -> Result<Extractor> {
    Ok(Extractor::new(config.nsjsm_spec(), config.patch)?)
}

/// Writes `<prefix>.sarf` and `<prefix>.sarl`.
pub fn cmd_synth(config: &RunConfig, seed: u64, out: &Path) -> Result<(PathBuf, PathBuf)> {
    let scene = pipeline::synth_scene(&config.synth_spec(seed), config.patch)?;
    let image = Image {
        height: scene.height,
        width: scene.width,
        data: scene.image,
    };
    let labels = Labels {
        height: scene.height,
        width: scene.width,
        data: scene.labels,
    };
    let (ip, lp) = (with_suffix(out, ".sarf"), with_suffix(out, ".sarl"));
    formats::write_atomic(&ip, &image.encode()?)?;
    formats::write_atomic(&lp, &labels.encode()?)?;
    Ok((ip, lp))
}

/// Sample list written next to the descriptor batches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleFile {
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub seed: u64,
    /// Training descriptors hold the eight square symmetries of each patch.
    pub augment: bool,
    pub samples: Vec<Sample>,
}

impl SampleFile {
    pub fn of(&self, split: Split) -> Vec<Sample> {
        self.samples.iter().filter(|s| s.split == split).copied().collect()
    }

    pub fn load(prefix: &Path) -> Result<Self> {
        let path = with_suffix(prefix, ".samples.json");
        serde_json::from_slice(&formats::read(&path)?)
            .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
    }
}

fn check_geometry(image: &Image, labels: &Labels) -> Result<()> {
    if (image.height, image.width) != (labels.height, labels.width) {
        return Err(CliError::Validation(format!(
            "image is {}x{} but labels are {}x{}",
            image.height, image.width, labels.height, labels.width
        )));
    }
    Ok(())
}

/// Samples training and validation centres, then writes
/// `<prefix>.samples.json`, `<prefix>.train.nsjs` and `<prefix>.val.nsjs`.
pub fn cmd_extract(config: &RunConfig, seed: u64, image: &Image, labels: &Labels, out: &Path) -> Result<SampleFile> {
    check_geometry(image, labels)?;
    let scene = pipeline::LabeledScene {
        height: image.height,
        width: image.width,
        classes: config.class_count(),
        image: image.data.clone(),
        labels: labels.data.clone(),
    };
    let set = pipeline::sample_patches(&scene, config.per_class, config.train_frac, config.patch, seed)?;
    let file = SampleFile {
        height: image.height,
        width: image.width,
        patch: config.patch,
        seed,
        augment: config.augment,
        samples: set.samples,
    };
    let data = normalized(image);
    let ex = extractor(config)?;
    let inputs = Inputs {
        patches: false,
        extractor: Some(&ex),
    };
    for (split, augment, suffix) in [(Split::Train, config.augment, ".train.nsjs"), (Split::Val, false, ".val.nsjs")] {
        let set = workflow::build_dataset(view(&data, image), &file.of(split), config.patch, augment, inputs)?;
        let d = Descriptors {
            count: set.len() * set.variants,
            dim: ex.feature_len(),
            data: set.statistical,
        };
        formats::write_atomic(&with_suffix(out, suffix), &d.encode()?)?;
    }
    let json = serde_json::to_vec_pretty(&file).map_err(|e| CliError::Validation(e.to_string()))?;
    formats::write_atomic(&with_suffix(out, ".samples.json"), &json)?;
    Ok(file)
}

/// Descriptors of every stride-grid centre, for reuse by eval and map.
pub fn cmd_extract_grid(config: &RunConfig, stride: usize, image: &Image, out: &Path) -> Result<Descriptors> {
    let grid = CenterGrid::new(image.height, image.width, config.patch, stride)?;
    let data = normalized(image);
    let ex = extractor(config)?;
    let d = Descriptors {
        count: grid.len(),
        dim: ex.feature_len(),
        data: workflow::grid_descriptors(view(&data, image), &grid, config.patch, &ex)?,
    };
    formats::write_atomic(&with_suffix(out, ".grid.nsjs"), &d.encode()?)?;
    Ok(d)
}

/// Training and validation sets from an image, its samples and their
/// precomputed descriptors.
pub fn load_datasets(config: &RunConfig, image: &Image, prefix: &Path) -> Result<(Dataset, Dataset)> {
    let file = SampleFile::load(prefix)?;
    if (file.height, file.width, file.patch) != (image.height, image.width, config.patch) {
        return Err(CliError::Validation(format!(
            "samples were drawn for a {}x{} image with {} px patches",
            file.height, file.width, file.patch
        )));
    }
    if file.augment != config.augment {
        return Err(CliError::Validation(format!(
            "samples were extracted with augment = {}, config says {}",
            file.augment, config.augment
        )));
    }
    let data = normalized(image);
    let inputs = Inputs {
        patches: config.stream.uses_spatial(),
        extractor: None,
    };
    let mut out = Vec::new();
    for (split, augment, suffix) in [(Split::Train, config.augment, ".train.nsjs"), (Split::Val, false, ".val.nsjs")] {
        let samples = file.of(split);
        let mut set = workflow::build_dataset(view(&data, image), &samples, config.patch, augment, inputs)?;
        if config.stream.uses_statistical() {
            let d = formats::read_descriptors(&with_suffix(prefix, suffix))?;
            let dim = config.nsjsm_spec().feature_len();
            if d.dim != dim || d.count != set.len() * set.variants {
                return Err(CliError::Validation(format!(
                    "{}: {} descriptors of width {}, expected {} of width {dim}",
                    suffix,
                    d.count,
                    d.dim,
                    set.len() * set.variants
                )));
            }
            set.statistical_dim = dim;
            set.statistical = d.data;
        }
        out.push(set);
    }
    let val = out.pop().expect("two splits");
    let train = out.pop().expect("two splits");
    Ok((train, val))
}

pub struct Trained {
    pub model: FusionModel<f32>,
    pub history: History,
    pub checkpoint: Checkpoint,
}

/// Trains the configured variant from scratch; weights, dropout and batch
/// order all derive from `config.seed`.
pub fn train_model(config: &RunConfig, train_set: &Dataset, val_set: &Dataset) -> Result<Trained> {
    config.validate()?;
    let mut model = build_model(config)?;
    let history = train::train(&mut model, train_set, val_set, &config.schedule(), config.seed, |r| {
        log::info!(
            "epoch {:>3}  train {:.4}  val {:.4}  val OA {:.4}",
            r.epoch,
            r.train_loss,
            r.val_loss,
            r.val_accuracy
        )
    })?;
    let meta = CheckpointMeta {
        config: config.clone(),
        epochs_run: history.epochs.len(),
        best_epoch: history.best_epoch,
        best_val_loss: history.best_val_loss(),
    };
    let checkpoint = Checkpoint::capture(&model, meta);
    Ok(Trained {
        model,
        history,
        checkpoint,
    })
}

/// Writes the checkpoint to `out` and the per-epoch history to
/// `<out>.history.json`.
pub fn cmd_train(config: &RunConfig, image: &Image, samples: &Path, out: &Path) -> Result<Trained> {
    let (train_set, val_set) = load_datasets(config, image, samples)?;
    let trained = train_model(config, &train_set, &val_set)?;
    formats::write_atomic(out, &trained.checkpoint.encode()?)?;
    let history = serde_json::to_vec_pretty(&trained.history).map_err(|e| CliError::Validation(e.to_string()))?;
    formats::write_atomic(&with_suffix(out, ".history.json"), &history)?;
    Ok(trained)
}

pub fn load_checkpoint(path: &Path) -> Result<(FusionModel<f32>, CheckpointMeta)> {
    let ck = Checkpoint::decode(&formats::read(path)?)?;
    Ok((ck.restore()?, ck.meta))
}

/// Whole-image class map of a trained model.
pub fn classify(
    model: &mut FusionModel<f32>,
    config: &RunConfig,
    image: &Image,
    stride: usize,
    grid_descriptors: Option<&Descriptors>,
) -> Result<ClassMap> {
    let data = normalized(image);
    let ex = if model.stream.uses_statistical() && grid_descriptors.is_none() {
        Some(extractor(config)?)
    } else {
        None
    };
    Ok(workflow::classify_scene(
        model,
        view(&data, image),
        config.patch,
        stride,
        config.batch,
        grid_descriptors.map(|d| d.data.as_slice()),
        ex.as_ref(),
    )?)
}

pub fn cmd_eval(
    model: &mut FusionModel<f32>,
    config: &RunConfig,
    image: &Image,
    labels: &Labels,
    stride: usize,
    grid_descriptors: Option<&Descriptors>,
) -> Result<Metrics> {
    check_geometry(image, labels)?;
    let map = classify(model, config, image, stride, grid_descriptors)?;
    Ok(pipeline::evaluate(&map.labels, &labels.data, config.class_count())?)
}

/// Writes `<prefix>.ppm` and `<prefix>.sarl`.
pub fn cmd_map(
    model: &mut FusionModel<f32>,
    config: &RunConfig,
    image: &Image,
    stride: usize,
    grid_descriptors: Option<&Descriptors>,
    out: &Path,
) -> Result<Labels> {
    let map = classify(model, config, image, stride, grid_descriptors)?;
    let labels = Labels {
        height: map.height,
        width: map.width,
        data: map.labels,
    };
    formats::write_atomic(&with_suffix(out, ".ppm"), &formats::class_map_ppm(&labels))?;
    formats::write_atomic(&with_suffix(out, ".sarl"), &labels.encode()?)?;
    Ok(labels)
}

pub struct GradcheckOutcome {
    pub table: String,
    pub passed: bool,
}

pub fn cmd_gradcheck() -> Result<GradcheckOutcome> {
    let cases = gradsuite::full_suite().map_err(|e| CliError::Numeric(format!("gradcheck: {e}")))?;
    let mut table = format!("{:<28} {:>12} {:>8}  result\n", "case", "max rel err", "checked");
    let mut passed = true;
    for (name, r) in &cases {
        let ok = r.passes(TOLERANCE);
        passed &= ok;
        let _ = writeln!(
            table,
            "{name:<28} {:>12.3e} {:>8}  {}",
            r.max_rel_err,
            r.checked,
            if ok { "pass" } else { "FAIL" }
        );
    }
    let _ = writeln!(
        table,
        "{} of {} cases within {TOLERANCE:e}",
        cases.iter().filter(|(_, r)| r.passes(TOLERANCE)).count(),
        cases.len()
    );
    Ok(GradcheckOutcome { table, passed })
}

/// Parameter counts grouped by module, e.g. `dscen.block1` or `head.fuse`.
pub fn parameter_groups(model: &FusionModel<f32>) -> Vec<(String, usize)> {
    let mut groups: Vec<(String, usize)> = Vec::new();
    for p in model.params() {
        let key: String = p.name.split('.').take(2).collect::<Vec<_>>().join(".");
        match groups.last_mut() {
            Some((k, n)) if *k == key => *n += p.len(),
            _ => groups.push((key, p.len())),
        }
    }
    groups
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderComparison {
    pub msgc: usize,
    pub standard: usize,
}

impl EncoderComparison {
    pub fn of(config: &RunConfig) -> Self {
        let mut spec = config.dscen_spec();
        spec.block = BlockKind::Msgc;
        let msgc = dscen::parameter_count(&spec);
        spec.block = BlockKind::Standard;
        EncoderComparison {
            msgc,
            standard: dscen::parameter_count(&spec),
        }
    }

    pub fn ratio(&self) -> f64 {
        self.msgc as f64 / self.standard as f64
    }
}

/// Per-module parameter counts of the model, then the encoder compared with
/// a same-depth network of plain two-convolution blocks.
pub fn cmd_inspect(model: &FusionModel<f32>, config: &RunConfig) -> String {
    let mut s = format!("stream {}\n", model.stream);
    for (name, n) in parameter_groups(model) {
        let _ = writeln!(s, "  {name:<24} {n:>10}");
    }
    let _ = writeln!(s, "  {:<24} {:>10}", "total", model.param_count());
    let cmp = EncoderComparison::of(config);
    let _ = writeln!(s, "encoder with msgc blocks      {:>10}", cmp.msgc);
    let _ = writeln!(s, "encoder with standard blocks  {:>10}", cmp.standard);
    let _ = writeln!(s, "msgc / standard               {:>10.4}", cmp.ratio());
    s
}
