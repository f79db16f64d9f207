//! Run configuration: one flat JSON object covering every knob.

use std::path::Path;

use sarfusion::dscen::{BlockKind, DscenSpec};
use sarfusion::fusion::{Activation, FusionSpec, Stream};
use sarfusion::gabor::GaborBankSpec;
use sarfusion::nsjsm::NsjsmSpec;
use sarfusion::pipeline::{ClassSpec, SynthSpec};
use sarfusion::stats::DistributionKind;
use sarfusion::train::Schedule;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub stream: Stream,

    pub scene_side: usize,
    pub scatterers: usize,
    pub boundary_band: usize,
    pub classes: Vec<ClassSpec>,

    pub patch: usize,
    pub per_class: usize,
    pub train_frac: f64,
    pub augment: bool,

    pub widths: Vec<usize>,
    pub msgc_groups: usize,
    pub dilation: usize,
    pub dropout: f64,
    pub attention: bool,
    pub reduction: usize,
    pub block: BlockKind,

    pub gabor_scales: usize,
    pub gabor_directions: usize,
    pub gabor_kernel_side: usize,
    pub gabor_k_max: f64,
    pub gabor_spacing: f64,
    pub gabor_sigma: f64,
    pub magnitude_model: DistributionKind,
    pub use_phase: bool,

    pub hidden: usize,
    pub fusion_groups: usize,
    pub activation: Activation,

    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,

    pub stride: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SynthSpec::default();
        let dscen = DscenSpec::default();
        let nsjsm = NsjsmSpec::default();
        let fusion = FusionSpec::default();
        let schedule = Schedule::default();
        RunConfig {
            seed: 1,
            stream: Stream::Fusion,
            scene_side: synth.side,
            scatterers: synth.scatterers,
            boundary_band: synth.boundary_band,
            classes: synth.classes,
            patch: dscen.patch,
            per_class: 300,
            train_frac: 0.7,
            augment: schedule.augment,
            widths: dscen.widths,
            msgc_groups: dscen.groups,
            dilation: dscen.dilation,
            dropout: dscen.dropout,
            attention: dscen.attention,
            reduction: dscen.reduction,
            block: dscen.block,
            gabor_scales: nsjsm.bank.scales,
            gabor_directions: nsjsm.bank.directions,
            gabor_kernel_side: nsjsm.bank.kernel_side,
            gabor_k_max: nsjsm.bank.k_max,
            gabor_spacing: nsjsm.bank.spacing,
            gabor_sigma: nsjsm.bank.sigma,
            magnitude_model: nsjsm.magnitude_model,
            use_phase: nsjsm.use_phase,
            hidden: fusion.hidden,
            fusion_groups: fusion.groups,
            activation: fusion.activation,
            epochs: schedule.epochs,
            batch: schedule.batch,
            lr: schedule.lr,
            stride: 5,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Defaults when no file is given.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::load(p),
            None => {
                let cfg = RunConfig::default();
                cfg.validate()?;
                Ok(cfg)
            }
        }
    }

    pub fn class_count(&self) -> usize {
        self.classes.len()
    }

    pub fn synth_spec(&self, seed: u64) -> SynthSpec {
        SynthSpec {
            classes: self.classes.clone(),
            side: self.scene_side,
            scatterers: self.scatterers,
            boundary_band: self.boundary_band,
            seed,
        }
    }

    pub fn dscen_spec(&self) -> DscenSpec {
        DscenSpec {
            widths: self.widths.clone(),
            groups: self.msgc_groups,
            dilation: self.dilation,
            dropout: self.dropout,
            patch: self.patch,
            reduction: self.reduction,
            attention: self.attention,
            block: self.block,
        }
    }

    pub fn nsjsm_spec(&self) -> NsjsmSpec {
        NsjsmSpec {
            bank: GaborBankSpec {
                scales: self.gabor_scales,
                directions: self.gabor_directions,
                kernel_side: self.gabor_kernel_side,
                k_max: self.gabor_k_max,
                spacing: self.gabor_spacing,
                sigma: self.gabor_sigma,
            },
            magnitude_model: self.magnitude_model,
            use_phase: self.use_phase,
        }
    }

    pub fn fusion_spec(&self) -> FusionSpec {
        let dscen = self.dscen_spec();
        FusionSpec {
            spatial_dim: dscen.output_len(),
            statistical_dim: self.nsjsm_spec().feature_len(),
            hidden: self.hidden,
            groups: self.fusion_groups,
            classes: self.class_count(),
            activation: self.activation,
        }
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            epochs: self.epochs,
            batch: self.batch,
            lr: self.lr,
            augment: self.augment,
        }
    }

    /// Checks every module invariant before any work starts.
    pub fn validate(&self) -> Result<()> {
        let v = |m: String| CliError::Validation(m);
        self.synth_spec(self.seed).validate(self.patch).map_err(|e| v(e.to_string()))?;
        self.dscen_spec().validate().map_err(|e| v(format!("dscen: {e}")))?;
        let nsjsm = self.nsjsm_spec();
        nsjsm.bank.validate().map_err(|e| v(format!("gabor: {e}")))?;
        if nsjsm.magnitude_model == DistributionKind::UniformPhase {
            return Err(v("nsjsm: magnitude model must be a magnitude distribution".into()));
        }
        self.fusion_spec().validate_for(self.stream).map_err(|e| v(e.to_string()))?;
        self.schedule().validate().map_err(|e| v(format!("schedule: {e}")))?;
        if self.per_class == 0 {
            return Err(v("sampling: per_class must be positive".into()));
        }
        if !(self.train_frac > 0.0 && self.train_frac < 1.0) {
            return Err(v(format!("sampling: train_frac {} outside (0, 1)", self.train_frac)));
        }
        if self.stride == 0 {
            return Err(v("inference: stride must be positive".into()));
        }
        Ok(())
    }
}
