//! Named-tensor checkpoint with an embedded configuration snapshot.

use sarfusion::fusion::FusionModel;
use sarnn::{Module, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::formats::{put_f32s, put_u32, Reader};

pub const MAGIC: &[u8; 4] = b"FNET";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    /// Effective configuration, overrides applied.
    pub config: RunConfig,
    pub epochs_run: usize,
    pub best_epoch: Option<usize>,
    pub best_val_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<NamedTensor>,
    pub meta: CheckpointMeta,
}

fn invalid(m: impl Into<String>) -> CliError {
    CliError::Validation(format!("checkpoint: {}", m.into()))
}

/// Builds the model a configuration describes, with fresh weights.
pub fn build_model(config: &RunConfig) -> Result<FusionModel<f32>> {
    Ok(FusionModel::new(config.stream, &config.dscen_spec(), config.fusion_spec(), config.seed)?)
}

impl Checkpoint {
    /// Parameters, then buffers, in module order.
    pub fn capture(model: &FusionModel<f32>, meta: CheckpointMeta) -> Self {
        let params = model.params().into_iter().map(|p| (&p.name, &p.value));
        let buffers = model.buffers().into_iter().map(|b| (&b.name, &b.value));
        let tensors = params
            .chain(buffers)
            .map(|(name, t)| NamedTensor {
                name: name.clone(),
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            })
            .collect();
        Checkpoint { tensors, meta }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_u32(&mut out, self.tensors.len())?;
        for t in &self.tensors {
            let name = t.name.as_bytes();
            let len = u16::try_from(name.len()).map_err(|_| invalid(format!("tensor name {} too long", t.name)))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name);
            let rank = u8::try_from(t.shape.len()).map_err(|_| invalid(format!("{} has rank {}", t.name, t.shape.len())))?;
            out.push(rank);
            for &d in &t.shape {
                put_u32(&mut out, d)?;
            }
            if t.data.len() != t.shape.iter().product::<usize>() {
                return Err(invalid(format!("{}: payload does not match shape {:?}", t.name, t.shape)));
            }
            put_f32s(&mut out, &t.data);
        }
        let json = serde_json::to_vec(&self.meta).map_err(|e| invalid(e.to_string()))?;
        put_u32(&mut out, json.len())?;
        out.extend_from_slice(&json);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "checkpoint");
        r.magic(MAGIC)?;
        let version = r.u32()?;
        if version != VERSION {
            return Err(invalid(format!("version {version}, expected {VERSION}")));
        }
        let count = r.dim()?;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|e| invalid(format!("tensor name: {e}")))?
                .to_string();
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.dim()).collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| invalid(format!("{name}: shape overflows")))?;
            let data = r.f32s(n)?;
            tensors.push(NamedTensor { name, shape, data });
        }
        let len = r.dim()?;
        let meta = serde_json::from_slice(r.take(len)?).map_err(|e| invalid(format!("config snapshot: {e}")))?;
        r.finish()?;
        Ok(Checkpoint { tensors, meta })
    }

    /// Rebuilds the model from the snapshot and loads every tensor, refusing
    /// any name, count or shape mismatch.
    pub fn restore(&self) -> Result<FusionModel<f32>> {
        self.meta.config.validate()?;
        let mut model = build_model(&self.meta.config)?;
        let expected = model.params().len() + model.buffers().len();
        if expected != self.tensors.len() {
            return Err(invalid(format!(
                "{} tensors stored, the configured model has {expected}",
                self.tensors.len()
            )));
        }
        let mut stored = self.tensors.iter();
        let mut load = |name: &str, value: &mut Tensor<f32>| -> Result<()> {
            let t = stored.next().expect("count checked");
            if t.name != name || t.shape != value.shape() {
                return Err(invalid(format!(
                    "stored {} {:?} does not match model {name} {:?}",
                    t.name,
                    t.shape,
                    value.shape()
                )));
            }
            value.data_mut().copy_from_slice(&t.data);
            Ok(())
        };
        for p in model.params_mut() {
            load(&p.name, &mut p.value)?;
        }
        for b in model.buffers_mut() {
            load(&b.name, &mut b.value)?;
        }
        Ok(model)
    }
}
