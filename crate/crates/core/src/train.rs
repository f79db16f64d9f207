//! Mini-batch Adam training with minimum-validation-loss model selection.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sarnn::loss::{argmax_rows, softmax_cross_entropy, softmax_cross_entropy_backward};
use sarnn::{Adam, Mode, Module, Scalar, Tensor};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::{FusionError, FusionModel};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training data: {0}")]
    Data(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize },
    #[error(transparent)]
    Model(#[from] FusionError),
    #[error(transparent)]
    Nn(#[from] sarnn::NnError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schedule {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Draw one of the stored variants of each sample per epoch.
    pub augment: bool,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            epochs: 150,
            batch: 100,
            lr: 1e-3,
            augment: true,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(TrainError::Data("batch size must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(TrainError::Data(format!("learning rate {} must be finite and non-negative", self.lr)));
        }
        Ok(())
    }
}

/// Samples with `variants` stored versions each (augmented copies), laid out
/// sample-major: row `i * variants + v`. Either feature block may be empty
/// when the model variant does not use it.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub patch_side: usize,
    pub statistical_dim: usize,
    pub variants: usize,
    pub patches: Vec<f32>,
    pub statistical: Vec<f32>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn has_patches(&self) -> bool {
        !self.patches.is_empty()
    }

    pub fn has_statistical(&self) -> bool {
        !self.statistical.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let rows = self.len() * self.variants.max(1);
        if self.variants == 0 {
            return Err(TrainError::Data("variants must be at least 1".into()));
        }
        if self.has_patches() && self.patches.len() != rows * self.patch_side * self.patch_side {
            return Err(TrainError::Data(format!(
                "{} patch values for {rows} rows of side {}",
                self.patches.len(),
                self.patch_side
            )));
        }
        if self.has_statistical() && self.statistical.len() != rows * self.statistical_dim {
            return Err(TrainError::Data(format!(
                "{} descriptor values for {rows} rows of width {}",
                self.statistical.len(),
                self.statistical_dim
            )));
        }
        Ok(())
    }

    /// Tensors for the given `(sample, variant)` rows.
    pub fn batch<T: Scalar>(&self, rows: &[(usize, usize)]) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>, Vec<usize>)> {
        let idx = |&(i, v): &(usize, usize)| i * self.variants + v;
        let patches = if self.has_patches() {
            let s = self.patch_side * self.patch_side;
            let mut data = Vec::with_capacity(rows.len() * s);
            for r in rows {
                let k = idx(r);
                data.extend(self.patches[k * s..(k + 1) * s].iter().map(|&x| T::lit(x as f64)));
            }
            Some(Tensor::new(vec![rows.len(), 1, self.patch_side, self.patch_side], data)?)
        } else {
            None
        };
        let statistical = if self.has_statistical() {
            let d = self.statistical_dim;
            let mut data = Vec::with_capacity(rows.len() * d);
            for r in rows {
                let k = idx(r);
                data.extend(self.statistical[k * d..(k + 1) * d].iter().map(|&x| T::lit(x as f64)));
            }
            Some(Tensor::new(vec![rows.len(), d], data)?)
        } else {
            None
        };
        Ok((patches, statistical, rows.iter().map(|&(i, _)| self.labels[i]).collect()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose weights were kept; `None` means the initial weights.
    pub best_epoch: Option<usize>,
}

impl History {
    pub fn best_val_loss(&self) -> Option<f64> {
        self.best_epoch.map(|e| self.epochs[e - 1].val_loss)
    }
}

/// Mean cross-entropy and accuracy over a dataset (first variant of each
/// sample), in eval mode.
pub fn evaluate_loss<T: Scalar>(model: &mut FusionModel<T>, data: &Dataset, batch: usize) -> Result<(f64, f64)> {
    let (mut loss, mut correct) = (0.0, 0usize);
    let rows: Vec<_> = (0..data.len()).map(|i| (i, 0)).collect();
    for chunk in rows.chunks(batch.max(1)) {
        let (p, s, labels) = data.batch::<T>(chunk)?;
        let logits = model.forward(p.as_ref(), s.as_ref(), Mode::Eval)?;
        let (l, _) = softmax_cross_entropy(&logits, &labels)?;
        loss += l * chunk.len() as f64;
        correct += argmax_rows(&logits)?.iter().zip(&labels).filter(|(a, b)| a == b).count();
    }
    let n = data.len().max(1) as f64;
    Ok((loss / n, correct as f64 / n))
}

type Snapshot<T> = (Vec<Tensor<T>>, Vec<Tensor<T>>);

fn snapshot<T: Scalar>(model: &FusionModel<T>) -> Snapshot<T> {
    (
        model.params().iter().map(|p| p.value.clone()).collect(),
        model.buffers().iter().map(|b| b.value.clone()).collect(),
    )
}

fn restore<T: Scalar>(model: &mut FusionModel<T>, snap: Snapshot<T>) {
    for (p, v) in model.params_mut().into_iter().zip(snap.0) {
        p.value = v;
    }
    for (b, v) in model.buffers_mut().into_iter().zip(snap.1) {
        b.value = v;
    }
}

/// Trains `model` in place and leaves it holding the weights with the lowest
/// validation loss. Batch order and augmentation variants derive from `seed`.
pub fn train<T: Scalar>(
    model: &mut FusionModel<T>,
    train_set: &Dataset,
    val_set: &Dataset,
    schedule: &Schedule,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<History> {
    schedule.validate()?;
    train_set.validate()?;
    val_set.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(TrainError::Data("train and validation sets must be non-empty".into()));
    }
    let optimizer = Adam::with_lr(schedule.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = History::default();
    let mut best: Option<(f64, Snapshot<T>)> = None;
    for epoch in 1..=schedule.epochs {
        order.shuffle(&mut rng);
        let rows: Vec<(usize, usize)> = order
            .iter()
            .map(|&i| {
                let v = if schedule.augment { rng.random_range(0..train_set.variants) } else { 0 };
                (i, v)
            })
            .collect();
        let mut total = 0.0;
        for (b, chunk) in rows.chunks(schedule.batch).enumerate() {
            let (p, s, labels) = train_set.batch::<T>(chunk)?;
            model.zero_grad();
            let logits = model.forward(p.as_ref(), s.as_ref(), Mode::Train)?;
            let (loss, probs) = softmax_cross_entropy(&logits, &labels)?;
            if !loss.is_finite() || !logits.all_finite() {
                return Err(TrainError::NonFinite { epoch, batch: b + 1 });
            }
            model.backward(&softmax_cross_entropy_backward(&probs, &labels)?)?;
            optimizer.step(&mut model.params_mut())?;
            total += loss * chunk.len() as f64;
        }
        let (val_loss, val_accuracy) = evaluate_loss(model, val_set, schedule.batch)?;
        if !val_loss.is_finite() {
            return Err(TrainError::NonFinite { epoch, batch: 0 });
        }
        let record = EpochRecord {
            epoch,
            train_loss: total / rows.len() as f64,
            val_loss,
            val_accuracy,
        };
        log::debug!(
            "epoch {epoch}: train {:.4} val {:.4} acc {:.4}",
            record.train_loss,
            val_loss,
            val_accuracy
        );
        on_epoch(&record);
        history.epochs.push(record);
        if best.as_ref().is_none_or(|(l, _)| val_loss < *l) {
            best = Some((val_loss, snapshot(model)));
            history.best_epoch = Some(epoch);
        }
    }
    if let Some((_, snap)) = best {
        restore(model, snap);
    }
    Ok(history)
}
