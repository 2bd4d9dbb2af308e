//! RMSprop training with a two-phase freeze schedule.

pub mod checkpoint;
pub mod freeze;
pub mod optimizer;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::LOG_CLAMP;
use crate::data::{augment, load_preprocessed, make_batches, AugmentParams, ImageGrid, Manifest, SeriesSample, Split};
use crate::error::{Error, Result};
use crate::eval::{self, SlicePrediction};
use crate::model::Model;
use crate::tensor::Tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
pub use freeze::{apply_freeze_mask, Phase};
pub use optimizer::{rmsprop_step, RmsProp};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointCriterion {
    MinValLoss,
    MaxValMacroF1,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub rmsprop_rho: f64,
    pub rmsprop_eps: f64,
    /// Phase-2 cutoff: layers with index below it stay frozen. `None`
    /// resolves to half the layer count.
    pub freeze_boundary: Option<usize>,
    pub phase1_epochs: usize,
    pub checkpoint_criterion: CheckpointCriterion,
    pub augment: AugmentParams,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            lr: 1e-4,
            rmsprop_rho: 0.9,
            rmsprop_eps: 1e-7,
            freeze_boundary: None,
            phase1_epochs: 5,
            checkpoint_criterion: CheckpointCriterion::MinValLoss,
            augment: AugmentParams::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.rmsprop_rho) || !(self.rmsprop_eps >= 0.0) {
            return Err(Error::config("rmsprop rho must lie in [0, 1) and eps must be non-negative"));
        }
        self.augment.validate()
    }

    pub fn resolved_boundary(&self, layer_count: usize) -> Result<usize> {
        let k = self.freeze_boundary.unwrap_or(layer_count / 2);
        if k > layer_count {
            return Err(Error::config(format!(
                "freeze boundary {k} exceeds the model's {layer_count} layers"
            )));
        }
        Ok(k)
    }

    pub fn phase_of(&self, epoch: usize) -> Phase {
        if epoch < self.phase1_epochs {
            Phase::HeadOnly
        } else {
            Phase::FineTune
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: u8,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub val_macro_f1: f64,
    /// Excluded from serialized reports so they stay reproducible.
    #[serde(skip)]
    pub wall_time_secs: f64,
}

/// Index of the best epoch; ties go to the earliest.
pub fn select_best_checkpoint(records: &[EpochRecord], criterion: CheckpointCriterion) -> Result<usize> {
    if records.is_empty() {
        return Err(Error::Data("no epoch records to select from".into()));
    }
    let mut best = 0;
    for (i, r) in records.iter().enumerate().skip(1) {
        let better = match criterion {
            CheckpointCriterion::MinValLoss => r.val_loss < records[best].val_loss,
            CheckpointCriterion::MaxValMacroF1 => r.val_macro_f1 > records[best].val_macro_f1,
        };
        if better {
            best = i;
        }
    }
    Ok(best)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub records: Vec<EpochRecord>,
    pub criterion: CheckpointCriterion,
    pub best_epoch: usize,
    pub best_checkpoint: Option<PathBuf>,
}

pub struct TrainOutcome {
    pub records: Vec<EpochRecord>,
    pub checkpoints: Vec<PathBuf>,
    pub best_epoch: usize,
}

fn epoch_seed(seed: u64, epoch: usize, stream: u64) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03)
}

fn stack(images: &[&ImageGrid], size: [usize; 2]) -> Result<Tensor<f32>> {
    let mut data = Vec::with_capacity(images.len() * size[0] * size[1]);
    for img in images {
        data.extend_from_slice(&img.data);
    }
    Tensor::new(vec![images.len(), 1, size[0], size[1]], data)
}

fn preload(samples: &[SeriesSample], size: [usize; 2], cache: &mut BTreeMap<PathBuf, ImageGrid>) -> Result<()> {
    for p in samples.iter().flat_map(|s| &s.slice_paths) {
        if !cache.contains_key(p) {
            cache.insert(p.clone(), load_preprocessed(p, size)?);
        }
    }
    Ok(())
}

struct Validation {
    loss: f64,
    accuracy: f64,
    macro_f1: f64,
}

fn validate(
    model: &Model<f32>,
    val: &[SeriesSample],
    images: &BTreeMap<PathBuf, ImageGrid>,
    batch_size: usize,
    num_classes: usize,
) -> Result<Validation> {
    let batches = make_batches(val, batch_size, false, 0)?;
    let mut slices = Vec::new();
    let mut loss_sum = 0.0;
    let mut count = 0usize;
    let mut truth = BTreeMap::new();
    for batch in &batches {
        let imgs: Vec<&ImageGrid> = batch.iter().map(|it| &images[&it.path]).collect();
        let probs = eval::predict_probs(model, &imgs)?;
        for (item, p) in batch.iter().zip(probs) {
            loss_sum -= p[item.label].max(LOG_CLAMP).ln();
            count += 1;
            truth.insert(item.series_id.clone(), item.label);
            slices.push(SlicePrediction {
                series_id: item.series_id.clone(),
                slice_path: item.path.clone(),
                probs: p,
            });
        }
    }
    let series = eval::aggregate_all(&slices)?;
    let report = eval::evaluate(&series, &truth, num_classes)?;
    Ok(Validation {
        loss: loss_sum / count as f64,
        accuracy: report.accuracy,
        macro_f1: report.macro_f1,
    })
}

/// Runs the full schedule. With an output directory, writes
/// `checkpoints/epoch_NNN.rdnc` per epoch, `best.rdnc`, and `metrics.json`.
pub fn train(model: &mut Model<f32>, manifest: &Manifest, config: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    config.validate()?;
    let num_classes = model.config().num_classes;
    if manifest.num_classes() != num_classes {
        return Err(Error::config(format!(
            "manifest has {} classes, model predicts {num_classes}",
            manifest.num_classes()
        )));
    }
    let train_set = manifest.split(Split::Train)?;
    let val_set = manifest.split(Split::Val)?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Data("training needs non-empty train and val splits".into()));
    }
    let size = model.config().input_size;
    let mut images = BTreeMap::new();
    preload(&train_set, size, &mut images)?;
    preload(&val_set, size, &mut images)?;

    let boundary = config.resolved_boundary(model.num_layers())?;
    let mut optimizer = RmsProp::new(model.layers(), config.lr, config.rmsprop_rho, config.rmsprop_eps);
    let ckpt_dir = out_dir.map(|d| d.join("checkpoints"));
    if let Some(dir) = &ckpt_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let mut records = Vec::with_capacity(config.epochs);
    let mut checkpoints = Vec::new();
    for epoch in 0..config.epochs {
        let started = Instant::now();
        let phase = config.phase_of(epoch);
        apply_freeze_mask(model, phase, boundary)?;

        let batches = make_batches(&train_set, config.batch_size, true, epoch_seed(config.seed, epoch, 1))?;
        let mut aug_rng = ChaCha8Rng::seed_from_u64(epoch_seed(config.seed, epoch, 2));
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for (bi, batch) in batches.iter().enumerate() {
            let augmented = batch
                .iter()
                .map(|it| augment(&images[&it.path], &mut aug_rng, &config.augment))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&ImageGrid> = augmented.iter().collect();
            let labels: Vec<usize> = batch.iter().map(|it| it.label).collect();

            let mut pass = model.forward_train(stack(&refs, size)?)?;
            let loss = pass.graph.sparse_categorical_cross_entropy(pass.logits, &labels)?;
            let value = f64::from(pass.graph.value(loss).data()[0]);
            if !value.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss at epoch {epoch}, batch {bi}")));
            }
            pass.graph.backward(loss)?;
            let grads: Vec<Vec<Option<Vec<f32>>>> = (0..model.num_layers())
                .map(|l| pass.layer_grads(l).into_iter().map(|g| g.map(<[f32]>::to_vec)).collect())
                .collect();
            optimizer
                .step(model, &grads)
                .map_err(|e| Error::Numeric(format!("epoch {epoch}, batch {bi}: {e}")))?;
            loss_sum += value * batch.len() as f64;
            seen += batch.len();
        }

        let v = validate(model, &val_set, &images, config.batch_size, num_classes)?;
        let record = EpochRecord {
            epoch,
            phase: phase as u8,
            train_loss: loss_sum / seen as f64,
            val_loss: v.loss,
            val_accuracy: v.accuracy,
            val_macro_f1: v.macro_f1,
            wall_time_secs: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch} phase {} train_loss {:.6} val_loss {:.6} val_acc {:.4} val_macro_f1 {:.4} ({:.1}s)",
            record.phase,
            record.train_loss,
            record.val_loss,
            record.val_accuracy,
            record.val_macro_f1,
            record.wall_time_secs
        );
        records.push(record);

        if let Some(dir) = &ckpt_dir {
            let path = dir.join(format!("epoch_{epoch:03}.rdnc"));
            let meta = CheckpointMeta {
                epoch: Some(epoch),
                phase: Some(phase as u8),
                class_names: manifest.class_names.clone(),
                train_config: Some(config.clone()),
            };
            save_checkpoint(model, Some(&optimizer), &meta, &path)?;
            checkpoints.push(path);
        }
    }

    let best_epoch = select_best_checkpoint(&records, config.checkpoint_criterion)?;
    if let Some(dir) = out_dir {
        let best_rel = PathBuf::from("checkpoints").join(format!("epoch_{best_epoch:03}.rdnc"));
        fs::copy(dir.join(&best_rel), dir.join("best.rdnc")).map_err(|e| Error::io(dir.join("best.rdnc"), e))?;
        let metrics = MetricsFile {
            records: records.clone(),
            criterion: config.checkpoint_criterion,
            best_epoch,
            best_checkpoint: Some(best_rel),
        };
        eval::write_json(&metrics, &dir.join("metrics.json"))?;
    }
    Ok(TrainOutcome {
        records,
        checkpoints,
        best_epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(val_loss: f64, f1: f64) -> EpochRecord {
        EpochRecord {
            epoch: 0,
            phase: 1,
            train_loss: 0.0,
            val_loss,
            val_accuracy: 0.0,
            val_macro_f1: f1,
            wall_time_secs: 0.0,
        }
    }

    #[test]
    fn best_checkpoint_selection() {
        let losses = [rec(0.9, 0.0), rec(0.5, 0.0), rec(0.7, 0.0)];
        assert_eq!(select_best_checkpoint(&losses, CheckpointCriterion::MinValLoss).unwrap(), 1);
        let tie = [rec(0.5, 0.0), rec(0.5, 0.0)];
        assert_eq!(select_best_checkpoint(&tie, CheckpointCriterion::MinValLoss).unwrap(), 0);
        let f1 = [rec(0.0, 0.6), rec(0.0, 0.9), rec(0.0, 0.9)];
        assert_eq!(select_best_checkpoint(&f1, CheckpointCriterion::MaxValMacroF1).unwrap(), 1);
        assert!(select_best_checkpoint(&[], CheckpointCriterion::MinValLoss).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let zero = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        assert!(matches!(zero.validate(), Err(Error::Config(_))));
        let bad_lr = TrainConfig {
            lr: 0.0,
            ..Default::default()
        };
        assert!(bad_lr.validate().is_err());
        assert_eq!(TrainConfig::default().resolved_boundary(20).unwrap(), 10);
        let k = TrainConfig {
            freeze_boundary: Some(21),
            ..Default::default()
        };
        assert!(k.resolved_boundary(20).is_err());
    }

    #[test]
    fn wall_time_is_not_serialized() {
        let json = serde_json::to_string(&rec(0.1, 0.2)).unwrap();
        assert!(!json.contains("wall_time"));
    }
}
