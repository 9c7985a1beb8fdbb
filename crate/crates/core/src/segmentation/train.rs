use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use voxgrad::{Adam, AdamConfig, Tensor, Var};

use super::augment::{augment, AugmentationPolicy};
use super::loss::{dice_ce_loss, mean_dice, DiceCeWeights};
use super::model::{SegLogits, SegModelConfig, SegNet};
use crate::checkpoint::{write_csv, Archive, RunControl};
use crate::error::{Error, Result};
use crate::nn::stack_contrasts;
use crate::rng::{derive_seed, stream};
use crate::volume::{Subject, CSF, GM, WM};

pub const FOREGROUND_CLASSES: [usize; 5] = [1, 2, 3, 4, 5];
pub const BRAIN_CLASSES: [usize; 3] = [CSF, GM, WM];

const STEM: &str = "segmentation";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegSchedule {
    /// Phase 1 epochs, with augmentation.
    pub epochs_augmented: usize,
    /// Phase 2 epochs, augmentation off.
    pub epochs_plain: usize,
    pub lr: f64,
    pub beta1: f64,
    pub loss_weights: DiceCeWeights,
    pub augmentation: AugmentationPolicy,
    /// Validate every this many epochs (the first and last epochs always are).
    pub val_every: usize,
    pub seed: u64,
}

impl Default for SegSchedule {
    fn default() -> Self {
        Self {
            epochs_augmented: 20,
            epochs_plain: 5,
            lr: 2e-3,
            beta1: 0.9,
            loss_weights: DiceCeWeights::default(),
            augmentation: AugmentationPolicy::default(),
            val_every: 1,
            seed: 0,
        }
    }
}

impl SegSchedule {
    pub fn total_epochs(&self) -> usize {
        self.epochs_augmented + self.epochs_plain
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_epochs() == 0 {
            return Err(Error::EmptySchedule);
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || self.val_every == 0 {
            return Err(Error::InvalidArgument(format!(
                "invalid segmentation schedule {self:?}"
            )));
        }
        self.augmentation.validate()
    }

    fn validates_at(&self, epoch: usize) -> bool {
        epoch == 1 || epoch % self.val_every == 0 || epoch == self.total_epochs()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegEpoch {
    pub epoch: usize,
    pub augmented: bool,
    pub train_loss: f64,
    /// Mean Dice over the five foreground classes.
    pub val_dice: Option<f64>,
    /// Mean Dice over CSF, GM and WM.
    pub val_dice_brain: Option<f64>,
}

impl SegEpoch {
    fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        format!(
            "{},{},{:.8},{},{}",
            self.epoch,
            u8::from(self.augmented),
            self.train_loss,
            opt(self.val_dice),
            opt(self.val_dice_brain)
        )
    }
}

const LOG_HEADER: &str = "epoch,augmented,train_loss,val_dice,val_dice_brain";

/// Trained segmentation network whose weights can no longer change.
pub struct FrozenSegNet {
    net: SegNet,
    hash: String,
}

impl FrozenSegNet {
    pub fn freeze(net: SegNet) -> Self {
        net.freeze();
        let hash = net.weights_hash();
        Self { net, hash }
    }

    pub fn config(&self) -> &SegModelConfig {
        &self.net.config
    }

    pub fn num_parameters(&self) -> usize {
        self.net.num_parameters()
    }

    /// SHA-256 of the weights taken at freeze time.
    pub fn frozen_hash(&self) -> &str {
        &self.hash
    }

    /// SHA-256 of the current weights.
    pub fn weights_hash(&self) -> String {
        self.net.weights_hash()
    }

    pub fn verify_unchanged(&self) -> Result<()> {
        let now = self.weights_hash();
        if now == self.hash {
            Ok(())
        } else {
            Err(Error::UnfrozenSegmentation {
                before: self.hash.clone(),
                after: now,
            })
        }
    }

    pub fn predict(&self, ulf_stack: &Tensor) -> Result<SegLogits> {
        self.net.predict(ulf_stack)
    }

    /// Softmax probabilities `[6, D, H, W]` for a subject's ULF contrasts.
    pub fn probs(&self, subject: &Subject) -> Result<Tensor> {
        Ok(self.predict(&stack_contrasts(&subject.ulf)?)?.probs())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut a = Archive::new(&FrozenMeta {
            config: self.net.config.clone(),
            hash: self.hash.clone(),
        })?;
        a.put("weights", &self.net.store.snapshot());
        a.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let a = Archive::load(path)?;
        let meta: FrozenMeta = a.meta()?;
        let net = SegNet::new(&meta.config, 0)?;
        net.store.load(&a.take("weights"))?;
        let frozen = Self::freeze(net);
        if frozen.hash != meta.hash {
            return Err(Error::Checkpoint(format!(
                "{}: weights hash {} does not match recorded {}",
                path.display(),
                frozen.hash,
                meta.hash
            )));
        }
        Ok(frozen)
    }
}

#[derive(Serialize, Deserialize)]
struct FrozenMeta {
    config: SegModelConfig,
    hash: String,
}

pub struct SegTraining {
    pub model: FrozenSegNet,
    pub history: Vec<SegEpoch>,
    /// Epoch whose weights were kept (1-based).
    pub best_epoch: usize,
    /// False when [`RunControl::stop_after`] cut the schedule short.
    pub completed: bool,
}

#[derive(Serialize, Deserialize)]
struct TrainMeta {
    kind: String,
    config: SegModelConfig,
    schedule: SegSchedule,
    epochs_done: usize,
    adam_step: u64,
    history: Vec<SegEpoch>,
    best_epoch: usize,
    #[serde(with = "crate::metrics::report::inf_f64")]
    best_score: f64,
}

struct Sample {
    image: Tensor,
    labels: Vec<usize>,
}

fn samples(subjects: &[Subject]) -> Result<Vec<Sample>> {
    subjects
        .iter()
        .map(|s| {
            s.validate()?;
            Ok(Sample {
                image: stack_contrasts(&s.ulf)?,
                labels: s.labels().ok_or_else(|| Error::MissingLabelmap(s.id.clone()))?,
            })
        })
        .collect()
}

fn validation_dice(net: &SegNet, val: &[Sample]) -> Result<(f64, f64)> {
    let (mut all, mut brain) = (0.0, 0.0);
    for s in val {
        let pred = net.predict(&s.image)?.labels();
        all += mean_dice(&pred, &s.labels, &FOREGROUND_CLASSES)?;
        brain += mean_dice(&pred, &s.labels, &BRAIN_CLASSES)?;
    }
    let n = val.len() as f64;
    Ok((all / n, brain / n))
}

/// Two-phase training (augmented, then plain), keeping the weights with the best
/// validation mean Dice. Without validation subjects the last epoch is kept.
pub fn train_segmentation(
    train: &[Subject],
    val: &[Subject],
    config: &SegModelConfig,
    schedule: &SegSchedule,
    run: &RunControl,
) -> Result<SegTraining> {
    schedule.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let train_set = samples(train)?;
    let val_set = samples(val)?;
    let net = SegNet::new(config, derive_seed(schedule.seed, &[0]))?;
    let mut adam = Adam::new(
        &net.store,
        AdamConfig {
            lr: schedule.lr,
            beta1: schedule.beta1,
            ..AdamConfig::default()
        },
    );
    let mut history = Vec::new();
    let mut best = net.store.snapshot();
    let mut best_epoch = 0;
    let mut best_score = f64::NEG_INFINITY;
    let mut start = 0;
    if let Some(a) = run.resume_from(STEM)? {
        let meta: TrainMeta = a.meta()?;
        if meta.config != net.config || meta.schedule != *schedule {
            return Err(Error::Checkpoint(
                "segmentation checkpoint was written with a different config or schedule".into(),
            ));
        }
        net.store.load(&a.take("weights"))?;
        adam.load_state(&a.take_adam("adam", meta.adam_step))?;
        best = a.take("best");
        best_epoch = meta.best_epoch;
        best_score = meta.best_score;
        history = meta.history;
        start = meta.epochs_done;
    }

    let total = schedule.total_epochs();
    for epoch in start + 1..=total {
        let augmented = epoch <= schedule.epochs_augmented;
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut stream(schedule.seed, &[1, epoch as u64]));
        let mut loss_sum = 0.0;
        for (k, &i) in order.iter().enumerate() {
            let s = &train_set[i];
            let (image, labels) = if augmented {
                let seed = derive_seed(schedule.seed, &[2, epoch as u64, k as u64]);
                augment(&s.image, &s.labels, &schedule.augmentation, seed)?
            } else {
                (s.image.clone(), s.labels.clone())
            };
            let logits = net.forward(&Var::constant(image))?;
            let loss = dice_ce_loss(&logits, &labels, schedule.loss_weights)?;
            let value = loss.value().item();
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("segmentation loss at epoch {epoch}")));
            }
            loss_sum += value;
            adam.step(&loss.backward());
        }
        let mut row = SegEpoch {
            epoch,
            augmented,
            train_loss: loss_sum / train_set.len() as f64,
            val_dice: None,
            val_dice_brain: None,
        };
        if val_set.is_empty() {
            best = net.store.snapshot();
            best_epoch = epoch;
        } else if schedule.validates_at(epoch) {
            let (all, brain) = validation_dice(&net, &val_set)?;
            row.val_dice = Some(all);
            row.val_dice_brain = Some(brain);
            if all > best_score {
                best_score = all;
                best_epoch = epoch;
                best = net.store.snapshot();
            }
        }
        history.push(row);

        if let Some(path) = run.checkpoint_path(STEM) {
            let mut a = Archive::new(&TrainMeta {
                kind: STEM.into(),
                config: net.config.clone(),
                schedule: schedule.clone(),
                epochs_done: epoch,
                adam_step: adam.steps_taken(),
                history: history.clone(),
                best_epoch,
                best_score,
            })?;
            a.put("weights", &net.store.snapshot());
            a.put("best", &best);
            a.put_adam("adam", &adam.state());
            a.save(&path)?;
        }
        if let Some(path) = run.log_path(STEM) {
            let rows: Vec<String> = history.iter().map(SegEpoch::csv_row).collect();
            write_csv(&path, LOG_HEADER, &rows)?;
        }
        if epoch < total && run.should_stop(epoch) {
            net.store.load(&best)?;
            return Ok(SegTraining {
                model: FrozenSegNet::freeze(net),
                history,
                best_epoch,
                completed: false,
            });
        }
    }
    net.store.load(&best)?;
    Ok(SegTraining {
        model: FrozenSegNet::freeze(net),
        history,
        best_epoch,
        completed: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tampering_is_detected() {
        let frozen = FrozenSegNet::freeze(SegNet::new(&SegModelConfig::default(), 1).unwrap());
        frozen.verify_unchanged().unwrap();
        let p = frozen.net.store.params().next().unwrap();
        p.set_value(p.value().map(|v| v + 1e-9));
        assert!(matches!(
            frozen.verify_unchanged(),
            Err(Error::UnfrozenSegmentation { .. })
        ));
    }
}
