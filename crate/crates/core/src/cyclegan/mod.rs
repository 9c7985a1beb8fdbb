//! Paired-cycle adversarial enhancement with segmentation conditioning.

mod generator;
mod loss;
mod train;

pub use generator::{
    spade_normalize, ConditioningMode, Direction, Generator, GeneratorConfig, LayerKind, Spade, INPUT_LOGIT_EPS,
};
pub use loss::{cycle_loss, paired_challenge_loss, penalty_schedule, CycleLossWeights, DEFAULT_PSNR_CAP};
pub use train::{
    train_cyclegan, CycleEpoch, CycleGanConfig, CycleGanModels, CycleGanTraining, CycleSchedule, CYCLE_LOG_HEADER,
};

pub use crate::gan::adversarial_losses;

use crate::enhance::{enhance_subject, Enhanced, SlabSettings};
use crate::error::Result;
use crate::segmentation::FrozenSegNet;
use crate::volume::Subject;

/// Slab-wise enhancement of one subject with a ULF→HF generator.
pub fn infer_cyclegan(
    generator: &Generator,
    seg: &FrozenSegNet,
    subject: &Subject,
    settings: &SlabSettings,
) -> Result<Enhanced> {
    enhance_subject(generator, seg, subject, settings)
}
