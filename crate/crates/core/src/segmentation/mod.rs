//! Six-class tissue segmentation from the three ULF contrasts.

mod augment;
mod loss;
mod model;
mod train;

pub use augment::{augment, AugmentationPolicy, Interp, SpatialTransform};
pub use loss::{dice_ce_loss, mean_dice, one_hot, DiceCeWeights, DICE_SMOOTH};
pub use model::{SegLogits, SegModelConfig, SegNet, SEG_DOWNSAMPLING, SEG_IN_CHANNELS};
pub use train::{
    train_segmentation, FrozenSegNet, SegEpoch, SegSchedule, SegTraining, BRAIN_CLASSES, FOREGROUND_CLASSES,
};
