//! Transformer-bottleneck residual encoder/decoder for paired ULF→HF synthesis.

mod loss;
mod model;
mod train;

pub use loss::{
    content_loss, content_terms, psnr_term, sobel_loss, sobel_magnitude, ContentLossWeights, ContentTerms, SOBEL_EPS,
};
pub use model::{Trex, TrexConfig, TrexStructure, TREX_IN_CHANNELS, TREX_OUT_CHANNELS};
pub use train::{evaluate_trex, train_trex, TrexEpoch, TrexPhase, TrexSchedule, TrexTraining, TREX_LOG_HEADER};

use serde::{Deserialize, Serialize};

use crate::enhance::{enhance_subject, Enhanced, SlabSettings};
use crate::error::{Error, Result};
use crate::segmentation::FrozenSegNet;
use crate::volume::Subject;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrexInference {
    /// Volumes with at most this many voxels are enhanced in one pass.
    pub max_whole_voxels: usize,
    /// Slab plan for larger volumes.
    pub slabs: SlabSettings,
}

impl Default for TrexInference {
    fn default() -> Self {
        Self {
            max_whole_voxels: 1 << 21,
            slabs: SlabSettings::default(),
        }
    }
}

impl TrexInference {
    pub fn whole_volume() -> Self {
        Self {
            max_whole_voxels: usize::MAX,
            ..Self::default()
        }
    }

    pub fn slab_only(slabs: SlabSettings) -> Self {
        Self {
            max_whole_voxels: 0,
            slabs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.slabs.stride == 0 || self.slabs.slab_depth == Some(0) {
            return Err(Error::InvalidArgument(format!(
                "invalid T-REX inference settings {self:?}"
            )));
        }
        Ok(())
    }

    /// Slab plan for a volume of spatial size `dims`.
    pub fn settings_for(&self, dims: [usize; 3]) -> SlabSettings {
        if dims.iter().product::<usize>() <= self.max_whole_voxels {
            SlabSettings {
                slab_depth: None,
                ..self.slabs.clone()
            }
        } else {
            self.slabs.clone()
        }
    }
}

pub fn infer_trex(net: &Trex, seg: &FrozenSegNet, subject: &Subject, inference: &TrexInference) -> Result<Enhanced> {
    enhance_subject(net, seg, subject, &inference.settings_for(subject.shape()))
}
