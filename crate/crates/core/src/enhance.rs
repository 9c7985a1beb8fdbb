//! Slab-wise application of an enhancement network with segmentation conditioning.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use voxgrad::Tensor;

use crate::error::{Error, Result};
use crate::metrics::{evaluate_predictions, Aggregation, MetricReport, SsimConfig};
use crate::nn::{stack_contrasts, unstack_contrasts};
use crate::segmentation::FrozenSegNet;
use crate::slab::{enumerate_slabs, extract, stitch};
use crate::volume::{ContrastMap, Subject};

/// Maps a ULF stack `[3, d, h, w]` and its class probabilities `[6, d, h, w]` to an
/// enhanced stack `[3, d, h, w]`.
pub trait Enhancer {
    fn enhance(&self, ulf: &Tensor, seg_probs: &Tensor) -> Result<Tensor>;
}

impl<F: Fn(&Tensor, &Tensor) -> Result<Tensor>> Enhancer for F {
    fn enhance(&self, ulf: &Tensor, seg_probs: &Tensor) -> Result<Tensor> {
        self(ulf, seg_probs)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditioningSource {
    /// Segment each slab on its own, as in training.
    #[default]
    PerSlab,
    /// Segment the whole volume once and crop the probabilities.
    FullVolume,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SlabSettings {
    /// `None` processes the whole volume in one pass.
    pub slab_depth: Option<usize>,
    pub stride: usize,
    pub conditioning: ConditioningSource,
}

impl Default for SlabSettings {
    fn default() -> Self {
        Self {
            slab_depth: Some(40),
            stride: 5,
            conditioning: ConditioningSource::PerSlab,
        }
    }
}

/// Enhanced contrasts for one subject.
#[derive(Clone, Debug, PartialEq)]
pub struct Enhanced {
    pub id: String,
    pub volumes: ContrastMap,
}

/// Enhances a full ULF stack slab by slab; slabs deeper than the volume shrink to it.
pub fn enhance_stack(
    model: &dyn Enhancer,
    seg: &FrozenSegNet,
    ulf: &Tensor,
    settings: &SlabSettings,
) -> Result<Tensor> {
    let s = ulf.shape().to_vec();
    if s.len() != 4 || s[0] != 3 {
        return Err(Error::ChannelMismatch {
            expected: 3,
            got: s.first().copied().unwrap_or(0),
        });
    }
    let depth = s[1];
    let slab = settings.slab_depth.unwrap_or(depth).min(depth);
    let plan = enumerate_slabs(depth, slab, settings.stride.min(slab))?;
    let full_probs = match settings.conditioning {
        ConditioningSource::FullVolume => Some(seg.predict(ulf)?.probs()),
        ConditioningSource::PerSlab => None,
    };
    let mut outputs = Vec::with_capacity(plan.starts.len());
    for (start, x) in extract(ulf, &plan) {
        let probs = match &full_probs {
            Some(p) => p.narrow(1, start, slab),
            None => seg.predict(&x)?.probs(),
        };
        let y = model.enhance(&x, &probs)?;
        if y.shape() != x.shape() {
            return Err(Error::ShapeMismatch(format!(
                "enhancer returned {:?} for a {:?} slab",
                y.shape(),
                x.shape()
            )));
        }
        outputs.push((start, y));
    }
    stitch(&outputs, &plan, [3, s[1], s[2], s[3]])
}

pub fn enhance_subject(
    model: &dyn Enhancer,
    seg: &FrozenSegNet,
    subject: &Subject,
    settings: &SlabSettings,
) -> Result<Enhanced> {
    let ulf = stack_contrasts(&subject.ulf)?;
    let out = enhance_stack(model, seg, &ulf, settings)?;
    let spacing = subject.ulf.values().next().map(|v| v.spacing()).unwrap_or([1.0; 3]);
    let volumes = unstack_contrasts(&out)
        .into_iter()
        .map(|(c, v)| Ok((c, v.with_spacing(spacing)?)))
        .collect::<Result<_>>()?;
    Ok(Enhanced {
        id: subject.id.clone(),
        volumes,
    })
}

/// Enhances every subject and scores the results against their HF volumes.
pub fn evaluate_enhancer(
    model: &dyn Enhancer,
    seg: &FrozenSegNet,
    subjects: &[Subject],
    settings: &SlabSettings,
    ssim_cfg: &SsimConfig,
) -> Result<MetricReport> {
    let preds = subjects
        .iter()
        .map(|s| Ok(enhance_subject(model, seg, s, settings)?.volumes))
        .collect::<Result<Vec<_>>>()?;
    evaluate_predictions(&preds, subjects, ssim_cfg, Aggregation::default())
}

/// Masked weighted score from a report; a perfect (infinite-PSNR) result ranks highest.
pub fn masked_score(report: &MetricReport) -> f64 {
    report.summary.weighted_masked.unwrap_or(f64::INFINITY)
}

/// ULF/HF stacks of subjects that carry paired HF data.
pub struct PairedSet {
    pub ids: Vec<String>,
    pub ulf: Vec<Tensor>,
    pub hf: Vec<Tensor>,
}

impl PairedSet {
    pub fn new(subjects: &[Subject]) -> Result<Self> {
        let mut set = Self {
            ids: Vec::new(),
            ulf: Vec::new(),
            hf: Vec::new(),
        };
        for s in subjects {
            s.validate()?;
            let hf = s.hf.as_ref().ok_or_else(|| Error::MissingPairedData(s.id.clone()))?;
            set.ids.push(s.id.clone());
            set.ulf.push(stack_contrasts(&s.ulf)?);
            set.hf.push(stack_contrasts(hf)?);
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn depth(&self, i: usize) -> usize {
        self.ulf[i].shape()[1]
    }

    /// `(ulf, hf)` slabs of subject `i`.
    pub fn slab(&self, i: usize, start: usize, len: usize) -> (Tensor, Tensor) {
        (self.ulf[i].narrow(1, start, len), self.hf[i].narrow(1, start, len))
    }
}

/// Memoized class probabilities of training slabs, keyed by (subject, start, depth).
pub struct ConditioningCache<'a> {
    seg: &'a FrozenSegNet,
    memo: HashMap<(usize, usize, usize), Tensor>,
}

impl<'a> ConditioningCache<'a> {
    pub fn new(seg: &'a FrozenSegNet) -> Self {
        Self {
            seg,
            memo: HashMap::new(),
        }
    }

    pub fn probs(&mut self, subject: usize, start: usize, ulf_slab: &Tensor) -> Result<Tensor> {
        let key = (subject, start, ulf_slab.shape()[1]);
        if let Some(p) = self.memo.get(&key) {
            return Ok(p.clone());
        }
        let p = self.seg.predict(ulf_slab)?.probs();
        self.memo.insert(key, p.clone());
        Ok(p)
    }
}
