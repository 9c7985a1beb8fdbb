//! Signal-void detection and quantification of intensity synthesized inside voids.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::figures::{gray_slice, overlay_slice, Canvas};
use crate::filters::{gaussian_smooth, remove_small_components};
use crate::io::save_volume;
use crate::nn::stack_contrasts;
use crate::segmentation::{FrozenSegNet, BRAIN_CLASSES};
use crate::volume::{Contrast, ContrastMap, Subject, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HallucinationSettings {
    /// Smoothed ULF intensity below which a head voxel counts as void.
    pub void_threshold: f64,
    pub smoothing_sigma: f64,
    /// Ratios above this are flagged.
    pub flag_threshold: f64,
}

impl Default for HallucinationSettings {
    fn default() -> Self {
        Self {
            void_threshold: 0.1,
            smoothing_sigma: 1.0,
            flag_threshold: 0.3,
        }
    }
}

impl HallucinationSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.void_threshold >= 0.0) || !(self.smoothing_sigma >= 0.0) || !(self.flag_threshold >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "invalid hallucination settings {self:?}"
            )));
        }
        Ok(())
    }
}

/// Brain and head regions used for void detection.
#[derive(Clone, Debug)]
pub struct HallucinationMasks {
    pub brain: Volume,
    pub head: Volume,
}

impl HallucinationMasks {
    /// From the subject's labelmap and head mask.
    pub fn from_labels(subject: &Subject) -> Result<Self> {
        let labels = subject
            .labelmap
            .as_ref()
            .ok_or_else(|| Error::MissingLabelmap(subject.id.clone()))?;
        let brain = labels.with_data(
            labels
                .data()
                .iter()
                .map(|&l| f64::from(u8::from(BRAIN_CLASSES.contains(&(l as usize)))))
                .collect(),
        );
        let head = match &subject.bg_mask {
            Some(m) => m.clone(),
            None => labels.with_data(labels.data().iter().map(|&l| f64::from(u8::from(l != 0.0))).collect()),
        };
        Ok(Self { brain, head })
    }

    /// From the segmentation network's labels on the ULF input.
    pub fn from_segmentation(seg: &FrozenSegNet, subject: &Subject) -> Result<Self> {
        let labels = seg.predict(&stack_contrasts(&subject.ulf)?)?.labels();
        let shape = subject.shape();
        let brain = Volume::unit(
            shape,
            labels
                .iter()
                .map(|l| f64::from(u8::from(BRAIN_CLASSES.contains(l))))
                .collect(),
        );
        let head = Volume::unit(shape, labels.iter().map(|&l| f64::from(u8::from(l != 0))).collect());
        Ok(Self { brain, head })
    }
}

/// Components smaller than this are treated as noise.
pub const MIN_VOID_VOXELS: usize = 8;

/// Voxels inside `head` but outside `brain` whose smoothed ULF intensity is below
/// `threshold`, keeping only components of at least [`MIN_VOID_VOXELS`].
pub fn detect_signal_void(ulf: &Volume, brain: &Volume, head: &Volume, threshold: f64, sigma: f64) -> Volume {
    let shape = ulf.shape();
    let smooth = gaussian_smooth(ulf.data(), shape, sigma);
    let raw: Vec<bool> = smooth
        .iter()
        .zip(brain.data().iter().zip(head.data()))
        .map(|(&v, (&b, &h))| h > 0.5 && b <= 0.5 && v < threshold)
        .collect();
    let kept = remove_small_components(&raw, shape, MIN_VOID_VOXELS);
    Volume::unit(shape, kept.into_iter().map(|m| f64::from(u8::from(m))).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastHallucination {
    pub contrast: Contrast,
    pub void_voxels: usize,
    /// Mean enhanced intensity in the void; `None` when no void was found.
    pub void_mean: Option<f64>,
    pub brain_mean: f64,
    /// `void_mean / brain_mean`, zero without a void.
    #[serde(with = "crate::metrics::report::inf_f64")]
    pub hallucination_ratio: f64,
    pub flagged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HallucinationReport {
    pub subject: String,
    pub settings: HallucinationSettings,
    pub contrasts: Vec<ContrastHallucination>,
    #[serde(skip)]
    pub void_masks: ContrastMap,
}

impl HallucinationReport {
    pub fn any_flagged(&self) -> bool {
        self.contrasts.iter().any(|c| c.flagged)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Per-contrast ratio of the mean enhanced intensity inside the detected ULF void to
/// the mean inside the brain.
pub fn hallucination_report(
    enhanced: &ContrastMap,
    subject: &Subject,
    masks: &HallucinationMasks,
    settings: &HallucinationSettings,
) -> Result<HallucinationReport> {
    settings.validate()?;
    if masks.brain.count_nonzero() == 0 {
        return Err(Error::EmptyMask);
    }
    let mut contrasts = Vec::new();
    let mut void_masks = ContrastMap::new();
    for (&c, ulf) in &subject.ulf {
        let out = enhanced
            .get(&c)
            .ok_or_else(|| Error::ContrastMismatch(format!("{}: no enhanced {c}", subject.id)))?;
        if out.shape() != ulf.shape() || masks.brain.shape() != ulf.shape() || masks.head.shape() != ulf.shape() {
            return Err(Error::ShapeMismatch(format!(
                "{}: misaligned volumes for {c}",
                subject.id
            )));
        }
        let void = detect_signal_void(
            ulf,
            &masks.brain,
            &masks.head,
            settings.void_threshold,
            settings.smoothing_sigma,
        );
        let brain_mean = out.masked_mean(&masks.brain).ok_or(Error::EmptyMask)?;
        let void_mean = out.masked_mean(&void);
        let ratio = match void_mean {
            None => 0.0,
            Some(v) if brain_mean > 0.0 => v / brain_mean,
            Some(v) if v > 0.0 => f64::INFINITY,
            Some(_) => 0.0,
        };
        contrasts.push(ContrastHallucination {
            contrast: c,
            void_voxels: void.count_nonzero(),
            void_mean,
            brain_mean,
            hallucination_ratio: ratio,
            flagged: ratio > settings.flag_threshold,
        });
        void_masks.insert(c, void);
    }
    Ok(HallucinationReport {
        subject: subject.id.clone(),
        settings: settings.clone(),
        contrasts,
        void_masks,
    })
}

/// Axial slice with the most void voxels, else the middle slice.
fn void_slice(masks: &ContrastMap, shape: [usize; 3]) -> usize {
    let [d, h, w] = shape;
    let counts: Vec<usize> = (0..d)
        .map(|z| {
            masks
                .values()
                .map(|m| {
                    m.data()[z * h * w..(z + 1) * h * w]
                        .iter()
                        .filter(|&&v| v > 0.5)
                        .count()
                })
                .sum()
        })
        .collect();
    match counts
        .iter()
        .enumerate()
        .max_by_key(|&(z, &n)| (n, std::cmp::Reverse(z)))
    {
        Some((z, &n)) if n > 0 => z,
        _ => d / 2,
    }
}

/// Writes `<id>_hallucination.json`, a ULF | enhanced | void-overlay montage PNG and one
/// void mask per contrast.
pub fn write_hallucination_report(
    report: &HallucinationReport,
    subject: &Subject,
    enhanced: &ContrastMap,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Unwritable {
        path: dir.to_path_buf(),
        source,
    })?;
    let id = &report.subject;
    let json = dir.join(format!("{id}_hallucination.json"));
    std::fs::write(&json, report.to_json()).map_err(|source| Error::Unwritable {
        path: json.clone(),
        source,
    })?;
    let shape = subject.shape();
    let z = void_slice(&report.void_masks, shape);
    let mut canvas = Canvas::new(report.void_masks.len(), 3, [shape[1], shape[2]]);
    let mut written = vec![json];
    for (row, (c, void)) in report.void_masks.iter().enumerate() {
        canvas.put(row, 0, &gray_slice(&subject.ulf[c], z));
        canvas.put(row, 1, &gray_slice(&enhanced[c], z));
        canvas.put(row, 2, &overlay_slice(&enhanced[c], void, z));
        let path = dir.join(format!("{id}_{}_void.nii.gz", c.file_stem()));
        save_volume(void, &path)?;
        written.push(path);
    }
    let png = dir.join(format!("{id}_hallucination.png"));
    canvas.save_png(&png)?;
    written.push(png);
    Ok(written)
}
