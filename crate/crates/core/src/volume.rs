//! Volumes, subjects, intensity normalization and masks.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filters;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormState {
    Raw,
    UnitNormalized,
}

/// Scalar 3D grid stored depth-major: index `(z, y, x)` lives at `(z * h + y) * w + x`.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    data: Vec<f64>,
    shape: [usize; 3],
    spacing: [f64; 3],
    norm_state: NormState,
}

impl Volume {
    pub fn new(shape: [usize; 3], spacing: [f64; 3], data: Vec<f64>, norm_state: NormState) -> Result<Self> {
        if shape.iter().any(|&n| n == 0) {
            return Err(Error::InvalidArgument(format!("shape {shape:?} has a zero axis")));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidArgument(format!("spacing {spacing:?} must be positive")));
        }
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for shape {shape:?}",
                data.len()
            )));
        }
        if norm_state == NormState::UnitNormalized && data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument(
                "unit-normalized volume has values outside [0, 1]".into(),
            ));
        }
        Ok(Self {
            data,
            shape,
            spacing,
            norm_state,
        })
    }

    /// Unit-normalized volume with 1 mm isotropic spacing; values are clamped into [0, 1].
    pub fn unit(shape: [usize; 3], data: Vec<f64>) -> Self {
        let data = data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Self::new(shape, [1.0; 3], data, NormState::UnitNormalized).expect("valid unit volume")
    }

    pub fn raw(shape: [usize; 3], data: Vec<f64>) -> Self {
        Self::new(shape, [1.0; 3], data, NormState::Raw).expect("valid raw volume")
    }

    pub fn zeros(shape: [usize; 3]) -> Self {
        Self::unit(shape, vec![0.0; shape.iter().product()])
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn norm_state(&self) -> NormState {
        self.norm_state
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn with_spacing(mut self, spacing: [f64; 3]) -> Result<Self> {
        if spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidArgument(format!("spacing {spacing:?} must be positive")));
        }
        self.spacing = spacing;
        Ok(self)
    }

    /// Same shape, spacing and normalization state, new values.
    pub fn with_data(&self, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), self.data.len());
        Self {
            data,
            shape: self.shape,
            spacing: self.spacing,
            norm_state: self.norm_state,
        }
    }

    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.shape[1] + y) * self.shape[2] + x
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(z, y, x)]
    }

    /// Slices `[start, start + len)` along depth.
    pub fn crop_depth(&self, start: usize, len: usize) -> Self {
        let plane = self.shape[1] * self.shape[2];
        Self {
            data: self.data[start * plane..(start + len) * plane].to_vec(),
            shape: [len, self.shape[1], self.shape[2]],
            spacing: self.spacing,
            norm_state: self.norm_state,
        }
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0.0).count()
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Mean over voxels where `mask` is nonzero; `None` for an empty mask.
    pub fn masked_mean(&self, mask: &Volume) -> Option<f64> {
        let (s, n) = self
            .data
            .iter()
            .zip(mask.data())
            .filter(|(_, &m)| m != 0.0)
            .fold((0.0, 0usize), |(s, n), (&v, _)| (s + v, n + 1));
        (n > 0).then(|| s / n as f64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Contrast {
    T1,
    T2,
    Flair,
}

impl Contrast {
    pub const ALL: [Contrast; 3] = [Contrast::T1, Contrast::T2, Contrast::Flair];

    pub fn file_stem(self) -> &'static str {
        match self {
            Contrast::T1 => "t1",
            Contrast::T2 => "t2",
            Contrast::Flair => "flair",
        }
    }
}

impl fmt::Display for Contrast {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.file_stem())
    }
}

impl FromStr for Contrast {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "t1" => Ok(Contrast::T1),
            "t2" => Ok(Contrast::T2),
            "flair" => Ok(Contrast::Flair),
            other => Err(Error::InvalidArgument(format!("unknown contrast `{other}`"))),
        }
    }
}

pub type ContrastMap = BTreeMap<Contrast, Volume>;

/// Six tissue classes, in conditioning-channel order.
pub const CLASS_NAMES: [&str; 6] = ["background", "csf", "gm", "wm", "skull", "scalp"];
pub const N_CLASSES: usize = 6;
pub const CSF: usize = 1;
pub const GM: usize = 2;
pub const WM: usize = 3;
pub const SKULL: usize = 4;
pub const SCALP: usize = 5;

/// Paired multi-contrast sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Subject {
    pub id: String,
    pub ulf: ContrastMap,
    pub hf: Option<ContrastMap>,
    pub labelmap: Option<Volume>,
    pub bg_mask: Option<Volume>,
    /// Ground-truth signal-void region, known only for synthetic subjects.
    pub void_mask: Option<Volume>,
}

impl Subject {
    pub fn shape(&self) -> [usize; 3] {
        self.ulf
            .values()
            .next()
            .map(Volume::shape)
            .expect("subject without volumes")
    }

    pub fn validate(&self) -> Result<()> {
        for c in Contrast::ALL {
            if !self.ulf.contains_key(&c) {
                return Err(Error::ContrastMismatch(format!("{}: ulf lacks {c}", self.id)));
            }
            if let Some(hf) = &self.hf {
                if !hf.contains_key(&c) {
                    return Err(Error::ContrastMismatch(format!("{}: hf lacks {c}", self.id)));
                }
            }
        }
        let shape = self.shape();
        let all = self
            .ulf
            .values()
            .chain(self.hf.iter().flat_map(|m| m.values()))
            .chain(self.labelmap.iter())
            .chain(self.bg_mask.iter())
            .chain(self.void_mask.iter());
        for v in all {
            if v.shape() != shape {
                return Err(Error::ShapeMismatch(format!(
                    "{}: {:?} vs {:?}",
                    self.id,
                    v.shape(),
                    shape
                )));
            }
        }
        if let Some(l) = &self.labelmap {
            if let Some(&bad) = l
                .data()
                .iter()
                .find(|&&v| v.fract() != 0.0 || !(0.0..=5.0).contains(&v))
            {
                return Err(Error::LabelOutOfRange(bad as i64));
            }
        }
        for m in self.bg_mask.iter().chain(self.void_mask.iter()) {
            if m.data().iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::InvalidArgument(format!("{}: mask is not binary", self.id)));
            }
        }
        Ok(())
    }

    /// Depth-cropped view of every volume.
    pub fn crop_depth(&self, start: usize, len: usize) -> Subject {
        let crop_map =
            |m: &ContrastMap| -> ContrastMap { m.iter().map(|(&c, v)| (c, v.crop_depth(start, len))).collect() };
        Subject {
            id: self.id.clone(),
            ulf: crop_map(&self.ulf),
            hf: self.hf.as_ref().map(crop_map),
            labelmap: self.labelmap.as_ref().map(|v| v.crop_depth(start, len)),
            bg_mask: self.bg_mask.as_ref().map(|v| v.crop_depth(start, len)),
            void_mask: self.void_mask.as_ref().map(|v| v.crop_depth(start, len)),
        }
    }

    /// Labels as class indices.
    pub fn labels(&self) -> Option<Vec<usize>> {
        self.labelmap
            .as_ref()
            .map(|l| l.data().iter().map(|&v| v as usize).collect())
    }
}

/// Linear-interpolated percentile (numpy's default rule) of unsorted values.
pub fn percentile(values: &[f64], pct: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    percentile_sorted(&sorted, pct)
}

pub fn percentile_sorted(sorted: &[f64], pct: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let rank = pct / 100.0 * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil().min((n - 1) as f64) as usize;
    let t = rank - lo as f64;
    sorted[lo] + t * (sorted[hi] - sorted[lo])
}

/// Percentile scaling to [0, 1] with clipping.
pub fn normalize_intensity(v: &Volume, lo_pct: f64, hi_pct: f64) -> Result<Volume> {
    if v.norm_state() != NormState::Raw {
        return Err(Error::InvalidArgument("volume is already normalized".into()));
    }
    if !(0.0 <= lo_pct && lo_pct < hi_pct && hi_pct <= 100.0) {
        return Err(Error::InvalidArgument(format!(
            "percentiles must satisfy 0 <= lo < hi <= 100, got {lo_pct}, {hi_pct}"
        )));
    }
    let mut sorted = v.data().to_vec();
    sorted.sort_by(f64::total_cmp);
    let p_lo = percentile_sorted(&sorted, lo_pct);
    let p_hi = percentile_sorted(&sorted, hi_pct);
    if !(p_hi > p_lo) {
        return Err(Error::ConstantVolume);
    }
    let scale = 1.0 / (p_hi - p_lo);
    let data = v.data().iter().map(|&x| ((x - p_lo) * scale).clamp(0.0, 1.0)).collect();
    Volume::new(v.shape(), v.spacing(), data, NormState::UnitNormalized)
}

/// How raw intensities are brought to [0, 1] on load.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum IntensityNorm {
    /// Percentile scaling via [`normalize_intensity`].
    Percentile { lo_pct: f64, hi_pct: f64 },
    /// Data is already on a unit scale; clamp stray values.
    Clamp,
}

impl Default for IntensityNorm {
    fn default() -> Self {
        IntensityNorm::Percentile {
            lo_pct: 0.5,
            hi_pct: 99.5,
        }
    }
}

impl IntensityNorm {
    pub fn apply(&self, v: &Volume) -> Result<Volume> {
        match *self {
            IntensityNorm::Percentile { lo_pct, hi_pct } => normalize_intensity(v, lo_pct, hi_pct),
            IntensityNorm::Clamp => Ok(Volume::unit(v.shape(), v.data().to_vec()).with_spacing(v.spacing())?),
        }
    }
}

pub const DEFAULT_MASK_SIGMA: f64 = 2.0;
pub const DEFAULT_MASK_THRESHOLD: f64 = 0.05;

/// Foreground mask: Gaussian-smoothed copy above `threshold · max(smoothed)`.
pub fn background_mask(v: &Volume, threshold: f64) -> Result<Volume> {
    background_mask_with_sigma(v, threshold, DEFAULT_MASK_SIGMA)
}

pub fn background_mask_with_sigma(v: &Volume, threshold: f64, sigma: f64) -> Result<Volume> {
    if v.norm_state() != NormState::UnitNormalized {
        return Err(Error::InvalidArgument(
            "background_mask needs a unit-normalized volume".into(),
        ));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidArgument(format!("threshold {threshold} not in (0, 1)")));
    }
    let smooth = filters::gaussian_smooth(v.data(), v.shape(), sigma);
    let peak = smooth.iter().copied().fold(0.0f64, f64::max);
    let cut = threshold * peak;
    let data = smooth
        .iter()
        .map(|&s| if peak > 0.0 && s > cut { 1.0 } else { 0.0 })
        .collect();
    Ok(Volume::unit(v.shape(), data).with_spacing(v.spacing())?)
}
