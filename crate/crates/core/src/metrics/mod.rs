//! Image-quality metrics and the weighted challenge score.
//!
//! [`ssim`], [`psnr`], [`mae`] and [`nmse`] are the reference evaluation
//! variants on volumes. [`diff`] holds graph versions used inside losses.

pub mod diff;
pub(crate) mod report;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use voxgrad::{AxisMap, Tensor};

use crate::error::{Error, Result};
use crate::filters::gaussian_kernel;
use crate::volume::{background_mask, Contrast, ContrastMap, NormState, Subject, Volume};

pub use report::{evaluate_subject, image_metrics, Aggregation, ImageMetrics, MetricReport, MetricSummary};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SsimConfig {
    pub sigma: f64,
    /// Window half-width; the support is `2·radius + 1` per axis.
    pub radius: usize,
    pub k1: f64,
    pub k2: f64,
    pub data_range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self {
            sigma: 1.5,
            radius: 3,
            k1: 0.01,
            k2: 0.03,
            data_range: 1.0,
        }
    }
}

impl SsimConfig {
    pub fn c1(&self) -> f64 {
        (self.k1 * self.data_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.data_range).powi(2)
    }

    /// Normalized window taps.
    pub fn window(&self) -> Vec<f64> {
        gaussian_kernel(self.sigma, self.radius)
    }

    /// Per-axis window maps for a volume of `shape`; borders mirror-reflect so
    /// the SSIM map has a value at every voxel.
    pub(crate) fn axis_maps(&self, shape: [usize; 3]) -> [Arc<AxisMap>; 3] {
        let k = self.window();
        shape.map(|n| Arc::new(AxisMap::same_filter_reflect(n, &k)))
    }
}

fn check_pair(a: &Volume, b: &Volume) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    for v in [a, b] {
        if v.norm_state() != NormState::UnitNormalized {
            return Err(Error::InvalidArgument("metrics need unit-normalized volumes".into()));
        }
    }
    Ok(())
}

/// Indices of voxels selected by `mask` (all voxels when `None`).
fn region(mask: Option<&Volume>, shape: [usize; 3]) -> Result<Option<Vec<usize>>> {
    let Some(m) = mask else { return Ok(None) };
    if m.shape() != shape {
        return Err(Error::ShapeMismatch(format!("mask {:?} vs {:?}", m.shape(), shape)));
    }
    let idx: Vec<usize> = m
        .data()
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > 0.5)
        .map(|(i, _)| i)
        .collect();
    if idx.is_empty() {
        return Err(Error::EmptyMask);
    }
    Ok(Some(idx))
}

fn region_mean(values: &[f64], idx: &Option<Vec<usize>>) -> f64 {
    match idx {
        None => values.iter().sum::<f64>() / values.len() as f64,
        Some(idx) => idx.iter().map(|&i| values[i]).sum::<f64>() / idx.len() as f64,
    }
}

/// Local SSIM value at every voxel.
pub fn ssim_map(a: &Volume, b: &Volume, cfg: &SsimConfig) -> Result<Vec<f64>> {
    check_pair(a, b)?;
    let [d, h, w] = a.shape();
    let maps = cfg.axis_maps(a.shape());
    let blur = |x: Vec<f64>| {
        let mut t = Tensor::new(&[d, h, w], x);
        for (axis, m) in maps.iter().enumerate() {
            t = m.apply(&t, axis);
        }
        t.into_data()
    };
    let (x, y) = (a.data(), b.data());
    let mu_x = blur(x.to_vec());
    let mu_y = blur(y.to_vec());
    let xx = blur(x.iter().map(|v| v * v).collect());
    let yy = blur(y.iter().map(|v| v * v).collect());
    let xy = blur(x.iter().zip(y).map(|(p, q)| p * q).collect());
    let (c1, c2) = (cfg.c1(), cfg.c2());
    Ok((0..x.len())
        .map(|i| {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let vx = xx[i] - mx * mx;
            let vy = yy[i] - my * my;
            let cov = xy[i] - mx * my;
            ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
        })
        .collect())
}

/// Mean SSIM, over `mask` voxels when given.
pub fn ssim(a: &Volume, b: &Volume, mask: Option<&Volume>, cfg: &SsimConfig) -> Result<f64> {
    let map = ssim_map(a, b, cfg)?;
    let idx = region(mask, a.shape())?;
    Ok(region_mean(&map, &idx))
}

fn squared_errors(a: &Volume, b: &Volume) -> Vec<f64> {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).collect()
}

/// PSNR in dB with unit peak; `f64::INFINITY` for identical inputs.
pub fn psnr(a: &Volume, b: &Volume, mask: Option<&Volume>) -> Result<f64> {
    check_pair(a, b)?;
    let idx = region(mask, a.shape())?;
    let mse = region_mean(&squared_errors(a, b), &idx);
    Ok(psnr_from_mse(mse))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

pub fn mae(a: &Volume, b: &Volume, mask: Option<&Volume>) -> Result<f64> {
    check_pair(a, b)?;
    let idx = region(mask, a.shape())?;
    let abs: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).collect();
    Ok(region_mean(&abs, &idx))
}

/// `Σ(a − b)² / Σb²`; `b` is the reference.
pub fn nmse(a: &Volume, b: &Volume, mask: Option<&Volume>) -> Result<f64> {
    check_pair(a, b)?;
    let idx = region(mask, a.shape())?;
    let err = squared_errors(a, b);
    let energy: Vec<f64> = b.data().iter().map(|v| v * v).collect();
    let (num, den) = match &idx {
        None => (err.iter().sum::<f64>(), energy.iter().sum::<f64>()),
        Some(idx) => (
            idx.iter().map(|&i| err[i]).sum::<f64>(),
            idx.iter().map(|&i| energy[i]).sum::<f64>(),
        ),
    };
    if den == 0.0 {
        return Err(Error::ZeroEnergyReference);
    }
    Ok(num / den)
}

/// `0.7·SSIM + 0.1·PSNR + 0.1·(1 − MAE) + 0.1·(1 − NMSE)`.
pub fn weighted_score(ssim: f64, psnr: f64, mae: f64, nmse: f64) -> Result<f64> {
    if ![ssim, psnr, mae, nmse].iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite(format!("score inputs {:?}", [ssim, psnr, mae, nmse])));
    }
    Ok(0.7 * ssim + 0.1 * psnr + 0.1 * (1.0 - mae) + 0.1 * (1.0 - nmse))
}


/// Region for masked metrics: the subject's head mask, else its non-background labels,
/// else a threshold mask of the reference T1.
pub fn evaluation_mask(subject: &Subject) -> Result<Volume> {
    if let Some(m) = &subject.bg_mask {
        return Ok(m.clone());
    }
    if let Some(l) = &subject.labelmap {
        return Ok(l.with_data(l.data().iter().map(|&v| f64::from(u8::from(v != 0.0))).collect()));
    }
    let reference = subject
        .hf
        .as_ref()
        .and_then(|hf| hf.get(&Contrast::T1))
        .ok_or_else(|| Error::MissingPairedData(subject.id.clone()))?;
    background_mask(reference, DEFAULT_MASK_THRESHOLD)
}

pub const DEFAULT_MASK_THRESHOLD: f64 = 0.1;

/// Scores predictions against each subject's HF volumes, matching by position.
pub fn evaluate_predictions(
    predictions: &[ContrastMap],
    subjects: &[Subject],
    ssim_cfg: &SsimConfig,
    aggregation: Aggregation,
) -> Result<MetricReport> {
    if predictions.len() != subjects.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} subjects",
            predictions.len(),
            subjects.len()
        )));
    }
    if subjects.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let reports = predictions
        .iter()
        .zip(subjects)
        .map(|(p, s)| {
            let hf = s.hf.as_ref().ok_or_else(|| Error::MissingPairedData(s.id.clone()))?;
            evaluate_subject(&s.id, p, hf, &evaluation_mask(s)?, ssim_cfg, aggregation)
        })
        .collect::<Result<Vec<_>>>()?;
    MetricReport::merge(&reports, aggregation)
}
