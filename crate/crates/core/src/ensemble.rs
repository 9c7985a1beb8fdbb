//! Weighted averaging of two enhancements and grid fitting of the weight.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{evaluation_mask, image_metrics, Aggregation, MetricReport, SsimConfig};
use crate::volume::{Contrast, ContrastMap, Subject, Volume};

/// Scores closer than this count as tied.
const TIE_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleObjective {
    #[default]
    WeightedMasked,
    WeightedUnmasked,
}

impl EnsembleObjective {
    /// Objective of a report; an infinite-PSNR result ranks highest.
    pub fn of(self, report: &MetricReport) -> f64 {
        let v = match self {
            EnsembleObjective::WeightedMasked => report.summary.weighted_masked,
            EnsembleObjective::WeightedUnmasked => report.summary.weighted_unmasked,
        };
        v.unwrap_or(f64::INFINITY)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleSettings {
    pub grid_step: f64,
    pub objective: EnsembleObjective,
    pub aggregation: Aggregation,
    pub ssim: SsimConfig,
}

impl Default for EnsembleSettings {
    fn default() -> Self {
        Self {
            grid_step: 0.05,
            objective: EnsembleObjective::WeightedMasked,
            aggregation: Aggregation::default(),
            ssim: SsimConfig::default(),
        }
    }
}

impl EnsembleSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.grid_step > 0.0 && self.grid_step <= 0.5) {
            return Err(Error::InvalidArgument(format!(
                "grid step {} outside (0, 0.5]",
                self.grid_step
            )));
        }
        Ok(())
    }

    /// `{0, step, 2·step, …, 1}`; 1 is always included.
    pub fn grid(&self) -> Vec<f64> {
        let n = (1.0 / self.grid_step + 1e-9).floor() as usize;
        let mut g: Vec<f64> = (0..=n).map(|k| (k as f64 * self.grid_step).min(1.0)).collect();
        if (1.0 - g[n]).abs() > 1e-9 {
            g.push(1.0);
        } else {
            g[n] = 1.0;
        }
        g
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub w: f64,
    #[serde(with = "crate::metrics::report::inf_f64")]
    pub score: f64,
}

/// Weight `w` on model A (`1 − w` on model B) and how it was chosen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleWeight {
    pub w: f64,
    pub fitted_on: String,
    pub objective: EnsembleObjective,
    pub grid_step: f64,
    pub curve: Vec<CurvePoint>,
}

impl EnsembleWeight {
    /// A weight that was not fitted.
    pub fn fixed(w: f64) -> Result<Self> {
        check_weight(w)?;
        Ok(Self {
            w,
            fitted_on: String::new(),
            objective: EnsembleObjective::default(),
            grid_step: 0.0,
            curve: Vec::new(),
        })
    }

    /// Objective at the chosen weight.
    pub fn score(&self) -> Option<f64> {
        self.curve.iter().find(|p| p.w == self.w).map(|p| p.score)
    }

    pub fn apply(&self, a: &ContrastMap, b: &ContrastMap) -> Result<ContrastMap> {
        combine_maps(a, b, self.w)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("weight serializes");
        std::fs::write(path, text).map_err(|source| Error::Unwritable {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|_| Error::MissingFile(path.to_path_buf()))?;
        let w: Self = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        check_weight(w.w)?;
        Ok(w)
    }
}

fn check_weight(w: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::InvalidArgument(format!("ensemble weight {w} outside [0, 1]")));
    }
    Ok(())
}

/// `w·a + (1 − w)·b` voxelwise, exact at `a = b` and at both endpoints.
pub fn combine(a: &Volume, b: &Volume, w: f64) -> Result<Volume> {
    check_weight(w)?;
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "combine: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if w == 1.0 {
        return Ok(a.clone());
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| y + w * (x - y)).collect();
    Ok(b.with_data(data))
}

pub fn combine_maps(a: &ContrastMap, b: &ContrastMap, w: f64) -> Result<ContrastMap> {
    if !a.keys().eq(b.keys()) {
        return Err(Error::ContrastMismatch(format!(
            "{:?} vs {:?}",
            a.keys().collect::<Vec<_>>(),
            b.keys().collect::<Vec<_>>()
        )));
    }
    a.iter().map(|(&c, v)| Ok((c, combine(v, &b[&c], w)?))).collect()
}

/// One image scored during fitting.
#[derive(Clone, Debug)]
pub struct EnsemblePair {
    pub subject: String,
    pub contrast: Contrast,
    pub a: Volume,
    pub b: Volume,
    pub reference: Volume,
    pub mask: Volume,
}

/// Pairs for every contrast of every subject, masked with [`evaluation_mask`].
pub fn ensemble_pairs(a: &[ContrastMap], b: &[ContrastMap], subjects: &[Subject]) -> Result<Vec<EnsemblePair>> {
    if a.len() != subjects.len() || b.len() != subjects.len() {
        return Err(Error::InvalidArgument(format!(
            "{} / {} outputs for {} subjects",
            a.len(),
            b.len(),
            subjects.len()
        )));
    }
    let mut pairs = Vec::new();
    for ((pa, pb), s) in a.iter().zip(b).zip(subjects) {
        let hf = s.hf.as_ref().ok_or_else(|| Error::MissingPairedData(s.id.clone()))?;
        let mask = evaluation_mask(s)?;
        for (&c, reference) in hf {
            let get = |m: &ContrastMap| {
                m.get(&c)
                    .cloned()
                    .ok_or_else(|| Error::ContrastMismatch(format!("{}: no {c} output", s.id)))
            };
            pairs.push(EnsemblePair {
                subject: s.id.clone(),
                contrast: c,
                a: get(pa)?,
                b: get(pb)?,
                reference: reference.clone(),
                mask: mask.clone(),
            });
        }
    }
    Ok(pairs)
}

/// Objective of the combination at weight `w`, aggregated like a [`MetricReport`].
pub fn ensemble_objective(pairs: &[EnsemblePair], w: f64, settings: &EnsembleSettings) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let images = pairs
        .iter()
        .map(|p| {
            let pred = combine(&p.a, &p.b, w)?;
            image_metrics(&p.subject, p.contrast, &pred, &p.reference, &p.mask, &settings.ssim)
        })
        .collect::<Result<Vec<_>>>()?;
    let report = MetricReport::from_images(images, settings.aggregation)?;
    Ok(settings.objective.of(&report))
}

/// Exhaustive grid search for the weight maximizing the objective; ties go to the
/// weight nearest 0.5.
pub fn fit_weight(pairs: &[EnsemblePair], settings: &EnsembleSettings, fitted_on: &str) -> Result<EnsembleWeight> {
    settings.validate()?;
    if pairs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let curve = settings
        .grid()
        .into_iter()
        .map(|w| {
            Ok(CurvePoint {
                w,
                score: ensemble_objective(pairs, w, settings)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let top = curve.iter().map(|p| p.score).fold(f64::NEG_INFINITY, f64::max);
    let best = curve
        .iter()
        .filter(|p| p.score == top || (top - p.score).abs() <= TIE_TOLERANCE)
        .min_by(|x, y| (x.w - 0.5).abs().total_cmp(&(y.w - 0.5).abs()))
        .ok_or_else(|| Error::NonFinite("ensemble objective is NaN everywhere".into()))?;
    Ok(EnsembleWeight {
        w: best.w,
        fitted_on: fitted_on.to_string(),
        objective: settings.objective,
        grid_step: settings.grid_step,
        curve,
    })
}
