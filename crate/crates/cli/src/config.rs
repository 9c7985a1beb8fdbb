//! Pipeline configuration, read from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use ulfenc::cyclegan::{CycleGanConfig, CycleLossWeights, CycleSchedule};
use ulfenc::enhance::SlabSettings;
use ulfenc::ensemble::EnsembleSettings;
use ulfenc::hallucination::HallucinationSettings;
use ulfenc::metrics::{Aggregation, SsimConfig};
use ulfenc::phantom::PhantomParams;
use ulfenc::rng::derive_seed;
use ulfenc::segmentation::{SegModelConfig, SegSchedule};
use ulfenc::trex::{ContentLossWeights, TrexConfig, TrexSchedule};
use ulfenc::volume::IntensityNorm;
use ulfenc::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset root in the `<id>/{ulf,hf}/<contrast>.nii.gz` layout.
    pub root: PathBuf,
    /// Generate phantoms into `root` when it holds no subjects.
    pub generate: bool,
    pub n_subjects: usize,
    /// Subjects held out for validation, weight fitting and reporting.
    pub n_val: usize,
    pub norm: IntensityNorm,
    pub phantom: PhantomParams,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data"),
            generate: true,
            n_subjects: 10,
            n_val: 2,
            norm: IntensityNorm::Clamp,
            phantom: PhantomParams::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentationSection {
    pub model: SegModelConfig,
    pub schedule: SegSchedule,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CycleGanSection {
    pub model: CycleGanConfig,
    pub loss: CycleLossWeights,
    pub schedule: CycleSchedule,
}

impl Default for CycleGanSection {
    fn default() -> Self {
        Self {
            model: CycleGanConfig::default(),
            loss: CycleLossWeights {
                lambda_paired_max: 5.0,
                ..CycleLossWeights::default()
            },
            schedule: CycleSchedule {
                epochs: 30,
                slab_depth: 16,
                lr: 1e-3,
                val_every: 5,
                inference: SlabSettings {
                    slab_depth: Some(16),
                    stride: 4,
                    ..SlabSettings::default()
                },
                ..CycleSchedule::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrexSection {
    pub model: TrexConfig,
    pub loss: ContentLossWeights,
    pub schedule: TrexSchedule,
}

impl Default for TrexSection {
    fn default() -> Self {
        Self {
            model: TrexConfig::default(),
            loss: ContentLossWeights::default(),
            schedule: TrexSchedule {
                epochs_adversarial: 20,
                epochs_finetune: 2,
                val_every: 5,
                ..TrexSchedule::default()
            },
        }
    }
}

/// Settings shared by every evaluation, including validation during training and
/// ensemble fitting.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSection {
    pub ssim: SsimConfig,
    pub aggregation: Aggregation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportSection {
    /// Write hallucination reports for every validation subject and model.
    pub hallucination: bool,
    /// Write slice montages for every validation subject.
    pub figures: bool,
}

impl Default for ReportSection {
    fn default() -> Self {
        Self {
            hallucination: true,
            figures: true,
        }
    }
}

/// Everything a pipeline run depends on. The defaults are the desk-scale toy setup.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Master seed; phantom, split and training seeds derive from it.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub segmentation: SegmentationSection,
    pub cyclegan: CycleGanSection,
    pub trex: TrexSection,
    pub metrics: MetricsSection,
    pub ensemble: EnsembleSettings,
    pub hallucination: HallucinationSettings,
    pub report: ReportSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            out_dir: PathBuf::from("runs/toy"),
            data: DataConfig::default(),
            segmentation: SegmentationSection::default(),
            cyclegan: CycleGanSection::default(),
            trex: TrexSection::default(),
            metrics: MetricsSection::default(),
            ensemble: EnsembleSettings::default(),
            hallucination: HallucinationSettings::default(),
            report: ReportSection::default(),
        }
    }
}

/// Seed-stream indices per consumer.
mod stream {
    pub const PHANTOMS: u64 = 0;
    pub const SPLIT: u64 = 1;
    pub const SEGMENTATION: u64 = 2;
    pub const CYCLEGAN: u64 = 3;
    pub const TREX: u64 = 4;
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Reads a config file; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|_| Error::MissingFile(path.to_path_buf()))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.out_dir, &mut cfg.data.root] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Checks every section and the dataset location without touching the disk otherwise.
    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.n_val == 0 {
            return Err(Error::Config("data.n_val must be at least 1".into()));
        }
        if d.generate {
            if d.n_subjects <= d.n_val {
                return Err(Error::Config(format!(
                    "data.n_subjects ({}) must exceed data.n_val ({})",
                    d.n_subjects, d.n_val
                )));
            }
            d.phantom.validate()?;
        } else if !d.root.is_dir() {
            return Err(Error::MissingFile(d.root.clone()));
        }
        if let IntensityNorm::Percentile { lo_pct, hi_pct } = d.norm {
            if !(0.0..hi_pct).contains(&lo_pct) || hi_pct > 100.0 {
                return Err(Error::Config(format!("bad percentiles {lo_pct}..{hi_pct}")));
            }
        }
        self.segmentation.model.validate()?;
        self.segmentation.schedule.validate()?;
        self.cyclegan.model.validate()?;
        self.cyclegan.loss.validate()?;
        self.cyclegan.schedule.validate()?;
        self.trex.model.validate()?;
        self.trex.loss.validate()?;
        self.trex.schedule.validate()?;
        self.ensemble.validate()?;
        self.hallucination.validate()
    }

    pub fn phantom_seed(&self) -> u64 {
        derive_seed(self.seed, &[stream::PHANTOMS])
    }

    pub fn split_seed(&self) -> u64 {
        derive_seed(self.seed, &[stream::SPLIT])
    }

    /// Segmentation schedule with the derived seed.
    pub fn seg_schedule(&self) -> SegSchedule {
        SegSchedule {
            seed: derive_seed(self.seed, &[stream::SEGMENTATION]),
            ..self.segmentation.schedule.clone()
        }
    }

    /// CycleGAN schedule with the derived seed and the shared metric settings.
    pub fn cycle_schedule(&self) -> CycleSchedule {
        CycleSchedule {
            seed: derive_seed(self.seed, &[stream::CYCLEGAN]),
            ssim: self.metrics.ssim,
            ..self.cyclegan.schedule.clone()
        }
    }

    /// T-REX schedule with the derived seed and the shared metric settings.
    pub fn trex_schedule(&self) -> TrexSchedule {
        TrexSchedule {
            seed: derive_seed(self.seed, &[stream::TREX]),
            ssim: self.metrics.ssim,
            ..self.trex.schedule.clone()
        }
    }

    pub fn ensemble_settings(&self) -> EnsembleSettings {
        EnsembleSettings {
            ssim: self.metrics.ssim,
            aggregation: self.metrics.aggregation,
            ..self.ensemble.clone()
        }
    }
}
