use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use voxgrad::{Adam, AdamConfig, NamedTensors, Var};

use super::generator::{ConditioningMode, Direction, Generator, GeneratorConfig};
use super::loss::{cycle_loss, paired_challenge_loss, penalty_schedule, CycleLossWeights};
use crate::checkpoint::{write_csv, Archive, RunControl};
use crate::enhance::{evaluate_enhancer, masked_score, ConditioningCache, PairedSet, SlabSettings};
use crate::error::{Error, Result};
use crate::gan::{detach, lsgan_discriminator, lsgan_generator, DiscriminatorConfig, PatchDiscriminator};
use crate::metrics::SsimConfig;
use crate::rng::{derive_seed, stream};
use crate::segmentation::FrozenSegNet;
use crate::slab::sample_slab_start;
use crate::volume::Subject;

const STEM: &str = "cyclegan";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CycleGanConfig {
    pub ulf_to_hf: GeneratorConfig,
    pub hf_to_ulf: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
}

impl Default for CycleGanConfig {
    fn default() -> Self {
        Self::with_mode(ConditioningMode::Concat)
    }
}

impl CycleGanConfig {
    pub fn with_mode(mode: ConditioningMode) -> Self {
        Self {
            ulf_to_hf: GeneratorConfig::new(mode, Direction::UlfToHf),
            hf_to_ulf: GeneratorConfig::new(mode, Direction::HfToUlf),
            discriminator: DiscriminatorConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ulf_to_hf.direction != Direction::UlfToHf || self.hf_to_ulf.direction != Direction::HfToUlf {
            return Err(Error::InvalidArgument("generator directions are swapped".into()));
        }
        self.ulf_to_hf.validate()?;
        self.hf_to_ulf.validate()?;
        self.discriminator.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CycleSchedule {
    pub epochs: usize,
    pub slab_depth: usize,
    pub lr: f64,
    pub beta1: f64,
    pub val_every: usize,
    pub seed: u64,
    /// Slab plan for validation inference.
    pub inference: SlabSettings,
    pub ssim: SsimConfig,
}

impl Default for CycleSchedule {
    fn default() -> Self {
        Self {
            epochs: 30,
            slab_depth: 40,
            lr: 2e-4,
            beta1: 0.5,
            val_every: 1,
            seed: 0,
            inference: SlabSettings::default(),
            ssim: SsimConfig::default(),
        }
    }
}

impl CycleSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::EmptySchedule);
        }
        if self.slab_depth == 0 || !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || self.val_every == 0 {
            return Err(Error::InvalidArgument(format!("invalid CycleGAN schedule {self:?}")));
        }
        Ok(())
    }

    fn validates_at(&self, epoch: usize) -> bool {
        epoch == 1 || epoch % self.val_every == 0 || epoch == self.epochs
    }
}

/// Mean training losses for one epoch plus optional validation scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CycleEpoch {
    pub epoch: usize,
    pub lambda_paired: f64,
    pub adversarial_g: f64,
    pub cycle_ulf: f64,
    pub cycle_hf: f64,
    pub paired: f64,
    pub total_g: f64,
    pub discriminator_hf: f64,
    pub discriminator_ulf: f64,
    #[serde(with = "crate::metrics::report::inf_f64_opt")]
    pub val_weighted_masked: Option<f64>,
    #[serde(with = "crate::metrics::report::inf_f64_opt")]
    pub val_weighted_unmasked: Option<f64>,
}

pub const CYCLE_LOG_HEADER: &str = "epoch,lambda_paired,adversarial_g,cycle_ulf,cycle_hf,paired,total_g,\
discriminator_hf,discriminator_ulf,val_weighted_masked,val_weighted_unmasked";

impl CycleEpoch {
    fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        format!(
            "{},{},{:.8},{:.8},{:.8},{:.8},{:.8},{:.8},{:.8},{},{}",
            self.epoch,
            self.lambda_paired,
            self.adversarial_g,
            self.cycle_ulf,
            self.cycle_hf,
            self.paired,
            self.total_g,
            self.discriminator_hf,
            self.discriminator_ulf,
            opt(self.val_weighted_masked),
            opt(self.val_weighted_unmasked)
        )
    }
}

pub struct CycleGanModels {
    pub ulf_to_hf: Generator,
    pub hf_to_ulf: Generator,
    pub d_hf: PatchDiscriminator,
    pub d_ulf: PatchDiscriminator,
}

impl CycleGanModels {
    pub fn new(config: &CycleGanConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            ulf_to_hf: Generator::new(&config.ulf_to_hf, derive_seed(seed, &[0, 0]))?,
            hf_to_ulf: Generator::new(&config.hf_to_ulf, derive_seed(seed, &[0, 1]))?,
            d_hf: PatchDiscriminator::new(3, &config.discriminator, derive_seed(seed, &[0, 2]))?,
            d_ulf: PatchDiscriminator::new(3, &config.discriminator, derive_seed(seed, &[0, 3]))?,
        })
    }

    fn stores(&self) -> [(&'static str, &voxgrad::ParamStore); 4] {
        [
            ("g_ulf_to_hf", &self.ulf_to_hf.store),
            ("g_hf_to_ulf", &self.hf_to_ulf.store),
            ("d_hf", &self.d_hf.store),
            ("d_ulf", &self.d_ulf.store),
        ]
    }

    fn snapshot(&self) -> Vec<NamedTensors> {
        self.stores().iter().map(|(_, s)| s.snapshot()).collect()
    }

    fn restore(&self, snap: &[NamedTensors]) -> Result<()> {
        for ((_, s), t) in self.stores().iter().zip(snap) {
            s.load(t)?;
        }
        Ok(())
    }
}

pub struct CycleGanTraining {
    pub models: CycleGanModels,
    pub history: Vec<CycleEpoch>,
    pub best_epoch: usize,
    pub completed: bool,
}

#[derive(Serialize, Deserialize)]
struct TrainMeta {
    kind: String,
    config: CycleGanConfig,
    weights: CycleLossWeights,
    schedule: CycleSchedule,
    seg_hash: String,
    epochs_done: usize,
    adam_steps: Vec<u64>,
    history: Vec<CycleEpoch>,
    best_epoch: usize,
    #[serde(with = "crate::metrics::report::inf_f64")]
    best_score: f64,
}

/// Joint training of both generator/discriminator pairs on randomly placed slabs, with
/// adversarial, cycle and schedule-weighted paired losses. Keeps the epoch with the best
/// masked validation score (the last epoch without validation subjects).
pub fn train_cyclegan(
    train: &[Subject],
    val: &[Subject],
    seg: &FrozenSegNet,
    config: &CycleGanConfig,
    weights: &CycleLossWeights,
    schedule: &CycleSchedule,
    run: &RunControl,
) -> Result<CycleGanTraining> {
    schedule.validate()?;
    weights.validate()?;
    seg.verify_unchanged()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let data = PairedSet::new(train)?;
    PairedSet::new(val)?;
    let models = CycleGanModels::new(config, schedule.seed)?;
    let adam_cfg = AdamConfig {
        lr: schedule.lr,
        beta1: schedule.beta1,
        ..AdamConfig::default()
    };
    let mut adams: Vec<Adam> = models.stores().iter().map(|(_, s)| Adam::new(s, adam_cfg)).collect();
    let mut history = Vec::new();
    let mut best = models.snapshot();
    let mut best_epoch = 0;
    let mut best_score = f64::NEG_INFINITY;
    let mut start = 0;
    if let Some(a) = run.resume_from(STEM)? {
        let meta: TrainMeta = a.meta()?;
        if meta.config != *config || meta.weights != *weights || meta.schedule != *schedule {
            return Err(Error::Checkpoint(
                "CycleGAN checkpoint was written with a different configuration".into(),
            ));
        }
        if meta.seg_hash != seg.frozen_hash() {
            return Err(Error::Checkpoint(
                "CycleGAN checkpoint was trained against different segmentation weights".into(),
            ));
        }
        for (k, (name, store)) in models.stores().iter().enumerate() {
            store.load(&a.take(name))?;
            best[k] = a.take(&format!("best.{name}"));
            adams[k].load_state(&a.take_adam(&format!("adam.{name}"), meta.adam_steps[k]))?;
        }
        history = meta.history;
        best_epoch = meta.best_epoch;
        best_score = meta.best_score;
        start = meta.epochs_done;
    }

    let mut cache = ConditioningCache::new(seg);
    let CycleGanModels {
        ulf_to_hf: g_uh,
        hf_to_ulf: g_hu,
        d_hf,
        d_ulf,
    } = &models;
    for epoch in start + 1..=schedule.epochs {
        let lambda_paired = penalty_schedule(epoch, weights);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut stream(schedule.seed, &[1, epoch as u64]));
        let mut sums = [0.0f64; 7];
        for (k, &i) in order.iter().enumerate() {
            let depth = data.depth(i);
            let slab = schedule.slab_depth.min(depth);
            let z0 = sample_slab_start(depth, slab, &mut stream(schedule.seed, &[2, epoch as u64, k as u64]))?;
            let (u, h) = data.slab(i, z0, slab);
            let c = Var::constant(cache.probs(i, z0, &u)?);
            let (u, h) = (Var::constant(u), Var::constant(h));

            d_hf.set_trainable(false);
            d_ulf.set_trainable(false);
            let fake_hf = g_uh.run(&u, &c)?;
            let rec_ulf = g_hu.forward(&fake_hf, None)?;
            let fake_ulf = g_hu.forward(&h, None)?;
            let rec_hf = g_uh.run(&fake_ulf, &c)?;
            let adv = lsgan_generator(&d_hf.forward(&fake_hf)?).add(&lsgan_generator(&d_ulf.forward(&fake_ulf)?));
            let cyc_u = cycle_loss(&u, &rec_ulf)?;
            let cyc_h = cycle_loss(&h, &rec_hf)?;
            let paired = paired_challenge_loss(&fake_hf, &h, weights.psnr_cap, &schedule.ssim)?;
            let total = adv
                .mul_scalar(weights.lambda_adv)
                .add(&cyc_u.mul_scalar(weights.lambda_cycle_ulf))
                .add(&cyc_h.mul_scalar(weights.lambda_cycle_hf))
                .add(&paired.mul_scalar(lambda_paired));
            let total_value = total.value().item();
            if !total_value.is_finite() {
                return Err(Error::NonFinite(format!("CycleGAN generator loss at epoch {epoch}")));
            }
            let grads = total.backward();
            adams[0].step(&grads);
            adams[1].step(&grads);
            d_hf.set_trainable(true);
            d_ulf.set_trainable(true);

            let ld_hf = lsgan_discriminator(&d_hf.forward(&h)?, &d_hf.forward(&detach(&fake_hf))?);
            let ld_ulf = lsgan_discriminator(&d_ulf.forward(&u)?, &d_ulf.forward(&detach(&fake_ulf))?);
            let grads = ld_hf.add(&ld_ulf).backward();
            adams[2].step(&grads);
            adams[3].step(&grads);

            for (s, v) in sums.iter_mut().zip([
                adv.value().item(),
                cyc_u.value().item(),
                cyc_h.value().item(),
                paired.value().item(),
                total_value,
                ld_hf.value().item(),
                ld_ulf.value().item(),
            ]) {
                *s += v;
            }
        }
        let n = data.len() as f64;
        let mut row = CycleEpoch {
            epoch,
            lambda_paired,
            adversarial_g: sums[0] / n,
            cycle_ulf: sums[1] / n,
            cycle_hf: sums[2] / n,
            paired: sums[3] / n,
            total_g: sums[4] / n,
            discriminator_hf: sums[5] / n,
            discriminator_ulf: sums[6] / n,
            val_weighted_masked: None,
            val_weighted_unmasked: None,
        };
        if val.is_empty() {
            best = models.snapshot();
            best_epoch = epoch;
        } else if schedule.validates_at(epoch) {
            let report = evaluate_enhancer(g_uh, seg, val, &schedule.inference, &schedule.ssim)?;
            let score = masked_score(&report);
            row.val_weighted_masked = Some(score);
            row.val_weighted_unmasked = report.summary.weighted_unmasked;
            if score > best_score {
                best_score = score;
                best_epoch = epoch;
                best = models.snapshot();
            }
        }
        history.push(row);

        if let Some(path) = run.checkpoint_path(STEM) {
            let mut a = Archive::new(&TrainMeta {
                kind: STEM.into(),
                config: config.clone(),
                weights: weights.clone(),
                schedule: schedule.clone(),
                seg_hash: seg.frozen_hash().to_string(),
                epochs_done: epoch,
                adam_steps: adams.iter().map(Adam::steps_taken).collect(),
                history: history.clone(),
                best_epoch,
                best_score,
            })?;
            for (k, (name, store)) in models.stores().iter().enumerate() {
                a.put(name, &store.snapshot());
                a.put(&format!("best.{name}"), &best[k]);
                a.put_adam(&format!("adam.{name}"), &adams[k].state());
            }
            a.save(&path)?;
        }
        if let Some(path) = run.log_path(STEM) {
            let rows: Vec<String> = history.iter().map(CycleEpoch::csv_row).collect();
            write_csv(&path, CYCLE_LOG_HEADER, &rows)?;
        }
        if epoch < schedule.epochs && run.should_stop(epoch) {
            seg.verify_unchanged()?;
            models.restore(&best)?;
            return Ok(CycleGanTraining {
                models,
                history,
                best_epoch,
                completed: false,
            });
        }
    }
    seg.verify_unchanged()?;
    models.restore(&best)?;
    Ok(CycleGanTraining {
        models,
        history,
        best_epoch,
        completed: true,
    })
}
