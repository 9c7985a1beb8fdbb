use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use voxgrad::{Adam, AdamConfig, NamedTensors, Var};

use super::loss::{content_terms, ContentLossWeights};
use super::model::{Trex, TrexConfig};
use super::{infer_trex, TrexInference};
use crate::checkpoint::{write_csv, Archive, RunControl};
use crate::enhance::{masked_score, ConditioningCache, PairedSet};
use crate::error::{Error, Result};
use crate::gan::{detach, lsgan_discriminator, lsgan_generator, DiscriminatorConfig, PatchDiscriminator};
use crate::metrics::{evaluate_predictions, Aggregation, MetricReport, SsimConfig};
use crate::rng::{derive_seed, stream};
use crate::segmentation::FrozenSegNet;
use crate::slab::sample_slab_start;
use crate::volume::Subject;

const STEM: &str = "trex";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrexPhase {
    Adversarial,
    Finetune,
}

impl TrexPhase {
    fn as_str(self) -> &'static str {
        match self {
            TrexPhase::Adversarial => "adversarial",
            TrexPhase::Finetune => "finetune",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrexSchedule {
    pub epochs_adversarial: usize,
    pub epochs_finetune: usize,
    /// Training slab depth; `None` trains on whole volumes.
    pub slab_depth: Option<usize>,
    pub lr: f64,
    pub beta1: f64,
    pub lambda_adv: f64,
    pub discriminator: DiscriminatorConfig,
    pub val_every: usize,
    pub seed: u64,
    pub inference: TrexInference,
    pub ssim: SsimConfig,
}

impl Default for TrexSchedule {
    fn default() -> Self {
        Self {
            epochs_adversarial: 100,
            epochs_finetune: 10,
            slab_depth: Some(40),
            lr: 2e-4,
            beta1: 0.5,
            lambda_adv: 1.0,
            discriminator: DiscriminatorConfig::default(),
            val_every: 1,
            seed: 0,
            inference: TrexInference::default(),
            ssim: SsimConfig::default(),
        }
    }
}

impl TrexSchedule {
    pub fn total_epochs(&self) -> usize {
        self.epochs_adversarial + self.epochs_finetune
    }

    pub fn phase(&self, epoch: usize) -> TrexPhase {
        if epoch <= self.epochs_adversarial {
            TrexPhase::Adversarial
        } else {
            TrexPhase::Finetune
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_epochs() == 0 {
            return Err(Error::EmptySchedule);
        }
        let bad = self.slab_depth == Some(0)
            || !(self.lr > 0.0)
            || !(0.0..1.0).contains(&self.beta1)
            || !(self.lambda_adv >= 0.0)
            || self.val_every == 0;
        if bad {
            return Err(Error::InvalidArgument(format!("invalid T-REX schedule {self:?}")));
        }
        self.discriminator.validate()?;
        self.inference.validate()
    }

    fn validates_at(&self, epoch: usize) -> bool {
        epoch == 1 || epoch % self.val_every == 0 || epoch == self.total_epochs() || epoch == self.epochs_adversarial
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrexEpoch {
    pub epoch: usize,
    pub phase: TrexPhase,
    pub adversarial_g: f64,
    pub l1: f64,
    pub psnr: f64,
    pub sobel: f64,
    pub content: f64,
    pub total_g: f64,
    pub discriminator: f64,
    pub discriminator_updates: usize,
    #[serde(with = "crate::metrics::report::inf_f64_opt")]
    pub val_weighted_masked: Option<f64>,
    #[serde(with = "crate::metrics::report::inf_f64_opt")]
    pub val_weighted_unmasked: Option<f64>,
}

pub const TREX_LOG_HEADER: &str = "epoch,phase,adversarial_g,l1,psnr,sobel,content,total_g,\
discriminator,discriminator_updates,val_weighted_masked,val_weighted_unmasked";

impl TrexEpoch {
    fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        format!(
            "{},{},{:.8},{:.8},{:.8},{:.8},{:.8},{:.8},{:.8},{},{},{}",
            self.epoch,
            self.phase.as_str(),
            self.adversarial_g,
            self.l1,
            self.psnr,
            self.sobel,
            self.content,
            self.total_g,
            self.discriminator,
            self.discriminator_updates,
            opt(self.val_weighted_masked),
            opt(self.val_weighted_unmasked)
        )
    }
}

pub struct TrexTraining {
    /// Generator restored to the best validation epoch.
    pub net: Trex,
    /// Discriminator as left by the last epoch.
    pub discriminator: PatchDiscriminator,
    pub history: Vec<TrexEpoch>,
    pub best_epoch: usize,
    pub completed: bool,
}

#[derive(Serialize, Deserialize)]
struct TrainMeta {
    kind: String,
    config: TrexConfig,
    weights: ContentLossWeights,
    schedule: TrexSchedule,
    seg_hash: String,
    epochs_done: usize,
    adam_steps: [u64; 2],
    history: Vec<TrexEpoch>,
    best_epoch: usize,
    #[serde(with = "crate::metrics::report::inf_f64")]
    best_score: f64,
}

/// Enhances `subjects` with `net` and scores them against their HF volumes.
pub fn evaluate_trex(
    net: &Trex,
    seg: &FrozenSegNet,
    subjects: &[Subject],
    inference: &TrexInference,
    ssim: &SsimConfig,
) -> Result<MetricReport> {
    let preds = subjects
        .iter()
        .map(|s| Ok(infer_trex(net, seg, s, inference)?.volumes))
        .collect::<Result<Vec<_>>>()?;
    evaluate_predictions(&preds, subjects, ssim, Aggregation::default())
}

/// Conditional least-squares GAN training with the content loss, followed by content-only
/// fine-tuning with the discriminator untouched. Keeps the generator from the epoch with
/// the best masked validation score (the last epoch without validation subjects).
pub fn train_trex(
    train: &[Subject],
    val: &[Subject],
    seg: &FrozenSegNet,
    config: &TrexConfig,
    weights: &ContentLossWeights,
    schedule: &TrexSchedule,
    run: &RunControl,
) -> Result<TrexTraining> {
    schedule.validate()?;
    weights.validate()?;
    seg.verify_unchanged()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let data = PairedSet::new(train)?;
    PairedSet::new(val)?;
    let net = Trex::new(config, derive_seed(schedule.seed, &[0, 0]))?;
    let disc = PatchDiscriminator::new(6, &schedule.discriminator, derive_seed(schedule.seed, &[0, 1]))?;
    let adam_cfg = AdamConfig {
        lr: schedule.lr,
        beta1: schedule.beta1,
        ..AdamConfig::default()
    };
    let mut adam_g = Adam::new(&net.store, adam_cfg);
    let mut adam_d = Adam::new(&disc.store, adam_cfg);
    let mut history = Vec::new();
    let mut best: NamedTensors = net.store.snapshot();
    let mut best_epoch = 0;
    let mut best_score = f64::NEG_INFINITY;
    let mut start = 0;
    if let Some(a) = run.resume_from(STEM)? {
        let meta: TrainMeta = a.meta()?;
        if meta.config != *config || meta.weights != *weights || meta.schedule != *schedule {
            return Err(Error::Checkpoint(
                "T-REX checkpoint was written with a different configuration".into(),
            ));
        }
        if meta.seg_hash != seg.frozen_hash() {
            return Err(Error::Checkpoint(
                "T-REX checkpoint was trained against different segmentation weights".into(),
            ));
        }
        net.store.load(&a.take("net"))?;
        disc.store.load(&a.take("disc"))?;
        best = a.take("best.net");
        adam_g.load_state(&a.take_adam("adam.net", meta.adam_steps[0]))?;
        adam_d.load_state(&a.take_adam("adam.disc", meta.adam_steps[1]))?;
        history = meta.history;
        best_epoch = meta.best_epoch;
        best_score = meta.best_score;
        start = meta.epochs_done;
    }

    let mut cache = ConditioningCache::new(seg);
    let total_epochs = schedule.total_epochs();
    for epoch in start + 1..=total_epochs {
        let phase = schedule.phase(epoch);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut stream(schedule.seed, &[1, epoch as u64]));
        let mut sums = [0.0f64; 7];
        let mut d_updates = 0;
        for (k, &i) in order.iter().enumerate() {
            let depth = data.depth(i);
            let slab = schedule.slab_depth.unwrap_or(depth).min(depth);
            let z0 = sample_slab_start(depth, slab, &mut stream(schedule.seed, &[2, epoch as u64, k as u64]))?;
            let (u, h) = data.slab(i, z0, slab);
            let c = Var::constant(cache.probs(i, z0, &u)?);
            let (u, h) = (Var::constant(u), Var::constant(h));

            disc.set_trainable(false);
            let fake = net.run(&u, &c)?;
            let terms = content_terms(&fake, &h, weights)?;
            let adv = match phase {
                TrexPhase::Adversarial => Some(lsgan_generator(
                    &disc.forward(&Var::concat(&[u.clone(), fake.clone()], 0))?,
                )),
                TrexPhase::Finetune => None,
            };
            let total = match &adv {
                Some(a) => a.mul_scalar(schedule.lambda_adv).add(&terms.total),
                None => terms.total.clone(),
            };
            let total_value = total.value().item();
            if !total_value.is_finite() {
                return Err(Error::NonFinite(format!("T-REX generator loss at epoch {epoch}")));
            }
            adam_g.step(&total.backward());
            disc.set_trainable(true);

            let mut ld_value = 0.0;
            if phase == TrexPhase::Adversarial {
                let real = disc.forward(&Var::concat(&[u.clone(), h.clone()], 0))?;
                let fake_score = disc.forward(&Var::concat(&[u.clone(), detach(&fake)], 0))?;
                let ld = lsgan_discriminator(&real, &fake_score);
                ld_value = ld.value().item();
                adam_d.step(&ld.backward());
                d_updates += 1;
            }

            let item = |v: &Option<Var>| v.as_ref().map_or(0.0, |v| v.value().item());
            for (s, v) in sums.iter_mut().zip([
                item(&adv),
                item(&terms.l1),
                item(&terms.psnr),
                item(&terms.sobel),
                terms.total.value().item(),
                total_value,
                ld_value,
            ]) {
                *s += v;
            }
        }
        let n = data.len() as f64;
        let mut row = TrexEpoch {
            epoch,
            phase,
            adversarial_g: sums[0] / n,
            l1: sums[1] / n,
            psnr: sums[2] / n,
            sobel: sums[3] / n,
            content: sums[4] / n,
            total_g: sums[5] / n,
            discriminator: sums[6] / n,
            discriminator_updates: d_updates,
            val_weighted_masked: None,
            val_weighted_unmasked: None,
        };
        if val.is_empty() {
            best = net.store.snapshot();
            best_epoch = epoch;
        } else if schedule.validates_at(epoch) {
            let report = evaluate_trex(&net, seg, val, &schedule.inference, &schedule.ssim)?;
            let score = masked_score(&report);
            row.val_weighted_masked = Some(score);
            row.val_weighted_unmasked = report.summary.weighted_unmasked;
            if score > best_score {
                best_score = score;
                best_epoch = epoch;
                best = net.store.snapshot();
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
                adam_steps: [adam_g.steps_taken(), adam_d.steps_taken()],
                history: history.clone(),
                best_epoch,
                best_score,
            })?;
            a.put("net", &net.store.snapshot());
            a.put("disc", &disc.store.snapshot());
            a.put("best.net", &best);
            a.put_adam("adam.net", &adam_g.state());
            a.put_adam("adam.disc", &adam_d.state());
            a.save(&path)?;
        }
        if let Some(path) = run.log_path(STEM) {
            let rows: Vec<String> = history.iter().map(TrexEpoch::csv_row).collect();
            write_csv(&path, TREX_LOG_HEADER, &rows)?;
        }
        if epoch < total_epochs && run.should_stop(epoch) {
            return finish(net, disc, &best, history, best_epoch, false, seg);
        }
    }
    finish(net, disc, &best, history, best_epoch, true, seg)
}

fn finish(
    net: Trex,
    discriminator: PatchDiscriminator,
    best: &NamedTensors,
    history: Vec<TrexEpoch>,
    best_epoch: usize,
    completed: bool,
    seg: &FrozenSegNet,
) -> Result<TrexTraining> {
    seg.verify_unchanged()?;
    net.store.load(best)?;
    Ok(TrexTraining {
        net,
        discriminator,
        history,
        best_epoch,
        completed,
    })
}
