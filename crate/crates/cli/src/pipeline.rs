//! Phase runners shared by the subcommands and the full pipeline.
//!
//! Everything lands under `<out_dir>/<phase>/`. A phase whose final artifact exists is
//! loaded instead of rerun; an interrupted training run resumes from its checkpoint.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use ulfenc::checkpoint::RunControl;
use ulfenc::cyclegan::{infer_cyclegan, train_cyclegan, Generator};
use ulfenc::ensemble::{ensemble_pairs, fit_weight, EnsembleWeight};
use ulfenc::figures::{emit_figures, FigureInputs};
use ulfenc::hallucination::{hallucination_report, write_hallucination_report, HallucinationMasks};
use ulfenc::io::{list_subjects, load_dataset, save_subject, save_volume, split_dataset, DatasetSplit};
use ulfenc::metrics::{evaluate_predictions, MetricReport};
use ulfenc::nn::stack_contrasts;
use ulfenc::phantom::generate_dataset;
use ulfenc::segmentation::{train_segmentation, FrozenSegNet};
use ulfenc::trex::{infer_trex, train_trex, Trex};
use ulfenc::{ContrastMap, Error, Result, Subject};

use crate::config::PipelineConfig;

pub const SEGMENTATION: &str = "segmentation";
pub const CYCLEGAN: &str = "cyclegan";
pub const TREX: &str = "trex";
pub const COMBINATION: &str = "combination";
/// Phase order of a full run.
pub const PHASES: [&str; 4] = [SEGMENTATION, CYCLEGAN, TREX, COMBINATION];

const SEG_MODEL: &str = "model.ckpt";
const SEG_HASH: &str = "weights.sha256";
const CYCLEGAN_MODEL: &str = "generator.ckpt";
const TREX_MODEL: &str = "model.ckpt";
const WEIGHT: &str = "weight.json";
const STAMP: &str = "stamp.json";

fn unwritable(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Unwritable {
        path: path.to_path_buf(),
        source,
    }
}

fn mkdir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(unwritable(dir))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(unwritable(path))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|_| Error::MissingFile(path.to_path_buf()))
}

pub fn phase_dir(cfg: &PipelineConfig, phase: &str) -> PathBuf {
    cfg.out_dir.join(phase)
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn fingerprint(parts: &[serde_json::Value]) -> String {
    sha256_hex(serde_json::to_string(parts).expect("fingerprint serializes").as_bytes())
}

fn json<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("config serializes")
}

#[derive(Serialize, Deserialize)]
struct Stamp {
    phase: String,
    fingerprint: String,
}

/// Records which configuration produced a phase directory, refusing to mix runs.
fn claim_phase_dir(dir: &Path, phase: &str, fingerprint: &str) -> Result<()> {
    mkdir(dir)?;
    let path = dir.join(STAMP);
    if path.is_file() {
        let old: Stamp = serde_json::from_str(&read_text(&path)?)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if old.fingerprint != fingerprint {
            return Err(Error::Config(format!(
                "{} holds {phase} artifacts from a different configuration; use a fresh out_dir",
                dir.display()
            )));
        }
        return Ok(());
    }
    let stamp = Stamp {
        phase: phase.to_string(),
        fingerprint: fingerprint.to_string(),
    };
    write_text(&path, &serde_json::to_string_pretty(&stamp).expect("stamp serializes"))
}

fn seg_fingerprint(cfg: &PipelineConfig, split: &DatasetSplit) -> String {
    fingerprint(&[
        json(&cfg.data),
        json(split),
        json(&cfg.segmentation.model),
        json(&cfg.seg_schedule()),
    ])
}

fn cyclegan_fingerprint(cfg: &PipelineConfig, split: &DatasetSplit) -> String {
    fingerprint(&[
        serde_json::Value::String(seg_fingerprint(cfg, split)),
        json(&cfg.cyclegan.model),
        json(&cfg.cyclegan.loss),
        json(&cfg.cycle_schedule()),
    ])
}

fn trex_fingerprint(cfg: &PipelineConfig, split: &DatasetSplit) -> String {
    fingerprint(&[
        serde_json::Value::String(seg_fingerprint(cfg, split)),
        json(&cfg.trex.model),
        json(&cfg.trex.loss),
        json(&cfg.trex_schedule()),
    ])
}

fn combination_fingerprint(cfg: &PipelineConfig, split: &DatasetSplit) -> String {
    fingerprint(&[
        serde_json::Value::String(cyclegan_fingerprint(cfg, split)),
        serde_json::Value::String(trex_fingerprint(cfg, split)),
        json(&cfg.ensemble_settings()),
    ])
}

/// Writes `count` (default `data.n_subjects`) phantoms into the dataset root.
pub fn generate_phantoms(cfg: &PipelineConfig, count: Option<usize>) -> Result<Vec<String>> {
    let n = count.unwrap_or(cfg.data.n_subjects);
    if n == 0 {
        return Err(Error::InvalidArgument("phantom count must be positive".into()));
    }
    mkdir(&cfg.data.root)?;
    let mut subjects = generate_dataset(&cfg.data.phantom, n, cfg.phantom_seed())?;
    for (i, s) in subjects.iter_mut().enumerate() {
        s.id = format!("phantom-{i:03}");
        save_subject(&cfg.data.root, s)?;
    }
    Ok(subjects.into_iter().map(|s| s.id).collect())
}

/// Subject ids in the dataset root, generating phantoms first when enabled and the root is empty.
pub fn prepare_data(cfg: &PipelineConfig) -> Result<Vec<String>> {
    let root = &cfg.data.root;
    let existing = if root.is_dir() {
        list_subjects(root)?
    } else {
        Vec::new()
    };
    if !existing.is_empty() {
        return Ok(existing);
    }
    if !cfg.data.generate {
        return Err(Error::EmptyDataset);
    }
    generate_phantoms(cfg, None)?;
    list_subjects(root)
}

/// The seeded split, written to `<out_dir>/split.json` on first use.
pub fn ensure_split(cfg: &PipelineConfig, ids: &[String]) -> Result<DatasetSplit> {
    let split = split_dataset(ids, cfg.data.n_val, cfg.split_seed())?;
    let path = cfg.out_dir.join("split.json");
    if path.is_file() {
        let old: DatasetSplit =
            serde_json::from_str(&read_text(&path)?).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if old != split {
            return Err(Error::Config(format!(
                "{} records a different split; use a fresh out_dir",
                path.display()
            )));
        }
        return Ok(split);
    }
    mkdir(&cfg.out_dir)?;
    write_text(&path, &serde_json::to_string_pretty(&split).expect("split serializes"))?;
    Ok(split)
}

pub struct Dataset {
    pub split: DatasetSplit,
    pub train: Vec<Subject>,
    pub val: Vec<Subject>,
}

pub fn load_data(cfg: &PipelineConfig) -> Result<Dataset> {
    let ids = prepare_data(cfg)?;
    let split = ensure_split(cfg, &ids)?;
    let all = load_dataset(&cfg.data.root, &cfg.data.norm)?;
    let pick = |want: &[String]| -> Vec<Subject> { all.iter().filter(|s| want.contains(&s.id)).cloned().collect() };
    Ok(Dataset {
        train: pick(&split.train),
        val: pick(&split.val),
        split,
    })
}

/// Data requirements of every phase, checked before any training.
pub fn preflight(cfg: &PipelineConfig, data: &Dataset) -> Result<()> {
    let tagged = |phase: &str, e: Error| e.in_phase(phase);
    for s in data.train.iter().chain(&data.val) {
        if s.labelmap.is_none() {
            return Err(tagged(SEGMENTATION, Error::MissingLabelmap(s.id.clone())));
        }
    }
    let depth = data.train.first().ok_or(Error::EmptyDataset)?.shape()[0];
    for s in &data.train {
        if s.hf.is_none() {
            return Err(tagged(CYCLEGAN, Error::MissingPairedData(s.id.clone())));
        }
        if s.shape()[0] != depth {
            return Err(Error::ShapeMismatch(format!("{} has depth {}", s.id, s.shape()[0])).in_phase("data"));
        }
    }
    if cfg.cyclegan.schedule.slab_depth > depth {
        return Err(tagged(
            CYCLEGAN,
            Error::InvalidArgument(format!(
                "training slab depth {} exceeds volume depth {depth}",
                cfg.cyclegan.schedule.slab_depth
            )),
        ));
    }
    for s in &data.val {
        if s.hf.is_none() {
            return Err(tagged(COMBINATION, Error::MissingPairedData(s.id.clone())));
        }
    }
    Ok(())
}

/// `None` when training stopped early at `stop_after`.
pub fn segmentation_phase(
    cfg: &PipelineConfig,
    data: &Dataset,
    stop_after: Option<usize>,
) -> Result<Option<FrozenSegNet>> {
    let dir = phase_dir(cfg, SEGMENTATION);
    claim_phase_dir(&dir, SEGMENTATION, &seg_fingerprint(cfg, &data.split))?;
    if dir.join(SEG_MODEL).is_file() {
        return load_segmentation(cfg).map(Some);
    }
    let run = RunControl {
        dir: Some(dir.clone()),
        resume: true,
        stop_after,
    };
    let out = train_segmentation(
        &data.train,
        &data.val,
        &cfg.segmentation.model,
        &cfg.seg_schedule(),
        &run,
    )?;
    if !out.completed {
        return Ok(None);
    }
    out.model.save(&dir.join(SEG_MODEL))?;
    write_text(&dir.join(SEG_HASH), out.model.frozen_hash())?;
    Ok(Some(out.model))
}

/// The frozen segmentation network, checked against the hash recorded when it was trained.
pub fn load_segmentation(cfg: &PipelineConfig) -> Result<FrozenSegNet> {
    let dir = phase_dir(cfg, SEGMENTATION);
    let seg = FrozenSegNet::load(&dir.join(SEG_MODEL))?;
    let recorded = recorded_seg_hash(cfg)?;
    if seg.weights_hash() != recorded {
        return Err(Error::UnfrozenSegmentation {
            before: recorded,
            after: seg.weights_hash(),
        });
    }
    Ok(seg)
}

pub fn recorded_seg_hash(cfg: &PipelineConfig) -> Result<String> {
    Ok(read_text(&phase_dir(cfg, SEGMENTATION).join(SEG_HASH))?
        .trim()
        .to_string())
}

pub fn cyclegan_phase(
    cfg: &PipelineConfig,
    data: &Dataset,
    seg: &FrozenSegNet,
    stop_after: Option<usize>,
) -> Result<Option<Generator>> {
    let dir = phase_dir(cfg, CYCLEGAN);
    claim_phase_dir(&dir, CYCLEGAN, &cyclegan_fingerprint(cfg, &data.split))?;
    if dir.join(CYCLEGAN_MODEL).is_file() {
        return load_cyclegan(cfg).map(Some);
    }
    let run = RunControl {
        dir: Some(dir.clone()),
        resume: true,
        stop_after,
    };
    let c = &cfg.cyclegan;
    let out = train_cyclegan(
        &data.train,
        &data.val,
        seg,
        &c.model,
        &c.loss,
        &cfg.cycle_schedule(),
        &run,
    )?;
    seg.verify_unchanged()?;
    if !out.completed {
        return Ok(None);
    }
    out.models.ulf_to_hf.save(&dir.join(CYCLEGAN_MODEL))?;
    Ok(Some(out.models.ulf_to_hf))
}

pub fn load_cyclegan(cfg: &PipelineConfig) -> Result<Generator> {
    Generator::load(&phase_dir(cfg, CYCLEGAN).join(CYCLEGAN_MODEL))
}

pub fn trex_phase(
    cfg: &PipelineConfig,
    data: &Dataset,
    seg: &FrozenSegNet,
    stop_after: Option<usize>,
) -> Result<Option<Trex>> {
    let dir = phase_dir(cfg, TREX);
    claim_phase_dir(&dir, TREX, &trex_fingerprint(cfg, &data.split))?;
    if dir.join(TREX_MODEL).is_file() {
        return load_trex(cfg).map(Some);
    }
    let run = RunControl {
        dir: Some(dir.clone()),
        resume: true,
        stop_after,
    };
    let t = &cfg.trex;
    let out = train_trex(
        &data.train,
        &data.val,
        seg,
        &t.model,
        &t.loss,
        &cfg.trex_schedule(),
        &run,
    )?;
    seg.verify_unchanged()?;
    if !out.completed {
        return Ok(None);
    }
    out.net.save(&dir.join(TREX_MODEL))?;
    Ok(Some(out.net))
}

pub fn load_trex(cfg: &PipelineConfig) -> Result<Trex> {
    Trex::load(&phase_dir(cfg, TREX).join(TREX_MODEL))
}

pub fn predict_cyclegan(
    cfg: &PipelineConfig,
    g: &Generator,
    seg: &FrozenSegNet,
    subjects: &[Subject],
) -> Result<Vec<ContrastMap>> {
    let settings = &cfg.cycle_schedule().inference;
    subjects
        .iter()
        .map(|s| Ok(infer_cyclegan(g, seg, s, settings)?.volumes))
        .collect()
}

pub fn predict_trex(
    cfg: &PipelineConfig,
    net: &Trex,
    seg: &FrozenSegNet,
    subjects: &[Subject],
) -> Result<Vec<ContrastMap>> {
    let inference = &cfg.trex_schedule().inference;
    subjects
        .iter()
        .map(|s| Ok(infer_trex(net, seg, s, inference)?.volumes))
        .collect()
}

/// Fits the CycleGAN weight (T-REX gets the rest) on the validation subjects and stores it.
pub fn fit_combination(
    cfg: &PipelineConfig,
    data: &Dataset,
    cyclegan: &[ContrastMap],
    trex: &[ContrastMap],
) -> Result<EnsembleWeight> {
    let dir = phase_dir(cfg, COMBINATION);
    claim_phase_dir(&dir, COMBINATION, &combination_fingerprint(cfg, &data.split))?;
    let path = dir.join(WEIGHT);
    if path.is_file() {
        return EnsembleWeight::load(&path);
    }
    let pairs = ensemble_pairs(cyclegan, trex, &data.val)?;
    let w = fit_weight(&pairs, &cfg.ensemble_settings(), "validation")?;
    w.save(&path)?;
    Ok(w)
}

pub fn load_weight(cfg: &PipelineConfig) -> Result<EnsembleWeight> {
    EnsembleWeight::load(&phase_dir(cfg, COMBINATION).join(WEIGHT))
}

/// Metric names in table order.
pub const TABLE_METRICS: [&str; 10] = [
    "ssim_unmasked",
    "psnr_db_unmasked",
    "mae_unmasked",
    "nmse_unmasked",
    "weighted_unmasked",
    "ssim_masked",
    "psnr_db_masked",
    "mae_masked",
    "nmse_masked",
    "weighted_masked",
];

/// Summary metrics side by side, one column per model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    pub columns: Vec<String>,
    pub metrics: Vec<String>,
    /// `values[metric][column]`; `None` for non-finite entries.
    pub values: Vec<Vec<Option<f64>>>,
}

impl MetricTable {
    pub fn new(columns: &[(&str, &MetricReport)]) -> Self {
        let finite = |v: f64| v.is_finite().then_some(v);
        let values = TABLE_METRICS
            .iter()
            .map(|m| {
                columns
                    .iter()
                    .map(|(_, r)| {
                        let s = &r.summary;
                        match *m {
                            "ssim_unmasked" => finite(s.ssim_unmasked),
                            "psnr_db_unmasked" => finite(s.psnr_db_unmasked),
                            "mae_unmasked" => finite(s.mae_unmasked),
                            "nmse_unmasked" => finite(s.nmse_unmasked),
                            "weighted_unmasked" => s.weighted_unmasked,
                            "ssim_masked" => finite(s.ssim_masked),
                            "psnr_db_masked" => finite(s.psnr_db_masked),
                            "mae_masked" => finite(s.mae_masked),
                            "nmse_masked" => finite(s.nmse_masked),
                            _ => s.weighted_masked,
                        }
                    })
                    .collect()
            })
            .collect();
        Self {
            columns: columns.iter().map(|(n, _)| n.to_string()).collect(),
            metrics: TABLE_METRICS.iter().map(|m| m.to_string()).collect(),
            values,
        }
    }

    pub fn get(&self, metric: &str, column: &str) -> Option<f64> {
        let i = self.metrics.iter().position(|m| m == metric)?;
        let j = self.columns.iter().position(|c| c == column)?;
        self.values[i][j]
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("metric,{}\n", self.columns.join(","));
        for (m, row) in self.metrics.iter().zip(&self.values) {
            let cells: Vec<String> = row
                .iter()
                .map(|v| v.map(|x| x.to_string()).unwrap_or_default())
                .collect();
            out.push_str(&format!("{m},{}\n", cells.join(",")));
        }
        out
    }

    /// Writes `<stem>.csv` and `<stem>.json`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        write_text(&dir.join(format!("{stem}.csv")), &self.to_csv())?;
        write_text(
            &dir.join(format!("{stem}.json")),
            &serde_json::to_string_pretty(self).expect("table serializes"),
        )
    }
}

/// Validation outputs of every model.
pub struct ValidationOutputs {
    pub cyclegan: Vec<ContrastMap>,
    pub trex: Vec<ContrastMap>,
    pub combined: Vec<ContrastMap>,
}

impl ValidationOutputs {
    pub fn named(&self) -> [(&'static str, &[ContrastMap]); 3] {
        [
            ("CycleGAN", &self.cyclegan),
            ("T-REX", &self.trex),
            ("Combined", &self.combined),
        ]
    }
}

pub struct Evaluation {
    pub baseline: MetricReport,
    pub cyclegan: MetricReport,
    pub trex: MetricReport,
    pub combined: MetricReport,
    pub table: MetricTable,
}

/// Scores the raw ULF input and every model on the validation subjects and writes one
/// report per column plus the side-by-side table into `dir`.
pub fn evaluate_outputs(
    cfg: &PipelineConfig,
    data: &Dataset,
    outputs: &ValidationOutputs,
    dir: &Path,
) -> Result<Evaluation> {
    mkdir(dir)?;
    let m = &cfg.metrics;
    let score = |preds: &[ContrastMap], stem: &str| -> Result<MetricReport> {
        let r = evaluate_predictions(preds, &data.val, &m.ssim, m.aggregation)?;
        r.save(dir, stem)?;
        Ok(r)
    };
    let ulf: Vec<ContrastMap> = data.val.iter().map(|s| s.ulf.clone()).collect();
    let baseline = score(&ulf, "ulf")?;
    let cyclegan = score(&outputs.cyclegan, "cyclegan")?;
    let trex = score(&outputs.trex, "trex")?;
    let combined = score(&outputs.combined, "combined")?;
    let table = MetricTable::new(&[
        ("ULF", &baseline),
        ("CycleGAN", &cyclegan),
        ("T-REX", &trex),
        ("Combined", &combined),
    ]);
    table.save(dir, "table")?;
    Ok(Evaluation {
        baseline,
        cyclegan,
        trex,
        combined,
        table,
    })
}

/// Hallucination reports for every validation subject and model, with masks from the
/// segmentation network. Returns the number of flagged (subject, model) pairs.
pub fn report_hallucinations(
    cfg: &PipelineConfig,
    data: &Dataset,
    seg: &FrozenSegNet,
    outputs: &ValidationOutputs,
) -> Result<usize> {
    let root = cfg.out_dir.join("hallucination");
    let mut flagged = 0;
    for (i, s) in data.val.iter().enumerate() {
        let masks = HallucinationMasks::from_segmentation(seg, s)?;
        for (name, preds) in outputs.named() {
            let r = hallucination_report(&preds[i], s, &masks, &cfg.hallucination)?;
            write_hallucination_report(&r, s, &preds[i], &root.join(model_dir(name)))?;
            flagged += usize::from(r.any_flagged());
        }
    }
    Ok(flagged)
}

fn model_dir(name: &str) -> String {
    name.to_lowercase().replace('-', "")
}

/// One montage per validation subject under `<out_dir>/figures`.
pub fn write_figures(
    cfg: &PipelineConfig,
    data: &Dataset,
    seg: &FrozenSegNet,
    outputs: &ValidationOutputs,
) -> Result<Vec<PathBuf>> {
    let probs = data
        .val
        .iter()
        .map(|s| Ok(seg.predict(&stack_contrasts(&s.ulf)?)?.probs()))
        .collect::<Result<Vec<_>>>()?;
    let inputs: Vec<FigureInputs> = data
        .val
        .iter()
        .enumerate()
        .map(|(i, s)| FigureInputs {
            subject: s,
            outputs: outputs.named().iter().map(|(n, p)| (n.to_string(), &p[i])).collect(),
            seg_probs: Some(&probs[i]),
        })
        .collect();
    emit_figures(&inputs, &cfg.out_dir.join("figures"))
}

/// Writes each subject's predictions as `<dir>/<id>/<contrast>.nii.gz`.
pub fn write_predictions(dir: &Path, subjects: &[Subject], preds: &[ContrastMap]) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for (s, p) in subjects.iter().zip(preds) {
        let d = dir.join(&s.id);
        mkdir(&d)?;
        for (c, v) in p {
            let path = d.join(format!("{}.nii.gz", c.file_stem()));
            save_volume(v, &path)?;
            written.push(path);
        }
    }
    Ok(written)
}

pub struct PipelineOutcome {
    pub out_dir: PathBuf,
    /// Segmentation hash recorded when its phase finished.
    pub seg_hash_recorded: String,
    /// Hash of the in-memory network after all later phases.
    pub seg_hash_final: String,
    /// Hash of the stored network reloaded after all later phases.
    pub seg_hash_reloaded: String,
    pub weight: EnsembleWeight,
    pub evaluation: Evaluation,
    pub outputs: ValidationOutputs,
    /// Subject/model pairs flagged for hallucination, when reported.
    pub hallucinations_flagged: Option<usize>,
    pub figures: Vec<PathBuf>,
}

fn finished<T>(v: Option<T>, phase: &str) -> Result<T> {
    v.ok_or_else(|| Error::Checkpoint(format!("{phase} stopped before completing")))
}

/// Runs segmentation, CycleGAN, T-REX and combination in order, then the optional reports.
/// Configuration and data requirements are checked before any training; failures carry
/// the phase they occurred in.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineOutcome> {
    cfg.validate().map_err(|e| e.in_phase("config"))?;
    let data = load_data(cfg).map_err(|e| e.in_phase("data"))?;
    preflight(cfg, &data)?;

    let seg = segmentation_phase(cfg, &data, None)
        .and_then(|s| finished(s, SEGMENTATION))
        .map_err(|e| e.in_phase(SEGMENTATION))?;
    let seg_hash_recorded = recorded_seg_hash(cfg).map_err(|e| e.in_phase(SEGMENTATION))?;

    let generator = cyclegan_phase(cfg, &data, &seg, None)
        .and_then(|g| finished(g, CYCLEGAN))
        .map_err(|e| e.in_phase(CYCLEGAN))?;
    let trex = trex_phase(cfg, &data, &seg, None)
        .and_then(|t| finished(t, TREX))
        .map_err(|e| e.in_phase(TREX))?;

    let combine = || -> Result<(EnsembleWeight, ValidationOutputs, Evaluation)> {
        let cyclegan = predict_cyclegan(cfg, &generator, &seg, &data.val)?;
        let trex = predict_trex(cfg, &trex, &seg, &data.val)?;
        let weight = fit_combination(cfg, &data, &cyclegan, &trex)?;
        let combined = cyclegan
            .iter()
            .zip(&trex)
            .map(|(a, b)| weight.apply(a, b))
            .collect::<Result<Vec<_>>>()?;
        let outputs = ValidationOutputs {
            cyclegan,
            trex,
            combined,
        };
        let evaluation = evaluate_outputs(cfg, &data, &outputs, &phase_dir(cfg, COMBINATION))?;
        seg.verify_unchanged()?;
        Ok((weight, outputs, evaluation))
    };
    let (weight, outputs, evaluation) = combine().map_err(|e| e.in_phase(COMBINATION))?;

    let hallucinations_flagged = if cfg.report.hallucination {
        Some(report_hallucinations(cfg, &data, &seg, &outputs).map_err(|e| e.in_phase("report"))?)
    } else {
        None
    };
    let figures = if cfg.report.figures {
        write_figures(cfg, &data, &seg, &outputs).map_err(|e| e.in_phase("report"))?
    } else {
        Vec::new()
    };

    let seg_hash_reloaded = load_segmentation(cfg)
        .map_err(|e| e.in_phase(SEGMENTATION))?
        .weights_hash();
    Ok(PipelineOutcome {
        out_dir: cfg.out_dir.clone(),
        seg_hash_recorded,
        seg_hash_final: seg.weights_hash(),
        seg_hash_reloaded,
        weight,
        evaluation,
        outputs,
        hallucinations_flagged,
        figures,
    })
}
