use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ulfenc::{ContrastMap, Error, Result, Subject};
use ulfenc_cli::pipeline::{self, Dataset, ValidationOutputs};
use ulfenc_cli::PipelineConfig;

#[derive(Parser)]
#[command(name = "ulfenc", version, about = "Ultra-low-field MRI enhancement pipeline")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Pipeline configuration (TOML).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override `out_dir`.
    #[arg(long, global = true, value_name = "DIR")]
    out_dir: Option<PathBuf>,
    /// Override `data.root`.
    #[arg(long, global = true, value_name = "DIR")]
    data_root: Option<PathBuf>,
    /// Override the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic phantoms into the dataset root.
    PhantomGenerate {
        #[arg(long)]
        count: Option<usize>,
    },
    /// Record the train/validation split.
    Split,
    /// Train (or resume) the segmentation network.
    SegTrain(Train),
    /// Train (or resume) the CycleGAN; needs a trained segmentation network.
    CycleganTrain(Train),
    /// Train (or resume) T-REX; needs a trained segmentation network.
    TrexTrain(Train),
    /// Write enhanced volumes as NIfTI.
    Infer {
        #[arg(long, value_enum, default_value_t = Model::Combined)]
        model: Model,
        #[arg(long, value_enum, default_value_t = Subjects::Val)]
        subjects: Subjects,
    },
    /// Fit the combination weight on the validation subjects.
    EnsembleFit,
    /// Score ULF, both models and the combination on the validation subjects.
    Evaluate,
    /// Write hallucination reports for the validation subjects.
    Hallucinate,
    /// Write slice montages for the validation subjects.
    Figures,
    /// Run every phase in order, resuming where a previous run stopped.
    Pipeline,
}

#[derive(Args)]
struct Train {
    /// Stop after this many epochs (checkpointed; rerun to resume).
    #[arg(long)]
    stop_after: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Model {
    Cyclegan,
    Trex,
    Combined,
}

#[derive(Clone, Copy, ValueEnum)]
enum Subjects {
    Train,
    Val,
    All,
}

fn load_config(common: &Common) -> Result<PipelineConfig> {
    let path = common
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config is required".into()))?;
    let mut cfg = PipelineConfig::load(path)?;
    if let Some(d) = &common.out_dir {
        cfg.out_dir = d.clone();
    }
    if let Some(d) = &common.data_root {
        cfg.data.root = d.clone();
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn report_stop(phase: &str, stopped: bool) {
    if stopped {
        println!("{phase}: stopped early; rerun to resume");
    } else {
        println!("{phase}: done");
    }
}

struct Models {
    seg: ulfenc::segmentation::FrozenSegNet,
    data: Dataset,
}

fn with_models(cfg: &PipelineConfig) -> Result<Models> {
    let data = pipeline::load_data(cfg)?;
    let seg = pipeline::load_segmentation(cfg)?;
    Ok(Models { seg, data })
}

/// Validation outputs of both trained models and their stored combination.
fn validation_outputs(cfg: &PipelineConfig, m: &Models) -> Result<ValidationOutputs> {
    let g = pipeline::load_cyclegan(cfg)?;
    let t = pipeline::load_trex(cfg)?;
    let cyclegan = pipeline::predict_cyclegan(cfg, &g, &m.seg, &m.data.val)?;
    let trex = pipeline::predict_trex(cfg, &t, &m.seg, &m.data.val)?;
    let w = pipeline::load_weight(cfg)?;
    let combined = cyclegan
        .iter()
        .zip(&trex)
        .map(|(a, b)| w.apply(a, b))
        .collect::<Result<Vec<_>>>()?;
    Ok(ValidationOutputs {
        cyclegan,
        trex,
        combined,
    })
}

fn predict(cfg: &PipelineConfig, m: &Models, model: Model, subjects: &[Subject]) -> Result<Vec<ContrastMap>> {
    let cyclegan = || pipeline::predict_cyclegan(cfg, &pipeline::load_cyclegan(cfg)?, &m.seg, subjects);
    let trex = || pipeline::predict_trex(cfg, &pipeline::load_trex(cfg)?, &m.seg, subjects);
    match model {
        Model::Cyclegan => cyclegan(),
        Model::Trex => trex(),
        Model::Combined => {
            let w = pipeline::load_weight(cfg)?;
            cyclegan()?.iter().zip(&trex()?).map(|(a, b)| w.apply(a, b)).collect()
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(&cli.common).map_err(|e| e.in_phase("config"))?;
    match &cli.command {
        Command::PhantomGenerate { count } => {
            let ids = pipeline::generate_phantoms(&cfg, *count).map_err(|e| e.in_phase("data"))?;
            println!("wrote {} phantoms to {}", ids.len(), cfg.data.root.display());
        }
        Command::Split => {
            let ids = pipeline::prepare_data(&cfg).map_err(|e| e.in_phase("data"))?;
            let split = pipeline::ensure_split(&cfg, &ids).map_err(|e| e.in_phase("data"))?;
            println!("train {:?}\nval {:?}", split.train, split.val);
        }
        Command::SegTrain(t) => {
            let phase = pipeline::SEGMENTATION;
            let data = pipeline::load_data(&cfg).map_err(|e| e.in_phase("data"))?;
            let seg = pipeline::segmentation_phase(&cfg, &data, t.stop_after).map_err(|e| e.in_phase(phase))?;
            report_stop(phase, seg.is_none());
        }
        Command::CycleganTrain(t) => {
            let phase = pipeline::CYCLEGAN;
            let m = with_models(&cfg).map_err(|e| e.in_phase(phase))?;
            let g = pipeline::cyclegan_phase(&cfg, &m.data, &m.seg, t.stop_after).map_err(|e| e.in_phase(phase))?;
            report_stop(phase, g.is_none());
        }
        Command::TrexTrain(t) => {
            let phase = pipeline::TREX;
            let m = with_models(&cfg).map_err(|e| e.in_phase(phase))?;
            let net = pipeline::trex_phase(&cfg, &m.data, &m.seg, t.stop_after).map_err(|e| e.in_phase(phase))?;
            report_stop(phase, net.is_none());
        }
        Command::Infer { model, subjects } => {
            let go = || -> Result<usize> {
                let m = with_models(&cfg)?;
                let chosen: Vec<Subject> = match subjects {
                    Subjects::Train => m.data.train.clone(),
                    Subjects::Val => m.data.val.clone(),
                    Subjects::All => m.data.train.iter().chain(&m.data.val).cloned().collect(),
                };
                let preds = predict(&cfg, &m, *model, &chosen)?;
                let name = model.to_possible_value().expect("named variant").get_name().to_string();
                Ok(pipeline::write_predictions(&cfg.out_dir.join("infer").join(name), &chosen, &preds)?.len())
            };
            let n = go().map_err(|e| e.in_phase("infer"))?;
            println!("wrote {n} volumes");
        }
        Command::EnsembleFit => {
            let go = || -> Result<f64> {
                let m = with_models(&cfg)?;
                let a = pipeline::predict_cyclegan(&cfg, &pipeline::load_cyclegan(&cfg)?, &m.seg, &m.data.val)?;
                let b = pipeline::predict_trex(&cfg, &pipeline::load_trex(&cfg)?, &m.seg, &m.data.val)?;
                Ok(pipeline::fit_combination(&cfg, &m.data, &a, &b)?.w)
            };
            let w = go().map_err(|e| e.in_phase(pipeline::COMBINATION))?;
            println!("weight on CycleGAN: {w}");
        }
        Command::Evaluate => {
            let go = || -> Result<pipeline::MetricTable> {
                let m = with_models(&cfg)?;
                let outputs = validation_outputs(&cfg, &m)?;
                Ok(pipeline::evaluate_outputs(&cfg, &m.data, &outputs, &cfg.out_dir.join("evaluate"))?.table)
            };
            let table = go().map_err(|e| e.in_phase("evaluate"))?;
            print!("{}", table.to_csv());
        }
        Command::Hallucinate => {
            let go = || -> Result<usize> {
                let m = with_models(&cfg)?;
                let outputs = validation_outputs(&cfg, &m)?;
                pipeline::report_hallucinations(&cfg, &m.data, &m.seg, &outputs)
            };
            let flagged = go().map_err(|e| e.in_phase("report"))?;
            println!("{flagged} subject/model pairs flagged");
        }
        Command::Figures => {
            let go = || -> Result<usize> {
                let m = with_models(&cfg)?;
                let outputs = validation_outputs(&cfg, &m)?;
                Ok(pipeline::write_figures(&cfg, &m.data, &m.seg, &outputs)?.len())
            };
            let n = go().map_err(|e| e.in_phase("report"))?;
            println!("wrote {n} figures");
        }
        Command::Pipeline => {
            let out = ulfenc_cli::run_pipeline(&cfg)?;
            print!("{}", out.evaluation.table.to_csv());
            println!("weight on CycleGAN: {}", out.weight.w);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
