//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits nonzero if any fail.
//!
//! Criteria 6, 7 and 9 share two full toy pipeline runs, which dominate the runtime.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use ulfenc::cyclegan::{
    adversarial_losses, cycle_loss, paired_challenge_loss, ConditioningMode, Direction, Generator, GeneratorConfig,
    DEFAULT_PSNR_CAP,
};
use ulfenc::gradcheck::check_gradients;
use ulfenc::hallucination::{detect_signal_void, hallucination_report, HallucinationMasks, HallucinationSettings};
use ulfenc::metrics::{diff, mae, nmse, psnr, ssim, ssim_map, weighted_score, SsimConfig};
use ulfenc::phantom::{generate_phantom, PhantomParams};
use ulfenc::segmentation::{dice_ce_loss, DiceCeWeights, SegModelConfig, SegNet};
use ulfenc::slab::{enumerate_slabs, extract, stitch};
use ulfenc::trex::{content_loss, psnr_term, sobel_loss, ContentLossWeights, Trex, TrexConfig};
use ulfenc::{Contrast, ContrastMap, Subject, Volume};
use ulfenc_cli::config::DataConfig;
use ulfenc_cli::{run_pipeline, PipelineConfig, PipelineOutcome};
use voxgrad::{Tensor, Var};

/// Rounding tolerance of tabulated weighted scores.
const SCORE_TOL: f64 = 0.0005;
/// Relative tolerance around the reported parameter counts.
const PARAM_TOL: f64 = 0.20;
const STITCH_TOL: f64 = 1e-6;
const RESTRICT_TOL: f64 = 1e-12;
const SSIM_RESTRICT_TOL: f64 = 1e-9;
const VOID_DICE_MIN: f64 = 0.5;
const RERUN_TOL: f64 = 1e-4;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

fn criterion_1() -> Outcome {
    // (ssim, psnr, mae, nmse) -> tabulated weighted score; single models then the combination.
    let rows = [
        ((0.839, 23.154, 0.031, 0.065), 3.093),
        ((0.705, 29.559, 0.068, 0.148), 3.628),
        ((0.816, 22.956, 0.033, 0.068), 3.057),
        ((0.684, 29.601, 0.071, 0.155), 3.616),
        ((0.832, 23.372, 0.031, 0.063), 3.110),
        ((0.711, 30.416, 0.067, 0.141), 3.719),
    ];
    let mut worst: f64 = 0.0;
    for ((s, p, m, n), expected) in rows {
        let got = weighted_score(s, p, m, n).map_err(|e| e.to_string())?;
        worst = worst.max((got - expected).abs());
        check((got - expected).abs() <= SCORE_TOL + 1e-12, || {
            format!("{got} vs {expected}")
        })?;
    }
    Ok(format!("{} rows, max deviation {worst:.2e} <= {SCORE_TOL}", rows.len()))
}

fn within(n: usize, target: f64) -> bool {
    (n as f64 - target).abs() <= PARAM_TOL * target
}

fn criterion_2() -> Outcome {
    let seg = SegNet::new(&SegModelConfig::paper(), 0)
        .map_err(|e| e.to_string())?
        .num_parameters();
    check(within(seg, 62e6), || format!("segmentation {seg}"))?;
    let mut gens = Vec::new();
    for mode in [ConditioningMode::Concat, ConditioningMode::Spade] {
        for dir in [Direction::UlfToHf, Direction::HfToUlf] {
            let n = Generator::new(&GeneratorConfig::paper(mode, dir), 0)
                .map_err(|e| e.to_string())?
                .num_parameters();
            check(within(n, 33e6), || format!("generator {mode:?}/{dir:?} {n}"))?;
            gens.push(n);
        }
    }
    let trex = Trex::new(&TrexConfig::paper(), 0)
        .map_err(|e| e.to_string())?
        .num_parameters();
    check(within(trex, 24e6), || format!("trex {trex}"))?;
    Ok(format!("segmentation {seg}, generators {gens:?}, trex {trex}"))
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(90);
    let labels: Vec<usize> = (0..64).map(|_| rng.random_range(0..6)).collect();
    let mut lines = Vec::new();
    let mut verify = |name: &str, err: f64, tol: f64| {
        lines.push(format!("{name} {err:.1e}"));
        check(err < tol, || format!("{name}: relative error {err:.3e} >= {tol}"))
    };

    let logits = random(&[6, 4, 4, 4], 1, -2.0, 2.0);
    let r = check_gradients(&[logits], 1e-5, |v| {
        dice_ce_loss(&v[0], &labels, DiceCeWeights::default()).unwrap()
    });
    verify("dice_ce", r.max_rel_error, 1e-3)?;

    let (a, b) = (random(&[3, 4, 4, 4], 2, 0.0, 1.0), random(&[3, 4, 4, 4], 3, 0.0, 1.0));
    let r = check_gradients(&[a, b], 1e-6, |v| cycle_loss(&v[0], &v[1]).unwrap());
    verify("cycle", r.max_rel_error, 1e-3)?;

    let (real, fake) = (random(&[1, 4, 4, 4], 4, -1.0, 2.0), random(&[1, 4, 4, 4], 5, -1.0, 2.0));
    let g = check_gradients(&[real.clone(), fake.clone()], 1e-6, |v| {
        adversarial_losses(&v[0], &v[1]).generator
    });
    let d = check_gradients(&[real, fake], 1e-6, |v| adversarial_losses(&v[0], &v[1]).discriminator);
    verify("adversarial", g.max_rel_error.max(d.max_rel_error), 1e-3)?;

    let (a, b) = (random(&[3, 8, 8, 8], 6, 0.0, 1.0), random(&[3, 8, 8, 8], 7, 0.0, 1.0));
    let cfg = SsimConfig::default();
    let r = check_gradients(&[a], 1e-6, |v| {
        paired_challenge_loss(&v[0], &Var::constant(b.clone()), DEFAULT_PSNR_CAP, &cfg).unwrap()
    });
    verify("paired", r.max_rel_error, 1e-2)?;

    let (a, b) = (random(&[3, 8, 8, 8], 8, 0.0, 1.0), random(&[3, 8, 8, 8], 9, 0.0, 1.0));
    let r = check_gradients(&[a, b], 1e-6, |v| sobel_loss(&v[0], &v[1]).unwrap());
    verify("sobel", r.max_rel_error, 1e-3)?;

    let t = random(&[3, 8, 8, 8], 10, 0.0, 1.0);
    let p = t.add(&random(&[3, 8, 8, 8], 11, -0.17, 0.17));
    let tv = Var::constant(t);
    let mse = diff::mse(&Var::constant(p.clone()), &tv).value().item();
    check((0.005..0.02).contains(&mse), || {
        format!("psnr_term instance has MSE {mse}")
    })?;
    let r = check_gradients(&[p], 1e-6, |v| psnr_term(&v[0], &tv, DEFAULT_PSNR_CAP).unwrap());
    verify("psnr_term", r.max_rel_error, 1e-3)?;

    let w = ContentLossWeights {
        w_l1: 1.0,
        w_psnr: 0.01,
        w_sobel: 1.0,
        ..ContentLossWeights::default()
    };
    let (a, b) = (random(&[3, 8, 8, 8], 12, 0.0, 1.0), random(&[3, 8, 8, 8], 13, 0.0, 1.0));
    let r = check_gradients(&[a, b], 1e-6, |v| content_loss(&v[0], &v[1], &w).unwrap());
    verify("content", r.max_rel_error, 1e-2)?;

    Ok(lines.join(", "))
}

fn criterion_4() -> Outcome {
    let mut plans = 0;
    for depth in 1..=64usize {
        for slab in 1..=depth {
            for stride in 1..=slab {
                let brute: Vec<usize> = (0..=depth - slab)
                    .filter(|s| s % stride == 0 || *s == depth - slab)
                    .collect();
                let plan = enumerate_slabs(depth, slab, stride).map_err(|e| e.to_string())?;
                check(plan.starts == brute, || {
                    format!("{depth}/{slab}/{stride}: {:?}", plan.starts)
                })?;
                plans += 1;
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let depth = rng.random_range(1..=64);
        let slab = rng.random_range(1..=depth);
        let stride = rng.random_range(1..=slab);
        let plan = enumerate_slabs(depth, slab, stride).map_err(|e| e.to_string())?;
        let shape = [3, depth, 3, 2];
        let t = Tensor::new(
            &shape,
            (0..shape.iter().product()).map(|_| rng.random::<f64>()).collect(),
        );
        let back = stitch(&extract(&t, &plan), &plan, shape).map_err(|e| e.to_string())?;
        worst = worst.max(back.sub(&t).max_abs());
    }
    check(worst <= STITCH_TOL, || format!("stitch error {worst:e}"))?;
    let starts = enumerate_slabs(50, 40, 5).map_err(|e| e.to_string())?.starts;
    check(starts == [0, 5, 10], || format!("50/40/5 gives {starts:?}"))?;
    Ok(format!(
        "{plans} plans enumerated, stitch error {worst:.1e}, 50/40/5 -> {starts:?}"
    ))
}

fn random_volume(shape: [usize; 3], seed: u64) -> Volume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Volume::unit(
        shape,
        (0..shape.iter().product()).map(|_| rng.random::<f64>()).collect(),
    )
}

fn random_mask(shape: [usize; 3], seed: u64) -> Volume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data: Vec<f64> = (0..shape.iter().product())
        .map(|_| f64::from(rng.random_bool(0.4)))
        .collect();
    data[0] = 1.0;
    Volume::unit(shape, data)
}

fn criterion_5() -> Outcome {
    let e = |r: ulfenc::Result<f64>| r.map_err(|e| e.to_string());
    let cfg = SsimConfig::default();
    let shape = [5, 6, 7];
    let (mut worst, mut worst_ssim): (f64, f64) = (0.0, 0.0);
    for seed in 0..50u64 {
        let (a, b, m) = (
            random_volume(shape, 3 * seed),
            random_volume(shape, 3 * seed + 1),
            random_mask(shape, 3 * seed + 2),
        );
        let keep: Vec<usize> = (0..m.len()).filter(|&i| m.data()[i] > 0.5).collect();
        let pick = |v: &Volume| Volume::unit([keep.len(), 1, 1], keep.iter().map(|&i| v.data()[i]).collect());
        let (ra, rb) = (pick(&a), pick(&b));
        for (masked, oracle) in [
            (e(mae(&a, &b, Some(&m)))?, e(mae(&ra, &rb, None))?),
            (e(nmse(&a, &b, Some(&m)))?, e(nmse(&ra, &rb, None))?),
            (e(psnr(&a, &b, Some(&m)))?, e(psnr(&ra, &rb, None))?),
        ] {
            worst = worst.max((masked - oracle).abs());
        }
        let map = ssim_map(&a, &b, &cfg).map_err(|e| e.to_string())?;
        let oracle = keep.iter().map(|&i| map[i]).sum::<f64>() / keep.len() as f64;
        worst_ssim = worst_ssim.max((e(ssim(&a, &b, Some(&m), &cfg))? - oracle).abs());

        let ones = Volume::unit(shape, vec![1.0; m.len()]);
        for (with, without) in [
            (e(mae(&a, &b, Some(&ones)))?, e(mae(&a, &b, None))?),
            (e(nmse(&a, &b, Some(&ones)))?, e(nmse(&a, &b, None))?),
            (e(psnr(&a, &b, Some(&ones)))?, e(psnr(&a, &b, None))?),
            (e(ssim(&a, &b, Some(&ones), &cfg))?, e(ssim(&a, &b, None, &cfg))?),
        ] {
            check((with - without).abs() <= RESTRICT_TOL, || {
                format!("all-ones mask changes {without} to {with}")
            })?;
        }
    }
    check(worst <= RESTRICT_TOL, || format!("restriction error {worst:e}"))?;
    check(worst_ssim <= SSIM_RESTRICT_TOL, || {
        format!("ssim restriction error {worst_ssim:e}")
    })?;

    let p = e(psnr(
        &Volume::unit([4, 4, 4], vec![0.3; 64]),
        &Volume::unit([4, 4, 4], vec![0.4; 64]),
        None,
    ))?;
    check((p - 20.0).abs() < 1e-9, || format!("MSE 0.01 gives {p} dB"))?;
    let b = random_volume([4, 4, 4], 99);
    let a = b.with_data(b.data().iter().map(|v| 2.0 * v).collect());
    let n = e(nmse(&a, &b, None))?;
    check((n - 1.0).abs() < 1e-12, || format!("a = 2b gives NMSE {n}"))?;
    Ok(format!(
        "restriction {worst:.1e}, ssim restriction {worst_ssim:.1e}, MSE 0.01 -> {p:.6} dB, a = 2b -> NMSE {n}"
    ))
}

fn void_phantom(seed: u64) -> Subject {
    let params = PhantomParams {
        void_probability: 1.0,
        ..PhantomParams::default()
    };
    generate_phantom(&params, seed).unwrap()
}

fn dice(a: &Volume, b: &Volume) -> f64 {
    let (mut inter, mut total) = (0.0, 0.0);
    for (x, y) in a.data().iter().zip(b.data()) {
        let (x, y) = (*x > 0.5, *y > 0.5);
        inter += f64::from(u8::from(x && y));
        total += f64::from(u8::from(x)) + f64::from(u8::from(y));
    }
    2.0 * inter / total
}

fn with_void_filled(s: &Subject, void: &ContrastMap, fill: impl Fn(Contrast) -> f64) -> ContrastMap {
    s.ulf
        .iter()
        .map(|(&c, v)| {
            let data = v
                .data()
                .iter()
                .zip(void[&c].data())
                .map(|(&x, &m)| if m > 0.5 { fill(c) } else { x })
                .collect();
            (c, v.with_data(data))
        })
        .collect()
}

fn criterion_8() -> Outcome {
    let settings = HallucinationSettings::default();
    let mut min_dice = f64::INFINITY;
    for seed in 0..4 {
        let s = void_phantom(seed);
        let masks = HallucinationMasks::from_labels(&s).map_err(|e| e.to_string())?;
        let truth = s.void_mask.as_ref().ok_or("phantom without void")?;
        for c in Contrast::ALL {
            let found = detect_signal_void(
                &s.ulf[&c],
                &masks.brain,
                &masks.head,
                settings.void_threshold,
                settings.smoothing_sigma,
            );
            min_dice = min_dice.min(dice(&found, truth));
        }
    }
    check(min_dice > VOID_DICE_MIN, || format!("void Dice {min_dice}"))?;

    let s = void_phantom(5);
    let masks = HallucinationMasks::from_labels(&s).map_err(|e| e.to_string())?;
    let probe = hallucination_report(&s.ulf, &s, &masks, &settings).map_err(|e| e.to_string())?;
    let brain_level = |c: Contrast| s.ulf[&c].masked_mean(&masks.brain).unwrap();
    let filled = with_void_filled(&s, &probe.void_masks, brain_level);
    let preserved = with_void_filled(&s, &probe.void_masks, |_| 0.0);
    let rf = hallucination_report(&filled, &s, &masks, &settings).map_err(|e| e.to_string())?;
    let rp = hallucination_report(&preserved, &s, &masks, &settings).map_err(|e| e.to_string())?;
    check(rf.contrasts.iter().all(|c| c.flagged), || {
        format!("filling not flagged: {:?}", rf.contrasts)
    })?;
    check(!rp.any_flagged(), || format!("preserving flagged: {:?}", rp.contrasts))?;
    let ratios = |r: &ulfenc::hallucination::HallucinationReport| {
        r.contrasts
            .iter()
            .map(|c| format!("{:.2}", c.hallucination_ratio))
            .collect::<Vec<_>>()
            .join("/")
    };
    Ok(format!(
        "min void Dice {min_dice:.3}, filled ratios {} flagged, preserved ratios {} not flagged",
        ratios(&rf),
        ratios(&rp)
    ))
}

/// The default (toy) configuration with its data and outputs under `root`.
fn toy_config(root: &Path) -> PipelineConfig {
    let defaults = PipelineConfig::default();
    PipelineConfig {
        out_dir: root.join("out"),
        data: DataConfig {
            root: root.join("data"),
            ..defaults.data.clone()
        },
        ..defaults
    }
}

fn criterion_6(cfg: &PipelineConfig, out: &PipelineOutcome) -> Outcome {
    check(cfg.data.n_subjects == 10 && cfg.data.phantom.size == 32, || {
        "not the 10 x 32^3 dataset".into()
    })?;
    check(cfg.data.n_subjects - cfg.data.n_val == 8 && cfg.data.n_val == 2, || {
        "not an 8/2 split".into()
    })?;
    let score = |r: &ulfenc::metrics::MetricReport| r.summary.weighted_masked.unwrap_or(f64::NAN);
    let e = &out.evaluation;
    let (ulf, cg, tx, comb) = (
        score(&e.baseline),
        score(&e.cyclegan),
        score(&e.trex),
        score(&e.combined),
    );
    let line = format!(
        "masked score ULF {ulf:.4}, CycleGAN {cg:.4}, T-REX {tx:.4}, combined {comb:.4} (w = {})",
        out.weight.w
    );
    check(cg > ulf, || format!("CycleGAN does not beat ULF: {line}"))?;
    check(tx > ulf, || format!("T-REX does not beat ULF: {line}"))?;
    check(comb >= cg.max(tx) - 1e-12, || {
        format!("combination below best single model: {line}")
    })?;
    Ok(line)
}

fn criterion_7(out: &PipelineOutcome) -> Outcome {
    let (a, b, c) = (&out.seg_hash_recorded, &out.seg_hash_final, &out.seg_hash_reloaded);
    check(a == b && b == c, || format!("recorded {a}, final {b}, reloaded {c}"))?;
    Ok(format!("sha256 {}... unchanged", &a[..16]))
}

/// Largest numeric difference between two JSON documents of identical structure.
fn json_distance(a: &Value, b: &Value, path: &str) -> Result<f64, String> {
    match (a, b) {
        (Value::Number(x), Value::Number(y)) => Ok((x.as_f64().unwrap() - y.as_f64().unwrap()).abs()),
        (Value::Array(x), Value::Array(y)) if x.len() == y.len() => {
            x.iter().zip(y).enumerate().try_fold(0.0f64, |m, (i, (u, v))| {
                Ok(m.max(json_distance(u, v, &format!("{path}[{i}]"))?))
            })
        }
        (Value::Object(x), Value::Object(y)) if x.len() == y.len() => x.iter().try_fold(0.0f64, |m, (k, u)| {
            let v = y.get(k).ok_or_else(|| format!("{path}.{k} missing"))?;
            Ok(m.max(json_distance(u, v, &format!("{path}.{k}"))?))
        }),
        _ if a == b => Ok(0.0),
        _ => Err(format!("{path}: {a} vs {b}")),
    }
}

fn criterion_9(first: &PipelineOutcome, second: &PipelineOutcome) -> Outcome {
    let (e1, e2) = (&first.evaluation, &second.evaluation);
    let mut worst: f64 = 0.0;
    let mut compared = 0;
    for (name, a, b) in [
        ("ulf", to_json(&e1.baseline), to_json(&e2.baseline)),
        ("cyclegan", to_json(&e1.cyclegan), to_json(&e2.cyclegan)),
        ("trex", to_json(&e1.trex), to_json(&e2.trex)),
        ("combined", to_json(&e1.combined), to_json(&e2.combined)),
        ("table", to_json(&e1.table), to_json(&e2.table)),
        ("weight", to_json(&first.weight), to_json(&second.weight)),
    ] {
        worst = worst.max(json_distance(&a, &b, name)?);
        compared += 1;
    }
    check(worst <= RERUN_TOL, || format!("largest difference {worst:e}"))?;
    Ok(format!("{compared} reports compared, largest difference {worst:.1e}"))
}

fn to_json<T: serde::Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("serializable")
}

fn run(n: usize, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    let secs = start.elapsed().as_secs_f64();
    match &result {
        Ok(detail) => println!("criterion {n}: PASS ({detail}) [{secs:.1}s]"),
        Err(detail) => println!("criterion {n}: FAIL ({detail}) [{secs:.1}s]"),
    }
    result.is_ok()
}

fn main() -> ExitCode {
    let mut ok = Vec::new();
    ok.push(run(1, criterion_1));
    ok.push(run(2, criterion_2));
    ok.push(run(3, criterion_3));
    ok.push(run(4, criterion_4));
    ok.push(run(5, criterion_5));

    let dirs = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (cfg1, cfg2) = (toy_config(dirs.0.path()), toy_config(dirs.1.path()));
    let started = Instant::now();
    let first = run_pipeline(&cfg1).map_err(|e| format!("pipeline failed: {e}"));
    println!("toy pipeline run 1 took {:.1}s", started.elapsed().as_secs_f64());
    ok.push(run(6, || criterion_6(&cfg1, first.as_ref().map_err(Clone::clone)?)));
    ok.push(run(7, || criterion_7(first.as_ref().map_err(Clone::clone)?)));
    ok.push(run(8, criterion_8));
    let started = Instant::now();
    let second = run_pipeline(&cfg2).map_err(|e| format!("pipeline failed: {e}"));
    println!("toy pipeline run 2 took {:.1}s", started.elapsed().as_secs_f64());
    ok.push(run(9, || {
        criterion_9(
            first.as_ref().map_err(Clone::clone)?,
            second.as_ref().map_err(Clone::clone)?,
        )
    }));

    let passed = ok.iter().filter(|&&p| p).count();
    println!("{passed}/{} criteria passed", ok.len());
    if passed == ok.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
