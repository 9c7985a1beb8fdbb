use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ulfenc::checkpoint::RunControl;
use ulfenc::enhance::SlabSettings;
use ulfenc::gradcheck::check_gradients;
use ulfenc::metrics::{diff, evaluate_predictions, Aggregation, SsimConfig};
use ulfenc::phantom::{generate_dataset, generate_phantom, PhantomParams};
use ulfenc::segmentation::{FrozenSegNet, SegModelConfig, SegNet};
use ulfenc::trex::*;
use ulfenc::{Contrast, Error, Subject};
use voxgrad::{Tensor, Var};

fn random(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

fn constant(shape: &[usize], v: f64) -> Var {
    Var::constant(Tensor::full(shape, v))
}

fn frozen_seg() -> FrozenSegNet {
    FrozenSegNet::freeze(SegNet::new(&SegModelConfig::default(), 3).unwrap())
}

fn tiny_data(n: usize) -> Vec<Subject> {
    generate_dataset(
        &PhantomParams {
            size: 16,
            ..PhantomParams::default()
        },
        n,
        50,
    )
    .unwrap()
}

fn tiny_schedule(adv: usize, fine: usize) -> TrexSchedule {
    TrexSchedule {
        epochs_adversarial: adv,
        epochs_finetune: fine,
        slab_depth: Some(8),
        ..TrexSchedule::default()
    }
}

#[test]
fn shape_contract() {
    let net = Trex::new(&TrexConfig::default(), 0).unwrap();
    let y = voxgrad::no_grad(|| net.forward(&Var::constant(random(&[9, 32, 32, 32], 1, 0.0, 1.0)))).unwrap();
    assert_eq!(y.shape(), &[3, 32, 32, 32]);
}

#[test]
fn indivisible_sizes_are_padded_and_cropped() {
    let net = Trex::new(&TrexConfig::default(), 0).unwrap();
    let y = voxgrad::no_grad(|| net.forward(&Var::constant(random(&[9, 13, 10, 7], 1, 0.0, 1.0)))).unwrap();
    assert_eq!(y.shape(), &[3, 13, 10, 7]);
}

#[test]
fn wrong_channel_count_is_rejected() {
    let net = Trex::new(&TrexConfig::default(), 0).unwrap();
    let r = net.forward(&Var::constant(random(&[3, 8, 8, 8], 1, 0.0, 1.0)));
    assert!(matches!(r, Err(Error::ChannelMismatch { expected: 9, got: 3 })));
}

#[test]
fn token_count_follows_latent_grid() {
    let cfg = TrexConfig::default();
    let stages = cfg.enc_channels.len() as u32;
    let factor = 2usize.pow(stages - 1);
    for dims in [[32, 32, 32], [30, 33, 17], [40, 64, 64], [1, 1, 1]] {
        let expected: usize = dims.iter().map(|&n| (n + factor - 1) / factor).product();
        assert_eq!(cfg.token_count(dims), expected, "{dims:?}");
    }
    assert_eq!(cfg.token_count([32, 32, 32]), 512);
}

#[test]
fn paper_scale_parameter_count() {
    let n = Trex::new(&TrexConfig::paper(), 0).unwrap().num_parameters();
    assert!((19_200_000..=28_800_000).contains(&n), "{n}");
    let scaled = Trex::new(
        &TrexConfig {
            paper_scale: true,
            ..TrexConfig::default()
        },
        0,
    )
    .unwrap();
    assert_eq!(scaled.num_parameters(), n);
}

#[test]
fn structure_matches_config() {
    for cfg in [
        TrexConfig::default(),
        TrexConfig::paper(),
        TrexConfig {
            n_transformer_layers: 3,
            skip_res_blocks: 0,
            ..TrexConfig::default()
        },
    ] {
        let s = Trex::new(&cfg, 0).unwrap().structure();
        let stages = cfg.enc_channels.len();
        assert_eq!(s.attention_layers, cfg.n_transformer_layers);
        assert_eq!(s.skip_blocks, vec![cfg.skip_res_blocks; stages - 1]);
        assert_eq!(s.skip_norm_layers, 0);
        assert_eq!(s.strided_convs, stages - 1);
        assert_eq!(s.trilinear_upsamples, stages - 1);
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let odd_heads = TrexConfig {
        token_dim: 30,
        n_heads: 4,
        ..TrexConfig::default()
    };
    assert!(matches!(Trex::new(&odd_heads, 0), Err(Error::InvalidArgument(_))));
    let empty = TrexConfig {
        enc_channels: vec![],
        ..TrexConfig::default()
    };
    assert!(Trex::new(&empty, 0).is_err());
}

#[test]
fn sobel_reference_cases() {
    let x = Var::constant(random(&[3, 8, 8, 8], 1, 0.0, 1.0));
    assert_eq!(sobel_loss(&x, &x).unwrap().value().item(), 0.0);
    let a = constant(&[3, 8, 8, 8], 0.2);
    let b = constant(&[3, 8, 8, 8], 0.7);
    assert_eq!(sobel_loss(&a, &b).unwrap().value().item(), 0.0);
    let wrong = Var::constant(random(&[3, 8, 8, 7], 1, 0.0, 1.0));
    assert!(matches!(sobel_loss(&x, &wrong), Err(Error::ShapeMismatch(_))));
}

#[test]
fn sobel_magnitude_of_a_ramp() {
    let (d, h, w) = (6, 5, 7);
    let mut data = Vec::new();
    for z in 0..d {
        for _ in 0..h * w {
            data.push(0.1 * z as f64);
        }
    }
    let m = sobel_magnitude(&Var::constant(Tensor::new(&[1, d, h, w], data))).unwrap();
    assert_eq!(m.shape(), &[1, d - 2, h - 2, w - 2]);
    let expected = (0.01f64 + SOBEL_EPS).sqrt();
    assert!(m.value().data().iter().all(|v| (v - expected).abs() < 1e-12));
}

#[test]
fn sobel_gradient() {
    let a = random(&[2, 8, 8, 8], 2, 0.0, 1.0);
    let b = random(&[2, 8, 8, 8], 3, 0.0, 1.0);
    let r = check_gradients(&[a, b], 1e-6, |v| sobel_loss(&v[0], &v[1]).unwrap());
    assert!(r.max_rel_error < 1e-3, "{r:?}");
}

#[test]
fn psnr_term_reference_cases() {
    let t = Var::constant(random(&[3, 6, 6, 6], 4, 0.0, 0.8));
    let p = t.add_scalar(0.1);
    assert!((psnr_term(&p, &t, 50.0).unwrap().value().item() + 20.0).abs() < 1e-9);
    assert_eq!(psnr_term(&t, &t, 50.0).unwrap().value().item(), -50.0);
    assert_eq!(psnr_term(&t, &t, 40.0).unwrap().value().item(), -40.0);
}

#[test]
fn psnr_term_gradient() {
    let t = random(&[3, 8, 8, 8], 5, 0.0, 1.0);
    let noise = random(&[3, 8, 8, 8], 6, -0.17, 0.17);
    let p = t.add(&noise);
    let tv = Var::constant(t);
    let mse = diff::mse(&Var::constant(p.clone()), &tv).value().item();
    assert!((0.005..0.02).contains(&mse), "{mse}");
    let r = check_gradients(&[p], 1e-6, |v| psnr_term(&v[0], &tv, 50.0).unwrap());
    assert!(r.max_rel_error < 1e-3, "{r:?}");
}

#[test]
fn content_loss_reference_cases() {
    let l1_only = ContentLossWeights {
        w_l1: 1.0,
        w_psnr: 0.0,
        w_sobel: 0.0,
        ..ContentLossWeights::default()
    };
    let t = Var::constant(random(&[3, 6, 6, 6], 7, 0.0, 0.7));
    let p = t.add_scalar(0.25);
    assert!((content_loss(&p, &t, &l1_only).unwrap().value().item() - 0.25).abs() < 1e-12);

    let sobel_only = ContentLossWeights {
        w_l1: 0.0,
        w_psnr: 0.0,
        w_sobel: 1.0,
        ..ContentLossWeights::default()
    };
    let a = constant(&[3, 6, 6, 6], 0.1);
    let b = constant(&[3, 6, 6, 6], 0.9);
    assert_eq!(content_loss(&a, &b, &sobel_only).unwrap().value().item(), 0.0);

    let none = ContentLossWeights {
        w_l1: 0.0,
        w_psnr: 0.0,
        w_sobel: 0.0,
        ..ContentLossWeights::default()
    };
    assert!(matches!(content_loss(&a, &b, &none), Err(Error::InvalidArgument(_))));
}

#[test]
fn content_loss_gradient() {
    let w = ContentLossWeights {
        w_l1: 1.0,
        w_psnr: 0.01,
        w_sobel: 1.0,
        ..ContentLossWeights::default()
    };
    let a = random(&[3, 8, 8, 8], 8, 0.0, 1.0);
    let b = random(&[3, 8, 8, 8], 9, 0.0, 1.0);
    let r = check_gradients(&[a, b], 1e-6, |v| content_loss(&v[0], &v[1], &w).unwrap());
    assert!(r.max_rel_error < 1e-2, "{r:?}");
}

#[test]
fn inference_shape_and_determinism() {
    let seg = frozen_seg();
    let net = Trex::new(&TrexConfig::default(), 1).unwrap();
    let s = generate_phantom(&PhantomParams::default(), 3).unwrap();
    let a = infer_trex(&net, &seg, &s, &TrexInference::default()).unwrap();
    let b = infer_trex(&net, &seg, &s, &TrexInference::default()).unwrap();
    assert_eq!(a, b);
    for c in Contrast::ALL {
        assert_eq!(a.volumes[&c].shape(), [32, 32, 32]);
    }
}

#[test]
fn inference_path_selection() {
    let inf = TrexInference {
        max_whole_voxels: 1000,
        slabs: SlabSettings::default(),
    };
    assert_eq!(inf.settings_for([10, 10, 10]).slab_depth, None);
    assert_eq!(inf.settings_for([10, 10, 11]).slab_depth, Some(40));
    assert_eq!(
        TrexInference::whole_volume().settings_for([500, 500, 500]).slab_depth,
        None
    );
}

#[test]
fn training_requires_paired_data() {
    let seg = frozen_seg();
    let mut data = tiny_data(1);
    data[0].hf = None;
    let r = train_trex(
        &data,
        &[],
        &seg,
        &TrexConfig::default(),
        &ContentLossWeights::default(),
        &tiny_schedule(1, 0),
        &RunControl::default(),
    );
    assert!(matches!(r, Err(Error::MissingPairedData(_))));
    let r = train_trex(
        &tiny_data(1),
        &[],
        &seg,
        &TrexConfig::default(),
        &ContentLossWeights::default(),
        &tiny_schedule(0, 0),
        &RunControl::default(),
    );
    assert!(matches!(r, Err(Error::EmptySchedule)));
}

#[test]
fn finetuning_leaves_the_discriminator_untouched() {
    let seg = frozen_seg();
    let data = tiny_data(2);
    let (cfg, w) = (TrexConfig::default(), ContentLossWeights::default());
    let adversarial_only =
        train_trex(&data, &[], &seg, &cfg, &w, &tiny_schedule(2, 0), &RunControl::default()).unwrap();
    let both = train_trex(&data, &[], &seg, &cfg, &w, &tiny_schedule(2, 2), &RunControl::default()).unwrap();
    assert_eq!(
        adversarial_only.discriminator.store.sha256(),
        both.discriminator.store.sha256()
    );
    assert_ne!(adversarial_only.net.store.sha256(), both.net.store.sha256());
    for e in &both.history {
        match e.phase {
            TrexPhase::Adversarial => assert_eq!(e.discriminator_updates, 2),
            TrexPhase::Finetune => {
                assert_eq!(e.discriminator_updates, 0);
                assert_eq!(e.adversarial_g, 0.0);
            }
        }
    }
}

#[test]
fn log_marks_phases() {
    let seg = frozen_seg();
    let dir = tempfile::tempdir().unwrap();
    train_trex(
        &tiny_data(1),
        &[],
        &seg,
        &TrexConfig::default(),
        &ContentLossWeights::default(),
        &tiny_schedule(1, 1),
        &RunControl::in_dir(dir.path()),
    )
    .unwrap();
    let log = std::fs::read_to_string(dir.path().join("trex_log.csv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], TREX_LOG_HEADER);
    assert!(lines[1].starts_with("1,adversarial,"));
    assert!(lines[2].starts_with("2,finetune,"));
    assert_eq!(lines[2].split(',').nth(9), Some("0"));
}

#[test]
fn resume_matches_uninterrupted_training() {
    let seg = frozen_seg();
    let data = tiny_data(2);
    let (cfg, w, sched) = (
        TrexConfig::default(),
        ContentLossWeights::default(),
        tiny_schedule(2, 1),
    );
    let straight = train_trex(&data, &data[1..], &seg, &cfg, &w, &sched, &RunControl::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let cut = RunControl {
        stop_after: Some(1),
        ..RunControl::in_dir(dir.path())
    };
    assert!(
        !train_trex(&data, &data[1..], &seg, &cfg, &w, &sched, &cut)
            .unwrap()
            .completed
    );
    let resume = RunControl {
        resume: true,
        ..RunControl::in_dir(dir.path())
    };
    let resumed = train_trex(&data, &data[1..], &seg, &cfg, &w, &sched, &resume).unwrap();
    assert_eq!(straight.history.len(), resumed.history.len());
    for (a, b) in straight.history.iter().zip(&resumed.history) {
        assert!((a.total_g - b.total_g).abs() < 1e-4, "{a:?} vs {b:?}");
    }
    assert_eq!(straight.net.store.sha256(), resumed.net.store.sha256());
    assert_eq!(straight.best_epoch, resumed.best_epoch);
}

#[test]
fn network_round_trips_through_disk() {
    let net = Trex::new(&TrexConfig::default(), 8).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trex.ckpt");
    net.save(&path).unwrap();
    let back = Trex::load(&path).unwrap();
    assert_eq!(back.config, net.config);
    assert_eq!(back.store.sha256(), net.store.sha256());
}

/// 8 phantoms at 32³, 20 adversarial + 2 fine-tuning epochs.
#[test]
fn toy_training_beats_raw_ulf() {
    let seg = frozen_seg();
    let before = seg.weights_hash();
    let data = generate_dataset(&PhantomParams::default(), 8, 7).unwrap();
    let (train, val) = data.split_at(6);
    let schedule = TrexSchedule {
        epochs_adversarial: 20,
        epochs_finetune: 2,
        val_every: 5,
        ..TrexSchedule::default()
    };
    let r = train_trex(
        train,
        val,
        &seg,
        &TrexConfig::default(),
        &ContentLossWeights::default(),
        &schedule,
        &RunControl::default(),
    )
    .unwrap();
    assert_eq!(seg.weights_hash(), before);
    assert!(r.history[20..].iter().all(|e| e.discriminator_updates == 0));

    let ssim = SsimConfig::default();
    let raw: Vec<_> = val.iter().map(|s| s.ulf.clone()).collect();
    let baseline = evaluate_predictions(&raw, val, &ssim, Aggregation::default()).unwrap();
    let enhanced = evaluate_trex(&r.net, &seg, val, &TrexInference::default(), &ssim).unwrap();
    let (b, e) = (
        baseline.summary.weighted_masked.unwrap(),
        enhanced.summary.weighted_masked.unwrap(),
    );
    assert!(e > b, "T-REX {e} vs raw ULF {b}");

    // Whole-volume and slab-stitched inference on a 48-deep volume.
    let deep = generate_phantom(
        &PhantomParams {
            size: 48,
            ..PhantomParams::default()
        },
        99,
    )
    .unwrap();
    let whole = infer_trex(&r.net, &seg, &deep, &TrexInference::whole_volume()).unwrap();
    let slabs = infer_trex(&r.net, &seg, &deep, &TrexInference::slab_only(SlabSettings::default())).unwrap();
    let mut total = 0.0;
    let mut n = 0;
    for c in Contrast::ALL {
        for (a, b) in whole.volumes[&c].data().iter().zip(slabs.volumes[&c].data()) {
            total += (a - b).abs();
            n += 1;
        }
    }
    let mad = total / n as f64;
    assert!(mad < 0.02, "whole vs slab mean abs diff {mad}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn sobel_is_nonnegative(seed in 0u64..10_000, d in 3usize..7, h in 3usize..7, w in 3usize..7) {
        let a = Var::constant(random(&[2, d, h, w], seed, 0.0, 1.0));
        let b = Var::constant(random(&[2, d, h, w], seed + 1, 0.0, 1.0));
        prop_assert!(sobel_loss(&a, &b).unwrap().value().item() >= 0.0);
        prop_assert_eq!(sobel_loss(&a, &a).unwrap().value().item(), 0.0);
    }

    #[test]
    fn l1_only_content_is_plain_l1(seed in 0u64..10_000) {
        let w = ContentLossWeights { w_l1: 1.0, w_psnr: 0.0, w_sobel: 0.0, ..ContentLossWeights::default() };
        let a = Var::constant(random(&[3, 4, 5, 6], seed, 0.0, 1.0));
        let b = Var::constant(random(&[3, 4, 5, 6], seed + 1, 0.0, 1.0));
        prop_assert_eq!(content_loss(&a, &b, &w).unwrap().value().item(), diff::mae(&a, &b).value().item());
    }
}
