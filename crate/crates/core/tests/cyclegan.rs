use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ulfenc::checkpoint::RunControl;
use ulfenc::cyclegan::*;
use ulfenc::enhance::{enhance_subject, SlabSettings};
use ulfenc::gradcheck::check_gradients;
use ulfenc::metrics::{weighted_score, SsimConfig};
use ulfenc::phantom::{generate_dataset, PhantomParams};
use ulfenc::segmentation::{FrozenSegNet, SegModelConfig, SegNet};
use ulfenc::{Error, Subject};
use voxgrad::{ParamStore, Tensor, Var};

fn random(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect())
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
        40,
    )
    .unwrap()
}

fn tiny_config() -> CycleGanConfig {
    let mut c = CycleGanConfig::default();
    c.ulf_to_hf.n_res_blocks = 1;
    c.hf_to_ulf.n_res_blocks = 1;
    c
}

fn tiny_schedule(epochs: usize) -> CycleSchedule {
    CycleSchedule {
        epochs,
        slab_depth: 8,
        inference: SlabSettings {
            slab_depth: Some(8),
            stride: 4,
            ..SlabSettings::default()
        },
        ..CycleSchedule::default()
    }
}

#[test]
fn concat_generator_shape_contract() {
    let g = Generator::new(&GeneratorConfig::default(), 0).unwrap();
    assert_eq!(g.config.in_channels(), 9);
    let y = voxgrad::no_grad(|| g.forward(&Var::constant(random(&[9, 40, 64, 64], 1, 0.0, 1.0)), None)).unwrap();
    assert_eq!(y.shape(), &[3, 40, 64, 64]);
}

#[test]
fn channel_contracts_per_mode_and_direction() {
    use ConditioningMode::*;
    use Direction::*;
    for (mode, dir, cin) in [
        (Concat, UlfToHf, 9),
        (Spade, UlfToHf, 3),
        (Concat, HfToUlf, 3),
        (Spade, HfToUlf, 3),
    ] {
        let cfg = GeneratorConfig::new(mode, dir);
        assert_eq!(cfg.in_channels(), cin);
        assert_eq!(cfg.out_channels(), 3);
        let g = Generator::new(&cfg, 0).unwrap();
        let kinds = g.layer_kinds();
        assert_eq!(
            kinds.iter().filter(|k| **k == LayerKind::Spade).count() > 0,
            mode == Spade && dir == UlfToHf
        );
        let x = random(&[cin, 5, 6, 7], 2, 0.0, 1.0);
        let c = random(&[6, 5, 6, 7], 3, 0.0, 1.0);
        let y = voxgrad::no_grad(|| g.forward(&Var::constant(x), Some(&Var::constant(c)))).unwrap();
        assert_eq!(y.shape(), &[3, 5, 6, 7]);
    }
}

#[test]
fn generator_has_no_transposed_convolutions() {
    for mode in [ConditioningMode::Concat, ConditioningMode::Spade] {
        let g = Generator::new(&GeneratorConfig::new(mode, Direction::UlfToHf), 0).unwrap();
        let kinds = g.layer_kinds();
        assert!(!kinds.contains(&LayerKind::ConvTranspose));
        let ups = kinds.iter().filter(|k| **k == LayerKind::TrilinearUpsample).count();
        assert_eq!(ups, g.config.n_downsampling);
        let strided = kinds
            .iter()
            .filter(|k| matches!(k, LayerKind::Conv { stride: 2, .. }))
            .count();
        assert_eq!(strided, g.config.n_downsampling);
        let blocks = kinds.iter().filter(|k| **k == LayerKind::ResidualAdd).count();
        assert_eq!(blocks, 9);
        // Every upsample is followed by a convolution.
        for (i, k) in kinds.iter().enumerate() {
            if *k == LayerKind::TrilinearUpsample {
                assert!(matches!(kinds[i + 1], LayerKind::Conv { .. }));
            }
        }
    }
}

#[test]
fn wrong_channel_count_is_rejected() {
    let g = Generator::new(&GeneratorConfig::default(), 0).unwrap();
    let r = g.forward(&Var::constant(random(&[3, 4, 4, 4], 1, 0.0, 1.0)), None);
    assert!(matches!(r, Err(Error::ChannelMismatch { expected: 9, got: 3 })));
}

#[test]
fn outputs_stay_in_unit_range() {
    let g = Generator::new(
        &GeneratorConfig {
            input_residual: false,
            ..GeneratorConfig::default()
        },
        5,
    )
    .unwrap();
    let y = voxgrad::no_grad(|| g.forward(&Var::constant(random(&[9, 6, 8, 8], 4, 0.0, 1.0)), None)).unwrap();
    assert!(y.value().data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn fresh_spade_is_plain_normalization() {
    let mut store = ParamStore::new(0);
    let spade = Spade::new(&mut store.root(), 4, 6, 5);
    let x = Var::constant(random(&[4, 5, 6, 7], 1, -2.0, 2.0));
    let seg = Var::constant(random(&[6, 3, 3, 4], 2, 0.0, 1.0));
    let y = spade_normalize(&x, &seg, &spade).unwrap();
    assert_eq!(y.value(), x.instance_norm(1e-5).value());
}

#[test]
fn constant_features_yield_beta() {
    let mut store = ParamStore::new(0);
    let spade = Spade::with_random_modulation(&mut store.root(), 4, 6, 5);
    let x = Var::constant(Tensor::full(&[4, 5, 6, 7], 0.3));
    let seg = Var::constant(random(&[6, 5, 6, 7], 3, 0.0, 1.0));
    let y = spade_normalize(&x, &seg, &spade).unwrap();
    let (_, beta) = spade.modulation(&seg);
    for (a, b) in y.value().data().iter().zip(beta.value().data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn spade_rejects_non_volumetric_conditioning() {
    let mut store = ParamStore::new(0);
    let spade = Spade::new(&mut store.root(), 2, 6, 3);
    let x = Var::constant(random(&[2, 4, 4, 4], 1, 0.0, 1.0));
    let seg = Var::constant(random(&[6, 4, 4], 2, 0.0, 1.0));
    assert!(matches!(
        spade_normalize(&x, &seg, &spade),
        Err(Error::ShapeMismatch(_))
    ));
}

#[test]
fn cycle_loss_reference_cases() {
    let x = Var::constant(random(&[3, 4, 4, 4], 1, 0.0, 0.5));
    assert_eq!(cycle_loss(&x, &x).unwrap().value().item(), 0.0);
    let shifted = x.add_scalar(0.5);
    assert!((cycle_loss(&x, &shifted).unwrap().value().item() - 0.5).abs() < 1e-12);
    let other = Var::constant(random(&[3, 4, 4, 5], 1, 0.0, 1.0));
    assert!(matches!(cycle_loss(&x, &other), Err(Error::ShapeMismatch(_))));
}

#[test]
fn identity_stubs_have_zero_cycle_loss() {
    for subject in tiny_data(2) {
        for map in [&subject.ulf, subject.hf.as_ref().unwrap()] {
            let x = Var::constant(ulfenc::nn::stack_contrasts(map).unwrap());
            let stub = |v: &Var| v.clone();
            assert_eq!(cycle_loss(&x, &stub(&stub(&x))).unwrap().value().item(), 0.0);
        }
    }
}

#[test]
fn cycle_loss_gradient() {
    let a = random(&[3, 4, 4, 4], 5, 0.0, 1.0);
    let b = random(&[3, 4, 4, 4], 6, 0.0, 1.0);
    let r = check_gradients(&[a, b], 1e-6, |v| cycle_loss(&v[0], &v[1]).unwrap());
    assert!(r.max_rel_error < 1e-3, "{r:?}");
}

#[test]
fn adversarial_reference_cases() {
    let ones = Var::constant(Tensor::ones(&[1, 4, 4, 4]));
    let zeros = Var::constant(Tensor::zeros(&[1, 4, 4, 4]));
    let l = adversarial_losses(&ones, &zeros);
    assert_eq!(l.discriminator.value().item(), 0.0);
    assert_eq!(l.generator.value().item(), 1.0);
    assert_eq!(adversarial_losses(&ones, &ones).generator.value().item(), 0.0);
}

#[test]
fn adversarial_gradients() {
    let real = random(&[1, 4, 4, 4], 7, -1.0, 2.0);
    let fake = random(&[1, 4, 4, 4], 8, -1.0, 2.0);
    let g = check_gradients(&[real.clone(), fake.clone()], 1e-6, |v| {
        adversarial_losses(&v[0], &v[1]).generator
    });
    let d = check_gradients(&[real, fake], 1e-6, |v| adversarial_losses(&v[0], &v[1]).discriminator);
    assert!(g.max_rel_error < 1e-3, "{g:?}");
    assert!(d.max_rel_error < 1e-3, "{d:?}");
}

#[test]
fn paired_loss_at_identity_is_capped() {
    let x = Var::constant(random(&[3, 8, 8, 8], 9, 0.0, 1.0));
    let l = paired_challenge_loss(&x, &x, DEFAULT_PSNR_CAP, &SsimConfig::default()).unwrap();
    assert!((l.value().item() + 5.9).abs() < 1e-12, "{}", l.value().item());
}

#[test]
fn paired_loss_matches_table_components() {
    // The loss is the negated weighted score; with the combined masked components it is −3.719.
    let s = weighted_score(0.711, 30.416, 0.067, 0.141).unwrap();
    assert!((-s + 3.719).abs() <= 0.0005 + 1e-12);
}

#[test]
fn paired_loss_gradient() {
    let a = random(&[3, 8, 8, 8], 10, 0.0, 1.0);
    let b = random(&[3, 8, 8, 8], 11, 0.0, 1.0);
    let cfg = SsimConfig::default();
    let r = check_gradients(&[a], 1e-6, |v| {
        paired_challenge_loss(&v[0], &Var::constant(b.clone()), DEFAULT_PSNR_CAP, &cfg).unwrap()
    });
    assert!(r.max_rel_error < 1e-2, "{r:?}");
}

#[test]
fn penalty_schedule_reference_points() {
    let w = CycleLossWeights {
        lambda_paired_max: 3.0,
        tau: 20.0,
        ..CycleLossWeights::default()
    };
    assert_eq!(penalty_schedule(0, &w), 0.0);
    assert!((penalty_schedule(20, &w) - 1.5).abs() < 1e-12);
    for e in 0..100 {
        assert!(penalty_schedule(e + 1, &w) > penalty_schedule(e, &w));
    }
    assert!((penalty_schedule(1_000_000, &w) - 3.0).abs() < 1e-4);
}

#[test]
fn negative_weights_are_rejected() {
    let w = CycleLossWeights {
        lambda_adv: -1.0,
        ..CycleLossWeights::default()
    };
    assert!(w.validate().is_err());
}

#[test]
fn stub_generator_passes_through_stitcher() {
    let seg = frozen_seg();
    let stub = |ulf: &Tensor, _: &Tensor| Ok(ulf.clone());
    for subject in generate_dataset(
        &PhantomParams {
            size: 16,
            ..PhantomParams::default()
        },
        2,
        1,
    )
    .unwrap()
    {
        let settings = SlabSettings {
            slab_depth: Some(6),
            stride: 3,
            ..SlabSettings::default()
        };
        let out = enhance_subject(&stub, &seg, &subject, &settings).unwrap();
        for (c, v) in &out.volumes {
            let max = v
                .data()
                .iter()
                .zip(subject.ulf[c].data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(max <= 1e-12, "{c}: {max}");
        }
    }
}

#[test]
fn inference_is_deterministic_and_bounded() {
    let seg = frozen_seg();
    let g = Generator::new(&tiny_config().ulf_to_hf, 2).unwrap();
    let s = &tiny_data(1)[0];
    let settings = tiny_schedule(1).inference;
    let a = infer_cyclegan(&g, &seg, s, &settings).unwrap();
    let b = infer_cyclegan(&g, &seg, s, &settings).unwrap();
    assert_eq!(a, b);
    assert!(a
        .volumes
        .values()
        .all(|v| v.data().iter().all(|x| (0.0..=1.0).contains(x))));
    assert_eq!(a.volumes[&ulfenc::Contrast::T1].shape(), s.shape());
}

#[test]
fn training_keeps_segmentation_frozen_and_logs_schedule() {
    let seg = frozen_seg();
    let before = seg.weights_hash();
    let data = tiny_data(3);
    let dir = tempfile::tempdir().unwrap();
    let weights = CycleLossWeights {
        tau: 1.5,
        ..CycleLossWeights::default()
    };
    let r = train_cyclegan(
        &data[..2],
        &data[2..],
        &seg,
        &tiny_config(),
        &weights,
        &tiny_schedule(3),
        &RunControl::in_dir(dir.path()),
    )
    .unwrap();
    assert_eq!(seg.weights_hash(), before);
    assert_eq!(r.history.len(), 3);
    let log = std::fs::read_to_string(dir.path().join("cyclegan_log.csv")).unwrap();
    let mut lines = log.lines();
    assert_eq!(lines.next().unwrap(), CYCLE_LOG_HEADER);
    for line in lines {
        let cols: Vec<&str> = line.split(',').collect();
        let epoch: usize = cols[0].parse().unwrap();
        let lambda: f64 = cols[1].parse().unwrap();
        assert_eq!(lambda, penalty_schedule(epoch, &weights));
    }
}

#[test]
fn training_requires_paired_data() {
    let seg = frozen_seg();
    let mut data = tiny_data(1);
    data[0].hf = None;
    let r = train_cyclegan(
        &data,
        &[],
        &seg,
        &tiny_config(),
        &CycleLossWeights::default(),
        &tiny_schedule(1),
        &RunControl::default(),
    );
    assert!(matches!(r, Err(Error::MissingPairedData(_))));
}

#[test]
fn resume_matches_uninterrupted_training() {
    let seg = frozen_seg();
    let data = tiny_data(2);
    let (cfg, w, sched) = (tiny_config(), CycleLossWeights::default(), tiny_schedule(3));
    let straight = train_cyclegan(&data, &[], &seg, &cfg, &w, &sched, &RunControl::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let cut = RunControl {
        stop_after: Some(2),
        ..RunControl::in_dir(dir.path())
    };
    assert!(
        !train_cyclegan(&data, &[], &seg, &cfg, &w, &sched, &cut)
            .unwrap()
            .completed
    );
    let resume = RunControl {
        resume: true,
        ..RunControl::in_dir(dir.path())
    };
    let resumed = train_cyclegan(&data, &[], &seg, &cfg, &w, &sched, &resume).unwrap();
    for (a, b) in straight.history.iter().zip(&resumed.history) {
        assert!((a.total_g - b.total_g).abs() < 1e-4, "{a:?} vs {b:?}");
    }
    assert_eq!(
        straight.models.ulf_to_hf.store.sha256(),
        resumed.models.ulf_to_hf.store.sha256()
    );
}

#[test]
fn generator_round_trips_through_disk() {
    let g = Generator::new(&GeneratorConfig::new(ConditioningMode::Spade, Direction::UlfToHf), 8).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.ckpt");
    g.save(&path).unwrap();
    let back = Generator::load(&path).unwrap();
    assert_eq!(back.config, g.config);
    assert_eq!(back.store.sha256(), g.store.sha256());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn spade_preserves_shape(c in 1usize..4, d in 2usize..6, h in 2usize..6, w in 2usize..6, seed in 0u64..1000) {
        let mut store = ParamStore::new(seed);
        let spade = Spade::with_random_modulation(&mut store.root(), c, 6, 3);
        let x = Var::constant(random(&[c, d, h, w], seed, -1.0, 1.0));
        let seg = Var::constant(random(&[6, 3, 3, 3], seed + 1, 0.0, 1.0));
        let y = spade_normalize(&x, &seg, &spade).unwrap();
        prop_assert_eq!(y.shape(), &[c, d, h, w][..]);
    }

    #[test]
    fn penalty_schedule_is_monotone_and_bounded(
        e in 0usize..10_000, max in 0.0f64..10.0, tau in 0.0f64..100.0
    ) {
        let w = CycleLossWeights { lambda_paired_max: max, tau, ..CycleLossWeights::default() };
        let (a, b) = (penalty_schedule(e, &w), penalty_schedule(e + 1, &w));
        prop_assert!(a <= b);
        prop_assert!((0.0..=max).contains(&b));
    }
}
