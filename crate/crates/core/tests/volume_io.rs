use std::path::Path;

use ndarray::{Array4, ShapeBuilder};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ulfenc::io::{load_dataset, load_volume, save_subject, save_volume, split_dataset};
use ulfenc::phantom::{generate_phantom, PhantomParams};
use ulfenc::volume::{background_mask, normalize_intensity, IntensityNorm};
use ulfenc::{Error, NormState, Volume};

fn random_volume(shape: [usize; 3], seed: u64) -> Volume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Volume::new(
        shape,
        [1.0, 1.5, 2.0],
        (0..n).map(|_| rng.random_range(-100.0..900.0)).collect(),
        NormState::Raw,
    )
    .unwrap()
}

#[test]
fn nifti_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let v = random_volume([8, 8, 8], 1);
    for name in ["a.nii", "a.nii.gz"] {
        let path = dir.path().join(name);
        save_volume(&v, &path).unwrap();
        let back = load_volume(&path).unwrap();
        assert_eq!(back.shape(), v.shape());
        assert_eq!(back.spacing(), v.spacing());
        for (x, y) in back.data().iter().zip(v.data()) {
            assert!((x - y).abs() <= 1e-6 * y.abs().max(1.0), "{x} vs {y}");
        }
    }
}

#[test]
fn anisotropic_shape_keeps_axis_order() {
    let dir = tempfile::tempdir().unwrap();
    let v = random_volume([3, 5, 7], 2);
    let path = dir.path().join("b.nii.gz");
    save_volume(&v, &path).unwrap();
    let back = load_volume(&path).unwrap();
    assert_eq!(back.shape(), [3, 5, 7]);
    assert!((back.get(2, 4, 6) - v.get(2, 4, 6)).abs() < 1e-3);
}

#[test]
fn overwrite_replaces_contents() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.nii.gz");
    save_volume(&random_volume([4, 4, 4], 3), &path).unwrap();
    let second = random_volume([4, 4, 4], 4);
    save_volume(&second, &path).unwrap();
    let back = load_volume(&path).unwrap();
    assert!((back.data()[0] - second.data()[0]).abs() < 1e-3);
}

#[test]
fn missing_parent_is_unwritable() {
    let err = save_volume(&random_volume([2, 2, 2], 5), Path::new("/no/such/dir/x.nii.gz")).unwrap_err();
    assert!(matches!(err, Error::Unwritable { .. }));
}

#[test]
fn four_dimensional_payload_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.nii");
    let arr = Array4::<f32>::zeros((2, 2, 2, 3).f());
    nifti::writer::WriterOptions::new(&path).write_nifti(&arr).unwrap();
    assert!(matches!(load_volume(&path), Err(Error::Non3dPayload { .. })));
}

#[test]
fn garbage_header_is_corrupt() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("e.nii");
    std::fs::write(&path, vec![7u8; 400]).unwrap();
    assert!(matches!(load_volume(&path), Err(Error::CorruptHeader { .. })));
}

#[test]
fn dataset_round_trip_keeps_phantoms() {
    let dir = tempfile::tempdir().unwrap();
    let p = PhantomParams {
        size: 16,
        void_probability: 1.0,
        ..PhantomParams::default()
    };
    let subjects: Vec<_> = (0..3).map(|s| generate_phantom(&p, s).unwrap()).collect();
    for s in &subjects {
        save_subject(dir.path(), s).unwrap();
    }
    let loaded = load_dataset(dir.path(), &IntensityNorm::Clamp).unwrap();
    assert_eq!(loaded.len(), 3);
    for (a, b) in loaded.iter().zip(&subjects) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.labels(), b.labels());
        assert_eq!(a.void_mask, b.void_mask);
        for (c, v) in &b.ulf {
            let err = a.ulf[c]
                .data()
                .iter()
                .zip(v.data())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            assert!(err < 1e-6);
        }
    }
}

#[test]
fn split_is_seeded_and_disjoint() {
    let ids: Vec<String> = (0..10).map(|i| format!("s{i}")).collect();
    let a = split_dataset(&ids, 2, 7).unwrap();
    assert_eq!(a, split_dataset(&ids, 2, 7).unwrap());
    assert_eq!((a.train.len(), a.val.len()), (8, 2));
    assert!(a.val.iter().all(|v| !a.train.contains(v)));
}

proptest! {
    #[test]
    fn normalization_lands_in_unit_range(data in prop::collection::vec(-1e3f64..1e3, 27)) {
        let v = Volume::raw([3, 3, 3], data);
        match normalize_intensity(&v, 0.5, 99.5) {
            Ok(n) => prop_assert!(n.data().iter().all(|x| (0.0..=1.0).contains(x))),
            Err(e) => prop_assert!(matches!(e, Error::ConstantVolume)),
        }
    }

    #[test]
    fn normalization_is_monotone(data in prop::collection::vec(0f64..1e3, 27)) {
        let v = Volume::raw([3, 3, 3], data.clone());
        if let Ok(n) = normalize_intensity(&v, 0.5, 99.5) {
            for i in 0..27 {
                for j in 0..27 {
                    if data[i] < data[j] {
                        prop_assert!(n.data()[i] <= n.data()[j]);
                    }
                }
            }
        }
    }

    #[test]
    fn masks_are_binary(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = Volume::unit([6, 6, 6], (0..216).map(|_| rng.random::<f64>()).collect());
        let m = background_mask(&v, 0.05).unwrap();
        prop_assert!(m.data().iter().all(|&x| x == 0.0 || x == 1.0));
    }
}
