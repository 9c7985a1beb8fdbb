//! Synthetic paired ULF/HF head phantoms with known tissue labels.
//!
//! The head is a jittered ellipsoid with nested scalp / skull / CSF / GM / WM
//! shells, a few internal CSF and GM blobs, and a nose bump at the
//! anterior-inferior surface. HF contrasts come from per-class means under a
//! smooth multiplicative bias field; ULF is a blurred, decimated, noisy copy
//! that may carry a signal void over the nose.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use voxgrad::{resize_trilinear_tensor, Tensor};

use crate::error::{Error, Result};
use crate::filters::gaussian_smooth;
use crate::volume::{Contrast, ContrastMap, NormState, Subject, Volume, CSF, GM, N_CLASSES, SCALP, SKULL, WM};

/// Mean HF intensity per class (rows, label order) and contrast (columns: T1, T2, FLAIR).
pub type ClassMeans = [[f64; 3]; N_CLASSES];

pub const DEFAULT_CLASS_MEANS: ClassMeans = [
    [0.0, 0.0, 0.0],
    [0.15, 0.95, 0.08],
    [0.50, 0.62, 0.58],
    [0.78, 0.35, 0.40],
    [0.20, 0.14, 0.14],
    [0.88, 0.55, 0.62],
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomParams {
    pub size: usize,
    pub n_ellipsoids: usize,
    pub class_means: ClassMeans,
    pub noise_sigma_ulf: f64,
    pub blur_sigma_ulf: f64,
    pub downsample_factor: usize,
    pub void_probability: f64,
    /// Amplitude of the multiplicative bias field.
    pub bias_amplitude: f64,
}

impl Default for PhantomParams {
    fn default() -> Self {
        Self {
            size: 32,
            n_ellipsoids: 4,
            class_means: DEFAULT_CLASS_MEANS,
            noise_sigma_ulf: 0.05,
            blur_sigma_ulf: 1.0,
            downsample_factor: 2,
            void_probability: 0.5,
            bias_amplitude: 0.04,
        }
    }
}

impl PhantomParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.size < 8 {
            return bad(format!("phantom size {} < 8", self.size));
        }
        if self.downsample_factor == 0 || self.size % self.downsample_factor != 0 {
            return bad(format!(
                "downsample factor {} must divide size {}",
                self.downsample_factor, self.size
            ));
        }
        if self.class_means.iter().flatten().any(|m| !(0.0..=1.0).contains(m)) {
            return bad("class means must lie in [0, 1]".into());
        }
        if !(self.noise_sigma_ulf >= 0.0 && self.blur_sigma_ulf >= 0.0) {
            return bad("noise and blur must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.void_probability) {
            return bad("void probability must be in [0, 1]".into());
        }
        if !(0.0..0.5).contains(&self.bias_amplitude) {
            return bad("bias amplitude must be in [0, 0.5)".into());
        }
        Ok(())
    }
}

/// Region of lost ULF signal and the attenuation applied inside it.
#[derive(Clone, Debug, PartialEq)]
pub struct SignalVoid {
    pub region: Vec<bool>,
    pub factor: f64,
}

/// Fixed anterior-inferior ellipsoid where the nose sits (depth grows inferior, height grows anterior).
pub fn nose_region(shape: [usize; 3]) -> Vec<bool> {
    let [d, h, w] = shape.map(|n| n as f64);
    let center = [0.78 * d, 0.90 * h, 0.5 * w];
    let radii = [0.13 * d, 0.13 * h, 0.2 * w];
    grid(shape)
        .map(|(z, y, x)| {
            let q = [
                (z - center[0]) / radii[0],
                (y - center[1]) / radii[1],
                (x - center[2]) / radii[2],
            ];
            q.iter().map(|v| v * v).sum::<f64>() <= 1.0
        })
        .collect()
}

fn grid(shape: [usize; 3]) -> impl Iterator<Item = (f64, f64, f64)> {
    let [d, h, w] = shape;
    (0..d).flat_map(move |z| {
        (0..h).flat_map(move |y| (0..w).map(move |x| (z as f64 + 0.5, y as f64 + 0.5, x as f64 + 0.5)))
    })
}

fn draw_void(rng: &mut ChaCha8Rng, params: &PhantomParams, shape: [usize; 3]) -> Option<SignalVoid> {
    let on = rng.random::<f64>() < params.void_probability;
    let factor = rng.random_range(0.0..=0.1);
    on.then(|| SignalVoid {
        region: nose_region(shape),
        factor,
    })
}

/// Blur, decimate, re-interpolate, add noise, clip, then attenuate the void.
fn degrade_with(hf: &Volume, params: &PhantomParams, rng: &mut ChaCha8Rng, void: Option<&SignalVoid>) -> Volume {
    let shape = hf.shape();
    let blurred = gaussian_smooth(hf.data(), shape, params.blur_sigma_ulf);
    let f = params.downsample_factor;
    let resampled = if f > 1 {
        let small = [shape[0] / f, shape[1] / f, shape[2] / f];
        let mut down = vec![0.0; small.iter().product()];
        let norm = 1.0 / (f * f * f) as f64;
        for z in 0..small[0] * f {
            for y in 0..small[1] * f {
                for x in 0..small[2] * f {
                    down[((z / f) * small[1] + y / f) * small[2] + x / f] +=
                        norm * blurred[(z * shape[1] + y) * shape[2] + x];
                }
            }
        }
        let t = Tensor::new(&[1, small[0], small[1], small[2]], down);
        resize_trilinear_tensor(&t, shape).into_data()
    } else {
        blurred
    };
    let mut out = resampled;
    if params.noise_sigma_ulf > 0.0 {
        let noise = Normal::new(0.0, params.noise_sigma_ulf).expect("finite sigma");
        for v in out.iter_mut() {
            *v += noise.sample(rng);
        }
    }
    for v in out.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    if let Some(void) = void {
        for (v, &inside) in out.iter_mut().zip(&void.region) {
            if inside {
                *v *= void.factor;
            }
        }
    }
    Volume::new(shape, hf.spacing(), out, NormState::UnitNormalized).expect("clipped to unit range")
}

/// Simulates a ULF acquisition of `hf`. Deterministic in `seed`.
pub fn degrade_to_ulf(hf: &Volume, params: &PhantomParams, seed: u64) -> Result<Volume> {
    Ok(degrade_to_ulf_with_void(hf, params, seed)?.0)
}

/// As [`degrade_to_ulf`], also returning the inserted void, if any.
pub fn degrade_to_ulf_with_void(
    hf: &Volume,
    params: &PhantomParams,
    seed: u64,
) -> Result<(Volume, Option<SignalVoid>)> {
    if hf.norm_state() != NormState::UnitNormalized {
        return Err(Error::InvalidArgument(
            "degrade_to_ulf needs a unit-normalized volume".into(),
        ));
    }
    if params.downsample_factor == 0 || hf.shape().iter().any(|n| n % params.downsample_factor != 0) {
        return Err(Error::InvalidArgument(format!(
            "downsample factor {} must divide shape {:?}",
            params.downsample_factor,
            hf.shape()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let void = draw_void(&mut rng, params, hf.shape());
    let ulf = degrade_with(hf, params, &mut rng, void.as_ref());
    Ok((ulf, void))
}

struct Blob {
    center: [f64; 3],
    radii: [f64; 3],
    label: usize,
}

fn inside(p: [f64; 3], center: [f64; 3], radii: [f64; 3]) -> f64 {
    (0..3)
        .map(|k| ((p[k] - center[k]) / radii[k]).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn labelmap(params: &PhantomParams, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = params.size as f64;
    let half = n / 2.0;
    let center = [
        half + rng.random_range(-0.02..0.02) * n,
        half - 0.03 * n + rng.random_range(-0.02..0.02) * n,
        half + rng.random_range(-0.02..0.02) * n,
    ];
    let radii = [
        half * rng.random_range(0.86..0.92),
        half * rng.random_range(0.84..0.90),
        half * rng.random_range(0.80..0.88),
    ];
    let wm_edge = rng.random_range(0.48..0.54);
    let blobs: Vec<Blob> = (0..params.n_ellipsoids)
        .map(|i| {
            let r = rng.random_range(0.06..0.10) * n;
            Blob {
                center: [
                    center[0] + rng.random_range(-0.12..0.12) * n,
                    center[1] + rng.random_range(-0.12..0.12) * n,
                    center[2] + rng.random_range(-0.12..0.12) * n,
                ],
                radii: [r, r * rng.random_range(0.7..1.3), r * rng.random_range(0.7..1.3)],
                label: if i % 2 == 0 { CSF } else { GM },
            }
        })
        .collect();
    let nose_center = [center[0] + 0.56 * radii[0], center[1] + 0.86 * radii[1], center[2]];
    let nose_radii = [0.22 * radii[0], 0.2 * radii[1], 0.14 * radii[2]];

    grid([params.size; 3])
        .map(|(z, y, x)| {
            let p = [z, y, x];
            let r = inside(p, center, radii);
            let mut label = if r > 1.0 {
                0
            } else if r > 0.86 {
                SCALP
            } else if r > 0.74 {
                SKULL
            } else if r > 0.64 {
                CSF
            } else if r > wm_edge {
                GM
            } else {
                WM
            };
            if label == WM {
                if let Some(b) = blobs.iter().find(|b| inside(p, b.center, b.radii) <= 1.0) {
                    label = b.label;
                }
            }
            if label == 0 && inside(p, nose_center, nose_radii) <= 1.0 {
                label = SCALP;
            }
            label
        })
        .collect()
}

fn bias_field(shape: [usize; 3], amplitude: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let phase: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..std::f64::consts::TAU));
    let weight: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.5..1.0));
    let total: f64 = weight.iter().sum();
    let n = shape.map(|v| v as f64);
    grid(shape)
        .map(|(z, y, x)| {
            let p = [z / n[0], y / n[1], x / n[2]];
            let s: f64 = (0..3)
                .map(|k| weight[k] * (std::f64::consts::PI * p[k] + phase[k]).cos())
                .sum();
            1.0 + amplitude * s / total
        })
        .collect()
}

/// One synthetic subject. Deterministic in `(params, seed)`.
pub fn generate_phantom(params: &PhantomParams, seed: u64) -> Result<Subject> {
    params.validate()?;
    let shape = [params.size; 3];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = labelmap(params, &mut rng);
    let void = draw_void(&mut rng, params, shape);

    let mut hf = ContrastMap::new();
    let mut ulf = ContrastMap::new();
    for (ci, c) in Contrast::ALL.into_iter().enumerate() {
        let bias = bias_field(shape, params.bias_amplitude, &mut rng);
        let texture_noise = Normal::new(0.0, 1.0).expect("unit normal");
        let raw_texture: Vec<f64> = (0..labels.len()).map(|_| texture_noise.sample(&mut rng)).collect();
        let texture = gaussian_smooth(&raw_texture, shape, 1.0);
        let data: Vec<f64> = labels
            .iter()
            .zip(bias.iter().zip(&texture))
            .map(|(&l, (&b, &t))| {
                let m = params.class_means[l][ci];
                if l == 0 {
                    0.0
                } else {
                    (m * b + 0.04 * t).clamp(0.0, 1.0)
                }
            })
            .collect();
        let data: Vec<f64> = gaussian_smooth(&data, shape, 0.5)
            .into_iter()
            .map(|v| v.clamp(0.0, 1.0))
            .collect();
        let hf_c = Volume::unit(shape, data);
        let mut noise_rng = ChaCha8Rng::seed_from_u64(rng.random());
        let ulf_c = degrade_with(&hf_c, params, &mut noise_rng, void.as_ref());
        hf.insert(c, hf_c);
        ulf.insert(c, ulf_c);
    }

    let head: Vec<f64> = labels.iter().map(|&l| if l != 0 { 1.0 } else { 0.0 }).collect();
    let void_mask = void.as_ref().map(|v| {
        let data = v
            .region
            .iter()
            .zip(&labels)
            .map(|(&r, &l)| if r && l != 0 { 1.0 } else { 0.0 })
            .collect();
        Volume::unit(shape, data)
    });
    let subject = Subject {
        id: format!("phantom-{seed:04}"),
        ulf,
        hf: Some(hf),
        labelmap: Some(Volume::raw(shape, labels.iter().map(|&l| l as f64).collect())),
        bg_mask: Some(Volume::unit(shape, head)),
        void_mask,
    };
    subject.validate()?;
    Ok(subject)
}

/// `n` phantoms with seeds `base_seed, base_seed + 1, …`.
pub fn generate_dataset(params: &PhantomParams, n: usize, base_seed: u64) -> Result<Vec<Subject>> {
    (0..n as u64).map(|i| generate_phantom(params, base_seed + i)).collect()
}
