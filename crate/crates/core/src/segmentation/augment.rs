use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use voxgrad::Tensor;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationPolicy {
    pub enabled: bool,
    /// Maximum absolute rotation about each axis, degrees.
    pub rotation_deg: f64,
    /// Per-axis scale drawn from `1 ± scale`.
    pub scale: f64,
    /// Maximum absolute shift per axis, voxels.
    pub translation: f64,
    /// Spatial axes (0 = depth, 1 = height, 2 = width) eligible for flipping.
    pub flip_axes: Vec<usize>,
    pub flip_probability: f64,
    /// Multiplicative jitter `1 ± intensity_scale` per channel.
    pub intensity_scale: f64,
    /// Additive jitter `± intensity_shift` per channel.
    pub intensity_shift: f64,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self {
            enabled: true,
            rotation_deg: 8.0,
            scale: 0.08,
            translation: 1.5,
            flip_axes: vec![2],
            flip_probability: 0.5,
            intensity_scale: 0.1,
            intensity_shift: 0.05,
        }
    }
}

impl AugmentationPolicy {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.rotation_deg >= 0.0
            && (0.0..1.0).contains(&self.scale)
            && self.translation >= 0.0
            && self.flip_axes.iter().all(|&a| a < 3)
            && (0.0..=1.0).contains(&self.flip_probability)
            && (0.0..1.0).contains(&self.intensity_scale)
            && self.intensity_shift >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid augmentation policy {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Interp {
    Linear,
    Nearest,
}

/// Output-to-input voxel mapping: flip, then inverse affine about the volume centre.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialTransform {
    pub inverse: [[f64; 3]; 3],
    pub translation: [f64; 3],
    pub flips: [bool; 3],
}

fn mat_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    std::array::from_fn(|i| std::array::from_fn(|j| (0..3).map(|k| a[i][k] * b[k][j]).sum()))
}

const IDENTITY: [[f64; 3]; 3] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

impl SpatialTransform {
    pub fn identity() -> Self {
        Self {
            inverse: IDENTITY,
            translation: [0.0; 3],
            flips: [false; 3],
        }
    }

    pub fn draw(policy: &AugmentationPolicy, rng: &mut impl Rng) -> Self {
        let mut sym = |r: f64| if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
        let angles: [f64; 3] = std::array::from_fn(|_| sym(policy.rotation_deg).to_radians());
        let scales: [f64; 3] = std::array::from_fn(|_| 1.0 + sym(policy.scale));
        let translation: [f64; 3] = std::array::from_fn(|_| sym(policy.translation));
        let rot = |k: usize, a: f64| {
            let (s, c) = a.sin_cos();
            let (i, j) = ((k + 1) % 3, (k + 2) % 3);
            let mut m = IDENTITY;
            m[i][i] = c;
            m[j][j] = c;
            m[i][j] = -s;
            m[j][i] = s;
            m
        };
        // Inverse of R0·R1·R2·S is S⁻¹·R2ᵀ·R1ᵀ·R0ᵀ; a rotation's inverse is the opposite angle.
        let s_inv = [
            [1.0 / scales[0], 0.0, 0.0],
            [0.0, 1.0 / scales[1], 0.0],
            [0.0, 0.0, 1.0 / scales[2]],
        ];
        let inverse = mat_mul(
            &mat_mul(&mat_mul(&s_inv, &rot(2, -angles[2])), &rot(1, -angles[1])),
            &rot(0, -angles[0]),
        );
        let mut flips = [false; 3];
        for &a in &policy.flip_axes {
            flips[a] = rng.random::<f64>() < policy.flip_probability;
        }
        Self {
            inverse,
            translation,
            flips,
        }
    }

    fn is_pure_flip(&self) -> bool {
        self.inverse == IDENTITY && self.translation == [0.0; 3]
    }

    /// Source coordinate for output voxel `p`.
    fn source(&self, p: [usize; 3], dims: [usize; 3]) -> [f64; 3] {
        let center = dims.map(|n| (n as f64 - 1.0) / 2.0);
        let q: [f64; 3] = std::array::from_fn(|k| {
            let v = if self.flips[k] { dims[k] - 1 - p[k] } else { p[k] };
            v as f64 - center[k] - self.translation[k]
        });
        std::array::from_fn(|i| (0..3).map(|k| self.inverse[i][k] * q[k]).sum::<f64>() + center[i])
    }

    fn flipped_index(&self, p: [usize; 3], dims: [usize; 3]) -> usize {
        let s: [usize; 3] = std::array::from_fn(|k| if self.flips[k] { dims[k] - 1 - p[k] } else { p[k] });
        (s[0] * dims[1] + s[1]) * dims[2] + s[2]
    }

    /// Resamples one channel; samples outside the volume read as zero.
    pub fn apply_image(&self, data: &[f64], dims: [usize; 3], interp: Interp) -> Vec<f64> {
        let [d, h, w] = dims;
        let mut out = Vec::with_capacity(data.len());
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let p = [z, y, x];
                    if self.is_pure_flip() {
                        out.push(data[self.flipped_index(p, dims)]);
                        continue;
                    }
                    let q = self.source(p, dims);
                    out.push(match interp {
                        Interp::Nearest => nearest(data, dims, q).unwrap_or(0.0),
                        Interp::Linear => trilinear(data, dims, q),
                    });
                }
            }
        }
        out
    }

    pub fn apply_labels(&self, labels: &[usize], dims: [usize; 3]) -> Vec<usize> {
        let [d, h, w] = dims;
        let mut out = Vec::with_capacity(labels.len());
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let p = [z, y, x];
                    if self.is_pure_flip() {
                        out.push(labels[self.flipped_index(p, dims)]);
                        continue;
                    }
                    let q = self.source(p, dims);
                    out.push(nearest(labels, dims, q).unwrap_or(0));
                }
            }
        }
        out
    }
}

fn nearest<T: Copy>(data: &[T], dims: [usize; 3], q: [f64; 3]) -> Option<T> {
    let mut i = [0usize; 3];
    for k in 0..3 {
        let r = q[k].round();
        if r < 0.0 || r >= dims[k] as f64 {
            return None;
        }
        i[k] = r as usize;
    }
    Some(data[(i[0] * dims[1] + i[1]) * dims[2] + i[2]])
}

fn trilinear(data: &[f64], dims: [usize; 3], q: [f64; 3]) -> f64 {
    let base = q.map(f64::floor);
    let frac: [f64; 3] = std::array::from_fn(|k| q[k] - base[k]);
    let mut acc = 0.0;
    for corner in 0..8 {
        let off = [corner >> 2 & 1, corner >> 1 & 1, corner & 1];
        let mut weight = 1.0;
        let mut idx = [0usize; 3];
        let mut inside = true;
        for k in 0..3 {
            let c = base[k] as i64 + off[k] as i64;
            weight *= if off[k] == 1 { frac[k] } else { 1.0 - frac[k] };
            if c < 0 || c >= dims[k] as i64 {
                inside = false;
            } else {
                idx[k] = c as usize;
            }
        }
        if inside && weight != 0.0 {
            acc += weight * data[(idx[0] * dims[1] + idx[1]) * dims[2] + idx[2]];
        }
    }
    acc
}

/// Applies one random spatial transform to every image channel (trilinear) and to the
/// labelmap (nearest), then per-channel intensity jitter to the images only.
pub fn augment(
    images: &Tensor,
    labels: &[usize],
    policy: &AugmentationPolicy,
    seed: u64,
) -> Result<(Tensor, Vec<usize>)> {
    policy.validate()?;
    if !policy.enabled {
        return Ok((images.clone(), labels.to_vec()));
    }
    let s = images.shape();
    let dims = [s[1], s[2], s[3]];
    let n: usize = dims.iter().product();
    if labels.len() != n {
        return Err(Error::ShapeMismatch(format!("{} labels for {n} voxels", labels.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = SpatialTransform::draw(policy, &mut rng);
    let mut out = Vec::with_capacity(images.len());
    for ch in images.data().chunks(n) {
        let scale = 1.0
            + if policy.intensity_scale > 0.0 {
                rng.random_range(-policy.intensity_scale..=policy.intensity_scale)
            } else {
                0.0
            };
        let shift = if policy.intensity_shift > 0.0 {
            rng.random_range(-policy.intensity_shift..=policy.intensity_shift)
        } else {
            0.0
        };
        out.extend(
            t.apply_image(ch, dims, Interp::Linear)
                .into_iter()
                .map(|v| (v * scale + shift).clamp(0.0, 1.0)),
        );
    }
    Ok((Tensor::new(s, out), t.apply_labels(labels, dims)))
}
