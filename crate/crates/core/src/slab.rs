//! Axial slab planning, random slab sampling and overlap-averaged stitching.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use voxgrad::Tensor;

use crate::error::{Error, Result};
use crate::volume::Subject;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlabPlan {
    pub volume_depth: usize,
    pub slab_depth: usize,
    pub stride: usize,
    pub starts: Vec<usize>,
}

/// Starts on the stride grid, plus a final start flush with the end of the volume.
/// A stride longer than the slab would leave gaps and is rejected.
pub fn enumerate_slabs(volume_depth: usize, slab_depth: usize, stride: usize) -> Result<SlabPlan> {
    if slab_depth == 0 || slab_depth > volume_depth {
        return Err(Error::InvalidArgument(format!(
            "slab depth {slab_depth} does not fit volume depth {volume_depth}"
        )));
    }
    if stride == 0 || stride > slab_depth {
        return Err(Error::InvalidArgument(format!(
            "stride {stride} must be in 1..={slab_depth} for slabs to cover the volume"
        )));
    }
    let last = volume_depth - slab_depth;
    let mut starts: Vec<usize> = (0..=last).step_by(stride).collect();
    if starts.last() != Some(&last) {
        starts.push(last);
    }
    Ok(SlabPlan {
        volume_depth,
        slab_depth,
        stride,
        starts,
    })
}

/// Uniformly drawn slab start in `0..=depth - slab_depth`.
pub fn sample_slab_start(depth: usize, slab_depth: usize, rng: &mut impl Rng) -> Result<usize> {
    if slab_depth == 0 || slab_depth > depth {
        return Err(Error::InvalidArgument(format!(
            "slab depth {slab_depth} does not fit volume depth {depth}"
        )));
    }
    Ok(rng.random_range(0..=depth - slab_depth))
}

/// Crops every volume of `subject` to one random slab. Returns the start and the crop.
pub fn sample_training_slab(subject: &Subject, slab_depth: usize, seed: u64) -> Result<(usize, Subject)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = sample_slab_start(subject.shape()[0], slab_depth, &mut rng)?;
    Ok((start, subject.crop_depth(start, slab_depth)))
}

/// Cuts `[C, D, H, W]` into the slabs of `plan`.
pub fn extract(t: &Tensor, plan: &SlabPlan) -> Vec<(usize, Tensor)> {
    plan.starts
        .iter()
        .map(|&s| (s, t.narrow(1, s, plan.slab_depth)))
        .collect()
}

/// Averages overlapping `[C, slab, H, W]` slabs into a `[C, D, H, W]` volume.
pub fn stitch(slabs: &[(usize, Tensor)], plan: &SlabPlan, out_shape: [usize; 4]) -> Result<Tensor> {
    let [c, d, h, w] = out_shape;
    if d != plan.volume_depth {
        return Err(Error::ShapeMismatch(format!(
            "plan depth {} vs output depth {d}",
            plan.volume_depth
        )));
    }
    let plane = h * w;
    let mut sum = vec![0.0; c * d * plane];
    let mut count = vec![0usize; d];
    for (start, slab) in slabs {
        let expected = [c, plan.slab_depth, h, w];
        if slab.shape() != expected || start + plan.slab_depth > d {
            return Err(Error::ShapeMismatch(format!(
                "slab at {start} has shape {:?}, expected {expected:?}",
                slab.shape()
            )));
        }
        let data = slab.data();
        for ch in 0..c {
            let src = &data[ch * plan.slab_depth * plane..(ch + 1) * plan.slab_depth * plane];
            let dst = &mut sum[(ch * d + start) * plane..(ch * d + start + plan.slab_depth) * plane];
            dst.iter_mut().zip(src).for_each(|(o, v)| *o += v);
        }
        for n in &mut count[*start..start + plan.slab_depth] {
            *n += 1;
        }
    }
    if let Some(z) = count.iter().position(|&n| n == 0) {
        return Err(Error::CoverageGap(z));
    }
    for ch in 0..c {
        for z in 0..d {
            let inv = 1.0 / count[z] as f64;
            sum[(ch * d + z) * plane..(ch * d + z + 1) * plane]
                .iter_mut()
                .for_each(|v| *v *= inv);
        }
    }
    Ok(Tensor::new(&out_shape, sum))
}

/// Runs `f` on every slab of `plan` and stitches the results.
pub fn map_slabs(
    input: &Tensor,
    plan: &SlabPlan,
    out_channels: usize,
    mut f: impl FnMut(&Tensor) -> Result<Tensor>,
) -> Result<Tensor> {
    let s = input.shape();
    let outputs = extract(input, plan)
        .into_iter()
        .map(|(start, slab)| Ok((start, f(&slab)?)))
        .collect::<Result<Vec<_>>>()?;
    stitch(&outputs, plan, [out_channels, s[1], s[2], s[3]])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn documented_plans() {
        assert_eq!(enumerate_slabs(50, 40, 5).unwrap().starts, vec![0, 5, 10]);
        assert_eq!(enumerate_slabs(40, 40, 5).unwrap().starts, vec![0]);
        assert_eq!(enumerate_slabs(44, 40, 5).unwrap().starts, vec![0, 4]);
        assert!(enumerate_slabs(39, 40, 5).is_err());
    }

    #[test]
    fn overlap_average() {
        let plan = SlabPlan {
            volume_depth: 50,
            slab_depth: 40,
            stride: 10,
            starts: vec![0, 10],
        };
        let slabs = vec![(0, Tensor::zeros(&[1, 40, 1, 1])), (10, Tensor::ones(&[1, 40, 1, 1]))];
        let out = stitch(&slabs, &plan, [1, 50, 1, 1]).unwrap();
        assert!(out.data()[..10].iter().all(|&v| v == 0.0));
        assert!(out.data()[10..40].iter().all(|&v| v == 0.5));
        assert!(out.data()[40..].iter().all(|&v| v == 1.0));
    }

    #[test]
    fn gap_is_reported() {
        let plan = enumerate_slabs(10, 4, 3).unwrap();
        let slabs = vec![(0, Tensor::zeros(&[1, 4, 1, 1]))];
        assert!(matches!(
            stitch(&slabs, &plan, [1, 10, 1, 1]),
            Err(Error::CoverageGap(4))
        ));
    }
}
