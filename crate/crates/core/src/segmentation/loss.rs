use serde::{Deserialize, Serialize};
use voxgrad::{Tensor, Var};

use crate::error::{Error, Result};
use crate::volume::N_CLASSES;

pub const DICE_SMOOTH: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiceCeWeights {
    pub dice: f64,
    pub ce: f64,
}

impl Default for DiceCeWeights {
    fn default() -> Self {
        Self { dice: 1.0, ce: 1.0 }
    }
}

/// `[6, D, H, W]` one-hot encoding of `labels`.
pub fn one_hot(labels: &[usize], dims: [usize; 3]) -> Result<Tensor> {
    let n: usize = dims.iter().product();
    if labels.len() != n {
        return Err(Error::ShapeMismatch(format!("{} labels for {n} voxels", labels.len())));
    }
    let mut data = vec![0.0; N_CLASSES * n];
    for (i, &l) in labels.iter().enumerate() {
        if l >= N_CLASSES {
            return Err(Error::LabelOutOfRange(l as i64));
        }
        data[l * n + i] = 1.0;
    }
    Ok(Tensor::new(&[N_CLASSES, dims[0], dims[1], dims[2]], data))
}

/// `w_dice · (1 − mean soft Dice over classes) + w_ce · mean voxel cross-entropy`.
pub fn dice_ce_loss(logits: &Var, labels: &[usize], w: DiceCeWeights) -> Result<Var> {
    let s = logits.shape();
    if s.len() != 4 || s[0] != N_CLASSES {
        return Err(Error::ChannelMismatch {
            expected: N_CLASSES,
            got: s.first().copied().unwrap_or(0),
        });
    }
    let dims = [s[1], s[2], s[3]];
    let n: usize = dims.iter().product();
    let target = Var::constant(one_hot(labels, dims)?);
    let probs = logits.softmax(0);
    let flat = |v: &Var| v.reshape(&[N_CLASSES, n]).sum_axis(1);
    let inter = flat(&probs.mul(&target));
    let denom = flat(&probs).add(&flat(&target));
    let dice = inter
        .mul_scalar(2.0)
        .add_scalar(DICE_SMOOTH)
        .div(&denom.add_scalar(DICE_SMOOTH));
    let dice_loss = dice.mean().neg().add_scalar(1.0);
    let ce = logits.log_softmax(0).mul(&target).sum().mul_scalar(-1.0 / n as f64);
    Ok(dice_loss.mul_scalar(w.dice).add(&ce.mul_scalar(w.ce)))
}

/// Mean Dice over `classes`, skipping classes absent from both maps.
pub fn mean_dice(pred: &[usize], truth: &[usize], classes: &[usize]) -> Result<f64> {
    if classes.is_empty() {
        return Err(Error::InvalidArgument("mean_dice needs at least one class".into()));
    }
    if pred.len() != truth.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} vs {} labels",
            pred.len(),
            truth.len()
        )));
    }
    let scores: Vec<f64> = classes
        .iter()
        .filter_map(|&c| {
            let (mut both, mut p, mut t) = (0usize, 0usize, 0usize);
            for (&a, &b) in pred.iter().zip(truth) {
                let (ia, ib) = (a == c, b == c);
                both += usize::from(ia && ib);
                p += usize::from(ia);
                t += usize::from(ib);
            }
            (p + t > 0).then(|| 2.0 * both as f64 / (p + t) as f64)
        })
        .collect();
    if scores.is_empty() {
        return Ok(1.0);
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}
