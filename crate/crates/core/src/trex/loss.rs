use std::sync::Arc;

use serde::{Deserialize, Serialize};
use voxgrad::{AxisMap, Var};

use crate::cyclegan::DEFAULT_PSNR_CAP;
use crate::error::{Error, Result};
use crate::metrics::diff;

/// Added under the square root of the gradient magnitude.
pub const SOBEL_EPS: f64 = 1e-6;

const SOBEL_DERIV: [f64; 3] = [-0.5, 0.0, 0.5];
const SOBEL_SMOOTH: [f64; 3] = [0.25, 0.5, 0.25];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContentLossWeights {
    pub w_l1: f64,
    pub w_psnr: f64,
    pub w_sobel: f64,
    pub psnr_cap: f64,
}

impl Default for ContentLossWeights {
    fn default() -> Self {
        Self {
            w_l1: 1.0,
            w_psnr: 0.01,
            w_sobel: 1.0,
            psnr_cap: DEFAULT_PSNR_CAP,
        }
    }
}

impl ContentLossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.w_l1, self.w_psnr, self.w_sobel];
        if w.iter().any(|v| !(*v >= 0.0 && v.is_finite())) || !(self.psnr_cap > 0.0) {
            return Err(Error::InvalidArgument(format!("invalid content loss weights {self:?}")));
        }
        if w.iter().all(|v| *v == 0.0) {
            return Err(Error::InvalidArgument("content loss weights are all zero".into()));
        }
        Ok(())
    }
}

fn check_pair(pred: &Var, target: &Var, what: &str) -> Result<()> {
    if pred.shape() != target.shape() || pred.shape().len() != 4 {
        return Err(Error::ShapeMismatch(format!(
            "{what}: {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    Ok(())
}

/// Per-channel 3D Sobel gradient magnitude `sqrt(Gx² + Gy² + Gz² + ε)` over the valid
/// interior, `[C, D, H, W]` → `[C, D−2, H−2, W−2]`. Kernels are scaled so a unit ramp
/// has unit gradient.
pub fn sobel_magnitude(x: &Var) -> Result<Var> {
    let s = x.shape().to_vec();
    if s.len() != 4 || s[1..].iter().any(|&n| n < 3) {
        return Err(Error::ShapeMismatch(format!(
            "sobel needs [C, D≥3, H≥3, W≥3], got {s:?}"
        )));
    }
    let deriv: Vec<Arc<AxisMap>> = (1..4)
        .map(|a| Arc::new(AxisMap::valid_filter(s[a], &SOBEL_DERIV)))
        .collect();
    let smooth: Vec<Arc<AxisMap>> = (1..4)
        .map(|a| Arc::new(AxisMap::valid_filter(s[a], &SOBEL_SMOOTH)))
        .collect();
    let mut sq = None;
    for d in 0..3 {
        let g = (0..3).fold(x.clone(), |v, a| {
            let m = if a == d { &deriv[a] } else { &smooth[a] };
            v.map_axis(a + 1, m.clone())
        });
        let g2 = g.square();
        sq = Some(match sq {
            None => g2,
            Some(acc) => g2.add(&acc),
        });
    }
    Ok(sq.expect("three axes").add_scalar(SOBEL_EPS).sqrt())
}

/// Mean absolute difference of Sobel gradient magnitudes.
pub fn sobel_loss(pred: &Var, target: &Var) -> Result<Var> {
    check_pair(pred, target, "sobel_loss")?;
    Ok(sobel_magnitude(pred)?.sub(&sobel_magnitude(target)?).abs().mean())
}

/// `−PSNR`, held at `−cap` once the error is small enough.
pub fn psnr_term(pred: &Var, target: &Var, cap: f64) -> Result<Var> {
    check_pair(pred, target, "psnr_term")?;
    Ok(diff::psnr_capped(pred, target, cap).neg())
}

/// Individual content terms (unweighted) and their weighted total.
pub struct ContentTerms {
    pub l1: Option<Var>,
    pub psnr: Option<Var>,
    pub sobel: Option<Var>,
    pub total: Var,
}

/// Weighted content terms; zero-weight terms are not evaluated.
pub fn content_terms(pred: &Var, target: &Var, w: &ContentLossWeights) -> Result<ContentTerms> {
    w.validate()?;
    check_pair(pred, target, "content_loss")?;
    let l1 = (w.w_l1 > 0.0).then(|| diff::mae(pred, target));
    let psnr = (w.w_psnr > 0.0)
        .then(|| psnr_term(pred, target, w.psnr_cap))
        .transpose()?;
    let sobel = (w.w_sobel > 0.0).then(|| sobel_loss(pred, target)).transpose()?;
    let total = [(&l1, w.w_l1), (&psnr, w.w_psnr), (&sobel, w.w_sobel)]
        .into_iter()
        .filter_map(|(t, k)| t.as_ref().map(|t| if k == 1.0 { t.clone() } else { t.mul_scalar(k) }))
        .reduce(|a, b| a.add(&b))
        .expect("at least one weight is positive");
    Ok(ContentTerms { l1, psnr, sobel, total })
}

/// `w_l1·L1 + w_psnr·(−PSNR) + w_sobel·Sobel`.
pub fn content_loss(pred: &Var, target: &Var, w: &ContentLossWeights) -> Result<Var> {
    Ok(content_terms(pred, target, w)?.total)
}
