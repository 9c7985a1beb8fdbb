//! Differentiable metrics on `[C, D, H, W]` graph values.

use voxgrad::Var;

use super::SsimConfig;

fn spatial(x: &Var) -> [usize; 3] {
    let s = x.shape();
    assert_eq!(s.len(), 4, "metrics expect [C, D, H, W], got {s:?}");
    [s[1], s[2], s[3]]
}

/// Mean SSIM over channels and voxels; matches [`super::ssim`] per channel.
pub fn ssim(a: &Var, b: &Var, cfg: &SsimConfig) -> Var {
    assert_eq!(a.shape(), b.shape(), "ssim: shape mismatch");
    let maps = cfg.axis_maps(spatial(a));
    let blur = |x: &Var| {
        maps.iter()
            .enumerate()
            .fold(x.clone(), |v, (k, m)| v.map_axis(k + 1, m.clone()))
    };
    let mu_a = blur(a);
    let mu_b = blur(b);
    let mu_ab = mu_a.mul(&mu_b);
    let mu_aa = mu_a.square();
    let mu_bb = mu_b.square();
    let var_a = blur(&a.square()).sub(&mu_aa);
    let var_b = blur(&b.square()).sub(&mu_bb);
    let cov = blur(&a.mul(b)).sub(&mu_ab);
    let num = mu_ab
        .mul_scalar(2.0)
        .add_scalar(cfg.c1())
        .mul(&cov.mul_scalar(2.0).add_scalar(cfg.c2()));
    let den = mu_aa
        .add(&mu_bb)
        .add_scalar(cfg.c1())
        .mul(&var_a.add(&var_b).add_scalar(cfg.c2()));
    num.div(&den).mean()
}

pub fn mse(a: &Var, b: &Var) -> Var {
    a.sub(b).square().mean()
}

/// PSNR in dB, held at `cap` (with zero gradient) once the error is small enough to exceed it.
pub fn psnr_capped(a: &Var, b: &Var, cap: f64) -> Var {
    let m = mse(a, b);
    let floor = 10f64.powf(-cap / 10.0);
    if m.value().item() <= floor {
        Var::constant(voxgrad::Tensor::scalar(cap))
    } else {
        m.ln().mul_scalar(-10.0 / std::f64::consts::LN_10)
    }
}

pub fn mae(a: &Var, b: &Var) -> Var {
    a.sub(b).abs().mean()
}

/// `Σ(a − b)² / Σb²`.
pub fn nmse(a: &Var, b: &Var) -> Var {
    a.sub(b).square().sum().div(&b.square().sum())
}

/// Weighted challenge score with a capped PSNR.
pub fn weighted_score(a: &Var, b: &Var, ssim_cfg: &SsimConfig, psnr_cap: f64) -> Var {
    let s = ssim(a, b, ssim_cfg).mul_scalar(0.7);
    let p = psnr_capped(a, b, psnr_cap).mul_scalar(0.1);
    let m = mae(a, b).mul_scalar(-0.1).add_scalar(0.1);
    let n = nmse(a, b).mul_scalar(-0.1).add_scalar(0.1);
    s.add(&p).add(&m).add(&n)
}
