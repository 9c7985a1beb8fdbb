//! Network pieces shared by the segmentation and enhancement models.

use voxgrad::layers::{Conv3d, LayerNorm, Linear};
use voxgrad::{Path, Tensor, Var};

use crate::error::{Error, Result};
use crate::volume::{Contrast, ContrastMap, Volume};

pub const LEAKY_SLOPE: f64 = 0.01;
pub const NORM_EPS: f64 = 1e-5;

/// `[C, D, H, W]` tensor → graph constant.
pub fn constant(t: &Tensor) -> Var {
    Var::constant(t.clone())
}

/// Residual unit: two 3³ convs with instance norm and leaky ReLU; a 1³ projection when widths differ.
pub struct ResUnit {
    conv1: Conv3d,
    conv2: Conv3d,
    project: Option<Conv3d>,
}

impl ResUnit {
    pub fn new(p: &mut Path, c_in: usize, c_out: usize) -> Self {
        Self {
            conv1: Conv3d::with_bias(&mut p.sub("conv1"), c_in, c_out, 3, 1, 1, false),
            conv2: Conv3d::with_bias(&mut p.sub("conv2"), c_out, c_out, 3, 1, 1, false),
            project: (c_in != c_out).then(|| Conv3d::with_bias(&mut p.sub("project"), c_in, c_out, 1, 1, 0, false)),
        }
    }

    pub fn forward(&self, x: &Var) -> Var {
        let h = self.conv1.forward(x).instance_norm(NORM_EPS).leaky_relu(LEAKY_SLOPE);
        let h = self.conv2.forward(&h).instance_norm(NORM_EPS);
        let r = match &self.project {
            Some(c) => c.forward(x).instance_norm(NORM_EPS),
            None => x.clone(),
        };
        h.add(&r).leaky_relu(LEAKY_SLOPE)
    }
}

/// Two-layer perceptron with GELU on `[N, dim]` rows.
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new(p: &mut Path, dim: usize, hidden: usize) -> Self {
        Self {
            fc1: Linear::new(&mut p.sub("fc1"), dim, hidden, true),
            fc2: Linear::new(&mut p.sub("fc2"), hidden, dim, true),
        }
    }

    pub fn forward(&self, x: &Var) -> Var {
        self.fc2.forward(&self.fc1.forward(x).gelu())
    }
}

/// Multi-head self-attention over `[B·N, dim]` rows grouped into `B` sequences of length `N`.
pub struct Attention {
    qkv: Linear,
    proj: Linear,
    heads: usize,
}

impl Attention {
    pub fn new(p: &mut Path, dim: usize, heads: usize) -> Self {
        assert!(
            heads > 0 && dim % heads == 0,
            "dim {dim} not divisible by {heads} heads"
        );
        Self {
            qkv: Linear::new(&mut p.sub("qkv"), dim, 3 * dim, true),
            proj: Linear::new(&mut p.sub("proj"), dim, dim, true),
            heads,
        }
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    /// `bias`, when given, is added to the `[B, heads, N, N]` logits (broadcast over `B`
    /// when its shape is `[heads, N, N]`).
    pub fn forward(&self, x: &Var, batch: usize, bias: &[&Var]) -> Var {
        let rows = x.shape()[0];
        let dim = x.shape()[1];
        let n = rows / batch;
        let hd = dim / self.heads;
        let qkv = self
            .qkv
            .forward(x)
            .reshape(&[batch, n, 3, self.heads, hd])
            .permute(&[2, 0, 3, 1, 4]);
        let part = |k: usize| qkv.narrow(0, k, 1).reshape(&[batch * self.heads, n, hd]);
        let (q, k, v) = (part(0), part(1), part(2));
        let mut logits = q
            .bmm(&k, false, true)
            .mul_scalar(1.0 / (hd as f64).sqrt())
            .reshape(&[batch, self.heads, n, n]);
        for b in bias {
            logits = if b.shape().len() == 3 {
                logits.add_trailing(b)
            } else {
                logits.add(b)
            };
        }
        let attn = logits.softmax(3).reshape(&[batch * self.heads, n, n]);
        let out = attn
            .bmm(&v, false, false)
            .reshape(&[batch, self.heads, n, hd])
            .permute(&[0, 2, 1, 3])
            .reshape(&[rows, dim]);
        self.proj.forward(&out)
    }
}

/// Pre-norm transformer block on `[B·N, dim]` rows.
pub struct TransformerBlock {
    norm1: LayerNorm,
    attn: Attention,
    norm2: LayerNorm,
    mlp: Mlp,
}

impl TransformerBlock {
    pub fn new(p: &mut Path, dim: usize, heads: usize, mlp_ratio: usize) -> Self {
        Self {
            norm1: LayerNorm::new(&mut p.sub("norm1"), dim),
            attn: Attention::new(&mut p.sub("attn"), dim, heads),
            norm2: LayerNorm::new(&mut p.sub("norm2"), dim),
            mlp: Mlp::new(&mut p.sub("mlp"), dim, dim * mlp_ratio),
        }
    }

    pub fn attention(&self) -> &Attention {
        &self.attn
    }

    pub fn forward(&self, x: &Var, batch: usize, bias: &[&Var]) -> Var {
        let x = x.add(&self.attn.forward(&self.norm1.forward(x), batch, bias));
        x.add(&self.mlp.forward(&self.norm2.forward(&x)))
    }
}

/// `[C, D, H, W]` → `[D·H·W, C]` token rows.
pub fn to_tokens(x: &Var) -> Var {
    let s = x.shape();
    let (c, n) = (s[0], s[1] * s[2] * s[3]);
    x.permute(&[1, 2, 3, 0]).reshape(&[n, c])
}

/// `[D·H·W, C]` token rows → `[C, D, H, W]`.
pub fn from_tokens(t: &Var, dims: [usize; 3]) -> Var {
    let c = t.shape()[1];
    t.reshape(&[dims[0], dims[1], dims[2], c]).permute(&[3, 0, 1, 2])
}

/// Smallest padding making every spatial dim a multiple of `factor`.
pub fn pad_to_multiple(dims: [usize; 3], factor: usize) -> [usize; 3] {
    dims.map(|n| n.div_ceil(factor) * factor - n)
}

/// Stacks the three contrasts of `map` into a `[3, D, H, W]` tensor (T1, T2, FLAIR order).
pub fn stack_contrasts(map: &ContrastMap) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut shape = None;
    for c in Contrast::ALL {
        let v = map
            .get(&c)
            .ok_or_else(|| Error::ContrastMismatch(format!("missing {c}")))?;
        if *shape.get_or_insert(v.shape()) != v.shape() {
            return Err(Error::ShapeMismatch(format!("{c}: {:?}", v.shape())));
        }
        data.extend_from_slice(v.data());
    }
    let [d, h, w] = shape.expect("three contrasts");
    Ok(Tensor::new(&[3, d, h, w], data))
}

/// Inverse of [`stack_contrasts`]; volumes are marked unit-normalized.
pub fn unstack_contrasts(t: &Tensor) -> ContrastMap {
    let s = t.shape();
    let dims = [s[1], s[2], s[3]];
    let n = dims.iter().product::<usize>();
    Contrast::ALL
        .iter()
        .zip(t.data().chunks(n))
        .map(|(&c, ch)| (c, Volume::unit(dims, ch.to_vec())))
        .collect()
}
