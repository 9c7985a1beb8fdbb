//! Parameterized building blocks.

use crate::graph::Var;
use crate::param::{Param, Path};

/// Fully connected layer on `[N, in]` rows.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Param,
    pub bias: Option<Param>,
}

impl Linear {
    pub fn new(p: &mut Path, d_in: usize, d_out: usize, bias: bool) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        let weight = p.uniform("weight", &[d_in, d_out], bound);
        let bias = bias.then(|| p.uniform("bias", &[d_out], bound));
        Self { weight, bias }
    }

    pub fn forward(&self, x: &Var) -> Var {
        let y = x.matmul(&self.weight.var());
        match &self.bias {
            Some(b) => y.add_along(&b.var(), 1),
            None => y,
        }
    }
}

/// Cubic-kernel 3D convolution with zero padding.
#[derive(Clone, Debug)]
pub struct Conv3d {
    pub weight: Param,
    pub bias: Option<Param>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv3d {
    pub fn new(p: &mut Path, c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize) -> Self {
        Self::with_bias(p, c_in, c_out, k, stride, pad, true)
    }

    pub fn with_bias(p: &mut Path, c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize, bias: bool) -> Self {
        let bound = 1.0 / ((c_in * k * k * k) as f64).sqrt();
        let weight = p.uniform("weight", &[c_out, c_in, k, k, k], bound);
        let bias = bias.then(|| p.uniform("bias", &[c_out], bound));
        Self {
            weight,
            bias,
            stride,
            pad,
        }
    }

    /// Same as [`Conv3d::new`] but with all weights and bias set to zero.
    pub fn zeroed(p: &mut Path, c_in: usize, c_out: usize, k: usize, pad: usize) -> Self {
        Self {
            weight: p.zeros("weight", &[c_out, c_in, k, k, k]),
            bias: Some(p.zeros("bias", &[c_out])),
            stride: 1,
            pad,
        }
    }

    pub fn forward(&self, x: &Var) -> Var {
        let y = x.conv3d(&self.weight.var(), self.stride, self.pad);
        match &self.bias {
            Some(b) => y.add_along(&b.var(), 0),
            None => y,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }
}

/// Kernel-2 stride-2 transposed convolution.
#[derive(Clone, Debug)]
pub struct ConvTranspose3d {
    pub weight: Param,
    pub bias: Param,
}

impl ConvTranspose3d {
    pub fn new(p: &mut Path, c_in: usize, c_out: usize) -> Self {
        let bound = 1.0 / ((c_out * 8) as f64).sqrt();
        Self {
            weight: p.uniform("weight", &[c_in, c_out, 2, 2, 2], bound),
            bias: p.uniform("bias", &[c_out], bound),
        }
    }

    pub fn forward(&self, x: &Var) -> Var {
        x.conv_transpose3d_2x(&self.weight.var()).add_along(&self.bias.var(), 0)
    }
}

/// Layer normalization over the last axis with learned scale and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(p: &mut Path, dim: usize) -> Self {
        Self {
            gamma: p.ones("gamma", &[dim]),
            beta: p.zeros("beta", &[dim]),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Var) -> Var {
        let last = x.shape().len() - 1;
        x.layer_norm(self.eps)
            .mul_along(&self.gamma.var(), last)
            .add_along(&self.beta.var(), last)
    }
}

/// Instance normalization with per-channel affine parameters.
#[derive(Clone, Debug)]
pub struct InstanceNorm {
    pub gamma: Param,
    pub beta: Param,
    pub eps: f64,
}

impl InstanceNorm {
    pub fn new(p: &mut Path, channels: usize) -> Self {
        Self {
            gamma: p.ones("gamma", &[channels]),
            beta: p.zeros("beta", &[channels]),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Var) -> Var {
        x.instance_norm(self.eps)
            .mul_along(&self.gamma.var(), 0)
            .add_along(&self.beta.var(), 0)
    }
}
