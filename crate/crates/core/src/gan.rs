//! Patch discriminator and least-squares adversarial objectives.

use serde::{Deserialize, Serialize};
use voxgrad::layers::Conv3d;
use voxgrad::{ParamStore, Var};

use crate::error::{Error, Result};
use crate::nn::NORM_EPS;

const D_SLOPE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub base_channels: usize,
    /// Stride-2 stages before the stride-1 scoring layers.
    pub n_layers: usize,
    pub kernel: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            base_channels: 8,
            n_layers: 2,
            kernel: 4,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.n_layers == 0 || !(2..=5).contains(&self.kernel) {
            return Err(Error::InvalidArgument(format!("invalid discriminator config {self:?}")));
        }
        Ok(())
    }
}

/// Fully convolutional 3D classifier emitting one score per receptive-field patch.
pub struct PatchDiscriminator {
    pub in_channels: usize,
    pub store: ParamStore,
    convs: Vec<Conv3d>,
}

impl PatchDiscriminator {
    pub fn new(in_channels: usize, config: &DiscriminatorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(seed);
        let mut root = store.root();
        let mut p = root.sub("disc");
        let (k, pad) = (config.kernel, config.kernel / 2 - usize::from(config.kernel % 2 == 0));
        let mut convs = Vec::new();
        let mut c = in_channels;
        for i in 0..config.n_layers {
            let out = config.base_channels << i;
            convs.push(Conv3d::new(&mut p.sub(format!("down{i}")), c, out, k, 2, pad));
            c = out;
        }
        let wide = config.base_channels << config.n_layers;
        convs.push(Conv3d::new(&mut p.sub("mid"), c, wide, 3, 1, 1));
        convs.push(Conv3d::new(&mut p.sub("score"), wide, 1, 3, 1, 1));
        Ok(Self {
            in_channels,
            store,
            convs,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_parameters()
    }

    /// `[C, D, H, W]` → `[1, d, h, w]` patch scores.
    pub fn forward(&self, x: &Var) -> Result<Var> {
        let got = x.shape().first().copied().unwrap_or(0);
        if x.shape().len() != 4 || got != self.in_channels {
            return Err(Error::ChannelMismatch {
                expected: self.in_channels,
                got,
            });
        }
        let last = self.convs.len() - 1;
        let mut h = x.clone();
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(&h);
            if i < last {
                if i > 0 {
                    h = h.instance_norm(NORM_EPS);
                }
                h = h.leaky_relu(D_SLOPE);
            }
        }
        Ok(h)
    }

    /// Freezes or unfreezes every weight (used to hold D fixed during the generator step).
    pub fn set_trainable(&self, on: bool) {
        self.store.set_trainable(on);
    }
}

/// `mean((D(fake) − 1)²)`.
pub fn lsgan_generator(d_fake: &Var) -> Var {
    d_fake.add_scalar(-1.0).square().mean()
}

/// `½·mean((D(real) − 1)²) + ½·mean(D(fake)²)`.
pub fn lsgan_discriminator(d_real: &Var, d_fake: &Var) -> Var {
    d_real
        .add_scalar(-1.0)
        .square()
        .mean()
        .add(&d_fake.square().mean())
        .mul_scalar(0.5)
}

pub struct AdversarialLosses {
    pub generator: Var,
    pub discriminator: Var,
}

/// Least-squares generator and discriminator terms from patch scores.
pub fn adversarial_losses(d_real: &Var, d_fake: &Var) -> AdversarialLosses {
    AdversarialLosses {
        generator: lsgan_generator(d_fake),
        discriminator: lsgan_discriminator(d_real, d_fake),
    }
}

/// Graph-detached copy of `x`.
pub fn detach(x: &Var) -> Var {
    Var::constant(x.value().clone())
}
