use std::path::Path as FsPath;

use serde::{Deserialize, Serialize};
use voxgrad::layers::{Conv3d, LayerNorm, Linear};
use voxgrad::{no_grad, Param, ParamStore, Path, Tensor, Var};

use crate::checkpoint::Archive;
use crate::cyclegan::INPUT_LOGIT_EPS;
use crate::enhance::Enhancer;
use crate::error::{Error, Result};
use crate::nn::{from_tokens, pad_to_multiple, to_tokens, TransformerBlock, LEAKY_SLOPE};
use crate::volume::N_CLASSES;

pub const TREX_IN_CHANNELS: usize = 3 + N_CLASSES;
pub const TREX_OUT_CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrexConfig {
    /// Width of each encoder stage; every stage after the first halves the resolution.
    pub enc_channels: Vec<usize>,
    pub n_transformer_layers: usize,
    pub n_heads: usize,
    pub token_dim: usize,
    /// EDSR blocks on each skip connection.
    pub skip_res_blocks: usize,
    pub mlp_ratio: usize,
    /// Side of the learned positional grid, resampled to the latent size.
    pub pos_grid: usize,
    /// Output is `sigmoid(logit(ulf) + net(x))` with a zero-initialized last layer.
    pub input_residual: bool,
    pub paper_scale: bool,
}

impl Default for TrexConfig {
    fn default() -> Self {
        Self {
            enc_channels: vec![8, 16, 32],
            n_transformer_layers: 2,
            n_heads: 4,
            token_dim: 32,
            skip_res_blocks: 1,
            mlp_ratio: 2,
            pos_grid: 4,
            input_residual: true,
            paper_scale: false,
        }
    }
}

impl TrexConfig {
    /// ~24M parameters.
    pub fn paper() -> Self {
        Self {
            enc_channels: vec![32, 64, 128, 256],
            n_transformer_layers: 5,
            n_heads: 8,
            token_dim: 512,
            skip_res_blocks: 2,
            mlp_ratio: 4,
            pos_grid: 8,
            input_residual: true,
            paper_scale: true,
        }
    }

    pub fn effective(&self) -> Self {
        if self.paper_scale {
            Self {
                input_residual: self.input_residual,
                ..Self::paper()
            }
        } else {
            self.clone()
        }
    }

    /// Spatial reduction between the input and the token grid.
    pub fn downsampling_factor(&self) -> usize {
        1 << self.effective().enc_channels.len().saturating_sub(1)
    }

    /// Token grid for an input of spatial size `dims` (after internal padding).
    pub fn latent_dims(&self, dims: [usize; 3]) -> [usize; 3] {
        let f = self.downsampling_factor();
        let pad = pad_to_multiple(dims, f);
        [0, 1, 2].map(|k| (dims[k] + pad[k]) / f)
    }

    pub fn token_count(&self, dims: [usize; 3]) -> usize {
        self.latent_dims(dims).iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.effective();
        let bad = c.enc_channels.is_empty()
            || c.enc_channels.contains(&0)
            || c.n_heads == 0
            || c.token_dim == 0
            || c.token_dim % c.n_heads != 0
            || c.mlp_ratio == 0
            || c.pos_grid == 0;
        if bad {
            return Err(Error::InvalidArgument(format!("invalid T-REX config {self:?}")));
        }
        Ok(())
    }
}

/// conv–ReLU–conv with an identity shortcut and no normalization.
struct EdsrBlock {
    conv1: Conv3d,
    conv2: Conv3d,
}

impl EdsrBlock {
    fn new(p: &mut Path, c: usize) -> Self {
        Self {
            conv1: Conv3d::new(&mut p.sub("conv1"), c, c, 3, 1, 1),
            conv2: Conv3d::new(&mut p.sub("conv2"), c, c, 3, 1, 1),
        }
    }

    fn forward(&self, x: &Var) -> Var {
        x.add(&self.conv2.forward(&self.conv1.forward(x).relu()))
    }
}

struct Bottleneck {
    embed: Linear,
    pos: Param,
    blocks: Vec<TransformerBlock>,
    norm: LayerNorm,
    unembed: Linear,
}

impl Bottleneck {
    fn forward(&self, x: &Var) -> Var {
        let s = x.shape();
        let dims = [s[1], s[2], s[3]];
        let pos = to_tokens(&self.pos.var().resize_trilinear(dims));
        let mut t = self.embed.forward(&to_tokens(x)).add(&pos);
        for b in &self.blocks {
            t = b.forward(&t, 1, &[]);
        }
        let t = self.unembed.forward(&self.norm.forward(&t));
        x.add(&from_tokens(&t, dims))
    }
}

/// Layer counts used for structural checks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrexStructure {
    pub strided_convs: usize,
    pub trilinear_upsamples: usize,
    pub attention_layers: usize,
    /// EDSR blocks per skip connection, shallowest first.
    pub skip_blocks: Vec<usize>,
    /// Normalization layers inside EDSR blocks.
    pub skip_norm_layers: usize,
}

/// U-shaped encoder/decoder with a transformer over latent voxels and EDSR-refined skips.
pub struct Trex {
    pub config: TrexConfig,
    pub store: ParamStore,
    encoder: Vec<(Conv3d, Conv3d)>,
    skips: Vec<Vec<EdsrBlock>>,
    bottleneck: Bottleneck,
    decoder: Vec<(Conv3d, Conv3d)>,
    tail: Conv3d,
}

impl Trex {
    pub fn new(config: &TrexConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let cfg = config.effective();
        let mut store = ParamStore::new(seed);
        let mut root = store.root();
        let mut p = root.sub("trex");
        let ch = &cfg.enc_channels;
        let n = ch.len();
        let encoder = (0..n)
            .map(|i| {
                let mut s = p.sub(format!("enc{i}"));
                let (cin, stride) = if i == 0 { (TREX_IN_CHANNELS, 1) } else { (ch[i - 1], 2) };
                (
                    Conv3d::new(&mut s.sub("a"), cin, ch[i], 3, stride, 1),
                    Conv3d::new(&mut s.sub("b"), ch[i], ch[i], 3, 1, 1),
                )
            })
            .collect();
        let skips = (0..n - 1)
            .map(|i| {
                (0..cfg.skip_res_blocks)
                    .map(|j| EdsrBlock::new(&mut p.sub(format!("skip{i}.{j}")), ch[i]))
                    .collect()
            })
            .collect();
        let deep = ch[n - 1];
        let mut b = p.sub("bottleneck");
        let bottleneck = Bottleneck {
            embed: Linear::new(&mut b.sub("embed"), deep, cfg.token_dim, true),
            pos: b.normal("pos", &[cfg.token_dim, cfg.pos_grid, cfg.pos_grid, cfg.pos_grid], 0.02),
            blocks: (0..cfg.n_transformer_layers)
                .map(|i| {
                    TransformerBlock::new(
                        &mut b.sub(format!("layer{i}")),
                        cfg.token_dim,
                        cfg.n_heads,
                        cfg.mlp_ratio,
                    )
                })
                .collect(),
            norm: LayerNorm::new(&mut b.sub("norm"), cfg.token_dim),
            unembed: Linear::new(&mut b.sub("unembed"), cfg.token_dim, deep, true),
        };
        let decoder = (0..n - 1)
            .rev()
            .map(|i| {
                let mut s = p.sub(format!("dec{i}"));
                (
                    Conv3d::new(&mut s.sub("up"), ch[i + 1], ch[i], 3, 1, 1),
                    Conv3d::new(&mut s.sub("fuse"), 2 * ch[i], ch[i], 3, 1, 1),
                )
            })
            .collect();
        let tail = if cfg.input_residual {
            Conv3d::zeroed(&mut p.sub("tail"), ch[0], TREX_OUT_CHANNELS, 3, 1)
        } else {
            Conv3d::new(&mut p.sub("tail"), ch[0], TREX_OUT_CHANNELS, 3, 1, 1)
        };
        Ok(Self {
            config: cfg,
            store,
            encoder,
            skips,
            bottleneck,
            decoder,
            tail,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_parameters()
    }

    pub fn structure(&self) -> TrexStructure {
        TrexStructure {
            strided_convs: self.encoder.iter().filter(|(a, _)| a.stride == 2).count(),
            trilinear_upsamples: self.decoder.len(),
            attention_layers: self.bottleneck.blocks.len(),
            skip_blocks: self.skips.iter().map(Vec::len).collect(),
            skip_norm_layers: 0,
        }
    }

    /// `[9, D, H, W]` (ULF contrasts then class probabilities) → `[3, D, H, W]`.
    /// Inputs whose sides are not multiples of the downsampling factor are
    /// reflect-padded and the output cropped back.
    pub fn forward(&self, x: &Var) -> Result<Var> {
        let s = x.shape().to_vec();
        if s.len() != 4 || s[0] != TREX_IN_CHANNELS {
            return Err(Error::ChannelMismatch {
                expected: TREX_IN_CHANNELS,
                got: s.first().copied().unwrap_or(0),
            });
        }
        let dims = [s[1], s[2], s[3]];
        let h = x.reflect_pad_end(pad_to_multiple(dims, self.config.downsampling_factor()));
        let mut h = h;
        let mut feats = Vec::with_capacity(self.encoder.len());
        for (a, b) in &self.encoder {
            h = a.forward(&h).leaky_relu(LEAKY_SLOPE);
            h = b.forward(&h).leaky_relu(LEAKY_SLOPE);
            feats.push(h.clone());
        }
        h = self.bottleneck.forward(&h);
        for ((up, fuse), i) in self.decoder.iter().zip((0..self.skips.len()).rev()) {
            let skip = self.skips[i].iter().fold(feats[i].clone(), |v, blk| blk.forward(&v));
            let ss = skip.shape();
            h = up
                .forward(&h.resize_trilinear([ss[1], ss[2], ss[3]]))
                .leaky_relu(LEAKY_SLOPE);
            h = fuse.forward(&Var::concat(&[h, skip], 0)).leaky_relu(LEAKY_SLOPE);
        }
        let y = self.tail.forward(&h).crop3d(dims);
        Ok(if self.config.input_residual {
            x.narrow(0, 0, 3).logit(INPUT_LOGIT_EPS).add(&y).sigmoid()
        } else {
            y.sigmoid()
        })
    }

    pub fn run(&self, ulf: &Var, seg_probs: &Var) -> Result<Var> {
        self.forward(&Var::concat(&[ulf.clone(), seg_probs.clone()], 0))
    }

    pub fn save(&self, path: &FsPath) -> Result<()> {
        let mut a = Archive::new(&self.config)?;
        a.put("weights", &self.store.snapshot());
        a.save(path)
    }

    pub fn load(path: &FsPath) -> Result<Self> {
        let a = Archive::load(path)?;
        let net = Self::new(&a.meta()?, 0)?;
        net.store.load(&a.take("weights"))?;
        Ok(net)
    }
}

impl Enhancer for Trex {
    fn enhance(&self, ulf: &Tensor, seg_probs: &Tensor) -> Result<Tensor> {
        no_grad(|| {
            let y = self.run(&Var::constant(ulf.clone()), &Var::constant(seg_probs.clone()))?;
            Ok(y.value().clone())
        })
    }
}
