use std::path::Path as FsPath;

use serde::{Deserialize, Serialize};
use voxgrad::layers::{Conv3d, InstanceNorm};
use voxgrad::{no_grad, ParamStore, Path, Tensor, Var};

use crate::checkpoint::Archive;
use crate::enhance::Enhancer;
use crate::error::{Error, Result};
use crate::nn::NORM_EPS;
use crate::volume::N_CLASSES;

/// Clamp used before the logit of the input in the residual output path.
pub const INPUT_LOGIT_EPS: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditioningMode {
    /// Class probabilities appended to the three input contrasts.
    Concat,
    /// Class probabilities drive every normalization layer.
    Spade,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    UlfToHf,
    HfToUlf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub conditioning_mode: ConditioningMode,
    pub direction: Direction,
    pub n_res_blocks: usize,
    pub base_channels: usize,
    pub n_downsampling: usize,
    /// Kernel of the first and last convolutions.
    pub edge_kernel: usize,
    /// Hidden width of the SPADE conditioning convolution.
    pub spade_hidden: usize,
    /// Output is `sigmoid(logit(input) + net(input))` instead of `sigmoid(net(input))`.
    pub input_residual: bool,
    pub paper_scale: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            conditioning_mode: ConditioningMode::Concat,
            direction: Direction::UlfToHf,
            n_res_blocks: 9,
            base_channels: 8,
            n_downsampling: 2,
            edge_kernel: 3,
            spade_hidden: 8,
            input_residual: true,
            paper_scale: false,
        }
    }
}

impl GeneratorConfig {
    pub fn new(mode: ConditioningMode, direction: Direction) -> Self {
        Self {
            conditioning_mode: mode,
            direction,
            ..Self::default()
        }
    }

    /// Full-scale sizing: ~33M parameters in either conditioning mode.
    pub fn paper(mode: ConditioningMode, direction: Direction) -> Self {
        let base_channels = match (mode, direction) {
            (ConditioningMode::Spade, Direction::UlfToHf) => 48,
            _ => 64,
        };
        Self {
            conditioning_mode: mode,
            direction,
            n_res_blocks: 9,
            base_channels,
            n_downsampling: 2,
            edge_kernel: 7,
            spade_hidden: 64,
            input_residual: true,
            paper_scale: true,
        }
    }

    pub fn effective(&self) -> Self {
        if self.paper_scale {
            Self {
                input_residual: self.input_residual,
                ..Self::paper(self.conditioning_mode, self.direction)
            }
        } else {
            self.clone()
        }
    }

    /// SPADE only applies to the ULF→HF direction; HF→ULF is always unconditioned.
    pub fn uses_spade(&self) -> bool {
        self.conditioning_mode == ConditioningMode::Spade && self.direction == Direction::UlfToHf
    }

    pub fn in_channels(&self) -> usize {
        match (self.direction, self.conditioning_mode) {
            (Direction::UlfToHf, ConditioningMode::Concat) => 3 + N_CLASSES,
            _ => 3,
        }
    }

    pub fn out_channels(&self) -> usize {
        3
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.effective();
        if c.base_channels == 0 || c.edge_kernel % 2 == 0 || c.n_downsampling > 4 {
            return Err(Error::InvalidArgument(format!("invalid generator config {self:?}")));
        }
        if c.uses_spade() && c.spade_hidden == 0 {
            return Err(Error::InvalidArgument("SPADE needs spade_hidden > 0".into()));
        }
        Ok(())
    }
}

/// Learned modulation for [`spade_normalize`].
pub struct Spade {
    shared: Conv3d,
    gamma: Conv3d,
    beta: Conv3d,
}

impl Spade {
    /// γ and β convolutions start at zero, so a fresh layer is plain normalization.
    pub fn new(p: &mut Path, channels: usize, cond_channels: usize, hidden: usize) -> Self {
        Self {
            shared: Conv3d::new(&mut p.sub("shared"), cond_channels, hidden, 3, 1, 1),
            gamma: Conv3d::zeroed(&mut p.sub("gamma"), hidden, channels, 3, 1),
            beta: Conv3d::zeroed(&mut p.sub("beta"), hidden, channels, 3, 1),
        }
    }

    /// Random (non-zero) γ/β weights, for tests of the modulation path.
    pub fn with_random_modulation(p: &mut Path, channels: usize, cond_channels: usize, hidden: usize) -> Self {
        Self {
            shared: Conv3d::new(&mut p.sub("shared"), cond_channels, hidden, 3, 1, 1),
            gamma: Conv3d::new(&mut p.sub("gamma"), hidden, channels, 3, 1, 1),
            beta: Conv3d::new(&mut p.sub("beta"), hidden, channels, 3, 1, 1),
        }
    }

    /// `(γ(seg), β(seg))` at the spatial size of `seg`.
    pub fn modulation(&self, seg: &Var) -> (Var, Var) {
        let h = self.shared.forward(seg).relu();
        (self.gamma.forward(&h), self.beta.forward(&h))
    }
}

/// `instance_norm(x) · (1 + γ(seg)) + β(seg)`, with `seg` trilinearly resampled to `x`.
pub fn spade_normalize(features: &Var, seg_probs: &Var, spade: &Spade) -> Result<Var> {
    let (fs, ss) = (features.shape(), seg_probs.shape());
    if fs.len() != 4 || ss.len() != 4 {
        return Err(Error::ShapeMismatch(format!("spade: {fs:?} vs {ss:?}")));
    }
    let dims = [fs[1], fs[2], fs[3]];
    let seg = seg_probs.resize_trilinear(dims);
    let (gamma, beta) = spade.modulation(&seg);
    if gamma.shape() != fs {
        return Err(Error::ShapeMismatch(format!(
            "spade modulation {:?} vs features {fs:?}",
            gamma.shape()
        )));
    }
    Ok(features.instance_norm(NORM_EPS).mul(&gamma.add_scalar(1.0)).add(&beta))
}

enum Norm {
    Instance(InstanceNorm),
    Spade(Spade),
}

impl Norm {
    fn new(p: &mut Path, channels: usize, cfg: &GeneratorConfig) -> Self {
        if cfg.uses_spade() {
            Norm::Spade(Spade::new(&mut p.sub("spade"), channels, N_CLASSES, cfg.spade_hidden))
        } else {
            Norm::Instance(InstanceNorm::new(&mut p.sub("norm"), channels))
        }
    }

    fn forward(&self, x: &Var, seg: Option<&Var>) -> Result<Var> {
        match (self, seg) {
            (Norm::Instance(n), _) => Ok(n.forward(x)),
            (Norm::Spade(s), Some(seg)) => spade_normalize(x, seg, s),
            (Norm::Spade(_), None) => Err(Error::InvalidArgument("SPADE generator needs conditioning maps".into())),
        }
    }

    fn kind(&self) -> LayerKind {
        match self {
            Norm::Instance(_) => LayerKind::InstanceNorm,
            Norm::Spade(_) => LayerKind::Spade,
        }
    }
}

/// Structural summary entry, in forward order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv { kernel: usize, stride: usize },
    ConvTranspose,
    TrilinearUpsample,
    InstanceNorm,
    Spade,
    ResidualAdd,
}

struct ConvNorm {
    conv: Conv3d,
    norm: Norm,
}

impl ConvNorm {
    fn new(p: &mut Path, cin: usize, cout: usize, k: usize, stride: usize, cfg: &GeneratorConfig) -> Self {
        Self {
            conv: Conv3d::new(&mut p.sub("conv"), cin, cout, k, stride, k / 2),
            norm: Norm::new(p, cout, cfg),
        }
    }

    fn forward(&self, x: &Var, seg: Option<&Var>, relu: bool) -> Result<Var> {
        let y = self.norm.forward(&self.conv.forward(x), seg)?;
        Ok(if relu { y.relu() } else { y })
    }

    fn kinds(&self, out: &mut Vec<LayerKind>) {
        let w = self.conv.weight.shape();
        out.push(LayerKind::Conv {
            kernel: w[2],
            stride: self.conv.stride,
        });
        out.push(self.norm.kind());
    }
}

/// ResNet-style 3D generator: edge conv, strided downsampling, residual blocks,
/// trilinear upsampling each followed by a conv, edge conv, sigmoid output.
pub struct Generator {
    pub config: GeneratorConfig,
    pub store: ParamStore,
    head: ConvNorm,
    down: Vec<ConvNorm>,
    blocks: Vec<(ConvNorm, ConvNorm)>,
    up: Vec<ConvNorm>,
    tail: Conv3d,
}

impl Generator {
    pub fn new(config: &GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let cfg = config.effective();
        let mut store = ParamStore::new(seed);
        let mut root = store.root();
        let mut p = root.sub("gen");
        let ngf = cfg.base_channels;
        let head = ConvNorm::new(&mut p.sub("head"), cfg.in_channels(), ngf, cfg.edge_kernel, 1, &cfg);
        let down = (0..cfg.n_downsampling)
            .map(|i| ConvNorm::new(&mut p.sub(format!("down{i}")), ngf << i, ngf << (i + 1), 3, 2, &cfg))
            .collect();
        let wide = ngf << cfg.n_downsampling;
        let blocks = (0..cfg.n_res_blocks)
            .map(|i| {
                let mut b = p.sub(format!("block{i}"));
                (
                    ConvNorm::new(&mut b.sub("a"), wide, wide, 3, 1, &cfg),
                    ConvNorm::new(&mut b.sub("b"), wide, wide, 3, 1, &cfg),
                )
            })
            .collect();
        let up = (0..cfg.n_downsampling)
            .rev()
            .map(|i| ConvNorm::new(&mut p.sub(format!("up{i}")), ngf << (i + 1), ngf << i, 3, 1, &cfg))
            .collect();
        let k = cfg.edge_kernel;
        let tail = if cfg.input_residual {
            Conv3d::zeroed(&mut p.sub("tail"), ngf, cfg.out_channels(), k, k / 2)
        } else {
            Conv3d::new(&mut p.sub("tail"), ngf, cfg.out_channels(), k, 1, k / 2)
        };
        Ok(Self {
            config: cfg,
            store,
            head,
            down,
            blocks,
            up,
            tail,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_parameters()
    }

    /// Forward on `[in_channels, D, H, W]`; `cond` is the `[6, D, H, W]` map for SPADE.
    pub fn forward(&self, x: &Var, cond: Option<&Var>) -> Result<Var> {
        let s = x.shape().to_vec();
        let expected = self.config.in_channels();
        if s.len() != 4 || s[0] != expected {
            return Err(Error::ChannelMismatch {
                expected,
                got: s.first().copied().unwrap_or(0),
            });
        }
        let seg = if self.config.uses_spade() { cond } else { None };
        let mut h = self.head.forward(x, seg, true)?;
        let mut sizes = Vec::new();
        for d in &self.down {
            let hs = h.shape();
            sizes.push([hs[1], hs[2], hs[3]]);
            h = d.forward(&h, seg, true)?;
        }
        for (a, b) in &self.blocks {
            let r = b.forward(&a.forward(&h, seg, true)?, seg, false)?;
            h = h.add(&r);
        }
        for u in &self.up {
            let dims = sizes.pop().expect("one size per stage");
            h = u.forward(&h.resize_trilinear(dims), seg, true)?;
        }
        let y = self.tail.forward(&h);
        Ok(if self.config.input_residual {
            x.narrow(0, 0, 3).logit(INPUT_LOGIT_EPS).add(&y).sigmoid()
        } else {
            y.sigmoid()
        })
    }

    /// Builds the generator input from a 3-channel image and 6-channel probabilities.
    pub fn run(&self, image: &Var, seg_probs: &Var) -> Result<Var> {
        if self.config.in_channels() == 3 + N_CLASSES {
            self.forward(&Var::concat(&[image.clone(), seg_probs.clone()], 0), None)
        } else {
            self.forward(image, Some(seg_probs))
        }
    }

    pub fn layer_kinds(&self) -> Vec<LayerKind> {
        let mut out = Vec::new();
        self.head.kinds(&mut out);
        for d in &self.down {
            d.kinds(&mut out);
        }
        for (a, b) in &self.blocks {
            a.kinds(&mut out);
            b.kinds(&mut out);
            out.push(LayerKind::ResidualAdd);
        }
        for u in &self.up {
            out.push(LayerKind::TrilinearUpsample);
            u.kinds(&mut out);
        }
        out.push(LayerKind::Conv {
            kernel: self.config.edge_kernel,
            stride: 1,
        });
        out
    }

    pub fn save(&self, path: &FsPath) -> Result<()> {
        let mut a = Archive::new(&self.config)?;
        a.put("weights", &self.store.snapshot());
        a.save(path)
    }

    pub fn load(path: &FsPath) -> Result<Self> {
        let a = Archive::load(path)?;
        let g = Self::new(&a.meta()?, 0)?;
        g.store.load(&a.take("weights"))?;
        Ok(g)
    }
}

impl Enhancer for Generator {
    fn enhance(&self, ulf: &Tensor, seg_probs: &Tensor) -> Result<Tensor> {
        if self.config.direction != Direction::UlfToHf {
            return Err(Error::InvalidArgument("only a ULF→HF generator enhances".into()));
        }
        no_grad(|| {
            let y = self.run(&Var::constant(ulf.clone()), &Var::constant(seg_probs.clone()))?;
            Ok(y.value().clone())
        })
    }
}
