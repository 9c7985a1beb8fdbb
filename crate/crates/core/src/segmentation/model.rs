//! Hierarchical shifted-window attention encoder with a convolutional U-shaped decoder.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use voxgrad::layers::{Conv3d, ConvTranspose3d, LayerNorm, Linear};
use voxgrad::{no_grad, softmax_tensor, Param, ParamStore, Path, Tensor, Var};

use crate::error::{Error, Result};
use crate::nn::{from_tokens, pad_to_multiple, to_tokens, Attention, Mlp, ResUnit, NORM_EPS};
use crate::volume::N_CLASSES;

pub const SEG_IN_CHANNELS: usize = 3;
/// Patch embedding plus four merging stages.
pub const SEG_DOWNSAMPLING: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegModelConfig {
    pub feature_size: usize,
    pub depths: [usize; 4],
    pub heads: [usize; 4],
    pub window_size: usize,
    pub mlp_ratio: usize,
    /// Overrides the other fields with the full-size configuration.
    pub paper_scale: bool,
}

impl Default for SegModelConfig {
    fn default() -> Self {
        Self {
            feature_size: 8,
            depths: [2, 2, 2, 2],
            heads: [2, 4, 8, 16],
            window_size: 4,
            mlp_ratio: 4,
            paper_scale: false,
        }
    }
}

impl SegModelConfig {
    pub fn paper() -> Self {
        Self {
            feature_size: 48,
            depths: [2, 2, 2, 2],
            heads: [3, 6, 12, 24],
            window_size: 7,
            mlp_ratio: 4,
            paper_scale: true,
        }
    }

    pub fn effective(&self) -> Self {
        if self.paper_scale {
            Self::paper()
        } else {
            self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.effective();
        let bad = |m: String| Err(Error::InvalidArgument(format!("segmentation config: {m}")));
        if c.feature_size == 0 || c.window_size == 0 || c.mlp_ratio == 0 {
            return bad("sizes must be positive".into());
        }
        for (i, &h) in c.heads.iter().enumerate() {
            let dim = c.feature_size << i;
            if h == 0 || dim % h != 0 {
                return bad(format!("stage {i} width {dim} not divisible by {h} heads"));
            }
        }
        if c.depths.iter().any(|&d| d == 0) {
            return bad("every stage needs at least one block".into());
        }
        Ok(())
    }
}

/// Per-axis window and shift actually used at a stage resolution.
fn effective_window(dims: [usize; 3], window: usize, shifted: bool) -> ([usize; 3], [usize; 3]) {
    let mut win = [0; 3];
    let mut shift = [0; 3];
    for k in 0..3 {
        if dims[k] <= window {
            win[k] = dims[k];
        } else {
            win[k] = (1..=window).rev().find(|w| dims[k] % w == 0).unwrap_or(1);
            if shifted && win[k] > 1 {
                shift[k] = win[k] / 2;
            }
        }
    }
    (win, shift)
}

/// Index maps between raster token order and (cyclically shifted) window order.
struct WindowLayout {
    to_windows: Arc<Vec<usize>>,
    from_windows: Arc<Vec<usize>>,
    n_windows: usize,
    n_tokens: usize,
    rel_index: Vec<usize>,
    /// `[n_windows, N, N]` additive mask separating regions that wrapped around.
    mask: Option<Vec<f64>>,
}

impl WindowLayout {
    fn new(dims: [usize; 3], win: [usize; 3], shift: [usize; 3], max_window: usize, channels: usize) -> Self {
        let [d, h, w] = dims;
        let nw = [d / win[0], h / win[1], w / win[2]];
        let n_windows = nw[0] * nw[1] * nw[2];
        let n_tokens = win[0] * win[1] * win[2];
        let total = d * h * w;
        let mut rows = Vec::with_capacity(total);
        let mut region = Vec::with_capacity(total);
        let region_of = |p: usize, n: usize, wk: usize, sk: usize| -> usize {
            if sk == 0 || p < n - wk {
                0
            } else if p < n - sk {
                1
            } else {
                2
            }
        };
        for wz in 0..nw[0] {
            for wy in 0..nw[1] {
                for wx in 0..nw[2] {
                    for a in 0..win[0] {
                        for b in 0..win[1] {
                            for c in 0..win[2] {
                                let p = [wz * win[0] + a, wy * win[1] + b, wx * win[2] + c];
                                let src = [(p[0] + shift[0]) % d, (p[1] + shift[1]) % h, (p[2] + shift[2]) % w];
                                rows.push((src[0] * h + src[1]) * w + src[2]);
                                region.push(
                                    region_of(p[0], d, win[0], shift[0]) * 9
                                        + region_of(p[1], h, win[1], shift[1]) * 3
                                        + region_of(p[2], w, win[2], shift[2]),
                                );
                            }
                        }
                    }
                }
            }
        }
        let mut inverse = vec![0; total];
        for (r, &src) in rows.iter().enumerate() {
            inverse[src] = r;
        }
        let expand = |rows: &[usize]| -> Arc<Vec<usize>> {
            Arc::new(
                rows.iter()
                    .flat_map(|&r| (0..channels).map(move |ch| r * channels + ch))
                    .collect(),
            )
        };
        let mask = (shift != [0, 0, 0]).then(|| {
            let mut m = Vec::with_capacity(n_windows * n_tokens * n_tokens);
            for win_i in 0..n_windows {
                let ids = &region[win_i * n_tokens..(win_i + 1) * n_tokens];
                for &i in ids {
                    for &j in ids {
                        m.push(if i == j { 0.0 } else { -100.0 });
                    }
                }
            }
            m
        });
        let span = 2 * max_window - 1;
        let coords: Vec<[usize; 3]> = (0..n_tokens)
            .map(|t| [t / (win[1] * win[2]), (t / win[2]) % win[1], t % win[2]])
            .collect();
        let mut rel_index = Vec::with_capacity(n_tokens * n_tokens);
        for ci in &coords {
            for cj in &coords {
                let o = |k: usize| ci[k] + max_window - 1 - cj[k];
                rel_index.push((o(0) * span + o(1)) * span + o(2));
            }
        }
        Self {
            to_windows: expand(&rows),
            from_windows: expand(&inverse),
            n_windows,
            n_tokens,
            rel_index,
            mask,
        }
    }
}

struct SwinBlock {
    norm1: LayerNorm,
    attn: Attention,
    rel_bias: Param,
    norm2: LayerNorm,
    mlp: Mlp,
    shifted: bool,
}

impl SwinBlock {
    fn new(p: &mut Path, dim: usize, heads: usize, window: usize, mlp_ratio: usize, shifted: bool) -> Self {
        let span = 2 * window - 1;
        Self {
            norm1: LayerNorm::new(&mut p.sub("norm1"), dim),
            attn: Attention::new(&mut p.sub("attn"), dim, heads),
            rel_bias: p.normal("relative_bias", &[span * span * span, heads], 0.02),
            norm2: LayerNorm::new(&mut p.sub("norm2"), dim),
            mlp: Mlp::new(&mut p.sub("mlp"), dim, dim * mlp_ratio),
            shifted,
        }
    }

    fn forward(&self, x: &Var, dims: [usize; 3], window: usize) -> Var {
        let c = x.shape()[1];
        let heads = self.attn.heads();
        let (win, shift) = effective_window(dims, window, self.shifted);
        let layout = WindowLayout::new(dims, win, shift, window, c);
        let n = layout.n_tokens;
        let h = self
            .norm1
            .forward(x)
            .gather(layout.to_windows.clone(), &[layout.n_windows * n, c]);
        let bias_index: Vec<usize> = (0..heads)
            .flat_map(|hh| layout.rel_index.iter().map(move |&r| r * heads + hh))
            .collect();
        let bias = self.rel_bias.var().gather(Arc::new(bias_index), &[heads, n, n]);
        let mask = layout.mask.as_ref().map(|m| {
            let mut full = Vec::with_capacity(layout.n_windows * heads * n * n);
            for w in m.chunks(n * n) {
                for _ in 0..heads {
                    full.extend_from_slice(w);
                }
            }
            Var::constant(Tensor::new(&[layout.n_windows, heads, n, n], full))
        });
        let mut biases = vec![&bias];
        if let Some(m) = &mask {
            biases.push(m);
        }
        let a = self
            .attn
            .forward(&h, layout.n_windows, &biases)
            .gather(layout.from_windows.clone(), &[dims.iter().product(), c]);
        let x = x.add(&a);
        x.add(&self.mlp.forward(&self.norm2.forward(&x)))
    }
}

/// Concatenates each 2³ neighbourhood and projects `8C → 2C`.
struct PatchMerging {
    norm: LayerNorm,
    reduction: Linear,
}

impl PatchMerging {
    fn new(p: &mut Path, dim: usize) -> Self {
        Self {
            norm: LayerNorm::new(&mut p.sub("norm"), 8 * dim),
            reduction: Linear::new(&mut p.sub("reduction"), 8 * dim, 2 * dim, false),
        }
    }

    fn forward(&self, x: &Var, dims: [usize; 3]) -> Var {
        let c = x.shape()[1];
        let [d, h, w] = dims;
        let half = [d / 2, h / 2, w / 2];
        let mut idx = Vec::with_capacity(d * h * w * c);
        for z in 0..half[0] {
            for y in 0..half[1] {
                for xx in 0..half[2] {
                    for o in 0..8 {
                        let (a, b, e) = (o >> 2 & 1, o >> 1 & 1, o & 1);
                        let row = ((2 * z + a) * h + 2 * y + b) * w + 2 * xx + e;
                        idx.extend((0..c).map(|ch| row * c + ch));
                    }
                }
            }
        }
        let n = half.iter().product::<usize>();
        let merged = x.gather(Arc::new(idx), &[n, 8 * c]);
        self.reduction.forward(&self.norm.forward(&merged))
    }
}

struct SwinStage {
    blocks: Vec<SwinBlock>,
    merge: PatchMerging,
}

struct UpBlock {
    up: ConvTranspose3d,
    res: ResUnit,
}

impl UpBlock {
    fn new(p: &mut Path, c_in: usize, c_out: usize) -> Self {
        Self {
            up: ConvTranspose3d::new(&mut p.sub("up"), c_in, c_out),
            res: ResUnit::new(&mut p.sub("res"), 2 * c_out, c_out),
        }
    }

    fn forward(&self, x: &Var, skip: &Var) -> Var {
        let u = self.up.forward(x);
        self.res.forward(&Var::concat(&[u, skip.clone()], 0))
    }
}

struct SwinUnet {
    patch_embed: Conv3d,
    stages: Vec<SwinStage>,
    window: usize,
    encoders: [ResUnit; 5],
    decoders: [UpBlock; 5],
    head: Conv3d,
}

impl SwinUnet {
    fn new(p: &mut Path, cfg: &SegModelConfig) -> Self {
        let f = cfg.feature_size;
        let stages = (0..4)
            .map(|i| {
                let dim = f << i;
                let mut sp = p.sub(format!("stage{i}"));
                let blocks = (0..cfg.depths[i])
                    .map(|b| {
                        SwinBlock::new(
                            &mut sp.sub(format!("block{b}")),
                            dim,
                            cfg.heads[i],
                            cfg.window_size,
                            cfg.mlp_ratio,
                            b % 2 == 1,
                        )
                    })
                    .collect();
                SwinStage {
                    blocks,
                    merge: PatchMerging::new(&mut sp.sub("merge"), dim),
                }
            })
            .collect();
        let enc = |p: &mut Path, name: &str, c_in: usize, c_out: usize| ResUnit::new(&mut p.sub(name), c_in, c_out);
        Self {
            patch_embed: Conv3d::new(&mut p.sub("patch_embed"), SEG_IN_CHANNELS, f, 2, 2, 0),
            stages,
            window: cfg.window_size,
            encoders: [
                enc(p, "enc0", SEG_IN_CHANNELS, f),
                enc(p, "enc1", f, f),
                enc(p, "enc2", 2 * f, 2 * f),
                enc(p, "enc3", 4 * f, 4 * f),
                enc(p, "bottleneck", 16 * f, 16 * f),
            ],
            decoders: [
                UpBlock::new(&mut p.sub("dec4"), 16 * f, 8 * f),
                UpBlock::new(&mut p.sub("dec3"), 8 * f, 4 * f),
                UpBlock::new(&mut p.sub("dec2"), 4 * f, 2 * f),
                UpBlock::new(&mut p.sub("dec1"), 2 * f, f),
                UpBlock::new(&mut p.sub("dec0"), f, f),
            ],
            head: Conv3d::new(&mut p.sub("head"), f, N_CLASSES, 1, 1, 0),
        }
    }

    /// `x` is `[3, D, H, W]` with every spatial dim a multiple of 32.
    fn forward(&self, x: &Var) -> Var {
        let norm_out = |t: &Var, dims: [usize; 3]| from_tokens(&t.layer_norm(NORM_EPS), dims);
        let e0 = self.patch_embed.forward(x);
        let mut dims = [e0.shape()[1], e0.shape()[2], e0.shape()[3]];
        let mut tokens = to_tokens(&e0);
        let mut hidden = vec![norm_out(&tokens, dims)];
        for stage in &self.stages {
            for block in &stage.blocks {
                tokens = block.forward(&tokens, dims, self.window);
            }
            tokens = stage.merge.forward(&tokens, dims);
            dims = dims.map(|n| n / 2);
            hidden.push(norm_out(&tokens, dims));
        }
        let enc0 = self.encoders[0].forward(x);
        let enc1 = self.encoders[1].forward(&hidden[0]);
        let enc2 = self.encoders[2].forward(&hidden[1]);
        let enc3 = self.encoders[3].forward(&hidden[2]);
        let bottom = self.encoders[4].forward(&hidden[4]);
        let d3 = self.decoders[0].forward(&bottom, &hidden[3]);
        let d2 = self.decoders[1].forward(&d3, &enc3);
        let d1 = self.decoders[2].forward(&d2, &enc2);
        let d0 = self.decoders[3].forward(&d1, &enc1);
        let out = self.decoders[4].forward(&d0, &enc0);
        self.head.forward(&out)
    }
}

/// Six-class scores `[6, D, H, W]` in label order.
#[derive(Clone, Debug, PartialEq)]
pub struct SegLogits {
    pub scores: Tensor,
}

impl SegLogits {
    pub fn probs(&self) -> Tensor {
        softmax_tensor(&self.scores, 0)
    }

    /// Argmax label per voxel.
    pub fn labels(&self) -> Vec<usize> {
        let s = self.scores.shape();
        let n = s[1] * s[2] * s[3];
        let d = self.scores.data();
        (0..n)
            .map(|i| {
                (0..N_CLASSES)
                    .max_by(|&a, &b| d[a * n + i].total_cmp(&d[b * n + i]))
                    .expect("six classes")
            })
            .collect()
    }
}

/// Segmentation network plus its parameter store.
pub struct SegNet {
    pub config: SegModelConfig,
    pub store: ParamStore,
    net: SwinUnet,
}

impl SegNet {
    pub fn new(config: &SegModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let cfg = config.effective();
        let mut store = ParamStore::new(seed);
        let net = SwinUnet::new(&mut store.root().sub("seg"), &cfg);
        Ok(Self {
            config: cfg,
            store,
            net,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_parameters()
    }

    /// Graph forward on `[3, D, H, W]`; reflect-pads to a multiple of 32 and crops back.
    pub fn forward(&self, x: &Var) -> Result<Var> {
        let s = x.shape();
        if s.len() != 4 || s[0] != SEG_IN_CHANNELS {
            return Err(Error::ChannelMismatch {
                expected: SEG_IN_CHANNELS,
                got: s.first().copied().unwrap_or(0),
            });
        }
        let dims = [s[1], s[2], s[3]];
        let padded = x.reflect_pad_end(pad_to_multiple(dims, SEG_DOWNSAMPLING));
        Ok(self.net.forward(&padded).crop3d(dims))
    }

    /// Inference without graph construction.
    pub fn predict(&self, ulf_stack: &Tensor) -> Result<SegLogits> {
        let scores = no_grad(|| self.forward(&Var::constant(ulf_stack.clone())))?;
        Ok(SegLogits {
            scores: scores.value().clone(),
        })
    }

    pub fn freeze(&self) {
        self.store.set_trainable(false);
    }

    pub fn weights_hash(&self) -> String {
        self.store.sha256()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_layout_round_trips() {
        let dims = [4, 4, 8];
        for shifted in [false, true] {
            let (win, shift) = effective_window(dims, 4, shifted);
            let l = WindowLayout::new(dims, win, shift, 4, 1);
            for (r, &src) in l.to_windows.iter().enumerate() {
                assert_eq!(l.from_windows[src], r);
            }
        }
    }

    #[test]
    fn small_stage_disables_shift() {
        assert_eq!(effective_window([2, 2, 2], 4, true), ([2, 2, 2], [0, 0, 0]));
        assert_eq!(effective_window([8, 8, 8], 4, true), ([4, 4, 4], [2, 2, 2]));
        assert_eq!(effective_window([12, 8, 8], 5, false).0, [4, 4, 4]);
    }
}
