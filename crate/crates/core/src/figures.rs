//! Slice montages written as PNG.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use voxgrad::Tensor;

use crate::error::{Error, Result};
use crate::volume::{Contrast, ContrastMap, Subject, Volume, N_CLASSES};

const GAP: usize = 2;
const MIN_TILE: usize = 128;

/// Background, CSF, GM, WM, skull, scalp.
const CLASS_COLORS: [[f64; 3]; N_CLASSES] = [
    [0.0, 0.0, 0.0],
    [0.2, 0.4, 1.0],
    [0.6, 0.6, 0.6],
    [1.0, 1.0, 1.0],
    [1.0, 0.85, 0.3],
    [0.9, 0.3, 0.3],
];

pub type Rgb = [u8; 3];

/// RGB tile grid with a fixed tile size.
pub struct Canvas {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
    tile: [usize; 2],
    scale: usize,
}

impl Canvas {
    /// `rows × cols` tiles of `slice` (`[h, w]`) voxels, upscaled by an integer factor.
    pub fn new(rows: usize, cols: usize, slice: [usize; 2]) -> Self {
        let scale = (MIN_TILE / slice[0].max(slice[1]).max(1)).max(1);
        let tile = [slice[0] * scale, slice[1] * scale];
        let width = cols * tile[1] + (cols + 1) * GAP;
        let height = rows * tile[0] + (rows + 1) * GAP;
        Self {
            width,
            height,
            pixels: vec![0; width * height * 3],
            tile,
            scale,
        }
    }

    /// Paints tile `(row, col)` from per-voxel colors in row-major `[h, w]` order.
    pub fn put(&mut self, row: usize, col: usize, colors: &[Rgb]) {
        let (th, tw) = (self.tile[0], self.tile[1]);
        let w_vox = tw / self.scale;
        let y0 = GAP + row * (th + GAP);
        let x0 = GAP + col * (tw + GAP);
        for y in 0..th {
            for x in 0..tw {
                let c = colors[(y / self.scale) * w_vox + x / self.scale];
                let o = ((y0 + y) * self.width + x0 + x) * 3;
                self.pixels[o..o + 3].copy_from_slice(&c);
            }
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let unwritable = |e: std::io::Error| Error::Unwritable {
            path: path.to_path_buf(),
            source: e,
        };
        let file = File::create(path).map_err(unwritable)?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let to_io = |e: png::EncodingError| unwritable(std::io::Error::other(e));
        let mut w = enc.write_header().map_err(to_io)?;
        w.write_image_data(&self.pixels).map_err(to_io)?;
        w.finish().map_err(to_io)
    }
}

fn byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Axial slice `z` as grayscale.
pub fn gray_slice(v: &Volume, z: usize) -> Vec<Rgb> {
    let [_, h, w] = v.shape();
    let plane = &v.data()[z * h * w..(z + 1) * h * w];
    plane.iter().map(|&x| [byte(x); 3]).collect()
}

/// Grayscale slice with `mask` voxels tinted red.
pub fn overlay_slice(v: &Volume, mask: &Volume, z: usize) -> Vec<Rgb> {
    let [_, h, w] = v.shape();
    let range = z * h * w..(z + 1) * h * w;
    v.data()[range.clone()]
        .iter()
        .zip(&mask.data()[range])
        .map(|(&x, &m)| {
            if m > 0.5 {
                [255, byte(0.3 * x), byte(0.3 * x)]
            } else {
                [byte(x); 3]
            }
        })
        .collect()
}

/// Axial slice of `[6, D, H, W]` class probabilities as a probability-weighted color blend.
pub fn probability_slice(probs: &Tensor, z: usize) -> Vec<Rgb> {
    let s = probs.shape();
    let (d, h, w) = (s[1], s[2], s[3]);
    let n = d * h * w;
    (0..h * w)
        .map(|i| {
            let mut rgb = [0.0; 3];
            for (k, color) in CLASS_COLORS.iter().enumerate() {
                let p = probs.data()[k * n + z * h * w + i];
                for c in 0..3 {
                    rgb[c] += p * color[c];
                }
            }
            rgb.map(byte)
        })
        .collect()
}

/// Everything shown for one subject.
pub struct FigureInputs<'a> {
    pub subject: &'a Subject,
    /// `(model name, enhanced contrasts)` in column order.
    pub outputs: Vec<(String, &'a ContrastMap)>,
    pub seg_probs: Option<&'a Tensor>,
}

impl FigureInputs<'_> {
    /// Column titles in order.
    pub fn columns(&self) -> Vec<String> {
        let mut c = vec!["ULF".to_string()];
        c.extend(self.outputs.iter().map(|(n, _)| n.clone()));
        if self.subject.hf.is_some() {
            c.push("HF".into());
        }
        if self.seg_probs.is_some() {
            c.push("segmentation".into());
        }
        c
    }
}

/// One PNG per subject at the middle axial slice: rows are contrasts; columns are ULF,
/// each model output, HF when present and the class-probability map (top row).
pub fn emit_figures(inputs: &[FigureInputs], out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|source| Error::Unwritable {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let mut written = Vec::new();
    for fig in inputs {
        let s = fig.subject;
        let [d, h, w] = s.shape();
        let z = d / 2;
        let cols = fig.columns().len();
        let mut canvas = Canvas::new(Contrast::ALL.len(), cols, [h, w]);
        for (row, c) in Contrast::ALL.into_iter().enumerate() {
            let mut col = 0;
            let mut put = |canvas: &mut Canvas, v: Option<&Volume>| {
                if let Some(v) = v {
                    canvas.put(row, col, &gray_slice(v, z));
                }
                col += 1;
            };
            put(&mut canvas, s.ulf.get(&c));
            for (_, out) in &fig.outputs {
                put(&mut canvas, out.get(&c));
            }
            if let Some(hf) = &s.hf {
                put(&mut canvas, hf.get(&c));
            }
            if let (Some(p), 0) = (fig.seg_probs, row) {
                canvas.put(0, col, &probability_slice(p, z));
            }
        }
        let path = out_dir.join(format!("{}_montage.png", s.id));
        canvas.save_png(&path)?;
        written.push(path);
    }
    Ok(written)
}
