//! 3D convolution on `[C, D, H, W]` volumes via chunked im2col + dgemm.

use crate::graph::Var;
use crate::ops::linalg::gemm;
use crate::tensor::Tensor;

/// Upper bound on im2col buffer elements per chunk (32 MiB of f64).
const COL_BUDGET: usize = 1 << 22;

#[derive(Clone, Copy, Debug)]
struct Geometry {
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    inp: [usize; 3],
    out: [usize; 3],
}

impl Geometry {
    fn rows(&self) -> usize {
        self.cin * self.k * self.k * self.k
    }

    fn plane(&self) -> usize {
        self.out[1] * self.out[2]
    }

    fn out_vox(&self) -> usize {
        self.out[0] * self.plane()
    }

    fn pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn chunk_depth(&self) -> usize {
        (COL_BUDGET / (self.rows() * self.plane()).max(1)).clamp(1, self.out[0])
    }
}

pub fn conv_output_size(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    assert!(n + 2 * pad >= k, "kernel {k} larger than padded input {n}+2*{pad}");
    (n + 2 * pad - k) / stride + 1
}

fn im2col(x: &[f64], g: &Geometry, z0: usize, nz: usize, cols: &mut [f64]) {
    let [d, h, w] = g.inp;
    let [_, ho, wo] = g.out;
    let ncols = nz * ho * wo;
    let k = g.k;
    let mut r = 0;
    for ci in 0..g.cin {
        let xc = &x[ci * d * h * w..(ci + 1) * d * h * w];
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut cols[r * ncols..(r + 1) * ncols];
                    let mut c = 0;
                    for oz in z0..z0 + nz {
                        let iz = (oz * g.stride + kz) as isize - g.pad as isize;
                        for oy in 0..ho {
                            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                            let dst = &mut row[c..c + wo];
                            c += wo;
                            if iz < 0 || iz >= d as isize || iy < 0 || iy >= h as isize {
                                dst.fill(0.0);
                                continue;
                            }
                            let src = &xc[(iz as usize * h + iy as usize) * w..][..w];
                            for (ox, v) in dst.iter_mut().enumerate() {
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                *v = if ix < 0 || ix >= w as isize {
                                    0.0
                                } else {
                                    src[ix as usize]
                                };
                            }
                        }
                    }
                    r += 1;
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &Geometry, z0: usize, nz: usize, dx: &mut [f64]) {
    let [d, h, w] = g.inp;
    let [_, ho, wo] = g.out;
    let ncols = nz * ho * wo;
    let k = g.k;
    let mut r = 0;
    for ci in 0..g.cin {
        let xc = &mut dx[ci * d * h * w..(ci + 1) * d * h * w];
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let row = &cols[r * ncols..(r + 1) * ncols];
                    let mut c = 0;
                    for oz in z0..z0 + nz {
                        let iz = (oz * g.stride + kz) as isize - g.pad as isize;
                        for oy in 0..ho {
                            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                            let src = &row[c..c + wo];
                            c += wo;
                            if iz < 0 || iz >= d as isize || iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let dst = &mut xc[(iz as usize * h + iy as usize) * w..][..w];
                            for (ox, v) in src.iter().enumerate() {
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if ix >= 0 && ix < w as isize {
                                    dst[ix as usize] += v;
                                }
                            }
                        }
                    }
                    r += 1;
                }
            }
        }
    }
}

fn conv_forward(x: &[f64], w: &[f64], g: &Geometry) -> Vec<f64> {
    let total = g.out_vox();
    let rows = g.rows();
    let mut out = vec![0.0; g.cout * total];
    if g.pointwise() {
        gemm(
            g.cout,
            rows,
            total,
            w,
            rows as isize,
            1,
            x,
            total as isize,
            1,
            &mut out,
            total as isize,
            1,
            0.0,
        );
        return out;
    }
    let chunk = g.chunk_depth();
    let mut cols = vec![0.0; rows * chunk * g.plane()];
    let mut z0 = 0;
    while z0 < g.out[0] {
        let nz = chunk.min(g.out[0] - z0);
        let ncols = nz * g.plane();
        im2col(x, g, z0, nz, &mut cols[..rows * ncols]);
        gemm(
            g.cout,
            rows,
            ncols,
            w,
            rows as isize,
            1,
            &cols[..rows * ncols],
            ncols as isize,
            1,
            &mut out[z0 * g.plane()..],
            total as isize,
            1,
            0.0,
        );
        z0 += nz;
    }
    out
}

/// Returns (dx, dw); either may be skipped.
fn conv_backward(
    x: &[f64],
    w: &[f64],
    gout: &[f64],
    g: &Geometry,
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let total = g.out_vox();
    let rows = g.rows();
    let n_in = g.cin * g.inp.iter().product::<usize>();
    let mut dx = want_dx.then(|| vec![0.0; n_in]);
    let mut dw = want_dw.then(|| vec![0.0; g.cout * rows]);
    if g.pointwise() {
        if let Some(dw) = dw.as_mut() {
            gemm(
                g.cout,
                total,
                rows,
                gout,
                total as isize,
                1,
                x,
                1,
                total as isize,
                dw,
                rows as isize,
                1,
                0.0,
            );
        }
        if let Some(dx) = dx.as_mut() {
            gemm(
                rows,
                g.cout,
                total,
                w,
                1,
                rows as isize,
                gout,
                total as isize,
                1,
                dx,
                total as isize,
                1,
                0.0,
            );
        }
        return (dx, dw);
    }
    let chunk = g.chunk_depth();
    let mut cols = vec![0.0; rows * chunk * g.plane()];
    let mut z0 = 0;
    while z0 < g.out[0] {
        let nz = chunk.min(g.out[0] - z0);
        let ncols = nz * g.plane();
        let gchunk = &gout[z0 * g.plane()..];
        if let Some(dw) = dw.as_mut() {
            im2col(x, g, z0, nz, &mut cols[..rows * ncols]);
            gemm(
                g.cout,
                ncols,
                rows,
                gchunk,
                total as isize,
                1,
                &cols[..rows * ncols],
                1,
                ncols as isize,
                dw,
                rows as isize,
                1,
                1.0,
            );
        }
        if let Some(dx) = dx.as_mut() {
            gemm(
                rows,
                g.cout,
                ncols,
                w,
                1,
                rows as isize,
                gchunk,
                total as isize,
                1,
                &mut cols[..rows * ncols],
                ncols as isize,
                1,
                0.0,
            );
            col2im(&cols[..rows * ncols], g, z0, nz, dx);
        }
        z0 += nz;
    }
    (dx, dw)
}

impl Var {
    /// Cubic-kernel 3D convolution (cross-correlation) with zero padding, no bias.
    /// `self`: `[Cin, D, H, W]`, `weight`: `[Cout, Cin, k, k, k]`.
    pub fn conv3d(&self, weight: &Var, stride: usize, pad: usize) -> Var {
        let xs = self.shape();
        let ws = weight.shape();
        assert_eq!(xs.len(), 4, "conv3d input must be [C, D, H, W], got {xs:?}");
        assert_eq!(ws.len(), 5, "conv3d weight must be 5-D");
        assert_eq!(
            ws[1], xs[0],
            "conv3d: weight expects {} channels, input has {}",
            ws[1], xs[0]
        );
        assert!(ws[2] == ws[3] && ws[3] == ws[4], "conv3d: cubic kernels only");
        assert!(stride >= 1);
        let k = ws[2];
        let inp = [xs[1], xs[2], xs[3]];
        let out = inp.map(|n| conv_output_size(n, k, stride, pad));
        let g = Geometry {
            cin: xs[0],
            cout: ws[0],
            k,
            stride,
            pad,
            inp,
            out,
        };
        let xv = self.value().clone();
        let wv = weight.value().clone();
        let y = conv_forward(xv.data(), wv.data(), &g);
        let (rx, rw) = (self.requires_grad(), weight.requires_grad());
        Var::op(
            Tensor::new(&[g.cout, out[0], out[1], out[2]], y),
            vec![self.clone(), weight.clone()],
            move |gout| {
                let (dx, dw) = conv_backward(xv.data(), wv.data(), gout.data(), &g, rx, rw);
                vec![
                    dx.map(|d| Tensor::new(xv.shape(), d)),
                    dw.map(|d| Tensor::new(wv.shape(), d)),
                ]
            },
        )
    }

    /// Transposed convolution with kernel 2 and stride 2 (exact 2× upsampling).
    /// `self`: `[Cin, D, H, W]`, `weight`: `[Cin, Cout, 2, 2, 2]`.
    pub fn conv_transpose3d_2x(&self, weight: &Var) -> Var {
        let xs = self.shape().to_vec();
        let ws = weight.shape().to_vec();
        assert_eq!(ws[0], xs[0], "conv_transpose: channel mismatch");
        assert_eq!(&ws[2..], &[2, 2, 2]);
        let (cin, cout) = (ws[0], ws[1]);
        let (d, h, w) = (xs[1], xs[2], xs[3]);
        let vox = d * h * w;
        let taps = cout * 8;
        let xv = self.value().clone();
        let wv = weight.value().clone();
        // y[(co,a,b,c), v] = Σ_ci W[ci, (co,a,b,c)] x[ci, v]
        let mut y = vec![0.0; taps * vox];
        gemm(
            taps,
            cin,
            vox,
            wv.data(),
            1,
            taps as isize,
            xv.data(),
            vox as isize,
            1,
            &mut y,
            vox as isize,
            1,
            0.0,
        );
        let scatter = scatter_index(cout, d, h, w);
        let mut out = vec![0.0; taps * vox];
        for (src, &dst) in scatter.iter().enumerate() {
            out[dst] = y[src];
        }
        let (rx, rw) = (self.requires_grad(), weight.requires_grad());
        Var::op(
            Tensor::new(&[cout, 2 * d, 2 * h, 2 * w], out),
            vec![self.clone(), weight.clone()],
            move |g| {
                let gy: Vec<f64> = scatter.iter().map(|&i| g.data()[i]).collect();
                let dx = rx.then(|| {
                    let mut dx = vec![0.0; cin * vox];
                    gemm(
                        cin,
                        taps,
                        vox,
                        wv.data(),
                        taps as isize,
                        1,
                        &gy,
                        vox as isize,
                        1,
                        &mut dx,
                        vox as isize,
                        1,
                        0.0,
                    );
                    Tensor::new(xv.shape(), dx)
                });
                let dw = rw.then(|| {
                    let mut dw = vec![0.0; cin * taps];
                    gemm(
                        cin,
                        vox,
                        taps,
                        xv.data(),
                        vox as isize,
                        1,
                        &gy,
                        1,
                        vox as isize,
                        &mut dw,
                        taps as isize,
                        1,
                        0.0,
                    );
                    Tensor::new(wv.shape(), dw)
                });
                vec![dx, dw]
            },
        )
    }
}

/// Maps `(co, a, b, c, z, y, x)` in tap-major order to the upsampled output index.
fn scatter_index(cout: usize, d: usize, h: usize, w: usize) -> Vec<usize> {
    let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
    let mut idx = Vec::with_capacity(cout * 8 * d * h * w);
    for co in 0..cout {
        for a in 0..2 {
            for b in 0..2 {
                for c in 0..2 {
                    for z in 0..d {
                        for y in 0..h {
                            for x in 0..w {
                                idx.push(((co * od + 2 * z + a) * oh + 2 * y + b) * ow + 2 * x + c);
                            }
                        }
                    }
                }
            }
        }
    }
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop reference.
    fn naive(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (cin, d, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (cout, k) = (w.shape()[0], w.shape()[2]);
        let od = conv_output_size(d, k, stride, pad);
        let oh = conv_output_size(h, k, stride, pad);
        let ow = conv_output_size(wd, k, stride, pad);
        let mut out = vec![0.0; cout * od * oh * ow];
        for co in 0..cout {
            for oz in 0..od {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..cin {
                            for kz in 0..k {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let iz = (oz * stride + kz) as isize - pad as isize;
                                        let iy = (oy * stride + ky) as isize - pad as isize;
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        if iz < 0 || iy < 0 || ix < 0 {
                                            continue;
                                        }
                                        let (iz, iy, ix) = (iz as usize, iy as usize, ix as usize);
                                        if iz >= d || iy >= h || ix >= wd {
                                            continue;
                                        }
                                        acc += x.data()[((ci * d + iz) * h + iy) * wd + ix]
                                            * w.data()[(((co * cin + ci) * k + kz) * k + ky) * k + kx];
                                    }
                                }
                            }
                        }
                        out[((co * od + oz) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        Tensor::new(&[cout, od, oh, ow], out)
    }

    fn ramp(shape: &[usize], scale: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|i| ((i * 37 % 11) as f64 - 5.0) * scale).collect())
    }

    #[test]
    fn matches_naive_reference() {
        for &(k, s, p) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (2, 2, 0), (3, 1, 0)] {
            let x = ramp(&[2, 5, 6, 7], 0.1);
            let w = ramp(&[3, 2, k, k, k], 0.05);
            let got = Var::constant(x.clone()).conv3d(&Var::constant(w.clone()), s, p);
            let want = naive(&x, &w, s, p);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.value().data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12, "k={k} s={s} p={p}");
            }
        }
    }

    #[test]
    fn transpose_is_adjoint_of_strided_tap() {
        // <convT(x), y> == <x, conv_k2s2(y)> with the weight axes swapped.
        let x = ramp(&[2, 2, 3, 2], 0.3);
        let y = ramp(&[3, 4, 6, 4], 0.2);
        let wt = ramp(&[2, 3, 2, 2, 2], 0.1);
        let up = Var::constant(x.clone()).conv_transpose3d_2x(&Var::constant(wt.clone()));
        let lhs: f64 = up.value().mul(&y).sum();
        // A [Cin, Cout, 2, 2, 2] transposed kernel is read as a [Cout', Cin', ...] conv kernel.
        let down = Var::constant(y).conv3d(&Var::constant(wt), 2, 0);
        let rhs: f64 = down.value().mul(&x).sum();
        assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
    }
}
