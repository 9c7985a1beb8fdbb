use std::sync::Arc;

use crate::graph::Var;
use crate::tensor::{split_at_axis, Tensor};

impl Var {
    pub fn reshape(&self, shape: &[usize]) -> Var {
        let old = self.shape().to_vec();
        Var::op(self.value().reshape(shape), vec![self.clone()], move |g| {
            vec![Some(g.reshape(&old))]
        })
    }

    /// `out.flat[i] = self.flat[index[i]]`; the backward pass scatter-adds.
    pub fn gather(&self, index: Arc<Vec<usize>>, out_shape: &[usize]) -> Var {
        assert_eq!(index.len(), out_shape.iter().product::<usize>());
        let x = self.value().data();
        let out: Vec<f64> = index.iter().map(|&i| x[i]).collect();
        let in_shape = self.shape().to_vec();
        let n_in = x.len();
        Var::op(Tensor::new(out_shape, out), vec![self.clone()], move |g| {
            let mut gx = vec![0.0; n_in];
            for (&i, &gv) in index.iter().zip(g.data()) {
                gx[i] += gv;
            }
            vec![Some(Tensor::new(&in_shape, gx))]
        })
    }

    /// Axis permutation: output axis `k` is input axis `perm[k]`.
    pub fn permute(&self, perm: &[usize]) -> Var {
        let (index, shape) = permute_index(self.shape(), perm);
        self.gather(Arc::new(index), &shape)
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Var {
        let shape = self.shape().to_vec();
        let (outer, dim, inner) = split_at_axis(&shape, axis);
        Var::op(self.value().narrow(axis, start, len), vec![self.clone()], move |g| {
            let mut gx = vec![0.0; outer * dim * inner];
            for o in 0..outer {
                let dst = o * dim * inner + start * inner;
                gx[dst..dst + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(Tensor::new(&shape, gx))]
        })
    }

    pub fn concat(parts: &[Var], axis: usize) -> Var {
        let values: Vec<&Tensor> = parts.iter().map(Var::value).collect();
        let out = Tensor::concat(&values, axis);
        let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        Var::op(out, parts.to_vec(), move |g| {
            let mut start = 0;
            sizes
                .iter()
                .map(|&s| {
                    let part = g.narrow(axis, start, s);
                    start += s;
                    Some(part)
                })
                .collect()
        })
    }

    /// Circular shift of the spatial axes of `[C, D, H, W]` by `shift` (positive moves toward higher index).
    pub fn roll3d(&self, shift: [isize; 3]) -> Var {
        let s = self.shape();
        assert_eq!(s.len(), 4, "roll3d expects [C, D, H, W]");
        let (c, d, h, w) = (s[0], s[1], s[2], s[3]);
        let wrap = |i: usize, n: usize, k: isize| ((i as isize - k).rem_euclid(n as isize)) as usize;
        let mut idx = Vec::with_capacity(c * d * h * w);
        for ch in 0..c {
            for z in 0..d {
                let sz = wrap(z, d, shift[0]);
                for y in 0..h {
                    let sy = wrap(y, h, shift[1]);
                    for x in 0..w {
                        let sx = wrap(x, w, shift[2]);
                        idx.push(((ch * d + sz) * h + sy) * w + sx);
                    }
                }
            }
        }
        let shape = s.to_vec();
        self.gather(Arc::new(idx), &shape)
    }

    /// Reflect-pads the spatial axes of `[C, D, H, W]` at the high end only.
    pub fn reflect_pad_end(&self, pad: [usize; 3]) -> Var {
        if pad == [0, 0, 0] {
            return self.clone();
        }
        let (idx, shape) = reflect_pad_index(self.shape(), pad);
        self.gather(Arc::new(idx), &shape)
    }

    /// Crops `[C, D, H, W]` to the leading `[d, h, w]` block.
    pub fn crop3d(&self, dims: [usize; 3]) -> Var {
        let s = self.shape();
        if s[1..] == dims {
            return self.clone();
        }
        self.narrow(1, 0, dims[0]).narrow(2, 0, dims[1]).narrow(3, 0, dims[2])
    }
}

pub fn permute_index(shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let n = shape.len();
    assert_eq!(perm.len(), n, "permute: rank mismatch");
    let mut strides = vec![1; n];
    for k in (0..n.saturating_sub(1)).rev() {
        strides[k] = strides[k + 1] * shape[k + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let out_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    let total: usize = shape.iter().product();
    let mut idx = Vec::with_capacity(total);
    let mut counter = vec![0usize; n];
    for _ in 0..total {
        idx.push(counter.iter().zip(&out_strides).map(|(c, s)| c * s).sum());
        for k in (0..n).rev() {
            counter[k] += 1;
            if counter[k] < out_shape[k] {
                break;
            }
            counter[k] = 0;
        }
    }
    (idx, out_shape)
}

fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

pub fn reflect_pad_index(shape: &[usize], pad: [usize; 3]) -> (Vec<usize>, Vec<usize>) {
    let (c, d, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (nd, nh, nw) = (d + pad[0], h + pad[1], w + pad[2]);
    let mut idx = Vec::with_capacity(c * nd * nh * nw);
    for ch in 0..c {
        for z in 0..nd {
            let sz = reflect(z, d);
            for y in 0..nh {
                let sy = reflect(y, h);
                for x in 0..nw {
                    idx.push(((ch * d + sz) * h + sy) * w + reflect(x, w));
                }
            }
        }
    }
    (idx, vec![c, nd, nh, nw])
}

/// Reflect-pads a plain `[C, D, H, W]` tensor at the high end.
pub fn reflect_pad_tensor(t: &Tensor, pad: [usize; 3]) -> Tensor {
    let (idx, shape) = reflect_pad_index(t.shape(), pad);
    Tensor::new(&shape, idx.iter().map(|&i| t.data()[i]).collect())
}
