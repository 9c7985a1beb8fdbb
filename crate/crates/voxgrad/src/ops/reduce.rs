use crate::graph::Var;
use crate::tensor::{split_at_axis, Tensor};

impl Var {
    pub fn sum(&self) -> Var {
        let shape = self.shape().to_vec();
        Var::op(Tensor::scalar(self.value().sum()), vec![self.clone()], move |g| {
            vec![Some(Tensor::full(&shape, g.item()))]
        })
    }

    pub fn mean(&self) -> Var {
        let n = self.value().len() as f64;
        self.sum().mul_scalar(1.0 / n)
    }

    /// Sums out `axis`, dropping it.
    pub fn sum_axis(&self, axis: usize) -> Var {
        let shape = self.shape().to_vec();
        let (outer, dim, inner) = split_at_axis(&shape, axis);
        let x = self.value();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for d in 0..dim {
                let src = &x.data()[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                out[o * inner..(o + 1) * inner]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(a, v)| *a += v);
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        Var::op(Tensor::new(&out_shape, out), vec![self.clone()], move |g| {
            let mut gx = Vec::with_capacity(outer * dim * inner);
            for o in 0..outer {
                for _ in 0..dim {
                    gx.extend_from_slice(&g.data()[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(Tensor::new(&shape, gx))]
        })
    }

    /// `[C, ...] -> [C]`, summing every trailing axis.
    pub fn sum_per_channel(&self) -> Var {
        let c = self.shape()[0];
        let rest = self.value().len() / c;
        self.reshape(&[c, rest]).sum_axis(1)
    }

    /// Softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Var {
        let shape = self.shape().to_vec();
        let (outer, dim, inner) = split_at_axis(&shape, axis);
        let y = softmax_raw(self.value().data(), outer, dim, inner);
        let y_t = Tensor::new(&shape, y);
        let y_c = y_t.clone();
        Var::op(y_t, vec![self.clone()], move |g| {
            let y = y_c.data();
            let gd = g.data();
            let mut gx = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |d: usize| (o * dim + d) * inner + i;
                    let dot: f64 = (0..dim).map(|d| gd[idx(d)] * y[idx(d)]).sum();
                    for d in 0..dim {
                        gx[idx(d)] = y[idx(d)] * (gd[idx(d)] - dot);
                    }
                }
            }
            vec![Some(Tensor::new(&shape, gx))]
        })
    }

    /// Log-softmax along `axis`.
    pub fn log_softmax(&self, axis: usize) -> Var {
        let shape = self.shape().to_vec();
        let (outer, dim, inner) = split_at_axis(&shape, axis);
        let x = self.value().data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |d: usize| (o * dim + d) * inner + i;
                let m = (0..dim).map(|d| x[idx(d)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = m + (0..dim).map(|d| (x[idx(d)] - m).exp()).sum::<f64>().ln();
                for d in 0..dim {
                    y[idx(d)] = x[idx(d)] - lse;
                }
            }
        }
        let y_t = Tensor::new(&shape, y);
        let y_c = y_t.clone();
        Var::op(y_t, vec![self.clone()], move |g| {
            let y = y_c.data();
            let gd = g.data();
            let mut gx = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |d: usize| (o * dim + d) * inner + i;
                    let s: f64 = (0..dim).map(|d| gd[idx(d)]).sum();
                    for d in 0..dim {
                        gx[idx(d)] = gd[idx(d)] - y[idx(d)].exp() * s;
                    }
                }
            }
            vec![Some(Tensor::new(&shape, gx))]
        })
    }
}

pub fn softmax_raw(x: &[f64], outer: usize, dim: usize, inner: usize) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |d: usize| (o * dim + d) * inner + i;
            let m = (0..dim).map(|d| x[idx(d)]).fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for d in 0..dim {
                let e = (x[idx(d)] - m).exp();
                y[idx(d)] = e;
                s += e;
            }
            for d in 0..dim {
                y[idx(d)] /= s;
            }
        }
    }
    y
}

/// Softmax of a plain tensor along `axis`.
pub fn softmax_tensor(t: &Tensor, axis: usize) -> Tensor {
    let (outer, dim, inner) = split_at_axis(t.shape(), axis);
    Tensor::new(t.shape(), softmax_raw(t.data(), outer, dim, inner))
}
