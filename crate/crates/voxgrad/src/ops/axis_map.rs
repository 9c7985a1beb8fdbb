//! Sparse linear maps applied along one axis.
//!
//! Interpolation, separable filtering and Sobel derivatives are all of this
//! form, so they share one forward/adjoint implementation.

use std::sync::Arc;

use crate::graph::Var;
use crate::tensor::{split_at_axis, Tensor};

/// `out[j] = Σ_t weights[t] · in[index[t]]` for `t` in `offsets[j]..offsets[j+1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AxisMap {
    n_in: usize,
    offsets: Vec<usize>,
    index: Vec<usize>,
    weights: Vec<f64>,
}

impl AxisMap {
    pub fn from_rows(n_in: usize, rows: Vec<Vec<(usize, f64)>>) -> Self {
        let mut offsets = vec![0];
        let mut index = Vec::new();
        let mut weights = Vec::new();
        for row in rows {
            for (i, w) in row {
                assert!(i < n_in, "axis map index {i} out of range {n_in}");
                index.push(i);
                weights.push(w);
            }
            offsets.push(index.len());
        }
        Self {
            n_in,
            offsets,
            index,
            weights,
        }
    }

    pub fn n_in(&self) -> usize {
        self.n_in
    }

    pub fn n_out(&self) -> usize {
        self.offsets.len() - 1
    }

    /// Linear interpolation with half-pixel centers (`align_corners = false`).
    pub fn resize_linear(n_in: usize, n_out: usize) -> Self {
        let scale = n_in as f64 / n_out as f64;
        let rows = (0..n_out)
            .map(|j| {
                let src = ((j as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(n_in - 1);
                let i1 = (i0 + 1).min(n_in - 1);
                let t = src - i0 as f64;
                if i0 == i1 || t == 0.0 {
                    vec![(i0, 1.0)]
                } else {
                    vec![(i0, 1.0 - t), (i1, t)]
                }
            })
            .collect();
        Self::from_rows(n_in, rows)
    }

    /// Correlation with `kernel` keeping only fully supported outputs.
    pub fn valid_filter(n_in: usize, kernel: &[f64]) -> Self {
        assert!(kernel.len() <= n_in, "filter longer than axis");
        let rows = (0..=n_in - kernel.len())
            .map(|j| kernel.iter().enumerate().map(|(t, &w)| (j + t, w)).collect())
            .collect();
        Self::from_rows(n_in, rows)
    }

    /// Centered correlation with `kernel` (odd length), mirror-reflecting at the borders.
    pub fn same_filter_reflect(n_in: usize, kernel: &[f64]) -> Self {
        assert!(kernel.len() % 2 == 1, "centered filter needs odd length");
        let r = (kernel.len() / 2) as isize;
        let n = n_in as isize;
        let reflect = |mut i: isize| -> usize {
            if n == 1 {
                return 0;
            }
            let period = 2 * (n - 1);
            i = i.rem_euclid(period);
            (if i < n { i } else { period - i }) as usize
        };
        let rows = (0..n)
            .map(|j| {
                let mut row: Vec<(usize, f64)> = Vec::with_capacity(kernel.len());
                for (t, &w) in kernel.iter().enumerate() {
                    let i = reflect(j + t as isize - r);
                    match row.iter_mut().find(|(k, _)| *k == i) {
                        Some(e) => e.1 += w,
                        None => row.push((i, w)),
                    }
                }
                row
            })
            .collect();
        Self::from_rows(n_in, rows)
    }

    fn forward(&self, x: &[f64], outer: usize, inner: usize) -> Vec<f64> {
        let n_out = self.n_out();
        let mut out = vec![0.0; outer * n_out * inner];
        for o in 0..outer {
            let xb = &x[o * self.n_in * inner..(o + 1) * self.n_in * inner];
            let ob = &mut out[o * n_out * inner..(o + 1) * n_out * inner];
            for j in 0..n_out {
                let dst = &mut ob[j * inner..(j + 1) * inner];
                for t in self.offsets[j]..self.offsets[j + 1] {
                    let w = self.weights[t];
                    let src = &xb[self.index[t] * inner..(self.index[t] + 1) * inner];
                    dst.iter_mut().zip(src).for_each(|(d, s)| *d += w * s);
                }
            }
        }
        out
    }

    fn adjoint(&self, g: &[f64], outer: usize, inner: usize) -> Vec<f64> {
        let n_out = self.n_out();
        let mut gx = vec![0.0; outer * self.n_in * inner];
        for o in 0..outer {
            let gb = &g[o * n_out * inner..(o + 1) * n_out * inner];
            let xb = &mut gx[o * self.n_in * inner..(o + 1) * self.n_in * inner];
            for j in 0..n_out {
                let src = &gb[j * inner..(j + 1) * inner];
                for t in self.offsets[j]..self.offsets[j + 1] {
                    let w = self.weights[t];
                    let i = self.index[t];
                    xb[i * inner..(i + 1) * inner]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(d, s)| *d += w * s);
                }
            }
        }
        gx
    }

    /// Applies the map to a plain tensor along `axis`.
    pub fn apply(&self, t: &Tensor, axis: usize) -> Tensor {
        let (outer, dim, inner) = split_at_axis(t.shape(), axis);
        assert_eq!(dim, self.n_in, "axis map expects length {}, got {dim}", self.n_in);
        let mut shape = t.shape().to_vec();
        shape[axis] = self.n_out();
        Tensor::new(&shape, self.forward(t.data(), outer, inner))
    }
}

impl Var {
    pub fn map_axis(&self, axis: usize, map: Arc<AxisMap>) -> Var {
        let in_shape = self.shape().to_vec();
        let (outer, dim, inner) = split_at_axis(&in_shape, axis);
        assert_eq!(dim, map.n_in, "axis map expects length {}, got {dim}", map.n_in);
        let mut shape = in_shape.clone();
        shape[axis] = map.n_out();
        let y = map.forward(self.value().data(), outer, inner);
        Var::op(Tensor::new(&shape, y), vec![self.clone()], move |g| {
            vec![Some(Tensor::new(&in_shape, map.adjoint(g.data(), outer, inner)))]
        })
    }

    /// Trilinear resize of the spatial axes of `[C, D, H, W]` (half-pixel centers).
    pub fn resize_trilinear(&self, dims: [usize; 3]) -> Var {
        let s = self.shape();
        assert_eq!(s.len(), 4, "resize_trilinear expects [C, D, H, W]");
        let mut v = self.clone();
        for (k, &n) in dims.iter().enumerate() {
            if v.shape()[k + 1] != n {
                v = v.map_axis(k + 1, Arc::new(AxisMap::resize_linear(v.shape()[k + 1], n)));
            }
        }
        v
    }
}

/// Trilinear resize of a plain `[C, D, H, W]` tensor.
pub fn resize_trilinear_tensor(t: &Tensor, dims: [usize; 3]) -> Tensor {
    let mut v = t.clone();
    for (k, &n) in dims.iter().enumerate() {
        if v.shape()[k + 1] != n {
            v = AxisMap::resize_linear(v.shape()[k + 1], n).apply(&v, k + 1);
        }
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn upsample_matches_half_pixel_rule() {
        let m = AxisMap::resize_linear(2, 4);
        let t = Tensor::new(&[2], vec![0.0, 1.0]);
        assert_eq!(m.apply(&t, 0).data(), &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn resize_preserves_constants() {
        let t = Tensor::full(&[1, 3, 5, 4], 2.5);
        let r = resize_trilinear_tensor(&t, [6, 2, 8]);
        assert!(r.data().iter().all(|&v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn reflect_filter_rows_sum_to_kernel_mass() {
        let m = AxisMap::same_filter_reflect(4, &[0.25, 0.5, 0.25]);
        let ones = Tensor::ones(&[4]);
        assert!(m.apply(&ones, 0).data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }
}
