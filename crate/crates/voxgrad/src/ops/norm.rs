use crate::graph::Var;
use crate::tensor::Tensor;

/// Standardizes contiguous groups of `group` elements; returns (y, 1/σ per group).
fn standardize(x: &[f64], group: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let n = group as f64;
    let mut y = vec![0.0; x.len()];
    let mut inv = Vec::with_capacity(x.len() / group);
    for (xs, ys) in x.chunks(group).zip(y.chunks_mut(group)) {
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let s = 1.0 / (var + eps).sqrt();
        for (yv, xv) in ys.iter_mut().zip(xs) {
            *yv = (xv - mean) * s;
        }
        inv.push(s);
    }
    (y, inv)
}

fn standardize_backward(g: &[f64], y: &[f64], inv: &[f64], group: usize) -> Vec<f64> {
    let n = group as f64;
    let mut gx = vec![0.0; g.len()];
    for (k, ((gs, ys), out)) in g
        .chunks(group)
        .zip(y.chunks(group))
        .zip(gx.chunks_mut(group))
        .enumerate()
    {
        let mg = gs.iter().sum::<f64>() / n;
        let mgy = gs.iter().zip(ys).map(|(a, b)| a * b).sum::<f64>() / n;
        for ((o, &gv), &yv) in out.iter_mut().zip(gs).zip(ys) {
            *o = inv[k] * (gv - mg - yv * mgy);
        }
    }
    gx
}

impl Var {
    fn standardize_groups(&self, group: usize, eps: f64) -> Var {
        let shape = self.shape().to_vec();
        let (y, inv) = standardize(self.value().data(), group, eps);
        let yt = Tensor::new(&shape, y);
        let yc = yt.clone();
        Var::op(yt, vec![self.clone()], move |g| {
            vec![Some(Tensor::new(
                &shape,
                standardize_backward(g.data(), yc.data(), &inv, group),
            ))]
        })
    }

    /// Parameter-free per-channel standardization of `[C, ...]` over all trailing axes.
    pub fn instance_norm(&self, eps: f64) -> Var {
        let c = self.shape()[0];
        let group = self.value().len() / c;
        self.standardize_groups(group, eps)
    }

    /// Parameter-free standardization over the last axis.
    pub fn layer_norm(&self, eps: f64) -> Var {
        let group = *self.shape().last().expect("layer_norm on scalar");
        self.standardize_groups(group, eps)
    }
}
