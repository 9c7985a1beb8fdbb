use crate::graph::Var;
use crate::tensor::{split_at_axis, Tensor};

fn same_shape(a: &Var, b: &Var, op: &str) {
    assert_eq!(a.shape(), b.shape(), "{op}: shape mismatch");
}

impl Var {
    pub fn add(&self, other: &Var) -> Var {
        same_shape(self, other, "add");
        Var::op(
            self.value().add(other.value()),
            vec![self.clone(), other.clone()],
            |g| vec![Some(g.clone()), Some(g.clone())],
        )
    }

    pub fn sub(&self, other: &Var) -> Var {
        same_shape(self, other, "sub");
        Var::op(
            self.value().sub(other.value()),
            vec![self.clone(), other.clone()],
            |g| vec![Some(g.clone()), Some(g.scale(-1.0))],
        )
    }

    pub fn mul(&self, other: &Var) -> Var {
        same_shape(self, other, "mul");
        let (a, b) = (self.value().clone(), other.value().clone());
        let (ra, rb) = (self.requires_grad(), other.requires_grad());
        Var::op(a.mul(&b), vec![self.clone(), other.clone()], move |g| {
            vec![ra.then(|| g.mul(&b)), rb.then(|| g.mul(&a))]
        })
    }

    pub fn div(&self, other: &Var) -> Var {
        same_shape(self, other, "div");
        let (a, b) = (self.value().clone(), other.value().clone());
        Var::op(
            a.zip_map(&b, |x, y| x / y),
            vec![self.clone(), other.clone()],
            move |g| {
                let ga = g.zip_map(&b, |gv, y| gv / y);
                let gb = Tensor::new(
                    g.shape(),
                    g.data()
                        .iter()
                        .zip(a.data())
                        .zip(b.data())
                        .map(|((&gv, &x), &y)| -gv * x / (y * y))
                        .collect(),
                );
                vec![Some(ga), Some(gb)]
            },
        )
    }

    pub fn neg(&self) -> Var {
        self.mul_scalar(-1.0)
    }

    pub fn add_scalar(&self, s: f64) -> Var {
        Var::op(self.value().map(|v| v + s), vec![self.clone()], |g| {
            vec![Some(g.clone())]
        })
    }

    pub fn mul_scalar(&self, s: f64) -> Var {
        Var::op(self.value().scale(s), vec![self.clone()], move |g| {
            vec![Some(g.scale(s))]
        })
    }

    /// Elementwise map with derivative `df(x, f(x))`.
    fn unary(&self, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Var {
        let x = self.value().clone();
        let y = x.map(f);
        let y2 = y.clone();
        Var::op(y, vec![self.clone()], move |g| {
            let data = g
                .data()
                .iter()
                .zip(x.data().iter().zip(y2.data()))
                .map(|(&gv, (&xv, &yv))| gv * df(xv, yv))
                .collect();
            vec![Some(Tensor::new(g.shape(), data))]
        })
    }

    pub fn relu(&self) -> Var {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn leaky_relu(&self, slope: f64) -> Var {
        self.unary(
            move |x| if x > 0.0 { x } else { slope * x },
            move |x, _| if x > 0.0 { 1.0 } else { slope },
        )
    }

    pub fn sigmoid(&self) -> Var {
        self.unary(sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn tanh(&self) -> Var {
        self.unary(f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn exp(&self) -> Var {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn ln(&self) -> Var {
        self.unary(f64::ln, |x, _| 1.0 / x)
    }

    pub fn sqrt(&self) -> Var {
        self.unary(f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn square(&self) -> Var {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    /// |x| with subgradient 0 at 0.
    pub fn abs(&self) -> Var {
        self.unary(f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    /// Gradient passes only where the input is strictly inside the range.
    pub fn clamp(&self, lo: f64, hi: f64) -> Var {
        self.unary(
            move |x| x.clamp(lo, hi),
            move |x, _| if x > lo && x < hi { 1.0 } else { 0.0 },
        )
    }

    /// Inverse sigmoid of `clamp(x, eps, 1-eps)`.
    pub fn logit(&self, eps: f64) -> Var {
        self.unary(
            move |x| {
                let p = x.clamp(eps, 1.0 - eps);
                (p / (1.0 - p)).ln()
            },
            move |x, _| {
                if x > eps && x < 1.0 - eps {
                    1.0 / (x * (1.0 - x))
                } else {
                    0.0
                }
            },
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Var {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        self.unary(
            |x| 0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh()),
            |x, _| {
                let u = C * (x + 0.044715 * x * x * x);
                let t = u.tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
            },
        )
    }

    /// Adds `b` (shape `[shape[axis]]`) broadcast along every other axis.
    pub fn add_along(&self, b: &Var, axis: usize) -> Var {
        let (outer, dim, inner) = split_at_axis(self.shape(), axis);
        assert_eq!(b.shape(), &[dim], "add_along: bias shape");
        let x = self.value();
        let bv = b.value().data();
        let mut out = x.to_vec();
        for o in 0..outer {
            for (d, &bd) in bv.iter().enumerate() {
                let base = (o * dim + d) * inner;
                out[base..base + inner].iter_mut().for_each(|v| *v += bd);
            }
        }
        Var::op(Tensor::new(x.shape(), out), vec![self.clone(), b.clone()], move |g| {
            let mut gb = vec![0.0; dim];
            for o in 0..outer {
                for (d, acc) in gb.iter_mut().enumerate() {
                    let base = (o * dim + d) * inner;
                    *acc += g.data()[base..base + inner].iter().sum::<f64>();
                }
            }
            vec![Some(g.clone()), Some(Tensor::new(&[dim], gb))]
        })
    }

    /// Multiplies by `s` (shape `[shape[axis]]`) broadcast along every other axis.
    pub fn mul_along(&self, s: &Var, axis: usize) -> Var {
        let (outer, dim, inner) = split_at_axis(self.shape(), axis);
        assert_eq!(s.shape(), &[dim], "mul_along: scale shape");
        let x = self.value().clone();
        let sv = s.value().clone();
        let mut out = x.to_vec();
        for o in 0..outer {
            for (d, &sd) in sv.data().iter().enumerate() {
                let base = (o * dim + d) * inner;
                out[base..base + inner].iter_mut().for_each(|v| *v *= sd);
            }
        }
        Var::op(Tensor::new(x.shape(), out), vec![self.clone(), s.clone()], move |g| {
            let mut gx = g.to_vec();
            let mut gs = vec![0.0; dim];
            for o in 0..outer {
                for d in 0..dim {
                    let base = (o * dim + d) * inner;
                    let sd = sv.data()[d];
                    let mut acc = 0.0;
                    for i in base..base + inner {
                        acc += g.data()[i] * x.data()[i];
                        gx[i] *= sd;
                    }
                    gs[d] += acc;
                }
            }
            vec![Some(Tensor::new(g.shape(), gx)), Some(Tensor::new(&[dim], gs))]
        })
    }

    /// Adds `b` whose shape equals the trailing dims of `self`, repeated over the leading dims.
    pub fn add_trailing(&self, b: &Var) -> Var {
        let nb = b.value().len();
        let k = self.shape().len() - b.shape().len();
        assert_eq!(&self.shape()[k..], b.shape(), "add_trailing: shape");
        let bv = b.value().clone();
        let mut out = self.value().to_vec();
        for chunk in out.chunks_mut(nb) {
            chunk.iter_mut().zip(bv.data()).for_each(|(v, b)| *v += b);
        }
        let bshape = b.shape().to_vec();
        Var::op(
            Tensor::new(self.shape(), out),
            vec![self.clone(), b.clone()],
            move |g| {
                let mut gb = vec![0.0; nb];
                for chunk in g.data().chunks(nb) {
                    gb.iter_mut().zip(chunk).for_each(|(a, v)| *a += v);
                }
                vec![Some(g.clone()), Some(Tensor::new(&bshape, gb))]
            },
        )
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
