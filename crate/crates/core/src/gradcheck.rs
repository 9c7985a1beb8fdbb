//! Central finite-difference checks for scalar graph functions.

use voxgrad::{Tensor, Var};

/// Elements whose analytic and numeric gradients are both below this are compared absolutely.
pub const GRAD_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|, GRAD_FLOOR)`.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub n_checked: usize,
}

/// Compares reverse-mode gradients of `f` (which must return a scalar) against central
/// differences with step `h`, over every element of every input.
pub fn check_gradients(inputs: &[Tensor], h: f64, f: impl Fn(&[Var]) -> Var) -> GradCheck {
    let vars: Vec<Var> = inputs.iter().map(|t| Var::leaf(t.clone(), true)).collect();
    let grads = f(&vars).backward();
    let mut out = GradCheck {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        n_checked: 0,
    };
    for (k, t) in inputs.iter().enumerate() {
        let analytic = grads.wrt(&vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
        for i in 0..t.len() {
            let eval = |delta: f64| {
                let vs: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, u)| {
                        if j == k {
                            let mut d = u.to_vec();
                            d[i] += delta;
                            Var::constant(Tensor::new(u.shape(), d))
                        } else {
                            Var::constant(u.clone())
                        }
                    })
                    .collect();
                f(&vs).value().item()
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data()[i];
            let abs = (a - numeric).abs();
            out.max_abs_error = out.max_abs_error.max(abs);
            out.max_rel_error = out.max_rel_error.max(abs / a.abs().max(numeric.abs()).max(GRAD_FLOOR));
            out.n_checked += 1;
        }
    }
    out
}
