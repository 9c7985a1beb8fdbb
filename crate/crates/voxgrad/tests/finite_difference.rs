//! Every differentiable op checked against central differences.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxgrad::{AxisMap, Tensor, Var};

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Reduces any output to a scalar with fixed random weights so every output element matters.
fn probe(y: &Var, seed: u64) -> Var {
    let w = Var::constant(random(y.shape(), seed ^ 0xabcdef));
    y.mul(&w).sum()
}

fn check(name: &str, inputs: &[Tensor], f: impl Fn(&[Var]) -> Var, tol: f64) {
    let vars: Vec<Var> = inputs.iter().map(|t| Var::leaf(t.clone(), true)).collect();
    let loss = probe(&f(&vars), 7);
    let grads = loss.backward();
    let h = 1e-6;
    for (k, t) in inputs.iter().enumerate() {
        let analytic = grads.wrt(&vars[k]).expect("missing gradient").clone();
        for i in 0..t.len() {
            let eval = |delta: f64| {
                let mut d = t.to_vec();
                d[i] += delta;
                let vs: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, u)| {
                        Var::constant(if j == k {
                            Tensor::new(t.shape(), d.clone())
                        } else {
                            u.clone()
                        })
                    })
                    .collect();
                probe(&f(&vs), 7).value().item()
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / (1e-6 + a.abs().max(numeric.abs()));
            assert!(
                err < tol || (a - numeric).abs() < 1e-7,
                "{name}: input {k} elem {i}: analytic {a} numeric {numeric}"
            );
        }
    }
}

#[test]
fn elementwise() {
    let a = random(&[3, 4], 1);
    let b = random(&[3, 4], 2).map(|v| v + 2.5);
    check("add", &[a.clone(), b.clone()], |v| v[0].add(&v[1]), 1e-6);
    check("sub", &[a.clone(), b.clone()], |v| v[0].sub(&v[1]), 1e-6);
    check("mul", &[a.clone(), b.clone()], |v| v[0].mul(&v[1]), 1e-6);
    check("div", &[a.clone(), b.clone()], |v| v[0].div(&v[1]), 1e-6);
    check("sigmoid", &[a.clone()], |v| v[0].sigmoid(), 1e-6);
    check("tanh", &[a.clone()], |v| v[0].tanh(), 1e-6);
    check("exp", &[a.clone()], |v| v[0].exp(), 1e-6);
    check("ln", &[b.clone()], |v| v[0].ln(), 1e-6);
    check("sqrt", &[b.clone()], |v| v[0].sqrt(), 1e-6);
    check("square", &[a.clone()], |v| v[0].square(), 1e-6);
    check("gelu", &[a.clone()], |v| v[0].gelu(), 1e-6);
    check("leaky", &[a.clone()], |v| v[0].leaky_relu(0.2), 1e-6);
    check("abs", &[a.clone()], |v| v[0].abs(), 1e-6);
    let p = a.map(|v| 0.5 + 0.4 * v);
    check("logit", &[p], |v| v[0].logit(1e-4), 1e-6);
}

#[test]
fn broadcasting_and_reductions() {
    let x = random(&[2, 3, 4], 3);
    let c = random(&[3], 4);
    let t = random(&[3, 4], 5);
    check("add_along", &[x.clone(), c.clone()], |v| v[0].add_along(&v[1], 1), 1e-6);
    check("mul_along", &[x.clone(), c.clone()], |v| v[0].mul_along(&v[1], 1), 1e-6);
    check("add_trailing", &[x.clone(), t], |v| v[0].add_trailing(&v[1]), 1e-6);
    check("sum_axis", &[x.clone()], |v| v[0].sum_axis(1), 1e-6);
    check("sum_per_channel", &[x.clone()], |v| v[0].sum_per_channel(), 1e-6);
    check("mean", &[x.clone()], |v| v[0].mean(), 1e-6);
    check("softmax", &[x.clone()], |v| v[0].softmax(1), 1e-6);
    check("softmax_last", &[x.clone()], |v| v[0].softmax(2), 1e-6);
    check("log_softmax", &[x.clone()], |v| v[0].log_softmax(0), 1e-6);
    check("instance_norm", &[x.clone()], |v| v[0].instance_norm(1e-5), 1e-5);
    check("layer_norm", &[x], |v| v[0].layer_norm(1e-5), 1e-5);
}

#[test]
fn linear_algebra() {
    let a = random(&[2, 3, 4], 6);
    let b = random(&[2, 4, 5], 7);
    let at = random(&[2, 4, 3], 8);
    let bt = random(&[2, 5, 4], 9);
    check("bmm", &[a.clone(), b.clone()], |v| v[0].bmm(&v[1], false, false), 1e-6);
    check("bmm_ta", &[at.clone(), b], |v| v[0].bmm(&v[1], true, false), 1e-6);
    check("bmm_tb", &[a, bt.clone()], |v| v[0].bmm(&v[1], false, true), 1e-6);
    check("bmm_both", &[at, bt], |v| v[0].bmm(&v[1], true, true), 1e-6);
}

#[test]
fn convolutions() {
    let x = random(&[2, 5, 4, 6], 10);
    for &(k, s, p) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (2, 2, 0)] {
        let w = random(&[3, 2, k, k, k], 11);
        check(
            &format!("conv k{k}s{s}p{p}"),
            &[x.clone(), w],
            |v| v[0].conv3d(&v[1], s, p),
            1e-6,
        );
    }
    let small = random(&[2, 2, 3, 2], 12);
    let wt = random(&[2, 3, 2, 2, 2], 13);
    check(
        "conv_transpose",
        &[small, wt],
        |v| v[0].conv_transpose3d_2x(&v[1]),
        1e-6,
    );
}

#[test]
fn shape_ops() {
    let x = random(&[2, 3, 4, 5], 14);
    check("permute", &[x.clone()], |v| v[0].permute(&[3, 1, 0, 2]), 1e-6);
    check("narrow", &[x.clone()], |v| v[0].narrow(2, 1, 2), 1e-6);
    check("roll", &[x.clone()], |v| v[0].roll3d([1, -2, 2]), 1e-6);
    check("reflect_pad", &[x.clone()], |v| v[0].reflect_pad_end([1, 2, 3]), 1e-6);
    check("crop", &[x.clone()], |v| v[0].crop3d([2, 3, 3]), 1e-6);
    let y = random(&[1, 3, 4, 5], 15);
    check(
        "concat",
        &[x.clone(), y],
        |v| Var::concat(&[v[0].clone(), v[1].clone()], 0),
        1e-6,
    );
    check("resize_up", &[x.clone()], |v| v[0].resize_trilinear([6, 8, 10]), 1e-6);
    check("resize_down", &[x.clone()], |v| v[0].resize_trilinear([2, 2, 3]), 1e-6);
    let m = Arc::new(AxisMap::valid_filter(5, &[0.2, 0.5, 0.3]));
    check("valid_filter", &[x], move |v| v[0].map_axis(3, m.clone()), 1e-6);
}

#[test]
fn composite_graph_reuses_nodes() {
    // x used along several paths; gradients must accumulate.
    let x = random(&[4, 3], 16);
    check(
        "diamond",
        &[x],
        |v| {
            let a = v[0].tanh();
            let b = a.mul(&v[0]);
            b.add(&a.square()).softmax(1)
        },
        1e-6,
    );
}
