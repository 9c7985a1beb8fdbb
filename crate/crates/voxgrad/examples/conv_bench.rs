use std::time::Instant;
use voxgrad::{Tensor, Var};

fn main() {
    for &(cin, cout, d, h, w) in &[(16, 16, 16, 32, 32), (32, 32, 4, 8, 8), (9, 8, 16, 32, 32)] {
        let x = Var::leaf(Tensor::full(&[cin, d, h, w], 0.1), true);
        let wt = Var::leaf(Tensor::full(&[cout, cin, 3, 3, 3], 0.01), true);
        let t = Instant::now();
        let y = x.conv3d(&wt, 1, 1);
        let f = t.elapsed();
        let g = y.sum().backward();
        let b = t.elapsed() - f;
        let macs = (cin * cout * 27 * d * h * w) as f64;
        println!(
            "{cin}->{cout} {d}x{h}x{w}: fwd {:?} ({:.2} GMAC/s) bwd {:?} {}",
            f,
            macs / f.as_secs_f64() / 1e9,
            b,
            g.n_params()
        );
    }
}
