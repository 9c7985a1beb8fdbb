use crate::graph::Var;
use crate::tensor::Tensor;

/// Dense `C (m×n) += A (m×k) · B (k×n)` over raw slices with explicit strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
    rsc: isize,
    csc: isize,
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: callers pass slices whose extents cover every strided access:
    // A needs (m-1)*rsa + (k-1)*csa < a.len() and likewise for B and C.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

/// Strides of a logical `rows × cols` view over a row-major block, optionally transposed.
fn view(rows_stored: usize, cols_stored: usize, transposed: bool) -> (isize, isize) {
    let _ = rows_stored;
    if transposed {
        (1, cols_stored as isize)
    } else {
        (cols_stored as isize, 1)
    }
}

/// Batched product of `[B, m, k]` and `[B, k, n]` blocks with optional transposes,
/// where a transposed operand is stored as `[B, k, m]` / `[B, n, k]`.
fn bmm_raw(batch: usize, m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool) -> Vec<f64> {
    let mut c = vec![0.0; batch * m * n];
    let (rsa, csa) = if ta { view(k, m, true) } else { view(m, k, false) };
    let (rsb, csb) = if tb { view(n, k, true) } else { view(k, n, false) };
    for bi in 0..batch {
        gemm(
            m,
            k,
            n,
            &a[bi * m * k..(bi + 1) * m * k],
            rsa,
            csa,
            &b[bi * k * n..(bi + 1) * k * n],
            rsb,
            csb,
            &mut c[bi * m * n..(bi + 1) * m * n],
            n as isize,
            1,
            0.0,
        );
    }
    c
}

impl Var {
    /// `[m, k] × [k, n]`.
    pub fn matmul(&self, other: &Var) -> Var {
        let (sa, sb) = (self.shape(), other.shape());
        assert!(
            sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0],
            "matmul {sa:?} × {sb:?}"
        );
        let a3 = self.reshape(&[1, sa[0], sa[1]]);
        let b3 = other.reshape(&[1, sb[0], sb[1]]);
        a3.bmm(&b3, false, false).reshape(&[sa[0], sb[1]])
    }

    /// Batched matmul. With `ta`, `self` is `[B, k, m]` and used transposed;
    /// with `tb`, `other` is `[B, n, k]` and used transposed.
    pub fn bmm(&self, other: &Var, ta: bool, tb: bool) -> Var {
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        assert!(sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0], "bmm rank/batch");
        let batch = sa[0];
        let (m, k) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (k2, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        assert_eq!(k, k2, "bmm inner dims {sa:?} {sb:?} ta={ta} tb={tb}");
        let a = self.value().clone();
        let b = other.value().clone();
        let c = bmm_raw(batch, m, k, n, a.data(), ta, b.data(), tb);
        let (ra, rb) = (self.requires_grad(), other.requires_grad());
        Var::op(
            Tensor::new(&[batch, m, n], c),
            vec![self.clone(), other.clone()],
            move |g| {
                // dA = g · Bᵀ (m×k), dB = Aᵀ · g (k×n); transposed storage flips the result.
                let ga = ra.then(|| {
                    let d = if ta {
                        // stored [k, m]: dAᵀ = B · gᵀ
                        bmm_raw(batch, k, n, m, b.data(), tb, g.data(), true)
                    } else {
                        bmm_raw(batch, m, n, k, g.data(), false, b.data(), !tb)
                    };
                    Tensor::new(a.shape(), d)
                });
                let gb = rb.then(|| {
                    let d = if tb {
                        // stored [n, k]: dBᵀ = gᵀ · A
                        bmm_raw(batch, n, m, k, g.data(), true, a.data(), ta)
                    } else {
                        bmm_raw(batch, k, m, n, a.data(), !ta, g.data(), false)
                    };
                    Tensor::new(b.shape(), d)
                });
                vec![ga, gb]
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = Var::constant(Tensor::new(&[2, 3], vec![1., 2., 3., 4., 5., 6.]));
        let b = Var::constant(Tensor::new(&[3, 2], vec![7., 8., 9., 10., 11., 12.]));
        assert_eq!(a.matmul(&b).value().data(), &[58., 64., 139., 154.]);
    }

    #[test]
    fn transposed_operands() {
        let a = Tensor::new(&[1, 2, 3], vec![1., 2., 3., 4., 5., 6.]);
        let at = Tensor::new(&[1, 3, 2], vec![1., 4., 2., 5., 3., 6.]);
        let b = Tensor::new(&[1, 3, 2], vec![7., 8., 9., 10., 11., 12.]);
        let bt = Tensor::new(&[1, 2, 3], vec![7., 9., 11., 8., 10., 12.]);
        let want = [58., 64., 139., 154.];
        for (x, ta) in [(&a, false), (&at, true)] {
            for (y, tb) in [(&b, false), (&bt, true)] {
                let c = Var::constant(x.clone()).bmm(&Var::constant(y.clone()), ta, tb);
                assert_eq!(c.value().data(), &want, "ta={ta} tb={tb}");
            }
        }
    }
}
