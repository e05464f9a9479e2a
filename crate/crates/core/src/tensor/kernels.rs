//! Plain-Rust matrix kernels.
//!
//! Every output element is accumulated over the inner index in ascending
//! order with separate multiply and add, so a row of the result does not
//! depend on how many other rows share the call. Batched and single
//! evaluations therefore agree bit-for-bit.

/// `c += op(a) * op(b)` for row-major operands.
///
/// `op(a)` is `m x k` (stored `k x m` when `ta`), `op(b)` is `k x n`
/// (stored `n x k` when `tb`), `c` is `m x n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(ta: bool, tb: bool, m: usize, n: usize, k: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    assert_eq!(a.len(), m * k, "gemm: lhs has {} entries, expected {}x{}", a.len(), m, k);
    assert_eq!(b.len(), k * n, "gemm: rhs has {} entries, expected {}x{}", b.len(), k, n);
    assert_eq!(c.len(), m * n, "gemm: out has {} entries, expected {}x{}", c.len(), m, n);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let a_owned;
    let a = if ta {
        a_owned = transpose(a, k, m);
        &a_owned[..]
    } else {
        a
    };
    let b_owned;
    let b = if tb {
        b_owned = transpose(b, n, k);
        &b_owned[..]
    } else {
        b
    };
    gemm_nn(n, k, a, b, c);
}

fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}

#[inline]
fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * *xi;
    }
}

fn gemm_nn(n: usize, k: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    let mut rows = c.chunks_exact_mut(n).zip(a.chunks_exact(k));
    // Four rows at a time so each row of b is streamed once per block.
    loop {
        let Some((c0, a0)) = rows.next() else { break };
        let Some((c1, a1)) = rows.next() else {
            for p in 0..k {
                axpy(c0, a0[p], &b[p * n..(p + 1) * n]);
            }
            break;
        };
        let Some((c2, a2)) = rows.next() else {
            for p in 0..k {
                let br = &b[p * n..(p + 1) * n];
                axpy(c0, a0[p], br);
                axpy(c1, a1[p], br);
            }
            break;
        };
        let Some((c3, a3)) = rows.next() else {
            for p in 0..k {
                let br = &b[p * n..(p + 1) * n];
                axpy(c0, a0[p], br);
                axpy(c1, a1[p], br);
                axpy(c2, a2[p], br);
            }
            break;
        };
        for p in 0..k {
            let br = &b[p * n..(p + 1) * n];
            let (x0, x1, x2, x3) = (a0[p], a1[p], a2[p], a3[p]);
            for j in 0..n {
                let bj = br[j];
                c0[j] += x0 * bj;
                c1[j] += x1 * bj;
                c2[j] += x2 * bj;
                c3[j] += x3 * bj;
            }
        }
    }
}
