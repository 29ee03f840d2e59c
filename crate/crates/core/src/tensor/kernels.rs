//! Raw slice kernels shared by forward and backward passes.

use crate::error::{Error, Result};

/// Validates `[..., m, k] x [..., k, n]` and returns `(batch, m, k, n)`.
pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize, usize)> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Dimension(format!(
            "matmul needs rank >= 2 operands, got {a:?} and {b:?}"
        )));
    }
    if a.len() != b.len() || a[..a.len() - 2] != b[..b.len() - 2] {
        return Err(Error::Dimension(format!(
            "matmul batch dims must match exactly: {a:?} vs {b:?}"
        )));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(Error::Dimension(format!(
            "matmul inner dims disagree: {a:?} vs {b:?}"
        )));
    }
    let batch = a[..a.len() - 2].iter().product();
    Ok((batch, m, k, n))
}

/// Batched product of logical `[batch, m, k]` and `[batch, k, n]` operands.
/// With `a_t` the first operand is stored as `[batch, k, m]`; with `b_t`
/// the second is stored as `[batch, n, k]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn bmm(
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
) -> Vec<f64> {
    let a_owned;
    let a = if a_t {
        a_owned = transpose_last(a, k, m);
        &a_owned[..]
    } else {
        a
    };
    let b_owned;
    let b = if b_t {
        b_owned = transpose_last(b, n, k);
        &b_owned[..]
    } else {
        b
    };
    let mut out = vec![0.0; batch * m * n];
    for bi in 0..batch {
        let a = &a[bi * m * k..(bi + 1) * m * k];
        let b = &b[bi * k * n..(bi + 1) * k * n];
        let c = &mut out[bi * m * n..(bi + 1) * m * n];
        for i in 0..m {
            let c_row = &mut c[i * n..(i + 1) * n];
            for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
                if aip == 0.0 {
                    continue;
                }
                let b_row = &b[p * n..(p + 1) * n];
                for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                    *cv += aip * bv;
                }
            }
        }
    }
    out
}

/// Transposes every trailing `m x n` block.
pub(crate) fn transpose_last(x: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (blk_in, blk_out) in x.chunks_exact(m * n).zip(out.chunks_exact_mut(m * n)) {
        for i in 0..m {
            for j in 0..n {
                blk_out[j * m + i] = blk_in[i * n + j];
            }
        }
    }
    out
}

/// Row-wise softmax with max subtraction.
pub(crate) fn softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, o) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (ov, &v) in o.iter_mut().zip(row) {
            *ov = (v - max).exp();
            total += *ov;
        }
        for ov in o.iter_mut() {
            *ov /= total;
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}
