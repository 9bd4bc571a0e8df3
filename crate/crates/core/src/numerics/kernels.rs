//! Raw buffer kernels shared by the tape and the tape-free inference path.

use super::LAYER_NORM_EPS;

/// `c = alpha * op(a) * op(b) + beta * c` for row-major buffers, with
/// `op(a)` of shape `m x k` and `op(b)` of shape `k x n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    trans_a: bool,
    b: &[f32],
    trans_b: bool,
    c: &mut [f32],
    beta: f32,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm buffer too small");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|x| *x *= beta);
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserted lengths cover every index reachable from the
    // given dimensions and strides.
    unsafe {
        matrixmultiply::sgemm(
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
            n as isize,
            1,
        );
    }
}

pub fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    let inv = 1.0 / sum;
    row.iter_mut().for_each(|x| *x *= inv);
}

/// Normalizes each row of `x` (row length = `gamma.len()`) into `out`.
/// When given, `xhat` and `rstd` receive the normalized values and
/// reciprocal standard deviations.
pub fn layer_norm_rows(
    x: &[f32],
    gamma: &[f32],
    beta: &[f32],
    out: &mut [f32],
    mut xhat: Option<&mut [f32]>,
    mut rstd: Option<&mut [f32]>,
) {
    let n = gamma.len();
    for (r, (xr, or)) in x.chunks_exact(n).zip(out.chunks_exact_mut(n)).enumerate() {
        let mean = xr.iter().sum::<f32>() / n as f32;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n as f32;
        let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for j in 0..n {
            let h = (xr[j] - mean) * rs;
            if let Some(xh) = xhat.as_deref_mut() {
                xh[r * n + j] = h;
            }
            or[j] = h * gamma[j] + beta[j];
        }
        if let Some(rsv) = rstd.as_deref_mut() {
            rsv[r] = rs;
        }
    }
}
