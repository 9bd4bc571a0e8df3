//! Small dense f64 solvers for closed-form fits.

use super::{shape_err, NumericsError};

/// Solves `a x = b` for symmetric positive-definite `a` (`n x n`, row
/// major) and `m` right-hand sides stored as the columns of `b` (`n x m`).
/// `b` is overwritten with the solution.
pub fn cholesky_solve(a: &[f64], n: usize, b: &mut [f64], m: usize) -> Result<(), NumericsError> {
    if a.len() != n * n || b.len() != n * m {
        return Err(shape_err("cholesky_solve", format!("a has {} entries, b has {} for n={n}, m={m}", a.len(), b.len())));
    }
    let mut l = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return Err(shape_err("cholesky_solve", format!("matrix not positive definite at pivot {i} ({s:e})")));
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    // Forward then backward substitution, all right-hand sides at once.
    for i in 0..n {
        for k in 0..i {
            let lik = l[i * n + k];
            if lik != 0.0 {
                for c in 0..m {
                    b[i * m + c] -= lik * b[k * m + c];
                }
            }
        }
        let d = l[i * n + i];
        b[i * m..(i + 1) * m].iter_mut().for_each(|x| *x /= d);
    }
    for i in (0..n).rev() {
        for k in i + 1..n {
            let lki = l[k * n + i];
            if lki != 0.0 {
                for c in 0..m {
                    b[i * m + c] -= lki * b[k * m + c];
                }
            }
        }
        let d = l[i * n + i];
        b[i * m..(i + 1) * m].iter_mut().for_each(|x| *x /= d);
    }
    Ok(())
}

/// `x^T x` for an `r x c` row-major matrix.
pub fn gram(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut g = vec![0.0; c * c];
    for row in x.chunks_exact(c).take(r) {
        for i in 0..c {
            let xi = row[i];
            if xi == 0.0 {
                continue;
            }
            for j in i..c {
                g[i * c + j] += xi * row[j];
            }
        }
    }
    for i in 0..c {
        for j in 0..i {
            g[i * c + j] = g[j * c + i];
        }
    }
    g
}
