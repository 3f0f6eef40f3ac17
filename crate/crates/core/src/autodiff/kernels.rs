//! Numeric kernels shared by the graph ops and by non-differentiable callers.

use crate::error::{Error, Result};

/// `c = a·b + beta·c` where `a` is logically `m×k` and `b` is `k×n`.
/// A transposed operand is stored in its untransposed row-major layout.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above address exactly the m×k, k×n and m×n
    // row-major buffers whose lengths are checked in debug builds.
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
            n as isize,
            1,
        );
    }
}

/// Softmax of `v / temperature`, with max subtraction.
pub fn softmax_t(v: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) {
        return Err(Error::Parameter(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if v.is_empty() {
        return Err(Error::dim("softmax of an empty vector"));
    }
    let mut out = vec![0.0; v.len()];
    softmax_into(v, temperature, None, &mut out);
    Ok(out)
}

/// Row softmax with optional mask; masked entries come out exactly zero.
pub(crate) fn softmax_into(v: &[f64], temperature: f64, mask: Option<&[bool]>, out: &mut [f64]) {
    let keep = |i: usize| mask.is_none_or(|m| m[i]);
    let max = v
        .iter()
        .enumerate()
        .filter(|&(i, _)| keep(i))
        .map(|(_, &x)| x / temperature)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (i, (o, &x)) in out.iter_mut().zip(v).enumerate() {
        *o = if keep(i) { (x / temperature - max).exp() } else { 0.0 };
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + v.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(r: usize, c: usize, x: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = x[i * c + j];
            }
        }
        t
    }

    #[test]
    fn gemm_matches_naive_in_all_transpose_modes() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let want = naive(m, k, n, &a, &b);
        let at = transpose(m, k, &a);
        let bt = transpose(k, n, &b);
        for (aa, ta, bb, tb) in [
            (&a, false, &b, false),
            (&at, true, &b, false),
            (&a, false, &bt, true),
            (&at, true, &bt, true),
        ] {
            let mut c = vec![0.0; m * n];
            gemm(m, k, n, aa, ta, bb, tb, 0.0, &mut c);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_examples() {
        let u = softmax_t(&[0.0, 0.0, 0.0], 1.0).unwrap();
        for x in u {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!(matches!(softmax_t(&[1.0], 0.0), Err(Error::Parameter(_))));
        assert!(matches!(softmax_t(&[1.0], -1.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn masked_entries_are_exact_zero() {
        let mut out = [0.0; 3];
        softmax_into(&[1.0, 5.0, 2.0], 0.5, Some(&[true, false, true]), &mut out);
        assert_eq!(out[1].to_bits(), 0.0f64.to_bits());
        assert!((out[0] + out[2] - 1.0).abs() < 1e-15);
    }
}
