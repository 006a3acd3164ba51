//! Raw numeric inner loops shared by the autodiff graph and the inference
//! path. Keeping a single implementation of each reduction (and a fixed
//! reduction order) is what makes forward passes bitwise reproducible and
//! lets the incremental decode cache match a full re-forward exactly.

use crate::error::{CoreError, CoreResult};
use crate::scalar::Scalar;

/// c[m,n] += a[m,k] * b[k,n]
pub fn matmul_nn<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// c[m,n] += a[m,k] * b[n,k]^T
pub fn matmul_nt<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (j, cv) in c_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = S::zero();
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            *cv += acc;
        }
    }
}

/// c[k,n] += a[m,k]^T * b[m,n]
pub fn matmul_tn<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for r in 0..m {
        let a_row = &a[r * k..(r + 1) * k];
        let b_row = &b[r * n..(r + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let c_row = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// In place: row <- softmax(row + mask), stabilized by max subtraction.
///
/// Mask entries are 0 (attend) or -inf (blocked); blocked positions come out
/// exactly 0. A row with no unmasked entry is rejected.
pub fn softmax_masked_row<S: Scalar>(row: &mut [S], mask: &[S], row_index: usize) -> CoreResult<()> {
    debug_assert_eq!(row.len(), mask.len());
    let mut max = S::neg_infinity();
    for (x, &m) in row.iter_mut().zip(mask) {
        *x += m;
        if *x > max {
            max = *x;
        }
    }
    if !max.is_finite() {
        return Err(CoreError::FullyMaskedRow { row: row_index });
    }
    let mut sum = S::zero();
    for x in row.iter_mut() {
        // exp(-inf - max) is exactly +0, so blocked entries stay 0.
        *x = (*x - max).exp();
        sum += *x;
    }
    let inv = S::one() / sum;
    for x in row.iter_mut() {
        *x *= inv;
    }
    Ok(())
}

/// out <- gain * (x - mean) / sqrt(var + eps) + bias; returns (mean, inv_std)
/// so the backward pass does not recompute the statistics.
pub fn layer_norm_row<S: Scalar>(
    x: &[S],
    gain: &[S],
    bias: &[S],
    out: &mut [S],
    eps: S,
) -> (S, S) {
    let d = x.len();
    let inv_d = S::one() / S::from_usize(d);
    let mut mean = S::zero();
    for &v in x {
        mean += v;
    }
    mean *= inv_d;
    let mut var = S::zero();
    for &v in x {
        let c = v - mean;
        var += c * c;
    }
    var *= inv_d;
    let inv_std = S::one() / (var + eps).sqrt();
    for ((o, &v), (&g, &b)) in out.iter_mut().zip(x).zip(gain.iter().zip(bias)) {
        *o = (v - mean) * inv_std * g + b;
    }
    (mean, inv_std)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Smooth (tanh) GELU. Smoothness matters: finite-difference gradient checks
/// would break across a ReLU kink.
pub fn gelu<S: Scalar>(x: S) -> S {
    let c = S::from_f64(GELU_C);
    let a = S::from_f64(GELU_A);
    let half = S::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (S::one() + u.tanh())
}

pub fn gelu_grad<S: Scalar>(x: S) -> S {
    let c = S::from_f64(GELU_C);
    let a = S::from_f64(GELU_A);
    let half = S::from_f64(0.5);
    let three = S::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = S::one() - t * t;
    half * (S::one() + t) + half * x * sech2 * c * (S::one() + three * a * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let a = [1.0, 0.0, 0.0, 1.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        matmul_nn(&a, &b, &mut c, 2, 2, 2);
        assert_eq!(c, b);
    }

    #[test]
    fn softmax_blocked_entries_are_exactly_zero() {
        let mut row = [5.0f64, 0.0];
        let mask = [0.0, f64::NEG_INFINITY];
        softmax_masked_row(&mut row, &mask, 0).unwrap();
        assert_eq!(row[0], 1.0);
        assert_eq!(row[1], 0.0);
    }

    #[test]
    fn softmax_rejects_fully_masked() {
        let mut row = [1.0f64, 2.0];
        let mask = [f64::NEG_INFINITY; 2];
        assert_eq!(
            softmax_masked_row(&mut row, &mask, 3).unwrap_err(),
            CoreError::FullyMaskedRow { row: 3 }
        );
    }

    #[test]
    fn gelu_grad_matches_finite_difference() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.3, 2.5] {
            let eps = 1e-6;
            let num = (gelu(x + eps) - gelu(x - eps)) / (2.0 * eps);
            assert!((gelu_grad(x) - num).abs() < 1e-9, "x={x}");
        }
    }
}
