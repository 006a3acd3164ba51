//! Finite-difference gradient checking (central differences, 64-bit only).

use crate::error::{CoreError, CoreResult};

/// Outcome of a finite-difference probe over a set of coordinates.
#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_rel_err: f64,
    /// Coordinate (into the flat vector) where the worst error occurred.
    pub worst_coord: usize,
    pub probes: usize,
}

/// Relative error between an analytic and a numerical gradient estimate.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (1e-8f64).max(analytic.abs() + numeric.abs())
}

/// Central-difference check of `analytic` against `f` at `x0`, probing the
/// given coordinates with step `eps`. `f` must be deterministic; a non-finite
/// loss is rejected.
pub fn fd_check(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x0: &[f64],
    analytic: &[f64],
    eps: f64,
    coords: &[usize],
) -> CoreResult<FdReport> {
    assert!(eps > 0.0, "eps must be positive");
    assert_eq!(x0.len(), analytic.len());
    let mut x = x0.to_vec();
    let mut report = FdReport {
        max_rel_err: 0.0,
        worst_coord: 0,
        probes: 0,
    };
    for &c in coords {
        let orig = x[c];
        x[c] = orig + eps;
        let lp = f(&x);
        x[c] = orig - eps;
        let lm = f(&x);
        x[c] = orig;
        if !lp.is_finite() || !lm.is_finite() {
            return Err(CoreError::NonFinite {
                context: format!("gradcheck loss at coordinate {c}"),
            });
        }
        let gn = (lp - lm) / (2.0 * eps);
        let e = rel_err(analytic[c], gn);
        if e > report.max_rel_err {
            report.max_rel_err = e;
            report.worst_coord = c;
        }
        report.probes += 1;
    }
    Ok(report)
}

/// Indices of the `k` largest-magnitude entries, ties broken by lower index.
/// Probing the dominant coordinates keeps the central-difference noise floor
/// well below the thresholds while still catching any wrong backward rule.
pub fn top_coords(grad: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..grad.len()).collect();
    idx.sort_by(|&a, &b| {
        grad[b]
            .abs()
            .partial_cmp(&grad[a].abs())
            .unwrap()
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_in_three_params() {
        // f(x) = x0^2 + 2 x1^2 + 3 x2^2; grad = (2x0, 4x1, 6x2)
        let x0 = [1.0, -2.0, 0.5];
        let analytic = [2.0, -8.0, 3.0];
        let mut f = |x: &[f64]| x[0] * x[0] + 2.0 * x[1] * x[1] + 3.0 * x[2] * x[2];
        let rep = fd_check(&mut f, &x0, &analytic, 1e-5, &[0, 1, 2]).unwrap();
        assert!(rep.max_rel_err < 1e-9, "rel err {}", rep.max_rel_err);
    }

    #[test]
    fn non_finite_loss_is_rejected() {
        let mut f = |_: &[f64]| f64::NAN;
        let err = fd_check(&mut f, &[1.0], &[0.0], 1e-5, &[0]).unwrap_err();
        assert!(matches!(err, CoreError::NonFinite { .. }));
    }

    #[test]
    fn top_coords_orders_by_magnitude() {
        assert_eq!(top_coords(&[0.1, -5.0, 2.0], 2), vec![1, 2]);
    }
}
