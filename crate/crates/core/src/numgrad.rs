//! Central finite differences, used as an independent gradient oracle.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// `(f(x + eps·e_i) − f(x − eps·e_i)) / (2·eps)` for every coordinate.
pub fn finite_diff_grad<T, F>(mut f: F, x: &[T], eps: T) -> Result<Vec<T>>
where
    T: Scalar,
    F: FnMut(&[T]) -> Result<T>,
{
    if !(eps > T::zero()) {
        return Err(Error::Contract(format!("finite-difference step must be positive, got {eps}")));
    }
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let fp = f(&probe)?;
        probe[i] = orig - eps;
        let fm = f(&probe)?;
        probe[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite(format!("f evaluated to {fp} / {fm} at coordinate {i}")));
        }
        out.push((fp - fm) / (eps + eps));
    }
    Ok(out)
}

/// Relative error `|a − b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let g = finite_diff_grad(|x: &[f64]| Ok(x[0] * x[0]), &[3.0], 1e-4).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn cubic_sum() {
        let g = finite_diff_grad(|x: &[f64]| Ok(x.iter().map(|v| v * v * v).sum()), &[1.0, 2.0], 1e-3)
            .unwrap();
        assert!((g[0] - 3.0).abs() < 1e-4 && (g[1] - 12.0).abs() < 1e-4);
    }

    #[test]
    fn constant_gives_zero() {
        let g = finite_diff_grad(|_: &[f32]| Ok(4.0), &[1.0, -1.0, 0.5], 1e-3).unwrap();
        assert_eq!(g, vec![0.0; 3]);
    }

    #[test]
    fn non_finite_propagates() {
        let r = finite_diff_grad(|x: &[f64]| Ok(x[0].ln()), &[0.0], 1e-3);
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    #[test]
    fn rejects_non_positive_step() {
        assert!(finite_diff_grad(|_: &[f64]| Ok(0.0), &[1.0], 0.0).is_err());
    }
}
