//! Central finite differences for validating analytic gradients.
//!
//! The numeric side only ever calls the forward path, so it stays
//! independent of the reverse sweep it is checking.

use crate::tensor::Real;

/// d f / d x_i by central differences with step `h`, one coordinate at a time.
pub fn central_diff(mut f: impl FnMut(&[Real]) -> Real, x: &[Real], h: Real) -> Vec<Real> {
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = f(&probe);
        probe[i] = orig - h;
        let minus = f(&probe);
        probe[i] = orig;
        out.push((plus - minus) / (2.0 * h));
    }
    out
}

/// Worst relative error between two gradient vectors. The denominator is
/// floored at 1e-3 so near-zero entries degrade to an absolute comparison
/// instead of amplifying finite-difference noise.
pub fn max_rel_err(analytic: &[Real], numeric: &[Real]) -> Real {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-3))
        .fold(0.0, Real::max)
}
