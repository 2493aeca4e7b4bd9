//! Legendre polynomials, associated Legendre functions, and real spherical
//! harmonics used as pole-safe location encodings.
//!
//! Evaluation is by three-term recurrences. The normalized path folds the
//! `sqrt((2l+1)/(4pi) * (l-m)!/(l+m)!)` factor into the recurrence itself,
//! so no factorials are ever formed and degrees beyond the default cutoff
//! stay representable.

use crate::error::{Error, Result};
use crate::graph::StationSet;
use crate::tensor::{Real, Tensor};

/// Legendre polynomial P_l(x) on [-1, 1].
pub fn legendre(l: usize, x: f64) -> Result<f64> {
    if x.abs() > 1.0 || x.is_nan() {
        return Err(Error::invalid(format!("legendre needs |x| <= 1, got {}", x)));
    }
    let mut prev = 1.0; // P_0
    if l == 0 {
        return Ok(prev);
    }
    let mut cur = x; // P_1
    for n in 2..=l {
        let nf = n as f64;
        let next = ((2.0 * nf - 1.0) * x * cur - (nf - 1.0) * prev) / nf;
        prev = cur;
        cur = next;
    }
    Ok(cur)
}

/// Associated Legendre function P_l^m(x) with the Condon-Shortley phase,
/// i.e. P_l^m(x) = (-1)^m (1-x^2)^{m/2} d^m/dx^m P_l(x). Requires 0 <= m <= l.
///
/// Negative orders are handled by callers through the symmetry relation
/// P_l^{-m} = (-1)^m (l-m)!/(l+m)! P_l^m.
pub fn assoc_legendre(l: usize, m: usize, x: f64) -> Result<f64> {
    if m > l {
        return Err(Error::invalid(format!("assoc_legendre needs m <= l, got m={} l={}", m, l)));
    }
    if x.abs() > 1.0 || x.is_nan() {
        return Err(Error::invalid(format!("assoc_legendre needs |x| <= 1, got {}", x)));
    }
    let s = ((1.0 - x) * (1.0 + x)).max(0.0).sqrt();
    // P_m^m = (-1)^m (2m-1)!! s^m
    let mut pmm = 1.0;
    for k in 1..=m {
        pmm *= -((2 * k - 1) as f64) * s;
    }
    if l == m {
        return Ok(pmm);
    }
    let mut pm1 = x * (2 * m + 1) as f64 * pmm; // P_{m+1}^m
    if l == m + 1 {
        return Ok(pm1);
    }
    let mut plm = 0.0;
    for n in (m + 2)..=l {
        plm = (x * (2 * n - 1) as f64 * pm1 - (n + m - 1) as f64 * pmm) / (n - m) as f64;
        pmm = pm1;
        pm1 = plm;
    }
    Ok(plm)
}

/// Fully normalized associated Legendre function
/// sqrt((2l+1)/(4pi) * (l-m)!/(l+m)!) * P_l^m(x), Condon-Shortley included.
pub fn norm_assoc_legendre(l: usize, m: usize, x: f64) -> Result<f64> {
    if m > l {
        return Err(Error::invalid(format!("norm_assoc_legendre needs m <= l, got m={} l={}", m, l)));
    }
    if x.abs() > 1.0 || x.is_nan() {
        return Err(Error::invalid(format!("norm_assoc_legendre needs |x| <= 1, got {}", x)));
    }
    let s = ((1.0 - x) * (1.0 + x)).max(0.0).sqrt();
    // Seed: N_0^0, then climb the diagonal to N_m^m.
    let mut nmm = (0.25 / std::f64::consts::PI).sqrt();
    for k in 1..=m {
        nmm *= -(((2 * k + 1) as f64) / ((2 * k) as f64)).sqrt() * s;
    }
    if l == m {
        return Ok(nmm);
    }
    let mut nm1 = (2.0 * m as f64 + 3.0).sqrt() * x * nmm; // N_{m+1}^m
    if l == m + 1 {
        return Ok(nm1);
    }
    let mut nlm = 0.0;
    let mf2 = (m * m) as f64;
    for n in (m + 2)..=l {
        let nf = n as f64;
        let a = ((4.0 * nf * nf - 1.0) / (nf * nf - mf2)).sqrt();
        let b = (((nf - 1.0) * (nf - 1.0) - mf2) / (4.0 * (nf - 1.0) * (nf - 1.0) - 1.0)).sqrt();
        nlm = a * (x * nm1 - b * nmm);
        nmm = nm1;
        nm1 = nlm;
    }
    Ok(nlm)
}

/// Real spherical harmonic Y_l^m at a point on the sphere, with the polar
/// angle `colat_rad` in [0, pi] and azimuth `lon_rad`:
/// sine branch for m < 0, the normalized Legendre value alone for m = 0,
/// cosine branch for m > 0, each negative/positive branch carrying the
/// (-1)^m sqrt(2) factor.
pub fn real_sph_harm(l: usize, m: i32, colat_rad: f64, lon_rad: f64) -> Result<f64> {
    if !(0.0..=std::f64::consts::PI).contains(&colat_rad) {
        return Err(Error::invalid(format!("colatitude {} out of [0, pi]", colat_rad)));
    }
    let m_abs = m.unsigned_abs() as usize;
    let x = colat_rad.cos();
    let nlm = norm_assoc_legendre(l, m_abs, x)?;
    let sign = if m_abs % 2 == 0 { 1.0 } else { -1.0 };
    let sqrt2 = std::f64::consts::SQRT_2;
    Ok(match m.cmp(&0) {
        std::cmp::Ordering::Less => sign * sqrt2 * nlm * (m_abs as f64 * lon_rad).sin(),
        std::cmp::Ordering::Equal => nlm,
        std::cmp::Ordering::Greater => sign * sqrt2 * nlm * (m_abs as f64 * lon_rad).cos(),
    })
}

/// Column index of (l, m) in the (l_max+1)^2-wide basis: degrees ascend,
/// orders run -l..=l inside each degree.
pub fn basis_column(l: usize, m: i32) -> usize {
    l * l + (m + l as i32) as usize
}

/// Precomputed spherical-harmonic values, one row per station.
#[derive(Debug, Clone)]
pub struct HarmonicBasis {
    pub l_max: usize,
    /// N x (l_max+1)^2, row-major.
    pub values: Tensor,
}

impl HarmonicBasis {
    pub fn n_columns(&self) -> usize {
        (self.l_max + 1) * (self.l_max + 1)
    }

    pub fn n_stations(&self) -> usize {
        self.values.shape()[0]
    }
}

/// Evaluate all harmonics up to `l_max` at every station. The station
/// latitude maps to the polar angle as colatitude = pi/2 - latitude; this is
/// the single point where the geographic and spherical conventions meet.
pub fn build_basis(stations: &StationSet, l_max: usize) -> Result<HarmonicBasis> {
    let n = stations.len();
    let cols = (l_max + 1) * (l_max + 1);
    let mut data = vec![0.0 as Real; n * cols];
    for (i, c) in stations.coords.iter().enumerate() {
        let colat = c.colat_rad();
        let lon = c.lon_rad();
        for l in 0..=l_max {
            for m in -(l as i32)..=(l as i32) {
                data[i * cols + basis_column(l, m)] = real_sph_harm(l, m, colat, lon)? as Real;
            }
        }
    }
    Ok(HarmonicBasis {
        l_max,
        values: Tensor::new(vec![n, cols], data)?,
    })
}

/// Basis plus the learnable per-(l, m) weights shared across stations.
#[derive(Debug, Clone)]
pub struct LocationEncoder {
    pub basis: HarmonicBasis,
    pub weights: Vec<Real>,
}

impl LocationEncoder {
    pub fn new(basis: HarmonicBasis, weights: Vec<Real>) -> Result<Self> {
        if weights.len() != basis.n_columns() {
            return Err(Error::invalid(format!(
                "{} weights for {} basis columns",
                weights.len(),
                basis.n_columns()
            )));
        }
        Ok(LocationEncoder { basis, weights })
    }

    /// Fresh encoder with unit weights, so the embedding starts as the basis.
    pub fn with_unit_weights(basis: HarmonicBasis) -> Self {
        let weights = vec![1.0; basis.n_columns()];
        LocationEncoder { basis, weights }
    }

    /// The location embedding: each basis row scaled elementwise by the
    /// shared weights. The differentiable route runs through the tape's
    /// `col_scale`; this is the plain forward value.
    pub fn encode(&self) -> Tensor {
        let n = self.basis.n_stations();
        let cols = self.basis.n_columns();
        let src = self.basis.values.data();
        Tensor::from_fn(vec![n, cols], |i| src[i] * self.weights[i % cols])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::GeoCoord;

    const FOUR_PI: f64 = 4.0 * std::f64::consts::PI;

    #[test]
    fn legendre_low_orders() {
        for &x in &[-1.0, -0.3, 0.0, 0.7, 1.0] {
            assert_eq!(legendre(0, x).unwrap(), 1.0);
            assert_eq!(legendre(1, x).unwrap(), x);
        }
        assert!((legendre(2, 0.5).unwrap() - (-0.125)).abs() < 1e-15);
        assert!(legendre(3, 1.5).is_err());
    }

    #[test]
    fn assoc_reduces_to_legendre_at_m0() {
        for l in 0..=5 {
            for i in 0..=20 {
                let x = -1.0 + 0.1 * i as f64;
                let a = assoc_legendre(l, 0, x).unwrap();
                let p = legendre(l, x).unwrap();
                assert!((a - p).abs() < 1e-12, "l={} x={}", l, x);
            }
        }
    }

    #[test]
    fn assoc_known_values_at_zero() {
        assert!((assoc_legendre(1, 1, 0.0).unwrap() - (-1.0)).abs() < 1e-15);
        assert!((assoc_legendre(2, 2, 0.0).unwrap() - 3.0).abs() < 1e-15);
        assert!(assoc_legendre(1, 2, 0.0).is_err());
    }

    /// Explicit closed forms (Condon-Shortley phase) for l <= 4.
    fn assoc_oracle(l: usize, m: usize, x: f64) -> f64 {
        let s = (1.0 - x * x).sqrt();
        match (l, m) {
            (0, 0) => 1.0,
            (1, 0) => x,
            (1, 1) => -s,
            (2, 0) => 0.5 * (3.0 * x * x - 1.0),
            (2, 1) => -3.0 * x * s,
            (2, 2) => 3.0 * (1.0 - x * x),
            (3, 0) => 0.5 * (5.0 * x * x * x - 3.0 * x),
            (3, 1) => -1.5 * (5.0 * x * x - 1.0) * s,
            (3, 2) => 15.0 * x * (1.0 - x * x),
            (3, 3) => -15.0 * s * s * s,
            (4, 0) => 0.125 * (35.0 * x.powi(4) - 30.0 * x * x + 3.0),
            (4, 1) => -2.5 * (7.0 * x * x * x - 3.0 * x) * s,
            (4, 2) => 7.5 * (7.0 * x * x - 1.0) * (1.0 - x * x),
            (4, 3) => -105.0 * x * s * s * s,
            (4, 4) => 105.0 * (1.0 - x * x) * (1.0 - x * x),
            _ => unreachable!(),
        }
    }

    #[test]
    fn assoc_matches_explicit_formulas() {
        for l in 0..=4usize {
            for m in 0..=l {
                for i in 0..=40 {
                    let x = -1.0 + 0.05 * i as f64;
                    let got = assoc_legendre(l, m, x).unwrap();
                    let want = assoc_oracle(l, m, x);
                    assert!((got - want).abs() < 1e-10, "l={} m={} x={}: {} vs {}", l, m, x, got, want);
                }
            }
        }
    }

    #[test]
    fn normalized_matches_direct_normalization() {
        fn factorial(n: usize) -> f64 {
            (1..=n).map(|k| k as f64).product()
        }
        for l in 0..=6usize {
            for m in 0..=l {
                for i in 0..=10 {
                    let x = -1.0 + 0.2 * i as f64;
                    let norm = ((2 * l + 1) as f64 / FOUR_PI * factorial(l - m) / factorial(l + m)).sqrt();
                    let want = norm * assoc_legendre(l, m, x).unwrap();
                    let got = norm_assoc_legendre(l, m, x).unwrap();
                    assert!((got - want).abs() < 1e-12, "l={} m={} x={}", l, m, x);
                }
            }
        }
    }

    #[test]
    fn y00_is_constant() {
        let want = 1.0 / FOUR_PI.sqrt();
        assert!((want - 0.2820948).abs() < 1e-6);
        for &(colat, lon) in &[(0.0, 0.0), (1.0, 2.0), (3.0, -1.5), (std::f64::consts::PI, 0.3)] {
            let y = real_sph_harm(0, 0, colat, lon).unwrap();
            assert!((y - want).abs() < 1e-12);
        }
    }

    #[test]
    fn y10_is_cos_colat_scaled() {
        let scale = (3.0 / FOUR_PI).sqrt();
        for &colat in &[0.0, 0.4, 1.2, 2.8] {
            let y = real_sph_harm(1, 0, colat, 0.7).unwrap();
            assert!((y - scale * colat.cos()).abs() < 1e-12);
        }
        assert!((real_sph_harm(1, 0, 0.0, 0.0).unwrap() - 0.4886025).abs() < 1e-6);
    }

    #[test]
    fn longitude_is_2pi_periodic() {
        for l in 0..=3usize {
            for m in -(l as i32)..=(l as i32) {
                let a = real_sph_harm(l, m, 1.1, 0.35).unwrap();
                let b = real_sph_harm(l, m, 1.1, 0.35 + 2.0 * std::f64::consts::PI).unwrap();
                assert!((a - b).abs() < 1e-12, "l={} m={}", l, m);
            }
        }
    }

    #[test]
    fn poles_are_finite() {
        for &colat in &[0.0, std::f64::consts::PI] {
            for l in 0..=5usize {
                for m in -(l as i32)..=(l as i32) {
                    let y = real_sph_harm(l, m, colat, 1.3).unwrap();
                    assert!(y.is_finite(), "l={} m={} colat={}", l, m, colat);
                }
            }
        }
    }

    #[test]
    fn orthonormal_under_sphere_quadrature() {
        // Midpoint rule on a 400 x 800 grid; Gram matrix of the 16 harmonics
        // with l <= 3 should be the identity to 1e-3 per entry.
        let l_max = 3usize;
        let cols = (l_max + 1) * (l_max + 1);
        let (n_th, n_ph) = (400usize, 800usize);
        let d_th = std::f64::consts::PI / n_th as f64;
        let d_ph = 2.0 * std::f64::consts::PI / n_ph as f64;
        let mut gram = vec![0.0f64; cols * cols];
        let mut vals = vec![0.0f64; cols];
        for it in 0..n_th {
            let colat = (it as f64 + 0.5) * d_th;
            let w = colat.sin() * d_th * d_ph;
            for ip in 0..n_ph {
                let lon = (ip as f64 + 0.5) * d_ph;
                for l in 0..=l_max {
                    for m in -(l as i32)..=(l as i32) {
                        vals[basis_column(l, m)] = real_sph_harm(l, m, colat, lon).unwrap();
                    }
                }
                for a in 0..cols {
                    for b in a..cols {
                        gram[a * cols + b] += w * vals[a] * vals[b];
                    }
                }
            }
        }
        for a in 0..cols {
            for b in a..cols {
                let want = if a == b { 1.0 } else { 0.0 };
                assert!(
                    (gram[a * cols + b] - want).abs() < 1e-3,
                    "gram[{}][{}] = {}",
                    a,
                    b,
                    gram[a * cols + b]
                );
            }
        }
    }

    fn two_stations() -> StationSet {
        StationSet::new(
            vec!["a".into(), "b".into()],
            vec![GeoCoord::new(12.0, 40.0).unwrap(), GeoCoord::new(12.0, 40.0).unwrap()],
        )
        .unwrap()
    }

    #[test]
    fn basis_shapes_and_duplicate_rows() {
        let s = two_stations();
        let b0 = build_basis(&s, 0).unwrap();
        assert_eq!(b0.values.shape(), &[2, 1]);
        for v in b0.values.data() {
            assert!((*v as f64 - 0.2820948).abs() < 1e-6);
        }
        let b3 = build_basis(&s, 3).unwrap();
        assert_eq!(b3.values.shape(), &[2, 16]);
        let d = b3.values.data();
        assert_eq!(&d[0..16], &d[16..32]);
    }

    #[test]
    fn encoder_degenerate_weights() {
        let s = two_stations();
        let basis = build_basis(&s, 2).unwrap();
        let zero = LocationEncoder::new(basis.clone(), vec![0.0; 9]).unwrap();
        assert!(zero.encode().data().iter().all(|&v| v == 0.0));
        let unit = LocationEncoder::with_unit_weights(basis.clone());
        assert_eq!(unit.encode().data(), basis.values.data());
        assert!(LocationEncoder::new(basis, vec![1.0; 4]).is_err());
    }
}
