//! Real spherical harmonics up to degree 2 for single-channel luminance.
//!
//! Basis ordering is `(l, m)` with `m = -l..=l` per band, using the same sign
//! convention as the usual splatting renderers (Condon-Shortley phase).

use nalgebra::Vector3;

pub const MAX_SH_DEGREE: u32 = 2;

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
pub const SH_C1: f64 = 0.488_602_511_902_919_9;
pub const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];

/// Number of coefficients for a given degree.
pub const fn coeff_count(degree: u32) -> usize {
    ((degree + 1) * (degree + 1)) as usize
}

/// Basis values at a unit direction; entries past `coeff_count(degree)` are zero.
pub fn basis(degree: u32, dir: &Vector3<f64>) -> [f64; 9] {
    let mut out = [0.0; 9];
    out[0] = SH_C0;
    if degree == 0 {
        return out;
    }
    let (x, y, z) = (dir.x, dir.y, dir.z);
    out[1] = -SH_C1 * y;
    out[2] = SH_C1 * z;
    out[3] = -SH_C1 * x;
    if degree == 1 {
        return out;
    }
    out[4] = SH_C2[0] * x * y;
    out[5] = SH_C2[1] * y * z;
    out[6] = SH_C2[2] * (2.0 * z * z - x * x - y * y);
    out[7] = SH_C2[3] * x * z;
    out[8] = SH_C2[4] * (x * x - y * y);
    out
}

/// Partial derivatives of each basis function with respect to the direction
/// components (treated as independent variables).
pub fn basis_grad(degree: u32, dir: &Vector3<f64>) -> [Vector3<f64>; 9] {
    let mut out = [Vector3::zeros(); 9];
    if degree == 0 {
        return out;
    }
    let (x, y, z) = (dir.x, dir.y, dir.z);
    out[1] = Vector3::new(0.0, -SH_C1, 0.0);
    out[2] = Vector3::new(0.0, 0.0, SH_C1);
    out[3] = Vector3::new(-SH_C1, 0.0, 0.0);
    if degree == 1 {
        return out;
    }
    out[4] = SH_C2[0] * Vector3::new(y, x, 0.0);
    out[5] = SH_C2[1] * Vector3::new(0.0, z, y);
    out[6] = SH_C2[2] * Vector3::new(-2.0 * x, -2.0 * y, 4.0 * z);
    out[7] = SH_C2[3] * Vector3::new(z, 0.0, x);
    out[8] = SH_C2[4] * Vector3::new(2.0 * x, -2.0 * y, 0.0);
    out
}

/// Unclamped SH expansion `sum_k coeffs[k] * Y_k(dir)`.
pub fn evaluate(degree: u32, coeffs: &[f64], dir: &Vector3<f64>) -> f64 {
    let b = basis(degree, dir);
    coeffs
        .iter()
        .zip(b.iter())
        .take(coeff_count(degree))
        .map(|(c, y)| c * y)
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coefficient_counts() {
        assert_eq!(coeff_count(0), 1);
        assert_eq!(coeff_count(1), 4);
        assert_eq!(coeff_count(2), 9);
    }

    #[test]
    fn basis_grad_matches_finite_differences() {
        let dir = Vector3::new(0.3, -0.5, 0.81);
        let g = basis_grad(2, &dir);
        let h = 1e-6;
        for axis in 0..3 {
            let mut p = dir;
            let mut m = dir;
            p[axis] += h;
            m[axis] -= h;
            let bp = basis(2, &p);
            let bm = basis(2, &m);
            for k in 0..9 {
                let fd = (bp[k] - bm[k]) / (2.0 * h);
                assert!((fd - g[k][axis]).abs() < 1e-8, "k={k} axis={axis}");
            }
        }
    }
}
