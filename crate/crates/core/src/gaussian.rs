//! Anisotropic emissive Gaussians.
//!
//! Scales are stored as logarithms and opacity as a logit so that any
//! unconstrained parameter step yields a valid Gaussian. The covariance is
//! always built from the factored form `R S Sᵀ Rᵀ`.

use nalgebra::{Matrix3, Vector3, Vector4};

use crate::error::{Error, Result};
use crate::sh;

#[derive(Clone, Debug, PartialEq)]
pub struct Gaussian3D {
    pub position: Vector3<f64>,
    /// Natural log of the per-axis standard deviations.
    pub log_scale: Vector3<f64>,
    /// Rotation quaternion stored as `(w, x, y, z)`.
    pub rotation: Vector4<f64>,
    pub opacity_logit: f64,
    pub sh_coeffs: Vec<f64>,
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Rotation matrix of a quaternion `(w, x, y, z)`; the quaternion is
/// normalized first.
pub fn quat_to_rotation(q: &Vector4<f64>) -> Matrix3<f64> {
    let q = q / q.norm();
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Back-propagates `dL/dR` through [`quat_to_rotation`], including the
/// normalization of `q`.
pub(crate) fn quat_to_rotation_vjp(q: &Vector4<f64>, d_rot: &Matrix3<f64>) -> Vector4<f64> {
    let norm = q.norm();
    let qn = q / norm;
    let (w, x, y, z) = (qn[0], qn[1], qn[2], qn[3]);
    let g = d_rot;
    let dw = 2.0
        * (z * (g[(1, 0)] - g[(0, 1)]) + y * (g[(0, 2)] - g[(2, 0)]) + x * (g[(2, 1)] - g[(1, 2)]));
    let dx = 2.0
        * (y * (g[(0, 1)] + g[(1, 0)]) + z * (g[(0, 2)] + g[(2, 0)]) + w * (g[(2, 1)] - g[(1, 2)])
            - 2.0 * x * (g[(1, 1)] + g[(2, 2)]));
    let dy = 2.0
        * (x * (g[(0, 1)] + g[(1, 0)]) + z * (g[(1, 2)] + g[(2, 1)]) + w * (g[(0, 2)] - g[(2, 0)])
            - 2.0 * y * (g[(0, 0)] + g[(2, 2)]));
    let dz = 2.0
        * (x * (g[(0, 2)] + g[(2, 0)]) + y * (g[(1, 2)] + g[(2, 1)]) + w * (g[(1, 0)] - g[(0, 1)])
            - 2.0 * z * (g[(0, 0)] + g[(1, 1)]));
    let d_qn = Vector4::new(dw, dx, dy, dz);
    (d_qn - qn * qn.dot(&d_qn)) / norm
}

/// `Σ = R S Sᵀ Rᵀ` with `S = diag(exp(log_scale))`.
pub fn build_covariance(log_scale: &Vector3<f64>, q: &Vector4<f64>) -> Result<Matrix3<f64>> {
    if !log_scale.iter().all(|v| v.is_finite()) || !q.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidParameter(
            "covariance inputs must be finite".into(),
        ));
    }
    let scales = log_scale.map(f64::exp);
    if !scales.iter().all(|s| s.is_finite() && *s > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "scales out of range: {scales:?}"
        )));
    }
    let n = q.norm();
    if !(n > 0.0) {
        return Err(Error::InvalidParameter("zero quaternion".into()));
    }
    Ok(covariance_unchecked(&scales, q))
}

pub(crate) fn covariance_unchecked(scales: &Vector3<f64>, q: &Vector4<f64>) -> Matrix3<f64> {
    let r = quat_to_rotation(q);
    let rs = r * Matrix3::from_diagonal(scales);
    rs * rs.transpose()
}

impl Gaussian3D {
    /// Isotropic, axis-aligned Gaussian with the given luminance at degree
    /// `sh_degree` (higher-order coefficients zero).
    pub fn isotropic(
        position: Vector3<f64>,
        scale: f64,
        opacity: f64,
        luminance: f64,
        sh_degree: u32,
    ) -> Self {
        let mut sh_coeffs = vec![0.0; sh::coeff_count(sh_degree)];
        sh_coeffs[0] = luminance / sh::SH_C0;
        Self {
            position,
            log_scale: Vector3::repeat(scale.ln()),
            rotation: Vector4::new(1.0, 0.0, 0.0, 0.0),
            opacity_logit: logit(opacity),
            sh_coeffs,
        }
    }

    pub fn scales(&self) -> Vector3<f64> {
        self.log_scale.map(f64::exp)
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        quat_to_rotation(&self.rotation)
    }

    pub fn covariance(&self) -> Result<Matrix3<f64>> {
        build_covariance(&self.log_scale, &self.rotation)
    }

    /// Unnormalized density `exp(-½ (x-μ)ᵀ Σ⁻¹ (x-μ))`.
    pub fn eval_density(&self, x: &Vector3<f64>) -> f64 {
        (-0.5 * self.mahalanobis_sq(x)).exp()
    }

    /// Squared Mahalanobis distance, evaluated in the Gaussian's principal frame.
    pub fn mahalanobis_sq(&self, x: &Vector3<f64>) -> f64 {
        let local = self.rotation_matrix().transpose() * (x - self.position);
        let s = self.scales();
        (local.x / s.x).powi(2) + (local.y / s.y).powi(2) + (local.z / s.z).powi(2)
    }

    /// View-dependent luminance, clamped at zero.
    pub fn eval_luminance(&self, sh_degree: u32, view_dir: &Vector3<f64>) -> f64 {
        sh::evaluate(sh_degree, &self.sh_coeffs, view_dir).max(0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().all(|v| v.is_finite())
            && self.log_scale.iter().all(|v| v.is_finite())
            && self.rotation.iter().all(|v| v.is_finite())
            && self.opacity_logit.is_finite()
            && self.sh_coeffs.iter().all(|v| v.is_finite())
    }

    pub fn normalize_rotation(&mut self) {
        let n = self.rotation.norm();
        if n > 0.0 {
            self.rotation /= n;
        } else {
            self.rotation = Vector4::new(1.0, 0.0, 0.0, 0.0);
        }
    }
}

/// Stored parameters per Gaussian: position (3), log-scale (3), quaternion
/// (4), opacity logit (1) and the SH coefficients.
pub const fn params_per_gaussian(sh_degree: u32) -> usize {
    11 + sh::coeff_count(sh_degree)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSet {
    pub gaussians: Vec<Gaussian3D>,
    pub sh_degree: u32,
}

impl GaussianSet {
    pub fn new(gaussians: Vec<Gaussian3D>, sh_degree: u32) -> Result<Self> {
        let set = Self {
            gaussians,
            sh_degree,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn empty(sh_degree: u32) -> Self {
        Self {
            gaussians: Vec::new(),
            sh_degree,
        }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn param_count(&self) -> usize {
        self.len() * params_per_gaussian(self.sh_degree)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sh_degree > sh::MAX_SH_DEGREE {
            return Err(Error::InvalidParameter(format!(
                "sh degree {} exceeds the supported maximum {}",
                self.sh_degree,
                sh::MAX_SH_DEGREE
            )));
        }
        let expected = sh::coeff_count(self.sh_degree);
        for (i, g) in self.gaussians.iter().enumerate() {
            if g.sh_coeffs.len() != expected {
                return Err(Error::InvalidParameter(format!(
                    "gaussian {i} has {} SH coefficients, expected {expected}",
                    g.sh_coeffs.len()
                )));
            }
            if !g.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "gaussian {i} has non-finite parameters"
                )));
            }
            if g.rotation.norm() == 0.0 {
                return Err(Error::InvalidParameter(format!(
                    "gaussian {i} has a zero quaternion"
                )));
            }
        }
        Ok(())
    }

    pub fn normalize_rotations(&mut self) {
        for g in &mut self.gaussians {
            g.normalize_rotation();
        }
    }
}
