//! Pinhole cameras, pose corrections and the local affine projection of
//! Gaussians.
//!
//! Pixel coordinates are continuous: pixel `(i, j)` covers `[i, i+1) x [j, j+1)`
//! and its center is at `(i + 0.5, j + 0.5)`.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Rotation3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

/// Points closer than this to the image plane (camera-frame z) are culled.
pub const Z_NEAR: f64 = 0.01;

/// Screen-space variance added to both diagonal entries of a projected
/// covariance, in px².
pub const COV2D_FLOOR: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.width > 0
            && self.height > 0
            && self.cx > 0.0
            && self.cx < self.width as f64
            && self.cy > 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!(
                "invalid intrinsics {self:?}"
            )))
        }
    }
}

/// World-to-camera rigid transform: `x_cam = rotation * x_world + translation`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ortho = (self.rotation.transpose() * self.rotation - Matrix3::identity()).amax();
        let det = self.rotation.determinant();
        if ortho < 1e-6 && (det - 1.0).abs() < 1e-6 && self.translation.iter().all(|v| v.is_finite())
        {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!(
                "pose rotation is not a proper rotation (orthogonality error {ortho:.3e}, det {det})"
            )))
        }
    }

    /// Optical center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Camera looking from `eye` towards `target`, with image `y` pointing
    /// along `-up` (so world up appears at the top of the image).
    pub fn look_at(eye: &Vector3<f64>, target: &Vector3<f64>, up: &Vector3<f64>) -> Self {
        let z = (target - eye).normalize();
        let x = z.cross(up).normalize();
        let y = z.cross(&x);
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        Self {
            rotation,
            translation: -(rotation * eye),
        }
    }
}

/// Optimizable correction applied on top of the calibrated pose.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PoseDelta {
    /// Axis-angle vector of `ΔR`.
    pub delta_rot: Vector3<f64>,
    pub delta_t: Vector3<f64>,
}

impl PoseDelta {
    pub fn is_zero(&self) -> bool {
        self.delta_rot == Vector3::zeros() && self.delta_t == Vector3::zeros()
    }
}

/// Rotation matrix of an axis-angle vector.
pub fn so3_exp(omega: &Vector3<f64>) -> Matrix3<f64> {
    Rotation3::new(*omega).into_inner()
}

#[inline]
pub(crate) fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Right Jacobian of SO(3): `Exp(ω + δ) ≈ Exp(ω) Exp(J_r(ω) δ)`.
pub fn so3_right_jacobian(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = omega.norm_squared();
    let k = skew(omega);
    if theta2 < 1e-10 {
        return Matrix3::identity() - 0.5 * k + (1.0 / 6.0) * k * k;
    }
    let theta = theta2.sqrt();
    let a = (1.0 - theta.cos()) / theta2;
    let b = (theta - theta.sin()) / (theta2 * theta);
    Matrix3::identity() - a * k + b * k * k
}

/// `R' = R ΔR`, `T' = T + ΔT`.
pub fn apply_pose_delta(pose: &Pose, delta: &PoseDelta) -> Pose {
    if delta.is_zero() {
        return *pose;
    }
    Pose {
        rotation: pose.rotation * so3_exp(&delta.delta_rot),
        translation: pose.translation + delta.delta_t,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
}

impl Ray {
    pub fn new(origin: Vector3<f64>, direction: Vector3<f64>) -> Self {
        Self {
            origin,
            direction: direction.normalize(),
        }
    }

    pub fn at(&self, t: f64) -> Vector3<f64> {
        self.origin + self.direction * t
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CameraView {
    pub id: String,
    pub intrinsics: Intrinsics,
    pub pose: Pose,
    pub pose_delta: PoseDelta,
    pub image: Image,
}

impl CameraView {
    pub fn new(id: impl Into<String>, intrinsics: Intrinsics, pose: Pose, image: Image) -> Result<Self> {
        intrinsics.validate()?;
        pose.validate()?;
        if image.width() != intrinsics.width || image.height() != intrinsics.height {
            return Err(Error::InvalidArgument(format!(
                "image is {}x{} but intrinsics say {}x{}",
                image.width(),
                image.height(),
                intrinsics.width,
                intrinsics.height
            )));
        }
        Ok(Self {
            id: id.into(),
            intrinsics,
            pose,
            pose_delta: PoseDelta::default(),
            image,
        })
    }

    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height
    }

    /// Calibrated pose with the current delta composed in.
    pub fn effective_pose(&self) -> Pose {
        apply_pose_delta(&self.pose, &self.pose_delta)
    }

    pub fn center(&self) -> Vector3<f64> {
        self.effective_pose().center()
    }
}

/// Projects a world point; `None` when it lies at or in front of the near plane.
pub fn project_point(mu: &Vector3<f64>, view: &CameraView) -> Option<(Vector2<f64>, f64)> {
    let p = view.effective_pose().transform(mu);
    project_camera_point(&p, &view.intrinsics)
}

/// Pinhole projection of a camera-frame point.
pub fn project_camera_point(p: &Vector3<f64>, intr: &Intrinsics) -> Option<(Vector2<f64>, f64)> {
    if p.z <= Z_NEAR {
        return None;
    }
    Some((
        Vector2::new(intr.fx * p.x / p.z + intr.cx, intr.fy * p.y / p.z + intr.cy),
        p.z,
    ))
}

/// Jacobian of the pinhole map at a camera-frame point.
pub fn projection_jacobian(mu_cam: &Vector3<f64>, intr: &Intrinsics) -> Option<Matrix2x3<f64>> {
    let (x, y, z) = (mu_cam.x, mu_cam.y, mu_cam.z);
    if z <= Z_NEAR {
        return None;
    }
    let iz = 1.0 / z;
    Some(Matrix2x3::new(
        intr.fx * iz,
        0.0,
        -intr.fx * x * iz * iz,
        0.0,
        intr.fy * iz,
        -intr.fy * y * iz * iz,
    ))
}

/// `Σ' = J W Σ Wᵀ Jᵀ` (without the screen-space floor), with `W` the
/// rotation block of the effective pose.
pub fn project_covariance_raw(
    cov: &Matrix3<f64>,
    rotation: &Matrix3<f64>,
    mu_cam: &Vector3<f64>,
    intr: &Intrinsics,
) -> Option<Matrix2<f64>> {
    let j = projection_jacobian(mu_cam, intr)?;
    let t = j * rotation;
    Some(t * cov * t.transpose())
}

/// Projected covariance including the screen-space floor.
pub fn project_covariance(
    cov: &Matrix3<f64>,
    view: &CameraView,
    mu_cam: &Vector3<f64>,
) -> Option<Matrix2<f64>> {
    let pose = view.effective_pose();
    let raw = project_covariance_raw(cov, &pose.rotation, mu_cam, &view.intrinsics)?;
    Some(raw + Matrix2::identity() * COV2D_FLOOR)
}

/// A calibrated camera without an image.
#[derive(Clone, Debug, PartialEq)]
pub struct RigCamera {
    pub id: String,
    pub intrinsics: Intrinsics,
    pub pose: Pose,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct CameraRig {
    pub cameras: Vec<RigCamera>,
}

impl CameraRig {
    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for c in &self.cameras {
            c.intrinsics.validate()?;
            c.pose.validate()?;
            if !seen.insert(c.id.as_str()) {
                return Err(Error::InvalidParameter(format!("duplicate camera id {}", c.id)));
            }
        }
        Ok(())
    }

    /// Pairs each camera with its image.
    pub fn views(&self, images: &[Image]) -> Result<Vec<CameraView>> {
        if images.len() != self.cameras.len() {
            return Err(Error::InvalidArgument(format!(
                "{} images for {} cameras",
                images.len(),
                self.cameras.len()
            )));
        }
        self.cameras
            .iter()
            .zip(images)
            .map(|(c, im)| CameraView::new(c.id.clone(), c.intrinsics, c.pose, im.clone()))
            .collect()
    }
}

impl From<&CameraView> for RigCamera {
    fn from(v: &CameraView) -> Self {
        Self {
            id: v.id.clone(),
            intrinsics: v.intrinsics,
            pose: v.pose,
        }
    }
}

/// Back-projects a continuous pixel coordinate into a world-space ray.
pub fn pixel_ray(view: &CameraView, pixel: &Vector2<f64>) -> Result<Ray> {
    let intr = &view.intrinsics;
    if !(pixel.x >= 0.0
        && pixel.y >= 0.0
        && pixel.x <= intr.width as f64
        && pixel.y <= intr.height as f64)
    {
        return Err(Error::InvalidArgument(format!(
            "pixel ({}, {}) outside {}x{} image",
            pixel.x, pixel.y, intr.width, intr.height
        )));
    }
    Ok(pixel_ray_unchecked(&view.effective_pose(), intr, pixel))
}

pub(crate) fn pixel_ray_unchecked(pose: &Pose, intr: &Intrinsics, pixel: &Vector2<f64>) -> Ray {
    let local = Vector3::new(
        (pixel.x - intr.cx) / intr.fx,
        (pixel.y - intr.cy) / intr.fy,
        1.0,
    );
    Ray::new(pose.center(), pose.rotation.transpose() * local)
}

/// Center of pixel `(i, j)`.
#[inline]
pub fn pixel_center(i: usize, j: usize) -> Vector2<f64> {
    Vector2::new(i as f64 + 0.5, j as f64 + 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::{Matrix4, Vector4};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn intr() -> Intrinsics {
        Intrinsics {
            fx: 500.0,
            fy: 500.0,
            cx: 400.0,
            cy: 512.0,
            width: 800,
            height: 1024,
        }
    }

    fn view_with(pose: Pose, intrinsics: Intrinsics) -> CameraView {
        CameraView::new(
            "cam",
            intrinsics,
            pose,
            Image::zeros(intrinsics.width, intrinsics.height),
        )
        .unwrap()
    }

    fn random_pose(rng: &mut impl Rng) -> Pose {
        let omega = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        Pose {
            rotation: so3_exp(&omega),
            translation: Vector3::new(
                rng.random_range(-0.2..0.2),
                rng.random_range(-0.2..0.2),
                rng.random_range(2.0..3.0),
            ),
        }
    }

    // Rodrigues' formula written out, independent of nalgebra's Rotation3.
    fn rodrigues(omega: &Vector3<f64>) -> Matrix3<f64> {
        let theta = omega.norm();
        if theta == 0.0 {
            return Matrix3::identity();
        }
        let k = skew(&(omega / theta));
        Matrix3::identity() + theta.sin() * k + (1.0 - theta.cos()) * k * k
    }

    fn homogeneous(rotation: &Matrix3<f64>, t: &Vector3<f64>) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(t);
        m
    }

    fn homogeneous_project(
        world: &Vector3<f64>,
        rt: &Matrix4<f64>,
        intr: &Intrinsics,
    ) -> Vector2<f64> {
        let k = nalgebra::Matrix3x4::new(
            intr.fx, 0.0, intr.cx, 0.0, 0.0, intr.fy, intr.cy, 0.0, 0.0, 0.0, 1.0, 0.0,
        );
        let h = k * rt * Vector4::new(world.x, world.y, world.z, 1.0);
        Vector2::new(h.x / h.z, h.y / h.z)
    }

    #[test]
    fn zero_delta_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pose = random_pose(&mut rng);
        assert_eq!(apply_pose_delta(&pose, &PoseDelta::default()), pose);
    }

    #[test]
    fn quarter_turn_delta_about_z() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pose = random_pose(&mut rng);
        let delta = PoseDelta {
            delta_rot: Vector3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2),
            delta_t: Vector3::zeros(),
        };
        let rz = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        let out = apply_pose_delta(&pose, &delta);
        assert_relative_eq!(out.rotation, pose.rotation * rz, epsilon = 1e-12);
        assert_eq!(out.translation, pose.translation);
        out.validate().unwrap();
    }

    #[test]
    fn delta_projection_matches_homogeneous_pipeline() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let pose = random_pose(&mut rng);
            let delta = PoseDelta {
                delta_rot: Vector3::new(
                    rng.random_range(-0.05..0.05),
                    rng.random_range(-0.05..0.05),
                    rng.random_range(-0.05..0.05),
                ),
                delta_t: Vector3::new(
                    rng.random_range(-0.05..0.05),
                    rng.random_range(-0.05..0.05),
                    rng.random_range(-0.05..0.05),
                ),
            };
            let mut view = view_with(pose, intr());
            view.pose_delta = delta;
            let world = Vector3::new(
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.3..0.3),
            );
            // [R | T + ΔT] composed as (translate ΔT) * [R | T] * [ΔR | 0]
            let composed = homogeneous(&Matrix3::identity(), &delta.delta_t)
                * homogeneous(&pose.rotation, &pose.translation)
                * homogeneous(&rodrigues(&delta.delta_rot), &Vector3::zeros());
            let expected = homogeneous_project(&world, &composed, &view.intrinsics);
            let (got, _) = project_point(&world, &view).unwrap();
            assert_relative_eq!(got, expected, max_relative = 1e-9);
        }
    }

    #[test]
    fn delta_inverse_at_zero_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pose = random_pose(&mut rng);
        let delta = PoseDelta {
            delta_rot: Vector3::zeros(),
            delta_t: Vector3::new(0.1, -0.2, 0.3),
        };
        let there = apply_pose_delta(&pose, &delta);
        let back = apply_pose_delta(
            &there,
            &PoseDelta {
                delta_rot: Vector3::zeros(),
                delta_t: -delta.delta_t,
            },
        );
        assert_relative_eq!(back.rotation, pose.rotation, epsilon = 1e-9);
        assert_relative_eq!(back.translation, pose.translation, epsilon = 1e-9);

        let rot_only = PoseDelta {
            delta_rot: Vector3::new(0.1, 0.2, -0.1),
            delta_t: Vector3::zeros(),
        };
        let undo = PoseDelta {
            delta_rot: -rot_only.delta_rot,
            delta_t: Vector3::zeros(),
        };
        let round = apply_pose_delta(&apply_pose_delta(&pose, &rot_only), &undo);
        assert_relative_eq!(round.rotation, pose.rotation, epsilon = 1e-9);
    }

    #[test]
    fn principal_point_and_similar_triangles() {
        let view = view_with(
            Pose {
                rotation: Matrix3::identity(),
                translation: Vector3::zeros(),
            },
            intr(),
        );
        let (p, depth) = project_point(&Vector3::new(0.0, 0.0, 2.0), &view).unwrap();
        assert_eq!(p, Vector2::new(400.0, 512.0));
        assert_eq!(depth, 2.0);
        let (p, _) = project_point(&Vector3::new(0.1, 0.0, 1.0), &view).unwrap();
        assert_relative_eq!(p.x, 450.0, epsilon = 1e-12);
        assert!(project_point(&Vector3::new(0.0, 0.0, -1.0), &view).is_none());
        assert!(project_point(&Vector3::new(0.0, 0.0, 0.005), &view).is_none());
    }

    #[test]
    fn projection_matches_homogeneous_for_random_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pose = random_pose(&mut rng);
        let view = view_with(pose, intr());
        let rt = homogeneous(&pose.rotation, &pose.translation);
        for _ in 0..100 {
            let w = Vector3::new(
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
            );
            let (p, _) = project_point(&w, &view).unwrap();
            assert_relative_eq!(p, homogeneous_project(&w, &rt, &view.intrinsics), max_relative = 1e-9);
        }
    }

    #[test]
    fn jacobian_structure() {
        let i = intr();
        let j = projection_jacobian(&Vector3::new(0.0, 0.0, 2.0), &i).unwrap();
        assert_eq!(j, Matrix2x3::new(250.0, 0.0, 0.0, 0.0, 250.0, 0.0));
        let j4 = projection_jacobian(&Vector3::new(0.0, 0.0, 4.0), &i).unwrap();
        assert_eq!(j4[(0, 0)], j[(0, 0)] / 2.0);
        assert_eq!(j4[(1, 1)], j[(1, 1)] / 2.0);
        assert!(projection_jacobian(&Vector3::new(0.0, 0.0, 0.0), &i).is_none());
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let i = intr();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let h = 1e-5;
        for _ in 0..50 {
            let p = Vector3::new(
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                rng.random_range(0.5..3.0),
            );
            let j = projection_jacobian(&p, &i).unwrap();
            for axis in 0..3 {
                let mut a = p;
                let mut b = p;
                a[axis] += h;
                b[axis] -= h;
                let fd = (project_camera_point(&a, &i).unwrap().0
                    - project_camera_point(&b, &i).unwrap().0)
                    / (2.0 * h);
                for row in 0..2 {
                    let e = j[(row, axis)];
                    let tol = 1e-5 * e.abs().max(1e-3);
                    assert!((fd[row] - e).abs() <= tol, "{} vs {}", fd[row], e);
                }
            }
        }
    }

    #[test]
    fn isotropic_on_axis_covariance() {
        let i = intr();
        let view = view_with(Pose::identity(), i);
        let s = 0.05;
        let z = 2.5;
        let cov = Matrix3::identity() * s * s;
        let out = project_covariance(&cov, &view, &Vector3::new(0.0, 0.0, z)).unwrap();
        let expect = (i.fx * s / z).powi(2) + COV2D_FLOOR;
        assert_relative_eq!(out, Matrix2::new(expect, 0.0, 0.0, expect), epsilon = 1e-9);
    }

    #[test]
    fn covariance_rotates_with_camera_roll() {
        let i = intr();
        let cov = Matrix3::new(0.004, 0.001, 0.0, 0.001, 0.001, 0.0002, 0.0, 0.0002, 0.002);
        let mu = Vector3::new(0.0, 0.0, 2.0);
        let theta = 0.7;
        let base = view_with(Pose::identity(), i);
        let rolled = view_with(
            Pose {
                rotation: so3_exp(&Vector3::new(0.0, 0.0, theta)),
                translation: Vector3::zeros(),
            },
            i,
        );
        let a = project_covariance(&cov, &base, &mu).unwrap() - Matrix2::identity() * COV2D_FLOOR;
        let b = project_covariance(&cov, &rolled, &mu).unwrap() - Matrix2::identity() * COV2D_FLOOR;
        let r2 = Matrix2::new(theta.cos(), -theta.sin(), theta.sin(), theta.cos());
        assert_relative_eq!(b, r2 * a * r2.transpose(), epsilon = 1e-9);
    }

    #[test]
    fn monte_carlo_projection_matches_affine_covariance() {
        let i = intr();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pose = random_pose(&mut rng);
        let view = view_with(pose, i);
        let mu = pose.rotation.transpose() * (Vector3::new(0.05, -0.03, 2.5) - pose.translation);
        let cov = crate::gaussian::build_covariance(
            &Vector3::new(0.02f64.ln(), 0.035f64.ln(), 0.015f64.ln()),
            &Vector4::new(0.9, 0.3, -0.2, 0.1),
        )
        .unwrap();
        let mu_cam = pose.transform(&mu);
        let expected = project_covariance_raw(&cov, &pose.rotation, &mu_cam, &i).unwrap();
        let chol = cov.cholesky().unwrap().l();
        let n = 100_000;
        let mut samples = Vec::with_capacity(n);
        for _ in 0..n {
            let e = Vector3::new(
                StandardNormal.sample(&mut rng),
                StandardNormal.sample(&mut rng),
                StandardNormal.sample(&mut rng),
            );
            samples.push(project_point(&(mu + chol * e), &view).unwrap().0);
        }
        let mean = samples.iter().fold(Vector2::zeros(), |a, s| a + s) / n as f64;
        let sample_cov = samples
            .iter()
            .fold(Matrix2::zeros(), |a, s| a + (s - mean) * (s - mean).transpose())
            / (n - 1) as f64;
        let rel = (sample_cov - expected).norm() / expected.norm();
        assert!(rel < 0.05, "relative error {rel}");
    }

    #[test]
    fn principal_ray_and_round_trip() {
        let view = view_with(Pose::identity(), intr());
        let r = pixel_ray(&view, &Vector2::new(400.0, 512.0)).unwrap();
        assert_relative_eq!(r.direction, Vector3::z(), epsilon = 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut view = view_with(random_pose(&mut rng), intr());
        view.pose_delta.delta_rot = Vector3::new(0.01, -0.02, 0.03);
        for px in [Vector2::new(12.5, 40.0), Vector2::new(700.0, 1000.0)] {
            let ray = pixel_ray(&view, &px).unwrap();
            assert!((ray.direction.norm() - 1.0).abs() < 1e-9);
            for t in [0.5, 1.0, 2.0] {
                let (back, _) = project_point(&ray.at(t), &view).unwrap();
                assert!((back - px).norm() < 1e-6);
            }
        }
        let a = pixel_ray(&view, &Vector2::new(10.0, 10.0)).unwrap();
        let b = pixel_ray(&view, &Vector2::new(11.0, 10.0)).unwrap();
        assert!(a.direction.cross(&b.direction).norm() > 1e-6);
    }

    #[test]
    fn out_of_bounds_pixel_rejected() {
        let view = view_with(Pose::identity(), intr());
        assert!(pixel_ray(&view, &Vector2::new(-1.0, 3.0)).is_err());
        assert!(pixel_ray(&view, &Vector2::new(3.0, 2000.0)).is_err());
    }

    #[test]
    fn right_jacobian_matches_finite_differences() {
        let omega = Vector3::new(0.3, -0.5, 0.2);
        let jr = so3_right_jacobian(&omega);
        let base_inv = so3_exp(&omega).transpose();
        let h = 1e-6;
        for k in 0..3 {
            let mut d = Vector3::zeros();
            d[k] = h;
            let plus = base_inv * so3_exp(&(omega + d));
            let minus = base_inv * so3_exp(&(omega - d));
            // log of a near-identity rotation ≈ vee((R - Rᵀ)/2)
            let vee = |m: Matrix3<f64>| {
                let a = (m - m.transpose()) * 0.5;
                Vector3::new(a[(2, 1)], a[(0, 2)], a[(1, 0)])
            };
            let fd = (vee(plus) - vee(minus)) / (2.0 * h);
            assert_relative_eq!(fd, jr.column(k).into_owned(), epsilon = 1e-7);
        }
    }

    #[test]
    fn look_at_centers_target() {
        let eye = Vector3::new(1.0, 0.3, -0.5);
        let pose = Pose::look_at(&eye, &Vector3::zeros(), &Vector3::y());
        pose.validate().unwrap();
        let view = view_with(pose, intr());
        let (p, d) = project_point(&Vector3::zeros(), &view).unwrap();
        assert_relative_eq!(p, Vector2::new(400.0, 512.0), epsilon = 1e-9);
        assert_relative_eq!(d, eye.norm(), epsilon = 1e-12);
        assert_relative_eq!(pose.center(), eye, epsilon = 1e-12);
        // world up projects above the principal point
        let (up, _) = project_point(&Vector3::new(0.0, 0.1, 0.0), &view).unwrap();
        assert!(up.y < 512.0);
    }

    #[test]
    fn round_trip_over_lattice() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let view = view_with(random_pose(&mut rng), intr());
        for a in 0..16 {
            for b in 0..16 {
                let px = Vector2::new(
                    (a as f64 + 0.5) * 800.0 / 16.0,
                    (b as f64 + 0.5) * 1024.0 / 16.0,
                );
                let ray = pixel_ray(&view, &px).unwrap();
                let (back, _) = project_point(&ray.at(1.5), &view).unwrap();
                assert!((back - px).norm() < 1e-6);
            }
        }
    }
}
