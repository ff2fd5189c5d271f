//! Synthetic flames: a normalized Gaussian mixture, a camera ring around it,
//! and ground-truth images by dense numerical integration along pixel rays.
//!
//! The ground truth is computed independently of the splatting renderer, so
//! reconstructions are never checked against their own forward model.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Rotation3, Unit, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{pixel_center, pixel_ray_unchecked, CameraRig, CameraView, Intrinsics, Pose, RigCamera};
use crate::error::{Error, Result};
use crate::image::Image;

/// Brightest pixel of a rendered dataset after normalization.
pub const DATASET_PEAK: f64 = 0.9;

/// Mixture components contribute nothing (below 1e-7 of their peak) beyond
/// this many standard deviations.
const SUPPORT_SIGMAS: f64 = 6.0;

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomComponent {
    pub weight: f64,
    pub mean: Vector3<f64>,
    pub covariance: Matrix3<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub components: Vec<PhantomComponent>,
    pub seed: Option<u64>,
    // precision matrix and normalization per component
    cache: Vec<(Matrix3<f64>, f64)>,
}

impl PhantomSpec {
    pub fn new(components: Vec<PhantomComponent>, seed: Option<u64>) -> Result<Self> {
        let mut cache = Vec::with_capacity(components.len());
        for (i, c) in components.iter().enumerate() {
            if !(c.weight >= 0.0) || !c.weight.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "component {i} has weight {}",
                    c.weight
                )));
            }
            let sym = (c.covariance - c.covariance.transpose()).abs().max();
            let chol = c.covariance.cholesky();
            if sym > 1e-12 * c.covariance.abs().max() || chol.is_none() || !c.mean.iter().all(|v| v.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "component {i} covariance is not symmetric positive definite"
                )));
            }
            let det = c.covariance.determinant();
            let precision = chol.unwrap().inverse();
            cache.push((precision, 1.0 / ((2.0 * PI).powi(3) * det).sqrt()));
        }
        Ok(Self {
            components,
            seed,
            cache,
        })
    }

    /// Same mixture rotated about the origin.
    pub fn rotated(&self, r: &Matrix3<f64>) -> Result<Self> {
        let components = self
            .components
            .iter()
            .map(|c| PhantomComponent {
                weight: c.weight,
                mean: r * c.mean,
                covariance: {
                    let m = r * c.covariance * r.transpose();
                    (m + m.transpose()) * 0.5
                },
            })
            .collect();
        Self::new(components, self.seed)
    }

    /// Sphere outside of which the mixture is negligible, or `None` for an
    /// empty mixture. A sphere keeps ray chords rotation equivariant.
    pub fn support_sphere(&self) -> Option<(Vector3<f64>, f64)> {
        if self.components.is_empty() {
            return None;
        }
        let center = self.components.iter().map(|c| c.mean).sum::<Vector3<f64>>()
            / self.components.len() as f64;
        let radius = self
            .components
            .iter()
            .map(|c| {
                let lmax = c.covariance.symmetric_eigenvalues().max();
                (c.mean - center).norm() + SUPPORT_SIGMAS * lmax.sqrt()
            })
            .fold(0.0, f64::max);
        Some((center, radius))
    }
}

/// Mixture density at `x`.
pub fn eval_phantom(spec: &PhantomSpec, x: &Vector3<f64>) -> f64 {
    spec.components
        .iter()
        .zip(&spec.cache)
        .map(|(c, (p, norm))| {
            let d = x - c.mean;
            c.weight * norm * (-0.5 * d.dot(&(p * d))).exp()
        })
        .sum()
}

/// Procedural phantom parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomConfig {
    pub components: usize,
    pub seed: u64,
    /// Component means are drawn uniformly inside a ball of this radius.
    pub mean_radius: f64,
    pub std_min: f64,
    pub std_max: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            components: 5,
            seed: 7,
            mean_radius: 0.1,
            std_min: 0.025,
            std_max: 0.05,
        }
    }
}

/// Random anisotropic mixture centered on the origin.
pub fn generate(config: &PhantomConfig) -> Result<PhantomSpec> {
    if config.components == 0 {
        return Err(Error::InvalidParameter("phantom needs at least one component".into()));
    }
    if !(config.std_min > 0.0 && config.std_max >= config.std_min && config.mean_radius >= 0.0) {
        return Err(Error::InvalidParameter(format!("bad phantom config {config:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut components = Vec::with_capacity(config.components);
    for _ in 0..config.components {
        let mean = loop {
            let p = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            if p.norm_squared() <= 1.0 {
                break p * config.mean_radius;
            }
        };
        let axis = loop {
            let a = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            if a.norm() > 1e-3 {
                break Unit::new_normalize(a);
            }
        };
        let r = Rotation3::from_axis_angle(&axis, rng.random_range(0.0..PI)).into_inner();
        let s = Vector3::from_fn(|_, _| rng.random_range(config.std_min..=config.std_max));
        let cov = r * Matrix3::from_diagonal(&s.component_mul(&s)) * r.transpose();
        components.push(PhantomComponent {
            weight: rng.random_range(0.5..1.5),
            mean,
            covariance: (cov + cov.transpose()) * 0.5,
        });
    }
    PhantomSpec::new(components, Some(config.seed))
}

/// `n` cameras evenly spaced on a horizontal circle, all looking at
/// `target` with world `+y` up and the principal point at the image center.
pub fn make_rig(
    n: usize,
    radius: f64,
    target: &Vector3<f64>,
    width: usize,
    height: usize,
    focal: f64,
) -> Result<CameraRig> {
    if n < 2 || !(radius > 0.0) || !(focal > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "rig needs n >= 2, positive radius and focal (got {n}, {radius}, {focal})"
        )));
    }
    let intrinsics = Intrinsics {
        fx: focal,
        fy: focal,
        cx: width as f64 / 2.0,
        cy: height as f64 / 2.0,
        width,
        height,
    };
    intrinsics.validate()?;
    let up = Vector3::y();
    let cameras = (0..n)
        .map(|k| {
            let a = 2.0 * PI * k as f64 / n as f64;
            let eye = target + radius * Vector3::new(a.cos(), 0.0, a.sin());
            RigCamera {
                id: format!("cam{k}"),
                intrinsics,
                pose: Pose::look_at(&eye, target, &up),
            }
        })
        .collect();
    Ok(CameraRig { cameras })
}

/// Rig and images, plus the generating phantom for synthetic data.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub rig: CameraRig,
    pub images: Vec<Image>,
    pub phantom: Option<PhantomSpec>,
}

impl Dataset {
    pub fn views(&self) -> Result<Vec<CameraView>> {
        self.rig.views(&self.images)
    }

    pub fn len(&self) -> usize {
        self.rig.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rig.is_empty()
    }
}

/// Midpoint-rule line integral of the mixture along the ray through a
/// continuous pixel coordinate, over the chord of the support sphere.
pub fn integrate_pixel(
    spec: &PhantomSpec,
    pose: &Pose,
    intr: &Intrinsics,
    pixel: &Vector2<f64>,
    samples: usize,
) -> f64 {
    let Some((center, radius)) = spec.support_sphere() else {
        return 0.0;
    };
    let ray = pixel_ray_unchecked(pose, intr, pixel);
    let oc = ray.origin - center;
    let b = oc.dot(&ray.direction);
    let disc = b * b - (oc.norm_squared() - radius * radius);
    if disc <= 0.0 {
        return 0.0;
    }
    let h = disc.sqrt();
    let t0 = (-b - h).max(0.0);
    let t1 = -b + h;
    if t1 <= t0 {
        return 0.0;
    }
    let dt = (t1 - t0) / samples as f64;
    (0..samples)
        .map(|k| eval_phantom(spec, &ray.at(t0 + (k as f64 + 0.5) * dt)))
        .sum::<f64>()
        * dt
}

/// Unnormalized line-integral image of one camera.
pub fn integrate_view(spec: &PhantomSpec, camera: &RigCamera, samples: usize) -> Image {
    let intr = &camera.intrinsics;
    let (w, h) = (intr.width, intr.height);
    let data: Vec<f64> = (0..w * h)
        .into_par_iter()
        .map(|p| integrate_pixel(spec, &camera.pose, intr, &pixel_center(p % w, p / w), samples))
        .collect();
    Image::from_vec(w, h, data).expect("sized by construction")
}

/// Ground-truth dataset: every view integrated, then one global scale so
/// the brightest pixel equals [`DATASET_PEAK`].
pub fn render_phantom_views(spec: &PhantomSpec, rig: &CameraRig, samples_per_ray: usize) -> Result<Dataset> {
    if samples_per_ray < 64 {
        return Err(Error::InvalidParameter(format!(
            "samples_per_ray {samples_per_ray} below 64"
        )));
    }
    rig.validate()?;
    let raw: Vec<Image> = rig
        .cameras
        .iter()
        .map(|c| integrate_view(spec, c, samples_per_ray))
        .collect();
    let peak = raw.iter().map(Image::max_value).fold(0.0, f64::max);
    let images = if peak > 0.0 {
        raw.iter().map(|im| im.scaled(DATASET_PEAK / peak)).collect()
    } else {
        raw
    };
    Ok(Dataset {
        rig: rig.clone(),
        images,
        phantom: Some(spec.clone()),
    })
}

/// Desk-scale setup used throughout the tests: ten cameras on a unit circle,
/// 200 x 256 (width x height) images.
pub const DESK_CAMERAS: usize = 10;
pub const DESK_RADIUS: f64 = 1.0;
pub const DESK_WIDTH: usize = 200;
pub const DESK_HEIGHT: usize = 256;
pub const DESK_FOCAL: f64 = 250.0;
pub const DESK_SAMPLES: usize = 512;

pub fn desk_rig() -> CameraRig {
    make_rig(
        DESK_CAMERAS,
        DESK_RADIUS,
        &Vector3::zeros(),
        DESK_WIDTH,
        DESK_HEIGHT,
        DESK_FOCAL,
    )
    .expect("desk rig parameters are valid")
}

pub fn desk_dataset(seed: u64) -> Result<Dataset> {
    let spec = generate(&PhantomConfig {
        seed,
        ..PhantomConfig::default()
    })?;
    render_phantom_views(&spec, &desk_rig(), DESK_SAMPLES)
}
