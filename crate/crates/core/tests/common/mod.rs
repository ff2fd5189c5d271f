#![allow(dead_code)]

use flamegs::camera::{CameraView, Intrinsics, Pose, PoseDelta};
use flamegs::render::{render_backward, render_forward};
use flamegs::{Gaussian3D, GaussianSet, Image};
use nalgebra::{Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct GradScene {
    pub set: GaussianSet,
    pub views: Vec<CameraView>,
    pub weights: Vec<Image>,
}

/// Random scene of `n` Gaussians seen by `n_views` cameras on a ring, with
/// small nonzero pose deltas and random per-pixel loss weights.
pub fn gradient_scene(seed: u64, n: usize, n_views: usize, size: usize, sh_degree: u32) -> GradScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gaussians = (0..n)
        .map(|_| {
            let mut g = Gaussian3D::isotropic(
                Vector3::new(
                    rng.random_range(-0.25..0.25),
                    rng.random_range(-0.25..0.25),
                    rng.random_range(-0.25..0.25),
                ),
                rng.random_range(0.04..0.1),
                rng.random_range(0.05..0.5),
                rng.random_range(0.4..1.0),
                sh_degree,
            );
            g.log_scale += Vector3::new(
                rng.random_range(-0.4..0.4),
                rng.random_range(-0.4..0.4),
                rng.random_range(-0.4..0.4),
            );
            g.rotation = Vector4::new(
                rng.random_range(0.3..1.0),
                rng.random_range(-0.6..0.6),
                rng.random_range(-0.6..0.6),
                rng.random_range(-0.6..0.6),
            )
            .normalize();
            for c in g.sh_coeffs.iter_mut().skip(1) {
                *c = rng.random_range(-0.3..0.3);
            }
            g
        })
        .collect();
    let set = GaussianSet::new(gaussians, sh_degree).unwrap();
    let intr = Intrinsics {
        fx: 70.0,
        fy: 72.0,
        cx: size as f64 / 2.0 + 0.3,
        cy: size as f64 / 2.0 - 0.2,
        width: size,
        height: size,
    };
    let mut views = Vec::new();
    let mut weights = Vec::new();
    for k in 0..n_views {
        let phi = 2.0 * std::f64::consts::PI * k as f64 / n_views as f64 + 0.3;
        let eye = Vector3::new(2.0 * phi.cos(), 0.3, 2.0 * phi.sin());
        let pose = Pose::look_at(&eye, &Vector3::zeros(), &Vector3::y());
        let mut v = CameraView::new(format!("cam{k}"), intr, pose, Image::zeros(size, size)).unwrap();
        v.pose_delta = PoseDelta {
            delta_rot: Vector3::new(
                rng.random_range(-0.03..0.03),
                rng.random_range(-0.03..0.03),
                rng.random_range(-0.03..0.03),
            ),
            delta_t: Vector3::new(
                rng.random_range(-0.02..0.02),
                rng.random_range(-0.02..0.02),
                rng.random_range(-0.02..0.02),
            ),
        };
        views.push(v);
        weights.push(Image::from_fn(size, size, |_, _| rng.random_range(-1.0..1.0)));
    }
    GradScene { set, views, weights }
}

pub fn objective(set: &GaussianSet, views: &[CameraView], weights: &[Image]) -> f64 {
    views
        .iter()
        .zip(weights)
        .map(|(v, w)| {
            let f = render_forward(set, v);
            f.pixels.data().iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>()
        })
        .sum()
}

#[derive(Debug)]
pub struct GradCheck {
    pub checked: usize,
    pub failures: Vec<String>,
    pub worst_rel: f64,
}

fn close(analytic: f64, fd: f64) -> bool {
    let tol = (1e-3 * analytic.abs().max(fd.abs())).max(1e-7);
    (analytic - fd).abs() <= tol
}

/// Compares every analytic gradient entry against central differences.
pub fn check_all_gradients(scene: &GradScene, h: f64) -> GradCheck {
    let set = &scene.set;
    let views = &scene.views;
    let weights = &scene.weights;
    let mut analytic = Vec::new();
    for (v, w) in views.iter().zip(weights) {
        let f = render_forward(set, v);
        analytic.push(render_backward(set, v, &f, w).unwrap());
    }
    let nc = flamegs::sh::coeff_count(set.sh_degree);
    let mut out = GradCheck {
        checked: 0,
        failures: Vec::new(),
        worst_rel: 0.0,
    };
    let record = |name: String, a: f64, fd: f64, out: &mut GradCheck| {
        out.checked += 1;
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-300);
        if a.abs().max(fd.abs()) > 1e-4 {
            out.worst_rel = out.worst_rel.max(rel);
        }
        if !close(a, fd) {
            out.failures.push(format!("{name}: analytic {a:.6e} fd {fd:.6e}"));
        }
    };

    let fd_set = |mutate: &dyn Fn(&mut GaussianSet, f64)| {
        let mut p = set.clone();
        mutate(&mut p, h);
        let mut m = set.clone();
        mutate(&mut m, -h);
        (objective(&p, views, weights) - objective(&m, views, weights)) / (2.0 * h)
    };

    for gi in 0..set.len() {
        for a in 0..3 {
            let an: f64 = analytic.iter().map(|g| g.position[gi][a]).sum();
            let fd = fd_set(&|s: &mut GaussianSet, d| s.gaussians[gi].position[a] += d);
            record(format!("g{gi}.position[{a}]"), an, fd, &mut out);
            let an: f64 = analytic.iter().map(|g| g.log_scale[gi][a]).sum();
            let fd = fd_set(&|s: &mut GaussianSet, d| s.gaussians[gi].log_scale[a] += d);
            record(format!("g{gi}.log_scale[{a}]"), an, fd, &mut out);
        }
        for a in 0..4 {
            let an: f64 = analytic.iter().map(|g| g.rotation[gi][a]).sum();
            let fd = fd_set(&|s: &mut GaussianSet, d| s.gaussians[gi].rotation[a] += d);
            record(format!("g{gi}.rotation[{a}]"), an, fd, &mut out);
        }
        let an: f64 = analytic.iter().map(|g| g.opacity_logit[gi]).sum();
        let fd = fd_set(&|s: &mut GaussianSet, d| s.gaussians[gi].opacity_logit += d);
        record(format!("g{gi}.opacity_logit"), an, fd, &mut out);
        for k in 0..nc {
            let an: f64 = analytic.iter().map(|g| g.sh[gi * nc + k]).sum();
            let fd = fd_set(&|s: &mut GaussianSet, d| s.gaussians[gi].sh_coeffs[k] += d);
            record(format!("g{gi}.sh[{k}]"), an, fd, &mut out);
        }
    }
    for (vi, grad) in analytic.iter().enumerate() {
        for a in 0..6 {
            let perturbed = |d: f64| {
                let mut vs = views.to_vec();
                if a < 3 {
                    vs[vi].pose_delta.delta_rot[a] += d;
                } else {
                    vs[vi].pose_delta.delta_t[a - 3] += d;
                }
                objective(set, &vs, weights)
            };
            let fd = (perturbed(h) - perturbed(-h)) / (2.0 * h);
            let an = if a < 3 { grad.delta_rot[a] } else { grad.delta_t[a - 3] };
            let name = if a < 3 { "delta_rot" } else { "delta_t" };
            record(format!("view{vi}.{name}[{}]", a % 3), an, fd, &mut out);
        }
    }
    out
}

/// SSIM computed window by window with an explicit 11x11 Gaussian kernel
/// and zero padding, independent of the separable implementation.
pub fn reference_ssim(a: &Image, b: &Image) -> f64 {
    let (w, h) = (a.width() as i64, a.height() as i64);
    let sigma: f64 = 1.5;
    let mut k = [[0.0; 11]; 11];
    let mut total = 0.0;
    for (dy, row) in k.iter_mut().enumerate() {
        for (dx, v) in row.iter_mut().enumerate() {
            let (x, y) = (dx as f64 - 5.0, dy as f64 - 5.0);
            *v = (-(x * x + y * y) / (2.0 * sigma * sigma)).exp();
            total += *v;
        }
    }
    let (c1, c2) = (1e-4, 9e-4);
    let mut acc = 0.0;
    for y in 0..h {
        for x in 0..w {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in -5..=5i64 {
                for dx in -5..=5i64 {
                    let (xx, yy) = (x + dx, y + dy);
                    if xx < 0 || yy < 0 || xx >= w || yy >= h {
                        continue;
                    }
                    let wgt = k[(dy + 5) as usize][(dx + 5) as usize] / total;
                    let (va, vb) = (a.get(xx as usize, yy as usize), b.get(xx as usize, yy as usize));
                    ma += wgt * va;
                    mb += wgt * vb;
                    saa += wgt * va * va;
                    sbb += wgt * vb * vb;
                    sab += wgt * va * vb;
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            acc += (2.0 * ma * mb + c1) * (2.0 * cov + c2)
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
    }
    acc / (w * h) as f64
}

/// One camera at distance `dist` on the -z axis looking at the origin.
pub fn single_view(size: usize, dist: f64, focal: f64) -> CameraView {
    let intr = Intrinsics {
        fx: focal,
        fy: focal,
        cx: size as f64 / 2.0,
        cy: size as f64 / 2.0,
        width: size,
        height: size,
    };
    let pose = Pose::look_at(&Vector3::new(0.0, 0.0, -dist), &Vector3::zeros(), &Vector3::y());
    CameraView::new("cam0", intr, pose, Image::zeros(size, size)).unwrap()
}

/// Views of a set rendered by the splatting renderer itself.
pub fn render_targets(set: &GaussianSet, views: &mut [CameraView]) {
    for v in views.iter_mut() {
        v.image = render_forward(set, v).pixels;
    }
}
