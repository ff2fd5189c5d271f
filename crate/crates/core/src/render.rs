//! Tile-based splatting renderer with an analytic backward pass.
//!
//! Each Gaussian is projected to a 2D footprint, sorted front to back and
//! composited per pixel:
//!
//! ```text
//! C(p) = Σ_i c_i α_i Π_{j<i} (1 - α_j),   α_i = min(0.99, σ_i k(q_i(p)))
//! q_i(p) = (p - μ'_i)ᵀ Σ'_i⁻¹ (p - μ'_i)
//! ```
//!
//! `k` is the Gaussian kernel `exp(-q/2)` with its 3-sigma tail blended to
//! zero so that the footprint and its first derivative are continuous at the
//! cutoff (`k(0) = 1`, `k(9) = k'(9) = 0`).

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3, Vector4};
use rayon::prelude::*;

use crate::camera::{self, CameraView, Intrinsics, Pose, COV2D_FLOOR};
use crate::error::{Error, Result};
use crate::gaussian::{covariance_unchecked, quat_to_rotation, quat_to_rotation_vjp, GaussianSet};
use crate::image::Image;
use crate::sh;

pub const TILE_SIZE: usize = 16;
pub const ALPHA_MAX: f64 = 0.99;
pub const TRANSMITTANCE_MIN: f64 = 1e-4;
/// Squared Mahalanobis radius of the footprint support (3 sigma).
pub const CUTOFF_Q: f64 = 9.0;

const TAIL: f64 = 0.011_108_996_538_242_306; // exp(-4.5)
const KERNEL_NORM: f64 = 1.0 - 5.5 * TAIL;

/// Footprint kernel and its derivative with respect to `q`.
#[inline]
pub fn footprint(q: f64) -> (f64, f64) {
    if q >= CUTOFF_Q {
        return (0.0, 0.0);
    }
    let e = (-0.5 * q).exp();
    (
        (e - TAIL * (1.0 + 0.5 * (CUTOFF_Q - q))) / KERNEL_NORM,
        0.5 * (TAIL - e) / KERNEL_NORM,
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splat2D {
    pub mean2d: Vector2<f64>,
    pub inv_cov2d: Matrix2<f64>,
    pub depth: f64,
    pub opacity: f64,
    pub luminance: f64,
    pub source_index: usize,
}

/// Per-splat intermediates kept for the backward pass.
#[derive(Clone, Debug)]
struct SplatAux {
    mean_cam: Vector3<f64>,
    jacobian: Matrix2x3<f64>,
    cov3d: Matrix3<f64>,
    cov_cam: Matrix3<f64>,
    rot: Matrix3<f64>,
    view_dir: Vector3<f64>,
    view_dist: f64,
    raw_luminance: f64,
}

/// Rendered image plus the state needed to differentiate it.
#[derive(Clone, Debug)]
pub struct FrameBuffer {
    pub pixels: Image,
    /// Transmittance left after compositing, per pixel.
    pub transmittance: Vec<f64>,
    state: RasterState,
}

#[derive(Clone, Debug)]
struct RasterState {
    pose: Pose,
    splats: Vec<Splat2D>,
    aux: Vec<SplatAux>,
    tiles_x: usize,
    tiles_y: usize,
    tile_lists: Vec<Vec<u32>>,
    /// Number of list entries walked before the pixel finished.
    n_contrib: Vec<u32>,
}

impl FrameBuffer {
    pub fn splats(&self) -> &[Splat2D] {
        &self.state.splats
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientBuffer {
    pub position: Vec<Vector3<f64>>,
    pub log_scale: Vec<Vector3<f64>>,
    pub rotation: Vec<Vector4<f64>>,
    pub opacity_logit: Vec<f64>,
    /// Flattened, `coeff_count(sh_degree)` entries per Gaussian.
    pub sh: Vec<f64>,
    /// Gradient with respect to the projected mean in normalized device
    /// units, used by density control.
    pub mean2d_ndc: Vec<Vector2<f64>>,
    pub visible: Vec<bool>,
    pub delta_rot: Vector3<f64>,
    pub delta_t: Vector3<f64>,
}

impl GradientBuffer {
    pub fn zeros(n: usize, sh_degree: u32) -> Self {
        Self {
            position: vec![Vector3::zeros(); n],
            log_scale: vec![Vector3::zeros(); n],
            rotation: vec![Vector4::zeros(); n],
            opacity_logit: vec![0.0; n],
            sh: vec![0.0; n * sh::coeff_count(sh_degree)],
            mean2d_ndc: vec![Vector2::zeros(); n],
            visible: vec![false; n],
            delta_rot: Vector3::zeros(),
            delta_t: Vector3::zeros(),
        }
    }

    pub fn len(&self) -> usize {
        self.position.len()
    }

    pub fn is_empty(&self) -> bool {
        self.position.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.position.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.log_scale.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.rotation.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.opacity_logit.iter().all(|x| x.is_finite())
            && self.sh.iter().all(|x| x.is_finite())
            && self.delta_rot.iter().all(|x| x.is_finite())
            && self.delta_t.iter().all(|x| x.is_finite())
    }
}

/// Smallest `q` over the rectangle `[0, w] x [0, h]` for the quadratic form
/// `conic` centered at `mean`.
fn min_q_over_rect(mean: &Vector2<f64>, conic: &Matrix2<f64>, w: f64, h: f64) -> f64 {
    if mean.x >= 0.0 && mean.x <= w && mean.y >= 0.0 && mean.y <= h {
        return 0.0;
    }
    let (a, b, c) = (conic[(0, 0)], conic[(0, 1)], conic[(1, 1)]);
    let q = |dx: f64, dy: f64| a * dx * dx + 2.0 * b * dx * dy + c * dy * dy;
    let mut best = f64::INFINITY;
    for x_edge in [0.0, w] {
        let dx = x_edge - mean.x;
        let y = (mean.y - b * dx / c).clamp(0.0, h);
        best = best.min(q(dx, y - mean.y));
    }
    for y_edge in [0.0, h] {
        let dy = y_edge - mean.y;
        let x = (mean.x - b * dy / a).clamp(0.0, w);
        best = best.min(q(x - mean.x, dy));
    }
    best
}

fn project_all(set: &GaussianSet, view: &CameraView) -> (Pose, Vec<Splat2D>, Vec<SplatAux>) {
    let pose = view.effective_pose();
    let intr = &view.intrinsics;
    let center = pose.center();
    let (w, h) = (intr.width as f64, intr.height as f64);
    let mut splats = Vec::new();
    let mut aux = Vec::new();
    for (index, g) in set.gaussians.iter().enumerate() {
        let mean_cam = pose.transform(&g.position);
        let Some((mean2d, depth)) = camera::project_camera_point(&mean_cam, intr) else {
            continue;
        };
        let Some(jacobian) = camera::projection_jacobian(&mean_cam, intr) else {
            continue;
        };
        let rot = quat_to_rotation(&g.rotation);
        let cov3d = covariance_unchecked(&g.scales(), &g.rotation);
        let cov_cam = pose.rotation * cov3d * pose.rotation.transpose();
        let cov2d = jacobian * cov_cam * jacobian.transpose() + Matrix2::identity() * COV2D_FLOOR;
        let Some(inv_cov2d) = cov2d.try_inverse() else {
            continue;
        };
        if min_q_over_rect(&mean2d, &inv_cov2d, w, h) >= CUTOFF_Q {
            continue;
        }
        let to_gauss = g.position - center;
        let view_dist = to_gauss.norm();
        let view_dir = to_gauss / view_dist;
        let raw_luminance = sh::evaluate(set.sh_degree, &g.sh_coeffs, &view_dir);
        splats.push(Splat2D {
            mean2d,
            inv_cov2d: symmetrize(&inv_cov2d),
            depth,
            opacity: g.opacity(),
            luminance: raw_luminance.max(0.0),
            source_index: index,
        });
        aux.push(SplatAux {
            mean_cam,
            jacobian,
            cov3d,
            cov_cam,
            rot,
            view_dir,
            view_dist,
            raw_luminance,
        });
    }
    (pose, splats, aux)
}

fn symmetrize(m: &Matrix2<f64>) -> Matrix2<f64> {
    let off = 0.5 * (m[(0, 1)] + m[(1, 0)]);
    Matrix2::new(m[(0, 0)], off, off, m[(1, 1)])
}

/// Splats of every Gaussian in front of the near plane whose 3-sigma
/// footprint overlaps the image, in set order.
pub fn cull_and_project(set: &GaussianSet, view: &CameraView) -> Vec<Splat2D> {
    project_all(set, view).1
}

/// Permutation that orders splats front to back, ties by source index.
fn depth_order(splats: &[Splat2D]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..splats.len()).collect();
    order.sort_by(|&a, &b| {
        splats[a]
            .depth
            .total_cmp(&splats[b].depth)
            .then(splats[a].source_index.cmp(&splats[b].source_index))
    });
    order
}

pub fn depth_sort(splats: Vec<Splat2D>) -> Vec<Splat2D> {
    let order = depth_order(&splats);
    let mut slots: Vec<Option<Splat2D>> = splats.into_iter().map(Some).collect();
    order.into_iter().map(|i| slots[i].take().unwrap()).collect()
}

/// Compact per-splat record used in the pixel loops.
#[derive(Clone, Copy)]
struct Packed {
    mx: f64,
    my: f64,
    a: f64,
    b: f64,
    c: f64,
    opacity: f64,
    lum: f64,
}

fn pack(s: &Splat2D) -> Packed {
    Packed {
        mx: s.mean2d.x,
        my: s.mean2d.y,
        a: s.inv_cov2d[(0, 0)],
        b: s.inv_cov2d[(0, 1)],
        c: s.inv_cov2d[(1, 1)],
        opacity: s.opacity,
        lum: s.luminance,
    }
}

fn bin_tiles(splats: &[Splat2D], intr: &Intrinsics) -> (usize, usize, Vec<Vec<u32>>) {
    let tiles_x = intr.width.div_ceil(TILE_SIZE);
    let tiles_y = intr.height.div_ceil(TILE_SIZE);
    let mut lists = vec![Vec::new(); tiles_x * tiles_y];
    for (k, s) in splats.iter().enumerate() {
        // Axis-aligned extent of the q = 9 ellipse.
        let cov = s.inv_cov2d.try_inverse().unwrap_or_else(Matrix2::zeros);
        let rx = 3.0 * cov[(0, 0)].max(0.0).sqrt();
        let ry = 3.0 * cov[(1, 1)].max(0.0).sqrt();
        let px0 = ((s.mean2d.x - rx - 0.5).floor().max(0.0)) as usize;
        let py0 = ((s.mean2d.y - ry - 0.5).floor().max(0.0)) as usize;
        let px1 = (s.mean2d.x + rx - 0.5).ceil();
        let py1 = (s.mean2d.y + ry - 0.5).ceil();
        if px1 < 0.0 || py1 < 0.0 {
            continue;
        }
        let px1 = (px1 as usize).min(intr.width - 1);
        let py1 = (py1 as usize).min(intr.height - 1);
        if px0 > px1 || py0 > py1 {
            continue;
        }
        for ty in (py0 / TILE_SIZE)..=(py1 / TILE_SIZE) {
            for tx in (px0 / TILE_SIZE)..=(px1 / TILE_SIZE) {
                lists[ty * tiles_x + tx].push(k as u32);
            }
        }
    }
    (tiles_x, tiles_y, lists)
}

struct TileOutput {
    color: Vec<f64>,
    transmittance: Vec<f64>,
    n_contrib: Vec<u32>,
}

fn tile_bounds(tile: usize, tiles_x: usize, intr: &Intrinsics) -> (usize, usize, usize, usize) {
    let tx = tile % tiles_x;
    let ty = tile / tiles_x;
    let x0 = tx * TILE_SIZE;
    let y0 = ty * TILE_SIZE;
    (
        x0,
        y0,
        (x0 + TILE_SIZE).min(intr.width),
        (y0 + TILE_SIZE).min(intr.height),
    )
}

fn rasterize_tile(
    list: &[u32],
    packed: &[Packed],
    bounds: (usize, usize, usize, usize),
    t_min: f64,
) -> TileOutput {
    let (x0, y0, x1, y1) = bounds;
    let n = (x1 - x0) * (y1 - y0);
    let mut out = TileOutput {
        color: Vec::with_capacity(n),
        transmittance: Vec::with_capacity(n),
        n_contrib: Vec::with_capacity(n),
    };
    for py in y0..y1 {
        let fy = py as f64 + 0.5;
        for px in x0..x1 {
            let fx = px as f64 + 0.5;
            let mut t = 1.0;
            let mut color = 0.0;
            let mut walked = 0u32;
            for (k, &idx) in list.iter().enumerate() {
                let s = &packed[idx as usize];
                let dx = fx - s.mx;
                let dy = fy - s.my;
                let q = s.a * dx * dx + 2.0 * s.b * dx * dy + s.c * dy * dy;
                if q >= CUTOFF_Q {
                    continue;
                }
                let alpha = (s.opacity * footprint(q).0).min(ALPHA_MAX);
                if alpha <= 0.0 {
                    continue;
                }
                color += s.lum * alpha * t;
                t *= 1.0 - alpha;
                walked = k as u32 + 1;
                if t < t_min {
                    break;
                }
            }
            out.color.push(color);
            out.transmittance.push(t);
            out.n_contrib.push(walked);
        }
    }
    out
}

pub(crate) fn render_with_threshold(set: &GaussianSet, view: &CameraView, t_min: f64) -> FrameBuffer {
    let intr = view.intrinsics;
    let (pose, splats, aux) = project_all(set, view);
    let order = depth_order(&splats);
    let splats: Vec<Splat2D> = order.iter().map(|&i| splats[i].clone()).collect();
    let aux: Vec<SplatAux> = order.iter().map(|&i| aux[i].clone()).collect();
    let packed: Vec<Packed> = splats.iter().map(pack).collect();
    let (tiles_x, tiles_y, tile_lists) = bin_tiles(&splats, &intr);

    let outputs: Vec<TileOutput> = tile_lists
        .par_iter()
        .enumerate()
        .map(|(tile, list)| rasterize_tile(list, &packed, tile_bounds(tile, tiles_x, &intr), t_min))
        .collect();

    let mut pixels = Image::zeros(intr.width, intr.height);
    let mut transmittance = vec![1.0; intr.width * intr.height];
    let mut n_contrib = vec![0u32; intr.width * intr.height];
    for (tile, out) in outputs.into_iter().enumerate() {
        let (x0, y0, x1, y1) = tile_bounds(tile, tiles_x, &intr);
        let mut k = 0;
        for py in y0..y1 {
            for px in x0..x1 {
                let i = py * intr.width + px;
                pixels.data_mut()[i] = out.color[k];
                transmittance[i] = out.transmittance[k];
                n_contrib[i] = out.n_contrib[k];
                k += 1;
            }
        }
    }
    FrameBuffer {
        pixels,
        transmittance,
        state: RasterState {
            pose,
            splats,
            aux,
            tiles_x,
            tiles_y,
            tile_lists,
            n_contrib,
        },
    }
}

/// Renders the set into the view's image plane.
pub fn render_forward(set: &GaussianSet, view: &CameraView) -> FrameBuffer {
    render_with_threshold(set, view, TRANSMITTANCE_MIN)
}

/// Per-splat gradient with respect to screen-space quantities:
/// mean x, mean y, conic a, b, c, opacity, luminance.
type SplatGrad = [f64; 7];

fn backward_tile(
    list: &[u32],
    packed: &[Packed],
    bounds: (usize, usize, usize, usize),
    frame: &FrameBuffer,
    d_pixels: &Image,
) -> Vec<SplatGrad> {
    let width = frame.pixels.width();
    let mut grads = vec![[0.0; 7]; list.len()];
    let (x0, y0, x1, y1) = bounds;
    for py in y0..y1 {
        let fy = py as f64 + 0.5;
        for px in x0..x1 {
            let i = py * width + px;
            let g_pix = d_pixels.data()[i];
            if g_pix == 0.0 {
                continue;
            }
            let fx = px as f64 + 0.5;
            let mut t = frame.transmittance[i];
            let mut behind = 0.0;
            let n = frame.state.n_contrib[i] as usize;
            for k in (0..n).rev() {
                let s = &packed[list[k] as usize];
                let dx = fx - s.mx;
                let dy = fy - s.my;
                let q = s.a * dx * dx + 2.0 * s.b * dx * dy + s.c * dy * dy;
                if q >= CUTOFF_Q {
                    continue;
                }
                let (kern, dkern) = footprint(q);
                let raw = s.opacity * kern;
                let alpha = raw.min(ALPHA_MAX);
                if alpha <= 0.0 {
                    continue;
                }
                let one_minus = 1.0 - alpha;
                let t_before = t / one_minus;
                let d_alpha = g_pix * (s.lum * t_before - behind / one_minus);
                let gr = &mut grads[k];
                gr[6] += g_pix * alpha * t_before;
                if raw < ALPHA_MAX {
                    gr[5] += d_alpha * kern;
                    let d_q = d_alpha * s.opacity * dkern;
                    gr[0] += -d_q * 2.0 * (s.a * dx + s.b * dy);
                    gr[1] += -d_q * 2.0 * (s.b * dx + s.c * dy);
                    gr[2] += d_q * dx * dx;
                    gr[3] += d_q * 2.0 * dx * dy;
                    gr[4] += d_q * dy * dy;
                }
                behind += s.lum * alpha * t_before;
                t = t_before;
            }
        }
    }
    grads
}

/// Gradients of `Σ_p dL/dC(p) · C(p)` with respect to every Gaussian
/// parameter and to the view's pose delta.
pub fn render_backward(
    set: &GaussianSet,
    view: &CameraView,
    frame: &FrameBuffer,
    d_pixels: &Image,
) -> Result<GradientBuffer> {
    d_pixels.check_same_shape(&frame.pixels)?;
    let intr = view.intrinsics;
    let st = &frame.state;
    let packed: Vec<Packed> = st.splats.iter().map(pack).collect();

    let per_tile: Vec<Vec<SplatGrad>> = st
        .tile_lists
        .par_iter()
        .enumerate()
        .map(|(tile, list)| {
            backward_tile(list, &packed, tile_bounds(tile, st.tiles_x, &intr), frame, d_pixels)
        })
        .collect();
    debug_assert_eq!(per_tile.len(), st.tiles_x * st.tiles_y);

    // Fixed tile order keeps the reduction deterministic.
    let mut screen = vec![[0.0; 7]; st.splats.len()];
    for (list, grads) in st.tile_lists.iter().zip(&per_tile) {
        for (&idx, g) in list.iter().zip(grads) {
            let acc = &mut screen[idx as usize];
            for c in 0..7 {
                acc[c] += g[c];
            }
        }
    }

    let mut out = GradientBuffer::zeros(set.len(), set.sh_degree);
    let n_coeffs = sh::coeff_count(set.sh_degree);
    let pose = &st.pose;
    let w_rot = pose.rotation;
    let t_vec = pose.translation;
    let mut d_w = Matrix3::zeros();
    let mut d_t = Vector3::zeros();
    let mut d_center = Vector3::zeros();

    for ((splat, aux), sg) in st.splats.iter().zip(&st.aux).zip(&screen) {
        let gi = splat.source_index;
        let g = &set.gaussians[gi];
        out.visible[gi] = true;
        out.mean2d_ndc[gi] = Vector2::new(
            sg[0] * 0.5 * intr.width as f64,
            sg[1] * 0.5 * intr.height as f64,
        );

        // luminance
        let d_lum = sg[6];
        let mut d_mu = Vector3::zeros();
        if aux.raw_luminance > 0.0 && d_lum != 0.0 {
            let basis = sh::basis(set.sh_degree, &aux.view_dir);
            for k in 0..n_coeffs {
                out.sh[gi * n_coeffs + k] = d_lum * basis[k];
            }
            if set.sh_degree > 0 {
                let bg = sh::basis_grad(set.sh_degree, &aux.view_dir);
                let mut d_dir = Vector3::zeros();
                for k in 0..n_coeffs {
                    d_dir += bg[k] * g.sh_coeffs[k];
                }
                d_dir *= d_lum;
                let dir = aux.view_dir;
                let d_v = (d_dir - dir * dir.dot(&d_dir)) / aux.view_dist;
                d_mu += d_v;
                d_center -= d_v;
            }
        }

        // opacity
        let sigma = splat.opacity;
        out.opacity_logit[gi] = sg[5] * sigma * (1.0 - sigma);

        // conic -> floored 2D covariance -> camera covariance and Jacobian
        let conic = splat.inv_cov2d;
        let m = Matrix2::new(sg[2], 0.5 * sg[3], 0.5 * sg[3], sg[4]);
        let d_cov2d = -(conic * m * conic);
        let j = aux.jacobian;
        let d_cov_cam = j.transpose() * d_cov2d * j;
        let d_j: Matrix2x3<f64> = 2.0 * d_cov2d * j * aux.cov_cam;
        let d_cov3d = w_rot.transpose() * d_cov_cam * w_rot;
        d_w += 2.0 * d_cov_cam * w_rot * aux.cov3d;

        // camera-space mean from the projected mean and the Jacobian
        let p = aux.mean_cam;
        let (fx, fy) = (intr.fx, intr.fy);
        let iz = 1.0 / p.z;
        let iz2 = iz * iz;
        let iz3 = iz2 * iz;
        let mut d_p = Vector3::new(
            sg[0] * fx * iz,
            sg[1] * fy * iz,
            -sg[0] * fx * p.x * iz2 - sg[1] * fy * p.y * iz2,
        );
        d_p.x += -d_j[(0, 2)] * fx * iz2;
        d_p.y += -d_j[(1, 2)] * fy * iz2;
        d_p.z += -d_j[(0, 0)] * fx * iz2 - d_j[(1, 1)] * fy * iz2
            + d_j[(0, 2)] * 2.0 * fx * p.x * iz3
            + d_j[(1, 2)] * 2.0 * fy * p.y * iz3;

        d_mu += w_rot.transpose() * d_p;
        d_w += d_p * g.position.transpose();
        d_t += d_p;
        out.position[gi] = d_mu;

        // 3D covariance -> scales and rotation
        let s2 = g.scales().map(|s| s * s);
        let rot = aux.rot;
        let local = rot.transpose() * d_cov3d * rot;
        out.log_scale[gi] = Vector3::new(
            2.0 * s2.x * local[(0, 0)],
            2.0 * s2.y * local[(1, 1)],
            2.0 * s2.z * local[(2, 2)],
        );
        let d_rot = 2.0 * d_cov3d * rot * Matrix3::from_diagonal(&s2);
        out.rotation[gi] = quat_to_rotation_vjp(&g.rotation, &d_rot);
    }

    // camera center o = -Wᵀ T'
    d_t += -(w_rot * d_center);
    d_w += -(t_vec * d_center.transpose());

    // W = R Exp(ω): project onto the tangent space at W
    let mw = w_rot.transpose() * d_w;
    let v = Vector3::new(
        mw[(2, 1)] - mw[(1, 2)],
        mw[(0, 2)] - mw[(2, 0)],
        mw[(1, 0)] - mw[(0, 1)],
    );
    out.delta_rot = camera::so3_right_jacobian(&view.pose_delta.delta_rot).transpose() * v;
    out.delta_t = d_t;

    if !out.all_finite() {
        return Err(Error::NonFiniteGradient(format!("view {}", view.id)));
    }
    Ok(out)
}
