//! Voxel ART baseline: sequential Kaczmarz sweeps over ray equations
//! `Σ_k L_rk x_k = b_r`, where `L_rk` is the exact path length of ray `r`
//! through voxel `k`.
//!
//! Rows are either materialized once in a compact sparse matrix or rebuilt
//! by grid traversal on every sweep, so both memory profiles can be
//! measured.

use std::path::Path;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{pixel_center, pixel_ray_unchecked, CameraView, Ray};
use crate::error::{Error, Result};
use crate::gaussian::GaussianSet;
use crate::grid::GridSpec;
use crate::image::Image;
use crate::io;
use crate::sh;

/// Emission values on a regular grid, x-fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    pub spec: GridSpec,
    pub values: Vec<f64>,
}

impl VoxelGrid {
    pub fn zeros(spec: GridSpec) -> Self {
        Self {
            values: vec![0.0; spec.voxel_count()],
            spec,
        }
    }

    pub fn from_values(spec: GridSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != spec.voxel_count() {
            return Err(Error::InvalidArgument(format!(
                "{} values for {} voxels",
                values.len(),
                spec.voxel_count()
            )));
        }
        Ok(Self { spec, values })
    }

    pub fn write_flvl(&self, path: &Path) -> Result<()> {
        std::fs::write(path, io::encode_flvl(&self.spec, &self.values)?)?;
        Ok(())
    }

    pub fn read_flvl(path: &Path) -> Result<Self> {
        let (spec, values) = io::decode_flvl(&std::fs::read(path)?)?;
        Self::from_values(spec, values)
    }
}

/// Sparse row of the system matrix: (voxel index, path length).
#[derive(Clone, Debug, PartialEq)]
pub struct WeightRow {
    pub ray_id: usize,
    pub entries: Vec<(usize, f64)>,
}

impl WeightRow {
    pub fn norm_sq(&self) -> f64 {
        self.entries.iter().map(|(_, l)| l * l).sum()
    }

    pub fn total_length(&self) -> f64 {
        self.entries.iter().map(|(_, l)| l).sum()
    }

    pub fn dot(&self, values: &[f64]) -> f64 {
        self.entries.iter().map(|&(k, l)| l * values[k]).sum()
    }
}

/// Exact voxel intersection lengths of `ray`; empty if it misses the grid.
pub fn build_weight_row(ray: &Ray, spec: &GridSpec, ray_id: usize) -> WeightRow {
    let mut entries = Vec::new();
    spec.traverse(ray, |k, t0, t1| entries.push((k, t1 - t0)));
    WeightRow { ray_id, entries }
}

/// Line integral of `grid` along each row.
pub fn forward_project(grid: &VoxelGrid, rows: &[WeightRow]) -> Vec<f64> {
    rows.iter().map(|r| r.dot(&grid.values)).collect()
}

/// Line integral of `grid` along each ray (rows built on the fly).
pub fn forward_project_rays(grid: &VoxelGrid, rays: &[Ray]) -> Vec<f64> {
    rays.par_iter()
        .map(|ray| {
            let mut s = 0.0;
            grid.spec
                .traverse(ray, |k, t0, t1| s += (t1 - t0) * grid.values[k]);
            s
        })
        .collect()
}

/// Rays of every pixel of a view (or every `stride`-th pixel), row-major.
pub fn view_rays(view: &CameraView, stride: usize) -> Vec<Ray> {
    let stride = stride.max(1);
    let pose = view.effective_pose();
    let mut rays = Vec::new();
    for j in (0..view.height()).step_by(stride) {
        for i in (0..view.width()).step_by(stride) {
            rays.push(pixel_ray_unchecked(&pose, &view.intrinsics, &pixel_center(i, j)));
        }
    }
    rays
}

/// Rays and measured intensities of all views, ray ids ascending view by
/// view. Rays that miss the grid are dropped (their rows would be empty).
pub fn measurement_system(views: &[CameraView], spec: &GridSpec, stride: usize) -> (Vec<Ray>, Vec<f64>) {
    let stride = stride.max(1);
    let mut rays = Vec::new();
    let mut b = Vec::new();
    for view in views {
        let pose = view.effective_pose();
        for j in (0..view.height()).step_by(stride) {
            for i in (0..view.width()).step_by(stride) {
                let ray = pixel_ray_unchecked(&pose, &view.intrinsics, &pixel_center(i, j));
                if spec.clip_ray(&ray).is_some() {
                    rays.push(ray);
                    b.push(view.image.get(i, j));
                }
            }
        }
    }
    (rays, b)
}

/// Compact row storage: CSR with u32 voxel indices and f32 lengths.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightMatrix {
    offsets: Vec<usize>,
    voxels: Vec<u32>,
    lengths: Vec<f32>,
}

impl WeightMatrix {
    pub fn build(rays: &[Ray], spec: &GridSpec) -> Self {
        let rows: Vec<Vec<(u32, f32)>> = rays
            .par_iter()
            .map(|ray| {
                let mut e = Vec::new();
                spec.traverse(ray, |k, t0, t1| e.push((k as u32, (t1 - t0) as f32)));
                e
            })
            .collect();
        let nnz = rows.iter().map(Vec::len).sum();
        let mut m = Self {
            offsets: Vec::with_capacity(rows.len() + 1),
            voxels: Vec::with_capacity(nnz),
            lengths: Vec::with_capacity(nnz),
        };
        m.offsets.push(0);
        for r in rows {
            for (k, l) in r {
                m.voxels.push(k);
                m.lengths.push(l);
            }
            m.offsets.push(m.voxels.len());
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.offsets.len().saturating_sub(1)
    }

    pub fn nnz(&self) -> usize {
        self.voxels.len()
    }

    pub fn memory_bytes(&self) -> usize {
        self.offsets.len() * std::mem::size_of::<usize>() + self.nnz() * 8
    }

    fn row(&self, r: usize) -> (&[u32], &[f32]) {
        let (a, b) = (self.offsets[r], self.offsets[r + 1]);
        (&self.voxels[a..b], &self.lengths[a..b])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtConfig {
    pub relaxation: f64,
    pub iterations: usize,
    /// Build the full sparse matrix up front instead of re-tracing rays on
    /// every sweep. Faster, but holds every row in memory.
    pub materialize: bool,
}

impl Default for ArtConfig {
    fn default() -> Self {
        Self {
            relaxation: 0.01,
            iterations: 50,
            materialize: false,
        }
    }
}

fn check_relaxation(relaxation: f64) -> Result<()> {
    if relaxation > 0.0 && relaxation < 2.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("relaxation {relaxation} outside (0, 2)")))
    }
}

#[inline]
fn kaczmarz(values: &mut [f64], idx: impl Iterator<Item = (usize, f64)> + Clone, b: f64, relaxation: f64) {
    let (mut dot, mut norm) = (0.0, 0.0);
    for (k, l) in idx.clone() {
        dot += l * values[k];
        norm += l * l;
    }
    if norm == 0.0 {
        return;
    }
    let step = relaxation * (b - dot) / norm;
    for (k, l) in idx {
        let v = &mut values[k];
        *v = (*v + step * l).max(0.0);
    }
}

/// Kaczmarz sweeps over explicit rows, in the given order.
pub fn art_reconstruct_rows(
    rows: &[WeightRow],
    measurements: &[f64],
    grid: VoxelGrid,
    relaxation: f64,
    iterations: usize,
) -> Result<VoxelGrid> {
    check_relaxation(relaxation)?;
    if rows.len() != measurements.len() {
        return Err(Error::InvalidArgument(format!(
            "{} rows but {} measurements",
            rows.len(),
            measurements.len()
        )));
    }
    let mut grid = grid;
    for _ in 0..iterations {
        for (row, &b) in rows.iter().zip(measurements) {
            kaczmarz(&mut grid.values, row.entries.iter().copied(), b, relaxation);
        }
    }
    Ok(grid)
}

/// Kaczmarz sweeps over the rows of `rays` in ray order. `on_sweep` is
/// called after every sweep with the 1-based sweep number.
pub fn art_reconstruct(
    rays: &[Ray],
    measurements: &[f64],
    grid: VoxelGrid,
    config: &ArtConfig,
    on_sweep: &mut dyn FnMut(usize, &VoxelGrid),
) -> Result<VoxelGrid> {
    check_relaxation(config.relaxation)?;
    if rays.len() != measurements.len() {
        return Err(Error::InvalidArgument(format!(
            "{} rays but {} measurements",
            rays.len(),
            measurements.len()
        )));
    }
    let mut grid = grid;
    let relax = config.relaxation;
    if config.materialize {
        let w = WeightMatrix::build(rays, &grid.spec);
        for sweep in 1..=config.iterations {
            for (r, &b) in measurements.iter().enumerate() {
                let (k, l) = w.row(r);
                let it = k.iter().zip(l).map(|(&k, &l)| (k as usize, l as f64));
                kaczmarz(&mut grid.values, it, b, relax);
            }
            on_sweep(sweep, &grid);
        }
    } else {
        let mut row = Vec::new();
        for sweep in 1..=config.iterations {
            for (ray, &b) in rays.iter().zip(measurements) {
                row.clear();
                grid.spec.traverse(ray, |k, t0, t1| row.push((k, t1 - t0)));
                kaczmarz(&mut grid.values, row.iter().copied(), b, relax);
            }
            on_sweep(sweep, &grid);
        }
    }
    Ok(grid)
}

/// Renders a reconstructed volume into a view by integrating along every
/// pixel ray.
pub fn project_to_view(grid: &VoxelGrid, view: &CameraView) -> Image {
    let values = forward_project_rays(grid, &view_rays(view, 1));
    Image::from_vec(view.width(), view.height(), values).expect("one ray per pixel")
}

/// Samples `Σ σ_i c_i G_i(x)` at every voxel center, with `c_i` the
/// view-independent (DC) luminance. Each Gaussian is evaluated out to the
/// Mahalanobis radius where its kernel drops below 1e-15.
pub fn sample_gaussians_to_grid(set: &GaussianSet, spec: &GridSpec) -> VoxelGrid {
    const Q_MAX: f64 = 69.1; // -2 ln(1e-15)
    struct Prepared {
        center: Vector3<f64>,
        precision: nalgebra::Matrix3<f64>,
        weight: f64,
        lo: [usize; 3],
        hi: [usize; 3],
    }
    let pitch = spec.voxel_size();
    let prepared: Vec<Prepared> = set
        .gaussians
        .iter()
        .filter_map(|g| {
            let weight = g.opacity() * (sh::SH_C0 * g.sh_coeffs[0]).max(0.0);
            let cov = g.covariance().ok()?;
            let precision = cov.try_inverse()?;
            let reach = Q_MAX.sqrt() * g.scales().max();
            let mut lo = [0; 3];
            let mut hi = [0; 3];
            for a in 0..3 {
                let from = ((g.position[a] - reach - spec.bbox_min[a]) / pitch[a] - 0.5).floor();
                let to = ((g.position[a] + reach - spec.bbox_min[a]) / pitch[a] - 0.5).ceil();
                if to < 0.0 || from > spec.dims[a] as f64 - 1.0 {
                    return None;
                }
                lo[a] = from.max(0.0) as usize;
                hi[a] = (to as usize).min(spec.dims[a] - 1);
            }
            (weight > 0.0).then_some(Prepared {
                center: g.position,
                precision,
                weight,
                lo,
                hi,
            })
        })
        .collect();
    let [nx, ny, nz] = spec.dims;
    let slab = nx * ny;
    let mut values = vec![0.0; spec.voxel_count()];
    values.par_chunks_mut(slab).enumerate().for_each(|(z, out)| {
        for p in prepared.iter().filter(|p| p.lo[2] <= z && z <= p.hi[2]) {
            for y in p.lo[1]..=p.hi[1] {
                for x in p.lo[0]..=p.hi[0] {
                    let d = spec.voxel_center([x, y, z]) - p.center;
                    let q = d.dot(&(p.precision * d));
                    if q < Q_MAX {
                        out[y * nx + x] += p.weight * (-0.5 * q).exp();
                    }
                }
            }
        }
    });
    debug_assert_eq!(values.len(), nx * ny * nz);
    VoxelGrid {
        spec: *spec,
        values,
    }
}
