//! Visual-hull initialization: rays through bright pixels are traced through
//! a coarse voxel grid, and voxels pierced by enough views receive one seed
//! Gaussian each.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{pixel_center, pixel_ray_unchecked, CameraView};
use crate::error::{Error, Result};
use crate::gaussian::{Gaussian3D, GaussianSet};
use crate::grid::GridSpec;

pub const INIT_OPACITY: f64 = 0.1;
pub const INIT_LUMINANCE: f64 = 0.5;
/// Jitter half-width as a fraction of the voxel pitch.
pub const JITTER_FRACTION: f64 = 0.25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitConfig {
    pub grid_dims: [usize; 3],
    pub intensity_threshold: f64,
    /// Minimum number of views that must pierce a voxel; `None` means all.
    pub min_view_agreement: Option<usize>,
    pub pixel_stride: usize,
    pub seed: u64,
    /// Explicit grid bounds; by default a cube around the camera centroid.
    pub bbox: Option<(Vector3<f64>, Vector3<f64>)>,
    /// Default cube side as a fraction of the mean camera distance.
    pub bbox_fraction: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            grid_dims: [50, 50, 50],
            intensity_threshold: 0.05,
            min_view_agreement: None,
            pixel_stride: 1,
            seed: 0,
            bbox: None,
            bbox_fraction: 0.6,
        }
    }
}

impl InitConfig {
    pub fn validate(&self, n_views: usize) -> Result<()> {
        if !(self.intensity_threshold >= 0.0 && self.intensity_threshold <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "intensity threshold {} outside [0, 1]",
                self.intensity_threshold
            )));
        }
        if self.grid_dims.iter().any(|&d| d < 2) {
            return Err(Error::InvalidParameter(format!("grid dims {:?}", self.grid_dims)));
        }
        if self.pixel_stride == 0 {
            return Err(Error::InvalidParameter("pixel_stride must be at least 1".into()));
        }
        if n_views < 2 {
            return Err(Error::InvalidArgument(format!("carving needs 2 views, got {n_views}")));
        }
        if self.agreement(n_views) < 2 {
            return Err(Error::InvalidParameter("view agreement must be at least 2".into()));
        }
        Ok(())
    }

    pub fn agreement(&self, n_views: usize) -> usize {
        self.min_view_agreement.unwrap_or(n_views)
    }

    /// Grid bounds for these views.
    pub fn grid_spec(&self, views: &[CameraView]) -> Result<GridSpec> {
        match self.bbox {
            Some((min, max)) => GridSpec::new(self.grid_dims, min, max),
            None => {
                let centers: Vec<_> = views.iter().map(|v| v.center()).collect();
                let (center, side) = default_bbox(&centers, self.bbox_fraction)?;
                let half = Vector3::repeat(side / 2.0);
                GridSpec::new(self.grid_dims, center - half, center + half)
            }
        }
    }
}

/// Cube centered at the centroid of the camera centers with side
/// `fraction` times their mean distance to it. Returns (center, side).
pub fn default_bbox(centers: &[Vector3<f64>], fraction: f64) -> Result<(Vector3<f64>, f64)> {
    if centers.is_empty() {
        return Err(Error::InvalidArgument("no cameras".into()));
    }
    let n = centers.len() as f64;
    let centroid = centers.iter().sum::<Vector3<f64>>() / n;
    let mean_dist = centers.iter().map(|c| (c - centroid).norm()).sum::<f64>() / n;
    let side = fraction * mean_dist;
    if !(side > 0.0) {
        return Err(Error::InvalidParameter(
            "cameras are coincident; give an explicit bounding box".into(),
        ));
    }
    Ok((centroid, side))
}

/// Pixels brighter than `tau` on the lattice `(stride·a, stride·b)`.
pub fn threshold_mask(view: &CameraView, tau: f64, stride: usize) -> Vec<(usize, usize)> {
    let stride = stride.max(1);
    let im = &view.image;
    let mut out = Vec::new();
    for j in (0..im.height()).step_by(stride) {
        for i in (0..im.width()).step_by(stride) {
            if im.get(i, j) > tau {
                out.push((i, j));
            }
        }
    }
    out
}

/// Per-voxel bitset of the views whose bright-pixel rays pierce it.
#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyGrid {
    pub spec: GridSpec,
    n_views: usize,
    words: usize,
    bits: Vec<u64>,
}

impl OccupancyGrid {
    pub fn new(spec: GridSpec, n_views: usize) -> Self {
        let words = n_views.div_ceil(64).max(1);
        Self {
            bits: vec![0; spec.voxel_count() * words],
            spec,
            n_views,
            words,
        }
    }

    pub fn n_views(&self) -> usize {
        self.n_views
    }

    pub fn set(&mut self, voxel: usize, view: usize) {
        self.bits[voxel * self.words + view / 64] |= 1 << (view % 64);
    }

    pub fn is_set(&self, voxel: usize, view: usize) -> bool {
        self.bits[voxel * self.words + view / 64] >> (view % 64) & 1 == 1
    }

    pub fn hit_count(&self, voxel: usize) -> u32 {
        self.bits[voxel * self.words..(voxel + 1) * self.words]
            .iter()
            .map(|w| w.count_ones())
            .sum()
    }

    pub fn hit_counts(&self) -> Vec<u32> {
        (0..self.spec.voxel_count()).map(|v| self.hit_count(v)).collect()
    }

    /// Voxel indices pierced by at least `k` views, ascending.
    pub fn occupied(&self, k: usize) -> Vec<usize> {
        (0..self.spec.voxel_count())
            .filter(|&v| self.hit_count(v) as usize >= k)
            .collect()
    }
}

/// Voxels pierced by any bright-pixel ray of one view.
fn carve_view(spec: &GridSpec, view: &CameraView, tau: f64, stride: usize) -> Vec<bool> {
    let mut hit = vec![false; spec.voxel_count()];
    let pose = view.effective_pose();
    for (i, j) in threshold_mask(view, tau, stride) {
        let ray = pixel_ray_unchecked(&pose, &view.intrinsics, &pixel_center(i, j));
        spec.traverse(&ray, |idx, _, _| hit[idx] = true);
    }
    hit
}

/// Traces every thresholded pixel of every view through the grid.
pub fn carve_grid(views: &[CameraView], config: &InitConfig) -> Result<OccupancyGrid> {
    config.validate(views.len())?;
    let spec = config.grid_spec(views)?;
    let masks: Vec<Vec<bool>> = views
        .par_iter()
        .map(|v| carve_view(&spec, v, config.intensity_threshold, config.pixel_stride))
        .collect();
    let mut grid = OccupancyGrid::new(spec, views.len());
    for (view, mask) in masks.iter().enumerate() {
        for (voxel, &h) in mask.iter().enumerate() {
            if h {
                grid.set(voxel, view);
            }
        }
    }
    let k = config.agreement(views.len());
    if grid.occupied(k).is_empty() {
        return Err(Error::EmptyHull {
            tau: config.intensity_threshold,
            agreement: k,
        });
    }
    Ok(grid)
}

/// Mean distance from each point to its three nearest neighbors among
/// `cells` (voxel coordinates). Uses expanding Chebyshev shells on the grid;
/// `None` if fewer than four cells are given.
pub fn neighbor_scales(spec: &GridSpec, cells: &[[usize; 3]]) -> Option<Vec<f64>> {
    if cells.len() < 4 {
        return None;
    }
    let mut occupied = vec![false; spec.voxel_count()];
    for c in cells {
        occupied[spec.index(*c)] = true;
    }
    let pitch = spec.voxel_size();
    let min_pitch = pitch.min();
    let max_r = *spec.dims.iter().max().unwrap() as i64;
    let scales = cells
        .par_iter()
        .map(|c| {
            let p = spec.voxel_center(*c);
            let mut best: Vec<f64> = Vec::new();
            for r in 1..=max_r {
                for dz in -r..=r {
                    for dy in -r..=r {
                        for dx in -r..=r {
                            if dx.abs().max(dy.abs()).max(dz.abs()) != r {
                                continue;
                            }
                            let q = [c[0] as i64 + dx, c[1] as i64 + dy, c[2] as i64 + dz];
                            if (0..3).any(|a| q[a] < 0 || q[a] >= spec.dims[a] as i64) {
                                continue;
                            }
                            let q = [q[0] as usize, q[1] as usize, q[2] as usize];
                            if occupied[spec.index(q)] {
                                best.push((spec.voxel_center(q) - p).norm());
                            }
                        }
                    }
                }
                best.sort_by(f64::total_cmp);
                best.truncate(3);
                // anything beyond shell r is farther than r * min_pitch
                if best.len() == 3 && best[2] <= r as f64 * min_pitch {
                    break;
                }
            }
            best.iter().sum::<f64>() / best.len() as f64
        })
        .collect();
    Some(scales)
}

/// One isotropic Gaussian per occupied voxel.
pub fn seed_gaussians(grid: &OccupancyGrid, config: &InitConfig, sh_degree: u32) -> Result<GaussianSet> {
    let spec = &grid.spec;
    let k = config.agreement(grid.n_views());
    let occupied = grid.occupied(k);
    if occupied.is_empty() {
        return Err(Error::EmptyHull {
            tau: config.intensity_threshold,
            agreement: k,
        });
    }
    let cells: Vec<[usize; 3]> = occupied.iter().map(|&v| spec.coords(v)).collect();
    let pitch = spec.voxel_size();
    let fallback = pitch.iter().product::<f64>().cbrt();
    let scales = neighbor_scales(spec, &cells).unwrap_or_else(|| vec![fallback; cells.len()]);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let gaussians = cells
        .iter()
        .zip(scales)
        .map(|(c, s)| {
            let jitter = Vector3::from_fn(|a, _| {
                rng.random_range(-JITTER_FRACTION..JITTER_FRACTION) * pitch[a]
            });
            Gaussian3D::isotropic(
                spec.voxel_center(*c) + jitter,
                s,
                INIT_OPACITY,
                INIT_LUMINANCE,
                sh_degree,
            )
        })
        .collect();
    GaussianSet::new(gaussians, sh_degree)
}

/// Carve and seed in one call.
pub fn initialize(views: &[CameraView], config: &InitConfig, sh_degree: u32) -> Result<(OccupancyGrid, GaussianSet)> {
    let grid = carve_grid(views, config)?;
    let set = seed_gaussians(&grid, config, sh_degree)?;
    Ok((grid, set))
}

/// Wide random initialization: `n` Gaussians uniformly inside `spec`'s box,
/// ignoring the images entirely. Kept only to demonstrate how badly a
/// hull-agnostic start generalizes to unseen views.
pub fn random_init(spec: &GridSpec, n: usize, scale: f64, seed: u64, sh_degree: u32) -> Result<GaussianSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gaussians = (0..n)
        .map(|_| {
            let u = Vector3::from_fn(|a, _| rng.random_range(spec.bbox_min[a]..spec.bbox_max[a]));
            Gaussian3D::isotropic(u, scale, INIT_OPACITY, INIT_LUMINANCE, sh_degree)
        })
        .collect();
    GaussianSet::new(gaussians, sh_degree)
}
