//! Leave-one-camera-out evaluation: each camera is held out once, the
//! method reconstructs from the others, and the reconstruction is rendered
//! into the held-out camera and compared with its image.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::art::{self, ArtConfig, VoxelGrid};
use crate::camera::CameraView;
use crate::error::{Error, Result};
use crate::gaussian::GaussianSet;
use crate::grid::GridSpec;
use crate::image::Image;
use crate::init::{self, InitConfig};
use crate::memory;
use crate::metrics::{self, MetricsReport, ViewMetrics};
use crate::render::render_forward;
use crate::train::{self, DensityReport, LossRecord, TrainConfig, TrainMonitor};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FlameGsConfig {
    pub init: InitConfig,
    pub train: TrainConfig,
    pub sh_degree: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtMethodConfig {
    pub voxels: usize,
    pub art: ArtConfig,
    pub pixel_stride: usize,
    /// Grid bounds; by default the same camera-centroid cube as the
    /// initializer uses.
    pub bbox: Option<(nalgebra::Vector3<f64>, nalgebra::Vector3<f64>)>,
    pub bbox_fraction: f64,
}

impl Default for ArtMethodConfig {
    fn default() -> Self {
        Self {
            voxels: 120,
            art: ArtConfig::default(),
            pixel_stride: 1,
            bbox: None,
            bbox_fraction: InitConfig::default().bbox_fraction,
        }
    }
}

impl ArtMethodConfig {
    pub fn grid_spec(&self, views: &[CameraView]) -> Result<GridSpec> {
        let n = self.voxels;
        match self.bbox {
            Some((min, max)) => GridSpec::new([n, n, n], min, max),
            None => {
                let centers: Vec<_> = views.iter().map(|v| v.center()).collect();
                let (c, side) = init::default_bbox(&centers, self.bbox_fraction)?;
                GridSpec::cube(c, side, n)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Method {
    FlameGs(FlameGsConfig),
    Art(ArtMethodConfig),
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::FlameGs(_) => "FlameGS",
            Method::Art(_) => "ART",
        }
    }
}

/// Observers for the inner loops. Time spent in hooks is excluded from the
/// reported fold wall time.
pub trait CrossValHooks {
    fn train_step(&mut self, _fold: usize, _record: &LossRecord, _set: &GaussianSet, _views: &[CameraView]) {}
    fn art_sweep(&mut self, _fold: usize, _sweep: usize, _grid: &VoxelGrid, _seconds: f64) {}
}

impl CrossValHooks for () {}

#[derive(Clone, Debug)]
pub enum FoldDetail {
    FlameGs {
        initial_count: usize,
        set: GaussianSet,
        history: Vec<LossRecord>,
        density_events: Vec<DensityReport>,
    },
    Art {
        grid: VoxelGrid,
        rays: usize,
    },
}

#[derive(Clone, Debug)]
pub struct FoldOutcome {
    pub metrics: ViewMetrics,
    pub prediction: Image,
    pub detail: FoldDetail,
}

struct TrainHook<'a> {
    fold: usize,
    hooks: &'a mut dyn CrossValHooks,
}

impl TrainMonitor for TrainHook<'_> {
    fn after_step(&mut self, record: &LossRecord, set: &GaussianSet, views: &[CameraView], _train_seconds: f64) {
        self.hooks.train_step(self.fold, record, set, views);
    }
}

fn run_fold(
    train_views: &mut [CameraView],
    held_out: &CameraView,
    method: &Method,
    fold: usize,
    hooks: &mut dyn CrossValHooks,
) -> Result<(f64, usize, Image, FoldDetail)> {
    match method {
        Method::FlameGs(cfg) => {
            let started = Instant::now();
            let (grid, set) = init::initialize(train_views, &cfg.init, cfg.sh_degree)?;
            let init_seconds = started.elapsed().as_secs_f64();
            let initial_count = set.len();
            let mut tc = cfg.train.clone();
            tc.scene_side = grid.spec.side().max();
            let mut monitor = TrainHook { fold, hooks };
            let out = train::train(train_views, set, &tc, None, &mut monitor)?;
            let prediction = render_forward(&out.set, held_out).pixels;
            let params = out.set.param_count() + 6 * train_views.len();
            Ok((
                init_seconds + out.train_seconds,
                params,
                prediction,
                FoldDetail::FlameGs {
                    initial_count,
                    set: out.set,
                    history: out.history,
                    density_events: out.density_events,
                },
            ))
        }
        Method::Art(cfg) => {
            let started = Instant::now();
            let spec = cfg.grid_spec(train_views)?;
            let (rays, b) = art::measurement_system(train_views, &spec, cfg.pixel_stride);
            let mut hook_seconds = 0.0;
            let grid = art::art_reconstruct(
                &rays,
                &b,
                VoxelGrid::zeros(spec),
                &cfg.art,
                &mut |sweep, grid| {
                    let t = Instant::now();
                    let solver = started.elapsed().as_secs_f64() - hook_seconds;
                    hooks.art_sweep(fold, sweep, grid, solver);
                    hook_seconds += t.elapsed().as_secs_f64();
                },
            )?;
            let seconds = started.elapsed().as_secs_f64() - hook_seconds;
            let prediction = art::project_to_view(&grid, held_out);
            let params = grid.values.len();
            Ok((seconds, params, prediction, FoldDetail::Art { grid, rays: rays.len() }))
        }
    }
}

/// Fixes the default grid bounds from the full rig so every fold works in
/// the same region. Camera poses are geometry, not held-out data.
pub fn resolve_bounds(method: &Method, views: &[CameraView]) -> Result<Method> {
    let mut method = method.clone();
    match &mut method {
        Method::FlameGs(cfg) => {
            if cfg.init.bbox.is_none() {
                let spec = cfg.init.grid_spec(views)?;
                cfg.init.bbox = Some((spec.bbox_min, spec.bbox_max));
            }
        }
        Method::Art(cfg) => {
            if cfg.bbox.is_none() {
                let spec = cfg.grid_spec(views)?;
                cfg.bbox = Some((spec.bbox_min, spec.bbox_max));
            }
        }
    }
    Ok(method)
}

/// Runs every fold in camera order and keeps the per-fold artifacts.
pub fn cross_validate_detailed(
    views: &[CameraView],
    method: &Method,
    hooks: &mut dyn CrossValHooks,
) -> Result<Vec<FoldOutcome>> {
    if views.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "cross-validation needs at least 3 cameras, got {}",
            views.len()
        )));
    }
    let method = &resolve_bounds(method, views)?;
    let mut outcomes = Vec::with_capacity(views.len());
    for fold in 0..views.len() {
        let held_out = views[fold].clone();
        let mut train_views: Vec<CameraView> = views
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != fold)
            .map(|(_, v)| v.clone())
            .collect();
        let base = memory::current_bytes();
        memory::reset_peak();
        let (seconds, params, prediction, detail) =
            run_fold(&mut train_views, &held_out, method, fold, hooks)?;
        let peak = memory::peak_bytes().saturating_sub(base);
        let mut m = metrics::evaluate_view(&held_out.id, &prediction, &held_out.image)?;
        m.wall_seconds = seconds;
        m.peak_memory_bytes = peak as u64;
        m.parameter_count = params;
        outcomes.push(FoldOutcome {
            metrics: m,
            prediction,
            detail,
        });
    }
    Ok(outcomes)
}

pub fn report(method: &Method, outcomes: &[FoldOutcome]) -> MetricsReport {
    MetricsReport::from_folds(
        method.name(),
        outcomes.iter().map(|o| o.metrics.clone()).collect(),
    )
}

/// One fold per camera; per-fold and mean metrics with timing and memory.
pub fn cross_validate(views: &[CameraView], method: &Method) -> Result<MetricsReport> {
    let outcomes = cross_validate_detailed(views, method, &mut ())?;
    Ok(report(method, &outcomes))
}
