//! Joint optimization of Gaussians and camera pose corrections.
//!
//! One training view is rendered per step (round robin over a shuffled
//! order that is redrawn every epoch). The loss is
//! `(1 - λ) L1 + λ (1 - SSIM) / 2`; gradients flow through the renderer to
//! every Gaussian parameter and, once `pose_opt_start` is reached, into the
//! pose delta of the rendered view. Adaptive density control prunes nearly
//! transparent Gaussians and clones or splits those with large screen-space
//! positional gradients on a fixed schedule.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{Vector3, Vector4};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::camera::{CameraView, PoseDelta};
use crate::error::{Error, Result};
use crate::gaussian::GaussianSet;
use crate::image::Image;
use crate::io;
use crate::metrics;
use crate::optim::AdamGroup;
use crate::render::{render_backward, render_forward};
use crate::sh;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearningRates {
    pub position: f64,
    /// Position rate at the last iteration relative to the first
    /// (exponential decay in between).
    pub position_final_factor: f64,
    pub log_scale: f64,
    pub rotation: f64,
    pub opacity_logit: f64,
    pub sh: f64,
    pub pose: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            position: 1.6e-4,
            position_final_factor: 0.01,
            log_scale: 5e-3,
            rotation: 1e-3,
            opacity_logit: 5e-2,
            sh: 2.5e-3,
            pose: 1e-4,
        }
    }
}

impl LearningRates {
    pub fn zero() -> Self {
        Self {
            position: 0.0,
            position_final_factor: 1.0,
            log_scale: 0.0,
            rotation: 0.0,
            opacity_logit: 0.0,
            sh: 0.0,
            pose: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub lambda_dssim: f64,
    pub pose_opt_start: usize,
    pub densify_start: usize,
    pub densify_end: usize,
    pub densify_interval: usize,
    pub prune_opacity: f64,
    pub densify_grad_threshold: f64,
    /// Gaussians whose largest scale is below this fraction of `scene_side`
    /// are cloned; larger ones are split.
    pub clone_scale_fraction: f64,
    /// Side length of the reconstruction region (the carving grid bbox).
    pub scene_side: f64,
    pub split_scale_divisor: f64,
    pub learning_rates: LearningRates,
    pub checkpoint_interval: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 10_000,
            lambda_dssim: 0.2,
            pose_opt_start: 500,
            densify_start: 500,
            densify_end: 3000,
            densify_interval: 100,
            prune_opacity: 0.05,
            densify_grad_threshold: 2e-4,
            clone_scale_fraction: 0.01,
            scene_side: 1.0,
            split_scale_divisor: 1.6,
            learning_rates: LearningRates::default(),
            checkpoint_interval: 1000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda_dssim) {
            return Err(Error::InvalidParameter(format!(
                "lambda_dssim {} outside [0, 1]",
                self.lambda_dssim
            )));
        }
        if self.densify_interval == 0 {
            return Err(Error::InvalidParameter("densify_interval must be positive".into()));
        }
        if !(self.scene_side > 0.0) || !(self.split_scale_divisor > 1.0) {
            return Err(Error::InvalidParameter(
                "scene_side must be positive and split_scale_divisor above 1".into(),
            ));
        }
        Ok(())
    }

    fn position_lr(&self, iteration: usize) -> f64 {
        let lr = &self.learning_rates;
        let span = self.iterations.saturating_sub(1).max(1) as f64;
        let frac = (iteration as f64 / span).min(1.0);
        lr.position * lr.position_final_factor.powf(frac)
    }

    pub fn is_density_iteration(&self, iteration: usize) -> bool {
        iteration >= self.densify_start
            && iteration <= self.densify_end
            && iteration.is_multiple_of(self.densify_interval)
    }
}

#[derive(Clone, Debug)]
pub struct LossValue {
    pub loss: f64,
    pub l1: f64,
    pub dssim: f64,
    pub grad: Image,
}

/// `(1 - λ) L1 + λ D-SSIM` and its gradient with respect to `rendered`.
/// L1 uses the raw render; SSIM sees it clamped to `[0, 1]`.
pub fn compute_loss(rendered: &Image, target: &Image, lambda: f64) -> Result<LossValue> {
    rendered.check_same_shape(target)?;
    let n = rendered.len() as f64;
    let mut l1 = 0.0;
    let mut grad = Image::zeros(rendered.width(), rendered.height());
    for ((g, r), t) in grad.data_mut().iter_mut().zip(rendered.data()).zip(target.data()) {
        let d = r - t;
        l1 += d.abs();
        *g = (1.0 - lambda) * d.signum() * (d != 0.0) as u8 as f64 / n;
    }
    l1 /= n;
    let mut dssim = 0.0;
    if lambda > 0.0 {
        let clamped = rendered.clamped();
        let (s, ds) = metrics::ssim_with_grad(&clamped, target)?;
        dssim = (1.0 - s) / 2.0;
        for ((g, d), r) in grad.data_mut().iter_mut().zip(ds.data()).zip(rendered.data()) {
            if (0.0..=1.0).contains(r) {
                *g -= 0.5 * lambda * d;
            }
        }
    }
    Ok(LossValue {
        loss: (1.0 - lambda) * l1 + lambda * dssim,
        l1,
        dssim,
        grad,
    })
}

/// Adam moments for every parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub position: AdamGroup,
    pub log_scale: AdamGroup,
    pub rotation: AdamGroup,
    pub opacity_logit: AdamGroup,
    pub sh: AdamGroup,
    /// One row of six (axis-angle, translation) per training view.
    pub pose: AdamGroup,
}

impl OptimizerState {
    pub fn new(n_gaussians: usize, sh_degree: u32, n_views: usize) -> Self {
        Self {
            position: AdamGroup::new(3, n_gaussians),
            log_scale: AdamGroup::new(3, n_gaussians),
            rotation: AdamGroup::new(4, n_gaussians),
            opacity_logit: AdamGroup::new(1, n_gaussians),
            sh: AdamGroup::new(sh::coeff_count(sh_degree), n_gaussians),
            pose: AdamGroup::new(6, n_views),
        }
    }

    fn gaussian_groups(&mut self) -> [&mut AdamGroup; 5] {
        [
            &mut self.position,
            &mut self.log_scale,
            &mut self.rotation,
            &mut self.opacity_logit,
            &mut self.sh,
        ]
    }

    fn retain(&mut self, keep: &[bool]) {
        for g in self.gaussian_groups() {
            g.retain(keep);
        }
    }

    fn extend_zeros(&mut self, rows: usize) {
        for g in self.gaussian_groups() {
            g.extend_zeros(rows);
        }
    }
}

/// Screen-space gradient statistics gathered between density-control events.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DensityControlState {
    pub grad_norm_sum: Vec<f64>,
    pub observations: Vec<u32>,
    pub position_grad_sum: Vec<Vector3<f64>>,
}

impl DensityControlState {
    pub fn new(n: usize) -> Self {
        Self {
            grad_norm_sum: vec![0.0; n],
            observations: vec![0; n],
            position_grad_sum: vec![Vector3::zeros(); n],
        }
    }

    pub fn reset(&mut self, n: usize) {
        *self = Self::new(n);
    }

    pub fn mean_grad(&self, i: usize) -> f64 {
        if self.observations[i] == 0 {
            0.0
        } else {
            self.grad_norm_sum[i] / self.observations[i] as f64
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DensityReport {
    pub iteration: usize,
    pub pruned: usize,
    pub cloned: usize,
    pub split: usize,
    pub count_before: usize,
    pub count_after: usize,
    /// Smallest opacity among the Gaussians left after the event.
    pub min_opacity_after: f64,
}

/// Prunes, clones and splits; rows of `opt` and `dc` follow the set.
pub fn adaptive_density_control(
    set: &mut GaussianSet,
    dc: &mut DensityControlState,
    opt: &mut OptimizerState,
    config: &TrainConfig,
    iteration: usize,
    rng: &mut ChaCha8Rng,
) -> Result<DensityReport> {
    let before = set.len();
    let keep: Vec<bool> = set
        .gaussians
        .iter()
        .map(|g| g.opacity() >= config.prune_opacity)
        .collect();
    let pruned = keep.iter().filter(|k| !**k).count();

    let size_limit = config.clone_scale_fraction * config.scene_side;
    let mut clones = Vec::new();
    let mut children = Vec::new();
    let mut split_parent = vec![false; before];
    for (i, g) in set.gaussians.iter().enumerate() {
        if !keep[i] || dc.mean_grad(i) < config.densify_grad_threshold {
            continue;
        }
        let max_scale = g.scales().max();
        if max_scale <= size_limit {
            let mut c = g.clone();
            let dir = dc.position_grad_sum[i];
            let norm = dir.norm();
            if norm > 0.0 {
                c.position -= dir / norm * max_scale;
            }
            clones.push(c);
        } else {
            split_parent[i] = true;
            let rot = g.rotation_matrix();
            let scales = g.scales();
            for _ in 0..2 {
                let e = Vector3::new(
                    StandardNormal.sample(rng),
                    StandardNormal.sample(rng),
                    StandardNormal.sample(rng),
                );
                let mut child = g.clone();
                child.position = g.position + rot * scales.component_mul(&e);
                child.log_scale = g.log_scale.add_scalar(-config.split_scale_divisor.ln());
                children.push(child);
            }
        }
    }

    let survive: Vec<bool> = keep
        .iter()
        .zip(&split_parent)
        .map(|(k, s)| *k && !*s)
        .collect();
    let mut gaussians: Vec<_> = set
        .gaussians
        .drain(..)
        .zip(&survive)
        .filter_map(|(g, s)| s.then_some(g))
        .collect();
    opt.retain(&survive);
    let added = clones.len() + children.len();
    let cloned = clones.len();
    let split = split_parent.iter().filter(|s| **s).count();
    gaussians.extend(clones);
    gaussians.extend(children);
    opt.extend_zeros(added);
    set.gaussians = gaussians;
    dc.reset(set.len());

    if set.is_empty() {
        return Err(Error::DegenerateCollapse { iteration });
    }
    let min_opacity_after = set
        .gaussians
        .iter()
        .map(|g| g.opacity())
        .fold(f64::INFINITY, f64::min);
    Ok(DensityReport {
        iteration,
        pruned,
        cloned,
        split,
        count_before: before,
        count_after: set.len(),
        min_opacity_after,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub wall_seconds: f64,
    pub loss: f64,
    pub l1: f64,
    pub dssim: f64,
    pub gaussian_count: usize,
    pub view: usize,
}

pub const LOSS_CSV_HEADER: &str = "iteration,wall_seconds,loss,l1,dssim,gaussian_count,view";

impl LossRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.17e},{:.17e},{:.17e},{}",
            self.iteration, self.wall_seconds, self.loss, self.l1, self.dssim, self.gaussian_count
        )
    }
}

/// Mutable optimization state carried between steps.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub iteration: usize,
    pub opt: OptimizerState,
    pub dc: DensityControlState,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    pub initial_deltas: Vec<PoseDelta>,
}

impl TrainState {
    pub fn new(set: &GaussianSet, views: &[CameraView], config: &TrainConfig) -> Self {
        Self {
            iteration: 0,
            opt: OptimizerState::new(set.len(), set.sh_degree, views.len()),
            dc: DensityControlState::new(set.len()),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            order: (0..views.len()).collect(),
            cursor: 0,
            initial_deltas: views.iter().map(|v| v.pose_delta).collect(),
        }
    }

    fn next_view(&mut self) -> usize {
        if self.cursor == 0 {
            self.order.shuffle(&mut self.rng);
        }
        let v = self.order[self.cursor];
        self.cursor = (self.cursor + 1) % self.order.len();
        v
    }
}

/// One optimization step on one view. Returns the loss of the pre-update
/// parameters; `wall_seconds` is left at zero for the caller to fill.
pub fn train_step(
    state: &mut TrainState,
    views: &mut [CameraView],
    set: &mut GaussianSet,
    config: &TrainConfig,
) -> Result<LossRecord> {
    if views.is_empty() {
        return Err(Error::InvalidArgument("no training views".into()));
    }
    if set.is_empty() {
        return Err(Error::InvalidArgument("empty Gaussian set".into()));
    }
    let iteration = state.iteration;
    let vi = state.next_view();
    let view = &views[vi];
    let frame = render_forward(set, view);
    let loss = compute_loss(&frame.pixels, &view.image, config.lambda_dssim)?;
    if !loss.loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            iteration,
            snapshot: None,
        });
    }
    let grads = render_backward(set, view, &frame, &loss.grad)?;

    let lr = &config.learning_rates;
    let lr_pos = config.position_lr(iteration);
    let nc = sh::coeff_count(set.sh_degree);
    let opt = &mut state.opt;
    for g in opt.gaussian_groups() {
        g.begin_step();
    }
    for (i, g) in set.gaussians.iter_mut().enumerate() {
        let mut p = [g.position.x, g.position.y, g.position.z];
        opt.position.update_row(i, &mut p, grads.position[i].as_slice(), lr_pos);
        g.position = Vector3::from(p);

        let mut s = [g.log_scale.x, g.log_scale.y, g.log_scale.z];
        opt.log_scale.update_row(i, &mut s, grads.log_scale[i].as_slice(), lr.log_scale);
        g.log_scale = Vector3::from(s);

        let mut r = [g.rotation[0], g.rotation[1], g.rotation[2], g.rotation[3]];
        opt.rotation.update_row(i, &mut r, grads.rotation[i].as_slice(), lr.rotation);
        g.rotation = Vector4::from(r);
        g.normalize_rotation();

        let mut o = [g.opacity_logit];
        opt.opacity_logit.update_row(i, &mut o, &[grads.opacity_logit[i]], lr.opacity_logit);
        g.opacity_logit = o[0];

        opt.sh.update_row(i, &mut g.sh_coeffs, &grads.sh[i * nc..(i + 1) * nc], lr.sh);
    }

    if iteration >= config.pose_opt_start {
        opt.pose.begin_step();
        let view = &mut views[vi];
        let d = &mut view.pose_delta;
        let mut p = [
            d.delta_rot.x,
            d.delta_rot.y,
            d.delta_rot.z,
            d.delta_t.x,
            d.delta_t.y,
            d.delta_t.z,
        ];
        let g = [
            grads.delta_rot.x,
            grads.delta_rot.y,
            grads.delta_rot.z,
            grads.delta_t.x,
            grads.delta_t.y,
            grads.delta_t.z,
        ];
        opt.pose.update_row(vi, &mut p, &g, lr.pose);
        d.delta_rot = Vector3::new(p[0], p[1], p[2]);
        d.delta_t = Vector3::new(p[3], p[4], p[5]);
    }

    if iteration < config.densify_end {
        let dc = &mut state.dc;
        for i in 0..set.len() {
            if grads.visible[i] {
                dc.grad_norm_sum[i] += grads.mean2d_ndc[i].norm();
                dc.observations[i] += 1;
                dc.position_grad_sum[i] += grads.position[i];
            }
        }
    }

    state.iteration += 1;
    Ok(LossRecord {
        iteration,
        wall_seconds: 0.0,
        loss: loss.loss,
        l1: loss.l1,
        dssim: loss.dssim,
        gaussian_count: set.len(),
        view: vi,
    })
}

/// Output of a complete optimization run.
#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub set: GaussianSet,
    pub pose_deltas: Vec<(String, PoseDelta)>,
    pub history: Vec<LossRecord>,
    pub density_events: Vec<DensityReport>,
    /// Optimization time, excluding checkpoint I/O and monitoring callbacks.
    pub train_seconds: f64,
}

/// Where and how often checkpoints are written.
#[derive(Clone, Debug)]
pub struct CheckpointSink {
    pub dir: PathBuf,
}

impl CheckpointSink {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    fn write_snapshot(&self, tag: &str, set: &GaussianSet, views: &[CameraView]) -> Result<PathBuf> {
        let path = self.dir.join(format!("{tag}.flgs"));
        io::write_flgs(&path, set)?;
        io::write_pose_deltas(&self.dir.join(format!("{tag}_pose_deltas.json")), views)?;
        Ok(path)
    }
}

/// Hook invoked after every step; time spent inside it is excluded from
/// the reported training time.
pub trait TrainMonitor {
    fn after_step(&mut self, _record: &LossRecord, _set: &GaussianSet, _views: &[CameraView], _train_seconds: f64) {}
}

impl TrainMonitor for () {}

/// Runs the full schedule. `views` keep their optimized pose deltas.
pub fn train(
    views: &mut [CameraView],
    init: GaussianSet,
    config: &TrainConfig,
    sink: Option<&CheckpointSink>,
    monitor: &mut dyn TrainMonitor,
) -> Result<TrainOutput> {
    config.validate()?;
    init.validate()?;
    let mut set = init;
    let mut state = TrainState::new(&set, views, config);
    let mut history = Vec::with_capacity(config.iterations);
    let mut density_events = Vec::new();
    let mut train_seconds = 0.0;
    let mut csv = None;
    if let Some(sink) = sink {
        fs::write(sink.dir.join("config.json"), serde_json::to_string_pretty(config)?)?;
        sink.write_snapshot("initial", &set, views)?;
        let mut f = std::io::BufWriter::new(fs::File::create(sink.dir.join("loss.csv"))?);
        writeln!(f, "{LOSS_CSV_HEADER}")?;
        csv = Some(f);
    }

    for iteration in 0..config.iterations {
        let started = Instant::now();
        let step = train_step(&mut state, views, &mut set, config);
        let mut record = match step {
            Ok(r) => r,
            Err(Error::NonFiniteLoss { iteration, .. }) => {
                let snapshot = match sink {
                    Some(s) => s.write_snapshot(&format!("failed_{iteration:06}"), &set, views).ok(),
                    None => None,
                };
                return Err(Error::NonFiniteLoss { iteration, snapshot });
            }
            Err(e) => return Err(e),
        };
        if config.is_density_iteration(iteration) {
            let report = adaptive_density_control(
                &mut set,
                &mut state.dc,
                &mut state.opt,
                config,
                iteration,
                &mut state.rng,
            )?;
            density_events.push(report);
        }
        train_seconds += started.elapsed().as_secs_f64();
        record.wall_seconds = train_seconds;
        record.gaussian_count = set.len();

        if let Some(f) = csv.as_mut() {
            writeln!(f, "{},{}", record.csv_row(), views[record.view].id)?;
        }
        if let Some(sink) = sink {
            let done = iteration + 1;
            if config.checkpoint_interval > 0 && done % config.checkpoint_interval == 0 {
                sink.write_snapshot(&format!("checkpoint_{done:06}"), &set, views)?;
                if let Some(f) = csv.as_mut() {
                    f.flush()?;
                }
            }
        }
        monitor.after_step(&record, &set, views, train_seconds);
        history.push(record);
    }

    if let Some(sink) = sink {
        // With no iterations the initial snapshot is the whole result.
        if config.iterations > 0 {
            sink.write_snapshot("final", &set, views)?;
        }
        if let Some(mut f) = csv {
            f.flush()?;
        }
        fs::write(
            sink.dir.join("density_events.json"),
            serde_json::to_string_pretty(&density_events)?,
        )?;
    }
    Ok(TrainOutput {
        pose_deltas: views.iter().map(|v| (v.id.clone(), v.pose_delta)).collect(),
        set,
        history,
        density_events,
        train_seconds,
    })
}

/// Loads a loss history CSV written by [`train`].
pub fn read_loss_csv(path: &Path) -> Result<Vec<(usize, f64, f64, f64, f64, usize)>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 7 {
            return Err(Error::format("loss csv", format!("line {} has {} columns", n + 1, cols.len())));
        }
        let f = |i: usize| -> Result<f64> {
            cols[i]
                .parse()
                .map_err(|_| Error::format("loss csv", format!("line {}: bad number {}", n + 1, cols[i])))
        };
        out.push((
            cols[0].parse().map_err(|_| Error::format("loss csv", "bad iteration"))?,
            f(1)?,
            f(2)?,
            f(3)?,
            f(4)?,
            cols[5].parse().map_err(|_| Error::format("loss csv", "bad count"))?,
        ));
    }
    Ok(out)
}
