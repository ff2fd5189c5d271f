use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use flamegs::art::{self, ArtConfig, VoxelGrid};
use flamegs::camera::CameraView;
use flamegs::crossval::{self, ArtMethodConfig, FlameGsConfig, Method};
use flamegs::init::{self, InitConfig};
use flamegs::io;
use flamegs::metrics::{self, format_table};
use flamegs::phantom::{self, PhantomConfig};
use flamegs::render::render_forward;
use flamegs::train::{self, CheckpointSink, LearningRates, TrainConfig};
use nalgebra::Vector3;
use serde_json::json;

use crate::manifest::{hash_inputs, ManifestWriter, RunManifest, RunStatus};
use crate::{ArtArgs, ArtCmd, Command, EvalCmd, ExportCmd, InitArgs, InitCmd, MethodName, PhantomArgs, TrainArgs, TrainCmd};

/// `foo.flgs` -> `foo.flgs.manifest.json`
fn sibling_manifest(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    out.with_file_name(name)
}

fn has_flag(argv: &[String], flag: &str) -> bool {
    argv.iter()
        .any(|a| a == flag || a.starts_with(&format!("{flag}=")))
}

struct Plan {
    manifest_path: PathBuf,
    command: &'static str,
    config: serde_json::Value,
    seed: Option<u64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

fn with_manifest(plan: Plan, argv: Vec<String>, threads: usize, body: impl FnOnce() -> Result<()>) -> Result<()> {
    let input_refs: Vec<&Path> = plan.inputs.iter().map(PathBuf::as_path).collect();
    let manifest = RunManifest {
        tool: "flamegs".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: plan.command.into(),
        argv,
        config: plan.config,
        seed: plan.seed,
        threads,
        input_hashes: hash_inputs(&input_refs)?,
        outputs: plan.outputs,
        status: RunStatus::Running,
        partial_outputs: false,
        error: None,
    };
    let writer = ManifestWriter::start(plan.manifest_path, manifest)?;
    let result = body();
    writer.finish(&result)?;
    result
}

pub fn dispatch(command: Command, mut argv: Vec<String>, threads: usize) -> Result<()> {
    if !has_flag(&argv, "--threads") {
        argv.push("--threads".into());
        argv.push(threads.to_string());
    }
    match command {
        Command::Phantom(a) => phantom_cmd(a, argv, threads),
        Command::Init(a) => init_cmd(a, argv, threads),
        Command::Train(mut a) => {
            if a.run_dir.is_none() {
                let secs = SystemTime::now().duration_since(UNIX_EPOCH)?.as_secs();
                let dir = a.runs_root.join(format!("run_{secs}_seed{}", a.seed));
                argv.push("--run-dir".into());
                argv.push(dir.display().to_string());
                a.run_dir = Some(dir);
            }
            train_cmd(a, argv, threads)
        }
        Command::Art(a) => art_cmd(a, argv, threads),
        Command::Eval(a) => eval_cmd(a, argv, threads),
        Command::ExportVolume(a) => export_cmd(a, argv, threads),
        Command::Rerun { .. } => unreachable!("handled before dispatch"),
    }
}

fn phantom_cmd(a: PhantomArgs, argv: Vec<String>, threads: usize) -> Result<()> {
    let config = PhantomConfig {
        components: a.components as usize,
        seed: a.seed,
        ..PhantomConfig::default()
    };
    let (width, height) = a.size;
    let plan = Plan {
        manifest_path: a.out.join("manifest.json"),
        command: "phantom",
        config: json!({
            "phantom": config,
            "cameras": a.cameras,
            "radius": a.radius,
            "width": width,
            "height": height,
            "focal": a.focal,
            "samples": a.samples,
        }),
        seed: Some(a.seed),
        inputs: vec![],
        outputs: vec![a.out.clone()],
    };
    with_manifest(plan, argv, threads, || {
        let spec = phantom::generate(&config)?;
        let rig = phantom::make_rig(a.cameras as usize, a.radius, &Vector3::zeros(), width, height, a.focal)?;
        let data = phantom::render_phantom_views(&spec, &rig, a.samples)?;
        io::save_dataset(&a.out, &data.rig, &data.images, data.phantom.as_ref())?;
        println!("wrote {} views to {}", data.len(), a.out.display());
        Ok(())
    })
}

struct Loaded {
    /// Every camera, used only for the default grid bounds.
    all: Vec<CameraView>,
    train: Vec<CameraView>,
    held: Option<CameraView>,
}

/// Loads a dataset and splits off the held-out camera, if any.
fn load_views(dir: &Path, holdout: Option<&str>) -> Result<Loaded> {
    let (rig, images, _) = io::load_dataset(dir).with_context(|| format!("loading dataset {}", dir.display()))?;
    let all = rig.views(&images)?;
    let Some(id) = holdout else {
        return Ok(Loaded { train: all.clone(), all, held: None });
    };
    let (held, train): (Vec<_>, Vec<_>) = all.iter().cloned().partition(|v| v.id == id);
    match held.into_iter().next() {
        Some(h) => Ok(Loaded { all, train, held: Some(h) }),
        None => bail!("no camera with id {id:?} in {}", dir.display()),
    }
}

fn resolve_init_bbox(config: &mut InitConfig, all: &[CameraView]) -> Result<()> {
    if config.bbox.is_none() {
        let spec = config.grid_spec(all)?;
        config.bbox = Some((spec.bbox_min, spec.bbox_max));
    }
    Ok(())
}

fn bbox_pair(b: Option<[f64; 6]>) -> Option<(Vector3<f64>, Vector3<f64>)> {
    b.map(|b| (Vector3::new(b[0], b[1], b[2]), Vector3::new(b[3], b[4], b[5])))
}

fn init_config(a: &InitArgs, seed: u64) -> InitConfig {
    InitConfig {
        grid_dims: [a.grid; 3],
        intensity_threshold: a.tau,
        min_view_agreement: a.agreement,
        pixel_stride: a.stride,
        seed,
        bbox: bbox_pair(a.bbox),
        ..InitConfig::default()
    }
}

fn train_config(a: &TrainArgs, seed: u64, checkpoint_interval: usize) -> TrainConfig {
    TrainConfig {
        iterations: a.iters,
        lambda_dssim: a.lambda,
        pose_opt_start: a.pose_opt_start,
        densify_start: a.densify_start,
        densify_end: a.densify_end,
        densify_interval: a.densify_interval,
        prune_opacity: a.prune_opacity,
        densify_grad_threshold: a.densify_grad_threshold,
        learning_rates: LearningRates {
            position: a.lr_position,
            log_scale: a.lr_scale,
            rotation: a.lr_rotation,
            opacity_logit: a.lr_opacity,
            sh: a.lr_sh,
            pose: a.lr_pose,
            ..LearningRates::default()
        },
        checkpoint_interval,
        seed,
        ..TrainConfig::default()
    }
}

fn art_method_config(a: &ArtArgs, bbox: Option<[f64; 6]>) -> ArtMethodConfig {
    ArtMethodConfig {
        voxels: a.voxels,
        art: ArtConfig {
            relaxation: a.relaxation,
            iterations: a.art_iters,
            materialize: a.materialize,
        },
        pixel_stride: a.pixel_stride,
        bbox: bbox_pair(bbox),
        ..ArtMethodConfig::default()
    }
}

fn init_cmd(a: InitCmd, argv: Vec<String>, threads: usize) -> Result<()> {
    let config = init_config(&a.init, a.seed);
    let mut outputs = vec![a.out.clone()];
    outputs.extend(a.dump_occupancy.clone());
    let plan = Plan {
        manifest_path: sibling_manifest(&a.out),
        command: "init",
        config: json!({ "init": config, "sh_degree": a.init.sh_degree, "holdout": a.holdout }),
        seed: Some(a.seed),
        inputs: vec![a.data.clone()],
        outputs,
    };
    with_manifest(plan, argv, threads, || {
        let data = load_views(&a.data, a.holdout.as_deref())?;
        let views = data.train;
        let mut config = config.clone();
        resolve_init_bbox(&mut config, &data.all)?;
        let (grid, set) = init::initialize(&views, &config, a.init.sh_degree)?;
        let occupied = grid.occupied(config.agreement(views.len())).len();
        io::write_flgs(&a.out, &set)?;
        if let Some(path) = &a.dump_occupancy {
            fs::write(path, io::encode_floc(&grid.spec, &grid.hit_counts())?)?;
        }
        println!("occupied voxels: {occupied}");
        println!("seed gaussians: {}", set.len());
        Ok(())
    })
}

fn train_cmd(a: TrainCmd, argv: Vec<String>, threads: usize) -> Result<()> {
    let run_dir = a.run_dir.clone().expect("resolved in dispatch");
    let init_cfg = init_config(&a.init_args, a.seed);
    let config = train_config(&a.train, a.seed, a.checkpoint_interval);
    let mut inputs = vec![a.data.clone()];
    inputs.extend(a.init.clone());
    let plan = Plan {
        manifest_path: run_dir.join("manifest.json"),
        command: "train",
        config: json!({
            "init": init_cfg,
            "train": config,
            "sh_degree": a.init_args.sh_degree,
            "holdout": a.holdout,
            "init_snapshot": a.init,
        }),
        seed: Some(a.seed),
        inputs,
        outputs: vec![run_dir.clone()],
    };
    with_manifest(plan, argv, threads, || {
        let data = load_views(&a.data, a.holdout.as_deref())?;
        let (mut views, held) = (data.train, data.held);
        let mut init_cfg = init_cfg.clone();
        resolve_init_bbox(&mut init_cfg, &data.all)?;
        let spec = init_cfg.grid_spec(&views)?;
        let set = match &a.init {
            Some(path) => io::read_flgs(path)?,
            None => init::initialize(&views, &init_cfg, a.init_args.sh_degree)?.1,
        };
        let mut config = config.clone();
        config.scene_side = spec.side().max();
        let sink = CheckpointSink::new(&run_dir)?;
        let out = train::train(&mut views, set, &config, Some(&sink), &mut ())?;
        println!(
            "trained {} iterations in {:.1}s, {} gaussians",
            config.iterations,
            out.train_seconds,
            out.set.len()
        );
        if let Some(h) = held {
            let pred = render_forward(&out.set, &h).pixels;
            let mut m = metrics::evaluate_view(&h.id, &pred, &h.image)?;
            m.wall_seconds = out.train_seconds;
            m.parameter_count = out.set.param_count() + 6 * views.len();
            fs::write(run_dir.join("eval.json"), serde_json::to_string_pretty(&m)?)?;
            println!(
                "held-out {}: MAE {:.5}  PSNR {:.2}  SSIM {:.4}",
                m.view_id,
                m.mae,
                m.psnr_value(),
                m.ssim
            );
        }
        Ok(())
    })
}

fn art_cmd(a: ArtCmd, argv: Vec<String>, threads: usize) -> Result<()> {
    let config = art_method_config(&a.art, a.bbox);
    let eval_path = a.out.with_extension("eval.json");
    let mut outputs = vec![a.out.clone()];
    if a.holdout.is_some() {
        outputs.push(eval_path.clone());
    }
    let plan = Plan {
        manifest_path: sibling_manifest(&a.out),
        command: "art",
        config: json!({ "art": config, "holdout": a.holdout }),
        seed: None,
        inputs: vec![a.data.clone()],
        outputs,
    };
    with_manifest(plan, argv, threads, || {
        let data = load_views(&a.data, a.holdout.as_deref())?;
        let (views, held) = (data.train, data.held);
        let spec = config.grid_spec(&data.all)?;
        let (rays, b) = art::measurement_system(&views, &spec, config.pixel_stride);
        let grid = art::art_reconstruct(&rays, &b, VoxelGrid::zeros(spec), &config.art, &mut |_, _| {})?;
        grid.write_flvl(&a.out)?;
        println!("reconstructed {}^3 voxels from {} rays", config.voxels, rays.len());
        if let Some(h) = held {
            let pred = art::project_to_view(&grid, &h);
            let m = metrics::evaluate_view(&h.id, &pred, &h.image)?;
            fs::write(&eval_path, serde_json::to_string_pretty(&m)?)?;
            println!(
                "held-out {}: MAE {:.5}  PSNR {:.2}  SSIM {:.4}",
                m.view_id,
                m.mae,
                m.psnr_value(),
                m.ssim
            );
        }
        Ok(())
    })
}

fn eval_cmd(a: EvalCmd, argv: Vec<String>, threads: usize) -> Result<()> {
    let method = match a.method {
        MethodName::Flamegs => Method::FlameGs(FlameGsConfig {
            init: init_config(&a.init_args, a.seed),
            train: train_config(&a.train, a.seed, 0),
            sh_degree: a.init_args.sh_degree,
        }),
        MethodName::Art => Method::Art(art_method_config(&a.art, a.init_args.bbox)),
    };
    let table_path = a.out.with_extension("txt");
    let plan = Plan {
        manifest_path: sibling_manifest(&a.out),
        command: "eval",
        config: serde_json::to_value(&method)?,
        seed: Some(a.seed),
        inputs: vec![a.data.clone()],
        outputs: vec![a.out.clone(), table_path.clone()],
    };
    with_manifest(plan, argv, threads, || {
        let views = load_views(&a.data, None)?.all;
        let report = crossval::cross_validate(&views, &method)?;
        if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(&a.out, serde_json::to_string_pretty(&report)?)?;
        let table = format_table(std::slice::from_ref(&report));
        fs::write(&table_path, &table)?;
        print!("{table}");
        Ok(())
    })
}

fn export_cmd(a: ExportCmd, argv: Vec<String>, threads: usize) -> Result<()> {
    let mut inputs = vec![a.input.clone()];
    inputs.extend(a.data.clone());
    let plan = Plan {
        manifest_path: sibling_manifest(&a.out),
        command: "export-volume",
        config: json!({ "voxels": a.voxels, "bbox": a.bbox }),
        seed: None,
        inputs,
        outputs: vec![a.out.clone()],
    };
    with_manifest(plan, argv, threads, || {
        let set = io::read_flgs(&a.input)?;
        let config = ArtMethodConfig {
            voxels: a.voxels,
            bbox: bbox_pair(a.bbox),
            ..ArtMethodConfig::default()
        };
        let spec = match (&config.bbox, &a.data) {
            (Some(_), _) => config.grid_spec(&[])?,
            (None, Some(dir)) => config.grid_spec(&load_views(dir, None)?.all)?,
            (None, None) => bail!("export-volume needs --bbox or --data to place the grid"),
        };
        let grid = art::sample_gaussians_to_grid(&set, &spec);
        grid.write_flvl(&a.out)?;
        println!("sampled {} gaussians onto {}^3 voxels", set.len(), a.voxels);
        Ok(())
    })
}
