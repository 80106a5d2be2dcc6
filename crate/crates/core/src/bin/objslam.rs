use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use objslam::assoc::{export_objects, load_objects, save_objects};
use objslam::bench::{
    evaluate_ate, format_report, generate_synthetic, load_tum_sequence, read_trajectory, run_pipeline, write_frame_timings,
    write_trajectory, PipelineConfig, PipelineStats, SceneSpec, SegmentationMode, Sequence,
};

#[derive(Parser)]
#[command(name = "objslam", version, about = "Object-level RGB-D SLAM on scalable TSDF volumes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the pipeline on a TUM sequence or a synthetic scene.
    Run(RunArgs),
    /// Absolute trajectory error of an estimate against ground truth.
    Eval(EvalArgs),
    /// Re-export object point clouds from a saved run.
    ExportObjects(ExportArgs),
}

#[derive(Args)]
#[command(group(clap::ArgGroup::new("input").required(true).args(["dataset", "synthetic", "scene"])))]
struct RunArgs {
    /// TUM RGB-D sequence directory.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Synthetic scene description (JSON).
    #[arg(long)]
    synthetic: Option<PathBuf>,
    /// Built-in synthetic scene.
    #[arg(long, value_enum)]
    scene: Option<BuiltinScene>,
    /// Frame count for a built-in scene.
    #[arg(long, default_value_t = 200)]
    scene_frames: usize,
    /// Pipeline configuration, JSON or TOML.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, short, default_value = "objslam-out")]
    out: PathBuf,
    #[arg(long)]
    max_frames: Option<usize>,
    /// Halve TUM images this many times before processing.
    #[arg(long, default_value_t = 0)]
    downsample: usize,
    #[arg(long)]
    threads: Option<usize>,
    /// Single worker thread, sequential stages.
    #[arg(long)]
    deterministic: bool,
    #[arg(long, value_enum)]
    segmentation: Option<SegArg>,
    /// Directory of precomputed detection files; implies file segmentation.
    #[arg(long)]
    detections: Option<PathBuf>,
    #[arg(long)]
    keyframe_interval: Option<usize>,
    #[arg(long)]
    no_optimize: bool,
    /// Where hidden object volumes are parked.
    #[arg(long)]
    offload_dir: Option<PathBuf>,
    /// Timestamp tolerance for rgb/depth/ground-truth association, seconds.
    #[arg(long, default_value_t = 0.02)]
    max_dt: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum BuiltinScene {
    ThreeBoxes,
    EmptyRoom,
}

#[derive(Clone, Copy, ValueEnum)]
enum SegArg {
    Auto,
    Disabled,
    Oracle,
}

#[derive(Args)]
struct EvalArgs {
    /// Estimated trajectory, TUM format.
    #[arg(long)]
    estimate: PathBuf,
    #[arg(long)]
    ground_truth: PathBuf,
    #[arg(long, default_value_t = 0.02)]
    max_dt: f64,
    /// Print the full result as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct ExportArgs {
    /// `state` directory written by `run`.
    #[arg(long)]
    state: PathBuf,
    #[arg(long, short)]
    out: PathBuf,
    /// Foreground ratio a voxel must exceed to be exported.
    #[arg(long, default_value_t = 0.5)]
    threshold: f32,
}

#[derive(Serialize)]
struct Summary<'a> {
    frames: usize,
    objects: usize,
    ate_rmse: Option<f64>,
    stats: &'a PipelineStats,
}

type AnyError = Box<dyn std::error::Error>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::Eval(a) => eval(a),
        Command::ExportObjects(a) => export(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn config(a: &RunArgs) -> Result<PipelineConfig, AnyError> {
    let mut cfg = match &a.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    cfg.max_frames = a.max_frames.or(cfg.max_frames);
    cfg.threads = a.threads.or(cfg.threads);
    cfg.deterministic |= a.deterministic;
    cfg.optimize &= !a.no_optimize;
    if let Some(n) = a.keyframe_interval {
        cfg.keyframe_interval = n;
    }
    if let Some(d) = &a.offload_dir {
        std::fs::create_dir_all(d)?;
        cfg.offload_dir = Some(d.clone());
    }
    if let Some(s) = a.segmentation {
        cfg.segmentation = match s {
            SegArg::Auto => SegmentationMode::Auto,
            SegArg::Disabled => SegmentationMode::Disabled,
            SegArg::Oracle => SegmentationMode::Oracle,
        };
    }
    if let Some(path) = &a.detections {
        cfg.segmentation = SegmentationMode::Directory { path: path.clone() };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn sequence(a: &RunArgs, cfg: &PipelineConfig) -> Result<Sequence, AnyError> {
    if let Some(dir) = &a.dataset {
        return Ok(load_tum_sequence(dir, a.max_dt)?.downsampled(a.downsample));
    }
    let spec = match (&a.synthetic, a.scene) {
        (Some(path), _) => serde_json::from_str(&std::fs::read_to_string(path)?)?,
        (None, Some(BuiltinScene::ThreeBoxes)) => SceneSpec::three_boxes(a.scene_frames),
        (None, _) => SceneSpec::empty_room(a.scene_frames),
    };
    Ok(generate_synthetic(spec, cfg.sensor_noise)?)
}

fn run(a: RunArgs) -> Result<(), AnyError> {
    let cfg = config(&a)?;
    let seq = sequence(&a, &cfg)?;
    let started = std::time::Instant::now();
    let out = run_pipeline(&seq, &cfg)?;
    let elapsed = started.elapsed();

    std::fs::create_dir_all(&a.out)?;
    let est = &out.estimate;
    if !est.is_empty() {
        write_trajectory(&est.poses, &a.out.join("trajectory.txt"))?;
    }
    if let Some(gt) = &seq.ground_truth {
        write_trajectory(gt, &a.out.join("ground_truth.txt"))?;
    }
    let ate = match &seq.ground_truth {
        Some(gt) if est.len() >= 3 => Some(evaluate_ate(&est.poses, gt, a.max_dt)?.rmse),
        _ => None,
    };
    std::fs::write(a.out.join("report.csv"), format_report(est, ate))?;
    write_frame_timings(est, &a.out.join("frame_timings.csv"))?;
    let objects = out.objects.objects();
    export_objects(objects, &a.out.join("objects"), out.objects.config.fg_ratio_threshold)?;
    save_objects(objects, &a.out.join("state"))?;
    out.graph.save(&a.out.join("graph.txt"))?;
    let summary = Summary {
        frames: est.len(),
        objects: objects.len(),
        ate_rmse: ate,
        stats: &out.stats,
    };
    std::fs::write(a.out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;

    println!(
        "{} frames, {} objects, {} lost, {:.1} s",
        est.len(),
        objects.len(),
        est.lost_frames.len(),
        elapsed.as_secs_f64()
    );
    if let Some(rmse) = ate {
        println!("ATE RMSE {rmse:.4} m");
    }
    println!("results in {}", a.out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<(), AnyError> {
    let est = read_trajectory(&a.estimate)?;
    let gt = read_trajectory(&a.ground_truth)?;
    let r = evaluate_ate(&est, &gt, a.max_dt)?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&r)?);
    } else {
        println!("matched {} poses, ATE RMSE {:.6} m", r.matched, r.rmse);
    }
    Ok(())
}

fn export(a: ExportArgs) -> Result<(), AnyError> {
    let objects = load_objects(&a.state)?;
    let manifest = export_objects(&objects, &a.out, a.threshold)?;
    for m in &manifest {
        println!("object {} label {} points {} -> {}", m.id, m.label, m.points, a.out.join(&m.file).display());
    }
    Ok(())
}
