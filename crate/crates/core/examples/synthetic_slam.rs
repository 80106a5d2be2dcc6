//! End to end on the three-box scene: tracking, segmentation, object
//! fusion and pose-graph optimization, then trajectory and object quality.
//!
//! cargo run --release --example synthetic_slam -- [frames]

use objslam::bench::{
    evaluate_ate, format_report, generate_synthetic, object_quality, run_pipeline, PipelineConfig, SceneSpec, SensorNoise,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let frames = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(60);
    let seq = generate_synthetic(SceneSpec::three_boxes(frames), SensorNoise::default())?;
    let cfg = PipelineConfig::default();

    let started = std::time::Instant::now();
    let out = run_pipeline(&seq, &cfg)?;
    println!("{frames} frames in {:.1} s", started.elapsed().as_secs_f64());

    let gt = seq.ground_truth.as_ref().expect("synthetic scenes carry ground truth");
    let ate = evaluate_ate(&out.estimate.poses, gt, 1e-3)?;
    print!("{}", format_report(&out.estimate, Some(ate.rmse)));

    let scene = seq.scene().expect("synthetic");
    for q in object_quality(out.objects.objects(), scene, &ate.alignment, cfg.assoc.fg_ratio_threshold)? {
        println!(
            "object {} label {:2}: {} points, rms {:.2} voxels, spill removed {:.1}%",
            q.object,
            q.label,
            q.foreground_points,
            q.foreground_rms / q.voxel_length,
            100.0 * q.spill_removal()
        );
    }
    println!("{:?}", out.stats);
    Ok(())
}
