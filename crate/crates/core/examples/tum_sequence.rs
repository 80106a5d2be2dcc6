//! Runs the pipeline on a TUM RGB-D sequence directory.
//!
//! cargo run --release --example tum_sequence -- <dir> [max_frames]

use std::path::PathBuf;

use objslam::bench::{evaluate_ate, format_report, load_tum_sequence, run_pipeline, PipelineConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let Some(dir) = args.next().map(PathBuf::from) else {
        eprintln!("usage: tum_sequence <sequence dir> [max_frames]");
        return Ok(());
    };
    let max_frames = args.next().map(|s| s.parse()).transpose()?;

    let seq = load_tum_sequence(&dir, 0.02)?;
    println!("{} frames, intrinsics {:?}", seq.len(), seq.intrinsics);
    let cfg = PipelineConfig { max_frames, ..Default::default() };
    let out = run_pipeline(&seq, &cfg)?;
    let ate = match &seq.ground_truth {
        Some(gt) => Some(evaluate_ate(&out.estimate.poses, gt, 0.02)?.rmse),
        None => None,
    };
    print!("{}", format_report(&out.estimate, ate));
    Ok(())
}
