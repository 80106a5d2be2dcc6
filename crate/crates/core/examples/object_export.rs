//! Saves the object map of a short run, loads it back and exports the
//! foreground of each object as a PLY point cloud.

use objslam::assoc::{export_objects, load_objects, save_objects};
use objslam::bench::{generate_synthetic, run_pipeline, PipelineConfig, SceneSpec, SensorNoise};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seq = generate_synthetic(SceneSpec::three_boxes(30), SensorNoise::none())?;
    let out = run_pipeline(&seq, &PipelineConfig::default())?;
    let objects = out.objects.objects();

    let dir = tempfile::tempdir()?;
    save_objects(objects, &dir.path().join("state"))?;
    let loaded = load_objects(&dir.path().join("state"))?;
    for (a, b) in objects.iter().zip(&loaded) {
        println!(
            "object {}: checksum {:016x} -> {:016x}",
            a.id.0,
            a.volume.payload_checksum(),
            b.volume.payload_checksum()
        );
    }

    for m in export_objects(&loaded, &dir.path().join("ply"), 0.5)? {
        println!("label {:2}: {:6} points in {}", m.label, m.points, m.file);
    }
    Ok(())
}
