//! Frame-to-model tracking: render the model at one synthetic pose, then
//! recover the camera motion to the next frame.

use objslam::bench::{SceneSpec, SensorNoise, SyntheticScene};
use objslam::geom::{ominus, Pose, RenderMaps};
use objslam::odometry::{track, OdometryConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let scene = SyntheticScene::new(SceneSpec::three_boxes(200), SensorNoise::none())?;
    let k = scene.intrinsics();
    let (a, b) = (10, 13);
    let model = RenderMaps::from_frame(&scene.frame(a), &k);
    let target = scene.frame(b);

    let t = std::time::Instant::now();
    let result = track(&model, &target, &k, &Pose::identity(), &OdometryConfig::default(), None)?;
    // result.pose maps frame-a points into frame b
    let truth = scene.poses()[b].inverse().compose(&scene.poses()[a]);
    println!(
        "tracked {} → {} in {:.0} ms: {} iterations, {} inliers, energy {:.2e}",
        a,
        b,
        t.elapsed().as_secs_f64() * 1e3,
        result.iterations,
        result.inlier_count,
        result.final_energy
    );
    println!("true motion {:.4} m, residual error {:.2e}", truth.translation().norm(), ominus(&result.pose, &truth).norm());
    Ok(())
}
