//! Absolute trajectory error of a perturbed copy of a ground-truth
//! trajectory, written to and read back from TUM files.

use objslam::bench::{evaluate_ate, read_trajectory, write_trajectory, SceneSpec, StampedPose, SyntheticScene, SensorNoise};
use nalgebra::Vector3;
use objslam::geom::{Pose, Twist};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let scene = SyntheticScene::new(SceneSpec::three_boxes(100), SensorNoise::none())?;
    let stamps = scene.timestamps();
    let gt: Vec<StampedPose> = stamps.iter().zip(scene.poses()).map(|(&t, &p)| StampedPose::new(t, p)).collect();

    // a rigid offset is aligned away; a wobble is not
    let offset = Pose::exp(&Twist::new(Vector3::new(0.0, 0.5, 0.1), Vector3::new(0.3, -0.2, 0.1)));
    let est: Vec<StampedPose> = gt
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let wobble = 0.01 * (i as f64 * 0.3).sin();
            let p = offset.compose(&s.pose).compose(&Pose::exp(&Twist::new(Vector3::zeros(), Vector3::new(wobble, 0.0, 0.0))));
            StampedPose::new(s.timestamp + 0.002, p)
        })
        .collect();

    let dir = tempfile::tempdir()?;
    write_trajectory(&est, &dir.path().join("est.txt"))?;
    write_trajectory(&gt, &dir.path().join("gt.txt"))?;
    let est = read_trajectory(&dir.path().join("est.txt"))?;
    let gt = read_trajectory(&dir.path().join("gt.txt"))?;

    let r = evaluate_ate(&est, &gt, 0.02)?;
    let max = r.errors.iter().cloned().fold(0.0, f64::max);
    println!("matched {}, ATE RMSE {:.4} m, max {:.4} m", r.matched, r.rmse, max);
    let recovered = *r.alignment.inverse().translation();
    let truth = offset.translation();
    println!("offset translation {:.3?}, recovered {:.3?}", truth.as_slice(), recovered.as_slice());
    Ok(())
}
