//! SE(3) basics: exp/log, composition, the look-at camera and projection.

use nalgebra::Vector3;
use objslam::geom::{ominus, Intrinsics, Pose, Twist};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let xi = Twist::new(Vector3::new(0.1, -0.2, 0.3), Vector3::new(0.5, 0.0, -0.25));
    let t = Pose::exp(&xi);
    println!("exp(xi) rotates by {:.4} rad, translation {:?}", t.rotation_angle(), t.translation().as_slice());
    println!("log(exp(xi)) error {:.2e}", (t.log().0 - xi.0).norm());

    let cam = Pose::look_at(Vector3::new(1.0, 0.8, 1.5), Vector3::zeros(), Vector3::y());
    let round = cam.compose(&cam.inverse());
    println!("T·T⁻¹ differs from identity by {:.2e}", ominus(&round, &Pose::identity()).norm());

    let k = Intrinsics::new(262.5, 262.5, 159.5, 119.5, 320, 240)?;
    let world_origin_in_cam = cam.inverse().transform_point(&Vector3::zeros());
    let uv = k.project(&world_origin_in_cam).expect("origin is in front of the camera");
    println!("world origin projects to ({:.1}, {:.1})", uv.x, uv.y);
    let back = k.unproject(uv.x, uv.y, world_origin_in_cam.z)?;
    println!("unprojected back with error {:.2e} m", (back - world_origin_in_cam).norm());
    Ok(())
}
