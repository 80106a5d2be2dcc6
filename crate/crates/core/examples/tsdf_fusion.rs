//! Fuse one depth image of a sphere into a scalable TSDF volume, raycast it
//! back from the same view and compare against the analytic surface.

use nalgebra::Vector3;
use objslam::geom::{Image, Intrinsics, Pose, RgbdFrame};
use objslam::volume::{IntegrateMode, ScalableTsdfVolume, TsdfConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let k = Intrinsics::new(262.5, 262.5, 159.5, 119.5, 320, 240)?;
    let (center, radius) = (Vector3::new(0.0, 0.0, 1.5), 0.5);
    let hit = |x: usize, y: usize| -> f64 {
        // ray/sphere intersection along the pixel ray (z = 1 scaling)
        let d = k.ray(x as f64, y as f64);
        let b = d.dot(&center);
        let disc = b * b - d.norm_squared() * (center.norm_squared() - radius * radius);
        if disc < 0.0 {
            return 0.0;
        }
        (b - disc.sqrt()) / d.norm_squared()
    };
    let depth = Image::from_fn(320, 240, hit);
    let color = Image::from_fn(320, 240, |x, y| [x as f64 / 320.0, y as f64 / 240.0, 0.5]);
    let frame = RgbdFrame::new(0, 0.0, color, depth.clone())?;

    let mut vol = ScalableTsdfVolume::new(TsdfConfig::with_voxel_length(0.01));
    let stats = vol.integrate(&frame, None, &Pose::identity(), &k, IntegrateMode::Plain)?;
    println!("{} rays, {} blocks, {} voxels updated", stats.rays, vol.block_count(), stats.updated_voxels);

    let maps = vol.raycast(&Pose::identity(), &k)?;
    let rendered = maps.depth();
    let (mut se, mut n) = (0.0, 0usize);
    for y in 0..240 {
        for x in 0..320 {
            if rendered[(x, y)] > 0.0 && depth[(x, y)] > 0.0 {
                se += (rendered[(x, y)] - depth[(x, y)]).powi(2);
                n += 1;
            }
        }
    }
    println!("raycast depth RMS {:.4} m over {n} pixels (voxel 0.01 m)", (se / n as f64).sqrt());

    let points = vol.extract_surface_points(false, 0.5)?;
    let worst = points.iter().map(|p| ((p.position - center).norm() - radius).abs()).fold(0.0, f64::max);
    println!("{} surface points, worst distance to the sphere {:.4} m", points.len(), worst);
    Ok(())
}
