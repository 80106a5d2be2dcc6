//! Two object volumes and a background composed into one render: each pixel
//! keeps the nearest surface and remembers which volume produced it.

use nalgebra::Vector3;
use objslam::geom::{Image, Intrinsics, ObjectId, Pose, RgbdFrame, SurfaceLabel};
use objslam::render::{object_boxes, render_composed, ObjectView, RenderOptions};
use objslam::volume::{IntegrateMode, ScalableTsdfVolume, TsdfConfig};

fn plane(k: &Intrinsics, z: f64, keep: impl Fn(usize, usize) -> bool) -> RgbdFrame {
    let depth = Image::from_fn(k.width, k.height, |x, y| if keep(x, y) { z } else { 0.0 });
    RgbdFrame::new(0, 0.0, Image::filled(k.width, k.height, [0.6; 3]), depth).unwrap()
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let k = Intrinsics::new(262.5, 262.5, 159.5, 119.5, 320, 240)?;
    let cam = Pose::identity();

    let mut background = ScalableTsdfVolume::new(TsdfConfig::with_voxel_length(0.02));
    background.integrate(&plane(&k, 2.0, |_, _| true), None, &cam, &k, IntegrateMode::Plain)?;

    // objects live in their own frames; here each is shifted sideways
    let mut volumes = Vec::new();
    for (i, x0) in [60usize, 170].into_iter().enumerate() {
        let z = 1.0 + 0.3 * i as f64;
        let frame = plane(&k, z, |x, y| (x0..x0 + 90).contains(&x) && (70..170).contains(&y));
        let pose = Pose::from_translation(Vector3::new(0.05 * i as f64, 0.0, 0.0));
        let mut vol = ScalableTsdfVolume::new(TsdfConfig::with_voxel_length(0.008));
        vol.integrate(&frame, None, &pose.inverse().compose(&cam), &k, IntegrateMode::Foreground)?;
        volumes.push((ObjectId(i as u32), vol, pose));
    }
    let views: Vec<ObjectView> = volumes
        .iter()
        .map(|(id, volume, pose)| ObjectView {
            id: *id,
            volume,
            obj_to_world: *pose,
        })
        .collect();

    let render = render_composed(&views, Some(&background), &cam, &k, &RenderOptions::default())?;
    let count = |want: SurfaceLabel| render.maps.label.data().iter().filter(|l| **l == want).count();
    println!("{} raycasts", render.raycasts);
    println!("background pixels {}", count(SurfaceLabel::Background));
    for (id, bbox) in object_boxes(&render) {
        println!("object {} pixels {} box {:?}", id.0, count(SurfaceLabel::Object(id)), bbox);
    }
    Ok(())
}
