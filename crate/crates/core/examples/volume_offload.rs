//! Park a volume on disk and bring it back bit for bit.

use objslam::geom::{Image, Intrinsics, Pose, RgbdFrame};
use objslam::volume::{IntegrateMode, ScalableTsdfVolume, TsdfConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let k = Intrinsics::new(262.5, 262.5, 159.5, 119.5, 320, 240)?;
    let depth = Image::from_fn(320, 240, |x, y| 1.0 + 0.002 * x as f64 + 0.001 * y as f64);
    let frame = RgbdFrame::new(0, 0.0, Image::filled(320, 240, [0.3, 0.5, 0.7]), depth)?;
    let mut vol = ScalableTsdfVolume::new(TsdfConfig::with_voxel_length(0.01));
    vol.integrate(&frame, None, &Pose::identity(), &k, IntegrateMode::Foreground)?;
    let before = vol.payload_checksum();

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("plane.vol");
    vol.offload(&path)?;
    println!(
        "offloaded {} blocks ({} bytes); raycast now fails: {}",
        vol.block_count(),
        std::fs::metadata(&path)?.len(),
        vol.raycast(&Pose::identity(), &k).is_err()
    );
    vol.reload()?;
    println!("reloaded, checksum unchanged: {}", vol.payload_checksum() == before);
    Ok(())
}
