//! Keyframe detections from the ground-truth oracle, mask propagation to
//! the following frames, and the detection file round trip.

use objslam::bench::{SceneSpec, SensorNoise, SyntheticScene};
use objslam::segment::{load_segmentation, propagate_masks, write_segmentation, NoiseConfig, Oracle};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let scene = SyntheticScene::new(SceneSpec::three_boxes(200), SensorNoise::none())?;
    let k = scene.intrinsics();
    let poses = scene.poses();
    let mut oracle = Oracle::new(&scene, NoiseConfig::default());

    let keyframe = oracle.segment(0, &poses[0], &k);
    for d in &keyframe.detections {
        println!("frame 0: label {:2} area {:5} bbox {:?}", d.label, d.area(), d.bbox);
    }

    let mut prev = keyframe.clone();
    for i in 1..=5 {
        let frame = scene.frame(i);
        let prev_to_cur = poses[i].inverse().compose(&poses[i - 1]);
        prev = propagate_masks(&prev, i, &prev_to_cur, &frame.depth, &k);
        let areas: Vec<usize> = prev.detections.iter().map(|d| d.area()).collect();
        println!("frame {i}: propagated areas {areas:?}");
    }

    let dir = tempfile::tempdir()?;
    let path = write_segmentation(&keyframe, dir.path())?;
    let back = load_segmentation(0, dir.path(), k.width, k.height)?;
    // the oracle's ground-truth instance id is not part of the file format
    let same = back.detections.len() == keyframe.detections.len()
        && back.detections.iter().zip(&keyframe.detections).all(|(a, b)| {
            a.label == b.label && a.confidence == b.confidence && a.bbox == b.bbox && a.mask == b.mask && a.feature == b.feature
        });
    println!("wrote {}, read back identical: {same}", path.display());
    Ok(())
}
