//! Build an object map keyframe by keyframe: detections are matched to the
//! virtual masks of known objects, unmatched ones wait for confirmation and
//! then become new object volumes.

use objslam::assoc::{AssocConfig, ObjectMap};
use objslam::bench::{SceneSpec, SensorNoise, SyntheticScene};
use objslam::geom::ObjectId;
use objslam::render::{render_composed, virtual_object_mask, ObjectView, RenderOptions};
use objslam::segment::{NoiseConfig, Oracle};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let scene = SyntheticScene::new(SceneSpec::three_boxes(200), SensorNoise::none())?;
    let k = scene.intrinsics();
    let noise = NoiseConfig::default();
    let mut oracle = Oracle::new(&scene, noise.clone());
    let mut map = ObjectMap::new(AssocConfig {
        feature_gate: noise.feature_gate(),
        ..Default::default()
    });

    for i in (0..60).step_by(10) {
        let cam = scene.poses()[i];
        let frame = scene.frame(i);
        let bundle = oracle.segment(i, &cam, &k);

        let views: Vec<ObjectView> = map
            .objects()
            .iter()
            .map(|o| ObjectView {
                id: o.id,
                volume: &o.volume,
                obj_to_world: o.pose,
            })
            .collect();
        let render = render_composed(&views, None, &cam, &k, &RenderOptions::default())?;
        let virtual_masks: Vec<(ObjectId, _)> =
            render.contributing_ids.iter().map(|&id| (id, virtual_object_mask(&render, id))).collect();

        let update = map.process_keyframe(&bundle, &virtual_masks, &frame, &cam, &k)?;
        println!(
            "keyframe {i:2}: {} detections, {} matched, {} deferred, created {:?}",
            bundle.detections.len(),
            update.outcome.matches.len(),
            update.deferred,
            update.created.iter().map(|id| id.0).collect::<Vec<_>>()
        );
    }
    for o in map.objects() {
        let origin = o.pose.translation();
        println!(
            "object {} label {} voxel {:.4} m, {} observations, origin {:.2?}",
            o.id.0,
            o.label,
            o.voxel_length,
            o.observations,
            [origin.x, origin.y, origin.z]
        );
    }
    Ok(())
}
