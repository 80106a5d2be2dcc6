//! Compositional rendering: every visible object volume and the background
//! volume are raycast separately and merged per pixel by nearest depth.

use std::path::Path;

use image::{ImageBuffer, Luma, Rgb};
use nalgebra::Vector3;
use thiserror::Error;

use crate::geom::{Image, Intrinsics, Mask, ObjectId, Pose, RenderMaps, SurfaceLabel};
use crate::volume::{RaycastOptions, ScalableTsdfVolume, VolumeError};

#[derive(Debug, Error)]
pub enum RenderError {
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error("mask dimension mismatch: expected {expected:?}, got {got:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("render dump failed: {0}")]
    Dump(String),
}

/// An object volume placed in the world.
#[derive(Clone, Copy)]
pub struct ObjectView<'a> {
    pub id: ObjectId,
    pub volume: &'a ScalableTsdfVolume,
    pub obj_to_world: Pose,
}

#[derive(Clone, Copy, Debug)]
pub struct RenderOptions {
    /// Foreground-ratio filter applied to object layers.
    pub object_min_fg_ratio: Option<f32>,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions {
            object_min_fg_ratio: Some(0.5),
        }
    }
}

#[derive(Clone, Debug)]
pub struct RenderLayer {
    pub label: SurfaceLabel,
    pub maps: RenderMaps,
}

/// Composed model view. `layers` keeps each separately rendered input in
/// composition order (objects by ascending id, background last).
#[derive(Clone, Debug)]
pub struct ComposedRender {
    pub maps: RenderMaps,
    pub contributing_ids: Vec<ObjectId>,
    pub layers: Vec<RenderLayer>,
    /// Number of volume raycasts spent on this render.
    pub raycasts: usize,
}

impl ComposedRender {
    pub fn empty(width: usize, height: usize) -> Self {
        ComposedRender {
            maps: RenderMaps::invalid(width, height),
            contributing_ids: Vec::new(),
            layers: Vec::new(),
            raycasts: 0,
        }
    }

    /// Model built directly from an input frame (every valid pixel labelled
    /// background). Handy for frame-to-frame use of the tracker.
    pub fn from_maps(maps: RenderMaps) -> Self {
        ComposedRender {
            maps,
            contributing_ids: Vec::new(),
            layers: Vec::new(),
            raycasts: 0,
        }
    }

    pub fn width(&self) -> usize {
        self.maps.width()
    }

    pub fn height(&self) -> usize {
        self.maps.height()
    }
}

/// Raycasts each object in its own frame and the background in the world
/// frame from `cam_to_world`, then keeps the nearest surface per pixel.
pub fn render_composed(
    objects: &[ObjectView<'_>],
    background: Option<&ScalableTsdfVolume>,
    cam_to_world: &Pose,
    k: &Intrinsics,
    options: &RenderOptions,
) -> Result<ComposedRender, RenderError> {
    let world_to_cam = cam_to_world.inverse();
    let mut sorted: Vec<&ObjectView<'_>> = objects.iter().collect();
    sorted.sort_by_key(|o| o.id);
    let mut layers = Vec::with_capacity(sorted.len() + 1);
    for obj in sorted {
        let vol_to_cam = world_to_cam.compose(&obj.obj_to_world);
        let label = SurfaceLabel::Object(obj.id);
        let maps = obj.volume.raycast_with(
            &vol_to_cam,
            k,
            &RaycastOptions {
                label,
                min_fg_ratio: options.object_min_fg_ratio,
            },
        )?;
        layers.push(RenderLayer { label, maps });
    }
    if let Some(bg) = background {
        let maps = bg.raycast(&world_to_cam, k)?;
        layers.push(RenderLayer {
            label: SurfaceLabel::Background,
            maps,
        });
    }
    let raycasts = layers.len();
    let mut render = compose_layers(layers, k.width, k.height);
    render.raycasts = raycasts;
    Ok(render)
}

/// Per-pixel depth argmin over `layers`, which must already be in
/// composition order; the earlier layer wins ties.
pub fn compose_layers(layers: Vec<RenderLayer>, width: usize, height: usize) -> ComposedRender {
    let mut maps = RenderMaps::invalid(width, height);
    for layer in &layers {
        for (i, label) in layer.maps.label.data().iter().enumerate() {
            if !label.is_valid() {
                continue;
            }
            let z = layer.maps.vertex.data()[i].z;
            let current = maps.label.data()[i];
            if current.is_valid() && maps.vertex.data()[i].z <= z {
                continue;
            }
            maps.vertex.data_mut()[i] = layer.maps.vertex.data()[i];
            maps.normal.data_mut()[i] = layer.maps.normal.data()[i];
            maps.color.data_mut()[i] = layer.maps.color.data()[i];
            maps.label.data_mut()[i] = *label;
        }
    }
    let mut contributing_ids: Vec<ObjectId> = layers
        .iter()
        .filter_map(|l| match l.label {
            SurfaceLabel::Object(id) => Some(id),
            _ => None,
        })
        .collect();
    contributing_ids.sort();
    ComposedRender {
        maps,
        contributing_ids,
        layers,
        raycasts: 0,
    }
}

/// Splits objects into those with at least one allocated block in view and
/// the rest. Offloaded volumes are judged from their resident block index.
pub fn partition_visible<'a>(
    objects: &[ObjectView<'a>],
    cam_to_world: &Pose,
    k: &Intrinsics,
) -> (Vec<ObjectView<'a>>, Vec<ObjectId>) {
    let world_to_cam = cam_to_world.inverse();
    let mut visible = Vec::new();
    let mut hidden = Vec::new();
    for obj in objects {
        let vol_to_cam = world_to_cam.compose(&obj.obj_to_world);
        match obj.volume.visible_ratio(&vol_to_cam, k) {
            Ok(r) if r > 0.0 => visible.push(*obj),
            _ => hidden.push(obj.id),
        }
    }
    (visible, hidden)
}

/// Pixels where `id` won the composition.
pub fn virtual_object_mask(render: &ComposedRender, id: ObjectId) -> Mask {
    render.maps.label.map(|l| *l == SurfaceLabel::Object(id))
}

/// Complement of the union of all given masks.
pub fn background_mask(
    width: usize,
    height: usize,
    instance_masks: &[&Mask],
    virtual_masks: &[&Mask],
) -> Result<Mask, RenderError> {
    let mut covered = Image::filled(width, height, false);
    for m in instance_masks.iter().chain(virtual_masks) {
        if m.width() != width || m.height() != height {
            return Err(RenderError::DimensionMismatch {
                expected: (width, height),
                got: (m.width(), m.height()),
            });
        }
        for (c, &v) in covered.data_mut().iter_mut().zip(m.data()) {
            *c |= v;
        }
    }
    Ok(covered.complement())
}

/// Pixel-space bounding boxes `[x0, y0, x1, y1]` of each contributing object.
pub fn object_boxes(render: &ComposedRender) -> Vec<(ObjectId, [u32; 4])> {
    render
        .contributing_ids
        .iter()
        .filter_map(|&id| virtual_object_mask(render, id).bounding_box().map(|b| (id, b)))
        .collect()
}

/// Writes `<prefix>_depth.png` (16-bit, 5000 per metre), `<prefix>_normal.png`
/// and `<prefix>_label.png` for inspection.
pub fn dump_render(render: &ComposedRender, dir: &Path, prefix: &str) -> Result<(), RenderError> {
    let (w, h) = (render.width() as u32, render.height() as u32);
    let maps = &render.maps;
    let depth: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(w, h, |x, y| {
        let (x, y) = (x as usize, y as usize);
        if maps.is_valid(x, y) {
            Luma([(maps.vertex[(x, y)].z * 5000.0).round().clamp(0.0, 65535.0) as u16])
        } else {
            Luma([0])
        }
    });
    let normal: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::from_fn(w, h, |x, y| {
        let (x, y) = (x as usize, y as usize);
        if maps.is_valid(x, y) {
            let n = (maps.normal[(x, y)] + Vector3::repeat(1.0)) * 127.5;
            Rgb([n.x as u8, n.y as u8, n.z as u8])
        } else {
            Rgb([0, 0, 0])
        }
    });
    let label: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::from_fn(w, h, |x, y| {
        Rgb(label_color(maps.label[(x as usize, y as usize)]))
    });
    let save = |img: &dyn Fn(&Path) -> image::ImageResult<()>, name: &str| {
        img(&dir.join(format!("{prefix}_{name}.png"))).map_err(|e| RenderError::Dump(e.to_string()))
    };
    save(&|p| depth.save(p), "depth")?;
    save(&|p| normal.save(p), "normal")?;
    save(&|p| label.save(p), "label")?;
    Ok(())
}

fn label_color(label: SurfaceLabel) -> [u8; 3] {
    match label {
        SurfaceLabel::Invalid => [0, 0, 0],
        SurfaceLabel::Background => [90, 90, 90],
        SurfaceLabel::Object(ObjectId(id)) => {
            let h = id.wrapping_mul(2_654_435_761);
            [(h >> 16) as u8 | 0x40, (h >> 8) as u8 | 0x40, h as u8 | 0x40]
        }
    }
}
