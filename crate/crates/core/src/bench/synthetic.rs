//! Desk-scale synthetic RGB-D: textured primitives inside a room box, seen
//! along a parametric camera path and rendered by exact ray intersection.

use std::sync::Arc;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::sequence::Sequence;
use super::BenchError;
use crate::geom::{DepthRange, Image, Intrinsics, Pose, RgbdFrame, Twist};
use crate::segment::SceneOracle;

const HIT_EPS: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum Shape {
    /// Full side lengths along the local axes.
    Box { size: [f64; 3] },
    Sphere { radius: f64 },
    /// Axis along local `y`.
    Cylinder { radius: f64, height: f64 },
}

impl Shape {
    pub fn bounding_radius(&self) -> f64 {
        match *self {
            Shape::Box { size } => 0.5 * Vector3::from(size).norm(),
            Shape::Sphere { radius } => radius,
            Shape::Cylinder { radius, height } => (radius * radius + 0.25 * height * height).sqrt(),
        }
    }

    /// Half extents of the world-axis-aligned box around the shape under
    /// rotation `r` (object to world).
    fn world_half_extents(&self, r: &nalgebra::Matrix3<f64>) -> Vector3<f64> {
        match *self {
            Shape::Box { size } => r.abs() * Vector3::from(size) * 0.5,
            Shape::Sphere { radius } => Vector3::repeat(radius),
            Shape::Cylinder { radius, height } => {
                let axis = r.column(1);
                Vector3::from_fn(|i, _| axis[i].abs() * 0.5 * height + radius * (1.0 - axis[i] * axis[i]).max(0.0).sqrt())
            }
        }
    }

    fn is_valid(&self) -> bool {
        let pos = |v: f64| v.is_finite() && v > 0.0;
        match *self {
            Shape::Box { size } => size.iter().all(|&s| pos(s)),
            Shape::Sphere { radius } => pos(radius),
            Shape::Cylinder { radius, height } => pos(radius) && pos(height),
        }
    }

    /// Unsigned distance from a local-frame point to the surface.
    pub fn surface_distance(&self, p: &Vector3<f64>) -> f64 {
        match *self {
            Shape::Box { size } => {
                let q = p.abs() - Vector3::from(size) * 0.5;
                let outside = q.map(|v| v.max(0.0)).norm();
                (outside + q.max().min(0.0)).abs()
            }
            Shape::Sphere { radius } => (p.norm() - radius).abs(),
            Shape::Cylinder { radius, height } => {
                let dx = p.x.hypot(p.z) - radius;
                let dy = p.y.abs() - 0.5 * height;
                let outside = dx.max(0.0).hypot(dy.max(0.0));
                (outside + dx.max(dy).min(0.0)).abs()
            }
        }
    }

    /// Nearest entry `(t, local normal)` of `o + t·d`, if any.
    fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, Vector3<f64>)> {
        match *self {
            Shape::Box { size } => {
                let mut t_near = f64::NEG_INFINITY;
                let mut t_far = f64::INFINITY;
                let mut axis = 0;
                for i in 0..3 {
                    let h = 0.5 * size[i];
                    if d[i].abs() < 1e-15 {
                        if o[i].abs() > h {
                            return None;
                        }
                        continue;
                    }
                    let (mut t1, mut t2) = ((-h - o[i]) / d[i], (h - o[i]) / d[i]);
                    if t1 > t2 {
                        std::mem::swap(&mut t1, &mut t2);
                    }
                    if t1 > t_near {
                        t_near = t1;
                        axis = i;
                    }
                    t_far = t_far.min(t2);
                }
                if t_near > t_far || t_near <= HIT_EPS {
                    return None;
                }
                let mut n = Vector3::zeros();
                n[axis] = -d[axis].signum();
                Some((t_near, n))
            }
            Shape::Sphere { radius } => {
                let a = d.dot(d);
                let b = 2.0 * o.dot(d);
                let c = o.dot(o) - radius * radius;
                let disc = b * b - 4.0 * a * c;
                if disc < 0.0 {
                    return None;
                }
                let t = (-b - disc.sqrt()) / (2.0 * a);
                (t > HIT_EPS).then(|| (t, (o + d * t) / radius))
            }
            Shape::Cylinder { radius, height } => {
                let hh = 0.5 * height;
                let mut best: Option<(f64, Vector3<f64>)> = None;
                let mut offer = |t: f64, n: Vector3<f64>| {
                    if t > HIT_EPS && best.is_none_or(|(bt, _)| t < bt) {
                        best = Some((t, n));
                    }
                };
                let a = d.x * d.x + d.z * d.z;
                if a > 1e-15 {
                    let b = 2.0 * (o.x * d.x + o.z * d.z);
                    let c = o.x * o.x + o.z * o.z - radius * radius;
                    let disc = b * b - 4.0 * a * c;
                    if disc >= 0.0 {
                        let t = (-b - disc.sqrt()) / (2.0 * a);
                        let p = o + d * t;
                        if p.y.abs() <= hh {
                            offer(t, Vector3::new(p.x, 0.0, p.z) / radius);
                        }
                    }
                }
                if d.y.abs() > 1e-15 {
                    for y in [-hh, hh] {
                        let t = (y - o.y) / d.y;
                        let p = o + d * t;
                        if p.x * p.x + p.z * p.z <= radius * radius {
                            offer(t, Vector3::new(0.0, y.signum(), 0.0));
                        }
                    }
                }
                best
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    #[serde(flatten)]
    pub shape: Shape,
    pub label: u32,
    pub position: [f64; 3],
    /// Rotation vector (radians).
    #[serde(default)]
    pub rotation: [f64; 3],
    #[serde(default)]
    pub texture_seed: u64,
}

impl SceneObject {
    /// `T^W_O` of the primitive's local frame (centered).
    pub fn pose(&self) -> Pose {
        let r = Pose::exp(&Twist::new(Vector3::from(self.rotation), Vector3::zeros()));
        Pose::new(*r.rotation(), Vector3::from(self.position))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Room {
    pub min: [f64; 3],
    pub max: [f64; 3],
    #[serde(default)]
    pub texture_seed: u64,
}

impl Room {
    fn contains(&self, p: &Vector3<f64>, margin: f64) -> bool {
        (0..3).all(|i| p[i] - margin > self.min[i] && p[i] + margin < self.max[i])
    }

    fn corners(&self) -> impl Iterator<Item = Vector3<f64>> + '_ {
        (0..8).map(move |c| {
            Vector3::new(
                if c & 1 == 0 { self.min[0] } else { self.max[0] },
                if c & 2 == 0 { self.min[1] } else { self.max[1] },
                if c & 4 == 0 { self.min[2] } else { self.max[2] },
            )
        })
    }

    /// Unsigned distance to the room shell.
    fn surface_distance(&self, p: &Vector3<f64>) -> f64 {
        let (lo, hi) = (Vector3::from(self.min), Vector3::from(self.max));
        let outside = (lo - p).sup(&(p - hi)).sup(&Vector3::zeros());
        if outside.norm() > 0.0 {
            return outside.norm();
        }
        (0..3).map(|i| (p[i] - lo[i]).min(hi[i] - p[i])).fold(f64::INFINITY, f64::min)
    }

    /// Exit point of a ray starting inside the room.
    fn exit(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, Vector3<f64>)> {
        let mut best: Option<(f64, Vector3<f64>)> = None;
        for i in 0..3 {
            if d[i].abs() < 1e-15 {
                continue;
            }
            let wall = if d[i] > 0.0 { self.max[i] } else { self.min[i] };
            let t = (wall - o[i]) / d[i];
            if t > HIT_EPS && best.is_none_or(|(bt, _)| t < bt) {
                let mut n = Vector3::zeros();
                n[i] = -d[i].signum();
                best = Some((t, n));
            }
        }
        best
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CameraPath {
    /// Circle of `radius` around `center`, raised by `height`.
    Orbit {
        center: [f64; 3],
        radius: f64,
        height: f64,
        #[serde(default = "one")]
        revolutions: f64,
        #[serde(default)]
        phase: f64,
    },
    /// Straight line from `from` to `to`.
    Scan { from: [f64; 3], to: [f64; 3] },
    /// Lemniscate in the horizontal plane.
    FigureEight { center: [f64; 3], radius: f64, height: f64 },
    Static { eye: [f64; 3] },
}

fn one() -> f64 {
    1.0
}

fn thirty() -> f64 {
    30.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySpec {
    #[serde(flatten)]
    pub path: CameraPath,
    pub frames: usize,
    /// Point every camera looks at.
    pub target: [f64; 3],
    #[serde(default = "thirty")]
    pub fps: f64,
}

impl TrajectorySpec {
    pub fn eye(&self, k: usize) -> Vector3<f64> {
        let n = self.frames.max(1) as f64;
        let tau = std::f64::consts::TAU;
        match self.path {
            CameraPath::Orbit {
                center,
                radius,
                height,
                revolutions,
                phase,
            } => {
                let a = phase + tau * revolutions * k as f64 / n;
                Vector3::from(center) + Vector3::new(radius * a.cos(), height, radius * a.sin())
            }
            CameraPath::Scan { from, to } => {
                let s = if self.frames > 1 {
                    k as f64 / (self.frames - 1) as f64
                } else {
                    0.0
                };
                Vector3::from(from) + (Vector3::from(to) - Vector3::from(from)) * s
            }
            CameraPath::FigureEight { center, radius, height } => {
                let a = tau * k as f64 / n;
                Vector3::from(center) + Vector3::new(radius * a.sin(), height, radius * a.sin() * a.cos())
            }
            CameraPath::Static { eye } => Vector3::from(eye),
        }
    }

    /// Camera-to-world pose of frame `k`.
    pub fn pose(&self, k: usize) -> Pose {
        Pose::look_at(self.eye(k), Vector3::from(self.target), Vector3::y())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CameraSpec {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Default for CameraSpec {
    fn default() -> Self {
        CameraSpec {
            width: 320,
            height: 240,
            fx: 262.5,
            fy: 262.5,
            cx: 159.5,
            cy: 119.5,
        }
    }
}

impl CameraSpec {
    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            width: self.width,
            height: self.height,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub objects: Vec<SceneObject>,
    pub room: Room,
    pub trajectory: TrajectorySpec,
    #[serde(default)]
    pub camera: CameraSpec,
    #[serde(default)]
    pub depth_range: DepthRange,
}

impl SceneSpec {
    /// Three textured boxes on the floor of a 4.4 m room. The camera circles
    /// them at 1.8° per frame, one full orbit at 200 frames.
    pub fn three_boxes(frames: usize) -> Self {
        let object = |size: [f64; 3], label, x: f64, z: f64, yaw: f64, seed| SceneObject {
            shape: Shape::Box { size },
            label,
            position: [x, 0.5 * size[1], z],
            rotation: [0.0, yaw, 0.0],
            texture_seed: seed,
        };
        SceneSpec {
            objects: vec![
                object([0.30, 0.20, 0.24], 73, -0.35, 0.12, 0.4, 101),
                object([0.18, 0.30, 0.18], 41, 0.32, -0.22, -0.3, 202),
                object([0.26, 0.16, 0.32], 24, 0.12, 0.42, 0.9, 303),
            ],
            room: Self::default_room(),
            trajectory: TrajectorySpec {
                path: CameraPath::Orbit {
                    center: [0.0, 0.0, 0.0],
                    radius: 1.3,
                    height: 0.9,
                    revolutions: (frames as f64 / 200.0).min(1.0),
                    phase: 0.0,
                },
                frames,
                target: [0.0, 0.12, 0.0],
                fps: 30.0,
            },
            camera: CameraSpec::default(),
            depth_range: DepthRange::default(),
        }
    }

    /// The same room and orbit with no objects: planes only.
    pub fn empty_room(frames: usize) -> Self {
        SceneSpec {
            objects: Vec::new(),
            ..Self::three_boxes(frames)
        }
    }

    fn default_room() -> Room {
        Room {
            min: [-2.2, 0.0, -2.2],
            max: [2.2, 2.4, 2.2],
            texture_seed: 11,
        }
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: String| Err(BenchError::InvalidSpec(m));
        self.camera.intrinsics().validate()?;
        if (0..3).any(|i| !(self.room.min[i] < self.room.max[i])) {
            return bad("room min must be below max on every axis".into());
        }
        if !(self.trajectory.fps > 0.0) {
            return bad("fps must be positive".into());
        }
        for (i, o) in self.objects.iter().enumerate() {
            if !o.shape.is_valid() {
                return bad(format!("object {i} has a non-positive size"));
            }
            let half = o.shape.world_half_extents(o.pose().rotation());
            let (lo, hi) = (Vector3::from(o.position) - half, Vector3::from(o.position) + half);
            if (0..3).any(|a| lo[a] < self.room.min[a] - 1e-9 || hi[a] > self.room.max[a] + 1e-9) {
                return bad(format!("object {i} is not inside the room"));
            }
        }
        let target = Vector3::from(self.trajectory.target);
        for k in 0..self.trajectory.frames {
            let eye = self.trajectory.eye(k);
            if !self.room.contains(&eye, 0.0) {
                return bad(format!("camera {k} is outside the room"));
            }
            if (target - eye).norm() < 1e-9 {
                return bad(format!("camera {k} sits on its target"));
            }
            let farthest = self.room.corners().map(|c| (c - eye).norm()).fold(0.0, f64::max);
            if farthest > self.depth_range.max {
                return bad(format!("camera {k} sees walls beyond {} m", self.depth_range.max));
            }
            for (i, o) in self.objects.iter().enumerate() {
                let gap = (Vector3::from(o.position) - eye).norm() - o.shape.bounding_radius();
                if gap < self.depth_range.min {
                    return bad(format!("camera {k} is closer than {} m to object {i}", self.depth_range.min));
                }
            }
        }
        Ok(())
    }
}

/// Depth sensor model: Gaussian noise with `σ(z) = sigma0·z²` and random
/// dropout of whole samples.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SensorNoise {
    pub sigma0: f64,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for SensorNoise {
    fn default() -> Self {
        SensorNoise {
            sigma0: 0.001,
            dropout: 0.0,
            seed: 0,
        }
    }
}

impl SensorNoise {
    pub fn none() -> Self {
        SensorNoise {
            sigma0: 0.0,
            dropout: 0.0,
            seed: 0,
        }
    }
}

/// Sum of three plane waves in a random direction each, modulating a base
/// color.
#[derive(Clone, Debug)]
struct Texture {
    base: [f64; 3],
    waves: [(Vector3<f64>, f64, f64); 3],
}

impl Texture {
    fn new(seed: u64, min_freq: f64, max_freq: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = [0; 3].map(|_| rng.random_range(0.35..0.95));
        let amps = [0.22, 0.18, 0.1];
        let waves = amps.map(|amp| {
            let dir = Vector3::from_fn(|_, _| StandardNormal.sample(&mut rng)).normalize();
            let freq = rng.random_range(min_freq..max_freq);
            (dir * freq, rng.random_range(0.0..std::f64::consts::TAU), amp)
        });
        Texture { base, waves }
    }

    fn color(&self, p: &Vector3<f64>) -> [f64; 3] {
        let v = 0.5 + self.waves.iter().map(|(w, ph, a)| a * (w.dot(p) + ph).sin()).sum::<f64>();
        let s = 0.3 + 0.7 * v.clamp(0.0, 1.0);
        self.base.map(|b| (b * s).clamp(0.0, 1.0))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RayHit {
    pub t: f64,
    pub normal: Vector3<f64>,
    pub instance: Option<u32>,
    pub color: [f64; 3],
}

/// Noise-free render of one view.
#[derive(Clone, Debug)]
pub struct SceneRender {
    pub color: Image<[f64; 3]>,
    pub depth: Image<f64>,
    pub instances: Image<Option<u32>>,
}

#[derive(Debug)]
pub struct SyntheticScene {
    spec: SceneSpec,
    noise: SensorNoise,
    poses: Vec<Pose>,
    world_to_object: Vec<Pose>,
    textures: Vec<Texture>,
    room_texture: Texture,
}

impl SyntheticScene {
    pub fn new(spec: SceneSpec, noise: SensorNoise) -> Result<Self, BenchError> {
        spec.validate()?;
        if !(noise.sigma0 >= 0.0) || !(0.0..=1.0).contains(&noise.dropout) {
            return Err(BenchError::InvalidSpec("sensor noise out of range".into()));
        }
        let poses = (0..spec.trajectory.frames).map(|k| spec.trajectory.pose(k)).collect();
        let world_to_object = spec.objects.iter().map(|o| o.pose().inverse()).collect();
        let textures = spec
            .objects
            .iter()
            .enumerate()
            .map(|(i, o)| Texture::new(o.texture_seed ^ (i as u64).wrapping_mul(0x9E37_79B9), 50.0, 110.0))
            .collect();
        let room_texture = Texture::new(spec.room.texture_seed, 20.0, 45.0);
        Ok(SyntheticScene {
            spec,
            noise,
            poses,
            world_to_object,
            textures,
            room_texture,
        })
    }

    pub fn spec(&self) -> &SceneSpec {
        &self.spec
    }

    pub fn noise(&self) -> &SensorNoise {
        &self.noise
    }

    pub fn poses(&self) -> &[Pose] {
        &self.poses
    }

    pub fn intrinsics(&self) -> Intrinsics {
        self.spec.camera.intrinsics()
    }

    pub fn timestamps(&self) -> Vec<f64> {
        (0..self.poses.len()).map(|k| k as f64 / self.spec.trajectory.fps).collect()
    }

    /// Nearest surface along `origin + t·dir` (world frame).
    pub fn cast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<RayHit> {
        let mut best: Option<RayHit> = None;
        for (i, (obj, w2o)) in self.spec.objects.iter().zip(&self.world_to_object).enumerate() {
            let o = w2o.transform_point(origin);
            let d = w2o.transform_vector(dir);
            if let Some((t, n)) = obj.shape.intersect(&o, &d) {
                if best.is_none_or(|b| t < b.t) {
                    best = Some(RayHit {
                        t,
                        normal: w2o.rotation().transpose() * n,
                        instance: Some(i as u32),
                        color: self.textures[i].color(&(o + d * t)),
                    });
                }
            }
        }
        if best.is_some() {
            return best;
        }
        let (t, normal) = self.spec.room.exit(origin, dir)?;
        Some(RayHit {
            t,
            normal,
            instance: None,
            color: self.room_texture.color(&(origin + dir * t)),
        })
    }

    /// Exact color, depth and instance maps from `cam_to_world`. Depth is
    /// the camera-frame `z` of the first hit.
    pub fn render(&self, cam_to_world: &Pose, k: &Intrinsics) -> SceneRender {
        let origin = *cam_to_world.translation();
        let rows: Vec<Vec<Option<RayHit>>> = (0..k.height)
            .into_par_iter()
            .map(|y| {
                (0..k.width)
                    .map(|x| {
                        // camera ray with unit z, so the hit parameter is the depth
                        let d = cam_to_world.transform_vector(&k.ray(x as f64, y as f64));
                        self.cast(&origin, &d)
                    })
                    .collect()
            })
            .collect();
        let hits: Vec<Option<RayHit>> = rows.into_iter().flatten().collect();
        let range = self.spec.depth_range;
        SceneRender {
            color: Image::from_vec(k.width, k.height, hits.iter().map(|h| h.map_or([0.0; 3], |h| h.color)).collect()),
            depth: Image::from_vec(
                k.width,
                k.height,
                hits.iter()
                    .map(|h| h.map_or(0.0, |h| if range.contains(h.t) { h.t } else { 0.0 }))
                    .collect(),
            ),
            instances: Image::from_vec(k.width, k.height, hits.iter().map(|h| h.and_then(|h| h.instance)).collect()),
        }
    }

    /// Frame `i` of the path with sensor noise applied.
    pub fn frame(&self, i: usize) -> RgbdFrame {
        let k = self.intrinsics();
        let render = self.render(&self.poses[i], &k);
        let mut depth = render.depth;
        self.apply_noise(&mut depth, i);
        RgbdFrame::new(i, i as f64 / self.spec.trajectory.fps, render.color, depth).expect("rendered frame is consistent")
    }

    fn apply_noise(&self, depth: &mut Image<f64>, frame: usize) {
        let n = self.noise;
        if n.sigma0 <= 0.0 && n.dropout <= 0.0 {
            return;
        }
        let w = depth.width();
        depth.data_mut().par_chunks_mut(w).enumerate().for_each(|(row, samples)| {
            let seed = n.seed ^ ((frame as u64) << 32) ^ row as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for d in samples {
                let g: f64 = StandardNormal.sample(&mut rng);
                let drop = rng.random::<f64>() < n.dropout;
                if *d > 0.0 {
                    *d = if drop { 0.0 } else { (*d + g * n.sigma0 * *d * *d).max(0.0) };
                }
            }
        });
    }

    /// Unsigned distance from a world point to the surface of object `instance`.
    pub fn surface_distance(&self, instance: u32, p: &Vector3<f64>) -> f64 {
        let i = instance as usize;
        self.spec.objects[i]
            .shape
            .surface_distance(&self.world_to_object[i].transform_point(p))
    }

    /// Distance to the nearest surface of any kind, room shell included.
    pub fn scene_distance(&self, p: &Vector3<f64>) -> f64 {
        let room = self.spec.room.surface_distance(p);
        self.nearest_object(p).map_or(room, |(_, d)| d.min(room))
    }

    /// Distance to the nearest object surface and that object's index.
    pub fn nearest_object(&self, p: &Vector3<f64>) -> Option<(u32, f64)> {
        (0..self.spec.objects.len() as u32)
            .map(|i| (i, self.surface_distance(i, p)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
    }
}

impl SceneOracle for SyntheticScene {
    fn instance_map(&self, cam_to_world: &Pose, k: &Intrinsics) -> Image<Option<u32>> {
        self.render(cam_to_world, k).instances
    }

    fn class_of(&self, instance: u32) -> u32 {
        self.spec.objects[instance as usize].label
    }
}

/// Builds the scene and the lazily rendered sequence over its path; the
/// sequence keeps the scene for oracle segmentation and ground truth.
pub fn generate_synthetic(spec: SceneSpec, noise: SensorNoise) -> Result<Sequence, BenchError> {
    Ok(Sequence::synthetic(Arc::new(SyntheticScene::new(spec, noise)?)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plane_scene(frames: usize, path: CameraPath) -> SceneSpec {
        SceneSpec {
            objects: Vec::new(),
            room: Room {
                min: [-2.0, 0.0, -2.0],
                max: [2.0, 2.5, 2.0],
                texture_seed: 3,
            },
            trajectory: TrajectorySpec {
                path,
                frames,
                target: [0.0, 1.2, -2.0],
                fps: 30.0,
            },
            camera: CameraSpec::default(),
            depth_range: DepthRange::default(),
        }
    }

    #[test]
    fn wall_depth_matches_analytic_plane() {
        // camera at z = 0 looking straight down -z at the wall z = -2
        let spec = plane_scene(1, CameraPath::Static { eye: [0.0, 1.2, 0.0] });
        let scene = SyntheticScene::new(spec, SensorNoise::none()).unwrap();
        let k = scene.intrinsics();
        let f = scene.frame(0);
        let pose = scene.poses()[0];
        let n_cam = pose.rotation().transpose() * Vector3::new(0.0, 0.0, 1.0);
        let offset = 2.0 + pose.translation().z;
        let mut checked = 0;
        for (x, y, &d) in f.depth.enumerate() {
            let ray = k.ray(x as f64, y as f64);
            let world = pose.transform_vector(&ray);
            // pixels whose ray hits the back wall before any other wall
            if world.z >= -1e-9 {
                continue;
            }
            let t = scene.spec().room.exit(pose.translation(), &world).unwrap().0;
            let p = pose.translation() + world * t;
            if (p.z + 2.0).abs() > 1e-9 {
                continue;
            }
            let analytic = -offset / n_cam.dot(&ray);
            assert!((d - analytic).abs() < 1e-6, "{d} vs {analytic}");
            checked += 1;
        }
        assert!(checked > 10_000);
    }

    #[test]
    fn static_camera_repeats_frames() {
        let spec = plane_scene(3, CameraPath::Static { eye: [0.3, 1.0, 0.5] });
        let scene = SyntheticScene::new(spec.clone(), SensorNoise::none()).unwrap();
        assert_eq!(scene.frame(0).depth, scene.frame(2).depth);
        assert_eq!(scene.frame(0).color, scene.frame(1).color);
        let noisy = SceneSpec::three_boxes(3);
        let a = SyntheticScene::new(noisy.clone(), SensorNoise::default()).unwrap();
        let b = SyntheticScene::new(noisy, SensorNoise::default()).unwrap();
        assert_eq!(a.frame(1), b.frame(1));
    }

    #[test]
    fn orbit_poses_follow_the_path() {
        let spec = SceneSpec::three_boxes(40);
        let scene = SyntheticScene::new(spec.clone(), SensorNoise::none()).unwrap();
        for k in [0, 7, 39] {
            let a = std::f64::consts::TAU * 0.2 * k as f64 / 40.0;
            let eye = Vector3::new(1.3 * a.cos(), 0.9, 1.3 * a.sin());
            let expected = Pose::look_at(eye, Vector3::new(0.0, 0.12, 0.0), Vector3::y());
            assert_eq!(scene.poses()[k], expected);
            assert_eq!(scene.poses()[k], spec.trajectory.pose(k));
        }
    }

    #[test]
    fn primitives_hit_at_known_distances() {
        let o = Vector3::new(0.0, 0.0, -5.0);
        let d = Vector3::new(0.0, 0.0, 1.0);
        let cases = [
            (Shape::Box { size: [1.0, 2.0, 3.0] }, 3.5),
            (Shape::Sphere { radius: 0.5 }, 4.5),
            (Shape::Cylinder { radius: 0.7, height: 1.0 }, 4.3),
        ];
        for (shape, t) in cases {
            let (hit, n) = shape.intersect(&o, &d).unwrap();
            assert!((hit - t).abs() < 1e-12, "{shape:?}");
            assert!((n - Vector3::new(0.0, 0.0, -1.0)).norm() < 1e-12);
            assert!(shape.surface_distance(&(o + d * hit)) < 1e-12);
        }
        let cap = Shape::Cylinder { radius: 0.7, height: 1.0 };
        let (t, n) = cap.intersect(&Vector3::new(0.2, 3.0, 0.1), &Vector3::new(0.0, -1.0, 0.0)).unwrap();
        assert!((t - 2.5).abs() < 1e-12 && n == Vector3::y());
        assert!(cap.intersect(&Vector3::new(2.0, 3.0, 0.0), &Vector3::new(0.0, -1.0, 0.0)).is_none());
    }

    #[test]
    fn instance_map_matches_projected_objects() {
        let scene = SyntheticScene::new(SceneSpec::three_boxes(10), SensorNoise::none()).unwrap();
        let k = scene.intrinsics();
        let pose = scene.poses()[0];
        let map = scene.instance_map(&pose, &k);
        let render = scene.render(&pose, &k);
        for (x, y, inst) in map.enumerate() {
            if let Some(i) = inst {
                let p = pose.transform_point(&k.unproject_unchecked(x as f64, y as f64, render.depth[(x, y)]));
                assert!(scene.surface_distance(*i, &p) < 1e-9);
            }
        }
        let mut ids: Vec<u32> = map.data().iter().flatten().copied().collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids, vec![0, 1, 2]);
        assert_eq!(scene.class_of(1), 41);
    }

    #[test]
    fn sensor_noise_scales_with_depth_squared() {
        let spec = plane_scene(1, CameraPath::Static { eye: [0.0, 1.2, 0.0] });
        let clean = SyntheticScene::new(spec.clone(), SensorNoise::none()).unwrap().frame(0);
        let noise = SensorNoise {
            sigma0: 0.01,
            dropout: 0.1,
            seed: 5,
        };
        let noisy = SyntheticScene::new(spec, noise).unwrap().frame(0);
        let mut dropped = 0usize;
        let mut z2 = Vec::new();
        for (c, n) in clean.depth.data().iter().zip(noisy.depth.data()) {
            if *n == 0.0 {
                dropped += 1;
            } else {
                z2.push((n - c) / (0.01 * c * c));
            }
        }
        let frac = dropped as f64 / clean.depth.len() as f64;
        assert!((frac - 0.1).abs() < 0.01, "{frac}");
        let var = z2.iter().map(|v| v * v).sum::<f64>() / z2.len() as f64;
        assert!((var - 1.0).abs() < 0.03, "{var}");
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = SceneSpec::three_boxes(10);
        spec.objects[0].position = [5.0, 0.1, 0.0];
        assert!(matches!(SyntheticScene::new(spec, SensorNoise::none()), Err(BenchError::InvalidSpec(_))));
        let mut spec = SceneSpec::three_boxes(10);
        spec.room.max = [6.0, 2.4, 6.0];
        assert!(SyntheticScene::new(spec, SensorNoise::none()).is_err());
        let mut spec = SceneSpec::three_boxes(10);
        spec.objects[1].shape = Shape::Sphere { radius: 0.0 };
        assert!(SyntheticScene::new(spec, SensorNoise::none()).is_err());
    }

    #[test]
    fn spec_round_trips_through_json() {
        let spec = SceneSpec::three_boxes(200);
        let text = serde_json::to_string_pretty(&spec).unwrap();
        assert!(text.contains("\"shape\": \"box\"") && text.contains("\"kind\": \"orbit\""));
        let back: SceneSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back, spec);
    }
}
