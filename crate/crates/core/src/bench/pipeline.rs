//! The end-to-end system: frame source, segmentation provider, the map
//! stage (render, track, associate, integrate) and pose-graph optimization,
//! connected by bounded queues.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crossbeam_channel::bounded;
use serde::{Deserialize, Serialize};

use super::eval::StampedPose;
use super::sequence::Sequence;
use super::synthetic::SensorNoise;
use super::BenchError;
use crate::assoc::{virtual_masks_from_labels, AssocConfig, ObjectMap};
use crate::geom::{DepthRange, Intrinsics, Mask, ObjectId, Pose, RgbdFrame, SurfaceLabel};
use crate::graph::{predict_camera_object, should_trigger, GraphConfig, GraphState, OptimizeStats};
use crate::odometry::{refine_object_pose, track, OdometryConfig};
use crate::render::{background_mask, partition_visible, render_composed, ComposedRender, ObjectView, RenderOptions};
use crate::segment::{load_segmentation, propagate_masks, NoiseConfig, Oracle, SegmentationBundle};
use crate::volume::{IntegrateMode, ScalableTsdfVolume, TsdfConfig};

/// Timed pipeline stages. The first four are the roles reported for the
/// reference system; the rest are accounted separately.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stage {
    Tracking,
    Segmentation,
    Association,
    Rendering,
    Integration,
    Optimization,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Tracking,
        Stage::Segmentation,
        Stage::Association,
        Stage::Rendering,
        Stage::Integration,
        Stage::Optimization,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Stage::Tracking => "Tracking",
            Stage::Segmentation => "Segmentation",
            Stage::Association => "Association",
            Stage::Rendering => "Rendering",
            Stage::Integration => "Integration",
            Stage::Optimization => "Optimization",
        }
    }
}

/// Wall time per stage for one frame, in milliseconds. Stages that did not
/// run are absent.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct FrameTiming {
    pub frame: usize,
    pub stages: BTreeMap<Stage, f64>,
}

impl FrameTiming {
    fn add(&mut self, stage: Stage, since: Instant) {
        *self.stages.entry(stage).or_default() += since.elapsed().as_secs_f64() * 1e3;
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrajectoryEstimate {
    pub poses: Vec<StampedPose>,
    pub timings: Vec<FrameTiming>,
    /// Frames where tracking failed and the previous pose was held.
    pub lost_frames: Vec<usize>,
}

impl TrajectoryEstimate {
    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SegmentationMode {
    /// The scene oracle for synthetic sequences, nothing otherwise.
    #[default]
    Auto,
    Disabled,
    Oracle,
    /// Detection files written by `write_segmentation`.
    Directory { path: PathBuf },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub background_voxel_length: f64,
    pub depth_range: DepthRange,
    /// Fresh detections every this many frames; masks are propagated between.
    pub keyframe_interval: usize,
    pub segmentation: SegmentationMode,
    pub oracle_noise: NoiseConfig,
    /// Depth noise used when the sequence is generated from a scene spec.
    pub sensor_noise: SensorNoise,
    pub odometry: OdometryConfig,
    pub assoc: AssocConfig,
    pub graph: GraphConfig,
    /// Build the pose graph and optimize it when triggered.
    pub optimize: bool,
    /// Report keyframe poses from the final graph, carrying each keyframe's
    /// correction to the frames tracked after it.
    pub optimized_trajectory: bool,
    /// One thread, no stage overlap; results are bit-identical across runs.
    pub deterministic: bool,
    pub queue_capacity: usize,
    /// Worker threads for pixel and voxel kernels; `None` defers to
    /// `OBJSLAM_THREADS`, then to the number of cores.
    pub threads: Option<usize>,
    /// Object volumes out of view are written here and reloaded on demand.
    pub offload_dir: Option<PathBuf>,
    pub max_frames: Option<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            background_voxel_length: 0.02,
            depth_range: DepthRange::default(),
            keyframe_interval: 10,
            segmentation: SegmentationMode::Auto,
            oracle_noise: NoiseConfig::default(),
            sensor_noise: SensorNoise::default(),
            odometry: OdometryConfig::default(),
            assoc: AssocConfig::default(),
            graph: GraphConfig::default(),
            optimize: true,
            optimized_trajectory: true,
            deterministic: false,
            queue_capacity: 4,
            threads: None,
            offload_dir: None,
            max_frames: None,
        }
    }
}

impl PipelineConfig {
    /// Reads a JSON or TOML config, chosen by extension (`.toml` is TOML,
    /// anything else JSON).
    pub fn load(path: &Path) -> Result<Self, BenchError> {
        let text = std::fs::read_to_string(path).map_err(|e| BenchError::io(path, e))?;
        let cfg: PipelineConfig = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| BenchError::InvalidConfig(e.to_string()))?
        } else {
            serde_json::from_str(&text).map_err(|e| BenchError::InvalidConfig(e.to_string()))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: &str| Err(BenchError::InvalidConfig(m.into()));
        if !(self.background_voxel_length > 0.0) {
            return bad("background_voxel_length must be positive");
        }
        if self.keyframe_interval == 0 {
            return bad("keyframe_interval must be at least 1");
        }
        if self.queue_capacity == 0 {
            return bad("queue_capacity must be at least 1");
        }
        if self.threads == Some(0) {
            return bad("threads must be at least 1");
        }
        self.odometry
            .validate()
            .map_err(|e| BenchError::InvalidConfig(e.to_string()))
    }

    /// Kernel thread count after applying `OBJSLAM_THREADS`.
    pub fn worker_threads(&self) -> usize {
        if self.deterministic {
            return 1;
        }
        self.threads
            .or_else(|| std::env::var("OBJSLAM_THREADS").ok()?.parse().ok().filter(|&n| n > 0))
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct PipelineStats {
    pub frames: usize,
    pub keyframes: usize,
    pub lost: usize,
    pub background_resets: usize,
    pub optimizations: usize,
    pub objects_created: usize,
    pub dropped_new: usize,
    /// Composed renders, one per frame.
    pub composed_renders: usize,
    /// Volume raycasts spent inside those renders.
    pub raycasts: usize,
    /// Object volumes written out while hidden, and read back.
    pub offloads: usize,
    pub reloads: usize,
    pub last_optimization: Option<OptimizeSummary>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct OptimizeSummary {
    pub initial_chi2: f64,
    pub final_chi2: f64,
    pub iterations: usize,
}

impl From<&OptimizeStats> for OptimizeSummary {
    fn from(s: &OptimizeStats) -> Self {
        OptimizeSummary {
            initial_chi2: s.initial_chi2,
            final_chi2: s.final_chi2,
            iterations: s.iterations,
        }
    }
}

pub struct PipelineOutput {
    pub estimate: TrajectoryEstimate,
    pub objects: ObjectMap,
    pub graph: GraphState,
    pub background: ScalableTsdfVolume,
    pub stats: PipelineStats,
}

/// Produces the detections of keyframes.
enum Segmenter<'a> {
    None,
    Oracle(Oracle<'a, super::synthetic::SyntheticScene>, &'a Sequence),
    Directory(PathBuf),
}

impl Segmenter<'_> {
    fn segment(&mut self, frame: &RgbdFrame, k: &Intrinsics) -> Result<Option<SegmentationBundle>, BenchError> {
        match self {
            Segmenter::None => Ok(None),
            Segmenter::Oracle(oracle, seq) => {
                let pose = seq
                    .scene()
                    .and_then(|s| s.poses().get(frame.id).copied())
                    .ok_or_else(|| BenchError::InvalidConfig("oracle needs a ground-truth pose".into()))?;
                Ok(Some(oracle.segment(frame.id, &pose, k)))
            }
            Segmenter::Directory(dir) => Ok(Some(load_segmentation(frame.id, dir, frame.width(), frame.height())?)),
        }
    }
}

/// A frame ready for the map stage.
struct Prepared {
    frame: RgbdFrame,
    detections: Option<SegmentationBundle>,
    segmentation_ms: Option<f64>,
}

struct PendingPgo {
    frame: usize,
    reset: bool,
}

/// State owned by the map stage.
struct MapStage<'a> {
    cfg: &'a PipelineConfig,
    k: Intrinsics,
    background: ScalableTsdfVolume,
    objects: ObjectMap,
    graph: GraphState,
    cam: Pose,
    /// Pose of the newest graph camera node, in the frame `cam` lives in.
    last_node: Option<Pose>,
    prev_bundle: Option<SegmentationBundle>,
    estimate: TrajectoryEstimate,
    stats: PipelineStats,
    render_options: RenderOptions,
}

/// Work handed to the optimization stage.
type PgoJob = GraphState;
/// The optimized graph, its statistics and the wall time in milliseconds.
type PgoResult = (GraphState, Result<OptimizeStats, crate::graph::GraphError>, f64);

impl<'a> MapStage<'a> {
    fn new(cfg: &'a PipelineConfig, k: Intrinsics, assoc: AssocConfig) -> Self {
        let mut tsdf = TsdfConfig::with_voxel_length(cfg.background_voxel_length);
        tsdf.depth_range = cfg.depth_range;
        MapStage {
            cfg,
            k,
            background: ScalableTsdfVolume::new(tsdf),
            objects: ObjectMap::new(assoc),
            graph: GraphState::new(),
            cam: Pose::identity(),
            last_node: None,
            prev_bundle: None,
            estimate: TrajectoryEstimate::default(),
            stats: PipelineStats::default(),
            render_options: RenderOptions {
                object_min_fg_ratio: Some(cfg.assoc.fg_ratio_threshold),
            },
        }
    }

    fn render(&mut self) -> Result<ComposedRender, BenchError> {
        let views: Vec<ObjectView<'_>> = self
            .objects
            .objects()
            .iter()
            .map(|o| ObjectView {
                id: o.id,
                volume: &o.volume,
                obj_to_world: o.pose,
            })
            .collect();
        let (visible, hidden) = partition_visible(&views, &self.cam, &self.k);
        let visible_ids: Vec<ObjectId> = visible.iter().map(|v| v.id).collect();
        drop(views);
        if let Some(dir) = &self.cfg.offload_dir {
            for o in self.objects.objects_mut() {
                if hidden.contains(&o.id) && !o.volume.is_offloaded() {
                    o.volume.offload(dir.join(format!("object_{}.vol", o.id.0)))?;
                    self.stats.offloads += 1;
                } else if visible_ids.contains(&o.id) && o.volume.is_offloaded() {
                    o.volume.reload()?;
                    self.stats.reloads += 1;
                }
            }
        }
        let views: Vec<ObjectView<'_>> = self
            .objects
            .objects()
            .iter()
            .filter(|o| visible_ids.contains(&o.id))
            .map(|o| ObjectView {
                id: o.id,
                volume: &o.volume,
                obj_to_world: o.pose,
            })
            .collect();
        let background = (!self.background.is_empty()).then_some(&self.background);
        let render = render_composed(&views, background, &self.cam, &self.k, &self.render_options)?;
        self.stats.composed_renders += 1;
        self.stats.raycasts += render.raycasts;
        Ok(render)
    }

    fn add_camera_node(&mut self, frame: usize) -> Result<(), BenchError> {
        self.graph.add_camera(frame, self.cam);
        if let Some(prev) = self.last_node.replace(self.cam) {
            let (&prev_id, _) = self
                .graph
                .cameras
                .range(..frame)
                .next_back()
                .expect("previous node exists");
            let z = self.cam.inverse().compose(&prev);
            self.graph.add_odometry_factor(prev_id, frame, z, self.cfg.graph.odometry_info())?;
        }
        Ok(())
    }

    /// Processes one frame. Returns a graph snapshot when optimization should
    /// run before the next frame.
    fn step(&mut self, input: Prepared) -> Result<Option<(PgoJob, PendingPgo)>, BenchError> {
        let Prepared {
            frame,
            detections,
            segmentation_ms,
        } = input;
        let i = frame.id;
        let keyframe = i % self.cfg.keyframe_interval == 0;
        let mut timing = FrameTiming {
            frame: i,
            ..Default::default()
        };
        if let Some(ms) = segmentation_ms {
            timing.stages.insert(Stage::Segmentation, ms);
        }

        let t = Instant::now();
        let render = self.render()?;
        timing.add(Stage::Rendering, t);

        let prev_cam = self.cam;
        let t = Instant::now();
        let mut relative = Pose::identity();
        let mut lost = false;
        if !self.estimate.is_empty() {
            match track(&render.maps, &frame, &self.k, &Pose::identity(), &self.cfg.odometry, None) {
                Ok(r) => {
                    relative = r.pose;
                    self.cam = prev_cam.compose(&r.pose.inverse());
                }
                Err(e) => {
                    log::warn!("frame {i}: tracking lost ({e}); holding the previous pose");
                    lost = true;
                }
            }
            timing.add(Stage::Tracking, t);
        }
        if lost {
            self.stats.lost += 1;
            self.estimate.lost_frames.push(i);
            self.record(&frame, timing);
            return Ok(None);
        }

        let t = Instant::now();
        let bundle = match (keyframe, detections) {
            (true, Some(b)) => Some(b),
            (true, None) => None,
            (false, _) => self.prev_bundle.as_ref().map(|prev| {
                let prev_to_cur = self.cam.inverse().compose(&prev_cam);
                propagate_masks(prev, i, &prev_to_cur, &frame.depth, &self.k)
            }),
        };
        if !keyframe && bundle.is_some() {
            timing.add(Stage::Segmentation, t);
        }

        let mut created = 0;
        if keyframe {
            self.stats.keyframes += 1;
            if self.cfg.optimize {
                self.add_camera_node(i)?;
            }
            if let Some(bundle) = &bundle {
                let t = Instant::now();
                created = self.associate(bundle, &render, &frame, &prev_cam, &relative)?;
                timing.add(Stage::Association, t);
            }
        }

        let t = Instant::now();
        let instance_masks: Vec<&Mask> = bundle.iter().flat_map(|b| b.detections.iter().map(|d| &d.mask)).collect();
        let virtual_masks: Vec<Mask> = render
            .contributing_ids
            .iter()
            .map(|&id| render.maps.label.map(|l| *l == SurfaceLabel::Object(id)))
            .collect();
        let virtual_refs: Vec<&Mask> = virtual_masks.iter().collect();
        let bg_mask = background_mask(self.k.width, self.k.height, &instance_masks, &virtual_refs)?;
        let ratio = if self.background.is_empty() {
            1.0
        } else {
            self.background.visible_ratio(&self.cam.inverse(), &self.k)?
        };
        let reset = ratio < self.cfg.graph.reset_ratio;
        if reset {
            self.background.reset();
            self.stats.background_resets += 1;
        }
        self.background
            .integrate(&frame, Some(&bg_mask), &self.cam, &self.k, IntegrateMode::Plain)?;
        timing.add(Stage::Integration, t);
        self.prev_bundle = bundle;

        let mut job = None;
        if self.cfg.optimize && should_trigger(ratio, created, self.cfg.graph.reset_ratio) {
            if !keyframe {
                self.add_camera_node(i)?;
            }
            if !self.graph.factors.is_empty() {
                job = Some((self.graph.clone(), PendingPgo { frame: i, reset }));
            }
        }
        self.record(&frame, timing);
        Ok(job)
    }

    /// Keyframe association, fusion and instantiation, plus the object
    /// factors they produce. Returns the number of new objects.
    fn associate(
        &mut self,
        bundle: &SegmentationBundle,
        render: &ComposedRender,
        frame: &RgbdFrame,
        render_cam: &Pose,
        relative: &Pose,
    ) -> Result<usize, BenchError> {
        let ids: Vec<ObjectId> = self.objects.objects().iter().map(|o| o.id).collect();
        let vmasks = virtual_masks_from_labels(&render.maps.label, &ids);
        let update = self.objects.process_keyframe(bundle, &vmasks, frame, &self.cam, &self.k)?;
        self.stats.objects_created += update.created.len();
        self.stats.dropped_new = self.objects.dropped_new;
        if !self.cfg.optimize {
            return Ok(update.created.len());
        }
        let i = frame.id;
        for &id in &update.created {
            let pose = self.objects.get(id).expect("created object exists").pose;
            self.graph.add_object(id, pose);
            let z = predict_camera_object(&self.cam, &pose);
            self.graph.add_object_factor(i, id, z, self.cfg.graph.object_info())?;
        }
        for &(d, id) in &update.outcome.matches {
            let Some(layer) = render.layers.iter().find(|l| l.label == SurfaceLabel::Object(id)) else {
                continue;
            };
            let Some(obj_pose) = self.objects.get(id).map(|o| o.pose) else { continue };
            let refined = refine_object_pose(
                &bundle.detections[d].mask,
                &layer.maps,
                frame,
                &self.k,
                relative,
                &self.cfg.odometry,
            );
            let Ok(refined) = refined else { continue };
            // camera in object frame: render camera composed with the refined
            // render-to-current motion
            let render_in_object = obj_pose.inverse().compose(render_cam);
            let z = render_in_object.compose(&refined.pose.inverse());
            if !self.graph.objects.contains_key(&id) {
                self.graph.add_object(id, obj_pose);
            }
            self.graph.add_object_factor(i, id, z, self.cfg.graph.object_info())?;
        }
        Ok(update.created.len())
    }

    fn record(&mut self, frame: &RgbdFrame, timing: FrameTiming) {
        self.estimate.poses.push(StampedPose::new(frame.timestamp, self.cam));
        self.estimate.timings.push(timing);
        self.stats.frames += 1;
    }

    /// Applies an optimized graph: object poses are written back and, when
    /// the background was just reset, the camera moves to its optimized node.
    fn apply(&mut self, pending: PendingPgo, result: PgoResult) {
        let (graph, outcome, ms) = result;
        let stats = match outcome {
            Ok(s) => s,
            Err(e) => {
                log::warn!("frame {}: optimization failed ({e}); graph kept", pending.frame);
                return;
            }
        };
        self.graph = graph;
        self.graph.write_back(&mut self.objects);
        self.stats.optimizations += 1;
        self.stats.last_optimization = Some((&stats).into());
        if pending.reset {
            if let Some(&pose) = self.graph.cameras.get(&pending.frame) {
                self.cam = pose;
                self.last_node = Some(pose);
                if let Some(last) = self.estimate.poses.last_mut() {
                    last.pose = pose;
                }
            }
        }
        if let Some(t) = self.estimate.timings.last_mut() {
            t.stages.insert(Stage::Optimization, ms);
        }
    }

    fn finish(mut self) -> PipelineOutput {
        if self.cfg.optimize && self.cfg.optimized_trajectory {
            self.correct_trajectory();
        }
        if self.objects.objects().iter().any(|o| o.volume.is_offloaded()) {
            for o in self.objects.objects_mut() {
                if o.volume.is_offloaded() {
                    if let Err(e) = o.volume.reload() {
                        log::warn!("object {}: reload failed ({e})", o.id.0);
                    }
                }
            }
        }
        PipelineOutput {
            estimate: self.estimate,
            objects: self.objects,
            graph: self.graph,
            background: self.background,
            stats: self.stats,
        }
    }

    /// Replaces each node's pose with its optimized value and moves the
    /// frames after it by the same correction.
    fn correct_trajectory(&mut self) {
        let online: Vec<Pose> = self.estimate.poses.iter().map(|p| p.pose).collect();
        let mut correction = Pose::identity();
        for (idx, timing) in self.estimate.timings.iter().enumerate() {
            if let Some(node) = self.graph.cameras.get(&timing.frame) {
                correction = node.compose(&online[idx].inverse());
            }
            self.estimate.poses[idx].pose = correction.compose(&online[idx]);
        }
    }
}

fn run_optimizer(mut graph: GraphState, cfg: &GraphConfig) -> PgoResult {
    let t = Instant::now();
    let outcome = graph.optimize(cfg);
    (graph, outcome, t.elapsed().as_secs_f64() * 1e3)
}

/// Runs the whole system over `seq`.
pub fn run_pipeline(seq: &Sequence, cfg: &PipelineConfig) -> Result<PipelineOutput, BenchError> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.worker_threads())
        .build()
        .map_err(|e| BenchError::InvalidConfig(e.to_string()))?;
    pool.install(|| run_inner(seq, cfg))
}

fn run_inner(seq: &Sequence, cfg: &PipelineConfig) -> Result<PipelineOutput, BenchError> {
    let k = seq.intrinsics;
    let n = cfg.max_frames.map_or(seq.len(), |m| m.min(seq.len()));
    let mut assoc = cfg.assoc.clone();
    let mut segmenter = match (&cfg.segmentation, seq.scene()) {
        (SegmentationMode::Disabled, _) | (SegmentationMode::Auto, None) => Segmenter::None,
        (SegmentationMode::Auto | SegmentationMode::Oracle, Some(scene)) => {
            assoc.feature_gate = cfg.oracle_noise.feature_gate();
            Segmenter::Oracle(Oracle::new(scene, cfg.oracle_noise.clone()), seq)
        }
        (SegmentationMode::Oracle, None) => {
            return Err(BenchError::InvalidConfig("oracle segmentation needs a synthetic sequence".into()))
        }
        (SegmentationMode::Directory { path }, _) => Segmenter::Directory(path.clone()),
    };
    let mut stage = MapStage::new(cfg, k, assoc);
    let interval = cfg.keyframe_interval;

    let prepare = |segmenter: &mut Segmenter<'_>, frame: RgbdFrame| -> Result<Prepared, BenchError> {
        if frame.id % interval != 0 {
            return Ok(Prepared {
                frame,
                detections: None,
                segmentation_ms: None,
            });
        }
        let t = Instant::now();
        let detections = segmenter.segment(&frame, &k)?;
        let ms = detections.as_ref().map(|_| t.elapsed().as_secs_f64() * 1e3);
        Ok(Prepared {
            frame,
            detections,
            segmentation_ms: ms,
        })
    };

    if cfg.deterministic {
        for i in 0..n {
            let frame = seq.frame(i)?;
            let prepared = prepare(&mut segmenter, frame)?;
            if let Some((job, pending)) = stage.step(prepared)? {
                let result = run_optimizer(job, &cfg.graph);
                stage.apply(pending, result);
            }
        }
        return Ok(stage.finish());
    }

    let cap = cfg.queue_capacity;
    std::thread::scope(|s| -> Result<PipelineOutput, BenchError> {
        let (frame_tx, frame_rx) = bounded::<Result<RgbdFrame, BenchError>>(cap);
        let (prep_tx, prep_rx) = bounded::<Result<Prepared, BenchError>>(cap);
        let (job_tx, job_rx) = bounded::<PgoJob>(1);
        let (res_tx, res_rx) = bounded::<PgoResult>(1);

        s.spawn(move || {
            for i in 0..n {
                let frame = seq.frame(i);
                let failed = frame.is_err();
                if frame_tx.send(frame).is_err() || failed {
                    break;
                }
            }
        });
        s.spawn(move || {
            for frame in frame_rx {
                let prepared = frame.and_then(|f| prepare(&mut segmenter, f));
                let failed = prepared.is_err();
                if prep_tx.send(prepared).is_err() || failed {
                    break;
                }
            }
        });
        let graph_cfg = &cfg.graph;
        s.spawn(move || {
            for job in job_rx {
                if res_tx.send(run_optimizer(job, graph_cfg)).is_err() {
                    break;
                }
            }
        });

        let mut pending: Option<PendingPgo> = None;
        for prepared in prep_rx {
            // an optimization started last frame lands before this one
            if let Some(p) = pending.take() {
                let result = res_rx.recv().expect("optimizer stage alive");
                stage.apply(p, result);
            }
            if let Some((job, p)) = stage.step(prepared?)? {
                job_tx.send(job).expect("optimizer stage alive");
                pending = Some(p);
            }
        }
        if let Some(p) = pending.take() {
            let result = res_rx.recv().expect("optimizer stage alive");
            stage.apply(p, result);
        }
        drop(job_tx);
        Ok(stage.finish())
    })
}
