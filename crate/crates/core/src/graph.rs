//! Camera–object pose graph. Cameras are linked by relative-pose factors
//! between consecutive keyframes and to objects by camera-in-object factors;
//! Levenberg–Marquardt refines all poses except the first camera.

use std::collections::{BTreeMap, VecDeque};
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix6, Quaternion, SMatrix, UnitQuaternion, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assoc::ObjectMap;
use crate::geom::{ominus, ObjectId, Pose, Twist};

/// χ² at or below this counts as an exact fit.
const ZERO_CHI2: f64 = 1e-20;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("unknown node {0:?}")]
    UnknownNode(NodeId),
    #[error("node {0:?} is not connected to the anchor camera")]
    NotConnected(NodeId),
    #[error("normal equations are singular")]
    Singular,
    #[error("graph has no camera to anchor")]
    Empty,
    #[error("graph file line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("graph i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum NodeId {
    Camera(usize),
    Object(ObjectId),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FactorKind {
    /// `Z^{C_k}_{C_{k−1}}` between cameras `from = k−1` and `to = k`.
    Odometry { from: usize, to: usize },
    /// `Z^{O_j}_{C_k}`.
    CameraObject { camera: usize, object: ObjectId },
}

#[derive(Clone, Debug)]
pub struct Factor {
    pub kind: FactorKind,
    pub measurement: Pose,
    pub information: Matrix6<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct GraphConfig {
    /// Information diagonal, rotation first.
    pub odometry_information: [f64; 6],
    pub object_information: [f64; 6],
    pub max_iters: usize,
    pub relative_tolerance: f64,
    pub initial_damping: f64,
    /// Visible-ratio threshold below which the background is reset and the
    /// graph is optimized.
    pub reset_ratio: f64,
}

impl Default for GraphConfig {
    fn default() -> Self {
        let odo = [100.0f64.powi(2); 3];
        let obj = [50.0f64.powi(2); 3];
        GraphConfig {
            odometry_information: [odo[0], odo[1], odo[2], 2500.0, 2500.0, 2500.0],
            object_information: [obj[0], obj[1], obj[2], 625.0, 625.0, 625.0],
            max_iters: 100,
            relative_tolerance: 1e-8,
            initial_damping: 1e-4,
            reset_ratio: 0.2,
        }
    }
}

impl GraphConfig {
    pub fn odometry_info(&self) -> Matrix6<f64> {
        Matrix6::from_diagonal(&Vector6::from(self.odometry_information))
    }

    pub fn object_info(&self) -> Matrix6<f64> {
        Matrix6::from_diagonal(&Vector6::from(self.object_information))
    }
}

/// `T^{C_k}_{C_{k−1}} = (T^W_{C_k})⁻¹ · T^W_{C_{k−1}}`.
pub fn predict_odometry(from: &Pose, to: &Pose) -> Pose {
    to.inverse().compose(from)
}

/// `T^{O_j}_{C_k} = (T^W_{O_j})⁻¹ · T^W_{C_k}`.
pub fn predict_camera_object(camera: &Pose, object: &Pose) -> Pose {
    object.inverse().compose(camera)
}

/// Background reset or any new object starts an optimization.
pub fn should_trigger(background_ratio: f64, new_objects: usize, reset_ratio: f64) -> bool {
    background_ratio < reset_ratio || new_objects > 0
}

#[derive(Clone, Debug, Default)]
pub struct GraphState {
    pub cameras: BTreeMap<usize, Pose>,
    pub objects: BTreeMap<ObjectId, Pose>,
    pub factors: Vec<Factor>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizeStats {
    pub initial_chi2: f64,
    pub final_chi2: f64,
    /// Accepted steps.
    pub iterations: usize,
    /// χ² after each accepted step, starting with the initial value.
    pub chi2_history: Vec<f64>,
}

impl GraphState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Camera with the smallest id; held fixed during optimization.
    pub fn anchor(&self) -> Option<usize> {
        self.cameras.keys().next().copied()
    }

    pub fn add_camera(&mut self, id: usize, pose: Pose) {
        self.cameras.insert(id, pose);
    }

    pub fn add_object(&mut self, id: ObjectId, pose: Pose) {
        self.objects.insert(id, pose);
    }

    pub fn add_odometry_factor(
        &mut self,
        from: usize,
        to: usize,
        measurement: Pose,
        information: Matrix6<f64>,
    ) -> Result<(), GraphError> {
        for c in [from, to] {
            if !self.cameras.contains_key(&c) {
                return Err(GraphError::UnknownNode(NodeId::Camera(c)));
            }
        }
        self.factors.push(Factor {
            kind: FactorKind::Odometry { from, to },
            measurement,
            information,
        });
        Ok(())
    }

    pub fn add_object_factor(
        &mut self,
        camera: usize,
        object: ObjectId,
        measurement: Pose,
        information: Matrix6<f64>,
    ) -> Result<(), GraphError> {
        if !self.cameras.contains_key(&camera) {
            return Err(GraphError::UnknownNode(NodeId::Camera(camera)));
        }
        if !self.objects.contains_key(&object) {
            return Err(GraphError::UnknownNode(NodeId::Object(object)));
        }
        self.factors.push(Factor {
            kind: FactorKind::CameraObject { camera, object },
            measurement,
            information,
        });
        Ok(())
    }

    fn pose(&self, node: NodeId) -> &Pose {
        match node {
            NodeId::Camera(c) => &self.cameras[&c],
            NodeId::Object(o) => &self.objects[&o],
        }
    }

    fn endpoints(kind: FactorKind) -> (NodeId, NodeId) {
        match kind {
            FactorKind::Odometry { from, to } => (NodeId::Camera(from), NodeId::Camera(to)),
            FactorKind::CameraObject { camera, object } => (NodeId::Camera(camera), NodeId::Object(object)),
        }
    }

    /// `prediction ⊖ measurement` for one factor evaluated at `a`, `b`.
    fn residual_at(kind: FactorKind, z: &Pose, a: &Pose, b: &Pose) -> Vector6<f64> {
        let pred = match kind {
            FactorKind::Odometry { .. } => predict_odometry(a, b),
            FactorKind::CameraObject { .. } => predict_camera_object(a, b),
        };
        ominus(&pred, z).0
    }

    pub fn residual(&self, factor: &Factor) -> Vector6<f64> {
        let (a, b) = Self::endpoints(factor.kind);
        Self::residual_at(factor.kind, &factor.measurement, self.pose(a), self.pose(b))
    }

    pub fn chi2(&self) -> f64 {
        self.factors
            .iter()
            .map(|f| {
                let e = self.residual(f);
                (e.transpose() * f.information * e)[0]
            })
            .sum()
    }

    fn check_connected(&self) -> Result<usize, GraphError> {
        let anchor = self.anchor().ok_or(GraphError::Empty)?;
        let mut adj: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
        for f in &self.factors {
            let (a, b) = Self::endpoints(f.kind);
            adj.entry(a).or_default().push(b);
            adj.entry(b).or_default().push(a);
        }
        let mut seen = std::collections::BTreeSet::from([NodeId::Camera(anchor)]);
        let mut queue = VecDeque::from([NodeId::Camera(anchor)]);
        while let Some(n) = queue.pop_front() {
            for &m in adj.get(&n).into_iter().flatten() {
                if seen.insert(m) {
                    queue.push_back(m);
                }
            }
        }
        let all = self
            .cameras
            .keys()
            .map(|&c| NodeId::Camera(c))
            .chain(self.objects.keys().map(|&o| NodeId::Object(o)));
        for n in all {
            if !seen.contains(&n) {
                return Err(GraphError::NotConnected(n));
            }
        }
        Ok(anchor)
    }

    /// Levenberg–Marquardt on right-multiplied tangent updates.
    pub fn optimize(&mut self, cfg: &GraphConfig) -> Result<OptimizeStats, GraphError> {
        let anchor = self.check_connected()?;
        // cameras first, then objects
        let mut index: BTreeMap<NodeId, usize> = BTreeMap::new();
        for &c in self.cameras.keys().filter(|&&c| c != anchor) {
            index.insert(NodeId::Camera(c), index.len());
        }
        for &o in self.objects.keys() {
            index.insert(NodeId::Object(o), index.len());
        }
        let dim = 6 * index.len();
        let mut chi2 = self.chi2();
        let mut stats = OptimizeStats {
            initial_chi2: chi2,
            final_chi2: chi2,
            iterations: 0,
            chi2_history: vec![chi2],
        };
        if dim == 0 || chi2 <= ZERO_CHI2 {
            return Ok(stats);
        }
        let mut lambda = cfg.initial_damping;
        let mut linearization = self.linearize(&index, dim);
        let mut rounds = 0;
        while stats.iterations < cfg.max_iters && rounds < 10 * cfg.max_iters {
            rounds += 1;
            let (h, g) = &linearization;
            let mut damped = h.clone();
            for i in 0..dim {
                damped[(i, i)] += lambda * h[(i, i)].max(1e-12);
            }
            let Some(chol) = damped.cholesky() else {
                lambda *= 10.0;
                if lambda > 1e12 {
                    return Err(GraphError::Singular);
                }
                continue;
            };
            let delta = chol.solve(&(-g));
            let mut candidate = self.clone();
            candidate.apply(&index, &delta);
            let new_chi2 = candidate.chi2();
            if new_chi2.is_finite() && new_chi2 < chi2 {
                let rel = (chi2 - new_chi2) / chi2.max(1e-300);
                *self = candidate;
                chi2 = new_chi2;
                stats.iterations += 1;
                stats.chi2_history.push(chi2);
                lambda = (lambda * 0.5).max(1e-12);
                if rel < cfg.relative_tolerance || chi2 <= ZERO_CHI2 {
                    break;
                }
                linearization = self.linearize(&index, dim);
            } else {
                lambda *= 10.0;
                if lambda > 1e12 {
                    break;
                }
            }
        }
        stats.final_chi2 = chi2;
        Ok(stats)
    }

    fn apply(&mut self, index: &BTreeMap<NodeId, usize>, delta: &DVector<f64>) {
        for (&node, &i) in index {
            let d = Twist(delta.fixed_rows::<6>(6 * i).into_owned());
            let step = Pose::exp(&d);
            match node {
                NodeId::Camera(c) => {
                    let p = self.cameras.get_mut(&c).unwrap();
                    *p = p.compose(&step);
                }
                NodeId::Object(o) => {
                    let p = self.objects.get_mut(&o).unwrap();
                    *p = p.compose(&step);
                }
            }
        }
    }

    /// Gauss-Newton system `H`, `g` with central-difference factor Jacobians.
    fn linearize(&self, index: &BTreeMap<NodeId, usize>, dim: usize) -> (DMatrix<f64>, DVector<f64>) {
        let mut h = DMatrix::zeros(dim, dim);
        let mut g = DVector::zeros(dim);
        let step = 1e-6;
        for f in &self.factors {
            let (na, nb) = Self::endpoints(f.kind);
            let (pa, pb) = (self.pose(na), self.pose(nb));
            let e = Self::residual_at(f.kind, &f.measurement, pa, pb);
            let jac = |which: usize| {
                let mut j = SMatrix::<f64, 6, 6>::zeros();
                for c in 0..6 {
                    let mut d = Vector6::zeros();
                    d[c] = step;
                    let plus = Pose::exp(&Twist(d));
                    let minus = Pose::exp(&Twist(-d));
                    let (ep, em) = if which == 0 {
                        (
                            Self::residual_at(f.kind, &f.measurement, &pa.compose(&plus), pb),
                            Self::residual_at(f.kind, &f.measurement, &pa.compose(&minus), pb),
                        )
                    } else {
                        (
                            Self::residual_at(f.kind, &f.measurement, pa, &pb.compose(&plus)),
                            Self::residual_at(f.kind, &f.measurement, pa, &pb.compose(&minus)),
                        )
                    };
                    j.set_column(c, &((ep - em) / (2.0 * step)));
                }
                j
            };
            let blocks: Vec<(usize, SMatrix<f64, 6, 6>)> = [(na, 0), (nb, 1)]
                .iter()
                .filter_map(|&(n, w)| index.get(&n).map(|&i| (i, jac(w))))
                .collect();
            for (i, ji) in &blocks {
                let jt_omega = ji.transpose() * f.information;
                let mut gi = g.fixed_rows_mut::<6>(6 * i);
                gi += jt_omega * e;
                for (k, jk) in &blocks {
                    let mut hik = h.fixed_view_mut::<6, 6>(6 * i, 6 * k);
                    hik += jt_omega * jk;
                }
            }
        }
        (h, g)
    }

    /// Copies optimized object poses into the map. Voxel data is untouched.
    pub fn write_back(&self, map: &mut ObjectMap) -> usize {
        let mut n = 0;
        for (id, pose) in &self.objects {
            if let Some(obj) = map.get_mut(*id) {
                obj.pose = *pose;
                n += 1;
            }
        }
        n
    }

    /// Plain-text edge list:
    ///
    /// ```text
    /// CAMERA id tx ty tz qx qy qz qw
    /// OBJECT id tx ty tz qx qy qz qw
    /// ODOM from to tx ty tz qx qy qz qw i1 … i6
    /// OBJFACTOR camera object tx ty tz qx qy qz qw i1 … i6
    /// ```
    ///
    /// Only the diagonal of each information matrix is stored.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for (id, p) in &self.cameras {
            writeln!(s, "CAMERA {id} {}", pose_fields(p)).unwrap();
        }
        for (id, p) in &self.objects {
            writeln!(s, "OBJECT {} {}", id.0, pose_fields(p)).unwrap();
        }
        for f in &self.factors {
            let info = f.information.diagonal().iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ");
            match f.kind {
                FactorKind::Odometry { from, to } => {
                    writeln!(s, "ODOM {from} {to} {} {info}", pose_fields(&f.measurement)).unwrap()
                }
                FactorKind::CameraObject { camera, object } => {
                    writeln!(s, "OBJFACTOR {camera} {} {} {info}", object.0, pose_fields(&f.measurement)).unwrap()
                }
            }
        }
        s
    }

    pub fn load(text: &str) -> Result<GraphState, GraphError> {
        let mut g = GraphState::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let err = |reason: &str| GraphError::Parse {
                line: line_no,
                reason: reason.to_string(),
            };
            let tok: Vec<&str> = line.split_whitespace().collect();
            if tok.is_empty() || tok[0].starts_with('#') {
                continue;
            }
            let nums = |from: usize, n: usize| -> Result<Vec<f64>, GraphError> {
                if tok.len() != from + n {
                    return Err(err(&format!("expected {} fields", from + n)));
                }
                tok[from..].iter().map(|t| t.parse::<f64>().map_err(|_| err(&format!("bad number {t:?}")))).collect()
            };
            let id = |t: &str| t.parse::<usize>().map_err(|_| err(&format!("bad id {t:?}")));
            match tok[0] {
                "CAMERA" => {
                    let v = nums(2, 7)?;
                    g.add_camera(id(tok[1])?, parse_pose(&v));
                }
                "OBJECT" => {
                    let v = nums(2, 7)?;
                    g.add_object(ObjectId(id(tok[1])? as u32), parse_pose(&v));
                }
                "ODOM" | "OBJFACTOR" => {
                    let v = nums(3, 13)?;
                    let info = Matrix6::from_diagonal(&Vector6::from_column_slice(&v[7..]));
                    let (a, b) = (id(tok[1])?, id(tok[2])?);
                    if tok[0] == "ODOM" {
                        g.add_odometry_factor(a, b, parse_pose(&v), info)?;
                    } else {
                        g.add_object_factor(a, ObjectId(b as u32), parse_pose(&v), info)?;
                    }
                }
                other => return Err(err(&format!("unknown record {other:?}"))),
            }
        }
        Ok(g)
    }

    pub fn save(&self, path: &Path) -> Result<(), GraphError> {
        std::fs::write(path, self.dump())?;
        Ok(())
    }
}

fn pose_fields(p: &Pose) -> String {
    let q = p.quaternion();
    let t = p.translation();
    format!("{} {} {} {} {} {} {}", t.x, t.y, t.z, q.i, q.j, q.k, q.w)
}

fn parse_pose(v: &[f64]) -> Pose {
    let q = UnitQuaternion::from_quaternion(Quaternion::new(v[6], v[3], v[4], v[5]));
    Pose::from_quaternion(q, Vector3::new(v[0], v[1], v[2]))
}

/// Ground truth and noisy measurements for a ring of cameras looking at a
/// few objects near the center.
#[derive(Clone, Debug)]
pub struct LoopSimulation {
    pub cameras: Vec<Pose>,
    pub objects: Vec<Pose>,
    /// Graph initialized by chaining the noisy odometry from camera 0.
    pub graph: GraphState,
}

/// Cameras on a circle of radius 2 m, every camera observing every object.
/// Each measurement is perturbed by `exp(ξ)` with per-axis rotation noise
/// `sigma_rot` (radians) and translation noise `sigma_trans` (metres).
pub fn simulate_loop(
    n_cameras: usize,
    n_objects: usize,
    sigma_rot: f64,
    sigma_trans: f64,
    seed: u64,
    cfg: &GraphConfig,
) -> LoopSimulation {
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let noise = |rng: &mut rand_chacha::ChaCha8Rng| {
        let r = Normal::new(0.0, sigma_rot.max(1e-300)).unwrap();
        let t = Normal::new(0.0, sigma_trans.max(1e-300)).unwrap();
        let mut xi = Vector6::zeros();
        for i in 0..3 {
            xi[i] = if sigma_rot > 0.0 { r.sample(rng) } else { 0.0 };
            xi[i + 3] = if sigma_trans > 0.0 { t.sample(rng) } else { 0.0 };
        }
        Pose::exp(&Twist(xi))
    };
    let cameras: Vec<Pose> = (0..n_cameras)
        .map(|i| {
            let a = std::f64::consts::TAU * i as f64 / n_cameras as f64;
            let eye = Vector3::new(2.0 * a.cos(), -0.3, 2.0 * a.sin());
            Pose::look_at(eye, Vector3::zeros(), Vector3::new(0.0, -1.0, 0.0))
        })
        .collect();
    let objects: Vec<Pose> = (0..n_objects)
        .map(|j| {
            let a = std::f64::consts::TAU * j as f64 / n_objects.max(1) as f64;
            Pose::from_axis_angle(Vector3::y(), a, Vector3::new(0.4 * a.cos(), 0.1 * j as f64, 0.4 * a.sin()))
        })
        .collect();
    let mut graph = GraphState::new();
    let mut chained = cameras[0];
    graph.add_camera(0, chained);
    for i in 1..n_cameras {
        let z = predict_odometry(&cameras[i - 1], &cameras[i]).compose(&noise(&mut rng));
        chained = chained.compose(&z.inverse());
        graph.add_camera(i, chained);
        graph.add_odometry_factor(i - 1, i, z, cfg.odometry_info()).unwrap();
    }
    for (j, obj) in objects.iter().enumerate() {
        let id = ObjectId(j as u32);
        let mut init = None;
        for (i, cam) in cameras.iter().enumerate() {
            let z = predict_camera_object(cam, obj).compose(&noise(&mut rng));
            if init.is_none() {
                // object placed from its first observation and the chained camera
                init = Some(graph.cameras[&i].compose(&z.inverse()));
                graph.add_object(id, init.unwrap());
            }
            graph.add_object_factor(i, id, z, cfg.object_info()).unwrap();
        }
    }
    LoopSimulation {
        cameras,
        objects,
        graph,
    }
}
