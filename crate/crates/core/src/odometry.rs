//! Frame-to-model tracking. The target frame `C_t` is aligned to a model
//! rendered at `C_s` by minimizing a per-pixel mix of point-to-plane and
//! intensity residuals, coarse to fine, with Gauss-Newton.
//!
//! Target pixels `p` are warped into the model view,
//! `p̂ = π(T⁻¹ · V_t(p))`, and the model maps are bilinearly sampled there.
//! `T = T^{C_t}_{C_s}` is perturbed on the left, `T ← exp(δ)·T`, with
//! `δ = (ω, v)`.

use nalgebra::{Matrix3, Matrix6, SMatrix, Vector2, Vector3, Vector6};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{
    build_pyramid, skew, vertex_and_normal_maps, GeomError, Image, Intrinsics, Mask, Pose, RenderMaps, RgbdFrame,
    Twist, DISC_THRESHOLD,
};

#[derive(Debug, Error)]
pub enum OdometryError {
    #[error("only {found} correspondences, need {required}")]
    InsufficientCorrespondences { found: usize, required: usize },
    #[error("tracking diverged at pyramid level {level} (energy {energy})")]
    Diverged { level: usize, energy: f64 },
    #[error("bad tracking input: {0}")]
    BadInput(String),
    #[error(transparent)]
    Geom(#[from] GeomError),
}

/// Which normal the point-to-plane residual projects onto.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalSource {
    Target,
    Model,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct OdometryConfig {
    /// Geometric weight; the photometric term gets `1 − sigma`.
    pub sigma: f64,
    pub pyramid_levels: usize,
    /// Iterations per level, coarse to fine.
    pub iters_per_level: Vec<usize>,
    pub huber_delta_i: f64,
    pub huber_delta_d: f64,
    /// Stop a level once the update norm falls below this.
    pub convergence_eps: f64,
    pub max_halvings: u32,
    /// An update this large that still cannot lower the energy after all
    /// halvings is reported as divergence; smaller ones just end the level.
    pub divergence_step: f64,
    pub max_vertex_distance: f64,
    pub max_normal_angle_deg: f64,
    pub min_correspondences: usize,
    pub normal_source: NormalSource,
}

impl Default for OdometryConfig {
    fn default() -> Self {
        OdometryConfig {
            sigma: 0.968,
            pyramid_levels: 3,
            iters_per_level: vec![9, 7, 5],
            huber_delta_i: 0.1,
            huber_delta_d: 0.05,
            convergence_eps: 1e-6,
            max_halvings: 5,
            divergence_step: 0.05,
            max_vertex_distance: 0.1,
            max_normal_angle_deg: 30.0,
            min_correspondences: 200,
            normal_source: NormalSource::Target,
        }
    }
}

impl OdometryConfig {
    pub fn validate(&self) -> Result<(), OdometryError> {
        if !(0.0..=1.0).contains(&self.sigma) {
            return Err(OdometryError::BadInput(format!("sigma {} outside [0, 1]", self.sigma)));
        }
        if self.pyramid_levels == 0 || self.iters_per_level.len() != self.pyramid_levels {
            return Err(OdometryError::BadInput(format!(
                "{} pyramid levels but {} iteration counts",
                self.pyramid_levels,
                self.iters_per_level.len()
            )));
        }
        if !(self.huber_delta_i > 0.0 && self.huber_delta_d > 0.0) {
            return Err(OdometryError::BadInput("huber deltas must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrackingResult {
    /// `T^{C_t}_{C_s}`: maps model-frame points into the target frame.
    pub pose: Pose,
    /// Robustified energy per correspondence at the finest level.
    pub final_energy: f64,
    pub inlier_count: usize,
    /// `Jᵀ·W·J` at the solution (finest level, unnormalized).
    pub information: Matrix6<f64>,
    pub converged: bool,
    pub iterations: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResidualKind {
    Geometric,
    Photometric,
}

/// One stacked row: `residual` and `jacobian` already carry the `√σ` or
/// `√(1−σ)` factor; `weight` is the Huber weight of the unscaled residual.
#[derive(Clone, Copy, Debug)]
pub struct ResidualRow {
    pub pixel: (usize, usize),
    pub kind: ResidualKind,
    pub residual: f64,
    pub jacobian: Vector6<f64>,
    pub weight: f64,
    /// Top-left model pixel of the bilinear cell used for `p̂`.
    pub cell: (i64, i64),
}

#[derive(Clone, Copy, Debug)]
pub struct ObjectRefinement {
    pub pose: Pose,
    pub energy_before: f64,
    pub energy_after: f64,
    pub correspondences: usize,
}

/// Aligns `target` to `model` starting from `init`. With `pixel_filter`, only
/// target pixels whose 4-neighbourhood lies inside the filter contribute.
pub fn track(
    model: &RenderMaps,
    target: &RgbdFrame,
    k: &Intrinsics,
    init: &Pose,
    cfg: &OdometryConfig,
    pixel_filter: Option<&Mask>,
) -> Result<TrackingResult, OdometryError> {
    cfg.validate()?;
    if !init.is_finite() {
        return Err(OdometryError::BadInput("non-finite initial pose".into()));
    }
    let levels = build_levels(model, target, k, cfg.pyramid_levels, pixel_filter)?;
    let mut pose = *init;
    let mut iterations = 0;
    let mut converged = false;
    for (li, level) in levels.iter().enumerate().rev() {
        let finest = li == 0;
        let required = if finest {
            cfg.min_correspondences
        } else {
            (cfg.min_correspondences >> (2 * li)).max(6)
        };
        let iters = cfg.iters_per_level[cfg.pyramid_levels - 1 - li];
        converged = false;
        for _ in 0..iters {
            let sys = level.normal_equations(&pose, cfg);
            if sys.count < required {
                break;
            }
            let Some(delta) = solve(&sys) else { break };
            iterations += 1;
            if delta.norm() < cfg.convergence_eps {
                converged = true;
                break;
            }
            let mut scale = 1.0;
            let mut accepted = None;
            for _ in 0..=cfg.max_halvings {
                let candidate = Pose::exp(&Twist(delta * scale)).compose(&pose);
                let e = level.energy(&candidate, cfg);
                if e.count >= required && e.mean() <= sys.mean() {
                    accepted = Some((candidate, e.mean()));
                    break;
                }
                scale *= 0.5;
            }
            match accepted {
                Some((candidate, e)) => {
                    pose = candidate;
                    if sys.mean() - e <= 1e-12 * sys.mean().max(1e-300) {
                        converged = true;
                        break;
                    }
                }
                None if delta.norm() > cfg.divergence_step => {
                    return Err(OdometryError::Diverged {
                        level: li,
                        energy: sys.mean(),
                    });
                }
                None => break,
            }
        }
    }
    if !pose.is_finite() {
        return Err(OdometryError::Diverged {
            level: 0,
            energy: f64::NAN,
        });
    }
    let sys = levels[0].normal_equations(&pose, cfg);
    if sys.count < cfg.min_correspondences {
        return Err(OdometryError::InsufficientCorrespondences {
            found: sys.count,
            required: cfg.min_correspondences,
        });
    }
    Ok(TrackingResult {
        pose,
        final_energy: sys.mean(),
        inlier_count: sys.count,
        information: sys.h,
        converged,
        iterations,
    })
}

/// Stacked residual rows and their analytic Jacobian at full resolution.
pub fn residuals_and_jacobian(
    model: &RenderMaps,
    target: &RgbdFrame,
    k: &Intrinsics,
    pose: &Pose,
    cfg: &OdometryConfig,
) -> Result<Vec<ResidualRow>, OdometryError> {
    cfg.validate()?;
    let level = build_levels(model, target, k, 1, None)?.remove(0);
    let rows: Vec<Vec<ResidualRow>> = (0..level.k.height)
        .into_par_iter()
        .map(|y| {
            let mut out = Vec::new();
            for x in 0..level.k.width {
                let Some(term) = level.term(x, y, pose, cfg, true) else { continue };
                for (kind, r, j, scale, delta) in [
                    (ResidualKind::Geometric, term.r_d, term.j_d, cfg.sigma, cfg.huber_delta_d),
                    (ResidualKind::Photometric, term.r_i, term.j_i, 1.0 - cfg.sigma, cfg.huber_delta_i),
                ] {
                    if scale <= 0.0 {
                        continue;
                    }
                    let s = scale.sqrt();
                    out.push(ResidualRow {
                        pixel: (x, y),
                        kind,
                        residual: s * r,
                        jacobian: j * s,
                        weight: huber_weight(r, delta),
                        cell: term.cell,
                    });
                }
            }
            out
        })
        .collect();
    Ok(rows.into_iter().flatten().collect())
}

/// A single Gauss-Newton step from `init` over the target pixels in
/// `object_pixels`, at full resolution.
pub fn refine_object_pose(
    object_pixels: &Mask,
    model: &RenderMaps,
    target: &RgbdFrame,
    k: &Intrinsics,
    init: &Pose,
    cfg: &OdometryConfig,
) -> Result<ObjectRefinement, OdometryError> {
    cfg.validate()?;
    let level = build_levels(model, target, k, 1, Some(object_pixels))?.remove(0);
    let sys = level.normal_equations(init, cfg);
    let required = cfg.min_correspondences.min(object_pixels.count()).max(6);
    if sys.count < required || sys.count == 0 {
        return Err(OdometryError::InsufficientCorrespondences {
            found: sys.count,
            required,
        });
    }
    let before = sys.mean();
    let mut best = ObjectRefinement {
        pose: *init,
        energy_before: before,
        energy_after: before,
        correspondences: sys.count,
    };
    let Some(delta) = solve(&sys) else { return Ok(best) };
    let mut scale = 1.0;
    for _ in 0..=cfg.max_halvings {
        let candidate = Pose::exp(&Twist(delta * scale)).compose(init);
        let e = level.energy(&candidate, cfg);
        if e.count >= required && e.mean() < before {
            best.pose = candidate;
            best.energy_after = e.mean();
            best.correspondences = e.count;
            break;
        }
        scale *= 0.5;
    }
    Ok(best)
}

fn huber_weight(r: f64, delta: f64) -> f64 {
    let a = r.abs();
    if a <= delta {
        1.0
    } else {
        delta / a
    }
}

/// `r²` inside the threshold, linear outside; matches the IRLS weight above.
fn huber_cost(r: f64, delta: f64) -> f64 {
    let a = r.abs();
    if a <= delta {
        r * r
    } else {
        2.0 * delta * a - delta * delta
    }
}

fn solve(sys: &NormalEquations) -> Option<Vector6<f64>> {
    let neg = -sys.g;
    sys.h
        .cholesky()
        .map(|c| c.solve(&neg))
        .or_else(|| sys.h.lu().solve(&neg))
        .filter(|d| d.iter().all(|v| v.is_finite()))
}

#[derive(Clone, Copy)]
struct NormalEquations {
    h: Matrix6<f64>,
    g: Vector6<f64>,
    energy: f64,
    count: usize,
}

impl NormalEquations {
    fn zero() -> Self {
        NormalEquations {
            h: Matrix6::zeros(),
            g: Vector6::zeros(),
            energy: 0.0,
            count: 0,
        }
    }

    fn add(&mut self, other: &NormalEquations) {
        self.h += other.h;
        self.g += other.g;
        self.energy += other.energy;
        self.count += other.count;
    }

    fn mean(&self) -> f64 {
        if self.count == 0 {
            f64::INFINITY
        } else {
            self.energy / self.count as f64
        }
    }
}

struct Term {
    r_d: f64,
    j_d: Vector6<f64>,
    r_i: f64,
    j_i: Vector6<f64>,
    cell: (i64, i64),
}

struct ModelSample {
    vertex: Vector3<f64>,
    dv_du: Vector3<f64>,
    dv_dv: Vector3<f64>,
    color: f64,
    dc_du: f64,
    dc_dv: f64,
    normal: Vector3<f64>,
    cell: (i64, i64),
}

struct Level {
    model: RenderMaps,
    target: RenderMaps,
    usable: Mask,
    k: Intrinsics,
}

fn build_levels(
    model: &RenderMaps,
    target: &RgbdFrame,
    k: &Intrinsics,
    levels: usize,
    filter: Option<&Mask>,
) -> Result<Vec<Level>, OdometryError> {
    let (w, h) = (target.width(), target.height());
    if model.width() != w || model.height() != h || k.width != w || k.height != h {
        return Err(OdometryError::BadInput(format!(
            "model {}x{}, target {}x{}, intrinsics {}x{}",
            model.width(),
            model.height(),
            w,
            h,
            k.width,
            k.height
        )));
    }
    if let Some(f) = filter {
        if f.width() != w || f.height() != h {
            return Err(OdometryError::BadInput("pixel filter size differs from target".into()));
        }
    }
    let pyramid = build_pyramid(target, k, levels)?;
    let mut out = Vec::with_capacity(levels);
    let mut model_level = model.clone();
    let mut filter_level = filter.cloned();
    for (i, p) in pyramid.into_iter().enumerate() {
        if i > 0 {
            model_level = model_level.downsample(DISC_THRESHOLD);
            filter_level = filter_level.map(|f| {
                Image::from_fn(f.width() / 2, f.height() / 2, |x, y| {
                    f[(2 * x, 2 * y)] && f[(2 * x + 1, 2 * y)] && f[(2 * x, 2 * y + 1)] && f[(2 * x + 1, 2 * y + 1)]
                })
            });
        }
        let target_maps = vertex_and_normal_maps(&p.frame, &p.intrinsics);
        let (lw, lh) = (p.intrinsics.width, p.intrinsics.height);
        let usable = Image::from_fn(lw, lh, |x, y| {
            if !target_maps.is_valid(x, y) {
                return false;
            }
            match &filter_level {
                None => true,
                Some(f) => {
                    f[(x, y)]
                        && [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)]
                            .iter()
                            .all(|&(dx, dy)| f.checked(x as i64 + dx, y as i64 + dy).copied().unwrap_or(false))
                }
            }
        });
        out.push(Level {
            model: model_level.clone(),
            target: target_maps,
            usable,
            k: p.intrinsics,
        });
    }
    Ok(out)
}

impl Level {
    fn normal_equations(&self, pose: &Pose, cfg: &OdometryConfig) -> NormalEquations {
        self.reduce(pose, cfg, true)
    }

    fn energy(&self, pose: &Pose, cfg: &OdometryConfig) -> NormalEquations {
        self.reduce(pose, cfg, false)
    }

    /// Row-parallel accumulation, summed in row order so results do not
    /// depend on scheduling.
    fn reduce(&self, pose: &Pose, cfg: &OdometryConfig, with_jacobian: bool) -> NormalEquations {
        let sigma = cfg.sigma;
        let rows: Vec<NormalEquations> = (0..self.k.height)
            .into_par_iter()
            .map(|y| {
                let mut acc = NormalEquations::zero();
                for x in 0..self.k.width {
                    let Some(t) = self.term(x, y, pose, cfg, with_jacobian) else { continue };
                    acc.count += 1;
                    if sigma > 0.0 {
                        acc.energy += sigma * huber_cost(t.r_d, cfg.huber_delta_d);
                        if with_jacobian {
                            let w = sigma * huber_weight(t.r_d, cfg.huber_delta_d);
                            acc.h += t.j_d * t.j_d.transpose() * w;
                            acc.g += t.j_d * (w * t.r_d);
                        }
                    }
                    if sigma < 1.0 {
                        acc.energy += (1.0 - sigma) * huber_cost(t.r_i, cfg.huber_delta_i);
                        if with_jacobian {
                            let w = (1.0 - sigma) * huber_weight(t.r_i, cfg.huber_delta_i);
                            acc.h += t.j_i * t.j_i.transpose() * w;
                            acc.g += t.j_i * (w * t.r_i);
                        }
                    }
                }
                acc
            })
            .collect();
        let mut total = NormalEquations::zero();
        for r in &rows {
            total.add(r);
        }
        total
    }

    fn term(&self, x: usize, y: usize, pose: &Pose, cfg: &OdometryConfig, with_jacobian: bool) -> Option<Term> {
        if !self.usable[(x, y)] {
            return None;
        }
        let vt = self.target.vertex[(x, y)];
        let nt = self.target.normal[(x, y)];
        let rot = pose.rotation();
        let q = rot.transpose() * (vt - pose.translation());
        if q.z <= 0.0 {
            return None;
        }
        let uv = self.k.project(&q)?;
        let s = self.sample_model(&uv)?;
        let m = pose.transform_point(&s.vertex);
        let n_model = rot * s.normal;
        if (m - vt).norm() >= cfg.max_vertex_distance
            || n_model.dot(&nt) < cfg.max_normal_angle_deg.to_radians().cos()
        {
            return None;
        }
        let n = match cfg.normal_source {
            NormalSource::Target => nt,
            NormalSource::Model => n_model,
        };
        let r_d = (m - vt).dot(&n);
        let r_i = s.color - self.target.color[(x, y)];
        if !with_jacobian {
            return Some(Term {
                r_d,
                j_d: Vector6::zeros(),
                r_i,
                j_i: Vector6::zeros(),
                cell: s.cell,
            });
        }
        // q = R0ᵀ (exp(−δ) V_t − t0)
        let mut dq = SMatrix::<f64, 3, 6>::zeros();
        dq.fixed_view_mut::<3, 3>(0, 0).copy_from(&(rot.transpose() * skew(&vt)));
        dq.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-rot.transpose()));
        let iz = 1.0 / q.z;
        let jpi = SMatrix::<f64, 2, 3>::new(
            self.k.fx * iz,
            0.0,
            -self.k.fx * q.x * iz * iz,
            0.0,
            self.k.fy * iz,
            -self.k.fy * q.y * iz * iz,
        );
        let duv = jpi * dq;
        let mut dm = SMatrix::<f64, 3, 6>::zeros();
        dm.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-skew(&m)));
        dm.fixed_view_mut::<3, 3>(0, 3).copy_from(&Matrix3::identity());
        let gv = SMatrix::<f64, 3, 2>::from_columns(&[s.dv_du, s.dv_dv]);
        dm += rot * gv * duv;
        let j_d = (n.transpose() * dm).transpose();
        let j_i = (Vector2::new(s.dc_du, s.dc_dv).transpose() * duv).transpose();
        Some(Term {
            r_d,
            j_d,
            r_i,
            j_i,
            cell: s.cell,
        })
    }

    fn sample_model(&self, uv: &Vector2<f64>) -> Option<ModelSample> {
        let (fx, fy) = (uv.x.floor(), uv.y.floor());
        let (x0, y0) = (fx as i64, fy as i64);
        if x0 < 0 || y0 < 0 || x0 + 1 >= self.model.width() as i64 || y0 + 1 >= self.model.height() as i64 {
            return None;
        }
        let (x0, y0) = (x0 as usize, y0 as usize);
        let corners = [(x0, y0), (x0 + 1, y0), (x0, y0 + 1), (x0 + 1, y0 + 1)];
        if corners.iter().any(|&(x, y)| !self.model.is_valid(x, y)) {
            return None;
        }
        let z = corners.map(|c| self.model.vertex[c].z);
        let zmin = z.iter().copied().fold(f64::INFINITY, f64::min);
        let zmax = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if zmax - zmin > DISC_THRESHOLD {
            return None;
        }
        let (a, b) = (uv.x - fx, uv.y - fy);
        let v = corners.map(|c| self.model.vertex[c]);
        let c = corners.map(|c| self.model.color[c]);
        let n = corners.map(|c| self.model.normal[c]);
        let wts = [(1.0 - a) * (1.0 - b), a * (1.0 - b), (1.0 - a) * b, a * b];
        let normal = (n[0] * wts[0] + n[1] * wts[1] + n[2] * wts[2] + n[3] * wts[3]).try_normalize(1e-9)?;
        Some(ModelSample {
            vertex: v[0] * wts[0] + v[1] * wts[1] + v[2] * wts[2] + v[3] * wts[3],
            dv_du: (v[1] - v[0]) * (1.0 - b) + (v[3] - v[2]) * b,
            dv_dv: (v[2] - v[0]) * (1.0 - a) + (v[3] - v[1]) * a,
            color: c[0] * wts[0] + c[1] * wts[1] + c[2] * wts[2] + c[3] * wts[3],
            dc_du: (c[1] - c[0]) * (1.0 - b) + (c[3] - c[2]) * b,
            dc_dv: (c[2] - c[0]) * (1.0 - a) + (c[3] - c[1]) * a,
            normal,
            cell: (x0 as i64, y0 as i64),
        })
    }
}
