//! Trajectory evaluation and text I/O.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use super::BenchError;
use crate::geom::Pose;

/// A camera pose `T^W_C` tagged with its frame timestamp.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StampedPose {
    pub timestamp: f64,
    pub pose: Pose,
}

impl StampedPose {
    pub fn new(timestamp: f64, pose: Pose) -> Self {
        StampedPose { timestamp, pose }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AteResult {
    pub rmse: f64,
    pub errors: Vec<f64>,
    pub matched: usize,
    /// Rigid transform applied to the estimate (`gt ≈ alignment · est`).
    #[serde(skip)]
    pub alignment: Pose,
}

/// Closed-form least-squares rigid transform `T` minimizing
/// `Σ |dst_i − T·src_i|²` (rotation and translation, no scale).
pub fn align_rigid(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Pose {
    assert_eq!(src.len(), dst.len());
    let n = src.len().max(1) as f64;
    let mu_s = src.iter().sum::<Vector3<f64>>() / n;
    let mu_d = dst.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        cov += (d - mu_d) * (s - mu_s).transpose();
    }
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut fix = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        fix[(2, 2)] = -1.0;
    }
    let r = u * fix * v_t;
    Pose::new(r, mu_d - r * mu_s).renormalized()
}

/// Pairs each estimate with the nearest ground-truth stamp within `max_dt`.
pub fn match_timestamps(est: &[StampedPose], gt: &[StampedPose], max_dt: f64) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    if gt.is_empty() {
        return out;
    }
    for (i, e) in est.iter().enumerate() {
        let j = gt.partition_point(|g| g.timestamp < e.timestamp);
        let best = [j.checked_sub(1), (j < gt.len()).then_some(j)]
            .into_iter()
            .flatten()
            .min_by(|&a, &b| {
                (gt[a].timestamp - e.timestamp)
                    .abs()
                    .total_cmp(&(gt[b].timestamp - e.timestamp).abs())
            });
        if let Some(j) = best {
            if (gt[j].timestamp - e.timestamp).abs() <= max_dt {
                out.push((i, j));
            }
        }
    }
    out
}

/// Absolute trajectory error: timestamp association, rigid alignment, then
/// RMSE of the translational residuals.
pub fn evaluate_ate(est: &[StampedPose], gt: &[StampedPose], max_dt: f64) -> Result<AteResult, BenchError> {
    let pairs = match_timestamps(est, gt, max_dt);
    if pairs.len() < 3 {
        return Err(BenchError::InsufficientOverlap(pairs.len()));
    }
    let src: Vec<_> = pairs.iter().map(|&(i, _)| *est[i].pose.translation()).collect();
    let dst: Vec<_> = pairs.iter().map(|&(_, j)| *gt[j].pose.translation()).collect();
    Ok(ate_from_points(&src, &dst))
}

/// ATE between already associated position lists.
pub fn ate_from_points(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> AteResult {
    let alignment = align_rigid(src, dst);
    let errors: Vec<f64> = src
        .iter()
        .zip(dst)
        .map(|(s, d)| (alignment.transform_point(s) - d).norm())
        .collect();
    let rmse = (errors.iter().map(|e| e * e).sum::<f64>() / errors.len().max(1) as f64).sqrt();
    AteResult {
        rmse,
        matched: errors.len(),
        errors,
        alignment,
    }
}

/// One TUM trajectory line, `t tx ty tz qx qy qz qw`, with `qw ≥ 0`.
pub fn format_pose_line(p: &StampedPose) -> String {
    let t = p.pose.translation();
    let mut q = p.pose.quaternion().into_inner();
    if q.w < 0.0 {
        q = -q;
    }
    let mut s = String::new();
    let _ = write!(s, "{}", p.timestamp);
    for v in [t.x, t.y, t.z, q.i, q.j, q.k, q.w] {
        // normalize negative zero so identity prints as plain zeros
        let v = if v == 0.0 { 0.0 } else { v };
        let _ = write!(s, " {v}");
    }
    s
}

pub fn parse_pose_line(line: &str) -> Option<StampedPose> {
    let v: Vec<f64> = line.split_whitespace().map(str::parse).collect::<Result<_, _>>().ok()?;
    if v.len() != 8 {
        return None;
    }
    let q = nalgebra::Quaternion::new(v[7], v[4], v[5], v[6]);
    if q.norm() < 1e-12 {
        return None;
    }
    Some(StampedPose::new(
        v[0],
        Pose::from_quaternion(UnitQuaternion::from_quaternion(q), Vector3::new(v[1], v[2], v[3])),
    ))
}

pub fn write_trajectory(poses: &[StampedPose], path: &Path) -> Result<(), BenchError> {
    if poses.is_empty() {
        return Err(BenchError::EmptyEstimate);
    }
    let mut out = String::from("# timestamp tx ty tz qx qy qz qw\n");
    for p in poses {
        out.push_str(&format_pose_line(p));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| BenchError::io(path, e))
}

/// Reads a TUM trajectory; comment and blank lines are skipped.
pub fn read_trajectory(path: &Path) -> Result<Vec<StampedPose>, BenchError> {
    let text = std::fs::read_to_string(path).map_err(|e| BenchError::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        out.push(parse_pose_line(line).ok_or_else(|| BenchError::Parse {
            path: path.to_path_buf(),
            line: n + 1,
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square() -> Vec<Vector3<f64>> {
        vec![
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(1.0, 1.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
        ]
    }

    fn stamped(points: &[Vector3<f64>]) -> Vec<StampedPose> {
        points
            .iter()
            .enumerate()
            .map(|(i, p)| StampedPose::new(i as f64 / 30.0, Pose::from_translation(*p)))
            .collect()
    }

    #[test]
    fn identical_trajectories_have_zero_error() {
        let gt = stamped(&square());
        let r = evaluate_ate(&gt, &gt, 0.01).unwrap();
        assert!(r.rmse < 1e-12);
        assert_eq!(r.matched, 4);
    }

    #[test]
    fn global_rigid_offset_is_removed() {
        let gt = stamped(&square());
        let g = Pose::from_axis_angle(Vector3::new(0.3, -1.0, 0.5), 2.1, Vector3::new(4.0, -2.0, 0.7));
        let est: Vec<_> = gt.iter().map(|p| StampedPose::new(p.timestamp, g.compose(&p.pose))).collect();
        let r = evaluate_ate(&est, &gt, 0.01).unwrap();
        assert!(r.rmse < 1e-9, "{}", r.rmse);
    }

    #[test]
    fn displaced_corner_matches_grid_search() {
        let gt = square();
        let mut est = gt.clone();
        est[2].x += 0.1;
        let fast = ate_from_points(&est, &gt).rmse;
        // the optimum stays in-plane, so search yaw and planar shift,
        // coarse then fine around the best cell
        let cost = |th: f64, tx: f64, ty: f64| {
            let (s, c) = th.sin_cos();
            let se: f64 = est
                .iter()
                .zip(&gt)
                .map(|(e, g)| {
                    let x = c * e.x - s * e.y + tx - g.x;
                    let y = s * e.x + c * e.y + ty - g.y;
                    x * x + y * y
                })
                .sum();
            (se / 4.0).sqrt()
        };
        let mut best = (f64::MAX, 0.0, 0.0, 0.0);
        let mut span = (0.2, 0.2, 0.2);
        for _ in 0..6 {
            let center = (best.1, best.2, best.3);
            for a in -20..=20 {
                for b in -20..=20 {
                    for c in -20..=20 {
                        let th = center.0 + span.0 * a as f64 / 20.0;
                        let tx = center.1 + span.1 * b as f64 / 20.0;
                        let ty = center.2 + span.2 * c as f64 / 20.0;
                        let v = cost(th, tx, ty);
                        if v < best.0 {
                            best = (v, th, tx, ty);
                        }
                    }
                }
            }
            span = (span.0 / 8.0, span.1 / 8.0, span.2 / 8.0);
        }
        assert!((fast - best.0).abs() < 1e-4, "{fast} vs {}", best.0);
        assert!(fast < 0.05);
    }

    #[test]
    fn too_few_pairs_is_rejected() {
        let gt = stamped(&square()[..2]);
        assert!(matches!(evaluate_ate(&gt, &gt, 0.01), Err(BenchError::InsufficientOverlap(2))));
    }

    #[test]
    fn timestamps_pair_with_nearest() {
        let gt: Vec<_> = (0..5).map(|i| StampedPose::new(i as f64, Pose::identity())).collect();
        let est = vec![
            StampedPose::new(0.4, Pose::identity()),
            StampedPose::new(2.6, Pose::identity()),
            StampedPose::new(9.0, Pose::identity()),
        ];
        assert_eq!(match_timestamps(&est, &gt, 0.5), vec![(0, 0), (1, 3)]);
    }

    #[test]
    fn identity_pose_line() {
        assert_eq!(format_pose_line(&StampedPose::new(1.5, Pose::identity())), "1.5 0 0 0 0 0 0 1");
    }

    #[test]
    fn trajectory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traj.txt");
        let poses: Vec<_> = (0..20)
            .map(|i| {
                let a = i as f64 * 0.37;
                StampedPose::new(
                    1305031102.175304 + i as f64 / 30.0,
                    Pose::from_axis_angle(Vector3::new(a.cos(), 1.0, a.sin()), a * 2.0, Vector3::new(a, -a, 0.5)),
                )
            })
            .collect();
        write_trajectory(&poses, &path).unwrap();
        let back = read_trajectory(&path).unwrap();
        assert_eq!(back.len(), poses.len());
        for (a, b) in poses.iter().zip(&back) {
            assert!((a.timestamp - b.timestamp).abs() < 1e-6);
            assert!(crate::geom::ominus(&a.pose, &b.pose).norm() < 1e-6);
        }
        assert!(matches!(write_trajectory(&[], &path), Err(BenchError::EmptyEstimate)));
    }
}
