//! Runtime accounting: per-stage summaries and their CSV forms.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use super::pipeline::{Stage, TrajectoryEstimate};
use super::BenchError;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageSummary {
    pub stage: Stage,
    pub samples: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub max_ms: f64,
}

/// Nearest-rank percentile of sorted samples.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

/// One summary per stage that ran at least once, in [`Stage::ALL`] order.
pub fn stage_summaries(est: &TrajectoryEstimate) -> Vec<StageSummary> {
    Stage::ALL
        .iter()
        .filter_map(|&stage| {
            let mut v: Vec<f64> = est.timings.iter().filter_map(|t| t.stages.get(&stage).copied()).collect();
            if v.is_empty() {
                return None;
            }
            v.sort_by(f64::total_cmp);
            Some(StageSummary {
                stage,
                samples: v.len(),
                mean_ms: v.iter().sum::<f64>() / v.len() as f64,
                p50_ms: percentile(&v, 0.5),
                p95_ms: percentile(&v, 0.95),
                max_ms: v[v.len() - 1],
            })
        })
        .collect()
}

/// CSV with one row per stage that ran; a trailing `ate_rmse_m` row is
/// added when an ATE is given.
pub fn format_report(est: &TrajectoryEstimate, ate_rmse: Option<f64>) -> String {
    let mut out = String::from("stage,samples,mean_ms,p50_ms,p95_ms,max_ms\n");
    for s in stage_summaries(est) {
        let _ = writeln!(
            out,
            "{},{},{:.3},{:.3},{:.3},{:.3}",
            s.stage.name(),
            s.samples,
            s.mean_ms,
            s.p50_ms,
            s.p95_ms,
            s.max_ms
        );
    }
    if let Some(ate) = ate_rmse {
        let _ = writeln!(out, "ate_rmse_m,{},{ate:.6},,,", est.len());
    }
    out
}

pub fn write_report(est: &TrajectoryEstimate, ate_rmse: Option<f64>, path: &Path) -> Result<(), BenchError> {
    if est.is_empty() {
        return Err(BenchError::EmptyEstimate);
    }
    std::fs::write(path, format_report(est, ate_rmse)).map_err(|e| BenchError::io(path, e))
}

/// Per-frame CSV: one column per stage, blank where a stage did not run.
pub fn write_frame_timings(est: &TrajectoryEstimate, path: &Path) -> Result<(), BenchError> {
    let mut out = String::from("frame");
    for s in Stage::ALL {
        out.push(',');
        out.push_str(s.name());
    }
    out.push('\n');
    for t in &est.timings {
        let _ = write!(out, "{}", t.frame);
        for s in Stage::ALL {
            out.push(',');
            if let Some(ms) = t.stages.get(&s) {
                let _ = write!(out, "{ms:.3}");
            }
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| BenchError::io(path, e))
}
