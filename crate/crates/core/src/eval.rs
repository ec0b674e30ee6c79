//! Frame scoring and deadline sweeps.

use crate::calibration::CalibTables;
use crate::geometry::Box3D;
use crate::pipeline::{FrameResult, Pipeline, PipelineConfig, PipelineError};
use crate::scenegen::Scene;
use crate::scheduler::Policy;
use crate::seed::{derive_seed, name_hash};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io;
use thiserror::Error;

pub const DEFAULT_MATCH_RADIUS_M: f64 = 2.0;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("no scenes to evaluate")]
    NoScenes,
    #[error("no policies or deadlines given")]
    EmptySweep,
    #[error("invalid deadline {0} ms")]
    InvalidDeadline(f64),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub matched: usize,
    pub gt_count: usize,
    pub det_count: usize,
}

/// Greedy center-distance matching within each class group. Detections are
/// visited by descending confidence (input order on ties) and take the
/// nearest unmatched ground truth within `radius_m` in the ground plane.
///
/// An empty detection set has precision 1, an empty ground truth recall 1.
pub fn score_frame(dets: &[Box3D], gt: &[Box3D], radius_m: f64) -> FrameScore {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .confidence
            .total_cmp(&dets[a].confidence)
            .then(a.cmp(&b))
    });
    let mut taken = vec![false; gt.len()];
    let mut matched = 0;
    for i in order {
        let d = &dets[i];
        let mut best: Option<(f64, usize)> = None;
        for (j, g) in gt.iter().enumerate() {
            if taken[j] || g.class_group != d.class_group {
                continue;
            }
            let dist = (d.center[0] - g.center[0]).hypot(d.center[1] - g.center[1]);
            if dist <= radius_m && best.is_none_or(|(bd, _)| dist < bd) {
                best = Some((dist, j));
            }
        }
        if let Some((_, j)) = best {
            taken[j] = true;
            matched += 1;
        }
    }
    let precision = if dets.is_empty() {
        1.0
    } else {
        matched as f64 / dets.len() as f64
    };
    let recall = if gt.is_empty() {
        1.0
    } else {
        matched as f64 / gt.len() as f64
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    FrameScore {
        precision,
        recall,
        f1,
        matched,
        gt_count: gt.len(),
        det_count: dets.len(),
    }
}

/// Aggregate of one (policy, deadline) cell over all scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub policy: Policy,
    pub deadline_ms: f64,
    pub period_ms: f64,
    pub mean_f1: f64,
    pub miss_rate: f64,
    pub mean_elapsed_ms: f64,
    pub mean_overhead_ms: f64,
    pub frames: usize,
    /// Frames per "r,h" configuration.
    pub config_histogram: BTreeMap<String, usize>,
    /// Frames where a non-baseline policy overran although the deadline
    /// left room for the cheapest configuration in the worst case.
    pub invariant_violations: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub cells: Vec<SweepCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub policies: Vec<Policy>,
    pub deadlines_ms: Vec<f64>,
    /// Fixed lidar period; `None` picks one per deadline.
    pub period_ms: Option<f64>,
    pub seed: u64,
    pub pipeline: PipelineConfig,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            policies: Policy::ALL.to_vec(),
            deadlines_ms: standard_deadlines(),
            period_ms: None,
            seed: 0,
            pipeline: PipelineConfig::default(),
        }
    }
}

/// 50, 60, ..., 140 ms.
pub fn standard_deadlines() -> Vec<f64> {
    (5..=14).map(|d| d as f64 * 10.0).collect()
}

/// Lidar period used for a deadline when none is forced: a deadline longer
/// than the 100 ms period needs a slower sensor to stay schedulable.
pub fn default_period_ms(deadline_ms: f64) -> f64 {
    if deadline_ms > 100.0 {
        150.0
    } else {
        100.0
    }
}

/// Worst-case frame time of the cheapest configuration under `policy`; a
/// deadline at or above this can always be met.
pub fn safe_deadline_ms(cfg: &PipelineConfig, policy: Policy, tables: &CalibTables) -> f64 {
    let o = cfg.timing.overheads(policy);
    let proj = if cfg.projection && policy.schedules_heads() {
        o.proj_ms
    } else {
        0.0
    };
    cfg.timing.pc_transform.max_ms + o.sync_ms + o.sched_ms + proj + tables.min_wcet()
}

pub fn run_seed(master: u64, policy: Policy, deadline_ms: f64, scene_idx: usize) -> u64 {
    derive_seed(
        master,
        &[
            name_hash(&policy.name()),
            deadline_ms.to_bits(),
            scene_idx as u64,
        ],
    )
}

pub fn summarize(
    policy: Policy,
    deadline_ms: f64,
    period_ms: f64,
    results: &[FrameResult],
    safe_deadline_ms: f64,
) -> SweepCell {
    let n = results.len().max(1) as f64;
    let mut hist = BTreeMap::new();
    for r in results {
        let c = r.schedule.config();
        *hist.entry(format!("{},{}", c.blocks, c.heads)).or_insert(0) += 1;
    }
    let guarded = !matches!(policy, Policy::Baseline(_)) && deadline_ms >= safe_deadline_ms;
    SweepCell {
        policy,
        deadline_ms,
        period_ms,
        mean_f1: results.iter().map(|r| r.score.f1).sum::<f64>() / n,
        miss_rate: results.iter().filter(|r| r.missed).count() as f64 / n,
        mean_elapsed_ms: results.iter().map(|r| r.elapsed_ms).sum::<f64>() / n,
        mean_overhead_ms: results.iter().map(|r| r.overheads.total()).sum::<f64>() / n,
        frames: results.len(),
        config_histogram: hist,
        invariant_violations: if guarded {
            results.iter().filter(|r| r.missed).count()
        } else {
            0
        },
    }
}

/// Runs one (policy, deadline) cell over every scene.
pub fn run_cell(
    cfg: &SweepConfig,
    policy: Policy,
    deadline_ms: f64,
    tables: &CalibTables,
    scenes: &[Scene],
) -> Result<SweepCell, EvalError> {
    let period = cfg
        .period_ms
        .unwrap_or_else(|| default_period_ms(deadline_ms));
    let mut all = Vec::new();
    for (i, scene) in scenes.iter().enumerate() {
        let mut p = Pipeline::new(
            cfg.pipeline.clone(),
            run_seed(cfg.seed, policy, deadline_ms, i),
        )?;
        all.extend(p.run_scene(scene, deadline_ms, period, policy, tables)?);
    }
    let safe = safe_deadline_ms(&cfg.pipeline, policy, tables);
    Ok(summarize(policy, deadline_ms, period, &all, safe))
}

/// Every policy at every deadline. Cells run in parallel; results do not
/// depend on thread count.
pub fn run_sweep(
    cfg: &SweepConfig,
    tables: &CalibTables,
    scenes: &[Scene],
) -> Result<SweepReport, EvalError> {
    if scenes.is_empty() {
        return Err(EvalError::NoScenes);
    }
    if cfg.policies.is_empty() || cfg.deadlines_ms.is_empty() {
        return Err(EvalError::EmptySweep);
    }
    if let Some(d) = cfg
        .deadlines_ms
        .iter()
        .find(|d| d.is_nan() || **d <= 0.0 || d.is_infinite())
    {
        return Err(EvalError::InvalidDeadline(*d));
    }
    let jobs: Vec<(Policy, f64)> = cfg
        .policies
        .iter()
        .flat_map(|p| cfg.deadlines_ms.iter().map(move |d| (*p, *d)))
        .collect();
    let mut cells = jobs
        .par_iter()
        .map(|&(p, d)| run_cell(cfg, p, d, tables, scenes))
        .collect::<Result<Vec<_>, _>>()?;
    cells.sort_by(|a, b| {
        a.policy
            .name()
            .cmp(&b.policy.name())
            .then(b.deadline_ms.total_cmp(&a.deadline_ms))
    });
    Ok(SweepReport { cells })
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    policy: String,
    deadline_ms: f64,
    period_ms: f64,
    mean_f1: f64,
    miss_rate: f64,
    mean_elapsed_ms: f64,
}

impl SweepReport {
    pub fn cell(&self, policy: Policy, deadline_ms: f64) -> Option<&SweepCell> {
        self.cells
            .iter()
            .find(|c| c.policy == policy && c.deadline_ms == deadline_ms)
    }

    pub fn invariant_violations(&self) -> usize {
        self.cells.iter().map(|c| c.invariant_violations).sum()
    }

    pub fn write_csv<W: io::Write>(&self, w: W) -> Result<(), EvalError> {
        let mut out = csv::Writer::from_writer(w);
        for c in &self.cells {
            out.serialize(CsvRow {
                policy: c.policy.name(),
                deadline_ms: c.deadline_ms,
                period_ms: c.period_ms,
                mean_f1: c.mean_f1,
                miss_rate: c.miss_rate,
                mean_elapsed_ms: c.mean_elapsed_ms,
            })?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv is utf-8")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, EvalError> {
        Ok(serde_json::from_str(text)?)
    }
}

/// One cell present in both reports.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellDiff {
    pub policy: Policy,
    pub deadline_ms: f64,
    pub delta_f1: f64,
    pub delta_miss_rate: f64,
}

/// `b - a` for every cell in both reports, in `a`'s order.
pub fn compare(a: &SweepReport, b: &SweepReport) -> Vec<CellDiff> {
    a.cells
        .iter()
        .filter_map(|ca| {
            let cb = b.cell(ca.policy, ca.deadline_ms)?;
            Some(CellDiff {
                policy: ca.policy,
                deadline_ms: ca.deadline_ms,
                delta_f1: cb.mean_f1 - ca.mean_f1,
                delta_miss_rate: cb.miss_rate - ca.miss_rate,
            })
        })
        .collect()
}
