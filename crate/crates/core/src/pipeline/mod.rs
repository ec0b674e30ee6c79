//! The simulated anytime detector.
//!
//! Per frame: point-cloud transform and sync, phase-1/phase-2 scheduling,
//! projection of cached boxes for skipped heads, detector execution, merge,
//! cache and head-state update, deadline accounting. A frame that overruns
//! its deadline is scored as an empty detection.

pub mod detector;
pub mod timing;

pub use detector::{score_sums, simulate_detector, DetectorModel};
pub use timing::{Overheads, PcTransform, TimingModel};

use crate::calibration::{CalibTables, Config};
use crate::eval::{score_frame, FrameScore, DEFAULT_MATCH_RADIUS_M};
use crate::geometry::{project_batch, Box3D, PoseContext};
use crate::scenegen::{gt_heads_present, Frame, Scene};
use crate::scheduler::{
    choose_config, schedule_frame, FrameContext, Policy, Schedule, SchedulerError, SchedulerState,
    DEFAULT_FRAME_LIMIT,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid pipeline configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
    #[error("fresh and projected detections share heads {0:?}")]
    OverlappingSources(Vec<usize>),
    #[error("period {period_ms} ms is not a whole multiple of the scene period {scene_ms} ms")]
    PeriodMismatch { period_ms: f64, scene_ms: f64 },
    #[error("tables describe {tables} heads, scene has {scene}")]
    HeadMismatch { tables: usize, scene: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub detector: DetectorModel,
    pub timing: TimingModel,
    pub frame_limit: u32,
    /// Project cached boxes for skipped heads.
    pub projection: bool,
    /// Optional exponential confidence decay of projected boxes (1/s).
    #[serde(default)]
    pub projected_conf_decay: Option<f64>,
    /// Projected boxes farther than this from the ego origin are dropped.
    pub detection_range_m: f64,
    pub match_radius_m: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            detector: DetectorModel::default(),
            timing: TimingModel::default(),
            frame_limit: DEFAULT_FRAME_LIMIT,
            projection: true,
            projected_conf_decay: None,
            detection_range_m: 50.0,
            match_radius_m: DEFAULT_MATCH_RADIUS_M,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        self.detector
            .validate()
            .map_err(PipelineError::InvalidConfig)?;
        self.timing
            .validate()
            .map_err(PipelineError::InvalidConfig)?;
        if self.detector.num_blocks() != self.timing.num_blocks() {
            return Err(PipelineError::InvalidConfig(format!(
                "detector models {} blocks, timing models {}",
                self.detector.num_blocks(),
                self.timing.num_blocks()
            )));
        }
        if self.detection_range_m.is_nan() || self.detection_range_m <= 0.0 {
            return Err(PipelineError::InvalidConfig(
                "detection_range_m must be positive".into(),
            ));
        }
        if self.frame_limit == 0 {
            return Err(PipelineError::InvalidConfig(
                "frame_limit must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CacheEntry {
    /// Pipeline frame counter when the head last completed.
    pub frame: u64,
    pub context: PoseContext,
    pub boxes: Vec<Box3D>,
}

/// Last detections of every head, as detected.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct HeadCache {
    entries: Vec<Option<CacheEntry>>,
}

impl HeadCache {
    pub fn new(num_heads: usize) -> Self {
        Self {
            entries: vec![None; num_heads],
        }
    }

    pub fn get(&self, head: usize) -> Option<&CacheEntry> {
        self.entries.get(head - 1).and_then(Option::as_ref)
    }

    pub fn store(&mut self, head: usize, entry: CacheEntry) {
        self.entries[head - 1] = Some(entry);
    }
}

/// Output of one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameResult {
    pub frame_index: usize,
    pub timestamp: f64,
    pub schedule: Schedule,
    /// Scored fresh detections; empty when the deadline was missed.
    pub fresh: Vec<Box3D>,
    /// Scored projected detections; empty when the deadline was missed.
    pub projected: Vec<Box3D>,
    /// Release to completion.
    pub elapsed_ms: f64,
    pub pc_transform_ms: f64,
    pub post_sync_ms: f64,
    /// Budget handed to phase 1.
    pub remaining_ms: f64,
    pub overheads: Overheads,
    pub missed: bool,
    /// Heads whose work finished before the deadline.
    pub completed_heads: BTreeSet<usize>,
    /// (head, frames since that head's cached boxes were detected).
    pub projection_ages: Vec<(usize, u64)>,
    pub score: FrameScore,
}

/// Concatenates fresh and projected boxes, which must come from disjoint heads.
pub fn merge_detections(fresh: &[Box3D], projected: &[Box3D]) -> Result<Vec<Box3D>, PipelineError> {
    let fresh_heads: BTreeSet<usize> = fresh.iter().map(|b| b.class_group).collect();
    let overlap: BTreeSet<usize> = projected
        .iter()
        .map(|b| b.class_group)
        .filter(|h| fresh_heads.contains(h))
        .collect();
    if !overlap.is_empty() {
        return Err(PipelineError::OverlappingSources(
            overlap.into_iter().collect(),
        ));
    }
    Ok(fresh.iter().chain(projected).cloned().collect())
}

/// A single pipeline instance. Owns its random stream; one instance per
/// scene run.
pub struct Pipeline {
    cfg: PipelineConfig,
    rng: ChaCha8Rng,
    frame_counter: u64,
}

struct Planned {
    pc_ms: f64,
    remaining_ms: f64,
    overheads: Overheads,
    project: bool,
    schedule: Schedule,
    /// Every head's detections at the scheduled block count.
    all_dets: Vec<Box3D>,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig, seed: u64) -> Result<Self, PipelineError> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            rng: ChaCha8Rng::seed_from_u64(seed),
            frame_counter: 0,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    /// Processes one frame under `policy` with `deadline_ms` measured from
    /// the frame's release.
    pub fn run_frame(
        &mut self,
        frame: &Frame,
        deadline_ms: f64,
        policy: Policy,
        tables: &CalibTables,
        state: &mut SchedulerState,
        cache: &mut HeadCache,
    ) -> Result<FrameResult, PipelineError> {
        let num_heads = tables.num_heads();
        let overheads = self.cfg.timing.overheads(policy);
        let project = self.cfg.projection && policy.schedules_heads();
        let proj_ms = if project { overheads.proj_ms } else { 0.0 };
        let overheads = Overheads {
            proj_ms,
            ..overheads
        };

        let pc_ms = self.cfg.timing.sample_pc(&mut self.rng);
        // scheduling and merge costs are known up front and come out of the
        // budget before table lookup
        let remaining_ms = deadline_ms - pc_ms - overheads.total();

        let blocks = choose_config(policy, tables, remaining_ms).config.blocks;
        let gt = frame.gt_boxes();
        let all_dets = self
            .cfg
            .detector
            .detect_all(&gt, &frame.pose, blocks, &mut self.rng);
        let ctx = FrameContext {
            gt_present: Some(gt_heads_present(frame, num_heads)),
            score_sums: Some(score_sums(&all_dets, num_heads)),
        };
        let schedule = schedule_frame(policy, tables, state, remaining_ms, &ctx)?;
        debug_assert_eq!(schedule.num_blocks, blocks);

        self.finish_frame(
            frame,
            deadline_ms,
            Planned {
                pc_ms,
                remaining_ms,
                overheads,
                project,
                schedule,
                all_dets,
            },
            state,
            cache,
        )
    }

    /// One calibration frame: `config` fixed, heads rotated round-robin, no
    /// deadline and no overheads.
    fn calibration_frame(
        &mut self,
        frame: &Frame,
        config: Config,
        state: &mut SchedulerState,
        cache: &mut HeadCache,
    ) -> Result<FrameResult, PipelineError> {
        let num_heads = state.heads.num_heads();
        let pc_ms = self.cfg.timing.sample_pc(&mut self.rng);
        let all_dets = self.cfg.detector.detect_all(
            &frame.gt_boxes(),
            &frame.pose,
            config.blocks,
            &mut self.rng,
        );
        let (heads, _) =
            crate::scheduler::select_heads_round_robin(state.rr_cursor, config.heads, num_heads);
        let schedule = Schedule {
            num_blocks: config.blocks,
            heads: heads.into_iter().collect(),
            infeasible: false,
        };
        self.finish_frame(
            frame,
            f64::INFINITY,
            Planned {
                pc_ms,
                remaining_ms: f64::INFINITY,
                overheads: Overheads::default(),
                project: self.cfg.projection,
                schedule,
                all_dets,
            },
            state,
            cache,
        )
    }

    fn finish_frame(
        &mut self,
        frame: &Frame,
        deadline_ms: f64,
        plan: Planned,
        state: &mut SchedulerState,
        cache: &mut HeadCache,
    ) -> Result<FrameResult, PipelineError> {
        let Planned {
            pc_ms,
            remaining_ms,
            overheads,
            project,
            schedule,
            all_dets,
        } = plan;
        let num_heads = state.heads.num_heads();
        let this_frame = self.frame_counter;
        self.frame_counter += 1;

        // projection runs on the side while the detector executes
        let mut projected = Vec::new();
        let mut projection_ages = Vec::new();
        if project {
            for h in (1..=num_heads).filter(|h| !schedule.heads.contains(h)) {
                let Some(entry) = cache.get(h) else { continue };
                let batch = project_batch(&entry.boxes, &frame.pose);
                let age_s = frame.pose.timestamp - entry.context.timestamp;
                let range = self.cfg.detection_range_m;
                projected.extend(batch.boxes.into_iter().filter_map(|mut b| {
                    let [x, y, _] = b.det_lidar_pose.transform_point(b.center);
                    if x.hypot(y) > range {
                        return None;
                    }
                    if let Some(rate) = self.cfg.projected_conf_decay {
                        b.confidence *= (-rate * age_s).exp();
                    }
                    Some(b)
                }));
                projection_ages.push((h, this_frame - entry.frame));
            }
        }

        let config = schedule.config();
        let post_sync_ms = self.cfg.timing.sample_post_sync(config, &mut self.rng);
        let detector_start = pc_ms + overheads.sync_ms + overheads.sched_ms;
        let elapsed_ms = detector_start + post_sync_ms + overheads.proj_ms;
        let missed = elapsed_ms > deadline_ms;

        // heads run in index order after the backbone
        let completed_heads: BTreeSet<usize> = if missed {
            schedule
                .heads
                .iter()
                .enumerate()
                .filter(|(k, _)| {
                    let frac = self.cfg.timing.head_completion_fraction(config, k + 1);
                    detector_start + post_sync_ms * frac <= deadline_ms
                })
                .map(|(_, h)| *h)
                .collect()
        } else {
            schedule.heads.clone()
        };

        let mut per_head: Vec<Vec<Box3D>> = vec![Vec::new(); num_heads];
        for d in all_dets {
            if schedule.heads.contains(&d.class_group) {
                per_head[d.class_group - 1].push(d);
            }
        }
        let scores: Vec<Vec<f64>> = per_head
            .iter()
            .map(|ds| ds.iter().map(|d| d.confidence).collect())
            .collect();
        for &h in &completed_heads {
            cache.store(
                h,
                CacheEntry {
                    frame: this_frame,
                    context: frame.pose,
                    boxes: per_head[h - 1].clone(),
                },
            );
        }
        state.commit(&schedule, &completed_heads, &scores);

        let (fresh, projected) = if missed {
            (Vec::new(), Vec::new())
        } else {
            (
                per_head.into_iter().flatten().collect::<Vec<_>>(),
                projected,
            )
        };
        let merged = merge_detections(&fresh, &projected)?;
        let score = score_frame(&merged, &frame.gt_boxes(), self.cfg.match_radius_m);

        Ok(FrameResult {
            frame_index: frame.index,
            timestamp: frame.timestamp,
            schedule,
            fresh,
            projected,
            elapsed_ms,
            pc_transform_ms: pc_ms,
            post_sync_ms,
            remaining_ms,
            overheads,
            missed,
            completed_heads,
            projection_ages,
            score,
        })
    }

    fn stride(scene: &Scene, period_ms: f64) -> Result<usize, PipelineError> {
        let ratio = period_ms / scene.period_ms;
        let stride = ratio.round();
        if stride < 1.0 || (ratio - stride).abs() > 1e-6 {
            return Err(PipelineError::PeriodMismatch {
                period_ms,
                scene_ms: scene.period_ms,
            });
        }
        Ok(stride as usize)
    }

    /// Releases one scene frame every `period_ms` and runs them in order,
    /// threading head state and cache through the run.
    pub fn run_scene(
        &mut self,
        scene: &Scene,
        deadline_ms: f64,
        period_ms: f64,
        policy: Policy,
        tables: &CalibTables,
    ) -> Result<Vec<FrameResult>, PipelineError> {
        let num_heads = tables.num_heads();
        if scene.num_heads > num_heads {
            return Err(PipelineError::HeadMismatch {
                tables: num_heads,
                scene: scene.num_heads,
            });
        }
        let stride = Self::stride(scene, period_ms)?;
        let mut state = SchedulerState::new(num_heads, self.cfg.frame_limit);
        let mut cache = HeadCache::new(num_heads);
        scene
            .frames
            .iter()
            .step_by(stride)
            .map(|f| self.run_frame(f, deadline_ms, policy, tables, &mut state, &mut cache))
            .collect()
    }

    /// Replays `scene` with `config` fixed for calibration.
    pub fn calibration_pass(
        &mut self,
        scene: &Scene,
        period_ms: f64,
        config: Config,
    ) -> Result<Vec<FrameResult>, PipelineError> {
        let stride = Self::stride(scene, period_ms)?;
        let num_heads = scene.num_heads.max(config.heads);
        let mut state = SchedulerState::new(num_heads, self.cfg.frame_limit);
        let mut cache = HeadCache::new(num_heads);
        scene
            .frames
            .iter()
            .step_by(stride)
            .map(|f| self.calibration_frame(f, config, &mut state, &mut cache))
            .collect()
    }
}
