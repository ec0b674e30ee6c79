//! Two-phase frame scheduling.
//!
//! Phase 1 picks a (blocks, heads) configuration from the calibration tables
//! for the remaining time budget. Phase 2 decides *which* heads run. Head
//! indices are 1-based throughout.

use crate::calibration::{best_config, best_config_all_heads, CalibTables, Choice, Config};
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

/// Floor of a normalized aged confidence.
pub const CONF_FLOOR: f64 = 0.01;
/// Divisor applied to a head's confidence sum before clamping to [floor, 1].
pub const CONF_NORM: f64 = 10.0;
pub const DEFAULT_FRAME_LIMIT: u32 = 5;
/// Ceiling of a normalized aged confidence; used for over-age heads.
pub const MAX_SCORE: f64 = 1.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SchedulerError {
    #[error("cannot select {n} of {num_heads} heads")]
    CountOutOfRange { n: usize, num_heads: usize },
    #[error("head {head} outside 1..={num_heads}")]
    HeadOutOfRange { head: usize, num_heads: usize },
    #[error("tables have {tables} heads but head state has {state}")]
    DimensionMismatch { tables: usize, state: usize },
    #[error("policy {0} needs frame context that was not supplied: {1}")]
    MissingContext(Policy, &'static str),
    #[error("unknown policy name {0:?}")]
    UnknownPolicy(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Policy {
    /// Aging plus aged confidence.
    Ours,
    RoundRobin,
    /// Aging plus on-the-fly classification score sums of all heads.
    ClsScrSum,
    /// Aging plus ground-truth presence; an upper reference.
    NearOptimal,
    /// Block-count selection only; every head always runs.
    MultiStage,
    /// Fixed block count, every head, no scheduling.
    Baseline(usize),
}

impl Policy {
    /// Every named policy for a detector with up to three blocks.
    pub const ALL: [Policy; 8] = [
        Policy::Ours,
        Policy::RoundRobin,
        Policy::ClsScrSum,
        Policy::NearOptimal,
        Policy::MultiStage,
        Policy::Baseline(1),
        Policy::Baseline(2),
        Policy::Baseline(3),
    ];

    pub fn name(&self) -> String {
        match self {
            Policy::Ours => "ours".into(),
            Policy::RoundRobin => "round_robin".into(),
            Policy::ClsScrSum => "cls_scr_sum".into(),
            Policy::NearOptimal => "near_optimal".into(),
            Policy::MultiStage => "multistage".into(),
            Policy::Baseline(r) => format!("baseline{r}"),
        }
    }

    /// Policies that pick a head subset and project the skipped heads.
    pub fn schedules_heads(&self) -> bool {
        matches!(
            self,
            Policy::Ours | Policy::RoundRobin | Policy::ClsScrSum | Policy::NearOptimal
        )
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for Policy {
    type Err = SchedulerError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ours" => Ok(Policy::Ours),
            "round_robin" => Ok(Policy::RoundRobin),
            "cls_scr_sum" => Ok(Policy::ClsScrSum),
            "near_optimal" => Ok(Policy::NearOptimal),
            "multistage" => Ok(Policy::MultiStage),
            _ => s
                .strip_prefix("baseline")
                .and_then(|r| r.parse::<usize>().ok())
                .filter(|r| *r >= 1)
                .map(Policy::Baseline)
                .ok_or_else(|| SchedulerError::UnknownPolicy(s.to_string())),
        }
    }
}

impl Serialize for Policy {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.name())
    }
}

impl<'de> Deserialize<'de> for Policy {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Per-head bookkeeping for the aging heuristic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadState {
    /// Frames since each head last ran; 1 right after running.
    pub ages: Vec<u32>,
    /// Normalized confidence sums from each head's last run.
    pub aged_conf: Vec<f64>,
    pub frame_limit: u32,
    pub max_score: f64,
}

impl HeadState {
    /// Fresh state: every head age 1 with full confidence, so that each head
    /// gets an early chance to report.
    pub fn new(num_heads: usize, frame_limit: u32) -> Self {
        Self {
            ages: vec![1; num_heads],
            aged_conf: vec![MAX_SCORE; num_heads],
            frame_limit,
            max_score: MAX_SCORE,
        }
    }

    pub fn num_heads(&self) -> usize {
        self.ages.len()
    }

    pub fn priority(&self, head: usize) -> f64 {
        aged_priority(
            self.ages[head - 1],
            self.aged_conf[head - 1],
            self.frame_limit,
            self.max_score,
        )
    }

    pub fn priorities(&self) -> Vec<f64> {
        (1..=self.num_heads()).map(|h| self.priority(h)).collect()
    }
}

pub fn normalize_confidence(sum: f64) -> f64 {
    (sum / CONF_NORM).clamp(CONF_FLOOR, MAX_SCORE)
}

fn aged_priority(age: u32, conf: f64, frame_limit: u32, max_score: f64) -> f64 {
    if age > frame_limit {
        f64::from(age) * max_score
    } else {
        f64::from(age) * conf
    }
}

/// Records the outcome of the previous frame: heads in `prev_heads` get
/// their confidence refreshed from `prev_scores` (indexed by head - 1) and
/// their age reset to 1; every other head ages by one frame.
pub fn update_head_state(
    state: &HeadState,
    prev_heads: &BTreeSet<usize>,
    prev_scores: &[Vec<f64>],
) -> HeadState {
    let mut next = state.clone();
    for h in 1..=state.num_heads() {
        if prev_heads.contains(&h) {
            let sum: f64 = prev_scores.get(h - 1).map_or(0.0, |s| s.iter().sum());
            next.aged_conf[h - 1] = normalize_confidence(sum);
            next.ages[h - 1] = 1;
        } else {
            next.ages[h - 1] = next.ages[h - 1].saturating_add(1);
        }
    }
    next
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Ranked {
    priority: f64,
    head: usize,
}

impl Eq for Ranked {}

impl Ord for Ranked {
    fn cmp(&self, other: &Self) -> Ordering {
        // max-heap on priority; lower head index wins ties
        self.priority
            .total_cmp(&other.priority)
            .then_with(|| other.head.cmp(&self.head))
    }
}

impl PartialOrd for Ranked {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Pops the `n` highest priorities (1-based heads), in pop order.
fn top_n(priorities: &[f64], n: usize) -> Result<Vec<usize>, SchedulerError> {
    let num_heads = priorities.len();
    if n == 0 || n > num_heads {
        return Err(SchedulerError::CountOutOfRange { n, num_heads });
    }
    let mut heap: BinaryHeap<Ranked> = priorities
        .iter()
        .enumerate()
        .map(|(i, p)| Ranked {
            priority: *p,
            head: i + 1,
        })
        .collect();
    Ok((0..n).filter_map(|_| heap.pop()).map(|r| r.head).collect())
}

/// The aging heuristic: priority is age times aged confidence, or age times
/// `max_score` once a head is older than the frame limit.
pub fn select_heads_ours(state: &HeadState, n: usize) -> Result<Vec<usize>, SchedulerError> {
    top_n(&state.priorities(), n)
}

/// `n` consecutive heads starting at `cursor`, wrapping; returns the new cursor.
pub fn select_heads_round_robin(cursor: usize, n: usize, num_heads: usize) -> (Vec<usize>, usize) {
    debug_assert!((1..=num_heads).contains(&cursor) && (1..=num_heads).contains(&n));
    let heads = (0..n).map(|i| (cursor - 1 + i) % num_heads + 1).collect();
    (heads, (cursor - 1 + n) % num_heads + 1)
}

/// Same ranking as [`select_heads_ours`], but confidence comes from the
/// current frame's score sums instead of the heads' last runs.
pub fn select_heads_cls_scr_sum(
    score_sums: &[f64],
    ages: &[u32],
    n: usize,
    frame_limit: u32,
) -> Result<Vec<usize>, SchedulerError> {
    let priorities: Vec<f64> = score_sums
        .iter()
        .zip(ages)
        .map(|(s, a)| aged_priority(*a, normalize_confidence(*s), frame_limit, MAX_SCORE))
        .collect();
    top_n(&priorities, n)
}

/// Heads with ground truth in view first (oldest first), then the rest by age.
pub fn select_heads_near_optimal(
    gt_present: &[bool],
    ages: &[u32],
    n: usize,
) -> Result<Vec<usize>, SchedulerError> {
    let num_heads = ages.len();
    if n == 0 || n > num_heads {
        return Err(SchedulerError::CountOutOfRange { n, num_heads });
    }
    let mut order: Vec<usize> = (1..=num_heads).collect();
    order.sort_by(|a, b| {
        let present = |h: usize| gt_present.get(h - 1).copied().unwrap_or(false);
        present(*b)
            .cmp(&present(*a))
            .then(ages[*b - 1].cmp(&ages[*a - 1]))
            .then(a.cmp(b))
    });
    order.truncate(n);
    Ok(order)
}

/// What a frame's schedule looks like.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub num_blocks: usize,
    pub heads: BTreeSet<usize>,
    pub infeasible: bool,
}

impl Schedule {
    pub fn config(&self) -> Config {
        Config::new(self.num_blocks, self.heads.len())
    }
}

/// Scheduler-owned mutable state for one pipeline instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedulerState {
    pub heads: HeadState,
    /// Next head for round-robin rotation (1-based).
    pub rr_cursor: usize,
}

impl SchedulerState {
    pub fn new(num_heads: usize, frame_limit: u32) -> Self {
        Self {
            heads: HeadState::new(num_heads, frame_limit),
            rr_cursor: 1,
        }
    }

    /// Applies a finished frame: `completed` heads ran to completion with
    /// `scores` (indexed by head - 1). The round-robin cursor moves past the
    /// scheduled heads.
    pub fn commit(
        &mut self,
        schedule: &Schedule,
        completed: &BTreeSet<usize>,
        scores: &[Vec<f64>],
    ) {
        self.heads = update_head_state(&self.heads, completed, scores);
        let h = self.heads.num_heads();
        self.rr_cursor = (self.rr_cursor - 1 + schedule.heads.len()) % h + 1;
    }
}

/// Per-frame inputs that only some policies use.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FrameContext {
    /// Ground-truth presence per head (NearOptimal).
    pub gt_present: Option<Vec<bool>>,
    /// Current-frame confidence sums per head (ClsScrSum).
    pub score_sums: Option<Vec<f64>>,
}

/// Phase 1 for `policy`.
pub fn choose_config(policy: Policy, tables: &CalibTables, remaining_ms: f64) -> Choice {
    match policy {
        Policy::MultiStage => best_config_all_heads(tables, remaining_ms),
        Policy::Baseline(r) => Choice {
            config: Config::new(r.min(tables.num_blocks()), tables.num_heads()),
            infeasible: false,
        },
        _ => best_config(tables, remaining_ms),
    }
}

/// Both phases. Deterministic in its inputs.
pub fn schedule_frame(
    policy: Policy,
    tables: &CalibTables,
    state: &SchedulerState,
    remaining_ms: f64,
    ctx: &FrameContext,
) -> Result<Schedule, SchedulerError> {
    let num_heads = state.heads.num_heads();
    if tables.num_heads() != num_heads {
        return Err(SchedulerError::DimensionMismatch {
            tables: tables.num_heads(),
            state: num_heads,
        });
    }
    let choice = choose_config(policy, tables, remaining_ms);
    let n = choice.config.heads;
    let heads: Vec<usize> = match policy {
        Policy::Ours => select_heads_ours(&state.heads, n)?,
        Policy::RoundRobin => select_heads_round_robin(state.rr_cursor, n, num_heads).0,
        Policy::ClsScrSum => {
            let sums = ctx
                .score_sums
                .as_ref()
                .ok_or(SchedulerError::MissingContext(policy, "score_sums"))?;
            select_heads_cls_scr_sum(sums, &state.heads.ages, n, state.heads.frame_limit)?
        }
        Policy::NearOptimal => {
            let gt = ctx
                .gt_present
                .as_ref()
                .ok_or(SchedulerError::MissingContext(policy, "gt_present"))?;
            select_heads_near_optimal(gt, &state.heads.ages, n)?
        }
        Policy::MultiStage | Policy::Baseline(_) => (1..=num_heads).collect(),
    };
    Ok(Schedule {
        num_blocks: choice.config.blocks,
        heads: heads.into_iter().collect(),
        infeasible: choice.infeasible,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(v: &[usize]) -> BTreeSet<usize> {
        v.iter().copied().collect()
    }

    fn state(ages: &[u32], conf: &[f64], frame_limit: u32) -> HeadState {
        HeadState {
            ages: ages.to_vec(),
            aged_conf: conf.to_vec(),
            frame_limit,
            max_score: MAX_SCORE,
        }
    }

    #[test]
    fn update_scheduled_head() {
        let s = HeadState::new(6, 5);
        let mut scores = vec![Vec::new(); 6];
        scores[1] = vec![0.5, 0.5];
        let next = update_head_state(&s, &set(&[2]), &scores);
        assert!((next.aged_conf[1] - 0.1).abs() < 1e-12);
        assert_eq!(next.ages[1], 1);
    }

    #[test]
    fn update_skipped_head_ages() {
        let mut s = HeadState::new(6, 5);
        s.ages[3] = 4;
        s.aged_conf[3] = 0.37;
        let next = update_head_state(&s, &set(&[1]), &vec![Vec::new(); 6]);
        assert_eq!(next.ages[3], 5);
        assert_eq!(next.aged_conf[3], 0.37);
    }

    #[test]
    fn update_empty_scores_clamps_to_floor() {
        let s = HeadState::new(6, 5);
        let next = update_head_state(&s, &set(&[3]), &vec![Vec::new(); 6]);
        assert_eq!(next.aged_conf[2], CONF_FLOOR);
    }

    #[test]
    fn ours_tie_break_by_index() {
        let s = state(&[1; 6], &[0.5; 6], 5);
        assert_eq!(select_heads_ours(&s, 2).unwrap(), vec![1, 2]);
    }

    #[test]
    fn ours_hand_computed_priorities() {
        let s = state(&[3, 1, 2], &[0.2, 0.9, 0.5], 25);
        let p = s.priorities();
        for (got, want) in p.iter().zip([0.6, 0.9, 1.0]) {
            assert!((got - want).abs() < 1e-12);
        }
        assert_eq!(set(&select_heads_ours(&s, 2).unwrap()), set(&[3, 2]));
    }

    #[test]
    fn ours_over_limit_forced() {
        let s = state(&[30, 1, 1], &[0.01, 0.9, 0.9], 25);
        assert_eq!(s.priority(1), 30.0);
        assert_eq!(select_heads_ours(&s, 1).unwrap(), vec![1]);
    }

    #[test]
    fn ours_rejects_bad_count() {
        let s = HeadState::new(3, 5);
        assert!(select_heads_ours(&s, 0).is_err());
        assert!(select_heads_ours(&s, 4).is_err());
    }

    #[test]
    fn round_robin_examples() {
        assert_eq!(select_heads_round_robin(1, 2, 6), (vec![1, 2], 3));
        assert_eq!(select_heads_round_robin(6, 2, 6), (vec![6, 1], 2));
        let mut seen = Vec::new();
        let mut cursor = 1;
        for _ in 0..3 {
            let (h, c) = select_heads_round_robin(cursor, 2, 6);
            seen.extend(h);
            cursor = c;
        }
        seen.sort_unstable();
        assert_eq!(seen, vec![1, 2, 3, 4, 5, 6]);
    }

    #[test]
    fn cls_scr_sum_examples() {
        assert_eq!(
            select_heads_cls_scr_sum(&[2.0; 6], &[1; 6], 3, 5).unwrap(),
            vec![1, 2, 3]
        );
        assert_eq!(
            select_heads_cls_scr_sum(&[0.0, 5.0, 1.0, 0.0, 0.0, 0.0], &[1; 6], 1, 5).unwrap(),
            vec![2]
        );
        let ages = [1, 1, 1, 1, 30, 1];
        for n in 1..=6 {
            let got =
                select_heads_cls_scr_sum(&[9.0, 9.0, 9.0, 9.0, 0.0, 9.0], &ages, n, 25).unwrap();
            assert!(got.contains(&5), "n={n}: {got:?}");
        }
    }

    #[test]
    fn near_optimal_examples() {
        let gt = [false, true, false, false, true, false];
        assert_eq!(
            set(&select_heads_near_optimal(&gt, &[1; 6], 2).unwrap()),
            set(&[2, 5])
        );

        let gt = [false, false, true, false, false, false];
        let got = select_heads_near_optimal(&gt, &[1, 1, 4, 1, 1, 1], 2).unwrap();
        assert_eq!(set(&got), set(&[3, 1]));

        let got = select_heads_near_optimal(&[false; 6], &[1, 7, 2, 9, 1, 1], 2).unwrap();
        assert_eq!(set(&got), set(&[4, 2]));
    }

    #[test]
    fn policy_names_round_trip() {
        for p in Policy::ALL {
            assert_eq!(p.name().parse::<Policy>().unwrap(), p);
        }
        assert!("baseline0".parse::<Policy>().is_err());
        assert!("fastest".parse::<Policy>().is_err());
        let json = serde_json::to_string(&Policy::ClsScrSum).unwrap();
        assert_eq!(json, "\"cls_scr_sum\"");
        assert_eq!(
            serde_json::from_str::<Policy>(&json).unwrap(),
            Policy::ClsScrSum
        );
    }

    #[test]
    fn schedule_ours_two_phases() {
        let tables = CalibTables::reference();
        let mut st = SchedulerState::new(6, 25);
        st.heads.ages = vec![3, 1, 2, 1, 1, 1];
        st.heads.aged_conf = vec![0.2, 0.9, 0.5, 0.05, 0.05, 0.05];
        let s = schedule_frame(Policy::Ours, &tables, &st, 70.0, &FrameContext::default()).unwrap();
        assert_eq!(s.num_blocks, 2);
        assert_eq!(s.heads, set(&[1, 2, 3]));
        assert!(!s.infeasible);
    }

    #[test]
    fn schedule_multistage_and_baseline() {
        let tables = CalibTables::reference();
        let st = SchedulerState::new(6, 5);
        let ctx = FrameContext::default();
        let s = schedule_frame(Policy::MultiStage, &tables, &st, 95.0, &ctx).unwrap();
        assert_eq!((s.num_blocks, s.heads.len()), (2, 6));
        for remaining in [0.0, 50.0, 1e6] {
            let s = schedule_frame(Policy::Baseline(3), &tables, &st, remaining, &ctx).unwrap();
            assert_eq!((s.num_blocks, s.heads.len(), s.infeasible), (3, 6, false));
        }
    }

    #[test]
    fn schedule_requires_context() {
        let tables = CalibTables::reference();
        let st = SchedulerState::new(6, 5);
        let ctx = FrameContext::default();
        assert!(schedule_frame(Policy::ClsScrSum, &tables, &st, 80.0, &ctx).is_err());
        assert!(schedule_frame(Policy::NearOptimal, &tables, &st, 80.0, &ctx).is_err());
        let wrong = SchedulerState::new(4, 5);
        assert!(matches!(
            schedule_frame(Policy::Ours, &tables, &wrong, 80.0, &ctx),
            Err(SchedulerError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn commit_advances_cursor() {
        let mut st = SchedulerState::new(6, 5);
        st.rr_cursor = 5;
        let sched = Schedule {
            num_blocks: 1,
            heads: set(&[5, 6, 1]),
            infeasible: false,
        };
        st.commit(&sched, &sched.heads, &vec![vec![]; 6]);
        assert_eq!(st.rr_cursor, 2);
        assert_eq!(st.heads.ages, vec![1, 2, 2, 2, 1, 1]);
    }
}
