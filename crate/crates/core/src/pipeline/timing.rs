//! Latency model of the simulated detector.
//!
//! Post-sync latency of a (blocks, heads) configuration is an additive
//! block cost plus head cost, fitted by least squares to a reference WCET
//! table, scaled by a uniform jitter factor and capped by that table. Samples
//! are on a 0.1 ms grid, the resolution of the reference table.

use crate::calibration::{CalibTables, Config};
use crate::scheduler::Policy;
use rand::Rng;
use rand_distr::{Distribution, Triangular};
use serde::{Deserialize, Serialize};

/// Point-cloud transform latency, triangular over [min, max] with the given mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PcTransform {
    pub min_ms: f64,
    pub mode_ms: f64,
    pub max_ms: f64,
}

impl Default for PcTransform {
    fn default() -> Self {
        Self {
            min_ms: 24.61,
            mode_ms: 26.64,
            max_ms: 28.40,
        }
    }
}

/// Per-frame costs outside the detector itself, in ms.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Overheads {
    /// Waiting for the point-cloud transform before phase 1.
    pub sync_ms: f64,
    pub sched_ms: f64,
    /// Collecting and merging asynchronously projected boxes.
    pub proj_ms: f64,
}

impl Overheads {
    /// Average measured overheads of each method. Methods without head
    /// scheduling pay at most the synchronization cost.
    pub fn for_policy(policy: Policy) -> Self {
        let (sync_ms, sched_ms, proj_ms) = match policy {
            Policy::Ours | Policy::NearOptimal => (0.5, 1.0, 1.1),
            Policy::RoundRobin => (0.5, 0.0, 1.1),
            Policy::ClsScrSum => (0.5, 4.25, 2.55),
            Policy::MultiStage => (0.5, 0.0, 0.0),
            Policy::Baseline(_) => (0.0, 0.0, 0.0),
        };
        Self {
            sync_ms,
            sched_ms,
            proj_ms,
        }
    }

    pub fn total(&self) -> f64 {
        self.sync_ms + self.sched_ms + self.proj_ms
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TimingModel {
    pub pc_transform: PcTransform,
    /// Mean cost of running r blocks, indexed r - 1.
    pub per_block_ms: Vec<f64>,
    /// Mean cost of running h heads, indexed h - 1.
    pub per_head_ms: Vec<f64>,
    /// Relative jitter range [lo, hi) applied to the mean.
    pub jitter: (f64, f64),
    /// Upper bound per configuration; samples never exceed it.
    pub wcet_cap: Vec<Vec<f64>>,
    /// Fixed overheads; `None` uses [`Overheads::for_policy`].
    #[serde(default)]
    pub overheads: Option<Overheads>,
}

impl Default for TimingModel {
    fn default() -> Self {
        Self::fit(&CalibTables::reference())
    }
}

impl TimingModel {
    /// Least-squares additive fit `mean(r, h) = block[r] + head[h]` to a WCET
    /// table. The split between the two terms puts the average per-head
    /// increment on the first head.
    pub fn fit(table: &CalibTables) -> Self {
        let w = table.wcet_matrix();
        let (rows, cols) = (table.num_blocks(), table.num_heads());
        let row_mean: Vec<f64> = w
            .iter()
            .map(|r| r.iter().sum::<f64>() / cols as f64)
            .collect();
        let col_mean: Vec<f64> = (0..cols)
            .map(|h| w.iter().map(|r| r[h]).sum::<f64>() / rows as f64)
            .collect();
        let grand = row_mean.iter().sum::<f64>() / rows as f64;
        let first_head = if cols > 1 {
            (col_mean[cols - 1] - col_mean[0]) / (cols - 1) as f64
        } else {
            0.0
        };
        let per_head_ms = col_mean
            .iter()
            .map(|c| c - col_mean[0] + first_head)
            .collect();
        let per_block_ms = row_mean
            .iter()
            .map(|r| r + col_mean[0] - grand - first_head)
            .collect();
        Self {
            pc_transform: PcTransform::default(),
            per_block_ms,
            per_head_ms,
            jitter: (0.98, 1.0),
            wcet_cap: w.to_vec(),
            overheads: None,
        }
    }

    pub fn num_blocks(&self) -> usize {
        self.per_block_ms.len()
    }

    pub fn num_heads(&self) -> usize {
        self.per_head_ms.len()
    }

    pub fn overheads(&self, policy: Policy) -> Overheads {
        self.overheads
            .unwrap_or_else(|| Overheads::for_policy(policy))
    }

    pub fn mean_ms(&self, c: Config) -> f64 {
        self.per_block_ms[c.blocks - 1] + self.per_head_ms[c.heads - 1]
    }

    pub fn cap_ms(&self, c: Config) -> f64 {
        self.wcet_cap[c.blocks - 1][c.heads - 1]
    }

    /// Largest value [`sample_post_sync`](Self::sample_post_sync) can return.
    pub fn bound_ms(&self, c: Config) -> f64 {
        let mean = (self.mean_ms(c) * 10.0).round();
        let cap = (self.cap_ms(c) * 10.0).round();
        (mean * self.jitter.1).ceil().min(cap) / 10.0
    }

    pub fn sample_pc<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let p = self.pc_transform;
        if p.max_ms <= p.min_ms {
            return p.min_ms;
        }
        Triangular::new(p.min_ms, p.max_ms, p.mode_ms)
            .expect("valid triangular parameters")
            .sample(rng)
    }

    pub fn sample_post_sync<R: Rng + ?Sized>(&self, c: Config, rng: &mut R) -> f64 {
        let (lo, hi) = self.jitter;
        let factor = if hi > lo {
            rng.random_range(lo..hi)
        } else {
            lo
        };
        // work in tenths of a ms so the top of the range is hit with
        // non-negligible probability
        let mean = (self.mean_ms(c) * 10.0).round();
        let cap = (self.cap_ms(c) * 10.0).round();
        (mean * factor).ceil().min(cap) / 10.0
    }

    /// Share of the post-sync time elapsed once the `k`-th of `c.heads`
    /// heads has finished (heads run one after another after the backbone).
    pub fn head_completion_fraction(&self, c: Config, k: usize) -> f64 {
        let block = self.per_block_ms[c.blocks - 1];
        (block + self.per_head_ms[k - 1]) / (block + self.per_head_ms[c.heads - 1])
    }

    pub fn validate(&self) -> Result<(), String> {
        let all = self
            .per_block_ms
            .iter()
            .chain(&self.per_head_ms)
            .chain(self.wcet_cap.iter().flatten());
        if all.clone().any(|v| v.is_nan() || *v < 0.0) {
            return Err("timing components must be non-negative".into());
        }
        if self.wcet_cap.len() != self.num_blocks()
            || self.wcet_cap.iter().any(|r| r.len() != self.num_heads())
        {
            return Err("wcet cap shape does not match block/head vectors".into());
        }
        let (lo, hi) = self.jitter;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(format!(
                "jitter range ({lo}, {hi}) must satisfy 0 < lo <= hi <= 1"
            ));
        }
        let p = self.pc_transform;
        if !(p.min_ms >= 0.0 && p.min_ms <= p.mode_ms && p.mode_ms <= p.max_ms) {
            return Err("pc transform must satisfy 0 <= min <= mode <= max".into());
        }
        Ok(())
    }
}
