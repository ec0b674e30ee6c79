//! WCET and normalized-accuracy calibration tables.
//!
//! Cell `(r, h)` (both 1-based) describes running `r` backbone blocks and
//! `h` detection heads. WCET is post-sync, i.e. measured from the end of the
//! point-cloud transform. A cell is *executable* when no other cell is at
//! least as fast and at least as accurate with one of the two strictly better.

use crate::pipeline::Pipeline;
use crate::scenegen::Scene;
use crate::seed::derive_seed;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::fs;
use std::path::Path;
use thiserror::Error;

/// Accuracy is normalized so that its maximum is exactly this value.
pub const ACCURACY_ANCHOR: f64 = 100.0;

const REFERENCE_TABLES_JSON: &str = include_str!("../fixtures/reference_tables.json");

#[derive(Debug, Error)]
pub enum CalibError {
    #[error("calibration needs at least one scene")]
    NoScenes,
    #[error("table dimensions must be at least 1x1 (got {blocks}x{heads})")]
    EmptyDimensions { blocks: usize, heads: usize },
    #[error("{which} has shape mismatch: expected {expected_rows}x{expected_cols}")]
    DimensionMismatch {
        which: &'static str,
        expected_rows: usize,
        expected_cols: usize,
    },
    #[error("wcet must be strictly increasing: cell ({r},{h}) = {value} ms does not exceed its {direction} neighbour {prev} ms")]
    NonMonotoneWcet {
        r: usize,
        h: usize,
        value: f64,
        prev: f64,
        direction: &'static str,
    },
    #[error("value at ({r},{h}) in {which} is out of range: {value}")]
    OutOfRange {
        which: &'static str,
        r: usize,
        h: usize,
        value: f64,
    },
    #[error("accuracy maximum is {0}, expected {ACCURACY_ANCHOR}")]
    NotNormalized(f64),
    #[error("runs_per_cell must be >= 1")]
    NoRuns,
    #[error("all calibration runs scored zero accuracy; cannot normalize")]
    DegenerateAccuracy,
    #[error("malformed table file: {0}")]
    Malformed(#[from] serde_json::Error),
    #[error("table file io: {0}")]
    Io(#[from] std::io::Error),
    #[error("scene replay failed: {0}")]
    Pipeline(#[from] crate::pipeline::PipelineError),
}

/// A (blocks, heads) configuration, both 1-based counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Config {
    pub blocks: usize,
    pub heads: usize,
}

impl Config {
    pub const fn new(blocks: usize, heads: usize) -> Self {
        Self { blocks, heads }
    }
}

/// Outcome of phase-1 selection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Choice {
    pub config: Config,
    /// No executable cell fit the budget; `config` is the cheapest fallback.
    pub infeasible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TableFile {
    #[serde(rename = "R")]
    num_blocks: usize,
    #[serde(rename = "H")]
    num_heads: usize,
    wcet: Vec<Vec<f64>>,
    accuracy: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibTables {
    num_blocks: usize,
    num_heads: usize,
    wcet: Vec<Vec<f64>>,
    accuracy: Vec<Vec<f64>>,
    executable: Vec<Vec<bool>>,
}

impl CalibTables {
    /// Validates both matrices and computes the executable mask.
    pub fn new(wcet: Vec<Vec<f64>>, accuracy: Vec<Vec<f64>>) -> Result<Self, CalibError> {
        let num_blocks = wcet.len();
        let num_heads = wcet.first().map_or(0, Vec::len);
        if num_blocks == 0 || num_heads == 0 {
            return Err(CalibError::EmptyDimensions {
                blocks: num_blocks,
                heads: num_heads,
            });
        }
        let tables = Self {
            num_blocks,
            num_heads,
            executable: vec![vec![false; num_heads]; num_blocks],
            wcet,
            accuracy,
        };
        tables.validate()?;
        Ok(mark_executable(tables))
    }

    /// The post-sync WCET and normalized accuracy tables measured on the
    /// reference embedded platform (3 blocks x 6 heads).
    pub fn reference() -> Self {
        Self::from_json(REFERENCE_TABLES_JSON).expect("bundled reference tables are valid")
    }

    pub fn num_blocks(&self) -> usize {
        self.num_blocks
    }

    pub fn num_heads(&self) -> usize {
        self.num_heads
    }

    pub fn wcet(&self, c: Config) -> f64 {
        self.wcet[c.blocks - 1][c.heads - 1]
    }

    pub fn accuracy(&self, c: Config) -> f64 {
        self.accuracy[c.blocks - 1][c.heads - 1]
    }

    pub fn is_executable(&self, c: Config) -> bool {
        self.executable[c.blocks - 1][c.heads - 1]
    }

    pub fn wcet_matrix(&self) -> &[Vec<f64>] {
        &self.wcet
    }

    pub fn accuracy_matrix(&self) -> &[Vec<f64>] {
        &self.accuracy
    }

    pub fn executable_mask(&self) -> &[Vec<bool>] {
        &self.executable
    }

    /// Every configuration, row-major.
    pub fn configs(&self) -> impl Iterator<Item = Config> + '_ {
        (1..=self.num_blocks)
            .flat_map(move |r| (1..=self.num_heads).map(move |h| Config::new(r, h)))
    }

    pub fn executable_per_row(&self) -> Vec<usize> {
        self.executable
            .iter()
            .map(|row| row.iter().filter(|e| **e).count())
            .collect()
    }

    pub fn min_wcet(&self) -> f64 {
        self.wcet
            .iter()
            .flatten()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }

    fn validate(&self) -> Result<(), CalibError> {
        let (rows, cols) = (self.num_blocks, self.num_heads);
        for (which, m) in [("wcet", &self.wcet), ("accuracy", &self.accuracy)] {
            if m.len() != rows || m.iter().any(|row| row.len() != cols) {
                return Err(CalibError::DimensionMismatch {
                    which,
                    expected_rows: rows,
                    expected_cols: cols,
                });
            }
        }
        for r in 0..rows {
            for h in 0..cols {
                let w = self.wcet[r][h];
                if !w.is_finite() || w <= 0.0 {
                    return Err(CalibError::OutOfRange {
                        which: "wcet",
                        r: r + 1,
                        h: h + 1,
                        value: w,
                    });
                }
                let a = self.accuracy[r][h];
                if !(0.0..=ACCURACY_ANCHOR).contains(&a) {
                    return Err(CalibError::OutOfRange {
                        which: "accuracy",
                        r: r + 1,
                        h: h + 1,
                        value: a,
                    });
                }
                if h > 0 && w <= self.wcet[r][h - 1] {
                    return Err(CalibError::NonMonotoneWcet {
                        r: r + 1,
                        h: h + 1,
                        value: w,
                        prev: self.wcet[r][h - 1],
                        direction: "fewer-heads",
                    });
                }
                if r > 0 && w <= self.wcet[r - 1][h] {
                    return Err(CalibError::NonMonotoneWcet {
                        r: r + 1,
                        h: h + 1,
                        value: w,
                        prev: self.wcet[r - 1][h],
                        direction: "fewer-blocks",
                    });
                }
            }
        }
        let max_acc = self
            .accuracy
            .iter()
            .flatten()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        if (max_acc - ACCURACY_ANCHOR).abs() > 1e-9 {
            return Err(CalibError::NotNormalized(max_acc));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, CalibError> {
        let file: TableFile = serde_json::from_str(text)?;
        if file.wcet.len() != file.num_blocks
            || file.wcet.iter().any(|row| row.len() != file.num_heads)
        {
            return Err(CalibError::DimensionMismatch {
                which: "wcet",
                expected_rows: file.num_blocks,
                expected_cols: file.num_heads,
            });
        }
        Self::new(file.wcet, file.accuracy)
    }

    pub fn to_json(&self) -> String {
        let file = TableFile {
            num_blocks: self.num_blocks,
            num_heads: self.num_heads,
            wcet: self.wcet.clone(),
            accuracy: self.accuracy.clone(),
        };
        serde_json::to_string_pretty(&file).expect("tables serialize")
    }
}

/// Recomputes the executable mask in O(n log n): cells are swept in
/// ascending WCET while tracking the best accuracy seen at strictly lower WCET.
pub fn mark_executable(mut tables: CalibTables) -> CalibTables {
    let mut cells: Vec<(f64, f64, usize, usize)> = Vec::new();
    for (r, row) in tables.wcet.iter().enumerate() {
        for (h, w) in row.iter().enumerate() {
            cells.push((*w, tables.accuracy[r][h], r, h));
        }
    }
    cells.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));

    let mut best_below = f64::NEG_INFINITY;
    let mut i = 0;
    while i < cells.len() {
        let w = cells[i].0;
        let mut j = i;
        while j < cells.len() && cells[j].0 == w {
            j += 1;
        }
        // sorted by accuracy desc within equal wcet
        let group_max = cells[i].1;
        for &(_, a, r, h) in &cells[i..j] {
            tables.executable[r][h] = a > best_below && a >= group_max;
        }
        best_below = best_below.max(group_max);
        i = j;
    }
    tables
}

/// Phase 1: the most accurate executable configuration whose WCET fits in
/// `remaining_ms`. Ties prefer lower WCET, then fewer blocks. When nothing
/// fits, the cheapest executable configuration is returned as infeasible.
pub fn best_config(tables: &CalibTables, remaining_ms: f64) -> Choice {
    let executable = || tables.configs().filter(|c| tables.is_executable(*c));
    let best = executable()
        .filter(|c| tables.wcet(*c) <= remaining_ms)
        .min_by(|a, b| {
            tables
                .accuracy(*b)
                .total_cmp(&tables.accuracy(*a))
                .then(tables.wcet(*a).total_cmp(&tables.wcet(*b)))
                .then(a.blocks.cmp(&b.blocks))
        });
    match best {
        Some(config) => Choice {
            config,
            infeasible: false,
        },
        None => Choice {
            config: cheapest(tables, executable()),
            infeasible: true,
        },
    }
}

/// Phase 1 restricted to configurations that run every head. The executable
/// mask is ignored since the column is the only choice set.
pub fn best_config_all_heads(tables: &CalibTables, remaining_ms: f64) -> Choice {
    let h = tables.num_heads();
    let column = || (1..=tables.num_blocks()).map(move |r| Config::new(r, h));
    let best = column()
        .filter(|c| tables.wcet(*c) <= remaining_ms)
        .min_by(|a, b| {
            tables
                .accuracy(*b)
                .total_cmp(&tables.accuracy(*a))
                .then(tables.wcet(*a).total_cmp(&tables.wcet(*b)))
                .then(a.blocks.cmp(&b.blocks))
        });
    match best {
        Some(config) => Choice {
            config,
            infeasible: false,
        },
        None => Choice {
            config: cheapest(tables, column()),
            infeasible: true,
        },
    }
}

fn cheapest(tables: &CalibTables, configs: impl Iterator<Item = Config>) -> Config {
    configs
        .min_by(|a, b| {
            tables
                .wcet(*a)
                .partial_cmp(&tables.wcet(*b))
                .unwrap_or(Ordering::Equal)
                .then(a.blocks.cmp(&b.blocks))
        })
        .expect("a non-empty table always has an executable cell")
}

pub fn save_tables(tables: &CalibTables, path: impl AsRef<Path>) -> Result<(), CalibError> {
    fs::write(path, tables.to_json())?;
    Ok(())
}

pub fn load_tables(path: impl AsRef<Path>) -> Result<CalibTables, CalibError> {
    CalibTables::from_json(&fs::read_to_string(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibConfig {
    pub num_blocks: usize,
    pub num_heads: usize,
    /// Passes over the calibration scenes per cell.
    pub runs_per_cell: usize,
    /// Lidar period used when replaying calibration scenes.
    pub period_ms: f64,
    pub seed: u64,
}

impl Default for CalibConfig {
    fn default() -> Self {
        Self {
            num_blocks: 3,
            num_heads: 6,
            runs_per_cell: 3,
            period_ms: 100.0,
            seed: 0,
        }
    }
}

/// Fills both tables by replaying every calibration scene with each
/// configuration fixed and no deadline. WCET is the worst observed post-sync
/// latency, accuracy the mean frame F1, normalized to a maximum of 100.
///
/// `make_pipeline` receives a derived seed for every (cell, run, scene) so
/// the result depends only on `cfg.seed`. Cells run sequentially.
pub fn calibrate<F>(
    mut make_pipeline: F,
    scenes: &[Scene],
    cfg: &CalibConfig,
) -> Result<CalibTables, CalibError>
where
    F: FnMut(u64) -> Pipeline,
{
    if scenes.is_empty() {
        return Err(CalibError::NoScenes);
    }
    if cfg.num_blocks == 0 || cfg.num_heads == 0 {
        return Err(CalibError::EmptyDimensions {
            blocks: cfg.num_blocks,
            heads: cfg.num_heads,
        });
    }
    if cfg.runs_per_cell == 0 {
        return Err(CalibError::NoRuns);
    }

    let mut wcet = vec![vec![0.0; cfg.num_heads]; cfg.num_blocks];
    let mut raw_acc = vec![vec![0.0; cfg.num_heads]; cfg.num_blocks];
    for r in 1..=cfg.num_blocks {
        for h in 1..=cfg.num_heads {
            let mut worst = 0.0f64;
            let mut f1_sum = 0.0;
            let mut frames = 0usize;
            for run in 0..cfg.runs_per_cell {
                for (si, scene) in scenes.iter().enumerate() {
                    let seed = derive_seed(cfg.seed, &[r as u64, h as u64, run as u64, si as u64]);
                    let mut pipeline = make_pipeline(seed);
                    let results =
                        pipeline.calibration_pass(scene, cfg.period_ms, Config::new(r, h))?;
                    for fr in &results {
                        worst = worst.max(fr.post_sync_ms);
                        f1_sum += fr.score.f1;
                        frames += 1;
                    }
                }
            }
            wcet[r - 1][h - 1] = worst;
            raw_acc[r - 1][h - 1] = if frames == 0 {
                0.0
            } else {
                f1_sum / frames as f64
            };
        }
    }

    let max_raw = raw_acc.iter().flatten().copied().fold(0.0f64, f64::max);
    if max_raw <= 0.0 {
        return Err(CalibError::DegenerateAccuracy);
    }
    let accuracy = raw_acc
        .iter()
        .map(|row| row.iter().map(|a| a / max_raw * ACCURACY_ANCHOR).collect())
        .collect();
    CalibTables::new(wcet, accuracy)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct O(n^2) dominance check.
    fn dominated(t: &CalibTables, c: Config) -> bool {
        let (w, a) = (t.wcet(c), t.accuracy(c));
        t.configs().any(|o| {
            o != c && t.wcet(o) <= w && t.accuracy(o) >= a && (t.wcet(o) < w || t.accuracy(o) > a)
        })
    }

    #[test]
    fn reference_fixture_loads() {
        let t = CalibTables::reference();
        assert_eq!((t.num_blocks(), t.num_heads()), (3, 6));
        assert_eq!(t.wcet(Config::new(2, 4)), 76.8);
        assert_eq!(t.accuracy(Config::new(3, 6)), 100.0);
    }

    #[test]
    fn mask_matches_dominance_oracle_on_reference() {
        let t = CalibTables::reference();
        for c in t.configs() {
            assert_eq!(t.is_executable(c), !dominated(&t, c), "{c:?}");
        }
    }

    #[test]
    fn cell_1_4_dominated_by_3_1() {
        let t = CalibTables::reference();
        let (a, b) = (Config::new(1, 4), Config::new(3, 1));
        assert!(t.wcet(b) <= t.wcet(a) && t.accuracy(b) >= t.accuracy(a));
        assert!(!t.is_executable(a));
    }

    #[test]
    fn single_cell_is_executable() {
        let t = CalibTables::new(vec![vec![12.0]], vec![vec![100.0]]).unwrap();
        assert!(t.is_executable(Config::new(1, 1)));
        assert_eq!(
            best_config(&t, 5.0),
            Choice {
                config: Config::new(1, 1),
                infeasible: true
            }
        );
    }

    #[test]
    fn equal_cells_do_not_dominate_each_other() {
        // (1,2) and (2,1) tie exactly on both axes
        let t = CalibTables::new(
            vec![vec![10.0, 20.0], vec![20.0, 30.0]],
            vec![vec![50.0, 80.0], vec![80.0, 100.0]],
        )
        .unwrap();
        assert!(t.is_executable(Config::new(1, 2)));
        assert!(t.is_executable(Config::new(2, 1)));
        // tie on accuracy and wcet, fewer blocks wins
        assert_eq!(best_config(&t, 25.0).config, Config::new(1, 2));
    }

    #[test]
    fn best_config_examples() {
        let t = CalibTables::reference();
        let c = best_config(&t, 70.0);
        assert_eq!(
            c,
            Choice {
                config: Config::new(2, 3),
                infeasible: false
            }
        );
        assert_eq!(t.accuracy(c.config), 82.1);
        assert_eq!(best_config(&t, 120.0).config, Config::new(3, 6));
        assert_eq!(
            best_config(&t, 25.0),
            Choice {
                config: Config::new(1, 1),
                infeasible: true
            }
        );
    }

    #[test]
    fn all_heads_column_selection() {
        let t = CalibTables::reference();
        assert_eq!(best_config_all_heads(&t, 95.0).config, Config::new(2, 6));
        assert_eq!(best_config_all_heads(&t, 120.0).config, Config::new(3, 6));
        let c = best_config_all_heads(&t, 50.0);
        assert!(c.infeasible);
        assert_eq!(c.config, Config::new(1, 6));
    }

    #[test]
    fn rejects_unnormalized_accuracy() {
        let err = CalibTables::new(vec![vec![1.0, 2.0]], vec![vec![50.0, 99.0]]).unwrap_err();
        assert!(matches!(err, CalibError::NotNormalized(_)));
    }

    #[test]
    fn rejects_non_monotone_wcet() {
        let err = CalibTables::new(
            vec![vec![1.0, 2.0], vec![1.5, 1.9]],
            vec![vec![50.0, 60.0], vec![70.0, 100.0]],
        )
        .unwrap_err();
        assert!(matches!(
            err,
            CalibError::NonMonotoneWcet { r: 2, h: 2, .. }
        ));
    }

    #[test]
    fn rejects_dimension_mismatch_in_file() {
        let text = r#"{"R": 2, "H": 2, "wcet": [[1.0, 2.0]], "accuracy": [[50.0, 100.0]]}"#;
        assert!(matches!(
            CalibTables::from_json(text),
            Err(CalibError::DimensionMismatch { .. })
        ));
        let text = r#"{"R": 1, "H": 2, "wcet": [[1.0, 2.0]], "accuracy": [[100.0]]}"#;
        assert!(matches!(
            CalibTables::from_json(text),
            Err(CalibError::DimensionMismatch {
                which: "accuracy",
                ..
            })
        ));
        assert!(matches!(
            CalibTables::from_json("{"),
            Err(CalibError::Malformed(_))
        ));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.json");
        let t = CalibTables::reference();
        save_tables(&t, &path).unwrap();
        assert_eq!(load_tables(&path).unwrap(), t);
    }

    #[test]
    fn mask_on_disk_is_ignored() {
        let text = r#"{"R": 1, "H": 2, "wcet": [[1.0, 2.0]], "accuracy": [[100.0, 90.0]],
                       "executable": [[true, true]]}"#;
        let t = CalibTables::from_json(text).unwrap();
        assert_eq!(t.executable_mask(), &[vec![true, false]]);
    }
}
