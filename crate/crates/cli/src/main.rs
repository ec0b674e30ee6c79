use anyhow::{bail, ensure, Context, Result};
use anytime_core::calibration::{calibrate, load_tables, save_tables, CalibConfig, CalibTables};
use anytime_core::eval::{compare, run_sweep, standard_deadlines, SweepConfig, SweepReport};
use anytime_core::pipeline::{Pipeline, PipelineConfig};
use anytime_core::scenegen::{
    generate_scene, read_scene_jsonl, write_scene_jsonl, Scene, SceneSpec, CALIB_SCENE_SEEDS,
    EVAL_SCENE_SEEDS,
};
use anytime_core::scheduler::Policy;
use clap::{Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// Deadline-aware anytime 3D detection: calibration, scenes and sweeps.
#[derive(Parser)]
#[command(name = "anytime", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Build WCET and accuracy tables by replaying calibration scenes.
    Calibrate {
        /// JSON calibration settings; missing fields take defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Calibration scenes (JSON lines); defaults to the built-in set.
        #[arg(long, num_args = 1.., value_delimiter = ',')]
        scenes: Vec<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic scene as JSON lines.
    Scenegen {
        /// JSON scene spec; without it the standard spec is used.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one policy at one deadline.
    Run {
        #[arg(long)]
        tables: Option<PathBuf>,
        #[arg(long, num_args = 1.., value_delimiter = ',')]
        scenes: Vec<PathBuf>,
        #[arg(long, default_value = "ours")]
        policy: Policy,
        #[arg(long)]
        deadline_ms: f64,
        #[arg(long)]
        period_ms: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
    },
    /// Run policies over a range of deadlines.
    Sweep {
        #[arg(long)]
        tables: Option<PathBuf>,
        #[arg(long, num_args = 1.., value_delimiter = ',')]
        scenes: Vec<PathBuf>,
        /// Defaults to every policy.
        #[arg(long, num_args = 1.., value_delimiter = ',')]
        policy: Vec<Policy>,
        /// Defaults to 50..140 ms in steps of 10.
        #[arg(long, num_args = 1.., value_delimiter = ',')]
        deadline_ms: Vec<f64>,
        #[arg(long)]
        period_ms: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
    },
    /// Per-cell f1 and miss-rate differences (b - a) of two JSON reports.
    Compare {
        a: PathBuf,
        b: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Deserialize)]
#[serde(default, deny_unknown_fields)]
struct CalibrateFile {
    runs_per_cell: usize,
    period_ms: f64,
    seed: u64,
    scene_seeds: Vec<u64>,
    pipeline: PipelineConfig,
}

impl Default for CalibrateFile {
    fn default() -> Self {
        let c = CalibConfig::default();
        Self {
            runs_per_cell: c.runs_per_cell,
            period_ms: c.period_ms,
            seed: c.seed,
            scene_seeds: CALIB_SCENE_SEEDS.to_vec(),
            pipeline: PipelineConfig::default(),
        }
    }
}

fn read_scenes(paths: &[PathBuf], default_seeds: &[u64]) -> Result<Vec<Scene>> {
    if paths.is_empty() {
        return default_seeds
            .iter()
            .map(|s| generate_scene(&SceneSpec::standard(*s)).map_err(Into::into))
            .collect();
    }
    paths
        .iter()
        .map(|p| {
            read_scene_jsonl(p, None).with_context(|| format!("reading scene {}", p.display()))
        })
        .collect()
}

fn read_tables(path: Option<&Path>) -> Result<CalibTables> {
    match path {
        Some(p) => load_tables(p).with_context(|| format!("loading tables {}", p.display())),
        None => Ok(CalibTables::reference()),
    }
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => Ok(io::stdout().write_all(text.as_bytes())?),
    }
}

fn report_text(report: &SweepReport, format: Format) -> String {
    match format {
        Format::Csv => report.to_csv(),
        Format::Json => report.to_json() + "\n",
    }
}

/// Writes the report and turns invariant violations into a failing exit code.
fn finish(report: &SweepReport, format: Format, out: Option<&Path>) -> Result<ExitCode> {
    emit(&report_text(report, format), out)?;
    let violations = report.invariant_violations();
    let bad_rates = report
        .cells
        .iter()
        .filter(|c| !(0.0..=1.0).contains(&c.miss_rate))
        .count();
    if violations + bad_rates > 0 {
        eprintln!("invariant violations: {violations} missed frames at safe deadlines, {bad_rates} bad miss rates");
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Calibrate {
            config,
            scenes,
            seed,
            out,
        } => {
            let file: CalibrateFile = match &config {
                Some(p) => serde_json::from_str(
                    &fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
                )
                .with_context(|| format!("parsing {}", p.display()))?,
                None => CalibrateFile::default(),
            };
            file.pipeline.validate()?;
            let cfg = CalibConfig {
                num_blocks: file.pipeline.timing.num_blocks(),
                num_heads: file.pipeline.timing.num_heads(),
                runs_per_cell: file.runs_per_cell,
                period_ms: file.period_ms,
                seed: seed.unwrap_or(file.seed),
            };
            let scenes = read_scenes(&scenes, &file.scene_seeds)?;
            ensure!(
                scenes.iter().all(|s| s.num_heads <= cfg.num_heads),
                "scenes have more class groups than the pipeline has heads"
            );
            let pipeline = file.pipeline;
            let tables = calibrate(
                |s| Pipeline::new(pipeline.clone(), s).expect("validated above"),
                &scenes,
                &cfg,
            )?;
            save_tables(&tables, &out)?;
            eprintln!(
                "executable cells per row: {:?}",
                tables.executable_per_row()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Scenegen { spec, seed, out } => {
            let mut spec = match &spec {
                Some(p) => serde_json::from_str(
                    &fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
                )
                .with_context(|| format!("parsing {}", p.display()))?,
                None => SceneSpec::standard(seed.unwrap_or(EVAL_SCENE_SEEDS[0])),
            };
            if let Some(s) = seed {
                spec.seed = s;
            }
            let scene = generate_scene(&spec)?;
            write_scene_jsonl(&scene, &out)?;
            eprintln!("{} frames written to {}", scene.frames.len(), out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Run {
            tables,
            scenes,
            policy,
            deadline_ms,
            period_ms,
            seed,
            out,
            format,
        } => {
            let cfg = SweepConfig {
                policies: vec![policy],
                deadlines_ms: vec![deadline_ms],
                period_ms,
                seed,
                pipeline: PipelineConfig::default(),
            };
            let report = run_sweep(
                &cfg,
                &read_tables(tables.as_deref())?,
                &read_scenes(&scenes, &EVAL_SCENE_SEEDS)?,
            )?;
            finish(&report, format, out.as_deref())
        }
        Command::Sweep {
            tables,
            scenes,
            policy,
            deadline_ms,
            period_ms,
            seed,
            out,
            format,
        } => {
            let cfg = SweepConfig {
                policies: if policy.is_empty() {
                    Policy::ALL.to_vec()
                } else {
                    policy
                },
                deadlines_ms: if deadline_ms.is_empty() {
                    standard_deadlines()
                } else {
                    deadline_ms
                },
                period_ms,
                seed,
                pipeline: PipelineConfig::default(),
            };
            let report = run_sweep(
                &cfg,
                &read_tables(tables.as_deref())?,
                &read_scenes(&scenes, &EVAL_SCENE_SEEDS)?,
            )?;
            finish(&report, format, out.as_deref())
        }
        Command::Compare { a, b, out } => {
            let load = |p: &Path| -> Result<SweepReport> {
                Ok(SweepReport::from_json(
                    &fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
                )?)
            };
            let (ra, rb) = (load(&a)?, load(&b)?);
            let diffs = compare(&ra, &rb);
            if diffs.is_empty() {
                bail!("the reports share no (policy, deadline) cells");
            }
            let mut text = String::from("policy,deadline_ms,delta_f1,delta_miss_rate\n");
            for d in diffs {
                text += &format!(
                    "{},{},{},{}\n",
                    d.policy, d.deadline_ms, d.delta_f1, d.delta_miss_rate
                );
            }
            emit(&text, out.as_deref())?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
