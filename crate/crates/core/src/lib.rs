//! Deadline-aware scheduling for a multi-exit, multi-head 3D object detector.
//!
//! A frame's budget picks a backbone depth and a number of detection heads
//! from calibrated WCET/accuracy tables; the heads are then chosen by age
//! and recent confidence, and boxes of skipped heads are carried forward
//! from their last detection by ego-motion and velocity projection.

pub mod calibration;
pub mod eval;
pub mod geometry;
pub mod pipeline;
pub mod scenegen;
pub mod scheduler;
pub mod seed;

pub use calibration::{best_config, calibrate, CalibConfig, CalibTables, Choice, Config};
pub use eval::{run_sweep, score_frame, FrameScore, SweepConfig, SweepReport};
pub use geometry::{project_batch, project_box, Box3D, Pose, PoseContext};
pub use pipeline::{FrameResult, HeadCache, Pipeline, PipelineConfig};
pub use scenegen::{generate_scene, Scene, SceneSpec};
pub use scheduler::{schedule_frame, HeadState, Policy, Schedule, SchedulerState};
