//! Yaw-only rigid transforms and re-projection of past detections into the
//! current lidar frame.
//!
//! A [`Pose`] maps points from a child frame into its parent frame:
//! `p_parent = R(yaw) * p_child + translation`. Ego poses are ego-in-global,
//! lidar poses are lidar-in-ego.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("projection target time {target} precedes detection time {detected_at}")]
    NegativeElapsed { detected_at: f64, target: f64 },
}

/// Wraps an angle into (-pi, pi].
pub fn normalize_angle(angle: f64) -> f64 {
    let wrapped = angle.rem_euclid(2.0 * PI);
    if wrapped > PI {
        wrapped - 2.0 * PI
    } else {
        wrapped
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub translation: [f64; 3],
    pub yaw: f64,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn new(translation: [f64; 3], yaw: f64) -> Self {
        Self {
            translation,
            yaw: normalize_angle(yaw),
        }
    }

    pub const fn identity() -> Self {
        Self {
            translation: [0.0; 3],
            yaw: 0.0,
        }
    }

    fn rotate(&self, v: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.yaw.sin_cos();
        [c * v[0] - s * v[1], s * v[0] + c * v[1]]
    }

    pub fn transform_point(&self, p: [f64; 3]) -> [f64; 3] {
        let [x, y] = self.rotate([p[0], p[1]]);
        [
            x + self.translation[0],
            y + self.translation[1],
            p[2] + self.translation[2],
        ]
    }

    /// `self ∘ other`: the transform that applies `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        let t = self.transform_point(other.translation);
        Pose::new(t, self.yaw + other.yaw)
    }

    pub fn inverse(&self) -> Pose {
        let inv_yaw = -self.yaw;
        let (s, c) = inv_yaw.sin_cos();
        let [tx, ty, tz] = self.translation;
        Pose::new([-(c * tx - s * ty), -(s * tx + c * ty), -tz], inv_yaw)
    }
}

pub fn compose(a: &Pose, b: &Pose) -> Pose {
    a.compose(b)
}

/// Poses in effect for one lidar sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseContext {
    /// Ego in global.
    pub ego_pose: Pose,
    /// Lidar in ego (extrinsic).
    pub lidar_pose: Pose,
    /// Seconds on the simulation clock.
    pub timestamp: f64,
}

impl PoseContext {
    pub fn new(ego_pose: Pose, lidar_pose: Pose, timestamp: f64) -> Self {
        debug_assert!(timestamp >= 0.0);
        Self {
            ego_pose,
            lidar_pose,
            timestamp,
        }
    }

    /// Lidar-in-global transform.
    pub fn lidar_to_global(&self) -> Pose {
        self.ego_pose.compose(&self.lidar_pose)
    }
}

/// A 3D box, expressed in the lidar frame of `det_ego_pose`/`det_lidar_pose`
/// at time `detected_at`. Velocity is always global.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub center: [f64; 3],
    /// Length, width, height.
    pub size: [f64; 3],
    pub yaw: f64,
    pub velocity: [f64; 2],
    /// 1-based detection-head index.
    pub class_group: usize,
    pub confidence: f64,
    pub detected_at: f64,
    pub det_ego_pose: Pose,
    pub det_lidar_pose: Pose,
}

impl Box3D {
    pub fn context(&self) -> PoseContext {
        PoseContext {
            ego_pose: self.det_ego_pose,
            lidar_pose: self.det_lidar_pose,
            timestamp: self.detected_at,
        }
    }

    pub fn is_valid(&self, num_heads: usize) -> bool {
        self.size.iter().all(|s| *s > 0.0)
            && (0.0..=1.0).contains(&self.confidence)
            && (1..=num_heads).contains(&self.class_group)
    }

    /// Planar distance from the sensor origin.
    pub fn range(&self) -> f64 {
        self.center[0].hypot(self.center[1])
    }
}

/// Moves a past detection into the lidar frame of `current`.
///
/// The returned box is re-anchored: its detection poses and timestamp are
/// those of `current`, so it can be projected again later.
pub fn project_box(bbox: &Box3D, current: &PoseContext) -> Result<Box3D, GeometryError> {
    let dt = current.timestamp - bbox.detected_at;
    if dt.is_nan() || dt < 0.0 {
        return Err(GeometryError::NegativeElapsed {
            detected_at: bbox.detected_at,
            target: current.timestamp,
        });
    }

    // detection lidar -> detection ego -> global
    let in_ego = bbox.det_lidar_pose.transform_point(bbox.center);
    let mut in_global = bbox.det_ego_pose.transform_point(in_ego);
    // constant-velocity extrapolation
    in_global[0] += bbox.velocity[0] * dt;
    in_global[1] += bbox.velocity[1] * dt;
    // global -> current ego -> current lidar
    let in_cur_ego = current.ego_pose.inverse().transform_point(in_global);
    let in_cur_lidar = current.lidar_pose.inverse().transform_point(in_cur_ego);

    let yaw = normalize_angle(
        bbox.yaw + bbox.det_lidar_pose.yaw + bbox.det_ego_pose.yaw
            - current.ego_pose.yaw
            - current.lidar_pose.yaw,
    );

    Ok(Box3D {
        center: in_cur_lidar,
        yaw,
        detected_at: current.timestamp,
        det_ego_pose: current.ego_pose,
        det_lidar_pose: current.lidar_pose,
        ..bbox.clone()
    })
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BatchProjection {
    pub boxes: Vec<Box3D>,
    /// Boxes dropped because they could not be projected.
    pub skipped: usize,
}

const PARALLEL_THRESHOLD: usize = 256;

/// Projects every box, preserving input order. Large batches fan out over
/// the rayon pool.
pub fn project_batch(boxes: &[Box3D], current: &PoseContext) -> BatchProjection {
    let results: Vec<Result<Box3D, GeometryError>> = if boxes.len() >= PARALLEL_THRESHOLD {
        boxes.par_iter().map(|b| project_box(b, current)).collect()
    } else {
        boxes.iter().map(|b| project_box(b, current)).collect()
    };
    let mut out = BatchProjection {
        boxes: Vec::with_capacity(results.len()),
        skipped: 0,
    };
    for r in results {
        match r {
            Ok(b) => out.boxes.push(b),
            Err(_) => out.skipped += 1,
        }
    }
    out
}
