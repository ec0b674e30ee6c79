//! Stochastic stand-in for the multi-exit, multi-head network.
//!
//! Quality depends only on the number of backbone blocks that ran: more
//! blocks detect more objects, localize them better and report higher
//! confidence. A skipped head never reports its class group.

use crate::calibration::Config;
use crate::geometry::{Box3D, PoseContext};
use crate::pipeline::timing::TimingModel;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorModel {
    /// Per block count r (index r - 1).
    pub detect_prob: Vec<f64>,
    /// Planar center noise, meters.
    pub pos_noise_sigma: Vec<f64>,
    pub conf_base: Vec<f64>,
    /// Detections below this confidence are dropped.
    pub score_threshold: f64,
    pub conf_noise_sigma: f64,
    /// Confidence lost per meter of range.
    pub conf_range_slope: f64,
    pub yaw_noise_sigma: f64,
    pub vel_noise_sigma: f64,
}

impl Default for DetectorModel {
    fn default() -> Self {
        Self {
            detect_prob: vec![0.70, 0.85, 0.95],
            pos_noise_sigma: vec![0.6, 0.4, 0.25],
            conf_base: vec![0.6, 0.75, 0.9],
            score_threshold: 0.1,
            conf_noise_sigma: 0.05,
            conf_range_slope: 0.005,
            yaw_noise_sigma: 0.05,
            vel_noise_sigma: 0.2,
        }
    }
}

impl DetectorModel {
    pub fn num_blocks(&self) -> usize {
        self.detect_prob.len()
    }

    pub fn validate(&self) -> Result<(), String> {
        let r = self.num_blocks();
        if r == 0 || self.pos_noise_sigma.len() != r || self.conf_base.len() != r {
            return Err("detector vectors must share one non-zero length".into());
        }
        let nondecreasing = |v: &[f64]| v.windows(2).all(|w| w[0] <= w[1]);
        if !nondecreasing(&self.detect_prob) || !nondecreasing(&self.conf_base) {
            return Err("detect_prob and conf_base must be nondecreasing in blocks".into());
        }
        if self.pos_noise_sigma.windows(2).any(|w| w[0] < w[1]) {
            return Err("pos_noise_sigma must be nonincreasing in blocks".into());
        }
        let unit = |v: &[f64]| v.iter().all(|x| (0.0..=1.0).contains(x));
        if !unit(&self.detect_prob) || !unit(&self.conf_base) {
            return Err("probabilities and confidences must lie in [0, 1]".into());
        }
        let sigmas = [
            self.conf_noise_sigma,
            self.yaw_noise_sigma,
            self.vel_noise_sigma,
        ];
        if self
            .pos_noise_sigma
            .iter()
            .chain(&sigmas)
            .any(|s| s.is_nan() || *s < 0.0)
        {
            return Err("noise levels must be non-negative".into());
        }
        Ok(())
    }

    /// Runs every head on `gt` with `blocks` blocks. The random stream
    /// advances by the same amount per object regardless of outcome, so
    /// head selection never changes what other objects look like.
    pub fn detect_all<R: Rng + ?Sized>(
        &self,
        gt: &[Box3D],
        pose: &PoseContext,
        blocks: usize,
        rng: &mut R,
    ) -> Vec<Box3D> {
        let i = blocks - 1;
        let (p, sigma, base) = (
            self.detect_prob[i],
            self.pos_noise_sigma[i],
            self.conf_base[i],
        );
        let mut out = Vec::new();
        for obj in gt {
            let hit = rng.random::<f64>() < p;
            let mut n = || -> f64 { StandardNormal.sample(rng) };
            let (nx, ny, nc, nyaw, nvx, nvy) = (n(), n(), n(), n(), n(), n());
            if !hit {
                continue;
            }
            let confidence = (base - self.conf_range_slope * obj.range()
                + self.conf_noise_sigma * nc)
                .clamp(0.05, 1.0);
            if confidence < self.score_threshold {
                continue;
            }
            out.push(Box3D {
                center: [
                    obj.center[0] + sigma * nx,
                    obj.center[1] + sigma * ny,
                    obj.center[2],
                ],
                size: obj.size,
                yaw: crate::geometry::normalize_angle(obj.yaw + self.yaw_noise_sigma * nyaw),
                velocity: [
                    obj.velocity[0] + self.vel_noise_sigma * nvx,
                    obj.velocity[1] + self.vel_noise_sigma * nvy,
                ],
                class_group: obj.class_group,
                confidence,
                detected_at: pose.timestamp,
                det_ego_pose: pose.ego_pose,
                det_lidar_pose: pose.lidar_pose,
            });
        }
        out
    }
}

/// Detections of the executed heads and the sampled post-sync latency.
pub fn simulate_detector<R: Rng + ?Sized>(
    gt: &[Box3D],
    pose: &PoseContext,
    blocks: usize,
    heads: &BTreeSet<usize>,
    model: &DetectorModel,
    timing: &TimingModel,
    rng: &mut R,
) -> (Vec<Box3D>, f64) {
    let mut dets = model.detect_all(gt, pose, blocks, rng);
    dets.retain(|d| heads.contains(&d.class_group));
    let elapsed = timing.sample_post_sync(Config::new(blocks, heads.len()), rng);
    (dets, elapsed)
}

/// Sum of detection confidences per head (index head - 1).
pub fn score_sums(dets: &[Box3D], num_heads: usize) -> Vec<f64> {
    let mut sums = vec![0.0; num_heads];
    for d in dets {
        if let Some(s) = sums.get_mut(d.class_group - 1) {
            *s += d.confidence;
        }
    }
    sums
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Pose;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gt(n: usize) -> Vec<Box3D> {
        (0..n)
            .map(|i| Box3D {
                center: [i as f64 * 3.0, 1.0, 0.5],
                size: [4.0, 2.0, 1.5],
                yaw: 0.0,
                velocity: [1.0, 0.0],
                class_group: i % 6 + 1,
                confidence: 1.0,
                detected_at: 0.0,
                det_ego_pose: Pose::identity(),
                det_lidar_pose: Pose::identity(),
            })
            .collect()
    }

    fn exact_model() -> DetectorModel {
        DetectorModel {
            detect_prob: vec![0.5, 0.8, 1.0],
            pos_noise_sigma: vec![0.5, 0.3, 0.0],
            yaw_noise_sigma: 0.0,
            vel_noise_sigma: 0.0,
            ..DetectorModel::default()
        }
    }

    #[test]
    fn perfect_limit_is_bijective() {
        let pose = PoseContext::new(Pose::identity(), Pose::identity(), 0.0);
        let truth = gt(12);
        let all: BTreeSet<usize> = (1..=6).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (dets, _) = simulate_detector(
            &truth,
            &pose,
            3,
            &all,
            &exact_model(),
            &TimingModel::default(),
            &mut rng,
        );
        assert_eq!(dets.len(), truth.len());
        for (d, g) in dets.iter().zip(&truth) {
            assert_eq!(d.center, g.center);
            assert_eq!(d.class_group, g.class_group);
        }
    }

    #[test]
    fn skipped_head_yields_nothing() {
        let pose = PoseContext::new(Pose::identity(), Pose::identity(), 0.0);
        let heads: BTreeSet<usize> = [1, 2, 3, 5, 6].into_iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (dets, _) = simulate_detector(
            &gt(24),
            &pose,
            3,
            &heads,
            &exact_model(),
            &TimingModel::default(),
            &mut rng,
        );
        assert!(dets.iter().all(|d| d.class_group != 4));
        assert_eq!(dets.len(), 20);
    }

    #[test]
    fn elapsed_bounded_by_reference_cell() {
        let pose = PoseContext::new(Pose::identity(), Pose::identity(), 0.0);
        let heads: BTreeSet<usize> = [1, 2, 3, 4].into_iter().collect();
        let timing = TimingModel::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10_000 {
            let (_, t) = simulate_detector(
                &[],
                &pose,
                2,
                &heads,
                &DetectorModel::default(),
                &timing,
                &mut rng,
            );
            assert!(t <= 76.8);
        }
    }

    #[test]
    fn default_model_is_valid_and_monotone() {
        assert!(DetectorModel::default().validate().is_ok());
        let bad = DetectorModel {
            detect_prob: vec![0.9, 0.8, 0.95],
            ..DetectorModel::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn score_sums_per_head() {
        let mut d = gt(3);
        d[0].confidence = 0.25;
        d[1].confidence = 0.5;
        d[2].class_group = 1;
        d[2].confidence = 0.5;
        assert_eq!(score_sums(&d, 6), vec![0.75, 0.5, 0.0, 0.0, 0.0, 0.0]);
    }
}
