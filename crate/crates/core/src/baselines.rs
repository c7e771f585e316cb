//! Non-learned and weakly-learned registration baselines.

use nalgebra::Matrix3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{regress_pose, TrunkParams};
use crate::plucker::{line_distance_unsigned, transform_line, PluckerLine, RigidTransform};
use crate::pose::{estimate_from_pairs, RegistrationResult};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IclConfig {
    pub max_iterations: usize,
    /// Stop once the summed nearest-line distance drops by less than this fraction.
    pub relative_change_tol: f64,
}

impl Default for IclConfig {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            relative_change_tol: 1e-6,
        }
    }
}

impl IclConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 || !(self.relative_change_tol > 0.0) {
            return Err(Error::Config("ICL needs positive max_iterations and tolerance".into()));
        }
        Ok(())
    }
}

/// For each line of `moved`, the closest target line (lowest index on ties) and its distance.
fn nearest(moved: &[PluckerLine], dst: &[PluckerLine]) -> (Vec<usize>, f64) {
    let found: Vec<(usize, f64)> = moved
        .par_iter()
        .map(|l| {
            let mut best = (0, f64::INFINITY);
            for (j, d) in dst.iter().enumerate() {
                let e = line_distance_unsigned(l, d);
                if e < best.1 {
                    best = (j, e);
                }
            }
            best
        })
        .collect();
    let total = found.iter().map(|f| f.1).sum();
    (found.into_iter().map(|f| f.0).collect(), total)
}

/// Iterative closest line. Returns the result and the objective after every accepted iteration
/// (first entry is the objective at the identity pose).
pub fn icl_register_traced(
    src: &[PluckerLine],
    dst: &[PluckerLine],
    cfg: &IclConfig,
) -> Result<(RegistrationResult, Vec<f64>)> {
    cfg.validate()?;
    for set in [src, dst] {
        if set.len() < 2 {
            return Err(Error::TooFewLines { needed: 2, got: set.len() });
        }
    }
    let mut acc = RigidTransform::identity();
    let mut moved = src.to_vec();
    let (mut nn, mut objective) = nearest(&moved, dst);
    let mut trace = vec![objective];
    let mut iterations = 0;
    while iterations < cfg.max_iterations {
        iterations += 1;
        let pairs: Vec<_> = moved.iter().zip(&nn).map(|(l, &j)| (*l, dst[j])).collect();
        let step = estimate_from_pairs(&Matrix3::identity(), &pairs, false)?;
        let candidate = step.compose(&acc);
        let cand_moved: Vec<_> = src.iter().map(|l| transform_line(&candidate, l)).collect();
        let (cand_nn, cand_obj) = nearest(&cand_moved, dst);
        if cand_obj > objective {
            break;
        }
        let drop = objective - cand_obj;
        let previous = objective;
        acc = candidate;
        moved = cand_moved;
        nn = cand_nn;
        objective = cand_obj;
        trace.push(objective);
        if drop <= cfg.relative_change_tol * previous {
            break;
        }
    }
    let result = RegistrationResult {
        pose: acc,
        inlier_pairs: nn.iter().enumerate().map(|(i, &j)| (i, j)).collect(),
        score_sum: objective,
        hypothesis_count: iterations,
    };
    Ok((result, trace))
}

pub fn icl_register(src: &[PluckerLine], dst: &[PluckerLine], cfg: &IclConfig) -> Result<RegistrationResult> {
    icl_register_traced(src, dst, cfg).map(|r| r.0)
}

/// Direct pose regression from pooled trunk features. No correspondences are produced.
pub fn regression_register(
    src: &[PluckerLine],
    dst: &[PluckerLine],
    params: &TrunkParams,
) -> Result<RegistrationResult> {
    Ok(RegistrationResult {
        pose: regress_pose(src, dst, params)?,
        inlier_pairs: Vec::new(),
        score_sum: 0.0,
        hypothesis_count: 1,
    })
}

/// `‖t_gt − t‖ + ‖q_gt − q‖` with both quaternions in canonical form.
pub fn regression_loss(pose_gt: &RigidTransform, pose: &RigidTransform) -> f64 {
    let (a, b) = (pose_gt.quaternion(), pose.quaternion());
    let dq: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum();
    (pose_gt.translation - pose.translation).norm() + dq.sqrt()
}
