//! Error statistics: quartiles and recall-versus-threshold curves.
//!
//! Failed registrations enter as infinite errors, so they count against every
//! recall threshold and push quartiles upward rather than vanishing.

use serde::{Deserialize, Serialize};

/// Linear-interpolation quantile of sorted values, `q ∈ [0, 1]`.
fn quantile_sorted(v: &[f64], q: f64) -> f64 {
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    if lo == hi || frac == 0.0 || v[lo] == v[hi] {
        return v[lo];
    }
    v[lo] + frac * (v[hi] - v[lo])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quartiles {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

pub fn quartiles(values: &[f64]) -> Option<Quartiles> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Some(Quartiles {
        q1: quantile_sorted(&v, 0.25),
        median: quantile_sorted(&v, 0.5),
        q3: quantile_sorted(&v, 0.75),
    })
}

pub fn median(values: &[f64]) -> Option<f64> {
    quartiles(values).map(|q| q.median)
}

/// Fraction of errors strictly below `threshold`.
pub fn recall(errors: &[f64], threshold: f64) -> f64 {
    if errors.is_empty() {
        return 0.0;
    }
    errors.iter().filter(|&&e| e < threshold).count() as f64 / errors.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecallPoint {
    pub threshold: f64,
    pub recall: f64,
}

/// Recall at each threshold, in ascending threshold order.
pub fn recall_curve(errors: &[f64], thresholds: &[f64]) -> Vec<RecallPoint> {
    let mut t = thresholds.to_vec();
    t.sort_by(f64::total_cmp);
    t.into_iter()
        .map(|threshold| RecallPoint {
            threshold,
            recall: recall(errors, threshold),
        })
        .collect()
}
