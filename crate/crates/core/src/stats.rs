//! Small numeric helpers shared across modules.

use serde::Serialize;
use sha2::{Digest, Sha256};

/// Nearest-rank percentile: the smallest sample such that at least `p`% of
/// the samples are less than or equal to it. `p` in `[0, 100]`.
///
/// Returns `None` for an empty slice. NaNs must be filtered by the caller.
pub fn percentile_nearest_rank(values: &[f64], p: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Some(percentile_of_sorted(&sorted, p))
}

/// Same as [`percentile_nearest_rank`] on already sorted input.
pub fn percentile_of_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    // p * n first so integer-valued products stay exact.
    let rank = ((p.clamp(0.0, 100.0) * n as f64) / 100.0).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Population standard deviation.
pub fn std_pop(values: &[f64]) -> f64 {
    let m = mean(values);
    (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / values.len() as f64).sqrt()
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Hex SHA-256 of the canonical JSON serialization of `value`.
pub fn fingerprint<T: Serialize + ?Sized>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("fingerprinted values serialize");
    hex::encode(Sha256::digest(&bytes))
}

/// Sign with a dead-band: magnitudes below `tol` count as zero.
pub fn sign_with_deadband(v: f64, tol: f64) -> i8 {
    if v > tol {
        1
    } else if v < -tol {
        -1
    } else {
        0
    }
}
