//! Credibility of a recommendation: how well the model did on historic
//! samples with a similar context.
//!
//! Each historic point `j` with a recorded successor gets two errors: the
//! prediction error at `j`, and the gap between the first-order change the
//! model predicts for the observed control step and the score change that was
//! actually observed. Both are scaled by validation-split percentiles into a
//! trust value, and the credibility of a query is the kernel-weighted mean
//! trust over its context neighbours.

use serde::{Deserialize, Serialize};

use crate::dataset::Chunk;
use crate::domain::{N_COP, N_FEATURES};
use crate::error::{Error, Result};
use crate::mlp::MlpModel;
use crate::neighbors::{CxpPoint, NeighborIndex};
use crate::optimality::OptimalityConfig;
use crate::stats::percentile_nearest_rank;

pub const LOWER_PERCENTILE: f64 = 5.0;
pub const UPPER_PERCENTILE: f64 = 95.0;

/// Error percentiles from the validation split; index 0 is the prediction
/// error, index 1 the first-order step error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CredibilityCalibration {
    pub q5: [f64; 2],
    pub q95: [f64; 2],
    /// Number of (point, successor) pairs the percentiles were taken over.
    pub samples: usize,
    /// Fingerprint of the split the errors were computed on.
    pub split_fingerprint: String,
}

/// `(e1, e2)` for one historic point, from the model's prediction and CoP
/// gradient at the point (standardized space) and the observed step.
pub fn neighbor_errors(
    prediction: f64,
    cop_gradient: &[f64; N_COP],
    cop_step: &[f64; N_COP],
    score: f64,
    next_score: f64,
) -> (f64, f64) {
    let e1 = (prediction - score).abs();
    let taylor: f64 = cop_gradient.iter().zip(cop_step).map(|(g, d)| g * d).sum();
    let e2 = (taylor - (next_score - score)).abs();
    (e1, e2)
}

/// Errors of `model` at standardized input `x` whose successor is `x_next`.
pub fn model_errors(
    model: &MlpModel,
    x: &[f64; N_FEATURES],
    score: f64,
    x_next: &[f64; N_FEATURES],
    next_score: f64,
) -> Result<(f64, f64)> {
    let pred = model.predict(x)?;
    let grad = model.input_gradient(x)?;
    let g: [f64; N_COP] = std::array::from_fn(|i| grad[i]);
    let step: [f64; N_COP] = std::array::from_fn(|i| x_next[i] - x[i]);
    Ok(neighbor_errors(pred, &g, &step, score, next_score))
}

/// Scales an error onto `[0, 1]` between the two calibration percentiles.
pub fn normalize_error(e: f64, q5: f64, q95: f64) -> f64 {
    if q95 == q5 {
        return if e <= q5 { 0.0 } else { 1.0 };
    }
    ((e - q5) / (q95 - q5)).clamp(0.0, 1.0)
}

pub fn trust(e1_norm: f64, e2_norm: f64) -> f64 {
    1.0 - (e1_norm + e2_norm) / 2.0
}

impl CredibilityCalibration {
    pub fn fit(errors: &[(f64, f64)], split_fingerprint: String) -> Result<Self> {
        if errors.is_empty() {
            return Err(Error::InsufficientData("no error pairs to calibrate on".into()));
        }
        let e1: Vec<f64> = errors.iter().map(|e| e.0).collect();
        let e2: Vec<f64> = errors.iter().map(|e| e.1).collect();
        let q = |v: &[f64], p| percentile_nearest_rank(v, p).expect("non-empty");
        Ok(CredibilityCalibration {
            q5: [q(&e1, LOWER_PERCENTILE), q(&e2, LOWER_PERCENTILE)],
            q95: [q(&e1, UPPER_PERCENTILE), q(&e2, UPPER_PERCENTILE)],
            samples: errors.len(),
            split_fingerprint,
        })
    }

    pub fn trust(&self, errors: (f64, f64)) -> f64 {
        trust(
            normalize_error(errors.0, self.q5[0], self.q95[0]),
            normalize_error(errors.1, self.q5[1], self.q95[1]),
        )
    }
}

/// Errors for every record that has a successor, chunk by chunk.
pub fn chunk_errors(model: &MlpModel, optimality: &OptimalityConfig, chunks: &[Chunk]) -> Result<Vec<(f64, f64)>> {
    let mut out = Vec::new();
    for chunk in chunks {
        for pair in chunk.records.windows(2) {
            let x = model.feature_scaler.apply(&pair[0].features());
            let xn = model.feature_scaler.apply(&pair[1].features());
            out.push(model_errors(
                model,
                &x,
                optimality.score_record(&pair[0]),
                &xn,
                optimality.score_record(&pair[1]),
            )?);
        }
    }
    Ok(out)
}

/// Trust per record of `chunks` in flattened order; `None` for the last
/// record of each chunk, which has no successor.
pub fn point_trusts(
    model: &MlpModel,
    optimality: &OptimalityConfig,
    calibration: &CredibilityCalibration,
    chunks: &[Chunk],
) -> Result<Vec<Option<f64>>> {
    let mut out = Vec::new();
    for chunk in chunks {
        let errors = chunk_errors(model, optimality, std::slice::from_ref(chunk))?;
        out.extend(errors.into_iter().map(|e| Some(calibration.trust(e))));
        if !chunk.is_empty() {
            out.push(None);
        }
    }
    Ok(out)
}

/// `(1/n) Σ w_j T_j` over `(weight, trust)` pairs.
pub fn weighted_trust(terms: &[(f64, f64)], n: usize) -> f64 {
    terms.iter().map(|(w, t)| w * t).sum::<f64>() / n as f64
}

/// Credibility at a standardized context point. Points whose trust is `None`
/// are skipped and the next-nearest eligible points take their place.
pub fn credibility(index: &NeighborIndex, trusts: &[Option<f64>], cxp: &CxpPoint) -> Result<f64> {
    if trusts.len() != index.len() {
        return Err(Error::DimensionMismatch {
            expected: index.len(),
            actual: trusts.len(),
        });
    }
    let n = index.n_neighbors();
    let neighbors = index.query_filtered(cxp, n, |i| trusts[i].is_some())?;
    let terms: Vec<(f64, f64)> = neighbors
        .iter()
        .map(|nb| (index.weight(nb.distance), trusts[nb.index].expect("filtered")))
        .collect();
    Ok(weighted_trust(&terms, n).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::N_CXP;

    #[test]
    fn perfect_model_has_zero_errors() {
        let (e1, e2) = neighbor_errors(0.4, &[1.0, 0.0, 0.0, 0.0, 0.0], &[0.25, 0.0, 0.0, 0.0, 0.0], 0.4, 0.65);
        assert_eq!((e1, e2), (0.0, 0.0));
    }

    #[test]
    fn offsets_show_up_as_errors() {
        // Prediction off by 0.2, first-order change off by 0.1.
        let (e1, e2) = neighbor_errors(1.2, &[0.5, 0.0, 0.0, 0.0, 0.0], &[1.0, 0.0, 0.0, 0.0, 0.0], 1.0, 1.4);
        assert!((e1 - 0.2).abs() < 1e-12);
        assert!((e2 - 0.1).abs() < 1e-12);
    }

    #[test]
    fn linear_model_step_is_exact() {
        // f = x_1: gradient e_1, step 0.5, observed change 0.5.
        let (_, e2) = neighbor_errors(0.0, &[1.0, 0.0, 0.0, 0.0, 0.0], &[0.5, 0.0, 0.0, 0.0, 0.0], 0.0, 0.5);
        assert_eq!(e2, 0.0);
    }

    #[test]
    fn error_normalization() {
        assert_eq!(normalize_error(1.0, 1.0, 3.0), 0.0);
        assert_eq!(normalize_error(3.0, 1.0, 3.0), 1.0);
        assert_eq!(normalize_error(2.0, 1.0, 3.0), 0.5);
        assert_eq!(normalize_error(-5.0, 1.0, 3.0), 0.0);
        assert_eq!(normalize_error(9.0, 1.0, 3.0), 1.0);
        assert_eq!(normalize_error(2.0, 2.0, 2.0), 0.0);
        assert_eq!(normalize_error(2.5, 2.0, 2.0), 1.0);
    }

    #[test]
    fn trust_values() {
        assert_eq!(trust(0.0, 0.0), 1.0);
        assert_eq!(trust(1.0, 1.0), 0.0);
        assert!((trust(0.2, 0.6) - 0.6).abs() < 1e-15);
    }

    #[test]
    fn calibration_uses_nearest_rank() {
        let errors: Vec<(f64, f64)> = (1..=20).map(|i| (i as f64, 2.0 * i as f64)).collect();
        let cal = CredibilityCalibration::fit(&errors, "x".into()).unwrap();
        assert_eq!(cal.q5, [1.0, 2.0]);
        assert_eq!(cal.q95, [19.0, 38.0]);
        assert_eq!(cal.trust((1.0, 2.0)), 1.0);
        assert_eq!(cal.trust((19.0, 38.0)), 0.0);
        assert!(CredibilityCalibration::fit(&[], String::new()).is_err());
    }

    fn line_index(n: usize, spacing: f64) -> NeighborIndex {
        let pts: Vec<CxpPoint> = (0..n)
            .map(|i| {
                let mut p = [0.0; N_CXP];
                p[0] = i as f64 * spacing;
                p
            })
            .collect();
        NeighborIndex::build(pts).unwrap()
    }

    #[test]
    fn all_coincident_and_fully_trusted_is_one() {
        let index = NeighborIndex::build(vec![[0.0; N_CXP]; 20]).unwrap();
        let c = credibility(&index, &[Some(1.0); 20], &[0.0; N_CXP]).unwrap();
        assert_eq!(c, 1.0);
        let c = credibility(&index, &[Some(0.0); 20], &[0.0; N_CXP]).unwrap();
        assert_eq!(c, 0.0);
    }

    #[test]
    fn matches_hand_summed_fixture() {
        let index = line_index(30, 0.1);
        let trusts: Vec<Option<f64>> = (0..30).map(|i| Some(((i * 7) % 10) as f64 / 10.0)).collect();
        let b = index.kernel_width();
        let mut hand = 0.0;
        for i in 0..15 {
            let d = i as f64 * 0.1;
            hand += (-(d * d) / (b * b)).exp() * trusts[i].unwrap();
        }
        hand /= 15.0;
        let c = credibility(&index, &trusts, &[0.0; N_CXP]).unwrap();
        assert!((c - hand).abs() < 1e-12, "{c} vs {hand}");
    }

    #[test]
    fn ineligible_points_are_replaced() {
        let index = line_index(30, 1.0);
        let mut trusts = vec![Some(1.0); 30];
        trusts[0] = None;
        let with_gap = credibility(&index, &trusts, &[0.0; N_CXP]).unwrap();
        // Same as dropping point 0 and taking points 1..=15.
        let b = index.kernel_width();
        let hand: f64 = (1..=15).map(|i| (-((i * i) as f64) / (b * b)).exp()).sum::<f64>() / 15.0;
        assert!((with_gap - hand).abs() < 1e-12);
        trusts.iter_mut().skip(10).for_each(|t| *t = None);
        assert!(matches!(
            credibility(&index, &trusts, &[0.0; N_CXP]),
            Err(Error::TooFewEligibleNeighbors { .. })
        ));
    }
}
