//! Predictive scoring: the Gneiting-Raftery score (GRS) and RMSE.

use serde::{Deserialize, Serialize};

use crate::error::{dim, invalid, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub model: String,
    pub grs: f64,
    pub rmse: f64,
    pub n_runs: usize,
}

/// `-Σ ((z - μ)/σ)² - Σ 2 log σ` over all cells. Higher is better.
pub fn grs(z: &[f64], mu_rep: &[f64], sigma_rep: &[f64]) -> Result<f64> {
    if z.len() != mu_rep.len() || z.len() != sigma_rep.len() {
        return Err(dim("GRS inputs must have equal length"));
    }
    let mut total = 0.0;
    for ((&zi, &mi), &si) in z.iter().zip(mu_rep).zip(sigma_rep) {
        if !(si > 0.0) {
            return Err(invalid(format!("replicate SD must be positive, got {si}")));
        }
        let r = (zi - mi) / si;
        total -= r * r + 2.0 * si.ln();
    }
    Ok(total)
}

pub fn rmse(z: &[f64], predictions: &[f64]) -> Result<f64> {
    if z.len() != predictions.len() || z.is_empty() {
        return Err(dim("RMSE inputs must be non-empty and of equal length"));
    }
    let sse: f64 = z
        .iter()
        .zip(predictions)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok((sse / z.len() as f64).sqrt())
}

pub fn score(
    model: &str,
    z: &[f64],
    mu_rep: &[f64],
    sigma_rep: &[f64],
    n_runs: usize,
) -> Result<ScoreReport> {
    Ok(ScoreReport {
        model: model.to_string(),
        grs: grs(z, mu_rep, sigma_rep)?,
        rmse: rmse(z, mu_rep)?,
        n_runs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_unit_scale_prediction_scores_zero() {
        assert_eq!(
            grs(&[1.0, -2.0, 3.5], &[1.0, -2.0, 3.5], &[1.0; 3]).unwrap(),
            0.0
        );
    }

    #[test]
    fn single_cell_value() {
        assert_eq!(grs(&[2.0], &[0.0], &[1.0]).unwrap(), -4.0);
    }

    #[test]
    fn non_positive_sd_rejected() {
        assert!(grs(&[0.0], &[0.0], &[0.0]).is_err());
        assert!(grs(&[0.0, 1.0], &[0.0], &[1.0]).is_err());
    }

    #[test]
    fn cell_score_peaks_at_absolute_residual() {
        let r = 1.7;
        let best = (1..4000)
            .map(|k| k as f64 * 1e-3)
            .max_by(|a, b| {
                grs(&[r], &[0.0], &[*a])
                    .unwrap()
                    .total_cmp(&grs(&[r], &[0.0], &[*b]).unwrap())
            })
            .unwrap();
        assert!((best - r).abs() <= 1e-3);
    }

    #[test]
    fn rmse_identities() {
        assert_eq!(rmse(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        assert_eq!(rmse(&[1.0, 2.0, 3.0], &[1.5, 2.5, 3.5]).unwrap(), 0.5);
        let direct = ((1.0f64 + 4.0 + 0.0 + 9.0) / 4.0).sqrt();
        assert_eq!(
            rmse(&[0.0, 0.0, 0.0, 0.0], &[1.0, -2.0, 0.0, 3.0]).unwrap(),
            direct
        );
    }

    proptest! {
        #[test]
        fn invariant_under_joint_permutation(
            cells in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0, 0.1f64..3.0), 1..20),
            rot in 0usize..20,
        ) {
            let z: Vec<f64> = cells.iter().map(|c| c.0).collect();
            let m: Vec<f64> = cells.iter().map(|c| c.1).collect();
            let s: Vec<f64> = cells.iter().map(|c| c.2).collect();
            let k = rot % cells.len();
            let rotate = |v: &Vec<f64>| { let mut w = v.clone(); w.rotate_left(k); w };
            let a = grs(&z, &m, &s).unwrap();
            let b = grs(&rotate(&z), &rotate(&m), &rotate(&s)).unwrap();
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()));
        }

        #[test]
        fn inflating_sd_beyond_residual_lowers_score(r in -3.0f64..3.0, extra in 0.01f64..2.0) {
            let s0 = r.abs().max(0.05);
            let before = grs(&[r], &[0.0], &[s0]).unwrap();
            let after = grs(&[r], &[0.0], &[s0 + extra]).unwrap();
            prop_assert!(after < before);
        }
    }
}
