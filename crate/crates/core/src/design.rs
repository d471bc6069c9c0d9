//! Latin hypercube designs over the unit cube with a raw-scale mapping.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesignSet {
    /// One row per run, entries in `[0, 1]`.
    pub unit: Vec<Vec<f64>>,
    /// Raw-scale `(lo, hi)` per dimension.
    pub bounds: Vec<(f64, f64)>,
    pub seed: u64,
}

impl DesignSet {
    pub fn n_runs(&self) -> usize {
        self.unit.len()
    }

    pub fn dims(&self) -> usize {
        self.bounds.len()
    }

    pub fn with_bounds(mut self, bounds: Vec<(f64, f64)>) -> Result<Self> {
        check_bounds(&bounds, self.dims())?;
        self.bounds = bounds;
        Ok(self)
    }

    pub fn raw(&self, i: usize) -> Vec<f64> {
        to_raw(&self.unit[i], &self.bounds)
    }

    pub fn raw_rows(&self) -> Vec<Vec<f64>> {
        (0..self.n_runs()).map(|i| self.raw(i)).collect()
    }
}

pub fn check_bounds(bounds: &[(f64, f64)], dims: usize) -> Result<()> {
    if bounds.len() != dims {
        return Err(invalid(format!(
            "{} bounds given for {dims} dimensions",
            bounds.len()
        )));
    }
    for (k, &(lo, hi)) in bounds.iter().enumerate() {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(invalid(format!(
                "bounds for dimension {k} must satisfy lo < hi, got ({lo}, {hi})"
            )));
        }
    }
    Ok(())
}

pub fn to_raw(unit: &[f64], bounds: &[(f64, f64)]) -> Vec<f64> {
    unit.iter()
        .zip(bounds)
        .map(|(u, (lo, hi))| lo + u * (hi - lo))
        .collect()
}

pub fn to_unit(raw: &[f64], bounds: &[(f64, f64)]) -> Vec<f64> {
    raw.iter()
        .zip(bounds)
        .map(|(x, (lo, hi))| (x - lo) / (hi - lo))
        .collect()
}

/// `n` points in `[0, 1]^d`: column `c` is `(π_c(i) + u) / n` with an
/// independent permutation `π_c` and `u ~ U(0, 1)`, or `u = 1/2` when
/// `midpoint` is set.
pub fn latin_hypercube(n: usize, d: usize, seed: u64, midpoint: bool) -> Result<DesignSet> {
    if n == 0 || d == 0 {
        return Err(invalid("a design needs at least one run and one dimension"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut unit = vec![vec![0.0; d]; n];
    let mut perm: Vec<usize> = (0..n).collect();
    for c in 0..d {
        perm.shuffle(&mut rng);
        for (i, &cell) in perm.iter().enumerate() {
            let u = if midpoint { 0.5 } else { rng.random::<f64>() };
            unit[i][c] = (cell as f64 + u) / n as f64;
        }
    }
    Ok(DesignSet {
        unit,
        bounds: vec![(0.0, 1.0); d],
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn strata(d: &DesignSet, c: usize) -> Vec<usize> {
        let n = d.n_runs() as f64;
        let mut s: Vec<usize> = d.unit.iter().map(|r| (r[c] * n).floor() as usize).collect();
        s.sort_unstable();
        s
    }

    #[test]
    fn single_run_is_in_unit_cube() {
        let d = latin_hypercube(1, 3, 5, false).unwrap();
        assert!(d.unit[0].iter().all(|&u| (0.0..=1.0).contains(&u)));
    }

    #[test]
    fn midpoint_variant_centres_cells() {
        let d = latin_hypercube(4, 2, 1, true).unwrap();
        for row in &d.unit {
            for &u in row {
                assert!(((u * 4.0) - (u * 4.0).floor() - 0.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn raw_mapping_round_trips() {
        let d = latin_hypercube(5, 2, 3, false)
            .unwrap()
            .with_bounds(vec![(0.5, 1.5), (0.01, 0.1)])
            .unwrap();
        let raw = d.raw(2);
        let back = to_unit(&raw, &d.bounds);
        assert!((back[0] - d.unit[2][0]).abs() < 1e-12 && (back[1] - d.unit[2][1]).abs() < 1e-12);
        assert!(d.clone().with_bounds(vec![(1.0, 0.0), (0.0, 1.0)]).is_err());
    }

    #[test]
    fn identical_seeds_give_identical_designs() {
        assert_eq!(
            latin_hypercube(20, 4, 9, false).unwrap(),
            latin_hypercube(20, 4, 9, false).unwrap()
        );
    }

    proptest! {
        #[test]
        fn every_stratum_is_occupied_once(seed in 0u64..100, n in 1usize..40, d in 1usize..5) {
            let design = latin_hypercube(n, d, seed, false).unwrap();
            for c in 0..d {
                prop_assert_eq!(strata(&design, c), (0..n).collect::<Vec<_>>());
            }
        }
    }
}
