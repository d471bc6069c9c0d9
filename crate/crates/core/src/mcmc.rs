//! Metropolis-Hastings building blocks shared by the emulator and the
//! calibrator: log-scale random walks on positive parameters, logit random
//! walks on unit-interval parameters, and burn-in step-size adaptation.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Independent log-normal prior on every coordinate of a positive vector.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogNormalPrior {
    pub log_mean: f64,
    pub log_sd: f64,
}

impl Default for LogNormalPrior {
    fn default() -> Self {
        Self {
            log_mean: 0.0,
            log_sd: 1.5,
        }
    }
}

impl LogNormalPrior {
    /// Log density up to a constant.
    pub fn log_density(&self, x: &[f64]) -> f64 {
        x.iter()
            .map(|&v| {
                let z = (v.ln() - self.log_mean) / self.log_sd;
                -v.ln() - 0.5 * z * z
            })
            .sum()
    }
}

/// `x* = exp(log x + ε N(0, I))`.
pub fn log_scale_proposal<R: Rng + ?Sized>(x: &[f64], eps: f64, rng: &mut R) -> Vec<f64> {
    x.iter()
        .map(|&v| (v.ln() + eps * rng.sample::<f64, _>(StandardNormal)).exp())
        .collect()
}

/// `log J(x) = -Σ log x_i`.
pub fn log_jacobian_positive(x: &[f64]) -> f64 {
    -x.iter().map(|v| v.ln()).sum::<f64>()
}

/// Prior and Jacobian part of the log acceptance ratio for a log-scale move:
/// `log p(x*) + log J(x) - log p(x) - log J(x*)`.
pub fn log_scale_correction(x_new: &[f64], x_old: &[f64], prior: &LogNormalPrior) -> f64 {
    prior.log_density(x_new) + log_jacobian_positive(x_old)
        - prior.log_density(x_old)
        - log_jacobian_positive(x_new)
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn expit(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// `η* = expit(logit η + ε N(0, I))`.
pub fn logit_proposal<R: Rng + ?Sized>(eta: &[f64], eps: f64, rng: &mut R) -> Vec<f64> {
    eta.iter()
        .map(|&e| expit(logit(e) + eps * rng.sample::<f64, _>(StandardNormal)))
        .collect()
}

/// `log J(η) = -Σ log(η_i (1 - η_i))`.
pub fn log_jacobian_unit(eta: &[f64]) -> f64 {
    -eta.iter().map(|e| (e * (1.0 - e)).ln()).sum::<f64>()
}

/// Uniform-prior correction for a logit move: `log J(η) - log J(η*)`.
/// Proposals on the boundary of the cube get `-∞`.
pub fn logit_correction(eta_new: &[f64], eta_old: &[f64]) -> f64 {
    if eta_new.iter().any(|&e| !(e > 0.0 && e < 1.0)) {
        return f64::NEG_INFINITY;
    }
    log_jacobian_unit(eta_old) - log_jacobian_unit(eta_new)
}

/// Accept with probability `min(1, exp(log_ratio))`.
pub fn accept<R: Rng + ?Sized>(log_ratio: f64, rng: &mut R) -> bool {
    let u: f64 = rng.random();
    log_ratio >= 0.0 || u < log_ratio.exp()
}

/// Random-walk step size with acceptance bookkeeping. During burn-in the log
/// step is nudged towards a target acceptance rate; afterwards it is frozen.
#[derive(Clone, Debug)]
pub struct Step {
    pub eps: f64,
    adapt: bool,
    target: f64,
    proposed: usize,
    accepted: usize,
    kept_proposed: usize,
    kept_accepted: usize,
}

impl Step {
    pub fn new(eps: f64, adapt: bool) -> Self {
        Self {
            eps,
            adapt,
            target: 0.3,
            proposed: 0,
            accepted: 0,
            kept_proposed: 0,
            kept_accepted: 0,
        }
    }

    pub fn record(&mut self, accepted: bool, iteration: usize, burn_in: usize) {
        self.proposed += 1;
        self.accepted += accepted as usize;
        if iteration >= burn_in {
            self.kept_proposed += 1;
            self.kept_accepted += accepted as usize;
        } else if self.adapt {
            let gain = 1.0 / (1.0 + self.proposed as f64).sqrt();
            let hit = if accepted { 1.0 } else { 0.0 };
            self.eps = (self.eps.ln() + gain * (hit - self.target))
                .exp()
                .clamp(1e-4, 10.0);
        }
    }

    /// Acceptance rate after burn-in (over all iterations if none were kept).
    pub fn acceptance_rate(&self) -> f64 {
        if self.kept_proposed > 0 {
            self.kept_accepted as f64 / self.kept_proposed as f64
        } else if self.proposed > 0 {
            self.accepted as f64 / self.proposed as f64
        } else {
            0.0
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use statrs::distribution::{ContinuousCDF, LogNormal};

    #[test]
    fn zero_step_has_unit_ratio() {
        let prior = LogNormalPrior::default();
        let x = [0.3, 2.0, 7.5];
        assert_eq!(log_scale_correction(&x, &x, &prior), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let same = log_scale_proposal(&x, 0.0, &mut rng);
        assert!(same.iter().zip(&x).all(|(a, b)| (a - b).abs() <= 1e-15 * b));
        let eta = [0.2, 0.7];
        assert_eq!(logit_correction(&eta, &eta), 0.0);
        let same = logit_proposal(&eta, 0.0, &mut rng);
        assert!((same[0] - 0.2).abs() < 1e-15 && (same[1] - 0.7).abs() < 1e-15);
        assert!(accept(0.0, &mut rng));
    }

    #[test]
    fn boundary_proposals_are_rejected() {
        assert_eq!(logit_correction(&[1.0], &[0.5]), f64::NEG_INFINITY);
        assert_eq!(logit_correction(&[0.0], &[0.5]), f64::NEG_INFINITY);
    }

    fn ks_statistic(mut xs: Vec<f64>, cdf: impl Fn(f64) -> f64) -> f64 {
        xs.sort_by(f64::total_cmp);
        let n = xs.len() as f64;
        xs.iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = cdf(x);
                (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn flat_likelihood_chain_targets_the_prior() {
        // With a constant likelihood the log-scale chain must sample the
        // log-normal prior. Thinning by 20 keeps the KS draws near-independent.
        let prior = LogNormalPrior::default();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut x = vec![1.0];
        let mut kept = Vec::new();
        for it in 0..2_000_000 {
            let prop = log_scale_proposal(&x, 1.5, &mut rng);
            if accept(log_scale_correction(&prop, &x, &prior), &mut rng) {
                x = prop;
            }
            if it >= 1000 && it % 20 == 0 {
                kept.push(x[0]);
            }
        }
        let dist = LogNormal::new(0.0, 1.5).unwrap();
        let d = ks_statistic(kept.clone(), |v| dist.cdf(v));
        let critical = 1.628 / (kept.len() as f64).sqrt();
        assert!(d < critical, "KS {d} vs {critical}");
    }

    #[test]
    fn adaptation_moves_towards_target_and_freezes() {
        let mut s = Step::new(1.0, true);
        for it in 0..100 {
            s.record(false, it, 100);
        }
        assert!(s.eps < 1.0);
        let frozen = s.eps;
        s.record(true, 100, 100);
        assert_eq!(s.eps, frozen);
        assert_eq!(s.acceptance_rate(), 1.0);
    }
}
