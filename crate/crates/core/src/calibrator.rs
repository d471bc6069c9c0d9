//! Modular calibration of simulator inputs against field data with a
//! dynamic spatiotemporal bias term.
//!
//! ```text
//! z_t(s) = y(s, η)_t + u_t(s) + ε_t(s),   ε_t(s) ~ N(0, ν_t)
//! u_t    = u_{t-1} + w_t,                 w_t ~ N(0, ν_t U(ρ))
//! ```
//!
//! The emulator posterior is fixed: each iteration takes the next stored
//! emulator draw and never re-weights it by the field data.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::emulator::{
    DrawPredictor, EmulatorDraws, LagSource, McmcSettings, Prediction, SpatialDomain,
    TrainingEnsemble,
};
use crate::error::{dim, invalid, numeric, Result};
use crate::kernels::{corr_matrix, graph_corr};
use crate::linalg::{ln_2pi, SpdFactor, JITTER};
use crate::mcmc::{
    accept, log_scale_correction, log_scale_proposal, logit_correction, logit_proposal,
    LogNormalPrior, Step,
};
use crate::ssm::RotatedRandomWalk;

/// Field observations as `[time][site]` over the full time grid `1..T`.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldData {
    pub z: Vec<Vec<f64>>,
}

impl FieldData {
    pub fn new(z: Vec<Vec<f64>>) -> Result<Self> {
        if z.is_empty() {
            return Err(invalid("field data is empty"));
        }
        let s = z[0].len();
        for (t, row) in z.iter().enumerate() {
            if row.len() != s {
                return Err(dim(format!(
                    "field data row {} has {} locations, expected {s}",
                    t + 1,
                    row.len()
                )));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(invalid(format!(
                    "field data at time {} has missing values",
                    t + 1
                )));
            }
        }
        Ok(Self { z })
    }

    pub fn n_times(&self) -> usize {
        self.z.len()
    }

    pub fn n_sites(&self) -> usize {
        self.z[0].len()
    }

    fn check_against(&self, ens: &TrainingEnsemble) -> Result<()> {
        if self.n_times() != ens.n_times() || self.n_sites() != ens.n_sites() {
            return Err(dim(format!(
                "field data is {}x{} (times x locations) but the ensemble is {}x{}",
                self.n_times(),
                self.n_sites(),
                ens.n_times(),
                ens.n_sites()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibConfig {
    /// Logit random-walk step for `η`.
    pub eps3: f64,
    /// Log-scale random-walk step for `ρ`.
    pub eps_rho: f64,
    /// Bias precision discount.
    pub b: f64,
    pub bias_enabled: bool,
    pub rho_prior: LogNormalPrior,
    pub init_rho: f64,
    /// Starting value of `η` in the unit cube; the centre when absent.
    pub init_eta: Option<Vec<f64>>,
    /// Prior scale of `u_0`, `u_0 ~ N(0, ν_0 c0 I)`.
    pub c0: f64,
    pub n0: f64,
    pub d0: f64,
    pub mcmc: McmcSettings,
    /// Emulator draws advance by this many positions per iteration.
    pub draw_stride: usize,
    /// Index of the emulator draw used at the first iteration.
    pub draw_offset: usize,
    pub seed: u64,
}

impl Default for CalibConfig {
    fn default() -> Self {
        Self {
            eps3: 0.3,
            eps_rho: 0.3,
            b: 0.95,
            bias_enabled: true,
            rho_prior: LogNormalPrior::default(),
            init_rho: 1.0,
            init_eta: None,
            c0: 1.0,
            n0: 1.0,
            d0: 1.0,
            mcmc: McmcSettings::default(),
            draw_stride: 1,
            draw_offset: 0,
            seed: 0,
        }
    }
}

impl CalibConfig {
    pub fn validate(&self, d: usize) -> Result<()> {
        self.mcmc.validate()?;
        if !(self.eps3 > 0.0 && self.eps_rho > 0.0) {
            return Err(invalid("eps3 and eps_rho must be positive"));
        }
        if !(self.b > 0.0 && self.b <= 1.0) {
            return Err(invalid("bias discount b must lie in (0, 1]"));
        }
        if !(self.init_rho > 0.0 && self.c0 >= 0.0 && self.n0 > 0.0 && self.d0 > 0.0) {
            return Err(invalid("bias prior settings must be positive"));
        }
        if self.draw_stride == 0 {
            return Err(invalid("draw_stride must be at least 1"));
        }
        if let Some(eta) = &self.init_eta {
            if eta.len() != d || eta.iter().any(|e| !(*e > 0.0 && *e < 1.0)) {
                return Err(invalid(
                    "init_eta must be a point strictly inside the unit cube",
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct CalibrationDraws {
    /// Unit-cube `η` per retained sample.
    pub eta: Vec<Vec<f64>>,
    pub rho: Vec<Vec<f64>>,
    /// `u[k][t]` for modelled times `t = 0..H`.
    pub u: Vec<Vec<DVector<f64>>>,
    pub nu: Vec<Vec<f64>>,
    /// Replicate mean `μ̃ + u` per retained sample as `[t][site]`, `t = 1..H`.
    pub rep_mean: Vec<Vec<Vec<f64>>>,
    /// Replicate variance `ν + v(1 - q)` per retained sample.
    pub rep_var: Vec<Vec<Vec<f64>>>,
    pub acceptance_eta: f64,
    pub acceptance_rho: f64,
    /// Times the emulator draw store was exhausted and restarted.
    pub wraps: usize,
    /// Emulator variances clamped at zero during prediction.
    pub clamped: usize,
}

/// `Σ_t Σ_s log N(z_t(s) | μ̃_t(s) + u_t(s), ν_t + σ̃²_t(s))` over modelled
/// times; `z` holds those times only and `u`, `nu` are indexed `0..H`.
pub fn calib_loglik(z: &[Vec<f64>], pred: &Prediction, u: &[DVector<f64>], nu: &[f64]) -> f64 {
    let mut ll = 0.0;
    for (t, zt) in z.iter().enumerate() {
        for (s, &zv) in zt.iter().enumerate() {
            let var = (nu[t + 1] + pred.var[t][s]).max(f64::MIN_POSITIVE);
            let r = zv - pred.mean[t][s] - u[t + 1][s];
            ll -= 0.5 * (ln_2pi() + var.ln() + r * r / var);
        }
    }
    ll
}

/// Bias state correlation `U(ρ)` with jitter.
fn bias_corr(domain: &SpatialDomain, rho: &[f64]) -> Result<DMatrix<f64>> {
    let raw = match domain {
        SpatialDomain::Points(c) => corr_matrix(c, rho)?,
        SpatialDomain::Graph(a) => graph_corr(a)?,
    };
    let f = SpdFactor::with_jitter(&raw, JITTER)?;
    let mut u = raw;
    for i in 0..u.nrows() {
        u[(i, i)] += f.jitter();
    }
    Ok(u)
}

/// `Σ_t log N(u_t | u_{t-1}, ν_t U)`.
fn bias_walk_loglik(factor: &SpdFactor, u: &[DVector<f64>], nu: &[f64]) -> f64 {
    let k = factor.dim() as f64;
    (1..u.len())
        .map(|t| {
            let d = &u[t] - &u[t - 1];
            -0.5 * (k * (ln_2pi() + nu[t].ln()) + factor.log_det() + factor.inv_quad(&d) / nu[t])
        })
        .sum()
}

struct BiasModel {
    walk: RotatedRandomWalk,
    factor: Option<SpdFactor>,
}

impl BiasModel {
    fn new(domain: &SpatialDomain, rho: &[f64], enabled: bool) -> Result<Self> {
        let s = domain.n_sites();
        if !enabled {
            return Ok(Self {
                walk: RotatedRandomWalk::new(&DMatrix::zeros(s, s))?,
                factor: None,
            });
        }
        let u = bias_corr(domain, rho)?;
        Ok(Self {
            walk: RotatedRandomWalk::new(&u)?,
            factor: Some(SpdFactor::new(&u)?),
        })
    }
}

/// Run the calibration sampler. `z` and `ens` must be on the scale the
/// emulator was fitted on.
pub fn calibrate(
    z: &FieldData,
    emu: &EmulatorDraws,
    ens: &TrainingEnsemble,
    cfg: &CalibConfig,
) -> Result<CalibrationDraws> {
    let d = ens.design.dims();
    cfg.validate(d)?;
    z.check_against(ens)?;
    if emu.is_empty() {
        return Err(invalid("the emulator draw store is empty"));
    }
    let p = emu.p;
    let horizon = emu.horizon;
    let sites = ens.n_sites();
    let z_model = &z.z[p..];
    let lags = LagSource::Recursive(z.z[..p].to_vec());
    let sample_rho = cfg.bias_enabled && matches!(ens.domain, SpatialDomain::Points(_));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut eta = cfg.init_eta.clone().unwrap_or_else(|| vec![0.5; d]);
    let mut rho = vec![cfg.init_rho; ens.domain.omega_dims().max(1)];
    let mut bias = BiasModel::new(&ens.domain, &rho, cfg.bias_enabled)?;
    let mut u = vec![DVector::zeros(sites); horizon + 1];
    let mut nu = vec![cfg.d0 / cfg.n0; horizon + 1];
    let c0 = if cfg.bias_enabled { cfg.c0 } else { 0.0 };
    let m0 = DVector::zeros(sites);

    let mut eta_step = Step::new(cfg.eps3, cfg.mcmc.adapt);
    let mut rho_step = Step::new(cfg.eps_rho, cfg.mcmc.adapt);
    let n_draws = emu.len();
    let mut out = CalibrationDraws {
        eta: Vec::new(),
        rho: Vec::new(),
        u: Vec::new(),
        nu: Vec::new(),
        rep_mean: Vec::new(),
        rep_var: Vec::new(),
        acceptance_eta: 0.0,
        acceptance_rho: 0.0,
        wraps: 0,
        clamped: 0,
    };

    for it in 0..cfg.mcmc.n_samples {
        let pos = cfg.draw_offset + it * cfg.draw_stride;
        if it > 0 && pos / n_draws > (pos - cfg.draw_stride) / n_draws {
            out.wraps += 1;
        }
        let predictor = DrawPredictor::new(&emu.draws[pos % n_draws], ens, p)?;

        let cur = predictor.predict(&eta, &lags)?;
        let cur_ll = calib_loglik(z_model, &cur, &u, &nu);
        if !cur_ll.is_finite() {
            return Err(numeric(format!(
                "calibration log-likelihood is {cur_ll} at iteration {it}"
            )));
        }
        let prop = logit_proposal(&eta, eta_step.eps, &mut rng);
        let mut pred = cur;
        let mut ok = false;
        if prop.iter().all(|e| *e > 0.0 && *e < 1.0) {
            let cand = predictor.predict(&prop, &lags)?;
            let new_ll = calib_loglik(z_model, &cand, &u, &nu);
            if new_ll.is_finite()
                && accept(new_ll - cur_ll + logit_correction(&prop, &eta), &mut rng)
            {
                eta = prop;
                pred = cand;
                ok = true;
            }
        }
        eta_step.record(ok, it, cfg.mcmc.burn_in);
        out.clamped += pred.clamped;

        let resid: Vec<DVector<f64>> = (0..horizon)
            .map(|t| DVector::from_fn(sites, |s, _| z_model[t][s] - pred.mean[t][s]))
            .collect();

        if sample_rho {
            let prop = log_scale_proposal(&rho, rho_step.eps, &mut rng);
            let cur_factor = bias
                .factor
                .as_ref()
                .expect("bias factor present when enabled");
            let cur_ll = bias_walk_loglik(cur_factor, &u, &nu);
            let mut ok = false;
            if let Ok(cand) = BiasModel::new(&ens.domain, &prop, true) {
                let new_ll = bias_walk_loglik(cand.factor.as_ref().expect("enabled"), &u, &nu);
                if new_ll.is_finite()
                    && accept(
                        new_ll - cur_ll + log_scale_correction(&prop, &rho, &cfg.rho_prior),
                        &mut rng,
                    )
                {
                    rho = prop;
                    bias = cand;
                    ok = true;
                }
            }
            rho_step.record(ok, it, cfg.mcmc.burn_in);
        }

        let filt = bias.walk.filter(&resid, cfg.b, &m0, c0, cfg.n0, cfg.d0)?;
        let draw = bias.walk.backward_sample(&filt, &mut rng)?;
        u = draw.theta;
        nu = draw.v;

        if cfg.mcmc.keep(it) {
            out.rep_mean.push(
                (0..horizon)
                    .map(|t| (0..sites).map(|s| pred.mean[t][s] + u[t + 1][s]).collect())
                    .collect(),
            );
            out.rep_var.push(
                (0..horizon)
                    .map(|t| (0..sites).map(|s| pred.var[t][s] + nu[t + 1]).collect())
                    .collect(),
            );
            out.eta.push(eta.clone());
            out.rho.push(rho.clone());
            out.u.push(u.clone());
            out.nu.push(nu.clone());
        }
    }
    out.acceptance_eta = eta_step.acceptance_rate();
    out.acceptance_rho = if sample_rho {
        rho_step.acceptance_rate()
    } else {
        0.0
    };
    Ok(out)
}

/// Replicate mean and SD per `[t][site]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplicateMoments {
    pub mu: Vec<Vec<f64>>,
    pub sigma: Vec<Vec<f64>>,
}

/// Draw `reps` replicates `z_rep ~ N(μ̃ + u, ν + σ̃²)` per retained sample and
/// summarize them by their mean and SD.
pub fn posterior_replicates(
    draws: &CalibrationDraws,
    reps: usize,
    seed: u64,
) -> Result<ReplicateMoments> {
    if draws.rep_mean.is_empty() || reps == 0 {
        return Err(invalid(
            "posterior replicates need at least one draw and one replicate",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let horizon = draws.rep_mean[0].len();
    let sites = draws.rep_mean[0][0].len();
    let mut sum = vec![vec![0.0; sites]; horizon];
    let mut sq = vec![vec![0.0; sites]; horizon];
    for (mean, var) in draws.rep_mean.iter().zip(&draws.rep_var) {
        for t in 0..horizon {
            for s in 0..sites {
                for _ in 0..reps {
                    let x = mean[t][s]
                        + var[t][s].max(0.0).sqrt() * rng.sample::<f64, _>(StandardNormal);
                    sum[t][s] += x;
                    sq[t][s] += x * x;
                }
            }
        }
    }
    let n = (draws.rep_mean.len() * reps) as f64;
    let mu: Vec<Vec<f64>> = sum
        .iter()
        .map(|r| r.iter().map(|v| v / n).collect())
        .collect();
    let sigma = sq
        .iter()
        .zip(&mu)
        .map(|(r, m)| {
            r.iter()
                .zip(m)
                .map(|(q, mu)| (q / n - mu * mu).max(0.0).sqrt())
                .collect()
        })
        .collect();
    Ok(ReplicateMoments { mu, sigma })
}

/// Exact mean and SD of the equal-weight Gaussian mixture over retained samples.
pub fn mixture_moments(draws: &CalibrationDraws) -> Result<ReplicateMoments> {
    if draws.rep_mean.is_empty() {
        return Err(invalid("no retained draws"));
    }
    let n = draws.rep_mean.len() as f64;
    let horizon = draws.rep_mean[0].len();
    let sites = draws.rep_mean[0][0].len();
    let mut mu = vec![vec![0.0; sites]; horizon];
    let mut second = vec![vec![0.0; sites]; horizon];
    for (mean, var) in draws.rep_mean.iter().zip(&draws.rep_var) {
        for t in 0..horizon {
            for s in 0..sites {
                mu[t][s] += mean[t][s] / n;
                second[t][s] += (var[t][s] + mean[t][s] * mean[t][s]) / n;
            }
        }
    }
    let sigma = second
        .iter()
        .zip(&mu)
        .map(|(q, m)| {
            q.iter()
                .zip(m)
                .map(|(q, m)| (q - m * m).max(0.0).sqrt())
                .collect()
        })
        .collect();
    Ok(ReplicateMoments { mu, sigma })
}

/// Central `level` posterior interval of each `η` coordinate.
pub fn eta_intervals(draws: &CalibrationDraws, level: f64) -> Vec<(f64, f64)> {
    let d = draws.eta.first().map_or(0, |e| e.len());
    (0..d)
        .map(|i| {
            let mut xs: Vec<f64> = draws.eta.iter().map(|e| e[i]).collect();
            xs.sort_by(f64::total_cmp);
            let q = |a: f64| xs[((a * (xs.len() - 1) as f64).round() as usize).min(xs.len() - 1)];
            ((q((1.0 - level) / 2.0)), q((1.0 + level) / 2.0))
        })
        .collect()
}
