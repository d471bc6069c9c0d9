//! Spatiotemporal state-space Gaussian-process (SSGP) emulator.
//!
//! At each location `s` the training outputs across runs follow
//!
//! ```text
//! y_t(s) = F_t(s) θ_t(s) + ε_t(s),   ε_t(s) ~ N(0, v_t V(β))
//! θ_t    = θ_{t-1} + τ_t,            τ_t ~ N(0, v_t W(ψ))
//! ```
//!
//! where `F_t(s)` holds the AR(p) lags of every run, `V(β)` is the
//! squared-exponential correlation over simulator inputs and `W(ψ)` couples
//! the latent coefficients across locations.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::DesignSet;
use crate::error::{dim, invalid, numeric, Error, Result};
use crate::kernels::{
    coincident_index, corr_from_cov, corr_matrix, corr_vector, graph_corr, sq_exp_corr, CrossCovT,
    KnotSet, PredictiveProcess,
};
use crate::linalg::{sample_mvn, symmetrize, tr_mul, wishart_draw, SpdFactor, JITTER};
use crate::mcmc::{accept, log_scale_correction, log_scale_proposal, LogNormalPrior, Step};
use crate::rng::stream_rng;
use crate::ssm::{
    ffbs, NgPrior, Observation, Smoother, SsmSpec, StateDraw, StateNoise, Transition,
};

/// Where the outputs live.
#[derive(Clone, Debug, PartialEq)]
pub enum SpatialDomain {
    /// Coordinates of each location.
    Points(Vec<Vec<f64>>),
    /// Nodes of a graph given by its 0/1 adjacency matrix.
    Graph(DMatrix<f64>),
}

impl SpatialDomain {
    pub fn n_sites(&self) -> usize {
        match self {
            SpatialDomain::Points(c) => c.len(),
            SpatialDomain::Graph(a) => a.nrows(),
        }
    }

    pub fn coords(&self) -> Option<&[Vec<f64>]> {
        match self {
            SpatialDomain::Points(c) => Some(c),
            SpatialDomain::Graph(_) => None,
        }
    }

    /// Dimension of the spatial range vector `Ω` (zero for graphs).
    pub fn omega_dims(&self) -> usize {
        match self {
            SpatialDomain::Points(c) => c.first().map_or(0, |x| x.len()),
            SpatialDomain::Graph(_) => 0,
        }
    }
}

/// Simulator outputs indexed by time, run and location.
#[derive(Clone, Debug)]
pub struct TrainingEnsemble {
    /// `values[t]` is the `N x S` matrix of outputs at time `t + 1`.
    pub values: Vec<DMatrix<f64>>,
    pub design: DesignSet,
    pub domain: SpatialDomain,
}

impl TrainingEnsemble {
    pub fn new(
        values: Vec<DMatrix<f64>>,
        design: DesignSet,
        domain: SpatialDomain,
    ) -> Result<Self> {
        let ens = Self {
            values,
            design,
            domain,
        };
        ens.validate()?;
        Ok(ens)
    }

    pub fn validate(&self) -> Result<()> {
        let (n, s) = (self.design.n_runs(), self.domain.n_sites());
        if n < 2 {
            return Err(invalid("the ensemble needs at least two runs"));
        }
        if self.values.len() < 2 {
            return Err(invalid("the ensemble needs at least two time points"));
        }
        for (t, m) in self.values.iter().enumerate() {
            if m.shape() != (n, s) {
                return Err(dim(format!(
                    "outputs at time {} are {:?}, expected ({n}, {s})",
                    t + 1,
                    m.shape()
                )));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(invalid(format!(
                    "outputs at time {} contain missing or non-finite values",
                    t + 1
                )));
            }
        }
        Ok(())
    }

    pub fn n_runs(&self) -> usize {
        self.design.n_runs()
    }

    pub fn n_sites(&self) -> usize {
        self.domain.n_sites()
    }

    pub fn n_times(&self) -> usize {
        self.values.len()
    }

    /// Unit-cube inputs, one per run.
    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.design.unit
    }

    /// Outputs of every run at location `s`, time `t` (1-based).
    pub fn at(&self, t: usize, s: usize) -> DVector<f64> {
        self.values[t - 1].column(s).into_owned()
    }

    /// Full series of run `k` as `[time][site]`.
    pub fn run_series(&self, k: usize) -> Vec<Vec<f64>> {
        self.values
            .iter()
            .map(|m| m.row(k).iter().copied().collect())
            .collect()
    }

    /// Mean over runs as `[time][site]`.
    pub fn mean_series(&self) -> Vec<Vec<f64>> {
        let n = self.n_runs() as f64;
        self.values
            .iter()
            .map(|m| m.row_sum().iter().map(|v| v / n).collect())
            .collect()
    }

    /// Standardize each location to mean 0 and SD 1 over runs and times.
    pub fn standardized(&self) -> (Self, OutputScaling) {
        let scaling = OutputScaling::fit(&self.values);
        let values = self
            .values
            .iter()
            .map(|m| scaling.forward_matrix(m))
            .collect();
        (
            Self {
                values,
                design: self.design.clone(),
                domain: self.domain.clone(),
            },
            scaling,
        )
    }
}

/// Per-location affine output transform.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputScaling {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl OutputScaling {
    /// Mean and SD per location over all runs and times; a zero SD maps to 1.
    pub fn fit(values: &[DMatrix<f64>]) -> Self {
        let s = values[0].ncols();
        let count = (values.len() * values[0].nrows()) as f64;
        let mut mean = vec![0.0; s];
        let mut sd = vec![0.0; s];
        for j in 0..s {
            let mu = values.iter().map(|m| m.column(j).sum()).sum::<f64>() / count;
            let var = values
                .iter()
                .map(|m| m.column(j).iter().map(|v| (v - mu).powi(2)).sum::<f64>())
                .sum::<f64>()
                / count;
            mean[j] = mu;
            sd[j] = if var > 0.0 { var.sqrt() } else { 1.0 };
        }
        Self { mean, sd }
    }

    pub fn identity(s: usize) -> Self {
        Self {
            mean: vec![0.0; s],
            sd: vec![1.0; s],
        }
    }

    pub fn forward(&self, s: usize, x: f64) -> f64 {
        (x - self.mean[s]) / self.sd[s]
    }

    pub fn backward(&self, s: usize, x: f64) -> f64 {
        x * self.sd[s] + self.mean[s]
    }

    fn forward_matrix(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| self.forward(j, m[(i, j)]))
    }

    /// Apply to a `[time][site]` series.
    pub fn forward_series(&self, z: &[Vec<f64>]) -> Vec<Vec<f64>> {
        z.iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .map(|(s, &v)| self.forward(s, v))
                    .collect()
            })
            .collect()
    }
}

/// `N x p` matrix whose row `i` is `(y_{t-1}(s, x_i), ..., y_{t-p}(s, x_i))`;
/// `t` is 1-based and must exceed `p`.
pub fn build_ar_design(
    ens: &TrainingEnsemble,
    t: usize,
    s: usize,
    p: usize,
) -> Result<DMatrix<f64>> {
    if p == 0 {
        return Err(invalid("AR order must be at least 1"));
    }
    if t <= p || t > ens.n_times() {
        return Err(invalid(format!(
            "time {t} has no complete AR({p}) lags in a series of length {}",
            ens.n_times()
        )));
    }
    if s >= ens.n_sites() {
        return Err(invalid(format!("location {s} out of range")));
    }
    let n = ens.n_runs();
    Ok(DMatrix::from_fn(n, p, |i, k| ens.values[t - 2 - k][(i, s)]))
}

#[derive(Clone, Debug, PartialEq)]
pub enum EmulatorMode {
    Spatial,
    Heterogeneous,
    PredictiveProcess(KnotSet),
}

impl EmulatorMode {
    pub fn name(&self) -> &'static str {
        match self {
            EmulatorMode::Spatial => "spatial",
            EmulatorMode::Heterogeneous => "heterogeneous",
            EmulatorMode::PredictiveProcess(_) => "predictive_process",
        }
    }
}

/// Evolution correlation of each independent site in heterogeneous mode.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeteroEvolution {
    /// `W_t(s) = (1 - δ)/δ · M_{t-1}(s)`.
    Discount(f64),
    /// `W(s) = h(T)`, the spatial-mode block for a single location.
    Fixed,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McmcSettings {
    /// Total iterations, burn-in included.
    pub n_samples: usize,
    pub burn_in: usize,
    pub thin: usize,
    /// Tune random-walk steps towards 30% acceptance during burn-in.
    pub adapt: bool,
}

impl Default for McmcSettings {
    fn default() -> Self {
        Self {
            n_samples: 10_000,
            burn_in: 2_000,
            thin: 10,
            adapt: true,
        }
    }
}

impl McmcSettings {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples <= self.burn_in {
            return Err(invalid(format!(
                "n_samples ({}) must exceed burn_in ({})",
                self.n_samples, self.burn_in
            )));
        }
        if self.thin == 0 {
            return Err(invalid("thin must be at least 1"));
        }
        Ok(())
    }

    pub fn keep(&self, it: usize) -> bool {
        it >= self.burn_in && (it - self.burn_in).is_multiple_of(self.thin)
    }

    pub fn n_kept(&self) -> usize {
        (self.n_samples - self.burn_in).div_ceil(self.thin)
    }
}

/// Normal-Gamma prior settings for `(θ_0, 1/v_0)`: `m0` on the first lag
/// coefficient (others zero), `M0 = big_m0 · I`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NgSettings {
    pub m0: f64,
    pub big_m0: f64,
    pub n0: f64,
    pub d0: f64,
}

impl Default for NgSettings {
    fn default() -> Self {
        Self {
            m0: 1.0,
            big_m0: 10.0,
            n0: 1.0,
            d0: 1.0,
        }
    }
}

impl NgSettings {
    fn prior(&self, sites: usize, p: usize) -> NgPrior {
        let m0 = DVector::from_fn(sites * p, |i, _| if i % p == 0 { self.m0 } else { 0.0 });
        NgPrior::new(
            m0,
            DMatrix::identity(sites * p, sites * p) * self.big_m0,
            self.n0,
            self.d0,
        )
    }
}

#[derive(Clone, Debug)]
pub struct EmulatorConfig {
    pub mode: EmulatorMode,
    /// Precision discount `ω`.
    pub omega: f64,
    /// AR order.
    pub p: usize,
    pub mcmc: McmcSettings,
    /// Log-scale random-walk step for `Ω`.
    pub eps1: f64,
    /// Log-scale random-walk step for `β`.
    pub eps2: f64,
    /// Inverse-Wishart parameter expansion for `T`; `None` keeps `T = I`.
    pub t_prior: Option<CrossCovT>,
    pub hyper_prior: LogNormalPrior,
    pub hetero_evolution: HeteroEvolution,
    pub smoother: Smoother,
    pub ng: NgSettings,
    pub init_beta: f64,
    pub init_omega: f64,
    pub seed: u64,
}

impl Default for EmulatorConfig {
    fn default() -> Self {
        Self {
            mode: EmulatorMode::Spatial,
            omega: 0.95,
            p: 1,
            mcmc: McmcSettings::default(),
            eps1: 0.2,
            eps2: 0.2,
            t_prior: None,
            hyper_prior: LogNormalPrior::default(),
            hetero_evolution: HeteroEvolution::Discount(0.95),
            smoother: Smoother::Conditional,
            ng: NgSettings::default(),
            init_beta: 1.0,
            init_omega: 1.0,
            seed: 0,
        }
    }
}

impl EmulatorConfig {
    pub fn validate(&self, ens: &TrainingEnsemble) -> Result<()> {
        self.mcmc.validate()?;
        if !(self.eps1 > 0.0 && self.eps2 > 0.0) {
            return Err(invalid("MH step sizes must be positive"));
        }
        if !(self.omega > 0.0 && self.omega <= 1.0) {
            return Err(invalid("discount omega must lie in (0, 1]"));
        }
        if self.p == 0 || ens.n_times() <= self.p {
            return Err(invalid(format!(
                "need more than p = {} time points, have {}",
                self.p,
                ens.n_times()
            )));
        }
        if let HeteroEvolution::Discount(d) = self.hetero_evolution {
            if !(d > 0.0 && d <= 1.0) {
                return Err(invalid("heterogeneous discount must lie in (0, 1]"));
            }
        }
        if let Some(tp) = &self.t_prior {
            tp.validate()?;
            if tp.t.nrows() != self.p {
                return Err(dim("T must be p x p"));
            }
        }
        if !(self.init_beta > 0.0 && self.init_omega > 0.0) {
            return Err(invalid("initial range parameters must be positive"));
        }
        if let EmulatorMode::PredictiveProcess(knots) = &self.mode {
            knots.validate()?;
            if ens.domain.coords().is_none() {
                return Err(invalid(
                    "the predictive process needs coordinates, not a graph",
                ));
            }
            if knots.len() > ens.n_sites() {
                return Err(invalid("more knots than locations"));
            }
            if knots
                .knots
                .iter()
                .any(|k| k.len() != ens.domain.omega_dims())
            {
                return Err(dim("knot dimension differs from location dimension"));
            }
        }
        Ok(())
    }
}

/// One retained posterior sample.
#[derive(Clone, Debug, PartialEq)]
pub struct EmulatorDraw {
    /// Input-space decay rates: one vector when shared, one per site in
    /// heterogeneous mode.
    pub beta: Vec<Vec<f64>>,
    /// Spatial decay rates (empty for graphs and heterogeneous fits).
    pub omega_sp: Vec<f64>,
    /// Identified correlation `h(T)`.
    pub h_t: DMatrix<f64>,
    /// `θ_t` for modelled times `t = 0..T-p`, site-major `pS` vectors.
    pub theta: Vec<DVector<f64>>,
    /// `v[t][g]`: one variance per group (shared, or per site).
    pub v: Vec<Vec<f64>>,
}

impl EmulatorDraw {
    pub fn group(&self, s: usize) -> usize {
        if self.beta.len() == 1 {
            0
        } else {
            s
        }
    }

    pub fn v_at(&self, t: usize, s: usize) -> f64 {
        self.v[t][self.group(s)]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Acceptance {
    pub beta: f64,
    pub omega: f64,
}

#[derive(Clone, Debug)]
pub struct EmulatorDraws {
    pub mode: EmulatorMode,
    pub p: usize,
    pub n_sites: usize,
    /// Number of modelled times, `T - p`.
    pub horizon: usize,
    pub draws: Vec<EmulatorDraw>,
    pub acceptance: Acceptance,
}

impl EmulatorDraws {
    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }
}

/// Stacked observations and lag blocks for modelled times `p+1..T`.
struct Layout {
    n: usize,
    sites: usize,
    p: usize,
    horizon: usize,
    y: Vec<DVector<f64>>,
    f: Vec<Vec<DMatrix<f64>>>,
}

impl Layout {
    fn new(ens: &TrainingEnsemble, p: usize, sites: &[usize]) -> Result<Self> {
        let n = ens.n_runs();
        let horizon = ens.n_times() - p;
        let mut y = Vec::with_capacity(horizon);
        let mut f = Vec::with_capacity(horizon);
        for t in (p + 1)..=ens.n_times() {
            let mut stacked = DVector::zeros(n * sites.len());
            let mut blocks = Vec::with_capacity(sites.len());
            for (k, &s) in sites.iter().enumerate() {
                stacked.rows_mut(k * n, n).copy_from(&ens.at(t, s));
                blocks.push(build_ar_design(ens, t, s, p)?);
            }
            y.push(stacked);
            f.push(blocks);
        }
        Ok(Self {
            n,
            sites: sites.len(),
            p,
            horizon,
            y,
            f,
        })
    }

    /// `y_t(s) - F_t(s) θ_t(s)` as an `N x (S·horizon)` matrix, column
    /// `(t-1)·S + s`.
    fn residuals(&self, theta: &[DVector<f64>]) -> DMatrix<f64> {
        let mut e = DMatrix::zeros(self.n, self.sites * self.horizon);
        for t in 0..self.horizon {
            for s in 0..self.sites {
                let th = theta[t + 1].rows(s * self.p, self.p);
                let col = self.y[t].rows(s * self.n, self.n) - &self.f[t][s] * th;
                e.set_column(t * self.sites + s, &col);
            }
        }
        e
    }
}

/// `V(β) + jitter`, with the jitter escalated if the first attempt fails.
struct InputCorr {
    v: DMatrix<f64>,
    factor: SpdFactor,
}

impl InputCorr {
    fn new(inputs: &[Vec<f64>], beta: &[f64]) -> Result<Self> {
        let raw = corr_matrix(inputs, beta)?;
        let factor = SpdFactor::with_jitter(&raw, JITTER)
            .map_err(|e| numeric(format!("input correlation V(beta): {e}")))?;
        let mut v = raw;
        for i in 0..v.nrows() {
            v[(i, i)] += factor.jitter();
        }
        Ok(Self { v, factor })
    }

    /// `Σ_cols log N(e | 0, v V)` with `v` looked up per column.
    fn loglik(&self, e: &DMatrix<f64>, v_of_col: impl Fn(usize) -> f64) -> f64 {
        let white = self.factor.half_solve_mat(e);
        let n = e.nrows() as f64;
        (0..e.ncols())
            .map(|c| {
                let v = v_of_col(c);
                -0.5 * (n * (crate::linalg::ln_2pi() + v.ln())
                    + self.factor.log_det()
                    + white.column(c).norm_squared() / v)
            })
            .sum()
    }
}

/// `W(ψ) + jitter` with its factor.
struct Evolution {
    w: DMatrix<f64>,
    factor: SpdFactor,
}

impl Evolution {
    fn new(
        domain: &SpatialDomain,
        mode: &EmulatorMode,
        omega: &[f64],
        h_t: &DMatrix<f64>,
    ) -> Result<Self> {
        let raw = evolution_corr(domain, mode, omega, h_t)?;
        let factor = SpdFactor::with_jitter(&raw, JITTER)
            .map_err(|e| numeric(format!("state correlation W(psi): {e}")))?;
        let mut w = raw;
        for i in 0..w.nrows() {
            w[(i, i)] += factor.jitter();
        }
        Ok(Self { w, factor })
    }

    /// `Σ_t log N(θ_t | θ_{t-1}, v_t W)`.
    fn loglik(&self, theta: &[DVector<f64>], v: &[f64]) -> f64 {
        let k = self.w.nrows();
        let horizon = theta.len() - 1;
        let diffs = DMatrix::from_fn(k, horizon, |i, t| theta[t + 1][i] - theta[t][i]);
        let white = self.factor.half_solve_mat(&diffs);
        (0..horizon)
            .map(|t| {
                let vt = v[t + 1];
                -0.5 * (k as f64 * (crate::linalg::ln_2pi() + vt.ln())
                    + self.factor.log_det()
                    + white.column(t).norm_squared() / vt)
            })
            .sum()
    }
}

/// Latent correlation `W(ψ)` (without jitter) for a domain and mode.
pub fn evolution_corr(
    domain: &SpatialDomain,
    mode: &EmulatorMode,
    omega: &[f64],
    h_t: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    match (mode, domain) {
        (EmulatorMode::PredictiveProcess(knots), SpatialDomain::Points(c)) => {
            PredictiveProcess::new(knots, omega, h_t)?.corr_matrix(c)
        }
        (EmulatorMode::PredictiveProcess(_), SpatialDomain::Graph(_)) => {
            Err(invalid("the predictive process needs coordinates"))
        }
        (_, SpatialDomain::Points(c)) => Ok(corr_matrix(c, omega)?.kronecker(h_t)),
        (_, SpatialDomain::Graph(a)) => Ok(graph_corr(a)?.kronecker(h_t)),
    }
}

fn not_finite(what: &str, it: usize, value: f64) -> Error {
    numeric(format!(
        "{what} log-likelihood is {value} at iteration {it}"
    ))
}

/// Fit the emulator; dispatches to the heterogeneous sampler when asked.
pub fn fit_emulator(ens: &TrainingEnsemble, cfg: &EmulatorConfig) -> Result<EmulatorDraws> {
    cfg.validate(ens)?;
    if cfg.mode == EmulatorMode::Heterogeneous {
        return fit_heterogeneous(ens, cfg);
    }
    let sites: Vec<usize> = (0..ens.n_sites()).collect();
    let layout = Layout::new(ens, cfg.p, &sites)?;
    let d = ens.design.dims();
    let inputs = ens.inputs();
    let sample_omega = ens.domain.omega_dims() > 0;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut beta = vec![cfg.init_beta; d];
    let mut omega = vec![cfg.init_omega; ens.domain.omega_dims()];
    let mut t_cov = cfg
        .t_prior
        .as_ref()
        .map_or_else(|| DMatrix::identity(cfg.p, cfg.p), |tp| tp.t.clone());
    let mut h_t = corr_from_cov(&t_cov)?;
    let mut vcorr = InputCorr::new(inputs, &beta)?;
    let mut evo = Evolution::new(&ens.domain, &cfg.mode, &omega, &h_t)?;
    let mut spec = SsmSpec {
        obs: Observation::SiteBlocks {
            f: layout.f.clone(),
            v: vcorr.v.clone(),
        },
        transition: Transition::Identity,
        state_noise: StateNoise::Fixed(evo.w.clone()),
        omega: cfg.omega,
        prior: cfg.ng.prior(layout.sites, cfg.p),
    };
    let (mut state, _) = ffbs(&layout.y, &spec, cfg.smoother, &mut rng)?;
    let mut omega_step = Step::new(cfg.eps1, cfg.mcmc.adapt);
    let mut beta_step = Step::new(cfg.eps2, cfg.mcmc.adapt);
    let mut draws = Vec::with_capacity(cfg.mcmc.n_kept());

    for it in 0..cfg.mcmc.n_samples {
        if sample_omega {
            let prop = log_scale_proposal(&omega, omega_step.eps, &mut rng);
            let cur_ll = evo.loglik(&state.theta, &state.v);
            let (ok, new_evo) = match Evolution::new(&ens.domain, &cfg.mode, &prop, &h_t) {
                Ok(new_evo) => {
                    let new_ll = new_evo.loglik(&state.theta, &state.v);
                    if !cur_ll.is_finite() {
                        return Err(not_finite("state evolution", it, cur_ll));
                    }
                    let ratio =
                        new_ll - cur_ll + log_scale_correction(&prop, &omega, &cfg.hyper_prior);
                    (new_ll.is_finite() && accept(ratio, &mut rng), Some(new_evo))
                }
                Err(_) => (false, None),
            };
            if ok {
                omega = prop;
                evo = new_evo.expect("accepted proposals are factored");
            }
            omega_step.record(ok, it, cfg.mcmc.burn_in);
        }

        let resid = layout.residuals(&state.theta);
        let sites_n = layout.sites;
        let v_col = |c: usize| state.v[c / sites_n + 1];
        let prop = log_scale_proposal(&beta, beta_step.eps, &mut rng);
        let cur_ll = vcorr.loglik(&resid, v_col);
        if !cur_ll.is_finite() {
            return Err(not_finite("input-space", it, cur_ll));
        }
        let mut ok = false;
        if let Ok(new_v) = InputCorr::new(inputs, &prop) {
            let new_ll = new_v.loglik(&resid, v_col);
            let ratio = new_ll - cur_ll + log_scale_correction(&prop, &beta, &cfg.hyper_prior);
            if new_ll.is_finite() && accept(ratio, &mut rng) {
                beta = prop;
                vcorr = new_v;
                ok = true;
            }
        }
        beta_step.record(ok, it, cfg.mcmc.burn_in);

        if let Some(tp) = &cfg.t_prior {
            t_cov = draw_cross_cov(tp, &state.theta, cfg.p, layout.sites, &mut rng)?;
            h_t = corr_from_cov(&t_cov)?;
            evo = Evolution::new(&ens.domain, &cfg.mode, &omega, &h_t)?;
        }

        if let Observation::SiteBlocks { v, .. } = &mut spec.obs {
            v.copy_from(&vcorr.v);
        }
        spec.state_noise = StateNoise::Fixed(evo.w.clone());
        state = ffbs(&layout.y, &spec, cfg.smoother, &mut rng)
            .map_err(|e| numeric(format!("FFBS failed at iteration {it}: {e}")))?
            .0;

        if cfg.mcmc.keep(it) {
            draws.push(EmulatorDraw {
                beta: vec![beta.clone()],
                omega_sp: omega.clone(),
                h_t: h_t.clone(),
                theta: state.theta.clone(),
                v: state.v.iter().map(|&x| vec![x]).collect(),
            });
        }
    }
    let _ = t_cov;
    Ok(EmulatorDraws {
        mode: cfg.mode.clone(),
        p: cfg.p,
        n_sites: layout.sites,
        horizon: layout.horizon,
        draws,
        acceptance: Acceptance {
            beta: beta_step.acceptance_rate(),
            omega: omega_step.acceptance_rate(),
        },
    })
}

/// Parameter-expansion step: with `SS = Σ_t Σ_s Δθ_t(s) Δθ_t(s)'`, draw
/// `T^{-1} ~ W(ν0 + T/2, T0 + SS/2)` in the shape/rate form, i.e. a Wishart
/// with `2ν0 + T` degrees of freedom and scale `(2 T0 + SS)^{-1}`.
fn draw_cross_cov(
    tp: &CrossCovT,
    theta: &[DVector<f64>],
    p: usize,
    sites: usize,
    rng: &mut ChaCha8Rng,
) -> Result<DMatrix<f64>> {
    let horizon = theta.len() - 1;
    let mut ss = DMatrix::zeros(p, p);
    for t in 1..=horizon {
        for s in 0..sites {
            let d = theta[t].rows(s * p, p) - theta[t - 1].rows(s * p, p);
            ss += &d * d.transpose();
        }
    }
    let rate = &tp.prior_scale + ss * 0.5;
    let scale = SpdFactor::new(&(rate * 2.0))?.inverse();
    let precision = wishart_draw(2.0 * tp.prior_dof + horizon as f64, &scale, rng)?;
    Ok(SpdFactor::new(&precision)?.inverse())
}

struct SiteChain {
    beta: Vec<Vec<f64>>,
    theta: Vec<Vec<DVector<f64>>>,
    v: Vec<Vec<f64>>,
    acceptance: f64,
}

fn fit_site(ens: &TrainingEnsemble, cfg: &EmulatorConfig, s: usize) -> Result<SiteChain> {
    let layout = Layout::new(ens, cfg.p, &[s])?;
    let inputs = ens.inputs();
    let mut rng = stream_rng(cfg.seed, s as u64 + 1);
    let mut beta = vec![cfg.init_beta; ens.design.dims()];
    let mut vcorr = InputCorr::new(inputs, &beta)?;
    let state_noise = match cfg.hetero_evolution {
        HeteroEvolution::Discount(delta) => StateNoise::Discount(delta),
        HeteroEvolution::Fixed => {
            let t = cfg
                .t_prior
                .as_ref()
                .map_or_else(|| DMatrix::identity(cfg.p, cfg.p), |tp| tp.t.clone());
            let mut w = corr_from_cov(&t)?;
            for i in 0..cfg.p {
                w[(i, i)] += JITTER;
            }
            StateNoise::Fixed(w)
        }
    };
    let mut spec = SsmSpec {
        obs: Observation::SiteBlocks {
            f: layout.f.clone(),
            v: vcorr.v.clone(),
        },
        transition: Transition::Identity,
        state_noise,
        omega: cfg.omega,
        prior: cfg.ng.prior(1, cfg.p),
    };
    let fail = |it: usize, e: Error| numeric(format!("site {s}, iteration {it}: {e}"));
    let (mut state, _): (StateDraw, _) =
        ffbs(&layout.y, &spec, cfg.smoother, &mut rng).map_err(|e| fail(0, e))?;
    let mut step = Step::new(cfg.eps2, cfg.mcmc.adapt);
    let mut chain = SiteChain {
        beta: Vec::new(),
        theta: Vec::new(),
        v: Vec::new(),
        acceptance: 0.0,
    };
    for it in 0..cfg.mcmc.n_samples {
        let resid = layout.residuals(&state.theta);
        let v_col = |c: usize| state.v[c + 1];
        let prop = log_scale_proposal(&beta, step.eps, &mut rng);
        let cur_ll = vcorr.loglik(&resid, v_col);
        if !cur_ll.is_finite() {
            return Err(fail(it, not_finite("input-space", it, cur_ll)));
        }
        let mut ok = false;
        if let Ok(new_v) = InputCorr::new(inputs, &prop) {
            let new_ll = new_v.loglik(&resid, v_col);
            let ratio = new_ll - cur_ll + log_scale_correction(&prop, &beta, &cfg.hyper_prior);
            if new_ll.is_finite() && accept(ratio, &mut rng) {
                beta = prop;
                vcorr = new_v;
                ok = true;
            }
        }
        step.record(ok, it, cfg.mcmc.burn_in);
        if let Observation::SiteBlocks { v, .. } = &mut spec.obs {
            v.copy_from(&vcorr.v);
        }
        state = ffbs(&layout.y, &spec, cfg.smoother, &mut rng)
            .map_err(|e| fail(it, e))?
            .0;
        if cfg.mcmc.keep(it) {
            chain.beta.push(beta.clone());
            chain.theta.push(state.theta.clone());
            chain.v.push(state.v.clone());
        }
    }
    chain.acceptance = step.acceptance_rate();
    Ok(chain)
}

/// Independent per-location fits, run in parallel over locations.
pub fn fit_heterogeneous(ens: &TrainingEnsemble, cfg: &EmulatorConfig) -> Result<EmulatorDraws> {
    cfg.validate(ens)?;
    let sites = ens.n_sites();
    let chains: Vec<SiteChain> = (0..sites)
        .into_par_iter()
        .map(|s| fit_site(ens, cfg, s))
        .collect::<Result<_>>()?;
    let p = cfg.p;
    let horizon = ens.n_times() - p;
    let kept = chains[0].beta.len();
    let t = cfg
        .t_prior
        .as_ref()
        .map_or_else(|| DMatrix::identity(p, p), |tp| tp.t.clone());
    let h_t = corr_from_cov(&t)?;
    let draws = (0..kept)
        .map(|k| EmulatorDraw {
            beta: chains.iter().map(|c| c.beta[k].clone()).collect(),
            omega_sp: Vec::new(),
            h_t: h_t.clone(),
            theta: (0..=horizon)
                .map(|t| {
                    let mut th = DVector::zeros(sites * p);
                    for (s, c) in chains.iter().enumerate() {
                        th.rows_mut(s * p, p).copy_from(&c.theta[k][t]);
                    }
                    th
                })
                .collect(),
            v: (0..=horizon)
                .map(|t| chains.iter().map(|c| c.v[k][t]).collect())
                .collect(),
        })
        .collect();
    let acceptance = chains.iter().map(|c| c.acceptance).sum::<f64>() / sites as f64;
    Ok(EmulatorDraws {
        mode: EmulatorMode::Heterogeneous,
        p,
        n_sites: sites,
        horizon,
        draws,
        acceptance: Acceptance {
            beta: acceptance,
            omega: 0.0,
        },
    })
}

/// How lagged outputs at a new input are supplied to `f_t(s, η)`.
#[derive(Clone, Debug, PartialEq)]
pub enum LagSource {
    /// A full `[time][site]` series whose values are used as the lags.
    Given(Vec<Vec<f64>>),
    /// Feed back the emulator's own predictive means, starting from the
    /// first `p` values given as `[time][site]`.
    Recursive(Vec<Vec<f64>>),
}

/// Predictive moments for modelled times `p+1..T`, indexed `[t][site]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub mean: Vec<Vec<f64>>,
    pub var: Vec<Vec<f64>>,
    /// Number of variances clamped at zero after round-off.
    pub clamped: usize,
}

/// Precomputed pieces of one posterior draw for repeated prediction.
pub struct DrawPredictor<'a> {
    draw: &'a EmulatorDraw,
    inputs: &'a [Vec<f64>],
    p: usize,
    sites: usize,
    horizon: usize,
    factors: Vec<SpdFactor>,
    /// `resid[t][s] = y_t(s) - F_t(s) θ_t(s)`.
    resid: Vec<Vec<DVector<f64>>>,
}

/// Kriging weights `V^{-1} r(η)` and `r(η)' V^{-1} r(η)`.
fn kriging_weights(
    inputs: &[Vec<f64>],
    beta: &[f64],
    factor: &SpdFactor,
    eta: &[f64],
) -> Result<(DVector<f64>, f64)> {
    if let Some(k) = coincident_index(inputs, eta) {
        let mut w = DVector::zeros(inputs.len());
        w[k] = 1.0;
        return Ok((w, 1.0));
    }
    let r = corr_vector(inputs, eta, beta)?;
    let white = factor.half_solve(&r);
    Ok((factor.solve(&r), white.norm_squared()))
}

impl<'a> DrawPredictor<'a> {
    pub fn new(draw: &'a EmulatorDraw, ens: &'a TrainingEnsemble, p: usize) -> Result<Self> {
        let sites = ens.n_sites();
        let horizon = ens.n_times() - p;
        let inputs = ens.inputs();
        let factors = draw
            .beta
            .iter()
            .map(|b| InputCorr::new(inputs, b).map(|c| c.factor))
            .collect::<Result<Vec<_>>>()?;
        let mut resid = Vec::with_capacity(horizon);
        for t in 0..horizon {
            let mut row = Vec::with_capacity(sites);
            for s in 0..sites {
                let f = build_ar_design(ens, t + p + 1, s, p)?;
                row.push(ens.at(t + p + 1, s) - f * draw.theta[t + 1].rows(s * p, p));
            }
            resid.push(row);
        }
        Ok(Self {
            draw,
            inputs,
            p,
            sites,
            horizon,
            factors,
            resid,
        })
    }

    pub fn predict(&self, eta: &[f64], lags: &LagSource) -> Result<Prediction> {
        let weights = self
            .draw
            .beta
            .iter()
            .zip(&self.factors)
            .map(|(b, f)| kriging_weights(self.inputs, b, f, eta))
            .collect::<Result<Vec<_>>>()?;
        let (p, sites) = (self.p, self.sites);
        let mut history: Vec<Vec<f64>> = match lags {
            LagSource::Given(series) | LagSource::Recursive(series) => {
                if series.len() < p || series.iter().any(|r| r.len() != sites) {
                    return Err(dim(
                        "lag series must cover the first p times at every location",
                    ));
                }
                series[..p].to_vec()
            }
        };
        if let LagSource::Given(series) = lags {
            if series.len() < self.horizon + p - 1 {
                return Err(dim("given lag series is too short"));
            }
        }
        let mut out = Prediction {
            mean: Vec::with_capacity(self.horizon),
            var: Vec::with_capacity(self.horizon),
            clamped: 0,
        };
        for t in 0..self.horizon {
            let mut mean = vec![0.0; sites];
            let mut var = vec![0.0; sites];
            for s in 0..sites {
                let g = self.draw.group(s);
                let (w, q) = &weights[g];
                let th = self.draw.theta[t + 1].rows(s * p, p);
                let lag_at = |k: usize| match lags {
                    LagSource::Given(series) => series[t + p - 1 - k][s],
                    LagSource::Recursive(_) => history[t + p - 1 - k][s],
                };
                let fx: f64 = (0..p).map(|k| lag_at(k) * th[k]).sum();
                mean[s] = fx + w.dot(&self.resid[t][s]);
                let raw = self.draw.v[t + 1][g] * (1.0 - q);
                if raw < 0.0 {
                    out.clamped += 1;
                }
                var[s] = raw.max(0.0);
            }
            history.push(mean.clone());
            out.mean.push(mean);
            out.var.push(var);
        }
        Ok(out)
    }
}

/// Predictive moments at input `eta` (unit cube) for every retained draw.
pub fn emulator_predict(
    draws: &EmulatorDraws,
    ens: &TrainingEnsemble,
    eta: &[f64],
    lags: &LagSource,
) -> Result<Vec<Prediction>> {
    if eta.len() != ens.design.dims() {
        return Err(dim("eta dimension differs from the design"));
    }
    if eta.iter().any(|e| !(0.0..=1.0).contains(e)) {
        return Err(invalid("eta must lie in the unit cube"));
    }
    draws
        .draws
        .iter()
        .map(|d| DrawPredictor::new(d, ens, draws.p)?.predict(eta, lags))
        .collect()
}

/// Conditional moments of the latent state at a new location given the
/// sampled states at the observed locations.
#[derive(Clone, Debug)]
pub struct LatentKriging {
    exact: Option<usize>,
    /// `W^{-1} k(s*)`, `pS x p`.
    gain: DMatrix<f64>,
    /// `K(s*, s*) - k' W^{-1} k`.
    cond: DMatrix<f64>,
}

impl LatentKriging {
    pub fn new(
        domain: &SpatialDomain,
        mode: &EmulatorMode,
        omega: &[f64],
        h_t: &DMatrix<f64>,
        s_star: &[f64],
    ) -> Result<Self> {
        let p = h_t.nrows();
        let coords = match domain {
            SpatialDomain::Points(c) => c,
            SpatialDomain::Graph(_) => {
                return Err(invalid(
                    "graph nodes have no coordinates to interpolate between",
                ))
            }
        };
        if mode == &EmulatorMode::Heterogeneous {
            return Err(invalid(
                "the heterogeneous emulator has no spatial latent process",
            ));
        }
        if let Some(j) = coincident_index(coords, s_star) {
            return Ok(Self {
                exact: Some(j),
                gain: DMatrix::zeros(0, 0),
                cond: DMatrix::zeros(p, p),
            });
        }
        let evo = Evolution::new(domain, mode, omega, h_t)?;
        let sites = coords.len();
        let (k, k_star) = match mode {
            EmulatorMode::PredictiveProcess(knots) => {
                let pp = PredictiveProcess::new(knots, omega, h_t)?;
                let mut k = DMatrix::zeros(sites * p, p);
                for (i, c) in coords.iter().enumerate() {
                    k.view_mut((i * p, 0), (p, p))
                        .copy_from(&pp.block(c, s_star)?);
                }
                (k, pp.block(s_star, s_star)?)
            }
            _ => {
                let mut k = DMatrix::zeros(sites * p, p);
                for (i, c) in coords.iter().enumerate() {
                    k.view_mut((i * p, 0), (p, p))
                        .copy_from(&(h_t * sq_exp_corr(c, s_star, omega)?));
                }
                (k, h_t.clone())
            }
        };
        let gain = evo.factor.solve_mat(&k);
        let mut cond = k_star - tr_mul(&k, &gain);
        symmetrize(&mut cond);
        Ok(Self {
            exact: None,
            gain,
            cond,
        })
    }

    /// Conditional mean and (unscaled) covariance of `θ_t(s*)` given
    /// `θ_t`, `θ_{t-1}` and the previous interpolated value.
    pub fn moments(
        &self,
        theta_t: &DVector<f64>,
        theta_prev: Option<(&DVector<f64>, &DVector<f64>)>,
        p: usize,
    ) -> (DVector<f64>, DMatrix<f64>) {
        if let Some(j) = self.exact {
            return (theta_t.rows(j * p, p).into_owned(), self.cond.clone());
        }
        match theta_prev {
            Some((prev_all, prev_star)) => (
                prev_star
                    + tr_mul(
                        &self.gain,
                        &DMatrix::from_column_slice(
                            theta_t.len(),
                            1,
                            (theta_t - prev_all).as_slice(),
                        ),
                    )
                    .column(0),
                self.cond.clone(),
            ),
            None => (self.gain.transpose() * theta_t, self.cond.clone()),
        }
    }
}

/// Sequential draws of `θ_t(s*)`, `t = 0..T-p`, one trajectory per retained
/// draw. At `t = 0` the state is kriged directly from `θ_0`.
pub fn interpolate_latent(
    draws: &EmulatorDraws,
    domain: &SpatialDomain,
    s_star: &[f64],
    seed: u64,
) -> Result<Vec<Vec<DVector<f64>>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = draws.p;
    draws
        .draws
        .iter()
        .map(|d| {
            let kr = LatentKriging::new(domain, &draws.mode, &d.omega_sp, &d.h_t, s_star)?;
            let mut path: Vec<DVector<f64>> = Vec::with_capacity(d.theta.len());
            for t in 0..d.theta.len() {
                let prev = if t == 0 {
                    None
                } else {
                    Some((&d.theta[t - 1], &path[t - 1]))
                };
                let (mean, cov) = kr.moments(&d.theta[t], prev, p);
                path.push(sample_mvn(&mean, &cov, d.v[t][0], &mut rng));
            }
            Ok(path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::latin_hypercube;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn toy_ensemble(n: usize, sites: usize, times: usize, seed: u64) -> TrainingEnsemble {
        let design = latin_hypercube(n, 2, seed, false).unwrap();
        let coords: Vec<Vec<f64>> = (0..sites)
            .map(|s| vec![s as f64 / sites.max(1) as f64])
            .collect();
        let values = (0..times)
            .map(|t| {
                DMatrix::from_fn(n, sites, |i, s| {
                    let x = &design.unit[i];
                    (0.3 * t as f64 + 2.0 * x[0] + s as f64 * 0.2).sin() + x[1] * 0.5
                })
            })
            .collect();
        TrainingEnsemble::new(values, design, SpatialDomain::Points(coords)).unwrap()
    }

    fn quick(mode: EmulatorMode) -> EmulatorConfig {
        EmulatorConfig {
            mode,
            mcmc: McmcSettings {
                n_samples: 60,
                burn_in: 20,
                thin: 4,
                adapt: true,
            },
            seed: 3,
            ..Default::default()
        }
    }

    #[test]
    fn ar_design_rows_hold_lags() {
        let ens = toy_ensemble(3, 2, 4, 1);
        let f = build_ar_design(&ens, 3, 1, 2).unwrap();
        for i in 0..3 {
            assert_eq!(f[(i, 0)], ens.values[1][(i, 1)]);
            assert_eq!(f[(i, 1)], ens.values[0][(i, 1)]);
        }
        assert!(build_ar_design(&ens, 2, 0, 2).is_err());
        let one = build_ar_design(&ens, 2, 0, 1).unwrap();
        assert_eq!(one.column(0), ens.values[0].column(0));
    }

    #[test]
    fn constant_series_gives_constant_design() {
        let design = latin_hypercube(4, 1, 0, false).unwrap();
        let values = vec![DMatrix::from_element(4, 1, 2.5); 3];
        let ens =
            TrainingEnsemble::new(values, design, SpatialDomain::Points(vec![vec![0.0]])).unwrap();
        assert!(build_ar_design(&ens, 3, 0, 2)
            .unwrap()
            .iter()
            .all(|v| *v == 2.5));
    }

    #[test]
    fn standardization_is_per_location() {
        let ens = toy_ensemble(5, 3, 6, 2);
        let (std, scaling) = ens.standardized();
        for s in 0..3 {
            let vals: Vec<f64> = std
                .values
                .iter()
                .flat_map(|m| m.column(s).iter().copied().collect::<Vec<_>>())
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
            assert!(
                (scaling.backward(s, std.values[2][(1, s)]) - ens.values[2][(1, s)]).abs() < 1e-12
            );
        }
    }

    #[test]
    fn sampler_runs_in_every_mode() {
        let ens = toy_ensemble(8, 3, 6, 4).standardized().0;
        let knots = KnotSet {
            knots: vec![vec![0.0], vec![2.0 / 3.0]],
            placement: crate::kernels::KnotPlacement::Grid,
        };
        for mode in [
            EmulatorMode::Spatial,
            EmulatorMode::Heterogeneous,
            EmulatorMode::PredictiveProcess(knots),
        ] {
            let fit = fit_emulator(&ens, &quick(mode)).unwrap();
            assert_eq!(fit.draws.len(), 10);
            for d in &fit.draws {
                assert!(d.v.iter().flatten().all(|v| *v > 0.0));
                assert!(d.h_t.diagonal().iter().all(|x| *x == 1.0));
            }
        }
    }

    #[test]
    fn identical_runs_engage_jitter() {
        let design = DesignSet {
            unit: vec![vec![0.5], vec![0.5]],
            bounds: vec![(0.0, 1.0)],
            seed: 0,
        };
        let values = (0..5)
            .map(|t| DMatrix::from_element(2, 1, (t as f64).sin()))
            .collect();
        let ens =
            TrainingEnsemble::new(values, design, SpatialDomain::Points(vec![vec![0.0]])).unwrap();
        let fit = fit_emulator(&ens, &quick(EmulatorMode::Spatial)).unwrap();
        assert!(!fit.draws.is_empty());
    }

    #[test]
    fn inverse_wishart_step_reports_correlations() {
        let ens = toy_ensemble(6, 2, 6, 5).standardized().0;
        let mut cfg = quick(EmulatorMode::Spatial);
        cfg.p = 2;
        cfg.t_prior = Some(CrossCovT::identity(2));
        let fit = fit_emulator(&ens, &cfg).unwrap();
        for d in &fit.draws {
            assert!((d.h_t[(0, 0)] - 1.0).abs() < 1e-12 && (d.h_t[(1, 1)] - 1.0).abs() < 1e-12);
            assert!(d.h_t[(0, 1)].abs() < 1.0);
        }
    }

    #[test]
    fn scaled_cross_covariance_has_same_correlation() {
        let t = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 0.5]);
        assert_eq!(
            corr_from_cov(&t).unwrap(),
            corr_from_cov(&(&t * 4.0)).unwrap()
        );
    }

    #[test]
    fn prediction_interpolates_training_runs() {
        let ens = toy_ensemble(8, 2, 6, 6).standardized().0;
        let fit = fit_emulator(&ens, &quick(EmulatorMode::Spatial)).unwrap();
        for k in [0, 3, 7] {
            let lags = LagSource::Given(ens.run_series(k));
            for pred in emulator_predict(&fit, &ens, &ens.inputs()[k], &lags).unwrap() {
                for (t, (mrow, vrow)) in pred.mean.iter().zip(&pred.var).enumerate() {
                    for s in 0..2 {
                        let y = ens.values[t + 1][(k, s)];
                        assert!((mrow[s] - y).abs() <= 1e-6 * (1.0 + y.abs()));
                        assert!(vrow[s] <= 1e-8);
                    }
                }
            }
        }
    }

    #[test]
    fn distant_input_falls_back_to_the_mean_process() {
        let ens = toy_ensemble(5, 1, 4, 7).standardized().0;
        let mut fit = fit_emulator(&ens, &quick(EmulatorMode::Spatial)).unwrap();
        for d in &mut fit.draws {
            d.beta = vec![vec![1e6, 1e6]];
        }
        let eta = [0.123456, 0.654321];
        let lags = LagSource::Recursive(vec![vec![0.4]]);
        let preds = emulator_predict(&fit, &ens, &eta, &lags).unwrap();
        for (d, pred) in fit.draws.iter().zip(&preds) {
            let mut lag = 0.4;
            for t in 0..3 {
                let expect = lag * d.theta[t + 1][0];
                assert!((pred.mean[t][0] - expect).abs() < 1e-12);
                assert!((pred.var[t][0] - d.v[t + 1][0]).abs() < 1e-12);
                lag = pred.mean[t][0];
            }
        }
    }

    #[test]
    fn prediction_matches_dense_conditioning() {
        // N = 2 runs, T = 2 (one modelled time): condition the joint Gaussian
        // of (y*, y_1, y_2) given θ and v directly.
        let design = DesignSet {
            unit: vec![vec![0.1], vec![0.8]],
            bounds: vec![(0.0, 1.0)],
            seed: 0,
        };
        let values = vec![
            DMatrix::from_column_slice(2, 1, &[0.5, -0.3]),
            DMatrix::from_column_slice(2, 1, &[0.7, 0.1]),
        ];
        let ens =
            TrainingEnsemble::new(values, design, SpatialDomain::Points(vec![vec![0.0]])).unwrap();
        let draw = EmulatorDraw {
            beta: vec![vec![2.0]],
            omega_sp: vec![1.0],
            h_t: DMatrix::identity(1, 1),
            theta: vec![DVector::from_element(1, 0.9), DVector::from_element(1, 0.8)],
            v: vec![vec![0.5], vec![0.3]],
        };
        let fit = EmulatorDraws {
            mode: EmulatorMode::Spatial,
            p: 1,
            n_sites: 1,
            horizon: 1,
            draws: vec![draw],
            acceptance: Acceptance {
                beta: 0.0,
                omega: 0.0,
            },
        };
        let eta = [0.4];
        let lag = 0.2;
        let pred =
            &emulator_predict(&fit, &ens, &eta, &LagSource::Recursive(vec![vec![lag]])).unwrap()[0];
        let c = |a: f64, b: f64| (-2.0 * (a - b) * (a - b)).exp();
        let v = 0.3;
        let vm = DMatrix::from_row_slice(
            2,
            2,
            &[1.0 + JITTER, c(0.1, 0.8), c(0.1, 0.8), 1.0 + JITTER],
        ) * v;
        let r = DVector::from_vec(vec![c(0.1, 0.4), c(0.8, 0.4)]) * v;
        let y = DVector::from_vec(vec![0.7, 0.1]);
        let fy = DVector::from_vec(vec![0.5, -0.3]) * 0.8;
        let inv = vm.try_inverse().unwrap();
        let mean = lag * 0.8 + (r.transpose() * &inv * (y - fy))[0];
        let var = v - (r.transpose() * &inv * &r)[0];
        assert!((pred.mean[0][0] - mean).abs() < 1e-10);
        assert!((pred.var[0][0] - var).abs() < 1e-10);
    }

    #[test]
    fn heterogeneous_sites_are_independent() {
        let ens = toy_ensemble(6, 3, 5, 8).standardized().0;
        let cfg = quick(EmulatorMode::Heterogeneous);
        let a = fit_emulator(&ens, &cfg).unwrap();
        let mut perturbed = ens.clone();
        for m in &mut perturbed.values {
            for i in 0..m.nrows() {
                m[(i, 2)] *= -1.5;
            }
        }
        let b = fit_emulator(&perturbed, &cfg).unwrap();
        for (da, db) in a.draws.iter().zip(&b.draws) {
            assert_eq!(da.beta[0], db.beta[0]);
            assert_eq!(da.beta[1], db.beta[1]);
            for t in 0..da.theta.len() {
                assert_eq!(da.theta[t].rows(0, 2), db.theta[t].rows(0, 2));
                assert_eq!(da.v[t][..2], db.v[t][..2]);
            }
        }
    }

    fn latent_fixture() -> (EmulatorDraws, SpatialDomain) {
        let coords = vec![vec![0.0, 0.0], vec![0.5, 0.2]];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let theta: Vec<DVector<f64>> = (0..3)
            .map(|_| DVector::from_fn(2, |_, _| rng.sample::<f64, _>(StandardNormal)))
            .collect();
        let draw = EmulatorDraw {
            beta: vec![vec![1.0]],
            omega_sp: vec![3.0, 1.0],
            h_t: DMatrix::identity(1, 1),
            theta,
            v: vec![vec![0.4]; 3],
        };
        let fit = EmulatorDraws {
            mode: EmulatorMode::Spatial,
            p: 1,
            n_sites: 2,
            horizon: 2,
            draws: vec![draw],
            acceptance: Acceptance {
                beta: 0.0,
                omega: 0.0,
            },
        };
        (fit, SpatialDomain::Points(coords))
    }

    #[test]
    fn latent_interpolation_is_exact_at_observed_sites() {
        let (fit, domain) = latent_fixture();
        let path = &interpolate_latent(&fit, &domain, &[0.5, 0.2], 1).unwrap()[0];
        for t in 0..3 {
            assert_eq!(path[t][0], fit.draws[0].theta[t][1]);
        }
        let single = SpatialDomain::Points(vec![vec![0.3]]);
        let mut one = fit.clone();
        one.n_sites = 1;
        one.draws[0].omega_sp = vec![1.0];
        one.draws[0].theta = one.draws[0]
            .theta
            .iter()
            .map(|t| t.rows(0, 1).into_owned())
            .collect();
        let path = &interpolate_latent(&one, &single, &[0.3], 1).unwrap()[0];
        assert_eq!(path[2][0], one.draws[0].theta[2][0]);
    }

    #[test]
    fn latent_moments_match_dense_conditioning() {
        let (fit, domain) = latent_fixture();
        let d = &fit.draws[0];
        let s_star = [0.2, 0.4];
        let kr = LatentKriging::new(&domain, &fit.mode, &d.omega_sp, &d.h_t, &s_star).unwrap();
        let prev_star = DVector::from_element(1, 0.25);
        let (mean, cov) = kr.moments(&d.theta[2], Some((&d.theta[1], &prev_star)), 1);
        // Joint covariance of (τ(s*), τ(s1), τ(s2)).
        let pts = [vec![0.2, 0.4], vec![0.0, 0.0], vec![0.5, 0.2]];
        let c = |a: &[f64], b: &[f64]| sq_exp_corr(a, b, &d.omega_sp).unwrap();
        let mut w = DMatrix::from_fn(2, 2, |i, j| c(&pts[i + 1], &pts[j + 1]));
        w[(0, 0)] += JITTER;
        w[(1, 1)] += JITTER;
        let k = DVector::from_fn(2, |i, _| c(&pts[0], &pts[i + 1]));
        let inv = w.try_inverse().unwrap();
        let delta = &d.theta[2] - &d.theta[1];
        let expect_mean = 0.25 + (k.transpose() * &inv * delta)[0];
        let expect_var = 1.0 - (k.transpose() * &inv * &k)[0];
        assert!((mean[0] - expect_mean).abs() < 1e-10);
        assert!((cov[(0, 0)] - expect_var).abs() < 1e-10);
    }

    #[test]
    fn full_knot_set_reproduces_spatial_correlation() {
        let coords: Vec<Vec<f64>> = (0..5)
            .map(|i| vec![i as f64 / 4.0, (i * i) as f64 / 16.0])
            .collect();
        let domain = SpatialDomain::Points(coords.clone());
        let knots = KnotSet {
            knots: coords,
            placement: crate::kernels::KnotPlacement::Grid,
        };
        let h = DMatrix::identity(1, 1);
        let full = evolution_corr(&domain, &EmulatorMode::Spatial, &[2.0, 3.0], &h).unwrap();
        let pp = evolution_corr(
            &domain,
            &EmulatorMode::PredictiveProcess(knots),
            &[2.0, 3.0],
            &h,
        )
        .unwrap();
        assert!((full - pp).amax() < 1e-10);
    }

    fn batch_mean_se(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let b = 20;
        let len = xs.len() / b;
        let bm: Vec<f64> = (0..b)
            .map(|k| xs[k * len..(k + 1) * len].iter().sum::<f64>() / len as f64)
            .collect();
        let var = bm.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (b - 1) as f64;
        (mean, (var / b as f64).sqrt())
    }

    #[test]
    fn single_site_spatial_matches_fixed_heterogeneous() {
        let ens = toy_ensemble(10, 1, 8, 6).standardized().0;
        let mcmc = McmcSettings {
            n_samples: 6000,
            burn_in: 1000,
            thin: 1,
            adapt: true,
        };
        let spatial = fit_emulator(
            &ens,
            &EmulatorConfig {
                mcmc,
                seed: 1,
                ..quick(EmulatorMode::Spatial)
            },
        )
        .unwrap();
        let hetero = fit_emulator(
            &ens,
            &EmulatorConfig {
                mcmc,
                seed: 2,
                hetero_evolution: HeteroEvolution::Fixed,
                ..quick(EmulatorMode::Heterogeneous)
            },
        )
        .unwrap();
        let stats: [Box<dyn Fn(&EmulatorDraw) -> f64>; 3] = [
            Box::new(|d| d.theta.last().unwrap()[0]),
            Box::new(|d| d.v.last().unwrap()[0].ln()),
            Box::new(|d| d.beta[0][0].ln()),
        ];
        for f in stats.iter() {
            let a: Vec<f64> = spatial.draws.iter().map(f).collect();
            let b: Vec<f64> = hetero.draws.iter().map(f).collect();
            let ((ma, sa), (mb, sb)) = (batch_mean_se(&a), batch_mean_se(&b));
            assert!(
                (ma - mb).abs() < 4.0 * (sa * sa + sb * sb).sqrt() + 1e-3,
                "{ma} vs {mb} (se {sa}, {sb})"
            );
        }
    }

    #[test]
    fn heterogeneous_fit_does_not_depend_on_thread_count() {
        let ens = toy_ensemble(6, 4, 5, 7).standardized().0;
        let cfg = quick(EmulatorMode::Heterogeneous);
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| fit_emulator(&ens, &cfg).unwrap())
        };
        let (one, many) = (run(1), run(4));
        assert_eq!(one.draws, many.draws);
    }
}
