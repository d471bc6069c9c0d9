//! Conjugate Normal-Gamma state-space machinery: the discounted Kalman
//! filter, the backward sampler for `(θ_{0:T}, v_{0:T})`, and their
//! composition (FFBS).
//!
//! Model, for `t = 1..T`:
//!
//! ```text
//! y_t     = F_t θ_t + ε_t,          ε_t ~ N(0, v_t V)
//! θ_t     = G_t θ_{t-1} + τ_t,      τ_t ~ N(0, v_t W)
//! 1/v_t   = (γ_t / ω) / v_{t-1},    γ_t ~ Beta(ω n_{t-1}, (1 - ω) n_{t-1})
//! ```
//!
//! with `(θ_0, 1/v_0) ~ NG(m0, M0, n0, d0)`. Gamma distributions are
//! shape-rate throughout.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{dim, invalid, numeric, Result};
use crate::linalg::{sample_mvn, standard_normal_vec, symmetrize, tr_mul, SpdFactor};

/// Normal-Gamma prior on `(θ_0, 1/v_0)`.
#[derive(Clone, Debug)]
pub struct NgPrior {
    pub m0: DVector<f64>,
    pub big_m0: DMatrix<f64>,
    pub n0: f64,
    pub d0: f64,
}

impl NgPrior {
    pub fn new(m0: DVector<f64>, big_m0: DMatrix<f64>, n0: f64, d0: f64) -> Self {
        Self { m0, big_m0, n0, d0 }
    }

    /// `m0 = mean * 1`, `M0 = scale * I`.
    pub fn isotropic(dim: usize, mean: f64, scale: f64, n0: f64, d0: f64) -> Self {
        Self::new(
            DVector::from_element(dim, mean),
            DMatrix::identity(dim, dim) * scale,
            n0,
            d0,
        )
    }

    pub fn dim(&self) -> usize {
        self.m0.len()
    }
}

#[derive(Clone, Debug)]
pub enum Transition {
    Identity,
    Fixed(DMatrix<f64>),
    /// One matrix per time `t = 1..T`.
    PerTime(Vec<DMatrix<f64>>),
}

impl Transition {
    /// `G_t` for `t` in `1..=T`.
    fn at(&self, t: usize) -> Option<&DMatrix<f64>> {
        match self {
            Transition::Identity => None,
            Transition::Fixed(g) => Some(g),
            Transition::PerTime(gs) => Some(&gs[t - 1]),
        }
    }

    fn apply_vec(&self, t: usize, x: &DVector<f64>) -> DVector<f64> {
        match self.at(t) {
            None => x.clone(),
            Some(g) => g * x,
        }
    }

    fn apply_mat(&self, t: usize, x: &DMatrix<f64>) -> DMatrix<f64> {
        match self.at(t) {
            None => x.clone(),
            Some(g) => g * x,
        }
    }

    fn sandwich(&self, t: usize, m: &DMatrix<f64>) -> DMatrix<f64> {
        match self.at(t) {
            None => m.clone(),
            Some(g) => g * m * g.transpose(),
        }
    }
}

/// Evolution correlation of the state.
#[derive(Clone, Debug)]
pub enum StateNoise {
    /// A fixed correlation matrix `W`.
    Fixed(DMatrix<f64>),
    /// Deterministic discounting: `W_t = (1 - δ)/δ · G_t M_{t-1} G_t'`.
    Discount(f64),
}

/// Observation equation.
#[derive(Clone, Debug)]
pub enum Observation {
    /// `y_t = F_t θ_t + ε_t`, `ε_t ~ N(0, v_t V)`, with dense `F_t` (`N x p`).
    Dense {
        f: Vec<DMatrix<f64>>,
        v: DMatrix<f64>,
    },
    /// Site-stacked observations sharing one input-space correlation `V`:
    /// `y_t = (y_t(s_1), ..., y_t(s_S))` with `y_t(s) = F_t(s) θ_t(s) + ε_t(s)`
    /// and `ε_t(s) ~ N(0, v_t V)` independent over sites. `f[t][s]` is
    /// `N x q`, and the state is the site-major stack of the `θ_t(s)`.
    SiteBlocks {
        f: Vec<Vec<DMatrix<f64>>>,
        v: DMatrix<f64>,
    },
}

impl Observation {
    fn n_times(&self) -> usize {
        match self {
            Observation::Dense { f, .. } => f.len(),
            Observation::SiteBlocks { f, .. } => f.len(),
        }
    }

    /// Length of each stacked observation vector.
    pub fn obs_dim(&self) -> usize {
        match self {
            Observation::Dense { v, .. } => v.nrows(),
            Observation::SiteBlocks { f, v } => v.nrows() * f.first().map_or(0, |fs| fs.len()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SsmSpec {
    pub obs: Observation,
    pub transition: Transition,
    pub state_noise: StateNoise,
    /// Discount `ω ∈ (0, 1]` of the precision process.
    pub omega: f64,
    pub prior: NgPrior,
}

impl SsmSpec {
    pub fn state_dim(&self) -> usize {
        self.prior.dim()
    }

    pub fn validate(&self, y: &[DVector<f64>]) -> Result<()> {
        if !(self.omega > 0.0 && self.omega <= 1.0) {
            return Err(invalid(format!(
                "discount must lie in (0, 1], got {}",
                self.omega
            )));
        }
        if !(self.prior.n0 > 0.0 && self.prior.d0 > 0.0) {
            return Err(invalid("n0 and d0 must be positive"));
        }
        let p = self.state_dim();
        if self.prior.big_m0.shape() != (p, p) {
            return Err(dim("M0 must be p x p"));
        }
        SpdFactor::new(&self.prior.big_m0).map_err(|e| invalid(format!("M0 must be SPD: {e}")))?;
        if self.obs.n_times() != y.len() {
            return Err(dim(format!(
                "{} observation matrices for {} observations",
                self.obs.n_times(),
                y.len()
            )));
        }
        let n = self.obs.obs_dim();
        for (t, yt) in y.iter().enumerate() {
            if yt.len() != n {
                return Err(dim(format!(
                    "y at time {} has length {}, expected {n}",
                    t + 1,
                    yt.len()
                )));
            }
        }
        match &self.obs {
            Observation::Dense { f, v } => {
                if v.shape() != (n, n) {
                    return Err(dim("V must be N x N"));
                }
                if let Some(t) = f.iter().position(|ft| ft.shape() != (n, p)) {
                    return Err(dim(format!("F at time {} must be {n} x {p}", t + 1)));
                }
            }
            Observation::SiteBlocks { f, v } => {
                let nn = v.nrows();
                if v.ncols() != nn {
                    return Err(dim("V must be square"));
                }
                for (t, sites) in f.iter().enumerate() {
                    let cols: usize = sites.iter().map(|b| b.ncols()).sum();
                    if cols != p || sites.iter().any(|b| b.nrows() != nn) {
                        return Err(dim(format!(
                            "site blocks at time {} do not tile the state",
                            t + 1
                        )));
                    }
                }
            }
        }
        match &self.transition {
            Transition::Identity => {}
            Transition::Fixed(g) => {
                if g.shape() != (p, p) {
                    return Err(dim("G must be p x p"));
                }
            }
            Transition::PerTime(gs) => {
                if gs.len() != y.len() || gs.iter().any(|g| g.shape() != (p, p)) {
                    return Err(dim("need one p x p G per time step"));
                }
            }
        }
        match &self.state_noise {
            StateNoise::Fixed(w) => {
                if w.shape() != (p, p) {
                    return Err(dim("W must be p x p"));
                }
            }
            StateNoise::Discount(delta) => {
                if !(*delta > 0.0 && *delta <= 1.0) {
                    return Err(invalid("state discount must lie in (0, 1]"));
                }
            }
        }
        Ok(())
    }
}

/// Filter output at one time point. Index 0 carries the prior.
#[derive(Clone, Debug)]
pub struct FilterStep {
    pub a: DVector<f64>,
    pub big_a: DMatrix<f64>,
    pub n_star: f64,
    pub d_star: f64,
    pub m: DVector<f64>,
    pub big_m: DMatrix<f64>,
    pub n: f64,
    pub d: f64,
    /// One-step forecast mean and scale, kept only by the dense observation path.
    pub q: Option<DVector<f64>>,
    pub big_q: Option<DMatrix<f64>>,
    /// Log density of `y_t` under the one-step Student-t forecast.
    pub log_pred: f64,
}

#[derive(Clone, Debug)]
pub struct FilterState {
    pub steps: Vec<FilterStep>,
    pub omega: f64,
}

impl FilterState {
    pub fn n_times(&self) -> usize {
        self.steps.len() - 1
    }

    pub fn last(&self) -> &FilterStep {
        self.steps
            .last()
            .expect("filter state always holds the prior")
    }

    /// `log p(y_{1:T})` accumulated from the one-step forecasts.
    pub fn log_likelihood(&self) -> f64 {
        self.steps.iter().skip(1).map(|s| s.log_pred).sum()
    }
}

/// One joint draw of the latent trajectory and variances, `t = 0..T`.
#[derive(Clone, Debug, PartialEq)]
pub struct StateDraw {
    pub theta: Vec<DVector<f64>>,
    pub v: Vec<f64>,
}

/// Backward recursion used for `θ`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Smoother {
    /// Condition on the sampled `θ_{t+1}` (joint draw).
    #[default]
    Conditional,
    /// Recurse on smoothed means and variances `(s_t, S_t)` as printed in the
    /// original listing; yields marginal rather than joint draws.
    Literal,
}

/// Student-t log density with `nu` dof, location `0`, given the residual's
/// quadratic form `e' Σ^{-1} e` and `log|Σ|`.
pub(crate) fn student_t_log_density(nu: f64, k: f64, quad: f64, log_det: f64) -> f64 {
    ln_gamma(0.5 * (nu + k))
        - ln_gamma(0.5 * nu)
        - 0.5 * k * (nu * std::f64::consts::PI).ln()
        - 0.5 * log_det
        - 0.5 * (nu + k) * (quad / nu).ln_1p()
}

struct Update {
    m: DVector<f64>,
    big_m: DMatrix<f64>,
    quad: f64,
    log_det_q: f64,
    q: Option<DVector<f64>>,
    big_q: Option<DMatrix<f64>>,
}

fn dense_update(
    t: usize,
    f: &DMatrix<f64>,
    v: &DMatrix<f64>,
    y: &DVector<f64>,
    a: &DVector<f64>,
    big_a: &DMatrix<f64>,
) -> Result<Update> {
    let q = f * a;
    let af_t = big_a * f.transpose();
    let mut big_q = f * &af_t + v;
    symmetrize(&mut big_q);
    let qf = SpdFactor::new(&big_q)
        .map_err(|e| numeric(format!("forecast scale Q at time {t} is singular: {e}")))?;
    let e = y - &q;
    // K = A F' Q^{-1}
    let gain = qf.solve_mat(&af_t.transpose()).transpose();
    let m = a + &gain * &e;
    let mut big_m = big_a - &gain * af_t.transpose();
    symmetrize(&mut big_m);
    Ok(Update {
        m,
        big_m,
        quad: qf.inv_quad(&e),
        log_det_q: qf.log_det(),
        q: Some(q),
        big_q: Some(big_q),
    })
}

/// Per-filter-call precomputation for site blocks: whitened design blocks
/// `L_V^{-1} F_t(s)`.
struct WhitenedSites {
    v_factor: SpdFactor,
    f: Vec<Vec<DMatrix<f64>>>,
    offsets: Vec<usize>,
}

impl WhitenedSites {
    fn new(f: &[Vec<DMatrix<f64>>], v: &DMatrix<f64>) -> Result<Self> {
        let v_factor =
            SpdFactor::new(v).map_err(|e| numeric(format!("observation correlation V: {e}")))?;
        let wf = f
            .iter()
            .map(|sites| sites.iter().map(|b| v_factor.half_solve_mat(b)).collect())
            .collect();
        let mut offsets = vec![0];
        if let Some(first) = f.first() {
            for b in first {
                offsets.push(offsets.last().unwrap() + b.ncols());
            }
        }
        Ok(Self {
            v_factor,
            f: wf,
            offsets,
        })
    }
}

// Symmetric square root of a PSD block.
fn psd_sqrt(p: &DMatrix<f64>) -> DMatrix<f64> {
    if p.nrows() == 1 {
        return DMatrix::from_element(1, 1, p[(0, 0)].max(0.0).sqrt());
    }
    let eig = SymmetricEigen::new(p.clone());
    let roots = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
    &eig.eigenvectors * roots * eig.eigenvectors.transpose()
}

// Information-form update exploiting `R = I_S ⊗ V`:
//   M = (A^{-1} + F'R^{-1}F)^{-1} = A - A B (I + B A B)^{-1} B A,  B = (F'R^{-1}F)^{1/2}
//   m = a + M F'R^{-1}(y - F a)
//   e'Q^{-1}e = e'R^{-1}e - w'M w,  log|Q| = S log|V| + log|I + B A B|
fn site_update(
    t: usize,
    ws: &WhitenedSites,
    y: &DVector<f64>,
    a: &DVector<f64>,
    big_a: &DMatrix<f64>,
) -> Result<Update> {
    let blocks = &ws.f[t - 1];
    let nn = ws.v_factor.dim();
    let p = a.len();
    let mut roots = Vec::with_capacity(blocks.len());
    let mut w = DVector::zeros(p);
    let mut resid_quad = 0.0;
    for (s, fb) in blocks.iter().enumerate() {
        let (lo, hi) = (ws.offsets[s], ws.offsets[s + 1]);
        let ys = y.rows(s * nn, nn).into_owned();
        let ew = ws.v_factor.half_solve(&ys) - fb * a.rows(lo, hi - lo);
        resid_quad += ew.norm_squared();
        w.rows_mut(lo, hi - lo).copy_from(&(fb.transpose() * &ew));
        roots.push(psd_sqrt(&(fb.transpose() * fb)));
    }
    // B is block diagonal: apply it block row by block row.
    let mut ba = big_a.clone();
    for (s, root) in roots.iter().enumerate() {
        let (lo, len) = (ws.offsets[s], ws.offsets[s + 1] - ws.offsets[s]);
        let scaled = root * big_a.rows(lo, len);
        ba.rows_mut(lo, len).copy_from(&scaled);
    }
    let mut c = ba.clone();
    for (s, root) in roots.iter().enumerate() {
        let (lo, len) = (ws.offsets[s], ws.offsets[s + 1] - ws.offsets[s]);
        let scaled = ba.columns(lo, len) * root;
        c.columns_mut(lo, len).copy_from(&scaled);
    }
    for i in 0..p {
        c[(i, i)] += 1.0;
    }
    symmetrize(&mut c);
    let cf =
        SpdFactor::new(&c).map_err(|e| numeric(format!("information update at time {t}: {e}")))?;
    let x = cf.half_solve_mat(&ba);
    let mut big_m = big_a - tr_mul(&x, &x);
    symmetrize(&mut big_m);
    let mw = &big_m * &w;
    let m = a + &mw;
    let quad = resid_quad - w.dot(&mw);
    let sites = blocks.len() as f64;
    Ok(Update {
        m,
        big_m,
        quad: quad.max(0.0),
        log_det_q: sites * ws.v_factor.log_det() + cf.log_det(),
        q: None,
        big_q: None,
    })
}

/// Forward filter. Returns the prior at index 0 and the filtered moments for
/// `t = 1..T`.
pub fn kalman_filter(y: &[DVector<f64>], spec: &SsmSpec) -> Result<FilterState> {
    spec.validate(y)?;
    let prior = &spec.prior;
    let p = spec.state_dim();
    let mut steps = Vec::with_capacity(y.len() + 1);
    steps.push(FilterStep {
        a: prior.m0.clone(),
        big_a: prior.big_m0.clone(),
        n_star: prior.n0,
        d_star: prior.d0,
        m: prior.m0.clone(),
        big_m: prior.big_m0.clone(),
        n: prior.n0,
        d: prior.d0,
        q: None,
        big_q: None,
        log_pred: 0.0,
    });
    let whitened = match &spec.obs {
        Observation::SiteBlocks { f, v } => Some(WhitenedSites::new(f, v)?),
        Observation::Dense { .. } => None,
    };
    let n_obs = spec.obs.obs_dim() as f64;
    for (idx, yt) in y.iter().enumerate() {
        let t = idx + 1;
        let prev = &steps[idx];
        let a = spec.transition.apply_vec(t, &prev.m);
        let propagated = spec.transition.sandwich(t, &prev.big_m);
        let mut big_a = match &spec.state_noise {
            StateNoise::Fixed(w) => propagated + w,
            StateNoise::Discount(delta) => propagated / *delta,
        };
        symmetrize(&mut big_a);
        let n_star = spec.omega * prev.n;
        let d_star = spec.omega * prev.d;
        let up = match (&spec.obs, &whitened) {
            (Observation::Dense { f, v }, _) => dense_update(t, &f[idx], v, yt, &a, &big_a)?,
            (Observation::SiteBlocks { .. }, Some(ws)) => site_update(t, ws, yt, &a, &big_a)?,
            _ => unreachable!(),
        };
        let n = n_star + 0.5 * n_obs;
        let d = d_star + 0.5 * up.quad;
        if !(d.is_finite() && up.m.iter().all(|x| x.is_finite())) {
            return Err(numeric(format!("non-finite filter moments at time {t}")));
        }
        let nu = 2.0 * n_star;
        let log_pred = student_t_log_density(
            nu,
            n_obs,
            up.quad * n_star / d_star,
            up.log_det_q + n_obs * (d_star / n_star).ln(),
        );
        debug_assert_eq!(up.m.len(), p);
        steps.push(FilterStep {
            a,
            big_a,
            n_star,
            d_star,
            m: up.m,
            big_m: up.big_m,
            n,
            d,
            q: up.q,
            big_q: up.big_q,
            log_pred,
        });
    }
    Ok(FilterState {
        steps,
        omega: spec.omega,
    })
}

/// Gamma(shape, rate) draw; a zero shape is the point mass at zero.
pub fn gamma_draw<R: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut R) -> Result<f64> {
    if shape == 0.0 {
        return Ok(0.0);
    }
    let g = Gamma::new(shape, 1.0 / rate)
        .map_err(|e| numeric(format!("Gamma({shape}, {rate}): {e}")))?;
    Ok(g.sample(rng))
}

/// Backward precision step: `1/v_t = ω / v_{t+1} + Gamma((1 - ω) n_t, d_t)`,
/// the shifted-Gamma smoothing conditional.
pub fn backward_precision<R: Rng + ?Sized>(
    prec_next: f64,
    omega: f64,
    n_t: f64,
    d_t: f64,
    rng: &mut R,
) -> Result<f64> {
    let shape = ((1.0 - omega) * n_t).max(0.0);
    Ok(omega * prec_next + gamma_draw(shape, d_t, rng)?)
}

/// Multiplicative precision shock `γ ~ Beta(ω n, (1 - ω) n)`.
pub fn precision_shock<R: Rng + ?Sized>(omega: f64, n: f64, rng: &mut R) -> Result<f64> {
    if omega == 1.0 {
        return Ok(1.0);
    }
    let a = gamma_draw(omega * n, 1.0, rng)?;
    let b = gamma_draw((1.0 - omega) * n, 1.0, rng)?;
    Ok(a / (a + b))
}

fn check_finite_step(t: usize, s: &FilterStep) -> Result<()> {
    let finite = s.m.iter().chain(s.big_m.iter()).all(|x| x.is_finite())
        && s.n.is_finite()
        && s.d.is_finite();
    if finite && s.n > 0.0 && s.d > 0.0 {
        Ok(())
    } else {
        Err(numeric(format!(
            "non-finite or non-positive filter moments at time {t}"
        )))
    }
}

/// Draw `(θ_{0:T}, v_{0:T})` given the filter output.
pub fn backward_sample<R: Rng + ?Sized>(
    fs: &FilterState,
    spec: &SsmSpec,
    smoother: Smoother,
    rng: &mut R,
) -> Result<StateDraw> {
    let steps = &fs.steps;
    let horizon = fs.n_times();
    for (t, s) in steps.iter().enumerate() {
        check_finite_step(t, s)?;
    }
    let omega = fs.omega;
    let last = &steps[horizon];
    let mut prec = vec![0.0; horizon + 1];
    let mut theta = vec![DVector::zeros(0); horizon + 1];
    prec[horizon] = gamma_draw(last.n, last.d, rng)?;
    theta[horizon] = sample_mvn(&last.m, &last.big_m, 1.0 / prec[horizon], rng);

    // Literal recursion state (s_{t+1}, S_{t+1}).
    let mut smooth_mean = last.m.clone();
    let mut smooth_var = last.big_m.clone();

    for t in (0..horizon).rev() {
        let cur = &steps[t];
        let next = &steps[t + 1];
        prec[t] = backward_precision(prec[t + 1], omega, cur.n, cur.d, rng)?;
        let v_t = 1.0 / prec[t];
        let af = SpdFactor::with_jitter(&next.big_a, 0.0)
            .map_err(|e| numeric(format!("prior scale A at time {}: {e}", t + 1)))?;
        let gm = spec.transition.apply_mat(t + 1, &cur.big_m);
        let y = af.half_solve_mat(&gm);
        let (mean, mut var) = match smoother {
            Smoother::Conditional => {
                let r = af.half_solve(&(&theta[t + 1] - &next.a));
                (&cur.m + y.tr_mul(&r), &cur.big_m - tr_mul(&y, &y))
            }
            Smoother::Literal => {
                // J = M G' A^{-1};  s_t = m + J (s_{t+1} - a);  S_t = M - J (A - S_{t+1}) J'
                let j = af.solve_mat(&gm).transpose();
                let mean = &cur.m + &j * (&smooth_mean - &next.a);
                let var = &cur.big_m - &j * (&next.big_a - &smooth_var) * j.transpose();
                smooth_mean = mean.clone();
                smooth_var = var.clone();
                (mean, var)
            }
        };
        symmetrize(&mut var);
        theta[t] = sample_mvn(&mean, &var, v_t, rng);
    }
    Ok(StateDraw {
        theta,
        v: prec.into_iter().map(|x| 1.0 / x).collect(),
    })
}

/// Forward-filter-backward-sample.
pub fn ffbs<R: Rng + ?Sized>(
    y: &[DVector<f64>],
    spec: &SsmSpec,
    smoother: Smoother,
    rng: &mut R,
) -> Result<(StateDraw, FilterState)> {
    let fs = kalman_filter(y, spec)?;
    let draw = backward_sample(&fs, spec, smoother, rng)?;
    Ok((draw, fs))
}

/// FFBS for the random walk `y_t = u_t + ε_t`, `u_t = u_{t-1} + τ_t` with
/// `ε_t ~ N(0, ν_t I)`, `τ_t ~ N(0, ν_t W)` and prior scale `M0 = c I`.
/// Every matrix in the recursion commutes with `W`, so the filter runs
/// mode by mode in the eigenbasis of `W`.
#[derive(Clone, Debug)]
pub struct RotatedRandomWalk {
    basis: DMatrix<f64>,
    eigen: DVector<f64>,
}

/// Diagonal filter moments in the rotated basis.
#[derive(Clone, Debug)]
pub struct RotatedFilter {
    pub a: Vec<DVector<f64>>,
    pub big_a: Vec<DVector<f64>>,
    pub m: Vec<DVector<f64>>,
    pub big_m: Vec<DVector<f64>>,
    pub n: Vec<f64>,
    pub d: Vec<f64>,
    pub log_pred: Vec<f64>,
    pub omega: f64,
}

impl RotatedRandomWalk {
    pub fn new(w: &DMatrix<f64>) -> Result<Self> {
        if w.nrows() != w.ncols() {
            return Err(dim("W must be square"));
        }
        let mut s = w.clone();
        symmetrize(&mut s);
        let eig = SymmetricEigen::new(s);
        Ok(Self {
            basis: eig.eigenvectors,
            eigen: eig.eigenvalues.map(|l| l.max(0.0)),
        })
    }

    pub fn dim(&self) -> usize {
        self.eigen.len()
    }

    /// Filtered moments mapped back to the original basis.
    pub fn unrotate(
        &self,
        mean: &DVector<f64>,
        var: &DVector<f64>,
    ) -> (DVector<f64>, DMatrix<f64>) {
        let m = &self.basis * mean;
        let mut v = &self.basis * DMatrix::from_diagonal(var) * self.basis.transpose();
        symmetrize(&mut v);
        (m, v)
    }

    pub fn filter(
        &self,
        y: &[DVector<f64>],
        omega: f64,
        m0: &DVector<f64>,
        c0: f64,
        n0: f64,
        d0: f64,
    ) -> Result<RotatedFilter> {
        let k = self.dim();
        if m0.len() != k || y.iter().any(|v| v.len() != k) {
            return Err(dim(
                "random-walk observations must match the dimension of W",
            ));
        }
        if !(omega > 0.0 && omega <= 1.0) || !(n0 > 0.0 && d0 > 0.0) || c0 < 0.0 {
            return Err(invalid("invalid random-walk prior or discount"));
        }
        let horizon = y.len();
        let mut out = RotatedFilter {
            a: Vec::with_capacity(horizon + 1),
            big_a: Vec::with_capacity(horizon + 1),
            m: Vec::with_capacity(horizon + 1),
            big_m: Vec::with_capacity(horizon + 1),
            n: vec![n0],
            d: vec![d0],
            log_pred: vec![0.0],
            omega,
        };
        let m0r = self.basis.tr_mul(m0);
        out.a.push(m0r.clone());
        out.big_a.push(DVector::from_element(k, c0));
        out.m.push(m0r);
        out.big_m.push(DVector::from_element(k, c0));
        for (idx, yt) in y.iter().enumerate() {
            let yr = self.basis.tr_mul(yt);
            let a = out.m[idx].clone();
            let big_a = &out.big_m[idx] + &self.eigen;
            let mut m = a.clone();
            let mut big_m = big_a.clone();
            let mut quad = 0.0;
            let mut log_det = 0.0;
            for i in 0..k {
                let q = big_a[i] + 1.0;
                let e = yr[i] - a[i];
                m[i] = a[i] + big_a[i] / q * e;
                big_m[i] = big_a[i] - big_a[i] * big_a[i] / q;
                quad += e * e / q;
                log_det += q.ln();
            }
            let n_star = omega * out.n[idx];
            let d_star = omega * out.d[idx];
            let kf = k as f64;
            out.log_pred.push(student_t_log_density(
                2.0 * n_star,
                kf,
                quad * n_star / d_star,
                log_det + kf * (d_star / n_star).ln(),
            ));
            out.n.push(n_star + 0.5 * kf);
            out.d.push(d_star + 0.5 * quad);
            out.a.push(a);
            out.big_a.push(big_a);
            out.m.push(m);
            out.big_m.push(big_m);
        }
        Ok(out)
    }

    pub fn backward_sample<R: Rng + ?Sized>(
        &self,
        f: &RotatedFilter,
        rng: &mut R,
    ) -> Result<StateDraw> {
        let horizon = f.n.len() - 1;
        let k = self.dim();
        let mut prec = vec![0.0; horizon + 1];
        let mut rot = vec![DVector::zeros(k); horizon + 1];
        prec[horizon] = gamma_draw(f.n[horizon], f.d[horizon], rng)?;
        let z = standard_normal_vec(k, rng);
        let sd = (1.0 / prec[horizon]).sqrt();
        rot[horizon] = DVector::from_fn(k, |i, _| {
            f.m[horizon][i] + sd * f.big_m[horizon][i].max(0.0).sqrt() * z[i]
        });
        for t in (0..horizon).rev() {
            prec[t] = backward_precision(prec[t + 1], f.omega, f.n[t], f.d[t], rng)?;
            let sd = (1.0 / prec[t]).sqrt();
            let z = standard_normal_vec(k, rng);
            rot[t] = DVector::from_fn(k, |i, _| {
                let (m, big_m, a_next) = (f.m[t][i], f.big_m[t][i], f.big_a[t + 1][i]);
                let (mean, var) = if a_next > 0.0 {
                    let g = big_m / a_next;
                    (
                        m + g * (rot[t + 1][i] - f.a[t + 1][i]),
                        (big_m - g * big_m).max(0.0),
                    )
                } else {
                    (m, 0.0)
                };
                mean + sd * var.sqrt() * z[i]
            });
        }
        Ok(StateDraw {
            theta: rot.iter().map(|r| &self.basis * r).collect(),
            v: prec.into_iter().map(|x| 1.0 / x).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_spec(t_len: usize, w: f64, omega: f64, prior: NgPrior) -> SsmSpec {
        SsmSpec {
            obs: Observation::Dense {
                f: vec![DMatrix::identity(1, 1); t_len],
                v: DMatrix::identity(1, 1),
            },
            transition: Transition::Identity,
            state_noise: StateNoise::Fixed(DMatrix::from_element(1, 1, w)),
            omega,
            prior,
        }
    }

    fn ys(v: &[f64]) -> Vec<DVector<f64>> {
        v.iter().map(|&x| DVector::from_element(1, x)).collect()
    }

    #[test]
    fn no_data_returns_prior() {
        let prior = NgPrior::isotropic(1, 0.3, 2.0, 3.0, 4.0);
        let fs = kalman_filter(&[], &scalar_spec(0, 1.0, 0.9, prior)).unwrap();
        let s = fs.last();
        assert_eq!((s.m[0], s.big_m[(0, 0)], s.n, s.d), (0.3, 2.0, 3.0, 4.0));
    }

    #[test]
    fn static_model_matches_batch_conjugate_update() {
        // y_i = θ + e_i, e_i ~ N(0, v), θ ~ N(m0, v M0), 1/v ~ Ga(n0, d0).
        let data = [0.4, -1.2, 2.5, 0.9, 1.1];
        let (m0, big_m0, n0, d0) = (0.5, 3.0, 2.0, 1.5);
        let fs = kalman_filter(
            &ys(&data),
            &scalar_spec(
                data.len(),
                0.0,
                1.0,
                NgPrior::isotropic(1, m0, big_m0, n0, d0),
            ),
        )
        .unwrap();
        let k = data.len() as f64;
        let sum: f64 = data.iter().sum();
        let post_prec = 1.0 / big_m0 + k;
        let m_post = (m0 / big_m0 + sum) / post_prec;
        let ss: f64 = data.iter().map(|y| y * y).sum::<f64>() + m0 * m0 / big_m0
            - m_post * m_post * post_prec;
        let last = fs.last();
        assert!((last.m[0] - m_post).abs() < 1e-12);
        assert!((last.big_m[(0, 0)] - 1.0 / post_prec).abs() < 1e-12);
        assert!((last.n - (n0 + k / 2.0)).abs() < 1e-12);
        assert!((last.d - (d0 + ss / 2.0)).abs() < 1e-12);
    }

    #[test]
    fn static_discount_accumulates_shape() {
        let data = [1.0, 2.0, 3.0, 4.0];
        let fs = kalman_filter(
            &ys(&data),
            &scalar_spec(4, 0.3, 1.0, NgPrior::isotropic(1, 0.0, 1.0, 1.0, 1.0)),
        )
        .unwrap();
        assert_eq!(fs.last().n, 1.0 + 4.0 / 2.0);
    }

    #[test]
    fn static_variance_when_discount_is_one() {
        let data = [0.1, 0.3, -0.2, 0.5];
        let spec = scalar_spec(4, 0.5, 1.0, NgPrior::isotropic(1, 0.0, 1.0, 2.0, 1.0));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (draw, _) = ffbs(&ys(&data), &spec, Smoother::Conditional, &mut rng).unwrap();
        assert!(draw.v.iter().all(|&v| v == draw.v[0]));
    }

    #[test]
    fn degenerate_evolution_freezes_theta() {
        let data = [0.1, 0.3, -0.2, 0.5];
        let spec = scalar_spec(4, 0.0, 0.9, NgPrior::isotropic(1, 0.0, 1.0, 2.0, 1.0));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (draw, _) = ffbs(&ys(&data), &spec, Smoother::Conditional, &mut rng).unwrap();
        for th in &draw.theta {
            assert!((th[0] - draw.theta[0][0]).abs() < 1e-8);
        }
    }

    #[test]
    fn ffbs_is_deterministic_given_seed() {
        let data = [0.1, 0.3, -0.2, 0.5];
        let spec = scalar_spec(4, 0.5, 0.9, NgPrior::isotropic(1, 0.0, 1.0, 2.0, 1.0));
        let a = ffbs(
            &ys(&data),
            &spec,
            Smoother::Conditional,
            &mut ChaCha8Rng::seed_from_u64(9),
        )
        .unwrap()
        .0;
        let b = ffbs(
            &ys(&data),
            &spec,
            Smoother::Conditional,
            &mut ChaCha8Rng::seed_from_u64(9),
        )
        .unwrap()
        .0;
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_discount_rejected() {
        let spec = scalar_spec(1, 0.5, 1.5, NgPrior::isotropic(1, 0.0, 1.0, 2.0, 1.0));
        assert!(kalman_filter(&ys(&[1.0]), &spec).is_err());
    }

    #[test]
    fn singular_forecast_scale_reports_time() {
        let spec = SsmSpec {
            obs: Observation::Dense {
                f: vec![DMatrix::zeros(2, 1); 2],
                v: DMatrix::zeros(2, 2),
            },
            transition: Transition::Identity,
            state_noise: StateNoise::Fixed(DMatrix::identity(1, 1)),
            omega: 0.9,
            prior: NgPrior::isotropic(1, 0.0, 1.0, 1.0, 1.0),
        };
        let y = vec![DVector::zeros(2); 2];
        let err = kalman_filter(&y, &spec).unwrap_err().to_string();
        assert!(err.contains("time 1"), "{err}");
    }

    fn site_fixture() -> (
        Vec<DVector<f64>>,
        Vec<Vec<DMatrix<f64>>>,
        DMatrix<f64>,
        DMatrix<f64>,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (n, sites, horizon) = (3, 2, 4);
        let v = DMatrix::from_row_slice(3, 3, &[1.0, 0.4, 0.1, 0.4, 1.0, 0.3, 0.1, 0.3, 1.0]);
        let w = DMatrix::from_row_slice(2, 2, &[1.0, 0.6, 0.6, 1.0]) * 0.2;
        let f: Vec<Vec<DMatrix<f64>>> = (0..horizon)
            .map(|_| {
                (0..sites)
                    .map(|_| DMatrix::from_fn(n, 1, |_, _| rng.random_range(-1.0..2.0)))
                    .collect()
            })
            .collect();
        let y = (0..horizon)
            .map(|_| DVector::from_fn(n * sites, |_, _| rng.random_range(-1.0..1.0)))
            .collect();
        (y, f, v, w)
    }

    #[test]
    fn site_blocks_agree_with_dense_observation() {
        let (y, f, v, w) = site_fixture();
        let prior = NgPrior::isotropic(2, 0.2, 1.5, 2.0, 1.0);
        let blocks = SsmSpec {
            obs: Observation::SiteBlocks {
                f: f.clone(),
                v: v.clone(),
            },
            transition: Transition::Identity,
            state_noise: StateNoise::Fixed(w.clone()),
            omega: 0.9,
            prior: prior.clone(),
        };
        let dense_f = f
            .iter()
            .map(|sites| {
                let mut m = DMatrix::zeros(6, 2);
                m.view_mut((0, 0), (3, 1)).copy_from(&sites[0]);
                m.view_mut((3, 1), (3, 1)).copy_from(&sites[1]);
                m
            })
            .collect();
        let dense = SsmSpec {
            obs: Observation::Dense {
                f: dense_f,
                v: DMatrix::identity(2, 2).kronecker(&v),
            },
            transition: Transition::Identity,
            state_noise: StateNoise::Fixed(w),
            omega: 0.9,
            prior,
        };
        let a = kalman_filter(&y, &blocks).unwrap();
        let b = kalman_filter(&y, &dense).unwrap();
        for (sa, sb) in a.steps.iter().zip(&b.steps) {
            assert!((&sa.m - &sb.m).amax() < 1e-10);
            assert!((&sa.big_m - &sb.big_m).amax() < 1e-10);
            assert!((sa.d - sb.d).abs() < 1e-10);
            assert!((sa.log_pred - sb.log_pred).abs() < 1e-10);
        }
    }

    #[test]
    fn log_predictive_matches_direct_student_t() {
        let (y, f, v, w) = site_fixture();
        let dense_f: Vec<DMatrix<f64>> = f.iter().map(|s| s[0].clone()).collect();
        let yy: Vec<DVector<f64>> = y.iter().map(|v| v.rows(0, 3).into_owned()).collect();
        let spec = SsmSpec {
            obs: Observation::Dense { f: dense_f, v },
            transition: Transition::Identity,
            state_noise: StateNoise::Fixed(w.view((0, 0), (1, 1)).into_owned()),
            omega: 0.85,
            prior: NgPrior::isotropic(1, 0.0, 1.0, 3.0, 2.0),
        };
        let fs = kalman_filter(&yy, &spec).unwrap();
        for (t, step) in fs.steps.iter().enumerate().skip(1) {
            let q = step.q.as_ref().unwrap();
            let scale = step.big_q.as_ref().unwrap() * (step.d_star / step.n_star);
            let nu = 2.0 * step.n_star;
            let k = 3.0;
            let e = &yy[t - 1] - q;
            let inv = scale.clone().try_inverse().unwrap();
            let maha = (e.transpose() * inv * &e)[0];
            let direct = ln_gamma((nu + k) / 2.0)
                - ln_gamma(nu / 2.0)
                - k / 2.0 * (nu * std::f64::consts::PI).ln()
                - 0.5 * scale.determinant().ln()
                - (nu + k) / 2.0 * (1.0 + maha / nu).ln();
            assert!((direct - step.log_pred).abs() < 1e-10);
        }
    }

    #[test]
    fn rotated_walk_matches_general_filter() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = DMatrix::from_row_slice(3, 3, &[1.0, 0.5, 0.2, 0.5, 1.0, 0.5, 0.2, 0.5, 1.0]);
        let y: Vec<DVector<f64>> = (0..5)
            .map(|_| DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0)))
            .collect();
        let m0 = DVector::from_vec(vec![0.1, 0.0, -0.1]);
        let spec = SsmSpec {
            obs: Observation::Dense {
                f: vec![DMatrix::identity(3, 3); 5],
                v: DMatrix::identity(3, 3),
            },
            transition: Transition::Identity,
            state_noise: StateNoise::Fixed(w.clone()),
            omega: 0.9,
            prior: NgPrior::new(m0.clone(), DMatrix::identity(3, 3) * 2.0, 1.5, 0.7),
        };
        let general = kalman_filter(&y, &spec).unwrap();
        let rw = RotatedRandomWalk::new(&w).unwrap();
        let rot = rw.filter(&y, 0.9, &m0, 2.0, 1.5, 0.7).unwrap();
        for t in 0..=5 {
            let (m, big_m) = rw.unrotate(&rot.m[t], &rot.big_m[t]);
            assert!((m - &general.steps[t].m).amax() < 1e-10);
            assert!((big_m - &general.steps[t].big_m).amax() < 1e-10);
            assert!((rot.d[t] - general.steps[t].d).abs() < 1e-10);
            assert!((rot.log_pred[t] - general.steps[t].log_pred).abs() < 1e-10);
        }
        let draw = rw.backward_sample(&rot, &mut rng).unwrap();
        assert_eq!(draw.theta.len(), 6);
        assert!(draw.v.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn zero_shape_gamma_is_point_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(gamma_draw(0.0, 2.0, &mut rng).unwrap(), 0.0);
        assert_eq!(
            backward_precision(3.0, 1.0, 10.0, 2.0, &mut rng).unwrap(),
            3.0
        );
    }
}
