//! Correlation functions over simulator inputs and space, the separable
//! Kronecker cross-correlation `H ⊗ T`, and the knot-based predictive process.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim, invalid, numeric, Result};
use crate::linalg::{symmetrize, SpdFactor, JITTER};

/// Decay rates of the three squared-exponential processes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RangeParams {
    /// Input-space decay rates, one per simulator input.
    pub beta: Vec<f64>,
    /// Spatial decay rates of the latent innovation process.
    pub omega_sp: Vec<f64>,
    /// Spatial decay rates of the bias process.
    pub rho: Vec<f64>,
}

impl RangeParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("beta", &self.beta),
            ("omega_sp", &self.omega_sp),
            ("rho", &self.rho),
        ] {
            check_positive(name, v)?;
        }
        Ok(())
    }
}

pub(crate) fn check_positive(name: &str, v: &[f64]) -> Result<()> {
    if let Some(bad) = v.iter().find(|x| !(x.is_finite() && **x > 0.0)) {
        return Err(invalid(format!(
            "{name} entries must be positive and finite, got {bad}"
        )));
    }
    Ok(())
}

/// Non-identifiable cross-covariance `T` of the latent state with its
/// inverse-Wishart prior.
#[derive(Clone, Debug)]
pub struct CrossCovT {
    pub t: DMatrix<f64>,
    pub prior_dof: f64,
    pub prior_scale: DMatrix<f64>,
}

impl CrossCovT {
    /// Default prior: `T = I`, `nu0 = p + 2`, `T0 = I`.
    pub fn identity(p: usize) -> Self {
        Self {
            t: DMatrix::identity(p, p),
            prior_dof: p as f64 + 2.0,
            prior_scale: DMatrix::identity(p, p),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.t.nrows();
        if self.t.ncols() != p || self.prior_scale.shape() != (p, p) {
            return Err(dim("T and its prior scale must both be p x p"));
        }
        if !(self.prior_dof > 0.0) {
            return Err(invalid(
                "inverse-Wishart degrees of freedom must be positive",
            ));
        }
        SpdFactor::new(&self.t)?;
        SpdFactor::new(&self.prior_scale)?;
        Ok(())
    }
}

/// `exp(-sum_i beta_i (x_i - x'_i)^2)`.
pub fn sq_exp_corr(x: &[f64], x_prime: &[f64], beta: &[f64]) -> Result<f64> {
    if x.len() != x_prime.len() || x.len() != beta.len() {
        return Err(dim(format!(
            "correlation arguments have lengths {}, {} and {} decay rates",
            x.len(),
            x_prime.len(),
            beta.len()
        )));
    }
    Ok(sq_exp_unchecked(x, x_prime, beta))
}

#[inline]
fn sq_exp_unchecked(x: &[f64], x_prime: &[f64], beta: &[f64]) -> f64 {
    let mut acc = 0.0;
    for ((a, b), w) in x.iter().zip(x_prime).zip(beta) {
        let d = a - b;
        acc += w * d * d;
    }
    (-acc).exp()
}

fn check_points(points: &[Vec<f64>], beta: &[f64]) -> Result<()> {
    if let Some(p) = points.iter().find(|p| p.len() != beta.len()) {
        return Err(dim(format!(
            "point of dimension {} with {} decay rates",
            p.len(),
            beta.len()
        )));
    }
    Ok(())
}

/// `N x N` correlation matrix of a point set (no jitter).
pub fn corr_matrix(points: &[Vec<f64>], beta: &[f64]) -> Result<DMatrix<f64>> {
    check_points(points, beta)?;
    let n = points.len();
    let mut m = DMatrix::identity(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let c = sq_exp_unchecked(&points[i], &points[j], beta);
            m[(i, j)] = c;
            m[(j, i)] = c;
        }
    }
    Ok(m)
}

/// Correlations between two point sets, `a.len() x b.len()`.
pub fn cross_corr(a: &[Vec<f64>], b: &[Vec<f64>], beta: &[f64]) -> Result<DMatrix<f64>> {
    check_points(a, beta)?;
    check_points(b, beta)?;
    Ok(DMatrix::from_fn(a.len(), b.len(), |i, j| {
        sq_exp_unchecked(&a[i], &b[j], beta)
    }))
}

/// Correlations between one point and a set, as a column vector.
pub fn corr_vector(points: &[Vec<f64>], x: &[f64], beta: &[f64]) -> Result<DVector<f64>> {
    check_points(points, beta)?;
    if x.len() != beta.len() {
        return Err(dim("query point dimension does not match decay rates"));
    }
    Ok(DVector::from_iterator(
        points.len(),
        points.iter().map(|p| sq_exp_unchecked(p, x, beta)),
    ))
}

/// Index of the first point exactly equal to `x`.
pub fn coincident_index(points: &[Vec<f64>], x: &[f64]) -> Option<usize> {
    points.iter().position(|p| p.as_slice() == x)
}

/// Add `eps` to the diagonal.
pub fn with_jitter(mut m: DMatrix<f64>, eps: f64) -> DMatrix<f64> {
    for i in 0..m.nrows() {
        m[(i, i)] += eps;
    }
    m
}

/// Correlation matrix `h(T)_{ij} = T_ij / sqrt(T_ii T_jj)`.
pub fn corr_from_cov(t: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let p = t.nrows();
    if t.ncols() != p {
        return Err(dim("covariance must be square"));
    }
    if let Some(i) = (0..p).find(|&i| !(t[(i, i)] > 0.0)) {
        return Err(numeric(format!(
            "covariance has non-positive diagonal entry at {i}"
        )));
    }
    let sd: Vec<f64> = (0..p).map(|i| t[(i, i)].sqrt()).collect();
    let mut h = DMatrix::from_fn(p, p, |i, j| {
        if i == j {
            1.0
        } else {
            t[(i, j)] / (sd[i] * sd[j])
        }
    });
    symmetrize(&mut h);
    Ok(h)
}

/// Weight on the adjacency term of the graph correlation.
pub const GRAPH_COUPLING: f64 = 0.5;

/// Fixed node correlation for a network domain:
/// `I + GRAPH_COUPLING * A / deg_max`. Off-diagonal row sums are at most
/// `GRAPH_COUPLING`, so the matrix is strictly diagonally dominant.
pub fn graph_corr(adjacency: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = adjacency.nrows();
    if adjacency.ncols() != n {
        return Err(dim("adjacency must be square"));
    }
    for i in 0..n {
        if adjacency[(i, i)] != 0.0 {
            return Err(invalid("adjacency must have a zero diagonal"));
        }
        for j in 0..n {
            let a = adjacency[(i, j)];
            if a != adjacency[(j, i)] || !(a == 0.0 || a == 1.0) {
                return Err(invalid("adjacency must be a symmetric 0/1 matrix"));
            }
        }
    }
    let deg_max = (0..n).map(|i| adjacency.row(i).sum()).fold(0.0, f64::max);
    let mut h = DMatrix::identity(n, n);
    if deg_max > 0.0 {
        h += adjacency * (GRAPH_COUPLING / deg_max);
    }
    Ok(h)
}

/// `W = H ⊗ T`, kept in factored form.
#[derive(Clone, Debug)]
pub struct KroneckerCorr {
    h: DMatrix<f64>,
    t: DMatrix<f64>,
    h_factor: SpdFactor,
    t_factor: SpdFactor,
}

impl KroneckerCorr {
    /// Factor `H` and `T` as given (no jitter).
    pub fn new(h: DMatrix<f64>, t: DMatrix<f64>) -> Result<Self> {
        if h.nrows() != h.ncols() || t.nrows() != t.ncols() {
            return Err(dim("Kronecker factors must be square"));
        }
        let h_factor = SpdFactor::new(&h).map_err(|e| numeric(format!("spatial factor H: {e}")))?;
        let t_factor =
            SpdFactor::new(&t).map_err(|e| numeric(format!("cross-covariance T: {e}")))?;
        Ok(Self {
            h,
            t,
            h_factor,
            t_factor,
        })
    }

    pub fn h(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn t(&self) -> &DMatrix<f64> {
        &self.t
    }

    pub fn n_sites(&self) -> usize {
        self.h.nrows()
    }

    pub fn p(&self) -> usize {
        self.t.nrows()
    }

    pub fn dim(&self) -> usize {
        self.n_sites() * self.p()
    }

    /// `log|H ⊗ T| = p log|H| + S log|T|`.
    pub fn log_det(&self) -> f64 {
        self.p() as f64 * self.h_factor.log_det() + self.n_sites() as f64 * self.t_factor.log_det()
    }

    // Site-major stacking: u[i * p + a] is component a at site i.
    fn as_grid(&self, u: &DVector<f64>) -> DMatrix<f64> {
        let (s, p) = (self.n_sites(), self.p());
        DMatrix::from_fn(s, p, |i, a| u[i * p + a])
    }

    /// `(H^{-1} ⊗ T^{-1}) u`.
    pub fn solve(&self, u: &DVector<f64>) -> DVector<f64> {
        assert_eq!(u.len(), self.dim(), "vector length must be S * p");
        let x = self.h_factor.solve_mat(&self.as_grid(u));
        let y = self.t_factor.solve_mat(&x.transpose());
        // y is p x S; flatten site-major.
        DVector::from_iterator(
            self.dim(),
            (0..self.n_sites())
                .flat_map(|i| (0..self.p()).map(move |a| (i, a)))
                .map(|(i, a)| y[(a, i)]),
        )
    }

    /// `u' (H ⊗ T)^{-1} u`.
    pub fn inv_quad(&self, u: &DVector<f64>) -> f64 {
        u.dot(&self.solve(u))
    }

    pub fn dense(&self) -> DMatrix<f64> {
        self.h.kronecker(&self.t)
    }
}

/// Build `W = (H(Ω) + jitter I) ⊗ T` over a set of locations.
pub fn kron_corr(
    locations: &[Vec<f64>],
    omega_sp: &[f64],
    t: &DMatrix<f64>,
) -> Result<KroneckerCorr> {
    if locations.is_empty() {
        return Err(invalid("at least one location is required"));
    }
    check_positive("omega_sp", omega_sp)?;
    let h = with_jitter(corr_matrix(locations, omega_sp)?, JITTER);
    KroneckerCorr::new(h, t.clone())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnotPlacement {
    Grid,
    Random { seed: u64 },
}

/// Reduced set of spatial sites anchoring the predictive process.
#[derive(Clone, Debug, PartialEq)]
pub struct KnotSet {
    pub knots: Vec<Vec<f64>>,
    pub placement: KnotPlacement,
}

impl KnotSet {
    /// Cell-centred regular grid with `per_dim` knots along each axis of the
    /// box `[lo, hi]`.
    pub fn grid(lo: &[f64], hi: &[f64], per_dim: usize) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() {
            return Err(dim("grid bounds must have equal, nonzero length"));
        }
        if per_dim == 0 {
            return Err(invalid("need at least one knot per dimension"));
        }
        let d = lo.len();
        let total = per_dim.pow(d as u32);
        let knots = (0..total)
            .map(|mut k| {
                let mut pt = vec![0.0; d];
                for (axis, slot) in pt.iter_mut().enumerate() {
                    let idx = k % per_dim;
                    k /= per_dim;
                    *slot = lo[axis] + (idx as f64 + 0.5) * (hi[axis] - lo[axis]) / per_dim as f64;
                }
                pt
            })
            .collect();
        Ok(Self {
            knots,
            placement: KnotPlacement::Grid,
        })
    }

    /// `count` distinct locations drawn without replacement.
    pub fn random(candidates: &[Vec<f64>], count: usize, seed: u64) -> Result<Self> {
        if count == 0 || count > candidates.len() {
            return Err(invalid(format!(
                "cannot draw {count} knots from {} locations",
                candidates.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = sample(&mut rng, candidates.len(), count).into_vec();
        idx.sort_unstable();
        let knots = idx.into_iter().map(|i| candidates[i].clone()).collect();
        let set = Self {
            knots,
            placement: KnotPlacement::Random { seed },
        };
        set.validate()?;
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.knots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.knots.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.knots.is_empty() {
            return Err(invalid("knot set is empty"));
        }
        for i in 0..self.knots.len() {
            for j in (i + 1)..self.knots.len() {
                if self.knots[i] == self.knots[j] {
                    return Err(invalid(format!("knots {i} and {j} coincide")));
                }
            }
        }
        Ok(())
    }
}

/// Low-rank predictive process
/// `K**(s, s') = k(s)' K*^{-1} k(s') + 1(s = s') Δ(s)` with the separable
/// kernel `K(s, s') = C(s, s'; Ω) T`. Because the kernel is separable the
/// projection reduces to the scalar `q(s, s') = h*(s)' H*^{-1} h*(s')`
/// times `T`.
#[derive(Clone, Debug)]
pub struct PredictiveProcess {
    knots: Vec<Vec<f64>>,
    omega: Vec<f64>,
    t: DMatrix<f64>,
    knot_factor: SpdFactor,
}

impl PredictiveProcess {
    pub fn new(knots: &KnotSet, omega_sp: &[f64], t: &DMatrix<f64>) -> Result<Self> {
        knots.validate()?;
        check_positive("omega_sp", omega_sp)?;
        let h_star = corr_matrix(&knots.knots, omega_sp)?;
        let knot_factor = SpdFactor::with_jitter(&h_star, JITTER)
            .map_err(|e| numeric(format!("knot correlation K*: {e}")))?;
        Ok(Self {
            knots: knots.knots.clone(),
            omega: omega_sp.to_vec(),
            t: t.clone(),
            knot_factor,
        })
    }

    pub fn n_knots(&self) -> usize {
        self.knots.len()
    }

    // L^{-1} h*(s) for the knot factor L; the projection is a dot product of
    // two of these, which keeps q(s, s') == q(s', s) bit for bit.
    fn whitened(&self, s: &[f64]) -> Result<DVector<f64>> {
        Ok(self
            .knot_factor
            .half_solve(&corr_vector(&self.knots, s, &self.omega)?))
    }

    /// Scalar projected correlation `q(s, s')`. When either argument is a
    /// knot the projection is exact and equals `C(s, s'; Ω)`.
    pub fn projected(&self, s: &[f64], s_prime: &[f64]) -> Result<f64> {
        if coincident_index(&self.knots, s).is_some()
            || coincident_index(&self.knots, s_prime).is_some()
        {
            return sq_exp_corr(s, s_prime, &self.omega);
        }
        Ok(self.whitened(s)?.dot(&self.whitened(s_prime)?))
    }

    /// Diagonal of the bias correction `Δ(s) = K(s, s) - k(s)' K*^{-1} k(s)`,
    /// clamped at zero.
    pub fn delta(&self, s: &[f64]) -> Result<DVector<f64>> {
        let q = self.projected(s, s)?;
        let shrink = (1.0 - q).max(0.0);
        Ok(self.t.diagonal() * shrink)
    }

    /// The `p x p` block `K**(s, s')`.
    pub fn block(&self, s: &[f64], s_prime: &[f64]) -> Result<DMatrix<f64>> {
        let q = self.projected(s, s_prime)?;
        let mut b = &self.t * q;
        if s == s_prime {
            let d = self.delta(s)?;
            for a in 0..d.len() {
                b[(a, a)] += d[a];
            }
        }
        Ok(b)
    }

    /// Full `pS x pS` correlation over a location set, site-major.
    pub fn corr_matrix(&self, locations: &[Vec<f64>]) -> Result<DMatrix<f64>> {
        let p = self.t.nrows();
        let n = locations.len();
        let at_knot: Vec<bool> = locations
            .iter()
            .map(|l| coincident_index(&self.knots, l).is_some())
            .collect();
        let white: Vec<Option<DVector<f64>>> = locations
            .iter()
            .zip(&at_knot)
            .map(|(l, &k)| {
                if k {
                    Ok(None)
                } else {
                    self.whitened(l).map(Some)
                }
            })
            .collect::<Result<_>>()?;
        let mut q = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let v = match (&white[i], &white[j]) {
                    (Some(a), Some(b)) => a.dot(b),
                    _ => sq_exp_corr(&locations[i], &locations[j], &self.omega)?,
                };
                q[(i, j)] = v;
                q[(j, i)] = v;
            }
        }
        let mut w = q.kronecker(&self.t);
        for i in 0..n {
            let shrink = (1.0 - q[(i, i)]).max(0.0);
            for a in 0..p {
                w[(i * p + a, i * p + a)] += shrink * self.t[(a, a)];
            }
        }
        Ok(w)
    }
}

/// One `p x p` block of the predictive-process correlation.
pub fn predictive_process_corr(
    knots: &KnotSet,
    s: &[f64],
    s_prime: &[f64],
    omega_sp: &[f64],
    t: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    PredictiveProcess::new(knots, omega_sp, t)?.block(s, s_prime)
}
