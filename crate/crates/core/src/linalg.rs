//! Small dense linear-algebra helpers shared by the filter, the kernels and
//! the samplers.

use nalgebra::{Cholesky, DMatrix, DMatrixView, DVector, Dyn, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{numeric, Result};

/// Diagonal jitter added to correlation matrices before factorization.
pub const JITTER: f64 = 1e-8;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Replace `m` by `(m + m') / 2`.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

/// Cholesky factor of a symmetric positive-definite matrix with its log-determinant.
#[derive(Clone, Debug)]
pub struct SpdFactor {
    chol: Cholesky<f64, Dyn>,
    log_det: f64,
    jitter: f64,
}

impl SpdFactor {
    /// Factor `m` as is; fails if `m` is not numerically positive definite.
    pub fn new(m: &DMatrix<f64>) -> Result<Self> {
        Self::try_factor(m.clone(), 0.0).ok_or_else(|| numeric(diagnose(m)))
    }

    /// Factor `m + jitter * I`, escalating the jitter tenfold (at most four
    /// times) when the first attempt fails.
    pub fn with_jitter(m: &DMatrix<f64>, jitter: f64) -> Result<Self> {
        let scale = mean_abs_diag(m).max(1.0);
        let mut eps = jitter;
        for _ in 0..5 {
            let mut shifted = m.clone();
            for i in 0..shifted.nrows() {
                shifted[(i, i)] += eps * scale;
            }
            if let Some(f) = Self::try_factor(shifted, eps * scale) {
                return Ok(f);
            }
            eps = if eps == 0.0 { JITTER } else { eps * 10.0 };
        }
        Err(numeric(diagnose(m)))
    }

    fn try_factor(m: DMatrix<f64>, jitter: f64) -> Option<Self> {
        // Non-finite input surfaces as a non-finite log-determinant.
        let chol = Cholesky::new(m)?;
        let log_det = 2.0
            * chol
                .l_dirty()
                .diagonal()
                .iter()
                .map(|d| d.ln())
                .sum::<f64>();
        log_det.is_finite().then_some(Self {
            chol,
            log_det,
            jitter,
        })
    }

    pub fn dim(&self) -> usize {
        self.chol.l_dirty().nrows()
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// Jitter that was actually added to the diagonal.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn lower(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    /// `L^{-1} b` for the lower factor `L`.
    pub fn half_solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        self.chol.l_dirty().solve_lower_triangular_mut(&mut x);
        x
    }

    /// `L^{-1} B` for the lower factor `L`.
    pub fn half_solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        lower_solve(&self.chol.l_dirty().as_view(), b.clone())
    }

    /// `x' M^{-1} x`.
    pub fn inv_quad(&self, x: &DVector<f64>) -> f64 {
        let y = self.half_solve(x);
        y.norm_squared()
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        let mut inv = self.chol.inverse();
        symmetrize(&mut inv);
        inv
    }
}

const SOLVE_BLOCK: usize = 48;

// Recursive blocked forward substitution; the off-diagonal update runs
// through the matrix product, which is much faster than column sweeps.
fn lower_solve(l: &DMatrixView<'_, f64>, mut b: DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    if n <= SOLVE_BLOCK {
        l.solve_lower_triangular_mut(&mut b);
        return b;
    }
    let k = n / 2;
    let x1 = lower_solve(&l.view((0, 0), (k, k)), b.rows(0, k).into_owned());
    let mut b2 = b.rows(k, n - k).into_owned();
    b2.gemm(-1.0, &l.view((k, 0), (n - k, k)), &x1, 1.0);
    let x2 = lower_solve(&l.view((k, k), (n - k, n - k)), b2);
    b.rows_mut(0, k).copy_from(&x1);
    b.rows_mut(k, n - k).copy_from(&x2);
    b
}

/// `X' Y`, routed through an explicit transpose so the product uses the
/// fast matrix-multiply kernel.
pub fn tr_mul(x: &DMatrix<f64>, y: &DMatrix<f64>) -> DMatrix<f64> {
    x.transpose() * y
}

fn mean_abs_diag(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows().max(1);
    m.diagonal().iter().map(|v| v.abs()).sum::<f64>() / n as f64
}

fn diagnose(m: &DMatrix<f64>) -> String {
    if m.iter().any(|v| !v.is_finite()) {
        return format!("{}x{} matrix has non-finite entries", m.nrows(), m.ncols());
    }
    let mut s = m.clone();
    symmetrize(&mut s);
    let eig = SymmetricEigen::new(s);
    let min = eig
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    let max = eig
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    format!(
        "{}x{} matrix is not positive definite (eigenvalues in [{min:.3e}, {max:.3e}], condition ~ {:.3e})",
        m.nrows(),
        m.ncols(),
        if min > 0.0 { max / min } else { f64::INFINITY }
    )
}

pub fn standard_normal_vec<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

/// Draw from `N(mean, scale * cov)`. `cov` may be singular; a Cholesky
/// factor is used when it exists and a clamped eigen-decomposition otherwise.
pub fn sample_mvn<R: Rng + ?Sized>(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    scale: f64,
    rng: &mut R,
) -> DVector<f64> {
    let n = mean.len();
    let z = standard_normal_vec(n, rng);
    let sd = scale.max(0.0).sqrt();
    if let Some(chol) = Cholesky::new(cov.clone()) {
        return mean + chol.l() * z * sd;
    }
    let mut s = cov.clone();
    symmetrize(&mut s);
    let eig = SymmetricEigen::new(s);
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    let scaled = DVector::from_iterator(n, z.iter().zip(roots.iter()).map(|(a, b)| a * b));
    mean + eig.eigenvectors * scaled * sd
}

/// Wishart draw with `df` degrees of freedom and scale matrix `scale`
/// (mean `df * scale`), by the Bartlett decomposition.
pub fn wishart_draw<R: Rng + ?Sized>(
    df: f64,
    scale: &DMatrix<f64>,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let p = scale.nrows();
    if !(df > p as f64 - 1.0) {
        return Err(numeric(format!(
            "Wishart needs df > p - 1, got df = {df}, p = {p}"
        )));
    }
    let l = SpdFactor::new(scale)?.lower();
    let mut a = DMatrix::zeros(p, p);
    for i in 0..p {
        let chi2 = Gamma::new(0.5 * (df - i as f64), 2.0).map_err(|e| numeric(e.to_string()))?;
        a[(i, i)] = chi2.sample(rng).sqrt();
        for j in 0..i {
            a[(i, j)] = rng.sample::<f64, _>(StandardNormal);
        }
    }
    let la = l * a;
    let mut x = &la * la.transpose();
    symmetrize(&mut x);
    Ok(x)
}

/// Log density of `N(0, scale * M)` at `x`, given the factor of `M`.
pub fn mvn_log_density(x: &DVector<f64>, factor: &SpdFactor, scale: f64) -> f64 {
    let n = x.len() as f64;
    -0.5 * (n * (LN_2PI + scale.ln()) + factor.log_det() + factor.inv_quad(x) / scale)
}

pub fn ln_2pi() -> f64 {
    LN_2PI
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn spd() -> DMatrix<f64> {
        DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0])
    }

    #[test]
    fn factor_matches_dense_inverse_and_determinant() {
        let m = spd();
        let f = SpdFactor::new(&m).unwrap();
        let x = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let dense = m.clone().try_inverse().unwrap();
        assert!((f.inv_quad(&x) - (x.transpose() * &dense * &x)[0]).abs() < 1e-12);
        assert!((f.log_det() - m.determinant().ln()).abs() < 1e-12);
        assert!((f.inverse() - dense).amax() < 1e-12);
        let h = f.half_solve(&x);
        assert!((f.lower() * h - x).amax() < 1e-12);
    }

    #[test]
    fn jitter_rescues_rank_one_matrix() {
        let m = DMatrix::from_element(2, 2, 1.0);
        assert!(SpdFactor::new(&m).is_err());
        let f = SpdFactor::with_jitter(&m, JITTER).unwrap();
        assert!(f.jitter() > 0.0);
    }

    #[test]
    fn singular_covariance_still_samples() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mean = DVector::from_vec(vec![1.0, 2.0]);
        let draw = sample_mvn(&mean, &DMatrix::zeros(2, 2), 1.0, &mut rng);
        assert_eq!(draw, mean);
    }

    #[test]
    fn wishart_mean_matches_df_times_scale() {
        let scale = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let draws = 20_000;
        let mut mean = DMatrix::zeros(2, 2);
        for _ in 0..draws {
            mean += wishart_draw(5.0, &scale, &mut rng).unwrap();
        }
        mean /= draws as f64;
        let expect = &scale * 5.0;
        // Var(X_ij) = df (s_ij^2 + s_ii s_jj); allow 4 standard errors.
        for i in 0..2 {
            for j in 0..2 {
                let sd = (5.0 * (scale[(i, j)].powi(2) + scale[(i, i)] * scale[(j, j)])
                    / draws as f64)
                    .sqrt();
                assert!((mean[(i, j)] - expect[(i, j)]).abs() < 4.0 * sd);
            }
        }
    }
}
