//! Built-in mechanistic simulators used to produce training ensembles and
//! synthetic field data. All simulators are deterministic.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, numeric, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LvParams {
    /// Prey growth, predation, predator death, conversion.
    pub eta: [f64; 4],
    pub u0: f64,
    pub v0: f64,
    /// RK4 step.
    pub dt: f64,
    /// Number of output times after the initial state.
    pub horizon: usize,
    /// Spacing between outputs.
    pub output_every: f64,
}

fn lv_rhs(eta: &[f64; 4], u: f64, v: f64) -> (f64, f64) {
    (eta[0] * u - eta[1] * u * v, -eta[2] * v + eta[3] * u * v)
}

/// One classical Runge-Kutta step.
pub fn rk4_step(eta: &[f64; 4], u: f64, v: f64, h: f64) -> (f64, f64) {
    let (k1u, k1v) = lv_rhs(eta, u, v);
    let (k2u, k2v) = lv_rhs(eta, u + 0.5 * h * k1u, v + 0.5 * h * k1v);
    let (k3u, k3v) = lv_rhs(eta, u + 0.5 * h * k2u, v + 0.5 * h * k2v);
    let (k4u, k4v) = lv_rhs(eta, u + h * k3u, v + h * k3v);
    (
        u + h / 6.0 * (k1u + 2.0 * k2u + 2.0 * k3u + k4u),
        v + h / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v),
    )
}

/// Prey and predator populations at `t = 0, Δ, ..., horizon·Δ`.
pub fn solve_lotka_volterra(p: &LvParams) -> Result<Vec<[f64; 2]>> {
    if !(p.dt > 0.0 && p.output_every > 0.0) || !(p.u0 > 0.0 && p.v0 > 0.0) {
        return Err(invalid(
            "Lotka-Volterra needs positive dt, output spacing and initial populations",
        ));
    }
    if p.eta.iter().any(|e| !e.is_finite() || *e < 0.0) {
        return Err(invalid(
            "Lotka-Volterra rates must be finite and non-negative",
        ));
    }
    let substeps = (p.output_every / p.dt).round().max(1.0) as usize;
    let h = p.output_every / substeps as f64;
    let (mut u, mut v) = (p.u0, p.v0);
    let mut out = Vec::with_capacity(p.horizon + 1);
    out.push([u, v]);
    for k in 1..=p.horizon {
        for _ in 0..substeps {
            (u, v) = rk4_step(&p.eta, u, v, h);
            if !(u > 0.0 && v > 0.0) || !u.is_finite() || !v.is_finite() {
                return Err(numeric(format!(
                    "Lotka-Volterra populations left the positive orthant before output {k}; reduce dt (currently {h})"
                )));
            }
        }
        out.push([u, v]);
    }
    Ok(out)
}

/// First integral of the Lotka-Volterra system.
pub fn lv_invariant(eta: &[f64; 4], u: f64, v: f64) -> f64 {
    eta[3] * u - eta[2] * u.ln() + eta[1] * v - eta[0] * v.ln()
}

/// Explicit-Euler transition for 1-D diffusion with zero Dirichlet boundary:
/// tridiagonal with `1 - 2λ` on the diagonal and `λ` beside it,
/// `λ = α Δt / Δs²`.
pub fn build_diffusion_transition(alpha: f64, dt: f64, ds: f64, n: usize) -> Result<DMatrix<f64>> {
    if !(alpha >= 0.0 && dt > 0.0 && ds > 0.0) || n == 0 {
        return Err(invalid(
            "diffusion transition needs alpha >= 0, dt > 0, ds > 0 and n >= 1",
        ));
    }
    let lambda = alpha * dt / (ds * ds);
    if lambda > 0.5 {
        return Err(numeric(format!(
            "explicit diffusion is unstable: alpha*dt/ds^2 = {lambda} exceeds 1/2"
        )));
    }
    let mut g = DMatrix::zeros(n, n);
    for i in 0..n {
        g[(i, i)] = 1.0 - 2.0 * lambda;
        if i > 0 {
            g[(i, i - 1)] = lambda;
        }
        if i + 1 < n {
            g[(i, i + 1)] = lambda;
        }
    }
    Ok(g)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SirPdeParams {
    /// Transmission rate.
    pub eta1: f64,
    /// Recovery rate.
    pub eta2: f64,
    /// Diffusion coefficients for S, I and R.
    pub alpha: [f64; 3],
    /// Cells per side of the square grid.
    pub n: usize,
    /// Cell width.
    pub ds: f64,
    /// Euler step.
    pub dt: f64,
    /// Population per cell.
    pub n_pop: f64,
    /// Initially infected cells as `(row, col, count)`.
    pub seeds: Vec<(usize, usize, f64)>,
    /// Number of outputs after the initial state.
    pub horizon: usize,
    /// Euler steps between outputs.
    pub steps_per_output: usize,
}

impl SirPdeParams {
    /// Infections diffuse; susceptible and recovered stay put.
    pub fn infection_diffusion_only(mut self) -> Self {
        self.alpha[0] = 0.0;
        self.alpha[2] = 0.0;
        self
    }
}

/// Compartment fields per output time, cells flattened row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SirOutput {
    pub s: Vec<Vec<f64>>,
    pub i: Vec<Vec<f64>>,
    pub r: Vec<Vec<f64>>,
}

/// 5-point Laplacian with zero values outside the grid.
fn laplacian(u: &[f64], n: usize, ds: f64, out: &mut [f64]) {
    let inv = 1.0 / (ds * ds);
    for row in 0..n {
        for col in 0..n {
            let k = row * n + col;
            let up = if row > 0 { u[k - n] } else { 0.0 };
            let down = if row + 1 < n { u[k + n] } else { 0.0 };
            let left = if col > 0 { u[k - 1] } else { 0.0 };
            let right = if col + 1 < n { u[k + 1] } else { 0.0 };
            out[k] = (up + down + left + right - 4.0 * u[k]) * inv;
        }
    }
}

/// Forward Euler in time, central differences in space, zero Dirichlet
/// boundary.
pub fn solve_sir_rd(p: &SirPdeParams) -> Result<SirOutput> {
    if p.n == 0 || !(p.ds > 0.0 && p.dt > 0.0 && p.n_pop > 0.0) || p.steps_per_output == 0 {
        return Err(invalid(
            "SIR grid needs n >= 1, positive ds, dt, population and output spacing",
        ));
    }
    if p.eta1 < 0.0 || p.eta2 < 0.0 || p.alpha.iter().any(|a| *a < 0.0) {
        return Err(invalid(
            "SIR rates and diffusion coefficients must be non-negative",
        ));
    }
    for (k, a) in p.alpha.iter().enumerate() {
        let ratio = a * p.dt / (p.ds * p.ds);
        if ratio > 0.25 {
            return Err(numeric(format!(
                "explicit 2-D diffusion is unstable: alpha{}*dt/ds^2 = {ratio} exceeds 1/4",
                k + 1
            )));
        }
    }
    let cells = p.n * p.n;
    let mut s = vec![p.n_pop; cells];
    let mut i = vec![0.0; cells];
    let mut r = vec![0.0; cells];
    for &(row, col, count) in &p.seeds {
        if row >= p.n || col >= p.n || !(0.0..=p.n_pop).contains(&count) {
            return Err(invalid(format!(
                "seed ({row}, {col}, {count}) is outside the grid or population"
            )));
        }
        let k = row * p.n + col;
        i[k] = count;
        s[k] = p.n_pop - count;
    }
    let mut out = SirOutput {
        s: vec![s.clone()],
        i: vec![i.clone()],
        r: vec![r.clone()],
    };
    let (mut ls, mut li, mut lr) = (vec![0.0; cells], vec![0.0; cells], vec![0.0; cells]);
    for step in 1..=p.horizon * p.steps_per_output {
        laplacian(&s, p.n, p.ds, &mut ls);
        laplacian(&i, p.n, p.ds, &mut li);
        laplacian(&r, p.n, p.ds, &mut lr);
        for k in 0..cells {
            let infect = p.eta1 * s[k] * i[k] / p.n_pop;
            let recover = p.eta2 * i[k];
            s[k] += p.dt * (-infect + p.alpha[0] * ls[k]);
            i[k] += p.dt * (infect - recover + p.alpha[1] * li[k]);
            r[k] += p.dt * (recover + p.alpha[2] * lr[k]);
            let tol = -1e-9 * p.n_pop;
            if !(s[k] >= tol && i[k] >= tol && r[k] >= tol) {
                return Err(numeric(format!(
                    "SIR solution became negative or non-finite at step {step}, cell {k}; reduce dt so that eta*dt << 1 and alpha*dt/ds^2 <= 1/4"
                )));
            }
        }
        if step % p.steps_per_output == 0 {
            out.s.push(s.clone());
            out.i.push(i.clone());
            out.r.push(r.clone());
        }
    }
    Ok(out)
}

/// Cell-centre coordinates of an `n x n` grid over `[0, 1]^2`, row-major.
pub fn grid_centres(n: usize) -> Vec<Vec<f64>> {
    let h = 1.0 / n as f64;
    (0..n * n)
        .map(|k| vec![(k / n) as f64 * h + 0.5 * h, (k % n) as f64 * h + 0.5 * h])
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Retention {
    Scalar(f64),
    PerNode(Vec<f64>),
}

impl Retention {
    fn at(&self, node: usize) -> f64 {
        match self {
            Retention::Scalar(r) => *r,
            Retention::PerNode(rs) => rs[node],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetParams {
    /// Symmetric 0/1 adjacency with zero diagonal.
    pub adjacency: DMatrix<f64>,
    pub retention: Retention,
    pub decay: f64,
    pub initial: Vec<f64>,
    /// Number of steps after the initial state.
    pub horizon: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetOutput {
    /// Activation reported per node: the inflow.
    pub inflow: Vec<Vec<f64>>,
    pub reservoir: Vec<Vec<f64>>,
}

pub fn validate_adjacency(a: &DMatrix<f64>) -> Result<()> {
    if a.nrows() != a.ncols() {
        return Err(invalid("adjacency must be square"));
    }
    let n = a.nrows();
    for i in 0..n {
        if a[(i, i)] != 0.0 {
            return Err(invalid(format!("adjacency has a self-loop at node {i}")));
        }
        for j in 0..n {
            if a[(i, j)] != a[(j, i)] || (a[(i, j)] != 0.0 && a[(i, j)] != 1.0) {
                return Err(invalid("adjacency must be symmetric with 0/1 entries"));
            }
        }
    }
    Ok(())
}

/// Activation spreading:
/// `reservoir = r · inflow`, `outflow = (1 - d)(1 - r) · inflow / deg`,
/// `inflow(t) = Σ_neighbours outflow(t - 1) + reservoir(t - 1)`.
/// Isolated nodes keep `(1 - d) · inflow` and send nothing.
pub fn simulate_network(p: &NetParams) -> Result<NetOutput> {
    validate_adjacency(&p.adjacency)?;
    let n = p.adjacency.nrows();
    if p.initial.len() != n {
        return Err(invalid("initial activation must have one entry per node"));
    }
    if let Retention::PerNode(rs) = &p.retention {
        if rs.len() != n {
            return Err(invalid("per-node retention must have one entry per node"));
        }
    }
    if !(0.0..=1.0).contains(&p.decay) || (0..n).any(|k| !(0.0..=1.0).contains(&p.retention.at(k)))
    {
        return Err(invalid("retention and decay must lie in [0, 1]"));
    }
    let degree: Vec<f64> = (0..n).map(|i| p.adjacency.row(i).sum()).collect();
    let neighbours: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| p.adjacency[(i, j)] != 0.0).collect())
        .collect();
    let split = |inflow: &[f64]| -> (Vec<f64>, Vec<f64>) {
        let mut reservoir = vec![0.0; n];
        let mut outflow = vec![0.0; n];
        for k in 0..n {
            let r = p.retention.at(k);
            if degree[k] == 0.0 {
                reservoir[k] = (1.0 - p.decay) * inflow[k];
            } else {
                reservoir[k] = r * inflow[k];
                outflow[k] = (1.0 - p.decay) * (1.0 - r) * inflow[k] / degree[k];
            }
        }
        (reservoir, outflow)
    };
    let mut inflow = p.initial.clone();
    let (mut reservoir, mut outflow) = split(&inflow);
    let mut out = NetOutput {
        inflow: vec![inflow.clone()],
        reservoir: vec![reservoir.clone()],
    };
    for _ in 0..p.horizon {
        inflow = (0..n)
            .map(|k| neighbours[k].iter().map(|&j| outflow[j]).sum::<f64>() + reservoir[k])
            .collect();
        (reservoir, outflow) = split(&inflow);
        out.inflow.push(inflow.clone());
        out.reservoir.push(reservoir.clone());
    }
    Ok(out)
}

/// Connected random graph: a random spanning tree plus independent extra
/// edges with probability `edge_prob`.
pub fn random_connected_graph(n: usize, edge_prob: f64, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut a = DMatrix::zeros(n, n);
    for k in 1..n {
        let j = rng.random_range(0..k);
        a[(k, j)] = 1.0;
        a[(j, k)] = 1.0;
    }
    for i in 0..n {
        for j in (i + 1)..n {
            if rng.random::<f64>() < edge_prob {
                a[(i, j)] = 1.0;
                a[(j, i)] = 1.0;
            }
        }
    }
    a
}

/// Adds independent `N(0, sd²)` noise to every value.
pub fn add_gaussian_noise(values: &[Vec<f64>], sd: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    values
        .iter()
        .map(|row| {
            row.iter()
                .map(|v| v + sd * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn lv(eta: [f64; 4], dt: f64, horizon: usize, every: f64) -> LvParams {
        LvParams {
            eta,
            u0: 1.5,
            v0: 0.8,
            dt,
            horizon,
            output_every: every,
        }
    }

    #[test]
    fn lv_zero_rates_are_constant() {
        let sol = solve_lotka_volterra(&lv([0.0; 4], 0.1, 5, 1.0)).unwrap();
        assert!(sol.iter().all(|s| *s == [1.5, 0.8]));
    }

    #[test]
    fn lv_first_integral_is_conserved() {
        let eta = [1.0, 0.8, 0.9, 0.7];
        let sol = solve_lotka_volterra(&lv(eta, 1e-3, 1000, 1e-3)).unwrap();
        let q0 = lv_invariant(&eta, sol[0][0], sol[0][1]);
        let drift = sol
            .iter()
            .map(|s| (lv_invariant(&eta, s[0], s[1]) - q0).abs())
            .fold(0.0, f64::max);
        assert!(drift < 1e-6, "{drift}");
    }

    #[test]
    fn lv_is_fourth_order() {
        let eta = [1.0, 0.8, 0.9, 0.7];
        let end = |dt: f64| {
            *solve_lotka_volterra(&lv(eta, dt, 1, 4.0))
                .unwrap()
                .last()
                .unwrap()
        };
        let reference = end(0.2 / 16.0);
        let err = |dt: f64| {
            let e = end(dt);
            ((e[0] - reference[0]).powi(2) + (e[1] - reference[1]).powi(2)).sqrt()
        };
        let ratio = err(0.2) / err(0.1);
        assert!((12.0..20.0).contains(&ratio), "{ratio}");
    }

    #[test]
    fn lv_rejects_invalid_inputs() {
        let mut p = lv([1.0; 4], 0.1, 3, 1.0);
        p.u0 = -1.0;
        assert!(solve_lotka_volterra(&p).is_err());
    }

    #[test]
    fn diffusion_transition_entries() {
        assert_eq!(
            build_diffusion_transition(0.0, 0.1, 0.1, 4).unwrap(),
            DMatrix::identity(4, 4)
        );
        let g = build_diffusion_transition(0.1, 1.0, 1.0, 3).unwrap();
        let expect = DMatrix::from_row_slice(3, 3, &[0.8, 0.1, 0.0, 0.1, 0.8, 0.1, 0.0, 0.1, 0.8]);
        assert!((g - expect).amax() < 1e-15);
        assert!(build_diffusion_transition(1.0, 0.6, 1.0, 3).is_err());
    }

    #[test]
    fn diffusion_rows_leak_only_at_boundary() {
        let g = build_diffusion_transition(0.03, 0.1, 0.1, 6).unwrap();
        for i in 0..6 {
            let sum = g.row(i).sum();
            if i == 0 || i == 5 {
                assert!(sum < 1.0);
            } else {
                assert!((sum - 1.0).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn diffusion_transition_tracks_heat_equation() {
        // Interior nodes of [0, 1] with zero boundary; the first sine mode
        // decays like exp(-α π² t).
        let (n, alpha, t_end) = (49, 0.1, 0.2);
        let ds = 1.0 / (n + 1) as f64;
        let dt = 0.25 * ds * ds / alpha;
        let steps = (t_end / dt).round() as usize;
        let g = build_diffusion_transition(alpha, dt, ds, n).unwrap();
        let x0 = nalgebra::DVector::from_fn(n, |i, _| (PI * (i + 1) as f64 * ds).sin());
        let mut x = x0.clone();
        for _ in 0..steps {
            x = &g * x;
        }
        let exact = x0 * (-alpha * PI * PI * steps as f64 * dt).exp();
        assert!((x - exact).amax() < 1e-3);
    }

    fn sir(
        eta1: f64,
        eta2: f64,
        alpha: [f64; 3],
        n: usize,
        seeds: Vec<(usize, usize, f64)>,
        horizon: usize,
    ) -> SirPdeParams {
        SirPdeParams {
            eta1,
            eta2,
            alpha,
            n,
            ds: 1.0 / n as f64,
            dt: 0.01,
            n_pop: 100.0,
            seeds,
            horizon,
            steps_per_output: 2,
        }
    }

    #[test]
    fn sir_without_dynamics_is_constant() {
        let out = solve_sir_rd(&sir(0.0, 0.0, [0.0; 3], 4, vec![(1, 2, 5.0)], 5)).unwrap();
        assert!(out.i.iter().all(|f| *f == out.i[0]));
    }

    #[test]
    fn sir_cells_conserve_population_without_diffusion() {
        let out = solve_sir_rd(&sir(
            2.0,
            0.5,
            [0.0; 3],
            5,
            vec![(2, 2, 10.0), (0, 4, 3.0)],
            40,
        ))
        .unwrap();
        for t in 0..out.i.len() {
            for k in 0..25 {
                let total = out.s[t][k] + out.i[t][k] + out.r[t][k];
                assert!((total - 100.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn sir_boundary_flux_accounts_for_mass_loss() {
        let n = 7;
        let mut p = sir(
            0.0,
            0.0,
            [0.0, 0.02, 0.0],
            n,
            vec![(3, 3, 50.0), (0, 1, 20.0)],
            10,
        );
        p.steps_per_output = 1;
        let lambda = p.alpha[1] * p.dt / (p.ds * p.ds);
        let out = solve_sir_rd(&p).unwrap();
        for t in 1..out.i.len() {
            let prev = &out.i[t - 1];
            let edges: f64 = (0..n * n)
                .map(|k| {
                    let (row, col) = (k / n, k % n);
                    let sides = [row == 0, row == n - 1, col == 0, col == n - 1]
                        .iter()
                        .filter(|b| **b)
                        .count();
                    sides as f64 * prev[k]
                })
                .sum();
            let change = out.i[t].iter().sum::<f64>() - prev.iter().sum::<f64>();
            assert!((change + lambda * edges).abs() < 1e-10);
        }
    }

    #[test]
    fn sir_centred_seed_conserves_mass_over_short_horizon() {
        let mut p = sir(0.0, 0.0, [0.0, 0.01, 0.0], 21, vec![(10, 10, 40.0)], 5);
        p.steps_per_output = 1;
        let out = solve_sir_rd(&p).unwrap();
        for f in &out.i {
            assert!((f.iter().sum::<f64>() - 40.0).abs() < 1e-8);
        }
    }

    #[test]
    fn sir_rejects_unstable_step() {
        let mut p = sir(1.0, 0.1, [0.0, 1.0, 0.0], 10, vec![(0, 0, 1.0)], 2);
        p.dt = 0.1;
        let err = solve_sir_rd(&p).unwrap_err().to_string();
        assert!(err.contains("1/4"), "{err}");
    }

    fn path2() -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0])
    }

    #[test]
    fn full_retention_freezes_activation() {
        let a = random_connected_graph(8, 0.2, 3);
        let initial: Vec<f64> = (0..8).map(|k| k as f64).collect();
        let out = simulate_network(&NetParams {
            adjacency: a,
            retention: Retention::Scalar(1.0),
            decay: 0.3,
            initial: initial.clone(),
            horizon: 5,
        })
        .unwrap();
        assert!(out.inflow.iter().all(|x| *x == initial));
    }

    #[test]
    fn two_node_path_alternates() {
        let out = simulate_network(&NetParams {
            adjacency: path2(),
            retention: Retention::Scalar(0.0),
            decay: 0.0,
            initial: vec![1.0, 0.0],
            horizon: 4,
        })
        .unwrap();
        assert_eq!(
            out.inflow,
            vec![
                vec![1.0, 0.0],
                vec![0.0, 1.0],
                vec![1.0, 0.0],
                vec![0.0, 1.0],
                vec![1.0, 0.0]
            ]
        );
    }

    #[test]
    fn zero_decay_conserves_activation() {
        for seed in 0..20 {
            let mut a = random_connected_graph(20, 0.15, seed);
            // Isolate one node to exercise the zero-degree rule.
            for j in 0..20 {
                a[(19, j)] = 0.0;
                a[(j, 19)] = 0.0;
            }
            let initial: Vec<f64> = (0..20)
                .map(|k| ((k * 7 + seed as usize) % 5) as f64)
                .collect();
            let total: f64 = initial.iter().sum();
            let out = simulate_network(&NetParams {
                adjacency: a,
                retention: Retention::Scalar(0.4),
                decay: 0.0,
                initial,
                horizon: 100,
            })
            .unwrap();
            for x in &out.inflow {
                assert!((x.iter().sum::<f64>() - total).abs() <= 1e-12 * total.max(1.0));
            }
        }
    }

    #[test]
    fn per_node_retention_and_validation() {
        let out = simulate_network(&NetParams {
            adjacency: path2(),
            retention: Retention::PerNode(vec![1.0, 0.0]),
            decay: 0.0,
            initial: vec![1.0, 1.0],
            horizon: 1,
        })
        .unwrap();
        assert_eq!(out.inflow[1], vec![2.0, 0.0]);
        let bad = NetParams {
            adjacency: DMatrix::identity(2, 2),
            retention: Retention::Scalar(0.5),
            decay: 0.0,
            initial: vec![1.0, 0.0],
            horizon: 1,
        };
        assert!(simulate_network(&bad).is_err());
    }

    #[test]
    fn random_graph_is_connected_and_simple() {
        let a = random_connected_graph(20, 0.1, 7);
        validate_adjacency(&a).unwrap();
        let mut seen = vec![false; 20];
        let mut stack = vec![0];
        while let Some(k) = stack.pop() {
            if !std::mem::replace(&mut seen[k], true) {
                stack.extend((0..20).filter(|&j| a[(k, j)] == 1.0));
            }
        }
        assert!(seen.iter().all(|s| *s));
    }
}
