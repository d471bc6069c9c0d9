//! Ready-made simulator set-ups: the parameter vector each one calibrates,
//! its spatial domain, and helpers to build training ensembles and noisy
//! field data.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibrator::FieldData;
use crate::design::{check_bounds, DesignSet};
use crate::emulator::{SpatialDomain, TrainingEnsemble};
use crate::error::{invalid, Result};
use crate::simulators::{
    add_gaussian_noise, grid_centres, random_connected_graph, simulate_network,
    solve_lotka_volterra, solve_sir_rd, LvParams, NetParams, Retention, SirPdeParams,
};

/// Predator-prey system observed as two series; parameters `(η1, η2, η3, η4)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LvStudy {
    pub u0: f64,
    pub v0: f64,
    pub dt: f64,
    pub horizon: usize,
    pub output_every: f64,
}

impl Default for LvStudy {
    fn default() -> Self {
        Self {
            u0: 30.0,
            v0: 10.0,
            dt: 0.01,
            horizon: 20,
            output_every: 0.25,
        }
    }
}

/// SIR reaction-diffusion on an `n x n` grid observed through the infected
/// field; parameters `(η1, η2, α2)` with `α1`, `α3` held fixed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PdeStudy {
    pub n: usize,
    pub dt: f64,
    pub steps_per_output: usize,
    pub n_pop: f64,
    /// Initially infected cells as `(row, col, count)`.
    pub seeds: Vec<(usize, usize, f64)>,
    pub horizon: usize,
    pub alpha1: f64,
    pub alpha3: f64,
}

impl Default for PdeStudy {
    fn default() -> Self {
        Self {
            n: 12,
            dt: 0.05,
            steps_per_output: 10,
            n_pop: 100.0,
            seeds: vec![(2, 3, 10.0), (8, 9, 10.0)],
            horizon: 29,
            alpha1: 0.0,
            alpha3: 0.0,
        }
    }
}

/// Activation spreading over a random connected graph observed as node
/// inflow; parameters `(r, d)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetStudy {
    pub nodes: usize,
    pub edge_prob: f64,
    pub graph_seed: u64,
    pub initial_node: usize,
    pub initial_activation: f64,
    pub horizon: usize,
}

impl Default for NetStudy {
    fn default() -> Self {
        Self {
            nodes: 20,
            edge_prob: 0.1,
            graph_seed: 11,
            initial_node: 0,
            initial_activation: 20.0,
            horizon: 29,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Study {
    Lv(LvStudy),
    SirPde(PdeStudy),
    Network(NetStudy),
}

impl Study {
    pub fn param_names(&self) -> Vec<&'static str> {
        match self {
            Study::Lv(_) => vec!["eta1", "eta2", "eta3", "eta4"],
            Study::SirPde(_) => vec!["eta1", "eta2", "alpha2"],
            Study::Network(_) => vec!["retention", "decay"],
        }
    }

    pub fn dims(&self) -> usize {
        self.param_names().len()
    }

    pub fn default_bounds(&self) -> Vec<(f64, f64)> {
        match self {
            Study::Lv(_) => vec![(0.5, 1.5), (0.01, 0.1), (0.5, 1.5), (0.01, 0.1)],
            Study::SirPde(_) => vec![(1.5, 3.0), (0.3, 0.8), (0.002, 0.01)],
            Study::Network(_) => vec![(0.2, 0.8), (0.05, 0.5)],
        }
    }

    /// A default held-out input on the raw scale.
    pub fn default_truth(&self) -> Vec<f64> {
        match self {
            Study::Lv(_) => vec![0.9, 0.045, 1.1, 0.06],
            Study::SirPde(_) => vec![2.2, 0.5, 0.006],
            Study::Network(_) => vec![0.45, 0.2],
        }
    }

    pub fn default_noise_sd(&self) -> f64 {
        match self {
            Study::Lv(_) => 1.0,
            Study::SirPde(_) => 1.0,
            Study::Network(_) => 0.1,
        }
    }

    pub fn graph(&self) -> Option<DMatrix<f64>> {
        match self {
            Study::Network(n) => Some(random_connected_graph(n.nodes, n.edge_prob, n.graph_seed)),
            _ => None,
        }
    }

    pub fn domain(&self) -> SpatialDomain {
        match self {
            Study::Lv(_) => SpatialDomain::Points(vec![vec![0.0], vec![1.0]]),
            Study::SirPde(p) => SpatialDomain::Points(grid_centres(p.n)),
            Study::Network(_) => {
                SpatialDomain::Graph(self.graph().expect("network study has a graph"))
            }
        }
    }

    pub fn n_sites(&self) -> usize {
        self.domain().n_sites()
    }

    /// Simulator output at a raw-scale input as `[time][site]`, the
    /// initial state included.
    pub fn run(&self, raw: &[f64]) -> Result<Vec<Vec<f64>>> {
        if raw.len() != self.dims() {
            return Err(invalid(format!(
                "expected {} parameters, got {}",
                self.dims(),
                raw.len()
            )));
        }
        match self {
            Study::Lv(s) => {
                let p = LvParams {
                    eta: [raw[0], raw[1], raw[2], raw[3]],
                    u0: s.u0,
                    v0: s.v0,
                    dt: s.dt,
                    horizon: s.horizon,
                    output_every: s.output_every,
                };
                Ok(solve_lotka_volterra(&p)?
                    .into_iter()
                    .map(|x| x.to_vec())
                    .collect())
            }
            Study::SirPde(s) => {
                let p = SirPdeParams {
                    eta1: raw[0],
                    eta2: raw[1],
                    alpha: [s.alpha1, raw[2], s.alpha3],
                    n: s.n,
                    ds: 1.0 / s.n as f64,
                    dt: s.dt,
                    n_pop: s.n_pop,
                    seeds: s.seeds.clone(),
                    horizon: s.horizon,
                    steps_per_output: s.steps_per_output,
                };
                Ok(solve_sir_rd(&p)?.i)
            }
            Study::Network(s) => {
                if s.initial_node >= s.nodes {
                    return Err(invalid("initial_node is outside the graph"));
                }
                let mut initial = vec![0.0; s.nodes];
                initial[s.initial_node] = s.initial_activation;
                let p = NetParams {
                    adjacency: self.graph().expect("network study has a graph"),
                    retention: Retention::Scalar(raw[0]),
                    decay: raw[1],
                    initial,
                    horizon: s.horizon,
                };
                Ok(simulate_network(&p)?.inflow)
            }
        }
    }

    /// Run every design point in parallel.
    pub fn simulate_ensemble(&self, design: &DesignSet) -> Result<TrainingEnsemble> {
        check_bounds(&design.bounds, self.dims())?;
        let runs: Vec<Vec<Vec<f64>>> = design
            .raw_rows()
            .par_iter()
            .map(|x| self.run(x))
            .collect::<Result<_>>()?;
        ensemble_from_runs(&runs, design.clone(), self.domain())
    }

    /// Noisy observations at `truth` (raw scale) and the noise-free series.
    pub fn field(
        &self,
        truth: &[f64],
        noise_sd: f64,
        seed: u64,
    ) -> Result<(FieldData, Vec<Vec<f64>>)> {
        if !(noise_sd >= 0.0) {
            return Err(invalid("noise_sd must be non-negative"));
        }
        let clean = self.run(truth)?;
        Ok((
            FieldData::new(add_gaussian_noise(&clean, noise_sd, seed))?,
            clean,
        ))
    }
}

/// Assemble `[run][time][site]` series into an ensemble.
pub fn ensemble_from_runs(
    runs: &[Vec<Vec<f64>>],
    design: DesignSet,
    domain: SpatialDomain,
) -> Result<TrainingEnsemble> {
    let n = runs.len();
    let times = runs.first().map_or(0, |r| r.len());
    let sites = domain.n_sites();
    if runs
        .iter()
        .any(|r| r.len() != times || r.iter().any(|row| row.len() != sites))
    {
        return Err(invalid("simulator runs have inconsistent shapes"));
    }
    let values = (0..times)
        .map(|t| DMatrix::from_fn(n, sites, |i, s| runs[i][t][s]))
        .collect();
    TrainingEnsemble::new(values, design, domain)
}
