//! Batch pipeline: configuration, stage execution and file persistence.
//!
//! Every stage reads the files written by earlier stages from the output
//! directory, checks them against the checksums recorded in
//! `manifest.json`, and records its own outputs there when it finishes.
//!
//! | file | columns |
//! |------|---------|
//! | `design.csv` | `run_id`, `unit_<name>`..., `<name>`... |
//! | `runs.csv` | `run_id`, `<name>`... |
//! | `locations.csv` | `location_id`, `x1`... (coordinate domains) |
//! | `adjacency.csv` | `node`, `n0`... (graph domains) |
//! | `ensemble.csv` | `run_id`, `t`, `location_id`, `value` |
//! | `field.csv` | `t`, `location_id`, `value` |
//! | `fit_<mode>/beta.csv` | `sample`, `group`, `beta_1`... |
//! | `fit_<mode>/omega.csv` | `sample`, `omega_1`... |
//! | `fit_<mode>/h_t.csv` | `sample`, `row`, `col`, `value` |
//! | `fit_<mode>/theta.csv` | `sample`, `t`, `index`, `value` |
//! | `fit_<mode>/v.csv` | `sample`, `t`, `group`, `value` |
//! | `fit_<mode>/training.csv` | `run_id`, `t`, `location_id`, `value` |
//! | `calib_<mode>/eta.csv` | `sample`, `<name>`..., `unit_<name>`... |
//! | `calib_<mode>/rho.csv` | `sample`, `rho_1`... |
//! | `calib_<mode>/nu.csv` | `sample`, `t`, `value` |
//! | `calib_<mode>/u.csv` | `sample`, `t`, `location_id`, `value` |
//! | `calib_<mode>/replicates.csv` | `t`, `location_id`, `mu_rep`, `sigma_rep` |
//! | `predict_<mode>/predictions.csv` | `t`, `location_id`, `mean`, `sd` |
//! | `scores.csv` | `model`, `GRS`, `RMSE`, `n_runs` |
//!
//! Times `t` are 1-based positions in the simulator output (the initial
//! state is `t = 1`); posterior times start at `p + 1`, with `t = p` holding
//! the initial state of the latent process.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::calibrator::{calibrate, eta_intervals, posterior_replicates, CalibConfig, FieldData};
use crate::design::{check_bounds, latin_hypercube, to_raw, to_unit, DesignSet};
use crate::emulator::{
    emulator_predict, fit_emulator, Acceptance, EmulatorConfig, EmulatorDraw, EmulatorDraws,
    EmulatorMode, HeteroEvolution, LagSource, McmcSettings, NgSettings, OutputScaling,
    SpatialDomain, TrainingEnsemble,
};
use crate::error::{invalid, Error, Result};
use crate::kernels::{coincident_index, CrossCovT, KnotPlacement, KnotSet};
use crate::mcmc::LogNormalPrior;
use crate::rng::stage_seed;
use crate::scoring::{score, ScoreReport};
use crate::ssm::Smoother;
use crate::studies::{ensemble_from_runs, Study};

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn input_err(msg: impl Into<String>) -> Error {
    Error::Input(msg.into())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DesignSection {
    pub n_runs: usize,
    /// Checked against the simulator when given.
    pub dims: Option<usize>,
    /// Raw-scale `[lo, hi]` per parameter; simulator defaults when absent.
    pub bounds: Option<Vec<(f64, f64)>>,
    pub seed: Option<u64>,
    pub midpoint: bool,
}

impl Default for DesignSection {
    fn default() -> Self {
        Self {
            n_runs: 50,
            dims: None,
            bounds: None,
            seed: None,
            midpoint: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FieldSection {
    /// Held-out raw-scale input; simulator default when absent.
    pub truth: Option<Vec<f64>>,
    pub noise_sd: Option<f64>,
    pub seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeName {
    Spatial,
    Heterogeneous,
    PredictiveProcess,
}

impl ModeName {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModeName::Spatial => "spatial",
            ModeName::Heterogeneous => "heterogeneous",
            ModeName::PredictiveProcess => "predictive_process",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "spatial" => Ok(ModeName::Spatial),
            "heterogeneous" => Ok(ModeName::Heterogeneous),
            "predictive_process" => Ok(ModeName::PredictiveProcess),
            other => Err(invalid(format!(
                "unknown emulator mode '{other}' (spatial, heterogeneous, predictive_process)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnotLayout {
    Grid,
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KnotSection {
    pub placement: KnotLayout,
    /// Knots per axis for a grid over the bounding box of the locations.
    pub per_dim: usize,
    /// Number of locations drawn for random placement.
    pub count: usize,
    pub seed: Option<u64>,
}

impl Default for KnotSection {
    fn default() -> Self {
        Self {
            placement: KnotLayout::Grid,
            per_dim: 4,
            count: 16,
            seed: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmulatorSection {
    pub mode: ModeName,
    pub omega: f64,
    pub p: usize,
    pub n_samples: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub eps1: f64,
    pub eps2: f64,
    pub adapt: bool,
    pub knots: KnotSection,
    /// Sample `T` by the inverse-Wishart step instead of fixing `T = I`.
    pub t_update: bool,
    pub standardize: bool,
    pub hetero_discount: f64,
    pub smoother: Smoother,
    pub prior: NgSettings,
    pub hyper_prior: LogNormalPrior,
    pub seed: Option<u64>,
}

impl Default for EmulatorSection {
    fn default() -> Self {
        let m = McmcSettings::default();
        let e = EmulatorConfig::default();
        Self {
            mode: ModeName::Spatial,
            omega: e.omega,
            p: e.p,
            n_samples: m.n_samples,
            burn_in: m.burn_in,
            thin: m.thin,
            eps1: e.eps1,
            eps2: e.eps2,
            adapt: m.adapt,
            knots: KnotSection::default(),
            t_update: false,
            standardize: true,
            hetero_discount: 0.95,
            smoother: Smoother::Conditional,
            prior: NgSettings::default(),
            hyper_prior: LogNormalPrior::default(),
            seed: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibSection {
    pub b: f64,
    pub eps3: f64,
    pub eps_rho: f64,
    /// Simulator default when absent.
    pub bias_enabled: Option<bool>,
    pub n_samples: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub adapt: bool,
    pub draw_stride: usize,
    /// Replicates drawn per retained sample for scoring.
    pub replicates: usize,
    pub seed: Option<u64>,
}

impl Default for CalibSection {
    fn default() -> Self {
        let c = CalibConfig::default();
        Self {
            b: c.b,
            eps3: c.eps3,
            eps_rho: c.eps_rho,
            bias_enabled: None,
            n_samples: c.mcmc.n_samples,
            burn_in: c.mcmc.burn_in,
            thin: c.mcmc.thin,
            adapt: c.mcmc.adapt,
            draw_stride: 1,
            replicates: 10,
            seed: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoSection {
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub design: DesignSection,
    pub simulator: Study,
    #[serde(default)]
    pub field: FieldSection,
    #[serde(default)]
    pub emulator: EmulatorSection,
    #[serde(default)]
    pub calibration: CalibSection,
    #[serde(default)]
    pub io: IoSection,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// A study preset with the given master seed.
    pub fn preset(study: Study, seed: u64) -> Self {
        let n_runs = if matches!(study, Study::Lv(_)) {
            50
        } else {
            25
        };
        let mode = if matches!(study, Study::SirPde(_)) {
            ModeName::PredictiveProcess
        } else {
            ModeName::Spatial
        };
        Self {
            seed,
            design: DesignSection {
                n_runs,
                ..Default::default()
            },
            simulator: study,
            field: FieldSection::default(),
            emulator: EmulatorSection {
                mode,
                ..Default::default()
            },
            calibration: CalibSection::default(),
            io: IoSection::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.simulator.dims();
        if let Some(dims) = self.design.dims {
            if dims != d {
                return Err(config_err(format!(
                    "design.dims = {dims} but the {} simulator has {d} parameters",
                    self.simulator_kind()
                )));
            }
        }
        if self.design.n_runs < 2 {
            return Err(config_err("design.n_runs must be at least 2"));
        }
        check_bounds(&self.bounds(), d).map_err(|e| config_err(e.to_string()))?;
        let truth = self.truth();
        if truth.len() != d {
            return Err(config_err(format!("field.truth needs {d} values")));
        }
        let unit = to_unit(&truth, &self.bounds());
        if unit.iter().any(|u| !(*u > 0.0 && *u < 1.0)) {
            return Err(config_err(
                "field.truth must lie strictly inside the design bounds",
            ));
        }
        if !(self.noise_sd() >= 0.0) {
            return Err(config_err("field.noise_sd must be non-negative"));
        }
        let e = &self.emulator;
        if e.p == 0 || e.thin == 0 || e.n_samples <= e.burn_in {
            return Err(config_err(
                "emulator needs p >= 1, thin >= 1 and n_samples > burn_in",
            ));
        }
        if !(e.eps1 > 0.0 && e.eps2 > 0.0) {
            return Err(config_err("emulator eps1 and eps2 must be positive"));
        }
        if !(e.omega > 0.0 && e.omega <= 1.0)
            || !(e.hetero_discount > 0.0 && e.hetero_discount <= 1.0)
        {
            return Err(config_err("discount factors must lie in (0, 1]"));
        }
        if e.mode == ModeName::PredictiveProcess && matches!(self.simulator, Study::Network(_)) {
            return Err(config_err("the predictive process needs coordinates; network studies use spatial or heterogeneous mode"));
        }
        let c = &self.calibration;
        if !(c.b > 0.0 && c.b <= 1.0) || !(c.eps3 > 0.0 && c.eps_rho > 0.0) {
            return Err(config_err(
                "calibration needs b in (0, 1] and positive steps",
            ));
        }
        if c.thin == 0 || c.n_samples <= c.burn_in || c.draw_stride == 0 || c.replicates == 0 {
            return Err(config_err(
                "calibration needs thin, draw_stride, replicates >= 1 and n_samples > burn_in",
            ));
        }
        Ok(())
    }

    fn simulator_kind(&self) -> &'static str {
        match self.simulator {
            Study::Lv(_) => "lv",
            Study::SirPde(_) => "sir_pde",
            Study::Network(_) => "network",
        }
    }

    pub fn bounds(&self) -> Vec<(f64, f64)> {
        self.design
            .bounds
            .clone()
            .unwrap_or_else(|| self.simulator.default_bounds())
    }

    pub fn truth(&self) -> Vec<f64> {
        self.field
            .truth
            .clone()
            .unwrap_or_else(|| self.simulator.default_truth())
    }

    pub fn noise_sd(&self) -> f64 {
        self.field
            .noise_sd
            .unwrap_or_else(|| self.simulator.default_noise_sd())
    }

    /// Bias correction is on for the predator-prey study and off for the
    /// others unless configured.
    pub fn bias_enabled(&self) -> bool {
        self.calibration
            .bias_enabled
            .unwrap_or(matches!(self.simulator, Study::Lv(_)))
    }

    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.to_toml().as_bytes()))
    }

    fn seed_for(&self, explicit: Option<u64>, stage: &str) -> u64 {
        explicit.unwrap_or_else(|| stage_seed(self.seed, stage))
    }

    pub fn knot_set(&self, domain: &SpatialDomain) -> Result<KnotSet> {
        let coords = domain
            .coords()
            .ok_or_else(|| config_err("knots need a coordinate domain"))?;
        let k = &self.emulator.knots;
        match k.placement {
            KnotLayout::Grid => {
                let d = coords[0].len();
                let lo: Vec<f64> = (0..d)
                    .map(|a| coords.iter().map(|c| c[a]).fold(f64::INFINITY, f64::min))
                    .collect();
                let hi: Vec<f64> = (0..d)
                    .map(|a| {
                        coords
                            .iter()
                            .map(|c| c[a])
                            .fold(f64::NEG_INFINITY, f64::max)
                    })
                    .collect();
                // Cell-centred grid over the box spanned by the outermost
                // cells, widened by half a spacing so knots land on cells.
                let n_axis = (coords.len() as f64).powf(1.0 / d as f64).round().max(1.0);
                let pad: Vec<f64> = (0..d)
                    .map(|a| (hi[a] - lo[a]) / (2.0 * (n_axis - 1.0).max(1.0)))
                    .collect();
                let lo: Vec<f64> = lo.iter().zip(&pad).map(|(l, p)| l - p).collect();
                let hi: Vec<f64> = hi.iter().zip(&pad).map(|(h, p)| h + p).collect();
                KnotSet::grid(&lo, &hi, k.per_dim)
            }
            KnotLayout::Random => KnotSet::random(coords, k.count, self.seed_for(k.seed, "knots")),
        }
    }

    pub fn emulator_config(
        &self,
        mode: ModeName,
        domain: &SpatialDomain,
    ) -> Result<EmulatorConfig> {
        let e = &self.emulator;
        let mode = match mode {
            ModeName::Spatial => EmulatorMode::Spatial,
            ModeName::Heterogeneous => EmulatorMode::Heterogeneous,
            ModeName::PredictiveProcess => EmulatorMode::PredictiveProcess(self.knot_set(domain)?),
        };
        Ok(EmulatorConfig {
            mode,
            omega: e.omega,
            p: e.p,
            mcmc: McmcSettings {
                n_samples: e.n_samples,
                burn_in: e.burn_in,
                thin: e.thin,
                adapt: e.adapt,
            },
            eps1: e.eps1,
            eps2: e.eps2,
            t_prior: e.t_update.then(|| CrossCovT::identity(e.p)),
            hyper_prior: e.hyper_prior,
            hetero_evolution: HeteroEvolution::Discount(e.hetero_discount),
            smoother: e.smoother,
            ng: e.prior,
            init_beta: 1.0,
            init_omega: 1.0,
            seed: self.seed_for(e.seed, "fit"),
        })
    }

    pub fn calib_config(&self) -> CalibConfig {
        let c = &self.calibration;
        CalibConfig {
            eps3: c.eps3,
            eps_rho: c.eps_rho,
            b: c.b,
            bias_enabled: self.bias_enabled(),
            mcmc: McmcSettings {
                n_samples: c.n_samples,
                burn_in: c.burn_in,
                thin: c.thin,
                adapt: c.adapt,
            },
            draw_stride: c.draw_stride,
            seed: self.seed_for(c.seed, "calibrate"),
            ..Default::default()
        }
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex(&Sha256::digest(fs::read(path)?)))
}

/// Write via a temporary file and rename so readers never see a partial file.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn write_csv(
    path: &Path,
    header: &[String],
    rows: impl IntoIterator<Item = Vec<String>>,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    write_atomic(path, &bytes)
}

fn strs(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

struct Table {
    header: Vec<String>,
    rows: Vec<Vec<f64>>,
}

impl Table {
    fn read(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)
            .map_err(|e| input_err(format!("{}: {e}", path.display())))?;
        let header = r.headers()?.iter().map(str::to_string).collect();
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let row = rec
                .iter()
                .map(|f| {
                    f.parse::<f64>().map_err(|_| {
                        input_err(format!("{}: '{f}' is not a number", path.display()))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        Ok(Self { header, rows })
    }

    fn col(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| input_err(format!("missing column '{name}'")))
    }
}

fn idx(x: f64) -> usize {
    x as usize
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub completed_unix: u64,
    pub config_hash: String,
    pub seed: u64,
    pub inputs: BTreeMap<String, String>,
    pub files: BTreeMap<String, String>,
    pub stats: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub master_seed: u64,
    pub config_hash: String,
    pub stages: BTreeMap<String, StageRecord>,
}

/// Stored emulator metadata next to the draw files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct StoreMeta {
    mode: ModeName,
    knots: Option<Vec<Vec<f64>>>,
    p: usize,
    n_sites: usize,
    horizon: usize,
    n_draws: usize,
    groups: usize,
    acceptance: Acceptance,
    scaling: OutputScaling,
    design: DesignSet,
    coords: Option<Vec<Vec<f64>>>,
    adjacency: Option<Vec<Vec<f64>>>,
}

/// A fitted emulator as stored on disk, with the training data it
/// conditions on.
pub struct EmulatorStore {
    pub draws: EmulatorDraws,
    pub training: TrainingEnsemble,
    pub scaling: OutputScaling,
}

pub struct Pipeline {
    pub config: PipelineConfig,
    pub out: PathBuf,
}

impl Pipeline {
    pub fn new(config: PipelineConfig, out: Option<PathBuf>) -> Result<Self> {
        config.validate()?;
        let out = out
            .or_else(|| config.io.out_dir.clone())
            .unwrap_or_else(|| PathBuf::from("ssgp-out"));
        fs::create_dir_all(&out)?;
        Ok(Self { config, out })
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    pub fn manifest(&self) -> Result<RunManifest> {
        let p = self.path("manifest.json");
        if !p.exists() {
            return Ok(RunManifest {
                version: env!("CARGO_PKG_VERSION").to_string(),
                master_seed: self.config.seed,
                config_hash: self.config.hash(),
                stages: BTreeMap::new(),
            });
        }
        Ok(serde_json::from_slice(&fs::read(p)?)?)
    }

    /// Checksums of the inputs a stage consumes, verified against the
    /// manifest entries of the stages that produced them.
    fn verify_inputs(&self, files: &[&str]) -> Result<BTreeMap<String, String>> {
        let manifest = self.manifest()?;
        let mut out = BTreeMap::new();
        for rel in files {
            let recorded = manifest
                .stages
                .values()
                .find_map(|s| s.files.get(*rel))
                .ok_or_else(|| input_err(format!("{rel} is not recorded in the manifest; run the stage that produces it first")))?;
            let path = self.path(rel);
            if !path.exists() {
                return Err(input_err(format!("{} is missing", path.display())));
            }
            let actual = sha256_file(&path)?;
            if &actual != recorded {
                return Err(input_err(format!(
                    "{rel} changed since it was written (checksum mismatch); rerun its stage"
                )));
            }
            out.insert(rel.to_string(), actual);
        }
        Ok(out)
    }

    fn record(
        &self,
        stage: &str,
        seed: u64,
        inputs: BTreeMap<String, String>,
        files: &[String],
        stats: BTreeMap<String, f64>,
    ) -> Result<()> {
        let mut manifest = self.manifest()?;
        manifest.master_seed = self.config.seed;
        manifest.config_hash = self.config.hash();
        let mut record = StageRecord {
            completed_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            config_hash: manifest.config_hash.clone(),
            seed,
            inputs,
            files: BTreeMap::new(),
            stats,
        };
        for rel in files {
            record
                .files
                .insert(rel.clone(), sha256_file(&self.path(rel))?);
        }
        // A rerun of a stage invalidates the files other stages recorded
        // under the same names.
        for s in manifest.stages.values_mut() {
            s.files.retain(|k, _| !record.files.contains_key(k));
        }
        manifest.stages.insert(stage.to_string(), record);
        write_atomic(
            &self.path("manifest.json"),
            &serde_json::to_vec_pretty(&manifest)?,
        )
    }

    pub fn design(&self) -> Result<DesignSet> {
        let c = &self.config;
        let seed = c.seed_for(c.design.seed, "design");
        let design = latin_hypercube(c.design.n_runs, c.simulator.dims(), seed, c.design.midpoint)?
            .with_bounds(c.bounds())?;
        let names = c.simulator.param_names();
        let mut header = vec!["run_id".to_string()];
        header.extend(names.iter().map(|n| format!("unit_{n}")));
        header.extend(names.iter().map(|n| n.to_string()));
        let rows = (0..design.n_runs()).map(|i| {
            let mut row = vec![i.to_string()];
            row.extend(design.unit[i].iter().map(|v| v.to_string()));
            row.extend(design.raw(i).iter().map(|v| v.to_string()));
            row
        });
        write_csv(&self.path("design.csv"), &header, rows)?;
        self.record(
            "design",
            seed,
            BTreeMap::new(),
            &["design.csv".into()],
            BTreeMap::new(),
        )?;
        Ok(design)
    }

    fn read_design(&self) -> Result<DesignSet> {
        let t = Table::read(&self.path("design.csv"))?;
        let names = self.config.simulator.param_names();
        let cols = names
            .iter()
            .map(|n| t.col(&format!("unit_{n}")))
            .collect::<Result<Vec<_>>>()?;
        let unit = t
            .rows
            .iter()
            .map(|r| cols.iter().map(|&c| r[c]).collect())
            .collect();
        let seed = self.config.seed_for(self.config.design.seed, "design");
        Ok(DesignSet {
            unit,
            bounds: self.config.bounds(),
            seed,
        })
    }

    pub fn simulate(&self) -> Result<TrainingEnsemble> {
        let inputs = self.verify_inputs(&["design.csv"])?;
        let design = self.read_design()?;
        let study = &self.config.simulator;
        let ens = study.simulate_ensemble(&design)?;
        let mut files = vec!["ensemble.csv".to_string(), "runs.csv".to_string()];
        let names = study.param_names();
        let mut header = vec!["run_id".to_string()];
        header.extend(names.iter().map(|n| n.to_string()));
        write_csv(
            &self.path("runs.csv"),
            &header,
            (0..design.n_runs()).map(|i| {
                let mut row = vec![i.to_string()];
                row.extend(design.raw(i).iter().map(|v| v.to_string()));
                row
            }),
        )?;
        write_long(&self.path("ensemble.csv"), &ens.values)?;
        match &ens.domain {
            SpatialDomain::Points(c) => {
                let mut header = vec!["location_id".to_string()];
                header.extend((1..=c[0].len()).map(|k| format!("x{k}")));
                write_csv(
                    &self.path("locations.csv"),
                    &header,
                    c.iter().enumerate().map(|(j, x)| {
                        let mut row = vec![j.to_string()];
                        row.extend(x.iter().map(|v| v.to_string()));
                        row
                    }),
                )?;
                files.push("locations.csv".into());
            }
            SpatialDomain::Graph(a) => {
                let mut header = vec!["node".to_string()];
                header.extend((0..a.ncols()).map(|k| format!("n{k}")));
                write_csv(
                    &self.path("adjacency.csv"),
                    &header,
                    (0..a.nrows()).map(|i| {
                        let mut row = vec![i.to_string()];
                        row.extend(a.row(i).iter().map(|v| v.to_string()));
                        row
                    }),
                )?;
                files.push("adjacency.csv".into());
            }
        }
        self.record("simulate", 0, inputs, &files, BTreeMap::new())?;
        Ok(ens)
    }

    fn read_ensemble(&self) -> Result<TrainingEnsemble> {
        let design = self.read_design()?;
        let values = read_long(
            &self.path("ensemble.csv"),
            design.n_runs(),
            self.config.simulator.n_sites(),
        )?;
        TrainingEnsemble::new(values, design, self.config.simulator.domain())
    }

    pub fn field(&self) -> Result<FieldData> {
        let inputs = self.verify_inputs(&["design.csv"])?;
        let c = &self.config;
        let design = self.read_design()?;
        let truth = c.truth();
        let unit = to_unit(&truth, &c.bounds());
        if coincident_index(&design.unit, &unit).is_some() {
            return Err(invalid(
                "the held-out field input coincides with a training run",
            ));
        }
        let seed = c.seed_for(c.field.seed, "field");
        let (z, _) = c.simulator.field(&truth, c.noise_sd(), seed)?;
        write_csv(
            &self.path("field.csv"),
            &strs(&["t", "location_id", "value"]),
            z.z.iter().enumerate().flat_map(|(t, row)| {
                row.iter()
                    .enumerate()
                    .map(move |(s, v)| vec![(t + 1).to_string(), s.to_string(), v.to_string()])
            }),
        )?;
        let names = c.simulator.param_names();
        write_csv(
            &self.path("truth.csv"),
            &strs(&["parameter", "raw", "unit"]),
            names
                .iter()
                .enumerate()
                .map(|(k, n)| vec![n.to_string(), truth[k].to_string(), unit[k].to_string()]),
        )?;
        let mut stats = BTreeMap::new();
        stats.insert("noise_sd".into(), c.noise_sd());
        self.record(
            "field",
            seed,
            inputs,
            &["field.csv".into(), "truth.csv".into()],
            stats,
        )?;
        Ok(z)
    }

    fn read_field(&self) -> Result<FieldData> {
        let t = Table::read(&self.path("field.csv"))?;
        let (ct, cs, cv) = (t.col("t")?, t.col("location_id")?, t.col("value")?);
        let times = t.rows.iter().map(|r| idx(r[ct])).max().unwrap_or(0);
        let sites = self.config.simulator.n_sites();
        let mut z = vec![vec![f64::NAN; sites]; times];
        for r in &t.rows {
            let (ti, s) = (idx(r[ct]), idx(r[cs]));
            if ti == 0 || s >= sites {
                return Err(input_err("field.csv has an out-of-range time or location"));
            }
            z[ti - 1][s] = r[cv];
        }
        FieldData::new(z)
    }

    fn fit_dir(mode: ModeName) -> String {
        format!("fit_{}", mode.as_str())
    }

    pub fn fit(&self, mode: Option<ModeName>) -> Result<EmulatorDraws> {
        let mode = mode.unwrap_or(self.config.emulator.mode);
        let inputs = self.verify_inputs(&["design.csv", "ensemble.csv"])?;
        let ens = self.read_ensemble()?;
        let (train, scaling) = if self.config.emulator.standardize {
            ens.standardized()
        } else {
            (ens.clone(), OutputScaling::identity(ens.n_sites()))
        };
        let cfg = self.config.emulator_config(mode, &train.domain)?;
        let draws = fit_emulator(&train, &cfg)?;
        let dir = Self::fit_dir(mode);
        let files = self.write_store(&dir, mode, &draws, &train, &scaling)?;
        let mut stats = BTreeMap::new();
        stats.insert("acceptance_beta".into(), draws.acceptance.beta);
        stats.insert("acceptance_omega".into(), draws.acceptance.omega);
        stats.insert("retained".into(), draws.len() as f64);
        self.record(&dir, cfg.seed, inputs, &files, stats)?;
        Ok(draws)
    }

    fn write_store(
        &self,
        dir: &str,
        mode: ModeName,
        draws: &EmulatorDraws,
        train: &TrainingEnsemble,
        scaling: &OutputScaling,
    ) -> Result<Vec<String>> {
        let rel = |f: &str| format!("{dir}/{f}");
        let d = train.design.dims();
        let mut header = strs(&["sample", "group"]);
        header.extend((1..=d).map(|k| format!("beta_{k}")));
        write_csv(
            &self.path(&rel("beta.csv")),
            &header,
            draws.draws.iter().enumerate().flat_map(|(k, dr)| {
                dr.beta.iter().enumerate().map(move |(g, b)| {
                    let mut row = vec![k.to_string(), g.to_string()];
                    row.extend(b.iter().map(|v| v.to_string()));
                    row
                })
            }),
        )?;
        let k_omega = draws.draws.first().map_or(0, |d| d.omega_sp.len());
        let mut header = strs(&["sample"]);
        header.extend((1..=k_omega).map(|k| format!("omega_{k}")));
        write_csv(
            &self.path(&rel("omega.csv")),
            &header,
            draws.draws.iter().enumerate().map(|(k, dr)| {
                let mut row = vec![k.to_string()];
                row.extend(dr.omega_sp.iter().map(|v| v.to_string()));
                row
            }),
        )?;
        write_csv(
            &self.path(&rel("h_t.csv")),
            &strs(&["sample", "row", "col", "value"]),
            draws.draws.iter().enumerate().flat_map(|(k, dr)| {
                let p = dr.h_t.nrows();
                (0..p * p).map(move |ij| {
                    vec![
                        k.to_string(),
                        (ij / p).to_string(),
                        (ij % p).to_string(),
                        dr.h_t[(ij / p, ij % p)].to_string(),
                    ]
                })
            }),
        )?;
        let p = draws.p;
        write_csv(
            &self.path(&rel("theta.csv")),
            &strs(&["sample", "t", "index", "value"]),
            draws.draws.iter().enumerate().flat_map(|(k, dr)| {
                dr.theta.iter().enumerate().flat_map(move |(t, th)| {
                    th.iter().enumerate().map(move |(i, v)| {
                        vec![
                            k.to_string(),
                            (t + p).to_string(),
                            i.to_string(),
                            v.to_string(),
                        ]
                    })
                })
            }),
        )?;
        write_csv(
            &self.path(&rel("v.csv")),
            &strs(&["sample", "t", "group", "value"]),
            draws.draws.iter().enumerate().flat_map(|(k, dr)| {
                dr.v.iter().enumerate().flat_map(move |(t, vs)| {
                    vs.iter().enumerate().map(move |(g, v)| {
                        vec![
                            k.to_string(),
                            (t + p).to_string(),
                            g.to_string(),
                            v.to_string(),
                        ]
                    })
                })
            }),
        )?;
        write_long(&self.path(&rel("training.csv")), &train.values)?;
        let (coords, adjacency) = match &train.domain {
            SpatialDomain::Points(c) => (Some(c.clone()), None),
            SpatialDomain::Graph(a) => (
                None,
                Some(
                    (0..a.nrows())
                        .map(|i| a.row(i).iter().copied().collect())
                        .collect(),
                ),
            ),
        };
        let meta = StoreMeta {
            mode,
            knots: match &draws.mode {
                EmulatorMode::PredictiveProcess(k) => Some(k.knots.clone()),
                _ => None,
            },
            p,
            n_sites: draws.n_sites,
            horizon: draws.horizon,
            n_draws: draws.len(),
            groups: draws.draws.first().map_or(1, |d| d.beta.len()),
            acceptance: draws.acceptance.clone(),
            scaling: scaling.clone(),
            design: train.design.clone(),
            coords,
            adjacency,
        };
        write_atomic(
            &self.path(&rel("emulator.json")),
            &serde_json::to_vec_pretty(&meta)?,
        )?;
        Ok([
            "beta.csv",
            "omega.csv",
            "h_t.csv",
            "theta.csv",
            "v.csv",
            "training.csv",
            "emulator.json",
        ]
        .iter()
        .map(|f| rel(f))
        .collect())
    }

    /// Load a fitted emulator; only the files under `fit_<mode>/` are read.
    pub fn load_store(&self, mode: ModeName) -> Result<EmulatorStore> {
        let dir = Self::fit_dir(mode);
        let rel = |f: &str| format!("{dir}/{f}");
        let meta: StoreMeta =
            serde_json::from_slice(&fs::read(self.path(&rel("emulator.json"))).map_err(|_| {
                input_err(format!(
                    "no fitted {} emulator; run `fit` first",
                    mode.as_str()
                ))
            })?)?;
        let domain = match (&meta.coords, &meta.adjacency) {
            (Some(c), _) => SpatialDomain::Points(c.clone()),
            (None, Some(a)) => {
                SpatialDomain::Graph(DMatrix::from_fn(a.len(), a.len(), |i, j| a[i][j]))
            }
            _ => return Err(input_err("emulator.json has no spatial domain")),
        };
        let values = read_long(
            &self.path(&rel("training.csv")),
            meta.design.n_runs(),
            meta.n_sites,
        )?;
        let training = TrainingEnsemble::new(values, meta.design.clone(), domain)?;
        let (n, p, h, s) = (meta.n_draws, meta.p, meta.horizon, meta.n_sites);
        let mut draws: Vec<EmulatorDraw> = (0..n)
            .map(|_| EmulatorDraw {
                beta: vec![Vec::new(); meta.groups],
                omega_sp: Vec::new(),
                h_t: DMatrix::zeros(p, p),
                theta: vec![DVector::zeros(p * s); h + 1],
                v: vec![vec![0.0; meta.groups]; h + 1],
            })
            .collect();
        let beta = Table::read(&self.path(&rel("beta.csv")))?;
        for r in &beta.rows {
            draws[idx(r[0])].beta[idx(r[1])] = r[2..].to_vec();
        }
        let omega = Table::read(&self.path(&rel("omega.csv")))?;
        for r in &omega.rows {
            draws[idx(r[0])].omega_sp = r[1..].to_vec();
        }
        for r in &Table::read(&self.path(&rel("h_t.csv")))?.rows {
            draws[idx(r[0])].h_t[(idx(r[1]), idx(r[2]))] = r[3];
        }
        for r in &Table::read(&self.path(&rel("theta.csv")))?.rows {
            draws[idx(r[0])].theta[idx(r[1]) - p][idx(r[2])] = r[3];
        }
        for r in &Table::read(&self.path(&rel("v.csv")))?.rows {
            draws[idx(r[0])].v[idx(r[1]) - p][idx(r[2])] = r[3];
        }
        let mode_full = match meta.mode {
            ModeName::Spatial => EmulatorMode::Spatial,
            ModeName::Heterogeneous => EmulatorMode::Heterogeneous,
            ModeName::PredictiveProcess => EmulatorMode::PredictiveProcess(KnotSet {
                knots: meta.knots.clone().unwrap_or_default(),
                placement: KnotPlacement::Grid,
            }),
        };
        Ok(EmulatorStore {
            draws: EmulatorDraws {
                mode: mode_full,
                p,
                n_sites: s,
                horizon: h,
                draws,
                acceptance: meta.acceptance,
            },
            training,
            scaling: meta.scaling,
        })
    }

    fn store_files(mode: ModeName) -> Vec<String> {
        let dir = Self::fit_dir(mode);
        [
            "beta.csv",
            "omega.csv",
            "h_t.csv",
            "theta.csv",
            "v.csv",
            "training.csv",
            "emulator.json",
        ]
        .iter()
        .map(|f| format!("{dir}/{f}"))
        .collect()
    }

    pub fn calibrate(&self, mode: Option<ModeName>) -> Result<()> {
        let mode = mode.unwrap_or(self.config.emulator.mode);
        let mut needed = Self::store_files(mode);
        needed.push("field.csv".into());
        let inputs = self.verify_inputs(&needed.iter().map(String::as_str).collect::<Vec<_>>())?;
        let store = self.load_store(mode)?;
        let field = self.read_field()?;
        let scaled = FieldData::new(store.scaling.forward_series(&field.z))?;
        let cfg = self.config.calib_config();
        let out = calibrate(&scaled, &store.draws, &store.training, &cfg)?;
        let reps = posterior_replicates(
            &out,
            self.config.calibration.replicates,
            stage_seed(self.config.seed, "replicates"),
        )?;
        let dir = format!("calib_{}", mode.as_str());
        let rel = |f: &str| format!("{dir}/{f}");
        let c = &self.config;
        let names = c.simulator.param_names();
        let bounds = c.bounds();
        let mut header = vec!["sample".to_string()];
        header.extend(names.iter().map(|n| n.to_string()));
        header.extend(names.iter().map(|n| format!("unit_{n}")));
        write_csv(
            &self.path(&rel("eta.csv")),
            &header,
            out.eta.iter().enumerate().map(|(k, e)| {
                let mut row = vec![k.to_string()];
                row.extend(to_raw(e, &bounds).iter().map(|v| v.to_string()));
                row.extend(e.iter().map(|v| v.to_string()));
                row
            }),
        )?;
        let k_rho = out.rho.first().map_or(0, |r| r.len());
        let mut header = vec!["sample".to_string()];
        header.extend((1..=k_rho).map(|k| format!("rho_{k}")));
        write_csv(
            &self.path(&rel("rho.csv")),
            &header,
            out.rho.iter().enumerate().map(|(k, r)| {
                let mut row = vec![k.to_string()];
                row.extend(r.iter().map(|v| v.to_string()));
                row
            }),
        )?;
        let p = store.draws.p;
        write_csv(
            &self.path(&rel("nu.csv")),
            &strs(&["sample", "t", "value"]),
            out.nu.iter().enumerate().flat_map(|(k, nu)| {
                nu.iter()
                    .enumerate()
                    .map(move |(t, v)| vec![k.to_string(), (t + p).to_string(), v.to_string()])
            }),
        )?;
        write_csv(
            &self.path(&rel("u.csv")),
            &strs(&["sample", "t", "location_id", "value"]),
            out.u.iter().enumerate().flat_map(|(k, u)| {
                u.iter().enumerate().flat_map(move |(t, ut)| {
                    ut.iter().enumerate().map(move |(s, v)| {
                        vec![
                            k.to_string(),
                            (t + p).to_string(),
                            s.to_string(),
                            v.to_string(),
                        ]
                    })
                })
            }),
        )?;
        let sc = &store.scaling;
        write_csv(
            &self.path(&rel("replicates.csv")),
            &strs(&["t", "location_id", "mu_rep", "sigma_rep"]),
            reps.mu.iter().enumerate().flat_map(|(t, row)| {
                let sigma = &reps.sigma[t];
                row.iter().enumerate().map(move |(s, m)| {
                    vec![
                        (t + p + 1).to_string(),
                        s.to_string(),
                        sc.backward(s, *m).to_string(),
                        (sigma[s] * sc.sd[s]).to_string(),
                    ]
                })
            }),
        )?;
        let mut stats = BTreeMap::new();
        stats.insert("acceptance_eta".into(), out.acceptance_eta);
        stats.insert("acceptance_rho".into(), out.acceptance_rho);
        stats.insert("draw_store_wraps".into(), out.wraps as f64);
        stats.insert("clamped_variances".into(), out.clamped as f64);
        for (k, (lo, hi)) in eta_intervals(&out, 0.95).iter().enumerate() {
            let (rl, rh) = (
                to_raw(&[*lo], &bounds[k..=k])[0],
                to_raw(&[*hi], &bounds[k..=k])[0],
            );
            stats.insert(format!("{}_q025", names[k]), rl);
            stats.insert(format!("{}_q975", names[k]), rh);
        }
        let files: Vec<String> = ["eta.csv", "rho.csv", "nu.csv", "u.csv", "replicates.csv"]
            .iter()
            .map(|f| rel(f))
            .collect();
        self.record(&dir, cfg.seed, inputs, &files, stats)
    }

    /// Emulator predictive mean and SD at a raw-scale input (the held-out
    /// field input by default), lags fed from training-run means.
    pub fn predict(&self, mode: Option<ModeName>, eta_raw: Option<Vec<f64>>) -> Result<()> {
        let mode = mode.unwrap_or(self.config.emulator.mode);
        let needed = Self::store_files(mode);
        let inputs = self.verify_inputs(&needed.iter().map(String::as_str).collect::<Vec<_>>())?;
        let store = self.load_store(mode)?;
        let raw = eta_raw.unwrap_or_else(|| self.config.truth());
        let bounds = self.config.bounds();
        if raw.len() != bounds.len() {
            return Err(invalid(format!("--eta needs {} values", bounds.len())));
        }
        let unit = to_unit(&raw, &bounds);
        let p = store.draws.p;
        let lags = LagSource::Recursive(store.training.mean_series()[..p].to_vec());
        let preds = emulator_predict(&store.draws, &store.training, &unit, &lags)?;
        let n = preds.len() as f64;
        let sc = &store.scaling;
        let mut rows = Vec::new();
        let clamped: usize = preds.iter().map(|p| p.clamped).sum();
        for t in 0..store.draws.horizon {
            for s in 0..store.draws.n_sites {
                let mean = preds.iter().map(|p| p.mean[t][s]).sum::<f64>() / n;
                let var = preds
                    .iter()
                    .map(|p| p.var[t][s] + (p.mean[t][s] - mean).powi(2))
                    .sum::<f64>()
                    / n;
                rows.push(vec![
                    (t + p + 1).to_string(),
                    s.to_string(),
                    sc.backward(s, mean).to_string(),
                    (var.sqrt() * sc.sd[s]).to_string(),
                ]);
            }
        }
        let dir = format!("predict_{}", mode.as_str());
        let file = format!("{dir}/predictions.csv");
        write_csv(
            &self.path(&file),
            &strs(&["t", "location_id", "mean", "sd"]),
            rows,
        )?;
        let mut stats = BTreeMap::new();
        stats.insert("clamped_variances".into(), clamped as f64);
        for (k, v) in raw.iter().enumerate() {
            stats.insert(format!("eta_{}", k + 1), *v);
        }
        self.record(&dir, 0, inputs, &[file], stats)
    }

    /// Score every calibrated model against the field data.
    pub fn score(&self) -> Result<Vec<ScoreReport>> {
        let manifest = self.manifest()?;
        let mut modes: Vec<ModeName> = manifest
            .stages
            .keys()
            .filter_map(|k| k.strip_prefix("calib_"))
            .map(ModeName::parse)
            .collect::<Result<_>>()?;
        modes.sort();
        if modes.is_empty() {
            return Err(input_err(
                "no calibrated models to score; run `calibrate` first",
            ));
        }
        let mut needed: Vec<String> = modes
            .iter()
            .map(|m| format!("calib_{}/replicates.csv", m.as_str()))
            .collect();
        needed.extend(["field.csv".to_string(), "design.csv".to_string()]);
        let inputs = self.verify_inputs(&needed.iter().map(String::as_str).collect::<Vec<_>>())?;
        let field = self.read_field()?;
        let n_runs = self.read_design()?.n_runs();
        let mut reports = Vec::new();
        for m in &modes {
            let t = Table::read(&self.path(&format!("calib_{}/replicates.csv", m.as_str())))?;
            let (ct, cs, cm, cd) = (
                t.col("t")?,
                t.col("location_id")?,
                t.col("mu_rep")?,
                t.col("sigma_rep")?,
            );
            let mut z = Vec::with_capacity(t.rows.len());
            let mut mu = Vec::with_capacity(t.rows.len());
            let mut sd = Vec::with_capacity(t.rows.len());
            for r in &t.rows {
                z.push(field.z[idx(r[ct]) - 1][idx(r[cs])]);
                mu.push(r[cm]);
                sd.push(r[cd]);
            }
            reports.push(score(m.as_str(), &z, &mu, &sd, n_runs)?);
        }
        write_csv(
            &self.path("scores.csv"),
            &strs(&["model", "GRS", "RMSE", "n_runs"]),
            reports.iter().map(|r| {
                vec![
                    r.model.clone(),
                    r.grs.to_string(),
                    r.rmse.to_string(),
                    r.n_runs.to_string(),
                ]
            }),
        )?;
        self.record("score", 0, inputs, &["scores.csv".into()], BTreeMap::new())?;
        Ok(reports)
    }

    /// Every stage in order, fitting and calibrating each listed mode.
    pub fn run_all(&self, modes: &[ModeName]) -> Result<Vec<ScoreReport>> {
        self.design()?;
        self.simulate()?;
        self.field()?;
        for &m in modes {
            self.fit(Some(m))?;
            self.calibrate(Some(m))?;
        }
        self.score()
    }
}

fn write_long(path: &Path, values: &[DMatrix<f64>]) -> Result<()> {
    write_csv(
        path,
        &strs(&["run_id", "t", "location_id", "value"]),
        values.iter().enumerate().flat_map(|(t, m)| {
            (0..m.nrows()).flat_map(move |i| {
                (0..m.ncols()).map(move |s| {
                    vec![
                        i.to_string(),
                        (t + 1).to_string(),
                        s.to_string(),
                        m[(i, s)].to_string(),
                    ]
                })
            })
        }),
    )
}

fn read_long(path: &Path, n_runs: usize, n_sites: usize) -> Result<Vec<DMatrix<f64>>> {
    let t = Table::read(path)?;
    let (cr, ct, cs, cv) = (
        t.col("run_id")?,
        t.col("t")?,
        t.col("location_id")?,
        t.col("value")?,
    );
    let times = t.rows.iter().map(|r| idx(r[ct])).max().unwrap_or(0);
    let mut runs: Vec<Vec<Vec<f64>>> = vec![vec![vec![f64::NAN; n_sites]; times]; n_runs];
    for r in &t.rows {
        let (i, ti, s) = (idx(r[cr]), idx(r[ct]), idx(r[cs]));
        if i >= n_runs || ti == 0 || s >= n_sites {
            return Err(input_err(format!(
                "{} has an out-of-range index",
                path.display()
            )));
        }
        runs[i][ti - 1][s] = r[cv];
    }
    let design = DesignSet {
        unit: vec![vec![0.0]; n_runs],
        bounds: vec![(0.0, 1.0)],
        seed: 0,
    };
    let domain = SpatialDomain::Points(vec![vec![0.0]; n_sites]);
    Ok(ensemble_from_runs(&runs, design, domain)?.values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::studies::{LvStudy, NetStudy};

    fn tmp_dir(name: &str) -> PathBuf {
        let d = std::env::temp_dir().join(format!("ssgp-pipeline-{name}-{}", std::process::id()));
        let _ = fs::remove_dir_all(&d);
        d
    }

    fn small_lv() -> PipelineConfig {
        let mut c = PipelineConfig::preset(
            Study::Lv(LvStudy {
                horizon: 6,
                ..Default::default()
            }),
            3,
        );
        c.design.n_runs = 8;
        c.emulator.n_samples = 40;
        c.emulator.burn_in = 20;
        c.emulator.thin = 2;
        c.calibration.n_samples = 60;
        c.calibration.burn_in = 20;
        c.calibration.thin = 2;
        c
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = "seed = 1\n[simulator]\nkind = \"lv\"\n[emulator]\nbogus = 3\n";
        assert!(matches!(
            PipelineConfig::from_toml(text),
            Err(Error::Config(_))
        ));
        let text = "seed = 1\n[simulator]\nkind = \"lv\"\nhorizon = 5\nwhat = 1\n";
        assert!(PipelineConfig::from_toml(text).is_err());
        let ok = "seed = 1\n[simulator]\nkind = \"lv\"\nhorizon = 5\n";
        assert!(PipelineConfig::from_toml(ok).is_ok());
    }

    #[test]
    fn config_round_trips() {
        let c = small_lv();
        assert_eq!(PipelineConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn stages_refuse_missing_or_modified_inputs() {
        let dir = tmp_dir("stale");
        let p = Pipeline::new(small_lv(), Some(dir.clone())).unwrap();
        assert!(matches!(p.simulate(), Err(Error::Input(_))));
        p.design().unwrap();
        fs::write(dir.join("design.csv"), "run_id\n0\n").unwrap();
        assert!(matches!(p.simulate(), Err(Error::Input(_))));
        fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn stored_draws_round_trip_exactly() {
        let dir = tmp_dir("store");
        let p = Pipeline::new(small_lv(), Some(dir.clone())).unwrap();
        p.design().unwrap();
        p.simulate().unwrap();
        let draws = p.fit(None).unwrap();
        let store = p.load_store(ModeName::Spatial).unwrap();
        assert_eq!(store.draws.draws, draws.draws);
        fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn design_is_byte_identical_for_a_fixed_seed() {
        let (a, b) = (tmp_dir("design-a"), tmp_dir("design-b"));
        Pipeline::new(small_lv(), Some(a.clone()))
            .unwrap()
            .design()
            .unwrap();
        Pipeline::new(small_lv(), Some(b.clone()))
            .unwrap()
            .design()
            .unwrap();
        assert_eq!(
            fs::read(a.join("design.csv")).unwrap(),
            fs::read(b.join("design.csv")).unwrap()
        );
        fs::remove_dir_all(a).unwrap();
        fs::remove_dir_all(b).unwrap();
    }

    #[test]
    fn network_pipeline_scores_both_models() {
        let dir = tmp_dir("net");
        let mut c = PipelineConfig::preset(
            Study::Network(NetStudy {
                nodes: 6,
                horizon: 6,
                ..Default::default()
            }),
            5,
        );
        c.design.n_runs = 6;
        c.emulator.n_samples = 30;
        c.emulator.burn_in = 10;
        c.emulator.thin = 2;
        c.calibration.n_samples = 40;
        c.calibration.burn_in = 10;
        c.calibration.thin = 2;
        let p = Pipeline::new(c, Some(dir.clone())).unwrap();
        let scores = p
            .run_all(&[ModeName::Spatial, ModeName::Heterogeneous])
            .unwrap();
        let names: Vec<&str> = scores.iter().map(|s| s.model.as_str()).collect();
        assert_eq!(names, ["spatial", "heterogeneous"]);
        let text = fs::read_to_string(dir.join("scores.csv")).unwrap();
        assert!(text.starts_with("model,GRS,RMSE,n_runs\n"));
        p.predict(Some(ModeName::Spatial), None).unwrap();
        fs::remove_dir_all(dir).unwrap();
    }
}
