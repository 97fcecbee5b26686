//! Experiment orchestration: configuration, training of every method on
//! every dataset, held-out evaluation and table emission.
//!
//! Output files written to `output_dir`:
//!
//! * `results.csv`: one row per `(method, n_traj)` cell with columns
//!   `testbed,method,data_mode,n_traj,n_controllers,percent_stable,
//!   percent_change_cost,train_time_s,mse_q1,mse_median,mse_q3,mse_max,
//!   max_cert_residual`. The residual column is empty for unconstrained
//!   methods.
//! * `runs.csv`: one row per trained controller (see [`RunRecord`]).
//! * `manifest.json`: the configuration, its hash, plant and supply data
//!   and the SHA-256 of every training dataset.
//! * `loss_<id>.csv` and `controller_<id>.json` for every run.

mod eval;
mod query;

pub use query::{matrix_rows, CertifyOutcome, CertifyQuery, SupplySpec, SystemSpec};
pub use eval::{evaluate_controller, evaluate_on, quartiles, trajectory_mse, EvalStats, LearnedController, TestSet};

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dissipativity::{
    check_corollary1, minimize_conic_radius, required_controller_qsr_with_margin, QsrSupply, CERT_TOL,
};
use crate::error::{Error, Result};
use crate::experts::{
    generate_dataset, generate_msd, lqr_expert, DataMode, DatasetSpec, Expert, NmpcSettings, NoiseLevels,
    TrainingDataset,
};
use crate::numlin::spectral_radius;
use crate::plant::{closed_loop_matrix, PlantModel, SinePlant};
use crate::training::{
    gd_train, ico_nc_train, ico_train, nn_train, pgd_train, NnSettings, Termination, TrainingConfig, TrainingReport,
};

/// Environment variable selecting the worker count.
pub const THREADS_ENV: &str = "DISSIPCLONE_THREADS";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Testbed {
    Linear,
    Nonlinear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ico,
    IcoNc,
    Pgd,
    Gd,
    GdNn,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Ico, Method::IcoNc, Method::Pgd, Method::Gd, Method::GdNn];

    /// Whether the method enforces the dissipativity constraint.
    pub fn is_constrained(self) -> bool {
        matches!(self, Method::Ico | Method::Pgd)
    }

    pub fn label(self) -> &'static str {
        match self {
            Method::Ico => "ICO",
            Method::IcoNc => "ICO-NC",
            Method::Pgd => "PGD",
            Method::Gd => "GD",
            Method::GdNn => "GD+NN",
        }
    }

    /// File-name friendly form.
    pub fn slug(self) -> &'static str {
        match self {
            Method::Ico => "ico",
            Method::IcoNc => "ico_nc",
            Method::Pgd => "pgd",
            Method::Gd => "gd",
            Method::GdNn => "gd_nn",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let k = s.trim().to_ascii_lowercase().replace(['-', '+'], "_");
        Method::ALL
            .into_iter()
            .find(|m| m.slug() == k)
            .ok_or_else(|| Error::Config(format!("unknown method '{s}'")))
    }
}

/// Everything that defines an experiment. Serialized as TOML; keys left
/// out of a file take the testbed's preset value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub testbed: Testbed,
    pub methods: Vec<Method>,
    pub n_train_traj: Vec<usize>,
    /// Dataset regimes; each one is a separate table.
    pub data_modes: Vec<DataMode>,
    /// Expert steps simulated per trajectory in sliding-window mode.
    pub window_steps: usize,
    /// Random plants drawn for the linear testbed; the nonlinear testbed
    /// always has one.
    pub n_plants: usize,
    pub seeds: Vec<u64>,
    pub master_seed: u64,
    pub n_test: usize,
    pub test_init_std: f64,
    pub train_init_std: f64,
    pub horizon: usize,
    pub noise: NoiseLevels,
    /// Margin of the controller supply derived from the plant's.
    pub supply_margin: f64,
    pub lqr_input_weight: f64,
    pub lqr_output_weight: f64,
    pub nmpc: NmpcSettings,
    pub training: TrainingConfig,
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Desk-scale mass-spring-damper study.
    pub fn linear() -> Self {
        ExperimentConfig {
            testbed: Testbed::Linear,
            methods: Method::ALL.to_vec(),
            n_train_traj: vec![2, 25, 50],
            data_modes: vec![DataMode::InitialSegments, DataMode::SlidingWindow],
            window_steps: 10,
            n_plants: 3,
            seeds: (0..5).collect(),
            master_seed: 2023,
            n_test: 100,
            test_init_std: 20.0,
            train_init_std: 1.0,
            horizon: 200,
            noise: NoiseLevels::default(),
            supply_margin: 0.4,
            lqr_input_weight: 10.0,
            lqr_output_weight: 1.0,
            nmpc: NmpcSettings::default(),
            training: TrainingConfig {
                max_iters: 150,
                stop_tol: 1e-3,
                ..Default::default()
            },
            output_dir: None,
        }
    }

    /// Desk-scale sine-plant study.
    pub fn nonlinear() -> Self {
        ExperimentConfig {
            testbed: Testbed::Nonlinear,
            n_plants: 1,
            test_init_std: 15.0,
            train_init_std: 5.0,
            training: TrainingConfig {
                max_iters: 150,
                stop_tol: 1e-5,
                nn: NnSettings {
                    width: 25,
                    ..Default::default()
                },
                ..Default::default()
            },
            ..Self::linear()
        }
    }

    pub fn preset(testbed: Testbed) -> Self {
        match testbed {
            Testbed::Linear => Self::linear(),
            Testbed::Nonlinear => Self::nonlinear(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.methods.is_empty() {
            return bad("at least one method is required");
        }
        if self.n_train_traj.is_empty() || self.n_train_traj.contains(&0) {
            return bad("n_train_traj must be a nonempty list of positive counts");
        }
        if self.seeds.is_empty() || self.data_modes.is_empty() {
            return bad("at least one seed and one data mode are required");
        }
        if self.n_plants == 0 || self.n_test == 0 || self.horizon == 0 || self.window_steps < 2 {
            return bad("n_plants, n_test and horizon must be positive and window_steps at least 2");
        }
        let finite_pos = |v: f64| v.is_finite() && v > 0.0;
        if !finite_pos(self.test_init_std) || !finite_pos(self.train_init_std) || !finite_pos(self.supply_margin) {
            return bad("standard deviations and the supply margin must be positive");
        }
        let n = &self.noise;
        if [n.plant, n.controller, n.expert].iter().any(|v| !v.is_finite() || *v < 0.0) {
            return bad("noise levels must be nonnegative");
        }
        self.training.validate()
    }

    /// Parses TOML, filling absent keys from the preset of the file's
    /// `testbed` (linear when absent).
    pub fn from_toml(text: &str) -> Result<Self> {
        let user: toml::Value = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        let testbed = match user.get("testbed").and_then(|v| v.as_str()) {
            Some("nonlinear") => Testbed::Nonlinear,
            Some("linear") | None => Testbed::Linear,
            Some(other) => return Err(Error::Config(format!("unknown testbed '{other}'"))),
        };
        let mut base = toml::Value::try_from(Self::preset(testbed)).map_err(|e| Error::Parse(e.to_string()))?;
        merge(&mut base, user);
        let cfg: Self = base.try_into().map_err(|e: toml::de::Error| Error::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    /// SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> Result<String> {
        Ok(hex(&Sha256::digest(self.to_toml()?.as_bytes())))
    }
}

fn merge(base: &mut toml::Value, user: toml::Value) {
    match (base, user) {
        (toml::Value::Table(b), toml::Value::Table(u)) => {
            for (k, v) in u {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Stable seed derivation from a list of integers (SplitMix64 folding).
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x243f_6a88_85a3_08d3;
    for &p in parts {
        h ^= p.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(h << 6).wrapping_add(h >> 2);
        let mut z = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}

/// One testbed instance: plant, expert and the supply rates involved.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TestbedInstance {
    pub plant: PlantModel,
    pub expert: Expert,
    /// Supply rate certified for the plant.
    pub plant_qsr: QsrSupply,
    /// Supply the learned controller is constrained to.
    pub controller_qsr: QsrSupply,
    pub plant_certificate_residual: f64,
}

/// Draws the plants of a configuration deterministically from its master
/// seed.
pub fn build_testbeds(config: &ExperimentConfig) -> Result<Vec<TestbedInstance>> {
    match config.testbed {
        Testbed::Linear => {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[config.master_seed, 1]));
            (0..config.n_plants)
                .map(|_| {
                    let (sys, cert) = generate_msd(&mut rng)?;
                    let k = lqr_expert(&sys, config.lqr_input_weight, config.lqr_output_weight)?;
                    let plant_qsr = QsrSupply::passive(sys.n_inputs());
                    let controller_qsr = required_controller_qsr_with_margin(&plant_qsr, 1.0, config.supply_margin)?;
                    Ok(TestbedInstance {
                        plant: PlantModel::Linear(sys),
                        expert: Expert::Lqr { k },
                        plant_qsr,
                        controller_qsr,
                        plant_certificate_residual: cert.residual,
                    })
                })
                .collect()
        }
        Testbed::Nonlinear => {
            let plant = SinePlant::benchmark();
            let plant_qsr = minimize_conic_radius(&plant)?;
            let controller_qsr = required_controller_qsr_with_margin(&plant_qsr, 1.0, config.supply_margin)?;
            let residual = crate::dissipativity::certify_nonlinear(&plant, &plant_qsr)?
                .map(|c| c.residual)
                .ok_or_else(|| Error::NoSolution("the sine plant's cone could not be certified".into()))?;
            Ok(vec![TestbedInstance {
                plant: PlantModel::SineNonlinear(plant),
                expert: Expert::Nmpc {
                    plant,
                    settings: config.nmpc,
                },
                plant_qsr,
                controller_qsr,
                plant_certificate_residual: residual,
            }])
        }
    }
}

/// Held-out test set of plant `index`, shared by every run on that plant.
pub fn build_test_set(config: &ExperimentConfig, index: usize, bed: &TestbedInstance) -> Result<TestSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[config.master_seed, 2, index as u64]));
    TestSet::generate(
        &bed.plant,
        &bed.expert,
        config.n_test,
        config.test_init_std,
        config.horizon,
        &config.noise,
        &mut rng,
    )
}

pub fn build_dataset(
    config: &ExperimentConfig,
    index: usize,
    bed: &TestbedInstance,
    seed: u64,
    n_traj: usize,
    mode: DataMode,
) -> Result<TrainingDataset> {
    let spec = DatasetSpec {
        n_traj,
        mode,
        window_steps: config.window_steps,
        init_std: config.train_init_std,
        noise: config.noise,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[config.master_seed, 3, mode_code(mode), index as u64, seed, n_traj as u64]));
    generate_dataset(&bed.plant, &bed.expert, &spec, &mut rng)
}

fn mode_code(mode: DataMode) -> u64 {
    match mode {
        DataMode::InitialSegments => 0,
        DataMode::SlidingWindow => 1,
    }
}

fn mode_tag(mode: DataMode) -> &'static str {
    match mode {
        DataMode::InitialSegments => "is",
        DataMode::SlidingWindow => "sw",
    }
}

/// Result of training one method on one dataset.
#[derive(Clone, Debug)]
pub struct TrainedRun {
    pub controller: Option<LearnedController>,
    pub loss_history: Vec<f64>,
    pub wall_time: f64,
    pub termination: Option<Termination>,
    /// Recomputed residual of the returned certificate (constrained methods).
    pub cert_residual: Option<f64>,
    /// Largest certificate residual over all iterates (constrained methods).
    pub max_iterate_residual: Option<f64>,
    pub error: Option<String>,
}

impl TrainedRun {
    pub fn percent_change(&self) -> f64 {
        match (self.loss_history.first(), self.loss_history.last()) {
            (Some(a), Some(b)) => (b - a) / a * 100.0,
            _ => f64::NAN,
        }
    }

    pub fn loss_csv(&self) -> String {
        let mut s = String::from("iter,loss\n");
        for (i, l) in self.loss_history.iter().enumerate() {
            let _ = writeln!(s, "{i},{l:e}");
        }
        s
    }

    fn from_report(rep: TrainingReport, qsr: Option<&QsrSupply>) -> Self {
        let cert_residual = qsr.map(|q| match &rep.certificate {
            Some(c) => check_corollary1(&rep.controller, q, &c.p).unwrap_or(f64::INFINITY),
            None => f64::INFINITY,
        });
        let max_iterate_residual = qsr.map(|_| {
            rep.iterate_residuals
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max)
        });
        TrainedRun {
            max_iterate_residual,
            controller: Some(LearnedController::Lti(rep.controller)),
            loss_history: rep.loss_history,
            wall_time: rep.wall_time,
            termination: Some(rep.termination),
            cert_residual,
            error: None,
        }
    }

    /// A failed certificate, a solver abort or an error.
    pub fn is_failure(&self, constrained: bool) -> bool {
        self.error.is_some()
            || self.termination == Some(Termination::SolverAbort) && constrained
            || (constrained && !self.cert_residual.is_some_and(|r| r <= CERT_TOL))
            || (constrained && self.max_iterate_residual.is_some_and(|r| r > CERT_TOL))
    }
}

/// Trains `method`; errors are captured in the run rather than returned.
pub fn train_method(method: Method, data: &TrainingDataset, bed: &TestbedInstance, seed: u64, config: &TrainingConfig) -> TrainedRun {
    let cfg = TrainingConfig { seed, ..*config };
    let qsr = &bed.controller_qsr;
    let out = match method {
        Method::Ico => ico_train(data, qsr, &cfg).map(|r| TrainedRun::from_report(r, Some(qsr))),
        Method::Pgd => pgd_train(data, qsr, &cfg).map(|r| TrainedRun::from_report(r, Some(qsr))),
        Method::IcoNc => ico_nc_train(data, &cfg).map(|r| TrainedRun::from_report(r, None)),
        Method::Gd => gd_train(data, &cfg).map(|r| TrainedRun::from_report(r, None)),
        Method::GdNn => {
            let dims = (bed.plant.n_outputs(), bed.plant.n_inputs());
            nn_train(data, &cfg.nn, cfg.stop_tol, seed, dims).map(|r| TrainedRun {
                controller: Some(LearnedController::Mlp(r.params)),
                loss_history: r.loss_history,
                wall_time: r.wall_time,
                termination: Some(r.termination),
                cert_residual: None,
                max_iterate_residual: None,
                error: None,
            })
        }
    };
    out.unwrap_or_else(|e| {
        log::warn!("{} training failed: {e}", method.label());
        TrainedRun {
            controller: None,
            loss_history: Vec::new(),
            wall_time: 0.0,
            termination: None,
            cert_residual: method.is_constrained().then_some(f64::INFINITY),
            max_iterate_residual: None,
            error: Some(e.to_string()),
        }
    })
}

/// Per-controller row of `runs.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub id: String,
    pub method: Method,
    pub data_mode: DataMode,
    pub plant: usize,
    pub seed: u64,
    pub n_traj: usize,
    pub n_segments: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub iterations: usize,
    pub termination: String,
    pub train_time_s: f64,
    /// Fraction of test rollouts, in percent, that stayed bounded.
    pub rollouts_stable: f64,
    pub stable: bool,
    pub mean_mse: f64,
    pub cert_residual: Option<f64>,
    pub max_iterate_residual: Option<f64>,
    /// Spectral radius of the noise-free loop, linear testbed only.
    pub closed_loop_radius: Option<f64>,
}

/// One row of `results.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub method: Method,
    pub data_mode: DataMode,
    pub n_traj: usize,
    pub n_controllers: usize,
    pub percent_stable: f64,
    pub percent_change_cost: f64,
    pub train_time_s: f64,
    pub mse_q1: f64,
    pub mse_median: f64,
    pub mse_q3: f64,
    pub mse_max: f64,
    pub max_cert_residual: Option<f64>,
}

pub const RESULTS_HEADER: &str = "testbed,method,data_mode,n_traj,n_controllers,percent_stable,percent_change_cost,train_time_s,mse_q1,mse_median,mse_q3,mse_max,max_cert_residual";

pub const RUNS_HEADER: &str = "id,method,data_mode,plant,seed,n_traj,n_segments,initial_loss,final_loss,iterations,termination,train_time_s,rollouts_stable,stable,mean_mse,cert_residual,max_iterate_residual,closed_loop_radius";

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:e}")).unwrap_or_default()
}

fn slug<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(String::from))
        .unwrap_or_default()
}

/// Aggregates run rows into one record per `(data mode, method, n_traj)`.
pub fn aggregate(runs: &[RunRecord]) -> Vec<EvalRecord> {
    let mut keys: Vec<(u64, Method, usize)> = runs.iter().map(|r| (mode_code(r.data_mode), r.method, r.n_traj)).collect();
    keys.sort();
    keys.dedup();
    keys.into_iter()
        .map(|(code, method, n_traj)| {
            let cell: Vec<&RunRecord> = runs
                .iter()
                .filter(|r| mode_code(r.data_mode) == code && r.method == method && r.n_traj == n_traj)
                .collect();
            let data_mode = cell[0].data_mode;
            let n = cell.len() as f64;
            let mses: Vec<f64> = cell.iter().map(|r| r.mean_mse).collect();
            let (mse_q1, mse_median, mse_q3, mse_max) = quartiles(&mses);
            let max_cert_residual = method.is_constrained().then(|| {
                cell.iter()
                    .map(|r| r.cert_residual.unwrap_or(f64::INFINITY))
                    .fold(f64::NEG_INFINITY, f64::max)
            });
            EvalRecord {
                method,
                data_mode,
                n_traj,
                n_controllers: cell.len(),
                percent_stable: 100.0 * cell.iter().filter(|r| r.stable).count() as f64 / n,
                percent_change_cost: cell.iter().map(|r| r.percent_change()).sum::<f64>() / n,
                train_time_s: cell.iter().map(|r| r.train_time_s).sum::<f64>() / n,
                mse_q1,
                mse_median,
                mse_q3,
                mse_max,
                max_cert_residual,
            }
        })
        .collect()
}

impl RunRecord {
    fn percent_change(&self) -> f64 {
        (self.final_loss - self.initial_loss) / self.initial_loss * 100.0
    }
}

/// Everything an experiment produced.
#[derive(Clone, Debug)]
pub struct ExperimentOutput {
    pub config: ExperimentConfig,
    pub records: Vec<EvalRecord>,
    pub runs: Vec<RunRecord>,
    pub testbeds: Vec<TestbedInstance>,
    pub dataset_hashes: Vec<(String, String)>,
    /// Loss history and controller of every run, keyed like `runs`.
    pub artifacts: Vec<(String, String, Option<String>)>,
    /// Any constrained run without a passing certificate, any solver abort
    /// or training error.
    pub failures: Vec<String>,
}

impl ExperimentOutput {
    pub fn results_csv(&self, include_timing: bool) -> String {
        let mut s = String::from(RESULTS_HEADER);
        s.push('\n');
        for r in &self.records {
            let t = if include_timing { format!("{:e}", r.train_time_s) } else { String::new() };
            let _ = writeln!(
                s,
                "{},{},{},{},{},{:e},{:e},{},{:e},{:e},{:e},{:e},{}",
                slug(&self.config.testbed),
                r.method.label(),
                slug(&r.data_mode),
                r.n_traj,
                r.n_controllers,
                r.percent_stable,
                r.percent_change_cost,
                t,
                r.mse_q1,
                r.mse_median,
                r.mse_q3,
                r.mse_max,
                opt(r.max_cert_residual)
            );
        }
        s
    }

    pub fn runs_csv(&self, include_timing: bool) -> String {
        let mut s = String::from(RUNS_HEADER);
        s.push('\n');
        for r in &self.runs {
            let t = if include_timing { format!("{:e}", r.train_time_s) } else { String::new() };
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{:e},{:e},{},{},{},{:e},{},{:e},{},{},{}",
                r.id,
                r.method.label(),
                slug(&r.data_mode),
                r.plant,
                r.seed,
                r.n_traj,
                r.n_segments,
                r.initial_loss,
                r.final_loss,
                r.iterations,
                r.termination,
                t,
                r.rollouts_stable,
                r.stable,
                r.mean_mse,
                opt(r.cert_residual),
                opt(r.max_iterate_residual),
                opt(r.closed_loop_radius)
            );
        }
        s
    }

    pub fn manifest(&self) -> Result<serde_json::Value> {
        let beds: Vec<serde_json::Value> = self
            .testbeds
            .iter()
            .map(|b| {
                serde_json::json!({
                    "plant": b.plant,
                    "plant_qsr": b.plant_qsr,
                    "controller_qsr": b.controller_qsr,
                    "plant_certificate_residual": b.plant_certificate_residual,
                })
            })
            .collect();
        let datasets: Vec<serde_json::Value> = self
            .dataset_hashes
            .iter()
            .map(|(k, h)| serde_json::json!({"dataset": k, "sha256": h}))
            .collect();
        Ok(serde_json::json!({
            "crate_version": env!("CARGO_PKG_VERSION"),
            "config_sha256": self.config.hash()?,
            "config": self.config,
            "testbeds": beds,
            "datasets": datasets,
            "n_runs": self.runs.len(),
            "failures": self.failures,
        }))
    }

    /// Writes every output file into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("results.csv"), self.results_csv(true))?;
        std::fs::write(dir.join("runs.csv"), self.runs_csv(true))?;
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&self.manifest()?)?)?;
        for (id, loss, ctrl) in &self.artifacts {
            std::fs::write(dir.join(format!("loss_{id}.csv")), loss)?;
            if let Some(c) = ctrl {
                std::fs::write(dir.join(format!("controller_{id}.json")), c)?;
            }
        }
        Ok(())
    }
}

/// Worker pool sized by `DISSIPCLONE_THREADS` (rayon's default when unset).
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{THREADS_ENV} must be a positive integer, got '{v}'")))?;
        if n == 0 {
            return Err(Error::Config(format!("{THREADS_ENV} must be positive")));
        }
        b = b.num_threads(n);
    }
    b.build().map_err(|e| Error::Config(e.to_string()))
}

struct Job {
    mode: DataMode,
    plant: usize,
    seed: u64,
    n_traj: usize,
    method: Method,
    data: usize,
}

/// Runs the full `method × n_traj × seed` cross-product on every plant and
/// writes the outputs when `output_dir` is set. Results depend only on the
/// configuration; wall times aside, repeated runs are byte-identical.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    config.validate()?;
    let pool = thread_pool()?;
    let out = pool.install(|| run_inner(config))?;
    if let Some(dir) = &config.output_dir {
        out.write(dir)?;
    }
    Ok(out)
}

fn run_inner(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    let beds = build_testbeds(config)?;
    log::info!("{} plant(s) ready, simulating expert test rollouts", beds.len());
    let tests = beds
        .par_iter()
        .enumerate()
        .map(|(i, b)| build_test_set(config, i, b))
        .collect::<Result<Vec<_>>>()?;

    let mut cells = Vec::new();
    for &mode in &config.data_modes {
        for plant in 0..beds.len() {
            for &seed in &config.seeds {
                for &n_traj in &config.n_train_traj {
                    cells.push((mode, plant, seed, n_traj));
                }
            }
        }
    }
    let datasets = cells
        .par_iter()
        .map(|&(mode, plant, seed, n_traj)| build_dataset(config, plant, &beds[plant], seed, n_traj, mode))
        .collect::<Result<Vec<_>>>()?;
    let dataset_hashes = cells
        .iter()
        .zip(&datasets)
        .map(|((mode, p, s, n), d)| (format!("{}_p{p}_s{s}_n{n}", mode_tag(*mode)), d.sha256()))
        .collect();

    let mut jobs = Vec::new();
    for (ci, &(mode, plant, seed, n_traj)) in cells.iter().enumerate() {
        for &method in &config.methods {
            jobs.push(Job {
                mode,
                plant,
                seed,
                n_traj,
                method,
                data: ci,
            });
        }
    }
    log::info!("training {} controllers", jobs.len());
    let results: Vec<(RunRecord, String, Option<String>, Option<String>)> = jobs
        .par_iter()
        .map(|job| {
            let bed = &beds[job.plant];
            let data = &datasets[job.data];
            let run = train_method(job.method, data, bed, job.seed, &config.training);
            let id = format!(
                "{}_{}_n{}_p{}_s{}",
                job.method.slug(),
                mode_tag(job.mode),
                job.n_traj,
                job.plant,
                job.seed
            );
            let stats = match &run.controller {
                Some(c) => evaluate_on(&bed.plant, &tests[job.plant], c),
                None => EvalStats {
                    mse: vec![f64::INFINITY; tests[job.plant].len()],
                    stable: vec![false; tests[job.plant].len()],
                },
            };
            let closed_loop_radius = match (&bed.plant, &run.controller) {
                (PlantModel::Linear(sys), Some(LearnedController::Lti(c))) => {
                    closed_loop_matrix(sys, c).and_then(|m| spectral_radius(&m)).ok()
                }
                _ => None,
            };
            let failure = run.is_failure(job.method.is_constrained()).then(|| {
                format!(
                    "{id}: {}",
                    run.error.clone().unwrap_or_else(|| format!(
                        "termination {:?}, certificate residual {:?}",
                        run.termination, run.cert_residual
                    ))
                )
            });
            let rec = RunRecord {
                id: id.clone(),
                method: job.method,
                data_mode: job.mode,
                plant: job.plant,
                seed: job.seed,
                n_traj: job.n_traj,
                n_segments: data.len(),
                initial_loss: run.loss_history.first().copied().unwrap_or(f64::NAN),
                final_loss: run.loss_history.last().copied().unwrap_or(f64::NAN),
                iterations: run.loss_history.len().saturating_sub(1),
                termination: run.termination.map(|t| slug(&t)).unwrap_or_else(|| "error".into()),
                train_time_s: run.wall_time,
                rollouts_stable: 100.0 * stats.stable_ratio(),
                stable: stats.all_stable(),
                mean_mse: stats.mean_mse(),
                cert_residual: run.cert_residual,
                max_iterate_residual: run.max_iterate_residual,
                closed_loop_radius,
            };
            log::info!(
                "{id}: loss {:.4e} -> {:.4e}, stable {}, mse {:.3e}",
                rec.initial_loss,
                rec.final_loss,
                rec.stable,
                rec.mean_mse
            );
            let ctrl = run.controller.as_ref().and_then(|c| c.to_json().ok());
            (rec, run.loss_csv(), ctrl, failure)
        })
        .collect();

    let mut runs = Vec::with_capacity(results.len());
    let mut artifacts = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    for (rec, loss, ctrl, fail) in results {
        artifacts.push((rec.id.clone(), loss, ctrl));
        failures.extend(fail);
        runs.push(rec);
    }
    Ok(ExperimentOutput {
        config: config.clone(),
        records: aggregate(&runs),
        runs,
        testbeds: beds,
        dataset_hashes,
        artifacts,
        failures,
    })
}
