//! `dissipclone`: certificates, training and experiment reproduction.
//!
//! Exit codes: 0 on success, 1 when a certificate is missing or fails, a
//! solver aborts or any run of an experiment fails, 2 on usage,
//! configuration or I/O errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dissipclone_core::experts::{DataMode, TrainingDataset};
use dissipclone_core::harness::{
    build_dataset, build_testbeds, quartiles, run_experiment, train_method, CertifyQuery, ExperimentConfig,
    LearnedController, Method, TestSet, Testbed, TestbedInstance,
};
use dissipclone_core::training::{controller_from_json, MlpParams, Termination};
use dissipclone_core::{Error, Result};

#[derive(Parser)]
#[command(name = "dissipclone", version, about = "Dissipativity-constrained behavior cloning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Bed {
    Linear,
    Nonlinear,
}

impl From<Bed> for Testbed {
    fn from(b: Bed) -> Self {
        match b {
            Bed::Linear => Testbed::Linear,
            Bed::Nonlinear => Testbed::Nonlinear,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Initial,
    Sliding,
}

impl From<Mode> for DataMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Initial => DataMode::InitialSegments,
            Mode::Sliding => DataMode::SlidingWindow,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Certify a system against a supply rate given in a TOML query.
    Certify {
        #[arg(long)]
        config: PathBuf,
        /// Also write the certificate JSON into this directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw a testbed plant and an expert dataset.
    Generate {
        testbed: Bed,
        #[arg(long, default_value_t = 25)]
        n_traj: usize,
        #[arg(long, value_enum, default_value_t = Mode::Sliding)]
        mode: Mode,
        /// Which of the configuration's plants to use.
        #[arg(long, default_value_t = 0)]
        plant: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one method on a dataset written by `generate`.
    Train {
        /// Directory holding `dataset.csv`, `dataset.json` and `testbed.json`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        method: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Experiment TOML whose `[training]` table is used.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a trained controller against the expert on fresh rollouts.
    Evaluate {
        #[arg(long)]
        controller: PathBuf,
        /// `testbed.json` written by `generate`.
        #[arg(long)]
        testbed: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the full experiment of a testbed and write its tables.
    Reproduce {
        testbed: Bed,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Master seed for plants, data and test sets.
        #[arg(long)]
        seed: Option<u64>,
        /// Use training seeds `0..n`.
        #[arg(long)]
        n_seeds: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>, testbed: Testbed) -> Result<ExperimentConfig> {
    match path {
        Some(p) => {
            let mut text = std::fs::read_to_string(p)?;
            if !text.contains("testbed") {
                let name = match testbed {
                    Testbed::Linear => "linear",
                    Testbed::Nonlinear => "nonlinear",
                };
                text = format!("testbed = \"{name}\"\n{text}");
            }
            let cfg = ExperimentConfig::from_toml(&text)?;
            if cfg.testbed != testbed {
                return Err(Error::Config("the configuration file names a different testbed".into()));
            }
            Ok(cfg)
        }
        None => Ok(ExperimentConfig::preset(testbed)),
    }
}

fn write_json(dir: &Path, name: &str, value: &impl serde::Serialize) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(name), serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn read_testbed(path: &Path) -> Result<TestbedInstance> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

fn testbed_kind(bed: &TestbedInstance) -> Testbed {
    match bed.plant {
        dissipclone_core::PlantModel::Linear(_) => Testbed::Linear,
        dissipclone_core::PlantModel::SineNonlinear(_) => Testbed::Nonlinear,
    }
}

fn certify(config: &Path, out: Option<&Path>) -> Result<bool> {
    let query = CertifyQuery::from_toml(&std::fs::read_to_string(config)?)?;
    let outcome = query.run()?;
    println!("{}", serde_json::to_string_pretty(&outcome)?);
    if let Some(dir) = out {
        write_json(dir, "certificate.json", &outcome)?;
    }
    if !outcome.certified {
        eprintln!("no certificate");
    }
    Ok(outcome.certified)
}

fn generate(
    testbed: Testbed,
    n_traj: usize,
    mode: DataMode,
    plant: usize,
    seed: u64,
    config: Option<&Path>,
    out: &Path,
) -> Result<bool> {
    let mut cfg = load_config(config, testbed)?;
    cfg.n_plants = cfg.n_plants.max(plant + 1);
    let beds = build_testbeds(&cfg)?;
    let bed = beds
        .get(plant)
        .ok_or_else(|| Error::Config(format!("the nonlinear testbed has a single plant, not {}", plant + 1)))?;
    let data = build_dataset(&cfg, plant, bed, seed, n_traj, mode)?;
    data.save(out, "dataset")?;
    write_json(out, "testbed.json", bed)?;
    println!("{} segments written to {}", data.len(), out.display());
    Ok(true)
}

fn train(data_dir: &Path, method: &str, seed: u64, config: Option<&Path>, out: &Path) -> Result<bool> {
    let method = Method::parse(method)?;
    let data = TrainingDataset::load(data_dir, "dataset")?;
    let bed = read_testbed(&data_dir.join("testbed.json"))?;
    let cfg = load_config(config, testbed_kind(&bed))?;
    let run = train_method(method, &data, &bed, seed, &cfg.training);
    if let Some(e) = &run.error {
        return Err(Error::SolverAbort(e.clone()));
    }
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("loss.csv"), run.loss_csv())?;
    if let Some(c) = &run.controller {
        std::fs::write(out.join("controller.json"), c.to_json()?)?;
    }
    let summary = serde_json::json!({
        "method": method.label(),
        "termination": run.termination,
        "iterations": run.loss_history.len().saturating_sub(1),
        "initial_loss": run.loss_history.first(),
        "final_loss": run.loss_history.last(),
        "percent_change_cost": run.percent_change(),
        "train_time_s": run.wall_time,
        "cert_residual": run.cert_residual,
        "max_iterate_residual": run.max_iterate_residual,
    });
    write_json(out, "report.json", &summary)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    let failed = run.is_failure(method.is_constrained());
    if failed {
        if run.termination == Some(Termination::SolverAbort) {
            eprintln!("solver aborted");
        } else {
            eprintln!("certificate check failed");
        }
    }
    Ok(!failed)
}

fn read_controller(path: &Path) -> Result<LearnedController> {
    let text = std::fs::read_to_string(path)?;
    if let Ok(c) = controller_from_json(&text) {
        return Ok(LearnedController::Lti(c));
    }
    let p: MlpParams = serde_json::from_str(&text)?;
    p.validate()?;
    Ok(LearnedController::Mlp(p))
}

fn evaluate(controller: &Path, testbed: &Path, seed: u64, config: Option<&Path>, out: Option<&Path>) -> Result<bool> {
    let bed = read_testbed(testbed)?;
    let cfg = load_config(config, testbed_kind(&bed))?;
    let ctrl = read_controller(controller)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tests = TestSet::generate(
        &bed.plant,
        &bed.expert,
        cfg.n_test,
        cfg.test_init_std,
        cfg.horizon,
        &cfg.noise,
        &mut rng,
    )?;
    let stats = dissipclone_core::harness::evaluate_on(&bed.plant, &tests, &ctrl);
    let (q1, med, q3, max) = quartiles(&stats.mse);
    let record = serde_json::json!({
        "n_test": tests.len(),
        "percent_stable": 100.0 * stats.stable_ratio(),
        "mean_mse": stats.mean_mse(),
        "mse_q1": q1,
        "mse_median": med,
        "mse_q3": q3,
        "mse_max": max,
    });
    println!("{}", serde_json::to_string_pretty(&record)?);
    if let Some(dir) = out {
        write_json(dir, "evaluation.json", &record)?;
    }
    Ok(true)
}

fn reproduce(
    testbed: Testbed,
    config: Option<&Path>,
    seed: Option<u64>,
    n_seeds: Option<u64>,
    out: Option<PathBuf>,
) -> Result<bool> {
    let mut cfg = load_config(config, testbed)?;
    if let Some(s) = seed {
        cfg.master_seed = s;
    }
    if let Some(n) = n_seeds {
        cfg.seeds = (0..n).collect();
    }
    if out.is_some() {
        cfg.output_dir = out;
    }
    let result = run_experiment(&cfg)?;
    print!("{}", result.results_csv(true));
    for f in &result.failures {
        eprintln!("failed: {f}");
    }
    Ok(result.failures.is_empty())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Certify { config, out } => certify(&config, out.as_deref()),
        Command::Generate {
            testbed,
            n_traj,
            mode,
            plant,
            seed,
            config,
            out,
        } => generate(testbed.into(), n_traj, mode.into(), plant, seed, config.as_deref(), &out),
        Command::Train {
            data,
            method,
            seed,
            config,
            out,
        } => train(&data, &method, seed, config.as_deref(), &out),
        Command::Evaluate {
            controller,
            testbed,
            seed,
            config,
            out,
        } => evaluate(&controller, &testbed, seed, config.as_deref(), out.as_deref()),
        Command::Reproduce {
            testbed,
            config,
            seed,
            n_seeds,
            out,
        } => reproduce(testbed.into(), config.as_deref(), seed, n_seeds, out),
    };
    match res {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e @ Error::SolverAbort(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
