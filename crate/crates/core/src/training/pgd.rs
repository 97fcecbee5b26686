use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dissipativity::{check_corollary1, convexified_block, Certificate, QsrSupply, CERT_TOL, LMI_MARGIN, P_FLOOR};
use crate::error::{Error, Result};
use crate::experts::TrainingDataset;
use crate::lmi::{projection_problem, solve_ipm, solve_with, AdmmSettings, IpmSettings, WarmStart};
use crate::numlin::Matrix;

use super::{
    axpy_params, controller_dims, pgd_gradient, random_controller, two_step_loss, ControllerParams, Termination,
    TrainingConfig, TrainingReport,
};

/// A controller projected onto the convexified dissipativity set together
/// with the certificate matrix found alongside it.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Projection {
    pub controller: ControllerParams,
    pub p: Matrix,
    /// Largest eigenvalue of the exact dissipativity inequality.
    pub residual: f64,
}

impl Projection {
    pub fn certificate(&self) -> Certificate {
        Certificate {
            p: self.p.clone(),
            residual: self.residual,
        }
    }
}

fn projection_settings() -> AdmmSettings {
    AdmmSettings::loose(1e-7, 20_000)
}

/// A squared-distance objective needs a small gap for an accurate point.
fn projection_ipm() -> IpmSettings {
    IpmSettings {
        tol: 1e-13,
        max_iters: 100,
        ..Default::default()
    }
}

/// Nearest controller (Frobenius norm over `Â, B̂, Ĉ, D̂`) satisfying the
/// convexified constraint linearized at `P̃`; `P` itself is free.
///
/// Returns `None` when the solver does not reach a verified point.
pub fn project_controller(raw: &ControllerParams, qsr: &QsrSupply, p_tilde: &Matrix) -> Result<Option<Projection>> {
    let n = raw.n_states();
    let (block, vars, nv) = convexified_block(n, qsr, p_tilde)?;
    let floor = crate::dissipativity::p_floor_block(&vars.p, P_FLOOR)?;
    let mut target = vec![0.0; nv];
    vars.write_system(&mut target, raw);
    vars.p.write(&mut target, p_tilde);
    let mut weights = vec![1.0; nv];
    for i in vars.p.range() {
        weights[i] = 0.0;
    }
    let prob = projection_problem(&target, Some(&weights), vec![block, floor], LMI_MARGIN);
    let mut sol = solve_ipm(&prob, &projection_ipm(), Some(&target))?;
    if !sol.is_feasible() {
        let warm = WarmStart {
            x: target.clone(),
            ..Default::default()
        };
        sol = solve_with(&prob, &projection_settings(), Some(&warm))?.0;
        if !sol.is_feasible() {
            return Ok(None);
        }
    }
    let controller = vars.read_system(&sol.x);
    let p = vars.p.read(&sol.x).symmetrize()?;
    let residual = match check_corollary1(&controller, qsr, &p) {
        Ok(r) => r,
        Err(_) => return Ok(None),
    };
    if residual > CERT_TOL {
        return Ok(None);
    }
    Ok(Some(Projection { controller, p, residual }))
}

/// Draws `N(0, 1)` controllers and projects them with `P̃ = I` until one
/// projection succeeds.
pub fn random_dissipative_init(
    n: usize,
    p: usize,
    m: usize,
    qsr: &QsrSupply,
    redraws: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Projection> {
    for _ in 0..redraws.max(1) {
        let raw = random_controller(n, p, m, rng);
        if let Some(pr) = project_controller(&raw, qsr, &Matrix::identity(n))? {
            return Ok(pr);
        }
    }
    Err(Error::SolverAbort(format!(
        "no random draw could be projected onto the dissipative set in {redraws} attempts"
    )))
}

fn empty_report(n: usize, p: usize, m: usize) -> TrainingReport {
    TrainingReport {
        controller: ControllerParams::zero(n, p, m),
        loss_history: Vec::new(),
        surrogate_history: Vec::new(),
        iterate_residuals: Vec::new(),
        wall_time: 0.0,
        termination: Termination::EmptyData,
        certificate: None,
    }
}

/// Projected gradient descent: every iterate is projected back onto the
/// dissipative set, linearized at the previous certificate.
pub fn pgd_train(data: &TrainingDataset, qsr: &QsrSupply, config: &TrainingConfig) -> Result<TrainingReport> {
    config.validate()?;
    if data.is_empty() {
        return Ok(empty_report(0, 0, 0));
    }
    let (n, p, m) = controller_dims(data, config)?;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut cur = random_dissipative_init(n, p, m, qsr, config.init_redraws, &mut rng)?;
    let mut loss = two_step_loss(&cur.controller, data)?;
    let mut history = vec![loss];
    let mut residuals = vec![cur.residual];
    let mut termination = Termination::MaxIterations;
    for i in 0..config.max_iters {
        let g = pgd_gradient(&cur.controller, data)?;
        let lr = config.lr0 * config.lr_decay.powi(i as i32);
        let raw = axpy_params(&cur.controller, &g, -lr);
        let next = match project_controller(&raw, qsr, &cur.p)? {
            Some(pr) => pr,
            None => match project_controller(&raw, qsr, &Matrix::identity(n))? {
                Some(pr) => pr,
                None => {
                    termination = Termination::SolverAbort;
                    break;
                }
            },
        };
        let new_loss = two_step_loss(&next.controller, data)?;
        let change = (new_loss - loss).abs();
        cur = next;
        loss = new_loss;
        history.push(loss);
        residuals.push(cur.residual);
        if change < config.stop_tol {
            termination = Termination::Converged;
            break;
        }
    }
    log::debug!("pgd finished after {} iterates: {termination:?}", history.len());
    Ok(TrainingReport {
        certificate: Some(cur.certificate()),
        controller: cur.controller,
        loss_history: history,
        surrogate_history: Vec::new(),
        iterate_residuals: residuals,
        wall_time: start.elapsed().as_secs_f64(),
        termination,
    })
}

/// Step halvings tried before a baseline gives up on an iteration.
pub(crate) const MAX_HALVINGS: usize = 40;

/// Unconstrained gradient descent from a raw `N(0, 1)` draw. A step that
/// would increase the loss is halved until it does not.
pub fn gd_train(data: &TrainingDataset, config: &TrainingConfig) -> Result<TrainingReport> {
    config.validate()?;
    if data.is_empty() {
        return Ok(empty_report(0, 0, 0));
    }
    let (n, p, m) = controller_dims(data, config)?;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut theta = random_controller(n, p, m, &mut rng);
    let mut loss = two_step_loss(&theta, data)?;
    let mut history = vec![loss];
    let mut termination = Termination::MaxIterations;
    // persistent step reduction, shrunk whenever a step would raise the loss
    let mut scale = 1.0;
    for i in 0..config.max_iters {
        let g = pgd_gradient(&theta, data)?;
        let lr = config.lr0 * config.lr_decay.powi(i as i32);
        let mut step = None;
        for _ in 0..=MAX_HALVINGS {
            let cand = axpy_params(&theta, &g, -lr * scale);
            let l = two_step_loss(&cand, data)?;
            if l.is_finite() && l <= loss {
                step = Some((cand, l));
                break;
            }
            scale *= 0.5;
        }
        let Some((cand, new_loss)) = step else {
            termination = Termination::NoProgress;
            break;
        };
        theta = cand;
        let change = (new_loss - loss).abs();
        loss = new_loss;
        history.push(loss);
        if change < config.stop_tol {
            termination = Termination::Converged;
            break;
        }
    }
    Ok(TrainingReport {
        controller: theta,
        loss_history: history,
        surrogate_history: Vec::new(),
        iterate_residuals: Vec::new(),
        wall_time: start.elapsed().as_secs_f64(),
        termination,
        certificate: None,
    })
}
