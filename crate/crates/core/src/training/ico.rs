use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dissipativity::{check_corollary1, Certificate, QsrSupply, CERT_TOL};
use crate::error::Result;
use crate::experts::TrainingDataset;
use crate::lmi::{solve_ipm, solve_with, AdmmSettings, IpmSettings, SdpProblem, SdpSolution, WarmStart};
use crate::numlin::{sym_eig, Matrix};

use super::pgd::random_dissipative_init;
use super::surrogate::{expand_and_overbound, Bookkeeping, SurrogateSpec};
use super::{InnerSolver, axpy_params, controller_dims, random_controller, two_step_loss, ControllerParams, Termination, TrainingConfig, TrainingReport};

/// Slack on the true-loss decrease test of an accepted step.
const DESCENT_SLACK: f64 = 1e-12;

/// Iterative convex overbounding with the dissipativity constraint: every
/// iterate is certified against `qsr`.
pub fn ico_train(data: &TrainingDataset, qsr: &QsrSupply, config: &TrainingConfig) -> Result<TrainingReport> {
    ico_core(data, Some(qsr), config, None)
}

/// The same surrogate iteration without the dissipativity constraint.
pub fn ico_nc_train(data: &TrainingDataset, config: &TrainingConfig) -> Result<TrainingReport> {
    ico_core(data, None, config, None)
}

/// Starts from a given controller and certificate (for constrained runs,
/// the pair must satisfy the convexified constraint).
pub fn ico_train_from(
    data: &TrainingDataset,
    qsr: Option<&QsrSupply>,
    config: &TrainingConfig,
    init: (ControllerParams, Option<Matrix>),
) -> Result<TrainingReport> {
    ico_core(data, qsr, config, Some(init))
}

fn clamp_weight(w: &Matrix, lo: f64, hi: f64) -> Result<Matrix> {
    Ok(sym_eig(&w.symmetrize()?)?.reconstruct_with(|v| v.clamp(lo, hi)))
}

struct Outcome {
    delta: ControllerParams,
    p_star: Option<Matrix>,
    w_star: Vec<Matrix>,
    surrogate: f64,
}

impl Outcome {
    fn from_solution(sol: &SdpSolution, book: &Bookkeeping, prob: &SdpProblem) -> Self {
        Outcome {
            delta: book.delta.read(&sol.x),
            p_star: book.p.map(|pv| pv.read(&sol.x)),
            w_star: book.read_weights(&sol.x),
            surrogate: book.surrogate_value(prob, &sol.x),
        }
    }
}

struct StepCtx<'a> {
    data: &'a TrainingDataset,
    qsr: Option<&'a QsrSupply>,
    max_backtracks: usize,
}

type Accepted = (ControllerParams, Option<Matrix>, f64, f64, f64);

/// Accepts the surrogate step, or a shortened one with `P` interpolated
/// between `P̃` and `P*`, when it certifies and does not raise the true
/// loss. The full step decreases the loss in exact arithmetic; halving
/// absorbs solver inaccuracy.
fn safeguard(
    theta: &ControllerParams,
    p_tilde: &Option<Matrix>,
    loss: f64,
    out: &Outcome,
    ctx: &StepCtx,
) -> Result<Option<Accepted>> {
    let mut t = 1.0;
    for _ in 0..=ctx.max_backtracks {
        let cand = axpy_params(theta, &out.delta, t);
        let p_cand = match (p_tilde, &out.p_star) {
            (Some(pt), Some(ps)) => Some((&pt.scale(1.0 - t) + &ps.scale(t)).symmetrize()?),
            _ => None,
        };
        let res = match (ctx.qsr, &p_cand) {
            (Some(q), Some(pm)) => check_corollary1(&cand, q, pm).unwrap_or(f64::INFINITY),
            _ => f64::NAN,
        };
        if ctx.qsr.is_none() || res <= CERT_TOL {
            let l = two_step_loss(&cand, ctx.data)?;
            if l.is_finite() && l <= loss + DESCENT_SLACK {
                return Ok(Some((cand, p_cand, l, res, t)));
            }
        }
        t *= 0.5;
    }
    Ok(None)
}

fn inner_solve(prob: &SdpProblem, config: &TrainingConfig, warm: Option<&WarmStart>) -> Result<(SdpSolution, WarmStart)> {
    match config.ico.solver {
        InnerSolver::InteriorPoint => {
            let set = IpmSettings {
                tol: config.ico.solver_eps,
                max_iters: config.ico.solver_max_iters,
                ..Default::default()
            };
            let sol = solve_ipm(prob, &set, warm.map(|w| w.x.as_slice()))?;
            let ws = WarmStart {
                x: sol.x.clone(),
                ..Default::default()
            };
            Ok((sol, ws))
        }
        InnerSolver::Admm => {
            let set = AdmmSettings::loose(config.ico.solver_eps, config.ico.solver_max_iters);
            solve_with(prob, &set, warm)
        }
    }
}

fn ico_core(
    data: &TrainingDataset,
    qsr: Option<&QsrSupply>,
    config: &TrainingConfig,
    init: Option<(ControllerParams, Option<Matrix>)>,
) -> Result<TrainingReport> {
    config.validate()?;
    let start = Instant::now();
    if data.is_empty() {
        return Ok(TrainingReport {
            controller: ControllerParams::zero(0, 0, 0),
            loss_history: Vec::new(),
            surrogate_history: Vec::new(),
            iterate_residuals: Vec::new(),
            wall_time: 0.0,
            termination: Termination::EmptyData,
            certificate: None,
        });
    }
    let (n, p, m) = controller_dims(data, config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (mut theta, mut p_tilde) = match (init, qsr) {
        (Some((c, pm)), Some(_)) => (c, Some(pm.unwrap_or_else(|| Matrix::identity(n)))),
        (Some((c, _)), None) => (c, None),
        (None, Some(q)) => {
            let pr = random_dissipative_init(n, p, m, q, config.init_redraws, &mut rng)?;
            (pr.controller, Some(pr.p))
        }
        (None, None) => (random_controller(n, p, m, &mut rng), None),
    };
    let residual_of = |c: &ControllerParams, pm: &Option<Matrix>| -> Result<f64> {
        match (qsr, pm) {
            (Some(q), Some(pm)) => check_corollary1(c, q, pm),
            _ => Ok(f64::NAN),
        }
    };
    let mut loss = two_step_loss(&theta, data)?;
    let mut history = vec![loss];
    let mut surrogate_history = Vec::new();
    let mut residuals = Vec::new();
    if qsr.is_some() {
        residuals.push(residual_of(&theta, &p_tilde)?);
    }
    let mut w_tilde: Option<Vec<Matrix>> = None;
    let mut warm: Option<WarmStart> = None;
    let mut termination = Termination::MaxIterations;
    let step_ctx = StepCtx {
        data,
        qsr,
        max_backtracks: config.ico.max_backtracks,
    };

    for iter in 0..config.max_iters {
        let spec = SurrogateSpec {
            mode: config.ico.mode,
            qsr,
            p_tilde: p_tilde.as_ref(),
            w_tilde: w_tilde.as_deref(),
            p_floor: config.ico.p_floor,
        };
        let (prob, book) = expand_and_overbound(&theta, data, &spec)?;
        let wt: Vec<Matrix> = match &w_tilde {
            Some(w) => w.clone(),
            None => book
                .terms
                .iter()
                .flat_map(|t| t.w.iter().map(|w| Matrix::identity(w.rows)))
                .collect(),
        };
        let x0 = book.interior_point(p_tilde.as_ref(), &wt, 1e-2);
        let mut ws = warm.clone().unwrap_or_default();
        ws.x = x0.clone();
        let (sol, next_warm) = inner_solve(&prob, config, Some(&ws))?;
        let mut outcome = Outcome::from_solution(&sol, &book, &prob);
        let mut step = safeguard(&theta, &p_tilde, loss, &outcome, &step_ctx)?;
        let mut next_warm = next_warm;
        let mut verified = sol.is_feasible();
        if step.is_none() {
            // one retry from the primal point alone with the default penalty
            let fresh = WarmStart {
                x: x0.clone(),
                ..Default::default()
            };
            let (s2, w2) = inner_solve(&prob, config, Some(&fresh).filter(|_| config.ico.solver == InnerSolver::Admm))?;
            outcome = Outcome::from_solution(&s2, &book, &prob);
            step = safeguard(&theta, &p_tilde, loss, &outcome, &step_ctx)?;
            next_warm = w2;
            verified = s2.is_feasible();
        }
        if !verified {
            log::debug!("ico iteration {iter}: surrogate solve stopped before verification");
        }
        let Some((cand, p_cand, new_loss, res, t)) = step else {
            termination = if verified { Termination::NoProgress } else { Termination::SolverAbort };
            break;
        };
        let (w_star, surrogate) = (outcome.w_star, outcome.surrogate);
        if t < 1.0 {
            log::debug!("ico iteration {iter}: step shortened to {t}");
        }
        let change = (loss - new_loss).abs();
        theta = cand;
        p_tilde = p_cand;
        loss = new_loss;
        history.push(loss);
        surrogate_history.push(surrogate);
        if qsr.is_some() {
            residuals.push(res);
        }
        w_tilde = Some(
            w_star
                .iter()
                .map(|w| clamp_weight(w, config.ico.w_min, config.ico.w_max))
                .collect::<Result<Vec<_>>>()?,
        );
        warm = Some(next_warm);
        if change < config.stop_tol {
            termination = Termination::Converged;
            break;
        }
    }

    let certificate = match (qsr, &p_tilde) {
        (Some(q), Some(pm)) => Some(Certificate {
            p: pm.clone(),
            residual: check_corollary1(&theta, q, pm)?,
        }),
        _ => None,
    };
    Ok(TrainingReport {
        controller: theta,
        loss_history: history,
        surrogate_history,
        iterate_residuals: residuals,
        wall_time: start.elapsed().as_secs_f64(),
        termination,
        certificate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experts::{DataMode, Segment};
    use crate::training::tests::random_dataset;
    use crate::training::SurrogateMode;

    fn small_config(seed: u64) -> TrainingConfig {
        TrainingConfig {
            max_iters: 8,
            stop_tol: 1e-9,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn monotone_and_certified() {
        let data = random_dataset(12, 2, 1, 1, 21);
        let qsr = QsrSupply::passive(1);
        for seed in 0..3 {
            let rep = ico_train(&data, &qsr, &small_config(seed)).unwrap();
            for w in rep.loss_history.windows(2) {
                assert!(w[1] <= w[0] + 1e-9, "{:?}", rep.loss_history);
            }
            assert!(rep.iterate_residuals.iter().all(|r| *r <= CERT_TOL));
            assert!(rep.certificate.as_ref().unwrap().is_valid());
            assert!(rep.final_loss() < rep.initial_loss());
            // surrogate bounds the true loss of every accepted iterate
            for (s, l) in rep.surrogate_history.iter().zip(&rep.loss_history[1..]) {
                assert!(*s >= l - 1e-6 || rep.termination != Termination::Converged);
            }
        }
    }

    #[test]
    fn unconstrained_variant_decreases() {
        let data = random_dataset(8, 1, 1, 1, 3);
        let mut cfg = small_config(1);
        cfg.ico.mode = SurrogateMode::PerSegment;
        let rep = ico_nc_train(&data, &cfg).unwrap();
        assert!(rep.certificate.is_none());
        for w in rep.loss_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-9);
        }
        assert!(rep.final_loss() < rep.initial_loss());
    }

    #[test]
    fn already_optimal_controller_stops_immediately() {
        // data generated by a passive controller, noise free
        let c = ControllerParams::scalar(0.5, 1.0, 0.2, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let segments = (0..10)
            .map(|_| {
                use rand::Rng;
                let x0 = vec![rng.gen_range(-1.0..1.0)];
                let u_hat = vec![vec![rng.gen_range(-1.0..1.0)], vec![rng.gen_range(-1.0..1.0)]];
                let u = crate::training::forward_propagate(&c, &x0, &u_hat).unwrap();
                Segment { x_hat0: x0, u_hat, u }
            })
            .collect();
        let data = TrainingDataset {
            segments,
            mode: DataMode::InitialSegments,
            segment_length: 2,
        };
        let qsr = QsrSupply::passive(1);
        let p0 = crate::dissipativity::kyp_qsr(&c, &qsr).unwrap().unwrap().p;
        let rep = ico_train_from(&data, Some(&qsr), &TrainingConfig::default(), (c.clone(), Some(p0))).unwrap();
        assert!(rep.loss_history.len() <= 2);
        assert!(rep.final_loss() < 1e-9);
    }
}
