use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::experts::{Expert, NoiseLevels};
use crate::plant::{is_stable_trajectory, simulate, LtiFeedback, NoiseSeq, PlantModel, Policy, Trajectory, STABILITY_BOUND};
use crate::training::{ControllerParams, MlpParams, NnPolicy};

/// A trained policy of either family.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LearnedController {
    Lti(ControllerParams),
    Mlp(MlpParams),
}

impl LearnedController {
    /// Fresh policy for one rollout. The dynamic controller starts at the
    /// plant's initial state, as in the training segments.
    pub fn policy(&self, plant: &PlantModel, x0: &[f64]) -> Result<Box<dyn Policy>> {
        Ok(match self {
            LearnedController::Lti(c) => {
                let mut x_hat0 = vec![0.0; c.n_states()];
                for (dst, src) in x_hat0.iter_mut().zip(x0) {
                    *dst = *src;
                }
                Box::new(LtiFeedback::new(plant, c.clone(), x_hat0)?)
            }
            LearnedController::Mlp(p) => Box::new(NnPolicy::new(p.clone())),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        match self {
            LearnedController::Lti(c) => crate::training::controller_to_json(c),
            LearnedController::Mlp(p) => Ok(serde_json::to_string_pretty(p)?),
        }
    }
}

/// Held-out initial conditions and noise, with the expert's rollouts
/// computed once and shared by every controller under test.
#[derive(Clone, Debug)]
pub struct TestSet {
    pub x0: Vec<Vec<f64>>,
    pub noise: Vec<NoiseSeq>,
    pub expert: Vec<Trajectory>,
}

impl TestSet {
    pub fn generate<R: Rng + ?Sized>(
        plant: &PlantModel,
        expert: &Expert,
        n_test: usize,
        init_std: f64,
        horizon: usize,
        noise: &NoiseLevels,
        rng: &mut R,
    ) -> Result<Self> {
        let mut x0 = Vec::with_capacity(n_test);
        let mut seqs = Vec::with_capacity(n_test);
        for _ in 0..n_test {
            x0.push(
                (0..plant.n_states())
                    .map(|_| init_std * rng.sample::<f64, _>(StandardNormal))
                    .collect::<Vec<f64>>(),
            );
            seqs.push(NoiseSeq::sample(
                horizon,
                plant.n_inputs(),
                plant.n_outputs(),
                noise.plant,
                noise.controller,
                noise.expert,
                rng,
            ));
        }
        let expert_trajs = x0
            .par_iter()
            .zip(&seqs)
            .map(|(x, n)| simulate(plant, x, n, &mut expert.clone()))
            .collect::<Result<Vec<_>>>()?;
        Ok(TestSet {
            x0,
            noise: seqs,
            expert: expert_trajs,
        })
    }

    pub fn len(&self) -> usize {
        self.x0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x0.is_empty()
    }
}

/// `(1/N) Σₖ ‖x_e(k) − x(k)‖²` over the `N` simulated steps; infinite when
/// the learned rollout ended early.
pub fn trajectory_mse(expert: &Trajectory, learned: &Trajectory) -> f64 {
    let n = expert.length;
    if n == 0 {
        return 0.0;
    }
    if learned.length < n {
        return f64::INFINITY;
    }
    let total: f64 = (0..n)
        .map(|k| {
            expert.states[k]
                .iter()
                .zip(&learned.states[k])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
        })
        .sum();
    let v = total / n as f64;
    if v.is_nan() {
        f64::INFINITY
    } else {
        v
    }
}

/// Per-rollout results of one controller.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalStats {
    pub mse: Vec<f64>,
    pub stable: Vec<bool>,
}

impl EvalStats {
    pub fn mean_mse(&self) -> f64 {
        if self.mse.is_empty() {
            return 0.0;
        }
        self.mse.iter().sum::<f64>() / self.mse.len() as f64
    }

    pub fn stable_ratio(&self) -> f64 {
        if self.stable.is_empty() {
            return 1.0;
        }
        self.stable.iter().filter(|s| **s).count() as f64 / self.stable.len() as f64
    }

    pub fn all_stable(&self) -> bool {
        self.stable.iter().all(|s| *s)
    }
}

/// Rolls the learned controller out from every test condition with the
/// same noise the expert saw. A loop that cannot be formed or simulated
/// counts as unstable with infinite error.
pub fn evaluate_on(plant: &PlantModel, tests: &TestSet, controller: &LearnedController) -> EvalStats {
    let (mse, stable): (Vec<f64>, Vec<bool>) = (0..tests.len())
        .into_par_iter()
        .map(|i| {
            let run = controller
                .policy(plant, &tests.x0[i])
                .and_then(|mut pol| simulate(plant, &tests.x0[i], &tests.noise[i], pol.as_mut()));
            match run {
                Ok(traj) => {
                    let ok = traj.length == tests.expert[i].length && is_stable_trajectory(&traj, STABILITY_BOUND);
                    (trajectory_mse(&tests.expert[i], &traj), ok)
                }
                Err(e) => {
                    log::debug!("test rollout {i} failed: {e}");
                    (f64::INFINITY, false)
                }
            }
        })
        .unzip();
    EvalStats { mse, stable }
}

/// Draws a fresh test set and evaluates one controller on it.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_controller<R: Rng + ?Sized>(
    plant: &PlantModel,
    expert: &Expert,
    controller: &LearnedController,
    n_test: usize,
    init_std: f64,
    horizon: usize,
    noise: &NoiseLevels,
    rng: &mut R,
) -> Result<EvalStats> {
    let tests = TestSet::generate(plant, expert, n_test, init_std, horizon, noise, rng)?;
    Ok(evaluate_on(plant, &tests, controller))
}

/// `(q1, median, q3, max)` with linear interpolation between order
/// statistics; infinite entries sort last.
pub fn quartiles(values: &[f64]) -> (f64, f64, f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN, f64::NAN, f64::NAN);
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let q = |t: f64| {
        let pos = t * (v.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        let frac = pos - lo as f64;
        if lo == hi || frac == 0.0 || v[lo] == v[hi] {
            v[lo]
        } else if v[hi].is_infinite() {
            v[hi]
        } else {
            v[lo] + frac * (v[hi] - v[lo])
        }
    };
    (q(0.25), q(0.5), q(0.75), v[v.len() - 1])
}
