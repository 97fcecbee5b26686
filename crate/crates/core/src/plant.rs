//! Discrete-time plants, feedback interconnections and closed-loop rollouts.

use std::fmt::Write as _;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::numlin::{Lu, Matrix};

/// Divergence bound for stability classification of rollouts.
pub const STABILITY_BOUND: f64 = 1e6;
/// Rollout horizon used for stability classification.
pub const STABILITY_HORIZON: usize = 200;

/// `x⁺ = Ax + Bu`, `y = Cx + Du`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteStateSpace {
    pub a: Matrix,
    pub b: Matrix,
    pub c: Matrix,
    pub d: Matrix,
}

impl DiscreteStateSpace {
    pub fn new(a: Matrix, b: Matrix, c: Matrix, d: Matrix) -> Result<Self> {
        let n = a.rows();
        if !a.is_square() {
            return Err(dim_err("A must be square"));
        }
        if b.rows() != n || c.cols() != n || d.rows() != c.rows() || d.cols() != b.cols() {
            return Err(dim_err(format!(
                "inconsistent state space: A {}x{}, B {}x{}, C {}x{}, D {}x{}",
                a.rows(),
                a.cols(),
                b.rows(),
                b.cols(),
                c.rows(),
                c.cols(),
                d.rows(),
                d.cols()
            )));
        }
        for (m, name) in [(&a, "A"), (&b, "B"), (&c, "C"), (&d, "D")] {
            m.ensure_finite(name)?;
        }
        Ok(DiscreteStateSpace { a, b, c, d })
    }

    /// The zero system with the given state, input and output dimensions.
    pub fn zero(n: usize, m: usize, p: usize) -> Self {
        DiscreteStateSpace {
            a: Matrix::zeros(n, n),
            b: Matrix::zeros(n, m),
            c: Matrix::zeros(p, n),
            d: Matrix::zeros(p, m),
        }
    }

    pub fn scalar(a: f64, b: f64, c: f64, d: f64) -> Self {
        DiscreteStateSpace {
            a: Matrix::scalar(a),
            b: Matrix::scalar(b),
            c: Matrix::scalar(c),
            d: Matrix::scalar(d),
        }
    }

    pub fn n_states(&self) -> usize {
        self.a.rows()
    }

    pub fn n_inputs(&self) -> usize {
        self.b.cols()
    }

    pub fn n_outputs(&self) -> usize {
        self.c.rows()
    }

    pub fn is_square(&self) -> bool {
        self.n_inputs() == self.n_outputs()
    }

    pub fn step(&self, x: &[f64], u: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if x.len() != self.n_states() || u.len() != self.n_inputs() {
            return Err(dim_err("state or input length does not match the system"));
        }
        let mut xn = self.a.matvec(x)?;
        for (v, w) in xn.iter_mut().zip(self.b.matvec(u)?) {
            *v += w;
        }
        let mut y = self.c.matvec(x)?;
        for (v, w) in y.iter_mut().zip(self.d.matvec(u)?) {
            *v += w;
        }
        Ok((xn, y))
    }
}

/// Scalar plant `x⁺ = a x + α sin(x) + b u`, `y = c x + d u`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SinePlant {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub alpha: f64,
}

impl SinePlant {
    /// The nonlinear benchmark plant `(0.5, 1, 1, −2)` with `α = 0.4`.
    pub fn benchmark() -> Self {
        SinePlant {
            a: 0.5,
            b: 1.0,
            c: 1.0,
            d: -2.0,
            alpha: 0.4,
        }
    }

    pub fn next_state(&self, x: f64, u: f64) -> f64 {
        self.a * x + self.alpha * x.sin() + self.b * u
    }

    pub fn output(&self, x: f64, u: f64) -> f64 {
        self.c * x + self.d * u
    }

    /// Linear part `(a, b, c, d)`, exact when `α = 0`.
    pub fn linear_part(&self) -> DiscreteStateSpace {
        DiscreteStateSpace::scalar(self.a, self.b, self.c, self.d)
    }

    /// Linearization about the origin, `(a + α, b, c, d)`.
    pub fn linearization(&self) -> DiscreteStateSpace {
        DiscreteStateSpace::scalar(self.a + self.alpha, self.b, self.c, self.d)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PlantModel {
    Linear(DiscreteStateSpace),
    SineNonlinear(SinePlant),
}

impl PlantModel {
    pub fn n_states(&self) -> usize {
        match self {
            PlantModel::Linear(s) => s.n_states(),
            PlantModel::SineNonlinear(_) => 1,
        }
    }

    pub fn n_inputs(&self) -> usize {
        match self {
            PlantModel::Linear(s) => s.n_inputs(),
            PlantModel::SineNonlinear(_) => 1,
        }
    }

    pub fn n_outputs(&self) -> usize {
        match self {
            PlantModel::Linear(s) => s.n_outputs(),
            PlantModel::SineNonlinear(_) => 1,
        }
    }

    /// Output map is `y = C x + D u` for both variants.
    pub fn feedthrough(&self) -> Matrix {
        match self {
            PlantModel::Linear(s) => s.d.clone(),
            PlantModel::SineNonlinear(p) => Matrix::scalar(p.d),
        }
    }

    /// `C x`, the output with zero input.
    pub fn free_output(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            PlantModel::Linear(s) => s.c.matvec(x),
            PlantModel::SineNonlinear(p) => {
                check_scalar(x, "state")?;
                Ok(vec![p.c * x[0]])
            }
        }
    }

    pub fn step(&self, x: &[f64], u: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        match self {
            PlantModel::Linear(s) => s.step(x, u),
            PlantModel::SineNonlinear(p) => {
                check_scalar(x, "state")?;
                check_scalar(u, "input")?;
                Ok((vec![p.next_state(x[0], u[0])], vec![p.output(x[0], u[0])]))
            }
        }
    }
}

fn check_scalar(v: &[f64], what: &str) -> Result<()> {
    if v.len() != 1 {
        return Err(dim_err(format!("sine plant {what} must be scalar, got length {}", v.len())));
    }
    Ok(())
}

/// One step of the exogenous signals: `r_hat` enters the plant input
/// channel, `r` the measurement fed to the controller, `expert` is the
/// expert's own action noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSeq {
    pub r_hat: Vec<Vec<f64>>,
    pub r: Vec<Vec<f64>>,
    pub expert: Vec<Vec<f64>>,
}

impl NoiseSeq {
    pub fn zeros(horizon: usize, m: usize, p: usize) -> Self {
        NoiseSeq {
            r_hat: vec![vec![0.0; m]; horizon],
            r: vec![vec![0.0; p]; horizon],
            expert: vec![vec![0.0; m]; horizon],
        }
    }

    pub fn sample<R: Rng + ?Sized>(
        horizon: usize,
        m: usize,
        p: usize,
        plant_std: f64,
        ctrl_std: f64,
        expert_std: f64,
        rng: &mut R,
    ) -> Self {
        let draw = |len: usize, std: f64, rng: &mut R| -> Vec<f64> {
            (0..len)
                .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                .collect()
        };
        let mut out = NoiseSeq::zeros(horizon, m, p);
        for k in 0..horizon {
            out.r_hat[k] = draw(m, plant_std, rng);
            out.r[k] = draw(p, ctrl_std, rng);
            out.expert[k] = draw(m, expert_std, rng);
        }
        out
    }

    pub fn horizon(&self) -> usize {
        self.r_hat.len()
    }
}

/// What a feedback law produced at one step.
#[derive(Clone, Debug)]
pub struct Action {
    /// Input actually applied to the plant.
    pub u: Vec<f64>,
    /// The controller's own output signal.
    pub controller_output: Vec<f64>,
    /// The controller's measured input signal.
    pub controller_input: Vec<f64>,
}

/// A causal feedback law closing the loop around a plant.
pub trait Policy {
    fn act(&mut self, plant: &PlantModel, x: &[f64], k: usize, noise: &NoiseSeq) -> Result<Action>;
}

/// Dynamic output-feedback controller in negative feedback,
/// `u = r̂ − ŷ`, `û = r + y`.
#[derive(Clone, Debug)]
pub struct LtiFeedback {
    pub controller: DiscreteStateSpace,
    pub state: Vec<f64>,
    loop_lu: Option<Lu>,
}

impl LtiFeedback {
    pub fn new(plant: &PlantModel, controller: DiscreteStateSpace, x_hat0: Vec<f64>) -> Result<Self> {
        if controller.n_inputs() != plant.n_outputs() || controller.n_outputs() != plant.n_inputs() {
            return Err(dim_err(format!(
                "controller is {}→{} but plant is {}→{}",
                controller.n_inputs(),
                controller.n_outputs(),
                plant.n_inputs(),
                plant.n_outputs()
            )));
        }
        if x_hat0.len() != controller.n_states() {
            return Err(dim_err("controller initial state length"));
        }
        let dd = &controller.d * &plant.feedthrough();
        let loop_lu = if dd.max_abs() == 0.0 {
            None
        } else {
            let m = plant.n_inputs();
            let lu = Lu::new(&(&Matrix::identity(m) + &dd)).map_err(|_| Error::WellPosedness)?;
            Some(lu)
        };
        Ok(LtiFeedback {
            controller,
            state: x_hat0,
            loop_lu,
        })
    }
}

impl Policy for LtiFeedback {
    fn act(&mut self, plant: &PlantModel, x: &[f64], k: usize, noise: &NoiseSeq) -> Result<Action> {
        let c = &self.controller;
        let r_hat = &noise.r_hat[k];
        let r = &noise.r[k];
        // (I + D̂D) u = r̂ − Ĉx̂ − D̂(r + Cx)
        let cx = plant.free_output(x)?;
        let meas: Vec<f64> = r.iter().zip(&cx).map(|(a, b)| a + b).collect();
        let chx = c.c.matvec(&self.state)?;
        let dm = c.d.matvec(&meas)?;
        let rhs: Vec<f64> = (0..r_hat.len()).map(|i| r_hat[i] - chx[i] - dm[i]).collect();
        let u = match &self.loop_lu {
            Some(lu) => lu.solve_vec(&rhs)?,
            None => rhs,
        };
        let du = plant.feedthrough().matvec(&u)?;
        let u_hat: Vec<f64> = meas.iter().zip(&du).map(|(a, b)| a + b).collect();
        let (xn, y_hat) = c.step(&self.state, &u_hat)?;
        self.state = xn;
        Ok(Action {
            u,
            controller_output: y_hat,
            controller_input: u_hat,
        })
    }
}

/// Closed-loop rollout record. `states` includes the terminal state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    pub plant_outputs: Vec<Vec<f64>>,
    pub controller_outputs: Vec<Vec<f64>>,
    pub controller_inputs: Vec<Vec<f64>>,
    pub plant_inputs: Vec<Vec<f64>>,
    pub length: usize,
}

impl Trajectory {
    /// CSV with columns `k, x…, y…, u…`.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        let n = self.states.first().map_or(0, |v| v.len());
        let p = self.plant_outputs.first().map_or(0, |v| v.len());
        let m = self.plant_inputs.first().map_or(0, |v| v.len());
        let mut header = vec!["k".to_string()];
        header.extend((0..n).map(|i| format!("x{i}")));
        header.extend((0..p).map(|i| format!("y{i}")));
        header.extend((0..m).map(|i| format!("u{i}")));
        let _ = writeln!(s, "{}", header.join(","));
        for k in 0..self.length {
            let mut row = vec![k.to_string()];
            row.extend(self.states[k].iter().map(|v| format!("{v:e}")));
            row.extend(self.plant_outputs[k].iter().map(|v| format!("{v:e}")));
            row.extend(self.plant_inputs[k].iter().map(|v| format!("{v:e}")));
            let _ = writeln!(s, "{}", row.join(","));
        }
        s
    }
}

/// Rolls out `policy` on `plant` from `x0` for `noise.horizon()` steps.
/// Stops early, without error, once the state leaves the finite range so
/// diverging loops remain classifiable.
pub fn simulate(plant: &PlantModel, x0: &[f64], noise: &NoiseSeq, policy: &mut dyn Policy) -> Result<Trajectory> {
    if x0.len() != plant.n_states() {
        return Err(dim_err("initial state length"));
    }
    let horizon = noise.horizon();
    let mut traj = Trajectory {
        states: Vec::with_capacity(horizon + 1),
        plant_outputs: Vec::with_capacity(horizon),
        controller_outputs: Vec::with_capacity(horizon),
        controller_inputs: Vec::with_capacity(horizon),
        plant_inputs: Vec::with_capacity(horizon),
        length: 0,
    };
    let mut x = x0.to_vec();
    traj.states.push(x.clone());
    for k in 0..horizon {
        let act = policy.act(plant, &x, k, noise)?;
        let (xn, y) = plant.step(&x, &act.u)?;
        traj.plant_outputs.push(y);
        traj.plant_inputs.push(act.u);
        traj.controller_outputs.push(act.controller_output);
        traj.controller_inputs.push(act.controller_input);
        traj.states.push(xn.clone());
        traj.length += 1;
        x = xn;
        if !x.iter().all(|v| v.is_finite() && v.abs() < 1e150) {
            break;
        }
    }
    Ok(traj)
}

/// Negative-feedback rollout of an LTI controller with Gaussian noise of
/// the given standard deviations on the plant input (`r̂`) and the
/// controller input (`r`).
#[allow(clippy::too_many_arguments)]
pub fn feedback_simulate<R: Rng + ?Sized>(
    plant: &PlantModel,
    controller: &DiscreteStateSpace,
    x0: &[f64],
    x_hat0: &[f64],
    horizon: usize,
    plant_noise: f64,
    ctrl_noise: f64,
    rng: &mut R,
) -> Result<Trajectory> {
    let noise = NoiseSeq::sample(
        horizon,
        plant.n_inputs(),
        plant.n_outputs(),
        plant_noise,
        ctrl_noise,
        0.0,
        rng,
    );
    let mut policy = LtiFeedback::new(plant, controller.clone(), x_hat0.to_vec())?;
    simulate(plant, x0, &noise, &mut policy)
}

/// State matrix of the noise-free negative-feedback loop of two LTI
/// systems, state ordered `(x, x̂)`.
pub fn closed_loop_matrix(plant: &DiscreteStateSpace, ctrl: &DiscreteStateSpace) -> Result<Matrix> {
    let m = plant.n_inputs();
    let n = plant.n_states();
    let nc = ctrl.n_states();
    let lu = Lu::new(&(&Matrix::identity(m) + &(&ctrl.d * &plant.d))).map_err(|_| Error::WellPosedness)?;
    // u = −Δ(D̂C x + Ĉ x̂)
    let ku_x = lu.solve(&(&ctrl.d * &plant.c))?.scale(-1.0);
    let ku_xh = lu.solve(&ctrl.c)?.scale(-1.0);
    // y = Cx + Du
    let y_x = &plant.c + &(&plant.d * &ku_x);
    let y_xh = &plant.d * &ku_xh;
    let top_l = &plant.a + &(&plant.b * &ku_x);
    let top_r = &plant.b * &ku_xh;
    let bot_l = &ctrl.b * &y_x;
    let bot_r = &ctrl.a + &(&ctrl.b * &y_xh);
    let mut out = Matrix::zeros(n + nc, n + nc);
    out.set_block(0, 0, &top_l);
    out.set_block(0, n, &top_r);
    out.set_block(n, 0, &bot_l);
    out.set_block(n, n, &bot_r);
    Ok(out)
}

pub use crate::numlin::spectral_radius;

/// True iff every state and output stays finite with Euclidean norm below
/// `bound`.
pub fn is_stable_trajectory(traj: &Trajectory, bound: f64) -> bool {
    let ok = |v: &Vec<f64>| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        n.is_finite() && n < bound
    };
    traj.states.iter().all(ok) && traj.plant_outputs.iter().all(ok)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_plant_holds_state() {
        let sys = DiscreteStateSpace::new(
            Matrix::identity(2),
            Matrix::zeros(2, 1),
            Matrix::identity(2),
            Matrix::zeros(2, 1),
        )
        .unwrap();
        let (xn, _) = sys.step(&[1.0, -2.0], &[5.0]).unwrap();
        assert_eq!(xn, vec![1.0, -2.0]);
    }

    #[test]
    fn sine_plant_steps() {
        let p = PlantModel::SineNonlinear(SinePlant::benchmark());
        assert_eq!(p.step(&[0.0], &[0.0]).unwrap(), (vec![0.0], vec![0.0]));
        let (xn, y) = p.step(&[1.0], &[0.0]).unwrap();
        assert!((xn[0] - (0.5 + 0.4 * 1f64.sin())).abs() < 1e-15);
        assert!((xn[0] - 0.83659).abs() < 1e-5);
        assert_eq!(y, vec![1.0]);
        assert!(p.step(&[1.0, 2.0], &[0.0]).is_err());
    }

    #[test]
    fn zero_noise_equilibrium() {
        let plant = PlantModel::SineNonlinear(SinePlant::benchmark());
        let ctrl = DiscreteStateSpace::scalar(0.3, 0.2, 0.1, 0.05);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = feedback_simulate(&plant, &ctrl, &[0.0], &[0.0], 20, 0.0, 0.0, &mut rng).unwrap();
        assert!(t.states.iter().all(|x| x[0] == 0.0));
        assert_eq!(t.states.len(), 21);
        assert_eq!(t.length, 20);
    }

    #[test]
    fn static_gain_loop_matches_hand_recursion() {
        let plant = PlantModel::Linear(DiscreteStateSpace::scalar(0.5, 1.0, 1.0, 0.0));
        let k = 0.3;
        let ctrl = DiscreteStateSpace::new(
            Matrix::zeros(0, 0),
            Matrix::zeros(0, 1),
            Matrix::zeros(1, 0),
            Matrix::scalar(k),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = feedback_simulate(&plant, &ctrl, &[1.0], &[], 10, 0.0, 0.0, &mut rng).unwrap();
        let mut x = 1.0;
        for s in &t.states {
            assert!((s[0] - x).abs() < 1e-15);
            x *= 0.5 - k;
        }
    }

    #[test]
    fn zero_controller_is_open_loop() {
        let sys = DiscreteStateSpace::scalar(0.9, 1.0, 1.0, 0.0);
        let plant = PlantModel::Linear(sys.clone());
        let ctrl = DiscreteStateSpace::zero(2, 1, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = feedback_simulate(&plant, &ctrl, &[1.0], &[0.0, 0.0], 30, 0.04, 0.02, &mut rng).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noise = NoiseSeq::sample(30, 1, 1, 0.04, 0.02, 0.0, &mut rng);
        let mut x = 1.0;
        for k in 0..30 {
            assert!((t.states[k][0] - x).abs() < 1e-14);
            x = 0.9 * x + noise.r_hat[k][0];
        }
    }

    #[test]
    fn ill_posed_loop_rejected() {
        // D̂D = −1 makes I + D̂D singular
        let plant = PlantModel::Linear(DiscreteStateSpace::scalar(0.5, 1.0, 1.0, 1.0));
        let ctrl = DiscreteStateSpace::scalar(0.0, 0.0, 0.0, -1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = feedback_simulate(&plant, &ctrl, &[1.0], &[0.0], 5, 0.0, 0.0, &mut rng);
        assert!(matches!(r, Err(Error::WellPosedness)));
        let ctrl = DiscreteStateSpace::scalar(0.0, 0.0, 0.0, -0.5);
        assert!(feedback_simulate(&plant, &ctrl, &[1.0], &[0.0], 5, 0.0, 0.0, &mut rng).is_ok());
    }

    #[test]
    fn stability_classification() {
        let mk = |f: &dyn Fn(usize) -> f64, len: usize| Trajectory {
            states: (0..=len).map(|k| vec![f(k)]).collect(),
            plant_outputs: (0..len).map(|k| vec![f(k)]).collect(),
            controller_outputs: vec![vec![0.0]; len],
            controller_inputs: vec![vec![0.0]; len],
            plant_inputs: vec![vec![0.0]; len],
            length: len,
        };
        assert!(is_stable_trajectory(&mk(&|_| 0.0, 10), 1e6));
        assert!(!is_stable_trajectory(&mk(&|k| 2f64.powi(k as i32), 30), 1e6));
        assert!(is_stable_trajectory(&mk(&|_| 5e5, 30), 1e6));
    }

    #[test]
    fn csv_layout() {
        let plant = PlantModel::Linear(DiscreteStateSpace::scalar(0.5, 1.0, 1.0, 0.0));
        let ctrl = DiscreteStateSpace::zero(1, 1, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = feedback_simulate(&plant, &ctrl, &[1.0], &[0.0], 3, 0.0, 0.0, &mut rng).unwrap();
        let csv = t.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "k,x0,y0,u0");
        assert_eq!(lines.len(), 4);
    }
}
