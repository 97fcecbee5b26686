//! Learners for dynamic output-feedback controllers from two-step
//! demonstration segments: iterative convex overbounding (with and without
//! the dissipativity constraint), projected gradient descent, plain gradient
//! descent and a static ReLU network baseline.

mod ico;
mod nn;
mod pgd;
pub mod surrogate;

pub use ico::{ico_nc_train, ico_train, ico_train_from};
pub use nn::{mlp_loss, nn_train, MlpParams, NnPolicy, NnReport};
pub use pgd::{gd_train, pgd_train, project_controller, random_dissipative_init, Projection};
pub use surrogate::{expand_and_overbound, Bookkeeping, SurrogateMode, SurrogateSpec, Term, TermKind};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dissipativity::Certificate;
use crate::error::{dim_err, Error, Result};
use crate::experts::TrainingDataset;
use crate::numlin::Matrix;
use crate::plant::DiscreteStateSpace;

/// `(Â, B̂, Ĉ, D̂)`: `n̂` states, inputs = plant outputs, outputs = plant inputs.
pub type ControllerParams = DiscreteStateSpace;

/// Solver for the convex step of each ICO iteration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerSolver {
    InteriorPoint,
    Admm,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IcoSettings {
    pub mode: SurrogateMode,
    pub solver: InnerSolver,
    /// Relative accuracy of the inner solve.
    pub solver_eps: f64,
    pub solver_max_iters: usize,
    pub p_floor: f64,
    /// Eigenvalue range the next linearization weight `W̃` is clamped to.
    pub w_min: f64,
    pub w_max: f64,
    pub max_backtracks: usize,
}

impl Default for IcoSettings {
    fn default() -> Self {
        IcoSettings {
            mode: SurrogateMode::Aggregated,
            solver: InnerSolver::InteriorPoint,
            solver_eps: 1e-6,
            solver_max_iters: 60,
            p_floor: 1e-6,
            w_min: 1e-2,
            w_max: 1e2,
            max_backtracks: 12,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NnSettings {
    pub width: usize,
    pub lr: f64,
    pub max_iters: usize,
}

impl Default for NnSettings {
    fn default() -> Self {
        NnSettings {
            width: 150,
            lr: 1e-2,
            max_iters: 2000,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub max_iters: usize,
    pub stop_tol: f64,
    pub lr0: f64,
    pub lr_decay: f64,
    pub seed: u64,
    /// Controller order; the dataset's `x̂₀` length when absent.
    pub n_hat: Option<usize>,
    pub init_redraws: usize,
    pub ico: IcoSettings,
    pub nn: NnSettings,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            max_iters: 150,
            stop_tol: 1e-3,
            lr0: 1e-2,
            lr_decay: 0.99,
            seed: 0,
            n_hat: None,
            init_redraws: 20,
            ico: IcoSettings::default(),
            nn: NnSettings::default(),
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.stop_tol > 0.0) || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) || !(self.lr0 > 0.0) {
            return Err(Error::Config(
                "stop_tol and lr0 must be positive and lr_decay in (0, 1]".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Converged,
    MaxIterations,
    /// The convex step could not decrease the loss any further.
    NoProgress,
    SolverAbort,
    EmptyData,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainingReport {
    pub controller: ControllerParams,
    /// True loss of every iterate, starting with the initial point.
    pub loss_history: Vec<f64>,
    /// Surrogate optimum per ICO iteration (empty for other methods).
    pub surrogate_history: Vec<f64>,
    /// Certificate residual of every iterate for constrained methods.
    pub iterate_residuals: Vec<f64>,
    pub wall_time: f64,
    pub termination: Termination,
    pub certificate: Option<Certificate>,
}

impl TrainingReport {
    pub fn initial_loss(&self) -> f64 {
        self.loss_history.first().copied().unwrap_or(f64::NAN)
    }

    pub fn final_loss(&self) -> f64 {
        self.loss_history.last().copied().unwrap_or(f64::NAN)
    }

    /// `(J_final − J_init)/J_init · 100`.
    pub fn percent_change(&self) -> f64 {
        let j0 = self.initial_loss();
        (self.final_loss() - j0) / j0 * 100.0
    }

    pub fn loss_csv(&self) -> String {
        let mut s = String::from("iter,loss\n");
        for (i, l) in self.loss_history.iter().enumerate() {
            s.push_str(&format!("{i},{l:e}\n"));
        }
        s
    }
}

pub(crate) fn check_controller(params: &ControllerParams, data: &TrainingDataset) -> Result<()> {
    if let Some((n, p, m)) = data.dims() {
        if params.n_states() != n || params.n_inputs() != p || params.n_outputs() != m {
            return Err(dim_err(format!(
                "controller is {}x{}x{} but the data needs {n} states, {p} inputs, {m} outputs",
                params.n_states(),
                params.n_inputs(),
                params.n_outputs()
            )));
        }
    }
    Ok(())
}

/// Controller outputs `ŷ₀ … ŷ_{L−1}` by the plain recursion.
pub fn forward_propagate(params: &ControllerParams, x_hat0: &[f64], u_hat: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let mut x = x_hat0.to_vec();
    let mut out = Vec::with_capacity(u_hat.len());
    for u in u_hat {
        let (xn, y) = params.step(&x, u)?;
        out.push(y);
        x = xn;
    }
    Ok(out)
}

/// Same outputs through the stacked observability and Toeplitz matrices:
/// `ŷ = O x̂₀ + T û`.
pub fn forward_propagate_block(params: &ControllerParams, x_hat0: &[f64], u_hat: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let l = u_hat.len();
    let (n, p, m) = (params.n_states(), params.n_inputs(), params.n_outputs());
    let mut obs = Matrix::zeros(l * m, n);
    let mut toe = Matrix::zeros(l * m, l * p);
    // powers Âᵏ
    let mut pow = vec![Matrix::identity(n)];
    for k in 1..l {
        pow.push(&params.a * &pow[k - 1]);
    }
    for i in 0..l {
        obs.set_block(i * m, 0, &(&params.c * &pow[i]));
        toe.set_block(i * m, i * p, &params.d);
        for j in 0..i {
            toe.set_block(i * m, j * p, &(&(&params.c * &pow[i - j - 1]) * &params.b));
        }
    }
    let stacked: Vec<f64> = u_hat.iter().flatten().copied().collect();
    let y = obs.matvec(x_hat0)?;
    let t = toe.matvec(&stacked)?;
    Ok((0..l).map(|i| (0..m).map(|r| y[i * m + r] + t[i * m + r]).collect()).collect())
}

/// Mean over segments of `Σₖ ‖uₖ − ŷₖ‖²`.
pub fn two_step_loss(params: &ControllerParams, data: &TrainingDataset) -> Result<f64> {
    check_controller(params, data)?;
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for s in &data.segments {
        let y = forward_propagate(params, &s.x_hat0, &s.u_hat)?;
        for (yk, uk) in y.iter().zip(&s.u) {
            total += yk.iter().zip(uk).map(|(a, b)| (b - a) * (b - a)).sum::<f64>();
        }
    }
    Ok(total / data.len() as f64)
}

/// Gradient of [`two_step_loss`] by reverse accumulation through the recursion.
pub fn pgd_gradient(params: &ControllerParams, data: &TrainingDataset) -> Result<ControllerParams> {
    check_controller(params, data)?;
    let (n, p, m) = (params.n_states(), params.n_inputs(), params.n_outputs());
    let mut g = DiscreteStateSpace::zero(n, p, m);
    if data.is_empty() {
        return Ok(g);
    }
    let scale = 1.0 / data.len() as f64;
    for s in &data.segments {
        let l = s.u.len();
        let mut xs = vec![s.x_hat0.clone()];
        let mut errs = Vec::with_capacity(l);
        for k in 0..l {
            let (xn, y) = params.step(&xs[k], &s.u_hat[k])?;
            errs.push((0..m).map(|i| -2.0 * (s.u[k][i] - y[i]) * scale).collect::<Vec<f64>>());
            xs.push(xn);
        }
        // lam = ∂J/∂x_k
        let mut lam = vec![0.0; n];
        for k in (0..l).rev() {
            let e = &errs[k];
            if k + 1 < l {
                // contributions through x_{k+1} = Â x_k + B̂ û_k
                for i in 0..n {
                    for j in 0..n {
                        g.a.data_mut()[i * n + j] += lam[i] * xs[k][j];
                    }
                    for j in 0..p {
                        g.b.data_mut()[i * p + j] += lam[i] * s.u_hat[k][j];
                    }
                }
            }
            for i in 0..m {
                for j in 0..n {
                    g.c.data_mut()[i * n + j] += e[i] * xs[k][j];
                }
                for j in 0..p {
                    g.d.data_mut()[i * p + j] += e[i] * s.u_hat[k][j];
                }
            }
            let ct_e = params.c.tr_matvec(e)?;
            let at_l = if k + 1 < l { params.a.tr_matvec(&lam)? } else { vec![0.0; n] };
            lam = (0..n).map(|i| ct_e[i] + at_l[i]).collect();
        }
    }
    Ok(g)
}

/// Entries drawn from `N(0, 1)`.
pub fn random_controller<R: Rng + ?Sized>(n: usize, p: usize, m: usize, rng: &mut R) -> ControllerParams {
    let mut draw = |r: usize, c: usize| Matrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal));
    let a = draw(n, n);
    let b = draw(n, p);
    let c = draw(m, n);
    let d = draw(m, p);
    DiscreteStateSpace { a, b, c, d }
}

pub(crate) fn controller_dims(data: &TrainingDataset, config: &TrainingConfig) -> Result<(usize, usize, usize)> {
    let (n, p, m) = data
        .dims()
        .ok_or_else(|| Error::Precondition("training needs a nonempty dataset".into()))?;
    let n_hat = config.n_hat.unwrap_or(n);
    if n_hat != n {
        return Err(Error::Precondition(
            "controller order must match the recorded initial state length".into(),
        ));
    }
    Ok((n_hat, p, m))
}

pub(crate) fn axpy_params(base: &ControllerParams, dir: &ControllerParams, t: f64) -> ControllerParams {
    DiscreteStateSpace {
        a: &base.a + &dir.a.scale(t),
        b: &base.b + &dir.b.scale(t),
        c: &base.c + &dir.c.scale(t),
        d: &base.d + &dir.d.scale(t),
    }
}

#[derive(Serialize, Deserialize)]
struct ControllerFile {
    states: usize,
    inputs: usize,
    outputs: usize,
    a: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
    d: Vec<f64>,
}

/// JSON with a dimension header and row-major matrices.
pub fn controller_to_json(params: &ControllerParams) -> Result<String> {
    let f = ControllerFile {
        states: params.n_states(),
        inputs: params.n_inputs(),
        outputs: params.n_outputs(),
        a: params.a.data().to_vec(),
        b: params.b.data().to_vec(),
        c: params.c.data().to_vec(),
        d: params.d.data().to_vec(),
    };
    Ok(serde_json::to_string_pretty(&f)?)
}

pub fn controller_from_json(text: &str) -> Result<ControllerParams> {
    let f: ControllerFile = serde_json::from_str(text)?;
    let (n, p, m) = (f.states, f.inputs, f.outputs);
    DiscreteStateSpace::new(
        Matrix::from_vec(n, n, f.a)?,
        Matrix::from_vec(n, p, f.b)?,
        Matrix::from_vec(m, n, f.c)?,
        Matrix::from_vec(m, p, f.d)?,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experts::{DataMode, Segment};
    use rand::SeedableRng;

    pub(crate) fn random_dataset(k: usize, n: usize, p: usize, m: usize, seed: u64) -> TrainingDataset {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut v = |len: usize| -> Vec<f64> { (0..len).map(|_| rng.sample::<f64, _>(StandardNormal)).collect() };
        let segments = (0..k)
            .map(|_| Segment {
                x_hat0: v(n),
                u_hat: vec![v(p), v(p)],
                u: vec![v(m), v(m)],
            })
            .collect();
        TrainingDataset {
            segments,
            mode: DataMode::InitialSegments,
            segment_length: 2,
        }
    }

    #[test]
    fn forward_examples() {
        let id = DiscreteStateSpace::new(
            Matrix::zeros(2, 2),
            Matrix::zeros(2, 2),
            Matrix::zeros(2, 2),
            Matrix::identity(2),
        )
        .unwrap();
        let u = vec![vec![1.0, 2.0], vec![3.0, 4.0]];
        assert_eq!(forward_propagate(&id, &[5.0, 6.0], &u).unwrap(), u);
        let geo = DiscreteStateSpace::scalar(0.5, 0.0, 1.0, 0.0);
        let y = forward_propagate(&geo, &[1.0], &vec![vec![0.0]; 4]).unwrap();
        assert_eq!(y, vec![vec![1.0], vec![0.5], vec![0.25], vec![0.125]]);
    }

    #[test]
    fn block_form_agrees_with_recursion() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let c = random_controller(3, 2, 2, &mut rng).tap_scale(0.5);
            let u: Vec<Vec<f64>> = (0..5).map(|_| vec![rng.gen(), rng.gen()]).collect();
            let x0 = [rng.gen(), rng.gen(), rng.gen()];
            let a = forward_propagate(&c, &x0, &u).unwrap();
            let b = forward_propagate_block(&c, &x0, &u).unwrap();
            for (ra, rb) in a.iter().zip(&b) {
                for (x, y) in ra.iter().zip(rb) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    trait TapScale {
        fn tap_scale(self, s: f64) -> Self;
    }

    impl TapScale for DiscreteStateSpace {
        fn tap_scale(mut self, s: f64) -> Self {
            self.a = self.a.scale(s);
            self
        }
    }

    #[test]
    fn loss_hand_expansion_scalar() {
        let data = random_dataset(4, 1, 1, 1, 2);
        let c = DiscreteStateSpace::scalar(0.0, 0.7, -0.4, 0.3);
        let mut want = 0.0;
        for s in &data.segments {
            let (z, w, v) = (s.x_hat0[0], s.u_hat[0][0], s.u_hat[1][0]);
            let (u0, u1) = (s.u[0][0], s.u[1][0]);
            want += (u0 - (-0.4) * z - 0.3 * w).powi(2) + (u1 - (-0.4) * 0.7 * w - 0.3 * v).powi(2);
        }
        want /= 4.0;
        assert!((two_step_loss(&c, &data).unwrap() - want).abs() < 1e-12);
        // zero params on zero targets
        let mut z = data.clone();
        for s in &mut z.segments {
            s.u = vec![vec![0.0], vec![0.0]];
        }
        assert_eq!(two_step_loss(&DiscreteStateSpace::zero(1, 1, 1), &z).unwrap(), 0.0);
    }

    #[test]
    fn gradient_scalar_by_hand() {
        let data = random_dataset(1, 1, 1, 1, 3);
        let s = &data.segments[0];
        let (a, b, c, d) = (0.3, -0.2, 0.9, 0.4);
        let p = DiscreteStateSpace::scalar(a, b, c, d);
        let g = pgd_gradient(&p, &data).unwrap();
        let (z, w, v) = (s.x_hat0[0], s.u_hat[0][0], s.u_hat[1][0]);
        let e0 = s.u[0][0] - c * z - d * w;
        let x1 = a * z + b * w;
        let e1 = s.u[1][0] - c * x1 - d * v;
        let want = [-2.0 * e1 * c * z, -2.0 * e1 * c * w, -2.0 * (e0 * z + e1 * x1), -2.0 * (e0 * w + e1 * v)];
        let got = [g.a.get(0, 0), g.b.get(0, 0), g.c.get(0, 0), g.d.get(0, 0)];
        for (x, y) in got.iter().zip(want) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn controller_json_roundtrip() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let c = random_controller(2, 3, 1, &mut rng);
        let back = controller_from_json(&controller_to_json(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }
}
