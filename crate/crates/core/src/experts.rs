//! Testbeds and demonstrations: random mass-spring-damper chains with an
//! LQR expert, an NMPC expert for the sine plant, and two-step training
//! segments cut from expert trajectories.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dissipativity::{kyp_passivity, Certificate};
use crate::error::{dim_err, Error, Result};
use crate::numlin::{dare_gain, solve_dare, spectral_radius, zoh, Matrix};
use crate::plant::{simulate, Action, DiscreteStateSpace, NoiseSeq, PlantModel, Policy, SinePlant, Trajectory};

pub const MSD_MAX_ATTEMPTS: usize = 100;
pub const MSD_DT: f64 = 0.1;

/// Chain of unit masses: mass 1 tied to the ground, mass i to mass i−1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MsdParams {
    pub n_masses: usize,
    pub springs: Vec<f64>,
    pub dampers: Vec<f64>,
    pub phi: f64,
    pub dt: f64,
}

impl MsdParams {
    pub fn sample<R: Rng + ?Sized>(n_masses: usize, dt: f64, rng: &mut R) -> Self {
        let springs = (0..n_masses).map(|_| rng.gen_range(1.0..=5.0)).collect();
        let dampers = (0..n_masses).map(|_| rng.gen_range(1.0..=10.0)).collect();
        let phi = rng.gen_range(0.05..=1.0);
        MsdParams {
            n_masses,
            springs,
            dampers,
            phi,
            dt,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_masses;
        let ok = n > 0
            && self.springs.len() == n
            && self.dampers.len() == n
            && self.springs.iter().all(|k| (1.0..=5.0).contains(k))
            && self.dampers.iter().all(|c| (1.0..=10.0).contains(c))
            && (0.05..=1.0).contains(&self.phi)
            && self.dt > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Precondition(format!("mass-spring-damper parameters out of range: {self:?}")))
        }
    }

    fn chain(coeffs: &[f64]) -> Matrix {
        let n = coeffs.len();
        let mut k = Matrix::zeros(n, n);
        for i in 0..n {
            k.set(i, i, coeffs[i] + coeffs.get(i + 1).copied().unwrap_or(0.0));
            if i + 1 < n {
                k.set(i, i + 1, -coeffs[i + 1]);
                k.set(i + 1, i, -coeffs[i + 1]);
            }
        }
        k
    }

    /// Continuous model with state `(positions, velocities)`.
    pub fn continuous(&self) -> (Matrix, Matrix) {
        let n = self.n_masses;
        let k = Self::chain(&self.springs);
        let c = Self::chain(&self.dampers);
        let mut a = Matrix::zeros(2 * n, 2 * n);
        a.set_block(0, n, &Matrix::identity(n));
        a.set_block(n, 0, &k.scale(-1.0));
        a.set_block(n, n, &c.scale(-1.0));
        let mut b = Matrix::zeros(2 * n, n);
        b.set_block(n, 0, &Matrix::identity(n));
        (a, b)
    }

    /// Zero-order-hold model with velocity output and `D = φI`.
    pub fn discretize(&self) -> Result<DiscreteStateSpace> {
        self.validate()?;
        let n = self.n_masses;
        let (ac, bc) = self.continuous();
        let (a, b) = zoh(&ac, &bc, self.dt)?;
        let mut c = Matrix::zeros(n, 2 * n);
        c.set_block(0, n, &Matrix::identity(n));
        DiscreteStateSpace::new(a, b, c, Matrix::identity(n).scale(self.phi))
    }
}

/// A random three-mass chain whose discretization is certified passive.
pub fn generate_msd<R: Rng + ?Sized>(rng: &mut R) -> Result<(DiscreteStateSpace, Certificate)> {
    let (sys, cert, _) = generate_msd_with(rng, 3, MSD_DT)?;
    Ok((sys, cert))
}

pub fn generate_msd_with<R: Rng + ?Sized>(
    rng: &mut R,
    n_masses: usize,
    dt: f64,
) -> Result<(DiscreteStateSpace, Certificate, MsdParams)> {
    for attempt in 0..MSD_MAX_ATTEMPTS {
        let params = MsdParams::sample(n_masses, dt, rng);
        let sys = params.discretize()?;
        if let Some(cert) = kyp_passivity(&sys)? {
            return Ok((sys, cert, params));
        }
        log::debug!("msd sample {attempt} not certified passive, resampling");
    }
    Err(Error::Generation(format!(
        "no passive mass-spring-damper plant after {MSD_MAX_ATTEMPTS} samples"
    )))
}

/// LQR gain from the DARE with state weight `CᵀFC` and input weight `E·I`.
pub fn lqr_expert(sys: &DiscreteStateSpace, e: f64, f: f64) -> Result<Matrix> {
    let m = sys.n_inputs();
    let q = sys.c.tr_matmul(&sys.c)?.scale(f);
    let r = Matrix::identity(m).scale(e);
    if sys.b.max_abs() == 0.0 {
        return Ok(Matrix::zeros(m, sys.n_states()));
    }
    let p = solve_dare(&sys.a, &sys.b, &q, &r)?;
    dare_gain(&sys.a, &sys.b, &r, &p)
}

/// Closed-loop spectral radius `ρ(A − BK)`.
pub fn lqr_closed_loop_radius(sys: &DiscreteStateSpace, k: &Matrix) -> Result<f64> {
    spectral_radius(&(&sys.a - &(&sys.b * k)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NmpcSettings {
    /// Prediction horizon `N`; the plan has `N − 1` moves.
    pub horizon: usize,
    pub q: f64,
    pub r: f64,
    pub restarts: usize,
    pub max_iters: usize,
    pub grad_tol: f64,
}

impl Default for NmpcSettings {
    fn default() -> Self {
        NmpcSettings {
            horizon: 11,
            q: 2.0,
            r: 1.0,
            restarts: 5,
            max_iters: 3000,
            grad_tol: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NmpcSolution {
    pub controls: Vec<f64>,
    pub cost: f64,
    /// Cost after each accepted iteration of the restart that won.
    pub history: Vec<f64>,
    pub converged: bool,
}

/// `Σ_{i<N−1} (q xᵢ² + r uᵢ²) + q x_{N−1}²` with `x₀ = x`; and its gradient.
fn nmpc_cost(plant: &SinePlant, x: f64, u: &[f64], s: &NmpcSettings, grad: Option<&mut [f64]>) -> f64 {
    let n = u.len();
    let mut xs = Vec::with_capacity(n + 1);
    xs.push(x);
    let mut cost = 0.0;
    for (i, &ui) in u.iter().enumerate() {
        cost += s.q * xs[i] * xs[i] + s.r * ui * ui;
        xs.push(plant.next_state(xs[i], ui));
    }
    cost += s.q * xs[n] * xs[n];
    if let Some(g) = grad {
        // adjoint of the recursion x⁺ = a x + α sin x + b u
        let mut lam = 2.0 * s.q * xs[n];
        for i in (0..n).rev() {
            g[i] = 2.0 * s.r * u[i] + plant.b * lam;
            lam = 2.0 * s.q * xs[i] + lam * (plant.a + plant.alpha * xs[i].cos());
        }
    }
    cost
}

fn nmpc_descend(plant: &SinePlant, x: f64, mut u: Vec<f64>, s: &NmpcSettings) -> NmpcSolution {
    let n = u.len();
    let mut g = vec![0.0; n];
    let mut cost = nmpc_cost(plant, x, &u, s, Some(&mut g));
    let mut history = vec![cost];
    let mut step = 0.1;
    let mut converged = false;
    let mut trial = vec![0.0; n];
    for _ in 0..s.max_iters {
        let gg: f64 = g.iter().map(|v| v * v).sum();
        if gg.sqrt() <= s.grad_tol * (1.0 + cost.abs()) {
            converged = true;
            break;
        }
        step *= 2.0;
        let mut accepted = false;
        for _ in 0..60 {
            for i in 0..n {
                trial[i] = u[i] - step * g[i];
            }
            let c = nmpc_cost(plant, x, &trial, s, None);
            if c <= cost - 1e-4 * step * gg {
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            converged = true;
            break;
        }
        std::mem::swap(&mut u, &mut trial);
        cost = nmpc_cost(plant, x, &u, s, Some(&mut g));
        history.push(cost);
    }
    NmpcSolution {
        controls: u,
        cost,
        history,
        converged,
    }
}

/// Single-shooting descent with the zero sequence plus random restarts;
/// the best plan is returned.
pub fn nmpc_solve(plant: &SinePlant, x: f64, s: &NmpcSettings, seed: u64) -> NmpcSolution {
    let n = s.horizon.saturating_sub(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 + x.abs();
    let mut best = nmpc_descend(plant, x, vec![0.0; n], s);
    for _ in 1..s.restarts.max(1) {
        let init: Vec<f64> = (0..n)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let sol = nmpc_descend(plant, x, init, s);
        if sol.cost < best.cost {
            best = sol;
        }
    }
    if !best.converged {
        log::debug!("nmpc at x = {x} stopped at the iteration cap, cost {}", best.cost);
    }
    best
}

/// First move of the receding-horizon plan.
pub fn nmpc_expert(plant: &SinePlant, x: f64, n: usize, qn: f64, rn: f64) -> f64 {
    let s = NmpcSettings {
        horizon: n,
        q: qn,
        r: rn,
        ..NmpcSettings::default()
    };
    nmpc_solve(plant, x, &s, 0).controls.first().copied().unwrap_or(0.0)
}

/// State-feedback expert in the loop. Its command `u_e` (with action noise)
/// is reported as the negated controller output so that the learner sees the
/// same negative-feedback convention as a dynamic controller.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Expert {
    Lqr { k: Matrix },
    Nmpc { plant: SinePlant, settings: NmpcSettings },
}

impl Expert {
    /// Noise-free expert command at plant state `x`.
    pub fn command(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            Expert::Lqr { k } => Ok(k.matvec(x)?.into_iter().map(|v| -v).collect()),
            Expert::Nmpc { plant, settings } => {
                if x.len() != 1 {
                    return Err(dim_err("nmpc expert needs a scalar state"));
                }
                Ok(vec![nmpc_solve(plant, x[0], settings, 0).controls.first().copied().unwrap_or(0.0)])
            }
        }
    }
}

impl Policy for Expert {
    fn act(&mut self, plant: &PlantModel, x: &[f64], k: usize, noise: &NoiseSeq) -> Result<Action> {
        let cmd: Vec<f64> = self
            .command(x)?
            .iter()
            .zip(&noise.expert[k])
            .map(|(c, e)| c + e)
            .collect();
        let u: Vec<f64> = cmd.iter().zip(&noise.r_hat[k]).map(|(c, r)| c + r).collect();
        let cx = plant.free_output(x)?;
        let du = plant.feedthrough().matvec(&u)?;
        let u_hat = (0..cx.len()).map(|i| noise.r[k][i] + cx[i] + du[i]).collect();
        Ok(Action {
            u,
            controller_output: cmd.iter().map(|c| -c).collect(),
            controller_input: u_hat,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataMode {
    InitialSegments,
    SlidingWindow,
}

/// Standard deviations of the three noise channels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseLevels {
    pub plant: f64,
    pub controller: f64,
    pub expert: f64,
}

impl Default for NoiseLevels {
    fn default() -> Self {
        NoiseLevels {
            plant: 0.04,
            controller: 0.02,
            expert: 0.02,
        }
    }
}

impl NoiseLevels {
    pub fn zero() -> Self {
        NoiseLevels {
            plant: 0.0,
            controller: 0.0,
            expert: 0.0,
        }
    }
}

/// One demonstration segment: controller initial state, controller inputs
/// and the expert's controller outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub x_hat0: Vec<f64>,
    pub u_hat: Vec<Vec<f64>>,
    pub u: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingDataset {
    pub segments: Vec<Segment>,
    pub mode: DataMode,
    pub segment_length: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub n_traj: usize,
    pub mode: DataMode,
    /// Steps simulated per trajectory in sliding-window mode.
    pub window_steps: usize,
    pub init_std: f64,
    pub noise: NoiseLevels,
}

pub const SEGMENT_LENGTH: usize = 2;

impl TrainingDataset {
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// `(state, input, output)` sizes of the controller the data describes.
    pub fn dims(&self) -> Option<(usize, usize, usize)> {
        self.segments
            .first()
            .map(|s| (s.x_hat0.len(), s.u_hat[0].len(), s.u[0].len()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.segment_length < 2 {
            return Err(Error::Precondition("segments need at least two steps".into()));
        }
        let dims = self.dims();
        for (i, s) in self.segments.iter().enumerate() {
            if s.u_hat.len() != self.segment_length || s.u.len() != self.segment_length {
                return Err(dim_err(format!("segment {i} has the wrong length")));
            }
            let (n, p, m) = dims.unwrap();
            if s.x_hat0.len() != n || s.u_hat.iter().any(|v| v.len() != p) || s.u.iter().any(|v| v.len() != m) {
                return Err(dim_err(format!("segment {i} has inconsistent sizes")));
            }
        }
        Ok(())
    }

    /// Rows `segment,step,x_hat0_*,u_hat_*,u_*`; the state columns repeat on
    /// every step of a segment.
    pub fn to_csv(&self) -> String {
        let (n, p, m) = self.dims().unwrap_or((0, 0, 0));
        let mut out = String::from("segment,step");
        for i in 0..n {
            out.push_str(&format!(",x_hat0_{i}"));
        }
        for i in 0..p {
            out.push_str(&format!(",u_hat_{i}"));
        }
        for i in 0..m {
            out.push_str(&format!(",u_{i}"));
        }
        out.push('\n');
        for (si, s) in self.segments.iter().enumerate() {
            for k in 0..self.segment_length {
                out.push_str(&format!("{si},{k}"));
                for v in s.x_hat0.iter().chain(&s.u_hat[k]).chain(&s.u[k]) {
                    out.push_str(&format!(",{v:e}"));
                }
                out.push('\n');
            }
        }
        out
    }

    pub fn from_csv(text: &str, mode: DataMode) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Parse("empty dataset csv".into()))?;
        let cols: Vec<&str> = header.split(',').collect();
        let count = |pre: &str| cols.iter().filter(|c| c.starts_with(pre)).count();
        let n = count("x_hat0_");
        let p = count("u_hat_");
        let m = cols.len() - 2 - n - p;
        let mut segments: Vec<Segment> = Vec::new();
        let mut seg_len = 0;
        for (ln, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let vals: Vec<&str> = line.split(',').collect();
            if vals.len() != cols.len() {
                return Err(Error::Parse(format!("dataset csv line {}: wrong column count", ln + 2)));
            }
            let parse = |s: &str| -> Result<f64> {
                s.trim().parse::<f64>().map_err(|e| Error::Parse(format!("line {}: {e}", ln + 2)))
            };
            let si: usize = vals[0].parse().map_err(|e| Error::Parse(format!("segment index: {e}")))?;
            let k: usize = vals[1].parse().map_err(|e| Error::Parse(format!("step index: {e}")))?;
            let nums = vals[2..].iter().map(|s| parse(s)).collect::<Result<Vec<_>>>()?;
            if si == segments.len() {
                segments.push(Segment {
                    x_hat0: nums[..n].to_vec(),
                    u_hat: Vec::new(),
                    u: Vec::new(),
                });
            } else if si + 1 != segments.len() {
                return Err(Error::Parse(format!("segment {si} out of order")));
            }
            let seg = segments.last_mut().unwrap();
            if k != seg.u.len() {
                return Err(Error::Parse(format!("segment {si}: step {k} out of order")));
            }
            seg.u_hat.push(nums[n..n + p].to_vec());
            seg.u.push(nums[n + p..n + p + m].to_vec());
            seg_len = seg_len.max(seg.u.len());
        }
        let ds = TrainingDataset {
            segments,
            mode,
            segment_length: seg_len,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn sha256(&self) -> String {
        let digest = Sha256::digest(self.to_csv().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Writes `<stem>.csv` and `<stem>.json` (manifest) into `dir`.
    pub fn save(&self, dir: &std::path::Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let csv = self.to_csv();
        std::fs::write(dir.join(format!("{stem}.csv")), &csv)?;
        let (n, p, m) = self.dims().unwrap_or((0, 0, 0));
        let manifest = serde_json::json!({
            "mode": self.mode,
            "segment_length": self.segment_length,
            "n_segments": self.len(),
            "controller_states": n,
            "controller_inputs": p,
            "controller_outputs": m,
            "sha256": self.sha256(),
        });
        std::fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &std::path::Path, stem: &str) -> Result<Self> {
        let manifest: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.join(format!("{stem}.json")))?)?;
        let mode: DataMode = serde_json::from_value(manifest["mode"].clone())?;
        let ds = Self::from_csv(&std::fs::read_to_string(dir.join(format!("{stem}.csv")))?, mode)?;
        if let Some(h) = manifest["sha256"].as_str() {
            if h != ds.sha256() {
                return Err(Error::Parse("dataset hash does not match its manifest".into()));
            }
        }
        Ok(ds)
    }
}

/// Segments cut from one expert trajectory.
pub fn segments_from_trajectory(traj: &Trajectory, mode: DataMode) -> Vec<Segment> {
    let cut = |k: usize| Segment {
        x_hat0: traj.states[k].clone(),
        u_hat: traj.controller_inputs[k..k + SEGMENT_LENGTH].to_vec(),
        u: traj.controller_outputs[k..k + SEGMENT_LENGTH].to_vec(),
    };
    if traj.length < SEGMENT_LENGTH {
        return Vec::new();
    }
    match mode {
        DataMode::InitialSegments => vec![cut(0)],
        DataMode::SlidingWindow => (0..=traj.length - SEGMENT_LENGTH).map(cut).collect(),
    }
}

/// One expert rollout per trajectory from `x₀ ~ N(0, init_std²)`; each
/// trajectory draws from its own generator seeded from `rng`.
pub fn generate_dataset<R: Rng + ?Sized>(
    plant: &PlantModel,
    expert: &Expert,
    spec: &DatasetSpec,
    rng: &mut R,
) -> Result<TrainingDataset> {
    let horizon = match spec.mode {
        DataMode::InitialSegments => SEGMENT_LENGTH,
        DataMode::SlidingWindow => spec.window_steps.max(SEGMENT_LENGTH),
    };
    let seeds: Vec<u64> = (0..spec.n_traj).map(|_| rng.gen()).collect();
    let per_traj: Vec<Result<Vec<Segment>>> = seeds
        .par_iter()
        .map(|&seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let x0: Vec<f64> = (0..plant.n_states())
                .map(|_| spec.init_std * r.sample::<f64, _>(StandardNormal))
                .collect();
            let noise = NoiseSeq::sample(
                horizon,
                plant.n_inputs(),
                plant.n_outputs(),
                spec.noise.plant,
                spec.noise.controller,
                spec.noise.expert,
                &mut r,
            );
            let traj = simulate(plant, &x0, &noise, &mut expert.clone())?;
            Ok(segments_from_trajectory(&traj, spec.mode))
        })
        .collect();
    let mut segments = Vec::new();
    for s in per_traj {
        segments.extend(s?);
    }
    Ok(TrainingDataset {
        segments,
        mode: spec.mode,
        segment_length: SEGMENT_LENGTH,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn msd_plants_are_certified_and_lqr_stabilizes() {
        let mut r = rng(1);
        for _ in 0..5 {
            let (sys, cert) = generate_msd(&mut r).unwrap();
            assert!(cert.is_valid());
            assert_eq!((sys.n_states(), sys.n_inputs(), sys.n_outputs()), (6, 3, 3));
            let k = lqr_expert(&sys, 10.0, 1.0).unwrap();
            assert!(lqr_closed_loop_radius(&sys, &k).unwrap() < 1.0);
        }
    }

    #[test]
    fn small_step_discretization_is_identity() {
        let mut p = MsdParams::sample(3, 1e-9, &mut rng(2));
        p.phi = 1.0;
        let sys = p.discretize().unwrap();
        assert!((&sys.a - &Matrix::identity(6)).max_abs() < 1e-7);
    }

    #[test]
    fn lqr_scalar_and_zero_input() {
        let s = DiscreteStateSpace::scalar(0.5, 1.0, 1.0, 0.0);
        let k = lqr_expert(&s, 1.0, 1.0).unwrap();
        assert!((k.get(0, 0) - 0.26556).abs() < 1e-5);
        let z = DiscreteStateSpace::scalar(0.5, 0.0, 1.0, 0.0);
        assert_eq!(lqr_expert(&z, 1.0, 1.0).unwrap().get(0, 0), 0.0);
    }

    #[test]
    fn nmpc_equilibrium_and_zero_init_bound() {
        let p = SinePlant::benchmark();
        let s = NmpcSettings::default();
        let sol = nmpc_solve(&p, 0.0, &s, 0);
        assert_eq!(sol.cost, 0.0);
        assert_eq!(sol.controls[0], 0.0);
        for &x in &[-12.0, -3.0, 0.7, 5.0, 15.0] {
            let sol = nmpc_solve(&p, x, &s, 3);
            let zero = nmpc_cost(&p, x, &vec![0.0; s.horizon - 1], &s, None);
            assert!(sol.cost <= zero);
            assert!(sol.history.windows(2).all(|w| w[1] <= w[0]));
        }
    }

    #[test]
    fn nmpc_matches_linearized_lqr() {
        let p = SinePlant::benchmark();
        let lin = p.linearization();
        let one = Matrix::scalar(1.0);
        let pr = solve_dare(&lin.a, &lin.b, &Matrix::scalar(2.0), &one).unwrap();
        let k = dare_gain(&lin.a, &lin.b, &one, &pr).unwrap().get(0, 0);
        let x = 1e-3;
        let u = nmpc_expert(&p, x, 11, 2.0, 1.0);
        assert!(((-u / x) - k).abs() < 0.1 * k, "{} vs {k}", -u / x);
    }

    #[test]
    fn nmpc_gradient_matches_differences() {
        let p = SinePlant::benchmark();
        let s = NmpcSettings::default();
        let u: Vec<f64> = (0..10).map(|i| (i as f64 * 0.7).sin()).collect();
        let mut g = vec![0.0; 10];
        nmpc_cost(&p, 2.0, &u, &s, Some(&mut g));
        for i in 0..10 {
            let mut up = u.clone();
            let mut dn = u.clone();
            up[i] += 1e-6;
            dn[i] -= 1e-6;
            let fd = (nmpc_cost(&p, 2.0, &up, &s, None) - nmpc_cost(&p, 2.0, &dn, &s, None)) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-5 * (1.0 + fd.abs()));
        }
    }

    fn sine_setup() -> (PlantModel, Expert) {
        let p = SinePlant::benchmark();
        (
            PlantModel::SineNonlinear(p),
            Expert::Nmpc {
                plant: p,
                settings: NmpcSettings::default(),
            },
        )
    }

    #[test]
    fn dataset_counts_and_zero_case() {
        let (plant, expert) = sine_setup();
        let mut spec = DatasetSpec {
            n_traj: 1,
            mode: DataMode::InitialSegments,
            window_steps: 10,
            init_std: 5.0,
            noise: NoiseLevels::default(),
        };
        let d = generate_dataset(&plant, &expert, &spec, &mut rng(3)).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d.segments[0].u.len(), 2);
        spec.mode = DataMode::SlidingWindow;
        spec.n_traj = 3;
        let d = generate_dataset(&plant, &expert, &spec, &mut rng(3)).unwrap();
        assert_eq!(d.len(), 27);
        spec.init_std = 0.0;
        spec.noise = NoiseLevels::zero();
        let d = generate_dataset(&plant, &expert, &spec, &mut rng(3)).unwrap();
        assert!(d
            .segments
            .iter()
            .all(|s| s.x_hat0[0] == 0.0 && s.u.iter().chain(&s.u_hat).all(|v| v[0] == 0.0)));
    }

    #[test]
    fn sliding_window_state_and_signs() {
        let mut r = rng(4);
        let (sys, _) = generate_msd(&mut r).unwrap();
        let k = lqr_expert(&sys, 10.0, 1.0).unwrap();
        let plant = PlantModel::Linear(sys.clone());
        let expert = Expert::Lqr { k: k.clone() };
        let spec = DatasetSpec {
            n_traj: 1,
            mode: DataMode::SlidingWindow,
            window_steps: 4,
            init_std: 1.0,
            noise: NoiseLevels::zero(),
        };
        let d = generate_dataset(&plant, &expert, &spec, &mut r).unwrap();
        assert_eq!(d.len(), 3);
        for s in &d.segments {
            // noise free: controller output is Kx̂₀ and input is y = Cx + Du
            let kx = k.matvec(&s.x_hat0).unwrap();
            for (a, b) in kx.iter().zip(&s.u[0]) {
                assert!((a - b).abs() < 1e-12);
            }
            let u: Vec<f64> = kx.iter().map(|v| -v).collect();
            let (_, y) = sys.step(&s.x_hat0, &u).unwrap();
            for (a, b) in y.iter().zip(&s.u_hat[0]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dataset_roundtrip_and_determinism() {
        let (plant, expert) = sine_setup();
        let spec = DatasetSpec {
            n_traj: 4,
            mode: DataMode::SlidingWindow,
            window_steps: 10,
            init_std: 5.0,
            noise: NoiseLevels::default(),
        };
        let a = generate_dataset(&plant, &expert, &spec, &mut rng(9)).unwrap();
        let b = generate_dataset(&plant, &expert, &spec, &mut rng(9)).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
        let dir = tempfile::tempdir().unwrap();
        a.save(dir.path(), "train").unwrap();
        let back = TrainingDataset::load(dir.path(), "train").unwrap();
        assert_eq!(back.sha256(), a.sha256());
        assert_eq!(back.len(), a.len());
    }
}
