use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::experts::TrainingDataset;
use crate::numlin::{Lu, Matrix};
use crate::plant::{Action, NoiseSeq, PlantModel, Policy};

use super::{NnSettings, Termination};

/// Static ReLU network `û ↦ u` with two hidden layers of equal width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
    pub w3: Matrix,
    pub b3: Vec<f64>,
}

struct Forward {
    z1: Vec<f64>,
    h1: Vec<f64>,
    z2: Vec<f64>,
    h2: Vec<f64>,
    out: Vec<f64>,
}

fn relu(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| x.max(0.0)).collect()
}

fn affine(w: &Matrix, b: &[f64], x: &[f64]) -> Vec<f64> {
    let mut y = w.matvec(x).expect("layer sizes checked at construction");
    y.iter_mut().zip(b).for_each(|(y, b)| *y += b);
    y
}

impl MlpParams {
    /// He-initialized weights, zero biases.
    pub fn init<R: Rng + ?Sized>(inputs: usize, width: usize, outputs: usize, rng: &mut R) -> Self {
        let mut layer = |r: usize, c: usize| {
            let s = (2.0 / c.max(1) as f64).sqrt();
            Matrix::from_fn(r, c, |_, _| s * rng.sample::<f64, _>(StandardNormal))
        };
        MlpParams {
            w1: layer(width, inputs),
            b1: vec![0.0; width],
            w2: layer(width, width),
            b2: vec![0.0; width],
            w3: layer(outputs, width),
            b3: vec![0.0; outputs],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.w1.rows();
        if self.b1.len() != h
            || self.w2.shape() != (h, h)
            || self.b2.len() != h
            || self.w3.cols() != h
            || self.b3.len() != self.w3.rows()
        {
            return Err(dim_err("network layer sizes do not chain"));
        }
        Ok(())
    }

    pub fn n_inputs(&self) -> usize {
        self.w1.cols()
    }

    pub fn n_outputs(&self) -> usize {
        self.w3.rows()
    }

    fn forward_full(&self, x: &[f64]) -> Forward {
        let z1 = affine(&self.w1, &self.b1, x);
        let h1 = relu(&z1);
        let z2 = affine(&self.w2, &self.b2, &h1);
        let h2 = relu(&z2);
        let out = affine(&self.w3, &self.b3, &h2);
        Forward { z1, h1, z2, h2, out }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.n_inputs() {
            return Err(dim_err("network input length"));
        }
        Ok(self.forward_full(x).out)
    }

    /// `∂f/∂x` at `x` (outputs × inputs).
    pub fn jacobian(&self, x: &[f64]) -> Result<Matrix> {
        let f = self.forward_full(x);
        let mask = |z: &[f64]| Matrix::from_diag(&z.iter().map(|v| if *v > 0.0 { 1.0 } else { 0.0 }).collect::<Vec<_>>());
        let j = &(&(&self.w3 * &mask(&f.z2)) * &self.w2) * &mask(&f.z1);
        Ok(&j * &self.w1)
    }
}

fn pairs(data: &TrainingDataset) -> Vec<(&[f64], &[f64])> {
    data.segments
        .iter()
        .flat_map(|s| s.u_hat.iter().zip(&s.u).map(|(a, b)| (a.as_slice(), b.as_slice())))
        .collect()
}

/// Mean squared error over every `(û_k, u_k)` pair in the dataset.
pub fn mlp_loss(params: &MlpParams, data: &TrainingDataset) -> Result<f64> {
    let ps = pairs(data);
    if ps.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (x, u) in &ps {
        let y = params.forward(x)?;
        total += y.iter().zip(*u).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    Ok(total / ps.len() as f64)
}

fn add_outer(g: &mut Matrix, a: &[f64], b: &[f64]) {
    let c = b.len();
    let d = g.data_mut();
    for (i, ai) in a.iter().enumerate() {
        if *ai == 0.0 {
            continue;
        }
        for (j, bj) in b.iter().enumerate() {
            d[i * c + j] += ai * bj;
        }
    }
}

fn gradient(params: &MlpParams, ps: &[(&[f64], &[f64])]) -> Result<MlpParams> {
    let mut g = MlpParams {
        w1: Matrix::zeros(params.w1.rows(), params.w1.cols()),
        b1: vec![0.0; params.b1.len()],
        w2: Matrix::zeros(params.w2.rows(), params.w2.cols()),
        b2: vec![0.0; params.b2.len()],
        w3: Matrix::zeros(params.w3.rows(), params.w3.cols()),
        b3: vec![0.0; params.b3.len()],
    };
    let scale = 1.0 / ps.len() as f64;
    for (x, u) in ps {
        let f = params.forward_full(x);
        let d3: Vec<f64> = f.out.iter().zip(*u).map(|(y, u)| 2.0 * (y - u) * scale).collect();
        add_outer(&mut g.w3, &d3, &f.h2);
        g.b3.iter_mut().zip(&d3).for_each(|(g, d)| *g += d);
        let d2: Vec<f64> = params.w3.tr_matvec(&d3)?.iter().zip(&f.z2).map(|(v, z)| if *z > 0.0 { *v } else { 0.0 }).collect();
        add_outer(&mut g.w2, &d2, &f.h1);
        g.b2.iter_mut().zip(&d2).for_each(|(g, d)| *g += d);
        let d1: Vec<f64> = params.w2.tr_matvec(&d2)?.iter().zip(&f.z1).map(|(v, z)| if *z > 0.0 { *v } else { 0.0 }).collect();
        add_outer(&mut g.w1, &d1, x);
        g.b1.iter_mut().zip(&d1).for_each(|(g, d)| *g += d);
    }
    Ok(g)
}

fn step(p: &mut MlpParams, g: &MlpParams, lr: f64) {
    let upd = |w: &mut Matrix, g: &Matrix| w.data_mut().iter_mut().zip(g.data()).for_each(|(w, g)| *w -= lr * g);
    upd(&mut p.w1, &g.w1);
    upd(&mut p.w2, &g.w2);
    upd(&mut p.w3, &g.w3);
    for (b, gb) in [(&mut p.b1, &g.b1), (&mut p.b2, &g.b2), (&mut p.b3, &g.b3)] {
        b.iter_mut().zip(gb).for_each(|(b, g)| *b -= lr * g);
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NnReport {
    pub params: MlpParams,
    pub loss_history: Vec<f64>,
    pub wall_time: f64,
    pub termination: Termination,
}

/// Full-batch gradient descent on the MSE of the static map; the rate is
/// halved, for good, whenever a step would raise the loss.
pub fn nn_train(
    data: &TrainingDataset,
    settings: &NnSettings,
    stop_tol: f64,
    seed: u64,
    dims: (usize, usize),
) -> Result<NnReport> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (p, m) = data.dims().map(|(_, p, m)| (p, m)).unwrap_or(dims);
    let mut params = MlpParams::init(p, settings.width, m, &mut rng);
    let ps = pairs(data);
    if ps.is_empty() {
        return Ok(NnReport {
            params,
            loss_history: Vec::new(),
            wall_time: 0.0,
            termination: Termination::EmptyData,
        });
    }
    let mut loss = mlp_loss(&params, data)?;
    let mut history = vec![loss];
    let mut termination = Termination::MaxIterations;
    let mut lr = settings.lr;
    for _ in 0..settings.max_iters {
        let g = gradient(&params, &ps)?;
        let mut accepted = None;
        for _ in 0..=super::pgd::MAX_HALVINGS {
            let mut cand = params.clone();
            step(&mut cand, &g, lr);
            let l = mlp_loss(&cand, data)?;
            if l.is_finite() && l <= loss {
                accepted = Some((cand, l));
                break;
            }
            lr *= 0.5;
        }
        let Some((cand, l)) = accepted else {
            termination = Termination::NoProgress;
            break;
        };
        params = cand;
        let change = (l - loss).abs();
        loss = l;
        history.push(loss);
        if change < stop_tol {
            termination = Termination::Converged;
            break;
        }
    }
    Ok(NnReport {
        params,
        loss_history: history,
        wall_time: start.elapsed().as_secs_f64(),
        termination,
    })
}

/// The network in negative feedback: `u = r̂ − f(r + Cx + Du)`. With plant
/// feedthrough the loop is solved by Newton's method, falling back to
/// bisection for scalar inputs.
#[derive(Clone, Debug)]
pub struct NnPolicy {
    pub params: MlpParams,
}

const LOOP_TOL: f64 = 1e-10;

impl NnPolicy {
    pub fn new(params: MlpParams) -> Self {
        NnPolicy { params }
    }

    fn residual(&self, d: &Matrix, meas: &[f64], r_hat: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        let du = d.matvec(u)?;
        let inp: Vec<f64> = meas.iter().zip(&du).map(|(a, b)| a + b).collect();
        let f = self.params.forward(&inp)?;
        Ok((0..u.len()).map(|i| u[i] - r_hat[i] + f[i]).collect())
    }

    fn solve_loop(&self, d: &Matrix, meas: &[f64], r_hat: &[f64]) -> Result<Vec<f64>> {
        let m = r_hat.len();
        let direct: Vec<f64> = {
            let f = self.params.forward(meas)?;
            (0..m).map(|i| r_hat[i] - f[i]).collect()
        };
        if d.max_abs() == 0.0 {
            return Ok(direct);
        }
        let norm = |v: &[f64]| v.iter().fold(0.0_f64, |a, x| a.max(x.abs()));
        let mut u = direct;
        for _ in 0..50 {
            let g = self.residual(d, meas, r_hat, &u)?;
            if norm(&g) < LOOP_TOL * (1.0 + norm(&u)) {
                return Ok(u);
            }
            let du = d.matvec(&u)?;
            let inp: Vec<f64> = meas.iter().zip(&du).map(|(a, b)| a + b).collect();
            let jac = &Matrix::identity(m) + &(&self.params.jacobian(&inp)? * d);
            let Ok(lu) = Lu::new(&jac) else { break };
            let Ok(step) = lu.solve_vec(&g) else { break };
            u.iter_mut().zip(&step).for_each(|(u, s)| *u -= s);
            if !u.iter().all(|v| v.is_finite()) {
                break;
            }
        }
        if m == 1 {
            return self.bisect(d, meas, r_hat);
        }
        Err(Error::WellPosedness)
    }

    fn bisect(&self, d: &Matrix, meas: &[f64], r_hat: &[f64]) -> Result<Vec<f64>> {
        let g = |u: f64| self.residual(d, meas, r_hat, &[u]).map(|v| v[0]);
        let mut width = 1.0;
        let (mut lo, mut hi) = (-width, width);
        let (mut glo, mut ghi) = (g(lo)?, g(hi)?);
        while glo.signum() == ghi.signum() {
            width *= 2.0;
            if width > 1e12 {
                return Err(Error::WellPosedness);
            }
            lo = -width;
            hi = width;
            glo = g(lo)?;
            ghi = g(hi)?;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            let gm = g(mid)?;
            if gm == 0.0 || (hi - lo) < 1e-13 * (1.0 + mid.abs()) {
                return Ok(vec![mid]);
            }
            if gm.signum() == glo.signum() {
                lo = mid;
                glo = gm;
            } else {
                hi = mid;
            }
        }
        Ok(vec![0.5 * (lo + hi)])
    }
}

impl Policy for NnPolicy {
    fn act(&mut self, plant: &PlantModel, x: &[f64], k: usize, noise: &NoiseSeq) -> Result<Action> {
        let cx = plant.free_output(x)?;
        let meas: Vec<f64> = noise.r[k].iter().zip(&cx).map(|(a, b)| a + b).collect();
        let d = plant.feedthrough();
        let u = self.solve_loop(&d, &meas, &noise.r_hat[k])?;
        let du = d.matvec(&u)?;
        let u_hat: Vec<f64> = meas.iter().zip(&du).map(|(a, b)| a + b).collect();
        let y_hat = self.params.forward(&u_hat)?;
        Ok(Action {
            u,
            controller_output: y_hat,
            controller_input: u_hat,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plant::{simulate, SinePlant};
    use crate::training::tests::random_dataset;

    #[test]
    fn gradient_matches_finite_differences() {
        let data = random_dataset(4, 1, 2, 1, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = MlpParams::init(2, 5, 1, &mut rng);
        let g = gradient(&p, &pairs(&data)).unwrap();
        let h = 1e-6;
        for idx in 0..p.w1.data().len() {
            let mut a = p.clone();
            a.w1.data_mut()[idx] += h;
            let mut b = p.clone();
            b.w1.data_mut()[idx] -= h;
            let fd = (mlp_loss(&a, &data).unwrap() - mlp_loss(&b, &data).unwrap()) / (2.0 * h);
            assert!((fd - g.w1.data()[idx]).abs() < 1e-5 * (1.0 + fd.abs()));
        }
        for idx in 0..p.b3.len() {
            let mut a = p.clone();
            a.b3[idx] += h;
            let mut b = p.clone();
            b.b3[idx] -= h;
            let fd = (mlp_loss(&a, &data).unwrap() - mlp_loss(&b, &data).unwrap()) / (2.0 * h);
            assert!((fd - g.b3[idx]).abs() < 1e-5 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn training_decreases_and_empty_data_is_noop() {
        let data = random_dataset(20, 1, 1, 1, 5);
        let s = NnSettings {
            width: 10,
            lr: 1e-2,
            max_iters: 50,
        };
        let rep = nn_train(&data, &s, 0.0, 0, (1, 1)).unwrap();
        assert!(rep.loss_history.last().unwrap() < &rep.loss_history[0]);
        let mut empty = data.clone();
        empty.segments.clear();
        let rep0 = nn_train(&empty, &s, 0.0, 0, (1, 1)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(rep0.params, MlpParams::init(1, 10, 1, &mut rng));
    }

    #[test]
    fn feedback_loop_is_solved_with_feedthrough() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = MlpParams::init(1, 8, 1, &mut rng);
        let plant = PlantModel::SineNonlinear(SinePlant::benchmark());
        let noise = NoiseSeq::sample(5, 1, 1, 0.04, 0.02, 0.0, &mut rng);
        let mut pol = NnPolicy::new(params.clone());
        match simulate(&plant, &[0.3], &noise, &mut pol) {
            Ok(traj) => {
                for k in 0..traj.length {
                    // u = r̂ − f(û) with û = r + y
                    let f = params.forward(&traj.controller_inputs[k]).unwrap();
                    assert!((traj.plant_inputs[k][0] - (noise.r_hat[k][0] - f[0])).abs() < 1e-8);
                    let y = traj.plant_outputs[k][0];
                    assert!((traj.controller_inputs[k][0] - (noise.r[k][0] + y)).abs() < 1e-8);
                }
            }
            Err(e) => assert!(matches!(e, Error::WellPosedness)),
        }
    }
}
