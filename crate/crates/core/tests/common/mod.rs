//! Shared builders for the integration tests.
#![allow(dead_code)]

use dissipclone_core::experts::{DataMode, Segment, TrainingDataset};
use dissipclone_core::numlin::spectral_radius;
use dissipclone_core::{ControllerParams, DiscreteStateSpace, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian<R: Rng + ?Sized>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

fn vector<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Vec<f64> {
    (0..len).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// `k` two-step segments of Gaussian data for an `n`-state controller with
/// `p` inputs and `m` outputs.
pub fn random_dataset(k: usize, n: usize, p: usize, m: usize, seed: u64) -> TrainingDataset {
    let mut r = rng(seed);
    let segments = (0..k)
        .map(|_| Segment {
            x_hat0: vector(n, &mut r),
            u_hat: vec![vector(p, &mut r), vector(p, &mut r)],
            u: vec![vector(m, &mut r), vector(m, &mut r)],
        })
        .collect();
    TrainingDataset {
        segments,
        mode: DataMode::InitialSegments,
        segment_length: 2,
    }
}

/// Random system with `A` rescaled to spectral radius `radius`.
pub fn random_stable_system<R: Rng + ?Sized>(n: usize, m: usize, p: usize, radius: f64, rng: &mut R) -> DiscreteStateSpace {
    let mut a = gaussian(n, n, 1.0, rng);
    let rho = spectral_radius(&a).unwrap();
    if rho > 0.0 {
        a = a.scale(radius / rho);
    }
    DiscreteStateSpace::new(a, gaussian(n, m, 1.0, rng), gaussian(p, n, 1.0, rng), gaussian(p, m, 1.0, rng)).unwrap()
}

/// Random symmetric positive definite matrix with eigenvalues in `[lo, lo + spread]`.
pub fn random_spd<R: Rng + ?Sized>(n: usize, lo: f64, spread: f64, rng: &mut R) -> Matrix {
    let g = gaussian(n, n, 1.0, rng);
    let gram = g.tr_matmul(&g).unwrap();
    let top = dissipclone_core::numlin::sym_eig(&gram).unwrap().max().max(1e-12);
    (&gram.scale(spread / top) + &Matrix::identity(n).scale(lo)).symmetrize().unwrap()
}

/// `a + s·b` entrywise over the four controller matrices.
pub fn axpy(a: &ControllerParams, b: &ControllerParams, s: f64) -> ControllerParams {
    ControllerParams {
        a: &a.a + &b.a.scale(s),
        b: &a.b + &b.b.scale(s),
        c: &a.c + &b.c.scale(s),
        d: &a.d + &b.d.scale(s),
    }
}

/// Largest entrywise difference between two controllers.
pub fn params_distance(a: &ControllerParams, b: &ControllerParams) -> f64 {
    [
        (&a.a - &b.a).max_abs(),
        (&a.b - &b.b).max_abs(),
        (&a.c - &b.c).max_abs(),
        (&a.d - &b.d).max_abs(),
    ]
    .into_iter()
    .fold(0.0, f64::max)
}

/// The scalar unit delay `y(k) = u(k−1)`.
pub fn unit_delay() -> DiscreteStateSpace {
    DiscreteStateSpace::scalar(0.0, 1.0, 1.0, 0.0)
}

/// Central-difference gradient of the two-step loss, entry by entry.
pub fn fd_gradient(params: &ControllerParams, data: &TrainingDataset, h: f64) -> Vec<f64> {
    let loss = |p: &ControllerParams| dissipclone_core::training::two_step_loss(p, data).unwrap();
    let mut out = Vec::new();
    for which in 0..4 {
        let (rows, cols) = matrix_of(params, which).shape();
        for i in 0..rows {
            for j in 0..cols {
                let mut plus = params.clone();
                let mut minus = params.clone();
                let v = matrix_of(params, which).get(i, j);
                matrix_of_mut(&mut plus, which).set(i, j, v + h);
                matrix_of_mut(&mut minus, which).set(i, j, v - h);
                out.push((loss(&plus) - loss(&minus)) / (2.0 * h));
            }
        }
    }
    out
}

/// Entries of `A, B, C, D` in row-major order, matching [`fd_gradient`].
pub fn flatten(params: &ControllerParams) -> Vec<f64> {
    (0..4)
        .flat_map(|w| {
            let m = matrix_of(params, w);
            let (r, c) = m.shape();
            (0..r).flat_map(move |i| (0..c).map(move |j| (i, j))).map(|(i, j)| m.get(i, j)).collect::<Vec<_>>()
        })
        .collect()
}

fn matrix_of(p: &ControllerParams, which: usize) -> &Matrix {
    match which {
        0 => &p.a,
        1 => &p.b,
        2 => &p.c,
        _ => &p.d,
    }
}

fn matrix_of_mut(p: &mut ControllerParams, which: usize) -> &mut Matrix {
    match which {
        0 => &mut p.a,
        1 => &mut p.b,
        2 => &mut p.c,
        _ => &mut p.d,
    }
}

/// `‖a − b‖ / max(‖b‖, floor)`.
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / nb.max(floor)
}
