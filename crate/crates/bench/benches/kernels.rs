use criterion::{black_box, criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dissipclone_bench::{msd_fixture, random_symmetric};
use dissipclone_core::dissipativity::kyp_passivity;
use dissipclone_core::lmi::{solve_ipm, IpmSettings, LmiBlock, SdpProblem};
use dissipclone_core::numlin::sym_eig;
use dissipclone_core::training::{pgd_gradient, project_controller, random_controller, two_step_loss};
use dissipclone_core::Matrix;

fn eig(c: &mut Criterion) {
    let m = random_symmetric(18, 1);
    c.bench_function("sym_eig_18", |b| b.iter(|| sym_eig(black_box(&m)).unwrap()));
}

fn certificates(c: &mut Criterion) {
    let f = msd_fixture(2, 3);
    c.bench_function("kyp_passivity_msd", |b| b.iter(|| kyp_passivity(black_box(&f.plant)).unwrap()));
    // min x s.t. [[x, 1], [1, x]] ⪰ 0
    let mut blk = LmiBlock::new(Matrix::from_rows(&[&[0.0, -1.0], &[-1.0, 0.0]])).unwrap();
    blk.add_coefficient(0, &Matrix::identity(2).scale(-1.0)).unwrap();
    let mut prob = SdpProblem::feasibility(1, vec![blk], 0.0);
    prob.objective = vec![1.0];
    c.bench_function("ipm_two_by_two", |b| {
        b.iter(|| solve_ipm(black_box(&prob), &IpmSettings::default(), None).unwrap())
    });
}

fn training(c: &mut Criterion) {
    let f = msd_fixture(25, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let theta = random_controller(6, 3, 3, &mut rng);
    c.bench_function("two_step_loss_225", |b| b.iter(|| two_step_loss(black_box(&theta), &f.data).unwrap()));
    c.bench_function("pgd_gradient_225", |b| b.iter(|| pgd_gradient(black_box(&theta), &f.data).unwrap()));
    let mut g = c.benchmark_group("projection");
    g.sample_size(10);
    g.bench_function("project_controller_6", |b| {
        b.iter(|| project_controller(black_box(&theta), &f.qsr, &Matrix::identity(6)).unwrap())
    });
    g.finish();
}

criterion_group!(benches, eig, certificates, training);
criterion_main!(benches);
