//! Fixtures shared by the benchmarks.

use dissipclone_core::dissipativity::{required_controller_qsr, QsrSupply};
use dissipclone_core::experts::{generate_dataset, generate_msd, lqr_expert, DataMode, DatasetSpec, Expert, NoiseLevels, TrainingDataset};
use dissipclone_core::{DiscreteStateSpace, Matrix, PlantModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Random symmetric matrix with entries of unit scale.
pub fn random_symmetric(n: usize, seed: u64) -> Matrix {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = Matrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    (&a + &a.transpose()).scale(0.5)
}

/// A certified mass-spring-damper plant with its controller supply and a
/// sliding-window dataset of `n_traj` expert trajectories.
pub struct MsdFixture {
    pub plant: DiscreteStateSpace,
    pub qsr: QsrSupply,
    pub data: TrainingDataset,
}

pub fn msd_fixture(n_traj: usize, seed: u64) -> MsdFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (plant, _) = generate_msd(&mut rng).expect("plant generation");
    let k = lqr_expert(&plant, 10.0, 1.0).expect("lqr");
    let spec = DatasetSpec {
        n_traj,
        mode: DataMode::SlidingWindow,
        window_steps: 10,
        init_std: 1.0,
        noise: NoiseLevels::default(),
    };
    let model = PlantModel::Linear(plant.clone());
    let data = generate_dataset(&model, &Expert::Lqr { k }, &spec, &mut rng).expect("dataset");
    let qsr = required_controller_qsr(&QsrSupply::passive(plant.n_inputs()), 1.0).expect("supply");
    MsdFixture { plant, qsr, data }
}
