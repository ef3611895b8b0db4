//! Shared fixtures for the criterion benches.

use gmdgm::models::{LabelledBatch, Likelihood, ModelConfig, ModelKind, ModelParams, PriorY, UnlabelledBatch};
use gmdgm::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn random_tensor(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches data")
}

fn pixels(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random::<f64>()).collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches data")
}

fn normals(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches data")
}

/// A model plus one labelled and one unlabelled batch of MNIST-shaped noise.
pub struct StepFixture {
    pub model: ModelParams,
    pub labelled: LabelledBatch,
    pub unlabelled: UnlabelledBatch,
}

pub fn step_fixture(kind: ModelKind, hidden: &[usize], z_dim: usize, batch: usize) -> StepFixture {
    let (d, k) = (784, 15);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let config = ModelConfig {
        kind,
        input_dim: d,
        classes: k,
        z_dim,
        hidden: hidden.to_vec(),
        likelihood: Likelihood::Bernoulli,
    };
    let model = ModelParams::new(config, PriorY::uniform(k).unwrap(), &mut rng).unwrap();
    let labels: Vec<usize> = (0..batch).map(|i| i % 5).collect();
    let labelled = LabelledBatch {
        x: pixels(batch, d, &mut rng),
        y: Tensor::one_hot(&labels, k).unwrap(),
        eps: normals(batch, z_dim, &mut rng),
    };
    let eps = normals(batch, z_dim, &mut rng);
    let unlabelled = UnlabelledBatch::with_shared_eps(pixels(batch, d, &mut rng), &eps, k);
    StepFixture {
        model,
        labelled,
        unlabelled,
    }
}
