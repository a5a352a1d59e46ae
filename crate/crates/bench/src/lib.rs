//! Shared fixtures for the benchmarks.

use condflow_core::conditioning::downscale;
use condflow_core::{ArchConfig, DownscaleKernel, FlowModel, Rng, Tensor};

pub fn uniform(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform()).collect()).expect("shape matches data")
}

/// A perturbed toy model with a batch of HR patches and their LR inputs.
pub fn toy_setup(batch: usize) -> (FlowModel, Tensor, Tensor) {
    let mut rng = Rng::new(42);
    let mut model = FlowModel::build(ArchConfig::toy(), &mut rng).expect("toy layout is valid");
    model.perturb(&mut rng, 0.02);
    let y = uniform(&mut rng, &[batch, 3, 32, 32]);
    let x = downscale(&y, &DownscaleKernel::bicubic(4)).expect("32 is divisible by 4");
    (model, y, x)
}
