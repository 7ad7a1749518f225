//! Fixtures shared by the criterion benches.

use sacrfp::{init, Architecture, DenseModel, ModelSpec, Tensor, Variant};

pub fn image(seed: u64, size: usize) -> Tensor<f32> {
    init::normal(&mut init::rng(seed), [1, 3, size, size])
}

pub fn model(variant: Variant) -> DenseModel<f32> {
    let spec = ModelSpec {
        arch: Architecture::default(),
        variant,
    };
    DenseModel::new(&spec, 0).expect("default architecture is valid")
}
