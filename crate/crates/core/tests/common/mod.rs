#![allow(dead_code)]

use ewas_core::gradcheck::{check_gradients, GradReport};
use ewas_core::model::{Arch, Model, ModelConfig};
use ewas_core::tensor::{Graph, Tensor, Var};
use ewas_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn labels(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..k)).collect()
}

pub fn small_cnn(width: usize, k: usize, shape: [usize; 3], hosts: &[&str], seed: u64) -> Model {
    let cfg = ModelConfig {
        arch: Arch::SmallCnn,
        width,
        insertion_points: hosts.iter().map(|h| h.to_string()).collect(),
        num_classes: k,
        input_shape: shape,
        normalization: None,
    };
    Model::build(&cfg, seed).unwrap()
}

pub fn linear(k: usize, shape: [usize; 3], ewas: bool, seed: u64) -> Model {
    let cfg = ModelConfig {
        arch: Arch::Linear,
        width: 1,
        insertion_points: if ewas { vec!["input".into()] } else { vec![] },
        num_classes: k,
        input_shape: shape,
        normalization: None,
    };
    Model::build(&cfg, seed).unwrap()
}

pub fn set_param(model: &mut Model, name: &str, values: &[f64]) {
    let i = model
        .param_index(name)
        .unwrap_or_else(|| panic!("no parameter `{name}`"));
    let t = &mut model.params_mut()[i].tensor;
    assert_eq!(t.numel(), values.len(), "size of `{name}`");
    t.data_mut().copy_from_slice(values);
}

/// Replaces every parameter with fresh uniform values in `[lo, hi)`.
pub fn randomize_params(model: &mut Model, rng: &mut ChaCha8Rng, lo: f64, hi: f64) {
    for p in model.params_mut() {
        for v in p.tensor.data_mut() {
            *v = rng.random_range(lo..hi);
        }
    }
}

/// [`check_gradients`] for a model-free scalar of the inputs.
pub fn check_op(
    inputs: &[Tensor],
    tol: f64,
    f: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
) -> GradReport {
    let mut dummy = linear(2, [1, 1, 1], false, 0);
    let objective = |_: &Model, g: &mut Graph, v: &[Var]| Ok((f(g, v)?, Vec::new()));
    check_gradients(&mut dummy, inputs, false, tol, &objective).unwrap()
}
