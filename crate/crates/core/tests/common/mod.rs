#![allow(dead_code)]

use larar::data::{preprocess, synth_dataset, SplitSpec, Splits};
use larar::losses::LossWeights;
use larar::model::{Architecture, ModelKind, NetworkParams};
use larar::training::{train, TrainConfig};
use larar::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn uniform(rows: usize, cols: usize, lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_vec(rows, cols, data).unwrap()
}

pub fn synth_splits(n: usize, d: usize, sep: f64, seed: u64) -> Splits {
    preprocess(&synth_dataset(n, d, sep, seed), &SplitSpec::default()).unwrap()
}

pub fn quick_model(kind: ModelKind, splits: &Splits, epochs: usize, seed: u64) -> NetworkParams {
    let cfg = TrainConfig {
        epochs,
        pgd_iterations: 3,
        pgd_step: 0.1,
        seed,
        ..TrainConfig::default()
    };
    train(kind, &splits.train, &cfg, &LossWeights::default()).unwrap().params
}

/// Single logistic unit `σ(w·x + b)` with no hidden layers.
pub fn logistic(w: f64, b: f64) -> NetworkParams {
    let arch = Architecture {
        hidden: Vec::new(),
        batchnorm: false,
        aux_heads: false,
    };
    let mut p = NetworkParams::zeros(ModelKind::Vanilla, arch, 1).unwrap();
    p.head.weight = Tensor::scalar(w);
    p.head.bias = Tensor::scalar(b);
    p
}

/// Central finite differences of `f` with respect to every parameter
/// tensor, in `NetworkParams::tensors` order.
pub fn finite_difference(params: &NetworkParams, h: f64, f: impl Fn(&NetworkParams) -> f64) -> Vec<Tensor> {
    let shapes: Vec<[usize; 2]> = params.tensors().iter().map(|(_, t)| t.shape()).collect();
    let mut out = Vec::new();
    for (k, [r, c]) in shapes.into_iter().enumerate() {
        let mut g = Tensor::zeros(r, c);
        for j in 0..r * c {
            let mut plus = params.clone();
            plus.tensors_mut()[k].1.data_mut()[j] += h;
            let mut minus = params.clone();
            minus.tensors_mut()[k].1.data_mut()[j] -= h;
            g.data_mut()[j] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        out.push(g);
    }
    out
}

/// Largest `|a − b| / max(|a|, |b|)` over all entries, ignoring entries
/// where both sides are below `floor`.
pub fn max_relative_error(a: &[Tensor], b: &[Tensor], floor: f64) -> f64 {
    let mut worst = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        assert_eq!(x.shape(), y.shape());
        for (&u, &v) in x.data().iter().zip(y.data()) {
            let scale = u.abs().max(v.abs());
            if scale < floor {
                continue;
            }
            worst = worst.max((u - v).abs() / scale);
        }
    }
    worst
}
