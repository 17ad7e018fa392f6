use larar::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use larar::model::{Architecture, ModelKind, Mode, NetworkParams};
use larar::{LararError, Tensor};
use larar_autodiff::AutodiffError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_input(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect();
    Tensor::from_vec(rows, cols, data).unwrap()
}

fn trained_like(kind: ModelKind, dim: usize, seed: u64) -> NetworkParams {
    // Populate running statistics with one training-mode pass.
    let mut p = NetworkParams::init(kind, dim, seed).unwrap();
    let t = p.forward(&random_input(32, dim, seed + 100), Mode::Train).unwrap();
    p.absorb_batch_stats(&t.batch_stats);
    p
}

#[test]
fn zero_network_outputs_one_half() {
    let p = NetworkParams::zeros(ModelKind::Vanilla, ModelKind::Vanilla.architecture(), 4).unwrap();
    let out = p.forward(&random_input(5, 4, 1), Mode::Eval).unwrap();
    assert!(out.output.data().iter().all(|&v| v == 0.5));
}

#[test]
fn one_unit_toy_network() {
    let arch = Architecture {
        hidden: vec![1],
        batchnorm: false,
        aux_heads: false,
    };
    let mut p = NetworkParams::zeros(ModelKind::Vanilla, arch, 1).unwrap();
    p.hidden[0].linear.weight = Tensor::scalar(1.0);
    p.head.weight = Tensor::scalar(1.0);
    let t = p.forward(&Tensor::scalar(2.0), Mode::Eval).unwrap();
    assert_eq!(t.hidden[0].item(), 2.0);
    assert!((t.output.item() - 0.880797).abs() < 1e-6);
}

#[test]
fn larar_trace_has_two_layers_and_aux_outputs() {
    let p = trained_like(ModelKind::Larar, 6, 3);
    let t = p.forward(&random_input(10, 6, 4), Mode::Eval).unwrap();
    assert_eq!(t.len(), 2);
    assert_eq!(t.aux.len(), 2);
    for v in t.output.data().iter().chain(t.aux.iter().flat_map(|a| a.data())) {
        assert!(*v > 0.0 && *v < 1.0);
    }
}

#[test]
fn eval_forward_is_pure() {
    let p = trained_like(ModelKind::Larar, 5, 8);
    let x = random_input(20, 5, 9);
    let a = p.forward(&x, Mode::Eval).unwrap();
    let b = p.forward(&x, Mode::Eval).unwrap();
    assert_eq!(a, b);
    let copy = p.forward(&x.clone(), Mode::Eval).unwrap();
    for (l, r) in a.hidden.iter().zip(&copy.hidden) {
        assert_eq!(l.data(), r.data());
    }
}

#[test]
fn eval_without_running_stats_is_an_error() {
    let p = NetworkParams::init(ModelKind::Larar, 3, 0).unwrap();
    let err = p.forward(&random_input(2, 3, 0), Mode::Eval).unwrap_err();
    assert!(matches!(err, LararError::Engine(AutodiffError::CalibrationMissing)));
}

#[test]
fn wrong_input_width_is_an_error() {
    let p = NetworkParams::init(ModelKind::Vanilla, 3, 0).unwrap();
    let err = p.forward(&random_input(2, 4, 0), Mode::Eval).unwrap_err();
    assert!(matches!(err, LararError::DimensionMismatch { expected: 3, got: 4 }));
}

fn spectral_norm(w: &Tensor) -> f64 {
    // Power iteration on WᵀW until the eigen-residual is below 1e-8.
    let wtw = w.transpose().matmul(w).unwrap();
    let n = wtw.rows();
    let mut v = Tensor::from_vec(n, 1, (0..n).map(|i| 1.0 + i as f64 * 0.01).collect()).unwrap();
    for _ in 0..100_000 {
        let norm = v.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        v = v.map(|x| x / norm);
        let av = wtw.matmul(&v).unwrap();
        let lambda: f64 = av.data().iter().zip(v.data()).map(|(a, b)| a * b).sum();
        let residual = av
            .data()
            .iter()
            .zip(v.data())
            .map(|(a, b)| (a - lambda * b).powi(2))
            .sum::<f64>()
            .sqrt();
        if residual < 1e-8 {
            return lambda.sqrt();
        }
        v = av;
    }
    panic!("power iteration did not converge");
}

fn diff_norm(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

#[test]
fn layer_shift_is_bounded_by_spectral_norm() {
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let arch = Architecture {
            hidden: vec![rng.gen_range(2..8), rng.gen_range(2..8)],
            batchnorm: false,
            aux_heads: false,
        };
        let d = rng.gen_range(2..6);
        let mut p = NetworkParams::init_with(ModelKind::Vanilla, arch, d, seed).unwrap();
        for layer in &mut p.hidden {
            for b in layer.linear.bias.data_mut() {
                *b = rng.gen_range(-0.5..0.5);
            }
        }
        let x = random_input(8, d, seed + 1000);
        let delta = random_input(8, d, seed + 2000).map(|v| v * 0.1);
        let x_adv = x.zip_map(&delta, |a, b| a + b);
        let clean = p.forward(&x, Mode::Eval).unwrap();
        let adv = p.forward(&x_adv, Mode::Eval).unwrap();
        for (l, layer) in p.hidden.iter().enumerate() {
            let sigma = spectral_norm(&layer.linear.weight);
            let (prev_c, prev_a) = if l == 0 {
                (&clean.input, &adv.input)
            } else {
                (&clean.hidden[l - 1], &adv.hidden[l - 1])
            };
            for i in 0..x.rows() {
                let lhs = diff_norm(clean.hidden[l].row(i), adv.hidden[l].row(i));
                let rhs = sigma * diff_norm(prev_c.row(i), prev_a.row(i));
                assert!(lhs <= rhs * (1.0 + 1e-9) + 1e-12, "seed {seed} layer {l}: {lhs} > {rhs}");
            }
        }
    }
}

#[test]
fn identical_inputs_give_identical_traces() {
    let p = trained_like(ModelKind::Larar, 4, 2);
    let x = random_input(6, 4, 5);
    let a = p.forward(&x, Mode::Eval).unwrap();
    let b = p.forward(&x.clone(), Mode::Eval).unwrap();
    assert_eq!(a.hidden, b.hidden);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.larar");
    let mut p = trained_like(ModelKind::Larar, 7, 21);
    p.layer_weights = Tensor::row_vector(&[-19.286, 0.1 + 0.2]);
    save_checkpoint(&p, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, p);
    for ((_, a), (_, b)) in back.tensors().into_iter().zip(p.tensors()) {
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn flipped_magic_is_corrupt() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.larar");
    save_checkpoint(&trained_like(ModelKind::BaseAdvnn, 3, 1), &path).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[2] ^= 0x20;
    std::fs::write(&path, bytes).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(LararError::CorruptFile(_))));
}

#[test]
fn vanilla_checkpoint_loaded_as_larar_is_shape_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("vanilla.larar");
    save_checkpoint(&NetworkParams::init(ModelKind::Vanilla, 5, 0).unwrap(), &path).unwrap();
    let err = Checkpoint::load(&path, Some(ModelKind::Larar)).unwrap_err();
    assert!(matches!(err, LararError::ShapeMismatch(_)), "{err}");
    assert!(Checkpoint::load(&path, Some(ModelKind::Vanilla)).is_ok());
}

#[test]
fn missing_file_is_io_error() {
    let err = load_checkpoint(std::path::Path::new("/nonexistent/model.larar")).unwrap_err();
    assert!(matches!(err, LararError::Io { .. }));
}
