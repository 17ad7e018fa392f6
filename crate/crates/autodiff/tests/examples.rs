use larar_autodiff::nn::{batchnorm_eval, bce_mean, bce_value};
use larar_autodiff::{AutodiffError, Graph, Tensor};

#[test]
fn relu_and_sigmoid_values() {
    let g = Graph::new();
    let x = g.constant(Tensor::row_vector(&[-1.0, 0.0, 2.0]));
    assert_eq!(x.relu().unwrap().value().data(), &[0.0, 0.0, 2.0]);
    let z = g.constant(Tensor::scalar(0.0));
    assert_eq!(z.sigmoid().unwrap().value().item(), 0.5);
}

#[test]
fn matmul_of_ones() {
    let g = Graph::new();
    let a = g.constant(Tensor::ones(2, 3));
    let b = g.constant(Tensor::ones(3, 1));
    let c = a.matmul(b).unwrap();
    assert_eq!(c.shape(), [2, 1]);
    assert_eq!(c.value().data(), &[3.0, 3.0]);
}

#[test]
fn shape_mismatch_names_op_and_shapes() {
    let g = Graph::new();
    let a = g.constant(Tensor::ones(2, 3));
    let b = g.constant(Tensor::ones(2, 3));
    let err = a.matmul(b).unwrap_err();
    assert_eq!(
        err,
        AutodiffError::ShapeMismatch {
            op: "matmul",
            lhs: [2, 3],
            rhs: [2, 3]
        }
    );
    assert!(err.to_string().contains("matmul"));
}

#[test]
fn sum_of_squares_gradient() {
    let g = Graph::new();
    let x = g.leaf(Tensor::row_vector(&[1.0, 2.0, 3.0]));
    let root = x.square().unwrap().sum().unwrap();
    let grads = g.backward(root, None).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
}

#[test]
fn logistic_input_gradient_closed_form() {
    // (σ(z) − y)·w with w = 1, b = 0, x = 0, y = 1.
    let g = Graph::new();
    let x = g.leaf(Tensor::scalar(0.0));
    let w = g.constant(Tensor::scalar(1.0));
    let b = g.constant(Tensor::scalar(0.0));
    let p = x.matmul(w).unwrap().add_row(b).unwrap().sigmoid().unwrap();
    let loss = bce_mean(p, &Tensor::scalar(1.0)).unwrap();
    let grads = g.backward(loss, None).unwrap();
    let dx = grads.get(x).unwrap().item();
    assert!((dx + 0.5).abs() < 1e-12);

    let h = 1e-5;
    let fd = (bce_value(larar_autodiff::sigmoid(h), 1.0) - bce_value(larar_autodiff::sigmoid(-h), 1.0)) / (2.0 * h);
    assert!((dx - fd).abs() < 1e-8);
}

#[test]
fn unreachable_leaf_is_absent() {
    let g = Graph::new();
    let x = g.leaf(Tensor::scalar(2.0));
    let unused = g.leaf(Tensor::scalar(5.0));
    let root = x.square().unwrap();
    let grads = g.backward(root, None).unwrap();
    assert!(grads.contains(x));
    assert!(!grads.contains(unused));
    assert_eq!(grads.get_or_zeros(unused).data(), &[0.0]);
}

#[test]
fn cubic_second_derivative() {
    let g = Graph::new();
    let x = g.leaf(Tensor::scalar(2.0));
    let f = x.square().unwrap().mul(x).unwrap();
    let out = g.grad_of_grad(f, x, &[x], |dfdx| Ok(dfdx)).unwrap();
    assert_eq!(out.get(x).unwrap().item(), 12.0);
}

#[test]
fn gradient_norm_of_quadratic() {
    // f = ½ xᵀAx, A = diag(2, 4), x = (1, 1): ∇f = (2, 4), ‖∇f‖² = 20,
    // ∂/∂x ‖∇f‖² = 2Aᵀ∇f = (8, 32).
    let g = Graph::new();
    let x = g.leaf(Tensor::column(&[1.0, 1.0]));
    let a = g.constant(Tensor::from_rows(&[[2.0, 0.0], [0.0, 4.0]]).unwrap());
    let f = x.t().unwrap().matmul(a.matmul(x).unwrap()).unwrap().scale(0.5).unwrap();
    let grad = g.grad(f, &[x], None).unwrap()[0].unwrap();
    assert_eq!(grad.value().data(), &[2.0, 4.0]);
    let objective = grad.square().unwrap().sum().unwrap();
    assert_eq!(objective.value().item(), 20.0);
    let outer = g.backward(objective, None).unwrap();
    assert_eq!(outer.get(x).unwrap().data(), &[8.0, 32.0]);

    let via_helper = g
        .grad_of_grad(f, x, &[x], |gx| gx.square()?.sum())
        .unwrap();
    assert_eq!(via_helper.get(x).unwrap().data(), &[8.0, 32.0]);
}

#[test]
fn identical_inputs_give_zero_alignment_penalty() {
    // ‖∇ₓL(x) − ∇ₓL(x')‖² with x' = x: value and parameter gradient vanish.
    let g = Graph::new();
    let w = g.leaf(Tensor::column(&[0.7, -1.3]));
    let x = g.leaf(Tensor::from_rows(&[[0.2, 0.4], [1.0, -0.5]]).unwrap());
    let x_adv = g.leaf(x.value());
    let y = Tensor::column(&[1.0, 0.0]);
    let loss_c = larar_autodiff::nn::bce_sum(x.matmul(w).unwrap().sigmoid().unwrap(), &y).unwrap();
    let loss_a = larar_autodiff::nn::bce_sum(x_adv.matmul(w).unwrap().sigmoid().unwrap(), &y).unwrap();
    let gc = g.grad(loss_c, &[x], None).unwrap()[0].unwrap();
    let ga = g.grad(loss_a, &[x_adv], None).unwrap()[0].unwrap();
    let pen = gc.sub(ga).unwrap().square().unwrap().sum().unwrap();
    assert_eq!(pen.value().item(), 0.0);
    let grads = g.backward(pen, None).unwrap();
    assert!(grads.get(w).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn stale_graph_is_detected() {
    let g = Graph::new();
    let x = g.leaf(Tensor::scalar(3.0));
    let y = x.square().unwrap();
    g.set_value(x, Tensor::scalar(4.0)).unwrap();
    assert!(matches!(g.backward(y, None), Err(AutodiffError::StaleGraph { .. })));
    // A fresh expression on the new value is fine.
    let z = x.square().unwrap();
    assert_eq!(g.backward(z, None).unwrap().get(x).unwrap().item(), 8.0);
}

#[test]
fn non_scalar_root_needs_seed() {
    let g = Graph::new();
    let x = g.leaf(Tensor::row_vector(&[1.0, 2.0]));
    let y = x.square().unwrap();
    assert!(matches!(g.backward(y, None), Err(AutodiffError::NonScalarRoot { .. })));
    let grads = g.backward(y, Some(Tensor::row_vector(&[1.0, 1.0]))).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn non_finite_values_are_errors() {
    let g = Graph::new();
    let x = g.constant(Tensor::scalar(0.0));
    assert_eq!(x.ln().unwrap_err(), AutodiffError::NonFinite { op: "log" });
}

#[test]
fn batchnorm_eval_requires_running_stats() {
    let g = Graph::new();
    let x = g.constant(Tensor::ones(2, 3));
    let gamma = g.constant(Tensor::ones(1, 3));
    let beta = g.constant(Tensor::zeros(1, 3));
    assert_eq!(
        batchnorm_eval(x, gamma, beta, None).unwrap_err(),
        AutodiffError::CalibrationMissing
    );
}

#[test]
fn foreign_variables_are_rejected() {
    let g1 = Graph::new();
    let g2 = Graph::new();
    let a = g1.constant(Tensor::scalar(1.0));
    let b = g2.constant(Tensor::scalar(1.0));
    assert_eq!(a.add(b).unwrap_err(), AutodiffError::ForeignVariable);
}
