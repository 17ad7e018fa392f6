//! Reverse sweeps over the tape.
//!
//! Two sweeps implement the same derivative rules. [`Graph::backward`] works
//! on plain tensors and is what optimizers and attacks use. [`Graph::grad`]
//! records every vector-Jacobian product as new nodes, so the returned
//! gradients can themselves be differentiated.

use std::collections::HashMap;

use crate::error::{AutodiffError, Result};
use crate::graph::{Graph, Node, NodeId, Op, Var};
use crate::tensor::Tensor;

/// Accumulated gradients keyed by leaf.
#[derive(Clone, Debug, Default)]
pub struct GradMap {
    grads: HashMap<NodeId, Tensor>,
}

impl GradMap {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(&var.id)
    }

    pub fn get_id(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    /// The gradient for `var`, or zeros of its shape if it was unreachable.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Tensor {
        self.get(var).cloned().unwrap_or_else(|| {
            let [r, c] = var.shape();
            Tensor::zeros(r, c)
        })
    }

    pub fn contains(&self, var: Var<'_>) -> bool {
        self.grads.contains_key(&var.id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

/// Marks the nodes that lie on a differentiable path into `root` and checks
/// that none of them was recorded against an outdated input.
fn reachable(nodes: &[Node], root: usize) -> Result<Vec<bool>> {
    let mut needed = vec![false; root + 1];
    needed[root] = nodes[root].requires_grad;
    for i in (0..=root).rev() {
        if !needed[i] {
            continue;
        }
        let node = &nodes[i];
        for (inp, ver) in node.inputs.iter().zip(&node.input_versions) {
            if nodes[inp.0].version != *ver {
                return Err(AutodiffError::StaleGraph { node: i });
            }
            if nodes[inp.0].requires_grad {
                needed[inp.0] = true;
            }
        }
    }
    Ok(needed)
}

/// Numeric vector-Jacobian product of one node.
fn vjp_numeric(node: &Node, inputs: &[&Tensor], g: &Tensor) -> Vec<Tensor> {
    let out = &node.value;
    match &node.op {
        Op::Leaf | Op::Constant => Vec::new(),
        Op::MatMul => vec![
            g.matmul(&inputs[1].transpose()).expect("shapes checked forward"),
            inputs[0].transpose().matmul(g).expect("shapes checked forward"),
        ],
        Op::Transpose => vec![g.transpose()],
        Op::Add => vec![g.clone(), g.clone()],
        Op::Sub => vec![g.clone(), g.map(|v| -v)],
        Op::Mul => vec![g.zip_map(inputs[1], |g, b| g * b), g.zip_map(inputs[0], |g, a| g * a)],
        Op::Div => {
            let ga = g.zip_map(inputs[1], |g, b| g / b);
            let gb = g.zip_map(out, |g, o| g * o).zip_map(inputs[1], |t, b| -t / b);
            vec![ga, gb]
        }
        Op::AddRow => vec![g.clone(), g.sum_rows()],
        Op::BroadcastRows(_) => vec![g.sum_rows()],
        Op::BroadcastCols(_) => vec![g.sum_cols()],
        Op::Expand(..) => vec![Tensor::scalar(g.sum())],
        Op::SumRows => vec![g.broadcast_rows(inputs[0].rows())],
        Op::SumCols => vec![g.broadcast_cols(inputs[0].cols())],
        Op::Sum => {
            let [r, c] = inputs[0].shape();
            vec![Tensor::full(r, c, g.item())]
        }
        Op::Scale(c) => vec![g.map(|v| v * c)],
        Op::AddScalar(_) => vec![g.clone()],
        Op::Relu => vec![g.zip_map(inputs[0], |g, a| if a > 0.0 { g } else { 0.0 })],
        Op::Sigmoid => vec![g.zip_map(out, |g, s| g * s * (1.0 - s))],
        Op::Square => vec![g.zip_map(inputs[0], |g, a| 2.0 * a * g)],
        Op::Sqrt => vec![g.zip_map(out, |g, r| g / (2.0 * r))],
        Op::Log => vec![g.zip_map(inputs[0], |g, a| g / a)],
        Op::Clamp(lo, hi) => vec![g.zip_map(inputs[0], |g, a| {
            if a >= *lo && a <= *hi {
                g
            } else {
                0.0
            }
        })],
        Op::RowNorm => {
            let a = inputs[0];
            let scale = g.zip_map(out, |g, n| if n > 0.0 { g / n } else { 0.0 });
            vec![scale.broadcast_cols(a.cols()).zip_map(a, |s, a| s * a)]
        }
        Op::SafeRecip => vec![g.zip_map(out, |g, r| -g * r * r)],
        Op::Abs => vec![g.zip_map(inputs[0], |g, a| g * sign(a))],
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Vector-Jacobian product recorded as graph operations.
fn vjp_graph<'g>(
    graph: &'g Graph,
    op: &Op,
    inputs: &[Var<'g>],
    out: Var<'g>,
    g: Var<'g>,
) -> Result<Vec<Var<'g>>> {
    Ok(match op {
        Op::Leaf | Op::Constant => Vec::new(),
        Op::MatMul => vec![g.matmul(inputs[1].t()?)?, inputs[0].t()?.matmul(g)?],
        Op::Transpose => vec![g.t()?],
        Op::Add => vec![g, g],
        Op::Sub => vec![g, g.neg()?],
        Op::Mul => vec![g.mul(inputs[1])?, g.mul(inputs[0])?],
        Op::Div => vec![g.div(inputs[1])?, g.mul(out)?.div(inputs[1])?.neg()?],
        Op::AddRow => vec![g, g.sum_rows()?],
        Op::BroadcastRows(_) => vec![g.sum_rows()?],
        Op::BroadcastCols(_) => vec![g.sum_cols()?],
        Op::Expand(..) => vec![g.sum()?],
        Op::SumRows => vec![g.broadcast_rows(inputs[0].shape()[0])?],
        Op::SumCols => vec![g.broadcast_cols(inputs[0].shape()[1])?],
        Op::Sum => {
            let [r, c] = inputs[0].shape();
            vec![g.expand(r, c)?]
        }
        Op::Scale(c) => vec![g.scale(*c)?],
        Op::AddScalar(_) => vec![g],
        Op::Relu => {
            // Second derivative of relu is zero almost everywhere; the mask is
            // a constant and the kink at zero takes subgradient 0.
            let mask = inputs[0].with_value(|v| v.map(|a| if a > 0.0 { 1.0 } else { 0.0 }));
            vec![g.mul(graph.constant(mask))?]
        }
        Op::Sigmoid => {
            let one_minus = out.neg()?.add_scalar(1.0)?;
            vec![g.mul(out.mul(one_minus)?)?]
        }
        Op::Square => vec![g.mul(inputs[0].scale(2.0)?)?],
        Op::Sqrt => vec![g.div(out.scale(2.0)?)?],
        Op::Log => vec![g.div(inputs[0])?],
        Op::Clamp(lo, hi) => {
            let mask =
                inputs[0].with_value(|v| v.map(|a| if a >= *lo && a <= *hi { 1.0 } else { 0.0 }));
            vec![g.mul(graph.constant(mask))?]
        }
        Op::RowNorm => {
            let cols = inputs[0].shape()[1];
            let scale = g.mul(out.safe_recip()?)?.broadcast_cols(cols)?;
            vec![scale.mul(inputs[0])?]
        }
        Op::SafeRecip => vec![g.mul(out.square()?)?.neg()?],
        Op::Abs => {
            return Err(AutodiffError::UnsupportedSecondOrder { op: op.name() });
        }
    })
}

impl Graph {
    /// Reverse sweep from `root`.
    ///
    /// Without a seed the root must be `1 x 1` and is seeded with one. The
    /// result holds a gradient for every leaf that reaches `root` through
    /// differentiable nodes.
    pub fn backward(&self, root: Var<'_>, seed: Option<Tensor>) -> Result<GradMap> {
        self.check(root)?;
        let nodes = self.nodes.borrow();
        let r = root.id.0;
        let seed = seed_for(&nodes[r].value, seed)?;
        let needed = reachable(&nodes, r)?;

        let mut grads: Vec<Option<Tensor>> = vec![None; r + 1];
        grads[r] = Some(seed);
        let mut out = GradMap::default();
        for i in (0..=r).rev() {
            if !needed[i] {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if node.op == Op::Leaf {
                out.grads.insert(NodeId(i), g);
                continue;
            }
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|j| &nodes[j.0].value).collect();
            let partials = vjp_numeric(node, &inputs, &g);
            for (inp, part) in node.inputs.iter().zip(partials) {
                if nodes[inp.0].requires_grad {
                    accumulate(&mut grads[inp.0], part);
                }
            }
        }
        for (id, g) in &out.grads {
            if !g.is_finite() {
                return Err(AutodiffError::NonFinite { op: nodes[id.0].op.name() });
            }
        }
        Ok(out)
    }

    /// Gradients of `root` with respect to `wrt`, recorded as graph nodes.
    ///
    /// Every derivative is built from ordinary operations, so the returned
    /// variables can be differentiated again. `None` marks a variable that
    /// does not reach `root`. Fails with `UnsupportedSecondOrder` if the path
    /// crosses an op without a recorded derivative rule.
    pub fn grad<'g>(
        &'g self,
        root: Var<'g>,
        wrt: &[Var<'g>],
        seed: Option<Var<'g>>,
    ) -> Result<Vec<Option<Var<'g>>>> {
        self.check(root)?;
        for w in wrt {
            self.check(*w)?;
        }
        let r = root.id.0;
        let (needed, plan) = {
            let nodes = self.nodes.borrow();
            let needed = reachable(&nodes, r)?;
            let plan: Vec<(Op, Vec<NodeId>, Vec<bool>)> = (0..=r)
                .map(|i| {
                    let n = &nodes[i];
                    let flags = n.inputs.iter().map(|j| nodes[j.0].requires_grad).collect();
                    (n.op.clone(), n.inputs.clone(), flags)
                })
                .collect();
            (needed, plan)
        };

        let seed = match seed {
            Some(s) => {
                self.check(s)?;
                if s.shape() != root.shape() {
                    return Err(AutodiffError::ShapeMismatch {
                        op: "grad seed",
                        lhs: root.shape(),
                        rhs: s.shape(),
                    });
                }
                s
            }
            None => {
                let shape = root.shape();
                if shape != [1, 1] {
                    return Err(AutodiffError::NonScalarRoot { shape });
                }
                self.constant(Tensor::scalar(1.0))
            }
        };

        let mut grads: Vec<Option<Var<'g>>> = vec![None; r + 1];
        let mut result: HashMap<NodeId, Var<'g>> = HashMap::new();
        grads[r] = Some(seed);
        let wanted: std::collections::HashSet<NodeId> = wrt.iter().map(|w| w.id).collect();
        for i in (0..=r).rev() {
            if !needed[i] {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if wanted.contains(&NodeId(i)) {
                result.insert(NodeId(i), g);
            }
            let (op, inputs, flags) = &plan[i];
            if matches!(op, Op::Leaf | Op::Constant) {
                continue;
            }
            let input_vars: Vec<Var<'g>> = inputs.iter().map(|&id| Var { graph: self, id }).collect();
            let out = Var { graph: self, id: NodeId(i) };
            let partials = vjp_graph(self, op, &input_vars, out, g)?;
            for ((inp, part), flag) in inputs.iter().zip(partials).zip(flags) {
                if !flag {
                    continue;
                }
                let slot = &mut grads[inp.0];
                *slot = Some(match slot.take() {
                    Some(acc) => acc.add(part)?,
                    None => part,
                });
            }
        }
        Ok(wrt.iter().map(|w| result.get(&w.id).copied()).collect())
    }

    /// Second-order helper: differentiates `reduce(∂root/∂inner)` with respect
    /// to each variable in `outer`.
    ///
    /// `reduce` receives the recorded inner gradient and must return a `1 x 1`
    /// expression built from it. Variables in `outer` that do not influence the
    /// reduced value are absent from the result.
    pub fn grad_of_grad<'g, F>(
        &'g self,
        root: Var<'g>,
        inner: Var<'g>,
        outer: &[Var<'g>],
        reduce: F,
    ) -> Result<GradMap>
    where
        F: FnOnce(Var<'g>) -> Result<Var<'g>>,
    {
        let inner_grad = match self.grad(root, &[inner], None)?.pop().flatten() {
            Some(g) => g,
            None => {
                let [r, c] = inner.shape();
                self.constant(Tensor::zeros(r, c))
            }
        };
        let reduced = reduce(inner_grad)?;
        let full = self.backward(reduced, None)?;
        let mut out = GradMap::default();
        for v in outer {
            if let Some(g) = full.get(*v) {
                out.grads.insert(v.id, g.clone());
            }
        }
        Ok(out)
    }
}

fn seed_for(root_value: &Tensor, seed: Option<Tensor>) -> Result<Tensor> {
    match seed {
        Some(s) if s.shape() == root_value.shape() => Ok(s),
        Some(s) => Err(AutodiffError::ShapeMismatch {
            op: "backward seed",
            lhs: root_value.shape(),
            rhs: s.shape(),
        }),
        None if root_value.shape() == [1, 1] => Ok(Tensor::scalar(1.0)),
        None => Err(AutodiffError::NonScalarRoot {
            shape: root_value.shape(),
        }),
    }
}
