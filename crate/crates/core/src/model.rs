//! Fixed-depth MLPs: the layer-weighted network with auxiliary heads and the
//! two baselines.

use std::fmt;
use std::str::FromStr;

use larar_autodiff::nn::{batchnorm_eval, batchnorm_train, BatchStats, RunningStats};
use larar_autodiff::{Graph, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{LararError, Result};

/// Rows per chunk when running plain inference over large matrices.
pub const EVAL_CHUNK: usize = 2048;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Vanilla,
    BaseAdvnn,
    Larar,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Vanilla, ModelKind::BaseAdvnn, ModelKind::Larar];

    pub fn architecture(self) -> Architecture {
        match self {
            ModelKind::Vanilla => Architecture {
                hidden: vec![256, 128],
                batchnorm: false,
                aux_heads: false,
            },
            ModelKind::BaseAdvnn => Architecture {
                hidden: vec![128, 64],
                batchnorm: true,
                aux_heads: false,
            },
            ModelKind::Larar => Architecture {
                hidden: vec![128, 64],
                batchnorm: true,
                aux_heads: true,
            },
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Vanilla => "vanilla",
            ModelKind::BaseAdvnn => "base-advnn",
            ModelKind::Larar => "larar",
        }
    }

    /// Display name used in report tables.
    pub fn display_name(self) -> &'static str {
        match self {
            ModelKind::Vanilla => "Vanilla NN",
            ModelKind::BaseAdvnn => "Base ADVNN",
            ModelKind::Larar => "LARAR",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = LararError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "vanilla" => Ok(ModelKind::Vanilla),
            "base-advnn" | "base" | "advnn" => Ok(ModelKind::BaseAdvnn),
            "larar" => Ok(ModelKind::Larar),
            other => Err(LararError::InvalidConfig(format!("unknown model kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub hidden: Vec<usize>,
    pub batchnorm: bool,
    pub aux_heads: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub has_batchnorm: bool,
    pub activation: Activation,
}

impl Architecture {
    /// Hidden layers followed by the output head.
    pub fn layer_specs(&self, input_dim: usize) -> Vec<LayerSpec> {
        let mut specs = Vec::with_capacity(self.hidden.len() + 1);
        let mut prev = input_dim;
        for &d in &self.hidden {
            specs.push(LayerSpec {
                in_dim: prev,
                out_dim: d,
                has_batchnorm: self.batchnorm,
                activation: Activation::Relu,
            });
            prev = d;
        }
        specs.push(LayerSpec {
            in_dim: prev,
            out_dim: 1,
            has_batchnorm: false,
            activation: Activation::None,
        });
        specs
    }

    fn validate(&self, input_dim: usize) -> Result<()> {
        if input_dim == 0 || self.hidden.contains(&0) {
            return Err(LararError::InvalidConfig("layer dimensions must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: Tensor::zeros(in_dim, out_dim),
            bias: Tensor::zeros(1, out_dim),
        }
    }

    fn he(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0, (2.0 / in_dim as f64).sqrt()).expect("positive std");
        let data = (0..in_dim * out_dim).map(|_| normal.sample(rng)).collect();
        Self {
            weight: Tensor::from_vec(in_dim, out_dim, data).expect("sized buffer"),
            bias: Tensor::zeros(1, out_dim),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running: Option<RunningStats>,
}

impl BatchNorm {
    fn new(dim: usize) -> Self {
        Self {
            gamma: Tensor::ones(1, dim),
            beta: Tensor::zeros(1, dim),
            running: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HiddenLayer {
    pub linear: Linear,
    pub batchnorm: Option<BatchNorm>,
}

/// Identifies one trainable tensor inside [`NetworkParams`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamSlot {
    Weight(usize),
    Bias(usize),
    Gamma(usize),
    Beta(usize),
    HeadWeight,
    HeadBias,
    AuxWeight(usize),
    AuxBias(usize),
    LayerWeights,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams {
    pub kind: ModelKind,
    pub arch: Architecture,
    pub input_dim: usize,
    pub hidden: Vec<HiddenLayer>,
    pub head: Linear,
    pub aux: Vec<Linear>,
    /// `1 x L` row of learnable layer weights.
    pub layer_weights: Tensor,
}

impl NetworkParams {
    /// He-initialized network for one of the fixed kinds.
    pub fn init(kind: ModelKind, input_dim: usize, seed: u64) -> Result<Self> {
        Self::init_with(kind, kind.architecture(), input_dim, seed)
    }

    /// He-initialized network with an explicit architecture; used for
    /// miniature and toy networks.
    pub fn init_with(kind: ModelKind, arch: Architecture, input_dim: usize, seed: u64) -> Result<Self> {
        arch.validate(input_dim)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self::build(kind, arch, input_dim, |i, o| Linear::he(i, o, &mut rng)))
    }

    /// Every weight and bias zero, batchnorm at identity affine.
    pub fn zeros(kind: ModelKind, arch: Architecture, input_dim: usize) -> Result<Self> {
        arch.validate(input_dim)?;
        Ok(Self::build(kind, arch, input_dim, Linear::zeros))
    }

    fn build(
        kind: ModelKind,
        arch: Architecture,
        input_dim: usize,
        mut make: impl FnMut(usize, usize) -> Linear,
    ) -> Self {
        let specs = arch.layer_specs(input_dim);
        let (head_spec, hidden_specs) = specs.split_last().expect("head always present");
        let hidden: Vec<HiddenLayer> = hidden_specs
            .iter()
            .map(|s| HiddenLayer {
                linear: make(s.in_dim, s.out_dim),
                batchnorm: s.has_batchnorm.then(|| BatchNorm::new(s.out_dim)),
            })
            .collect();
        let head = make(head_spec.in_dim, 1);
        let aux = if arch.aux_heads {
            arch.hidden.iter().map(|&d| make(d, 1)).collect()
        } else {
            Vec::new()
        };
        let layer_weights = Tensor::ones(1, arch.hidden.len());
        Self {
            kind,
            arch,
            input_dim,
            hidden,
            head,
            aux,
            layer_weights,
        }
    }

    pub fn num_hidden(&self) -> usize {
        self.hidden.len()
    }

    pub fn has_aux(&self) -> bool {
        !self.aux.is_empty()
    }

    pub fn layer_weights(&self) -> &[f64] {
        self.layer_weights.data()
    }

    /// Trainable tensors in a fixed order.
    pub fn tensors(&self) -> Vec<(ParamSlot, &Tensor)> {
        let mut out = Vec::new();
        for (l, layer) in self.hidden.iter().enumerate() {
            out.push((ParamSlot::Weight(l), &layer.linear.weight));
            out.push((ParamSlot::Bias(l), &layer.linear.bias));
            if let Some(bn) = &layer.batchnorm {
                out.push((ParamSlot::Gamma(l), &bn.gamma));
                out.push((ParamSlot::Beta(l), &bn.beta));
            }
        }
        out.push((ParamSlot::HeadWeight, &self.head.weight));
        out.push((ParamSlot::HeadBias, &self.head.bias));
        for (l, a) in self.aux.iter().enumerate() {
            out.push((ParamSlot::AuxWeight(l), &a.weight));
            out.push((ParamSlot::AuxBias(l), &a.bias));
        }
        out.push((ParamSlot::LayerWeights, &self.layer_weights));
        out
    }

    /// Mutable view in the same order as [`tensors`](Self::tensors).
    pub fn tensors_mut(&mut self) -> Vec<(ParamSlot, &mut Tensor)> {
        let mut out = Vec::new();
        for (l, layer) in self.hidden.iter_mut().enumerate() {
            out.push((ParamSlot::Weight(l), &mut layer.linear.weight));
            out.push((ParamSlot::Bias(l), &mut layer.linear.bias));
            if let Some(bn) = &mut layer.batchnorm {
                out.push((ParamSlot::Gamma(l), &mut bn.gamma));
                out.push((ParamSlot::Beta(l), &mut bn.beta));
            }
        }
        out.push((ParamSlot::HeadWeight, &mut self.head.weight));
        out.push((ParamSlot::HeadBias, &mut self.head.bias));
        for (l, a) in self.aux.iter_mut().enumerate() {
            out.push((ParamSlot::AuxWeight(l), &mut a.weight));
            out.push((ParamSlot::AuxBias(l), &mut a.bias));
        }
        out.push((ParamSlot::LayerWeights, &mut self.layer_weights));
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Places every trainable tensor on `graph`, as leaves when `trainable`.
    pub fn bind<'g>(&self, graph: &'g Graph, trainable: bool) -> BoundParams<'g> {
        let put = |t: &Tensor| {
            if trainable {
                graph.leaf(t.clone())
            } else {
                graph.constant(t.clone())
            }
        };
        let slots: Vec<(ParamSlot, Var<'g>)> = self.tensors().into_iter().map(|(s, t)| (s, put(t))).collect();
        BoundParams { slots }
    }

    /// Folds training-mode batch statistics into the running statistics.
    pub fn absorb_batch_stats(&mut self, stats: &[Option<BatchStats>]) {
        for (layer, s) in self.hidden.iter_mut().zip(stats) {
            if let (Some(bn), Some(s)) = (&mut layer.batchnorm, s) {
                bn.running = Some(RunningStats::update(bn.running.as_ref(), s));
            }
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.cols() != self.input_dim {
            return Err(LararError::DimensionMismatch {
                expected: self.input_dim,
                got: x.cols(),
            });
        }
        Ok(())
    }

    /// Differentiable forward pass on an existing graph.
    pub fn forward_graph<'g>(&self, bound: &BoundParams<'g>, x: Var<'g>, mode: Mode) -> Result<GraphTrace<'g>> {
        if x.shape()[1] != self.input_dim {
            return Err(LararError::DimensionMismatch {
                expected: self.input_dim,
                got: x.shape()[1],
            });
        }
        let mut h = x;
        let mut hidden = Vec::with_capacity(self.hidden.len());
        let mut stats = Vec::with_capacity(self.hidden.len());
        for (l, layer) in self.hidden.iter().enumerate() {
            let z = h.matmul(bound.get(ParamSlot::Weight(l)))?.add_row(bound.get(ParamSlot::Bias(l)))?;
            let (z, s) = match &layer.batchnorm {
                None => (z, None),
                Some(bn) => {
                    let gamma = bound.get(ParamSlot::Gamma(l));
                    let beta = bound.get(ParamSlot::Beta(l));
                    match mode {
                        Mode::Train => {
                            let (out, s) = batchnorm_train(z, gamma, beta)?;
                            (out, Some(s))
                        }
                        Mode::Eval => (batchnorm_eval(z, gamma, beta, bn.running.as_ref())?, None),
                    }
                }
            };
            h = z.relu()?;
            hidden.push(h);
            stats.push(s);
        }
        let logits = h
            .matmul(bound.get(ParamSlot::HeadWeight))?
            .add_row(bound.get(ParamSlot::HeadBias))?;
        let prob = logits.sigmoid()?;
        let mut aux_logits = Vec::with_capacity(self.aux.len());
        let mut aux_prob = Vec::with_capacity(self.aux.len());
        for (l, &h_l) in hidden.iter().enumerate().take(self.aux.len()) {
            let z = h_l
                .matmul(bound.get(ParamSlot::AuxWeight(l)))?
                .add_row(bound.get(ParamSlot::AuxBias(l)))?;
            aux_prob.push(z.sigmoid()?);
            aux_logits.push(z);
        }
        Ok(GraphTrace {
            input: x,
            hidden,
            logits,
            prob,
            aux_logits,
            aux_prob,
            batch_stats: stats,
        })
    }

    /// Plain forward pass with every activation captured.
    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<ForwardTrace> {
        self.check_input(x)?;
        let g = Graph::new();
        let bound = self.bind(&g, false);
        let xv = g.constant(x.clone());
        Ok(self.forward_graph(&bound, xv, mode)?.detach())
    }

    /// Eval-mode output probabilities, computed in row chunks.
    pub fn predict_proba(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut parts = Vec::new();
        let mut start = 0;
        while start < x.rows() {
            let end = (start + EVAL_CHUNK).min(x.rows());
            parts.push(self.forward(&x.slice_rows(start, end), Mode::Eval)?.output);
            start = end;
        }
        if parts.is_empty() {
            return Ok(Tensor::zeros(0, 1));
        }
        Ok(Tensor::vstack(&parts)?)
    }

    /// Eval-mode hard labels, `1` when the output probability is at least one half.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<u8>> {
        Ok(self
            .predict_proba(x)?
            .data()
            .iter()
            .map(|&p| u8::from(p >= 0.5))
            .collect())
    }
}

/// Trainable tensors bound to graph variables, indexed by [`ParamSlot`].
pub struct BoundParams<'g> {
    pub slots: Vec<(ParamSlot, Var<'g>)>,
}

impl<'g> BoundParams<'g> {
    pub fn get(&self, slot: ParamSlot) -> Var<'g> {
        self.slots
            .iter()
            .find(|(s, _)| *s == slot)
            .map(|(_, v)| *v)
            .unwrap_or_else(|| panic!("parameter {slot:?} not bound"))
    }

    pub fn vars(&self) -> Vec<Var<'g>> {
        self.slots.iter().map(|(_, v)| *v).collect()
    }
}

/// Forward activations as graph variables.
#[derive(Clone)]
pub struct GraphTrace<'g> {
    pub input: Var<'g>,
    pub hidden: Vec<Var<'g>>,
    pub logits: Var<'g>,
    pub prob: Var<'g>,
    pub aux_logits: Vec<Var<'g>>,
    pub aux_prob: Vec<Var<'g>>,
    pub batch_stats: Vec<Option<BatchStats>>,
}

impl<'g> GraphTrace<'g> {
    /// Last hidden activation, or the input for a network without hidden layers.
    pub fn final_hidden(&self) -> Var<'g> {
        self.hidden.last().copied().unwrap_or(self.input)
    }

    pub fn detach(&self) -> ForwardTrace {
        ForwardTrace {
            input: self.input.value(),
            hidden: self.hidden.iter().map(|v| v.value()).collect(),
            logits: self.logits.value(),
            output: self.prob.value(),
            aux_logits: self.aux_logits.iter().map(|v| v.value()).collect(),
            aux: self.aux_prob.iter().map(|v| v.value()).collect(),
            batch_stats: self.batch_stats.clone(),
        }
    }
}

/// Activations captured during one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    pub input: Tensor,
    /// Post-activation `h^(l)` for each hidden layer.
    pub hidden: Vec<Tensor>,
    pub logits: Tensor,
    pub output: Tensor,
    pub aux_logits: Vec<Tensor>,
    pub aux: Vec<Tensor>,
    pub batch_stats: Vec<Option<BatchStats>>,
}

impl ForwardTrace {
    pub fn final_hidden(&self) -> &Tensor {
        self.hidden.last().unwrap_or(&self.input)
    }

    pub fn len(&self) -> usize {
        self.hidden.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hidden.is_empty()
    }
}
