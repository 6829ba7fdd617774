//! Neural building blocks.
//!
//! Parameters live in a [`ParamStore`] keyed by stable names; layer structs
//! only describe shapes and know their parameter names. A [`Forward`]
//! context binds parameters into a [`Graph`] on first use, so gradients can
//! be mapped back to names after the backward pass.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    /// Subject to L2 regularization.
    Weight,
    Bias,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub kind: ParamKind,
}

/// All trainable tensors of a model, addressable by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, kind: ParamKind) {
        self.params.insert(name.into(), Param { value, kind });
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::InvalidArgument(format!("no parameter named {name}")))
    }

    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("no parameter named {name}")))?;
        if p.value.shape() != value.shape() {
            return Err(Error::shape("set_param", &[p.value.shape(), value.shape()]));
        }
        p.value = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_values(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// `lambda * sum(w^2)` over weight (non-bias) parameters.
    pub fn l2_penalty(&self, lambda: f64) -> f64 {
        let s: f64 = self
            .params
            .values()
            .filter(|p| p.kind == ParamKind::Weight)
            .map(|p| p.value.data().iter().map(|w| w * w).sum::<f64>())
            .sum();
        lambda * s
    }

    /// All values concatenated in name order.
    pub fn flatten(&self) -> Vec<f64> {
        self.params
            .values()
            .flat_map(|p| p.value.data().iter().copied())
            .collect()
    }
}

/// Graph under construction plus parameter bindings and dropout state.
pub struct Forward<'a> {
    pub graph: Graph,
    store: &'a ParamStore,
    bound: HashMap<String, NodeId>,
    training: bool,
    dropout_rng: Option<ChaCha8Rng>,
}

impl<'a> Forward<'a> {
    /// Inference context: dropout disabled.
    pub fn inference(store: &'a ParamStore) -> Self {
        Forward {
            graph: Graph::new(),
            store,
            bound: HashMap::new(),
            training: false,
            dropout_rng: None,
        }
    }

    /// Training context; dropout masks are drawn from `rng`.
    pub fn training(store: &'a ParamStore, rng: ChaCha8Rng) -> Self {
        Forward {
            graph: Graph::new(),
            store,
            bound: HashMap::new(),
            training: true,
            dropout_rng: Some(rng),
        }
    }

    /// Context whose parameters are already bound to existing graph nodes.
    pub fn with_bindings(
        graph: Graph,
        store: &'a ParamStore,
        bound: HashMap<String, NodeId>,
    ) -> Self {
        Forward {
            graph,
            store,
            bound,
            training: false,
            dropout_rng: None,
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Node for parameter `name`, binding it as a trainable leaf on first use.
    pub fn param(&mut self, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.bound.get(name) {
            return Ok(id);
        }
        let t = self.store.tensor(name)?.clone();
        let id = self.graph.parameter(t);
        self.bound.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn bindings(&self) -> &HashMap<String, NodeId> {
        &self.bound
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.graph.constant(t)
    }

    /// Inverted dropout: identity at inference, otherwise multiplies by a
    /// Bernoulli keep-mask scaled by `1 / (1 - rate)`.
    pub fn dropout(&mut self, x: NodeId, rate: f64) -> Result<NodeId> {
        if !self.training || rate <= 0.0 {
            return Ok(x);
        }
        let shape = self.graph.shape(x).to_vec();
        let rng = self
            .dropout_rng
            .as_mut()
            .expect("training context always carries a dropout rng");
        let keep = 1.0 - rate;
        let n: usize = shape.iter().product();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let m = self.graph.constant(Tensor::new(shape, mask)?);
        self.graph.mul(x, m)
    }

    pub fn into_parts(self) -> (Graph, HashMap<String, NodeId>) {
        (self.graph, self.bound)
    }
}

fn glorot<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize, shape: &[usize]) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// `softplus^-1(0.1)`: free-parameter value giving an effective weight of 0.1.
pub fn positive_init_center() -> f64 {
    (0.1f64.exp() - 1.0).ln()
}

fn positive_init<R: Rng>(rng: &mut R, shape: &[usize]) -> Tensor {
    let c = positive_init_center();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| c + rng.gen_range(-0.1..0.1)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: NodeId) -> NodeId {
        match self {
            Activation::Identity => x,
            Activation::Relu => g.relu(x),
            Activation::Tanh => g.tanh(x),
            Activation::Sigmoid => g.sigmoid(x),
        }
    }
}

/// Embedding lookup table `[vocab, dim]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    pub name: String,
    pub vocab: usize,
    pub dim: usize,
}

impl EmbeddingTable {
    pub fn new(name: impl Into<String>, vocab: usize, dim: usize) -> Self {
        EmbeddingTable {
            name: name.into(),
            vocab,
            dim,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.table", self.name)
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        let t = glorot(rng, self.vocab, self.dim, &[self.vocab, self.dim]);
        store.insert(self.weight_name(), t, ParamKind::Weight);
    }

    pub fn forward(&self, fw: &mut Forward, indices: &[usize]) -> Result<NodeId> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.vocab) {
            return Err(Error::IndexOutOfRange {
                what: format!("embedding {}", self.name),
                index: bad,
                size: self.vocab,
            });
        }
        let table = fw.param(&self.weight_name())?;
        fw.graph.gather_rows(table, indices)
    }
}

/// Affine map `x W + b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub name: String,
    pub input: usize,
    pub output: usize,
}

impl Dense {
    pub fn new(name: impl Into<String>, input: usize, output: usize) -> Self {
        Dense {
            name: name.into(),
            input,
            output,
        }
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        let w = glorot(rng, self.input, self.output, &[self.input, self.output]);
        store.insert(format!("{}.w", self.name), w, ParamKind::Weight);
        store.insert(
            format!("{}.b", self.name),
            Tensor::zeros(&[self.output]),
            ParamKind::Bias,
        );
    }

    pub fn forward(&self, fw: &mut Forward, x: NodeId) -> Result<NodeId> {
        let w = fw.param(&format!("{}.w", self.name))?;
        let b = fw.param(&format!("{}.b", self.name))?;
        let xw = fw.graph.matmul(x, w)?;
        fw.graph.add(xw, b)
    }
}

/// Fully connected tower: hidden layers with activation and dropout, then a
/// linear output layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpTower {
    pub name: String,
    pub input: usize,
    /// Output width of every layer, last one included.
    pub sizes: Vec<usize>,
    pub activation: Activation,
    pub dropout: f64,
    /// Apply activation and dropout after the last layer too (trunks and
    /// experts feeding further layers).
    #[serde(default)]
    pub activate_output: bool,
}

impl MlpTower {
    pub fn new(name: impl Into<String>, input: usize, sizes: Vec<usize>) -> Self {
        MlpTower {
            name: name.into(),
            input,
            sizes,
            activation: Activation::Relu,
            dropout: 0.0,
            activate_output: false,
        }
    }

    /// Variant whose output layer is activated like the hidden ones.
    pub fn activated(mut self) -> Self {
        self.activate_output = true;
        self
    }

    pub fn with_dropout(mut self, rate: f64) -> Self {
        self.dropout = rate;
        self
    }

    pub fn with_activation(mut self, a: Activation) -> Self {
        self.activation = a;
        self
    }

    pub fn output(&self) -> usize {
        *self.sizes.last().unwrap_or(&self.input)
    }

    fn layers(&self) -> Vec<Dense> {
        let mut prev = self.input;
        self.sizes
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                let d = Dense::new(format!("{}.l{i}", self.name), prev, s);
                prev = s;
                d
            })
            .collect()
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        for l in self.layers() {
            l.init(store, rng);
        }
    }

    pub fn forward(&self, fw: &mut Forward, x: NodeId) -> Result<NodeId> {
        let width = fw.graph.shape(x).last().copied().unwrap_or(0);
        if width != self.input {
            return Err(Error::shape(
                "mlp_forward",
                &[fw.graph.shape(x), &[self.input]],
            ));
        }
        let layers = self.layers();
        let last = layers.len().saturating_sub(1);
        let mut h = x;
        for (i, l) in layers.iter().enumerate() {
            h = l.forward(fw, h)?;
            if i < last || self.activate_output {
                h = self.activation.apply(&mut fw.graph, h);
                h = fw.dropout(h, self.dropout)?;
            }
        }
        Ok(h)
    }
}

/// Deep & Cross network: `x_{l+1} = x_0 (x_l · w_l) + b_l + x_l`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossNetwork {
    pub name: String,
    pub dim: usize,
    pub depth: usize,
}

impl CrossNetwork {
    pub fn new(name: impl Into<String>, dim: usize, depth: usize) -> Self {
        CrossNetwork {
            name: name.into(),
            dim,
            depth,
        }
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        for l in 0..self.depth {
            let w = glorot(rng, self.dim, 1, &[self.dim, 1]);
            store.insert(format!("{}.w{l}", self.name), w, ParamKind::Weight);
            store.insert(
                format!("{}.b{l}", self.name),
                Tensor::zeros(&[self.dim]),
                ParamKind::Bias,
            );
        }
    }

    pub fn forward(&self, fw: &mut Forward, x0: NodeId) -> Result<NodeId> {
        if fw.graph.shape(x0).len() != 2 || fw.graph.shape(x0)[1] != self.dim {
            return Err(Error::shape(
                "cross_forward",
                &[fw.graph.shape(x0), &[self.dim]],
            ));
        }
        let mut x = x0;
        for l in 0..self.depth {
            let w = fw.param(&format!("{}.w{l}", self.name))?;
            let b = fw.param(&format!("{}.b{l}", self.name))?;
            let proj = fw.graph.matmul(x, w)?; // [B, 1]
            let crossed = fw.graph.mul(x0, proj)?;
            let shifted = fw.graph.add(crossed, b)?;
            x = fw.graph.add(shifted, x)?;
        }
        Ok(x)
    }
}

/// Merchant tower: tanh network whose every path from the MCI inputs to the
/// output carries weights `softplus(v) > 0`. The shared representation
/// enters the first layer only, through unconstrained weights.
///
/// With `positive = false` the same architecture is built with free weights
/// (the plain-MLP replacement used with the pointwise monotonic penalty).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonotoneTower {
    pub name: String,
    /// Width of the shared representation; 0 for none.
    pub side: usize,
    pub mono: usize,
    /// Widths of all layers, last one included (normally 1).
    pub sizes: Vec<usize>,
    pub positive: bool,
}

impl MonotoneTower {
    pub fn new(name: impl Into<String>, side: usize, mono: usize, sizes: Vec<usize>) -> Self {
        MonotoneTower {
            name: name.into(),
            side,
            mono,
            sizes,
            positive: true,
        }
    }

    pub fn unconstrained(mut self) -> Self {
        self.positive = false;
        self
    }

    pub fn free_name(&self, layer: usize) -> String {
        format!("{}.v{layer}", self.name)
    }

    pub fn side_name(&self) -> String {
        format!("{}.u0", self.name)
    }

    pub fn bias_name(&self, layer: usize) -> String {
        format!("{}.b{layer}", self.name)
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        let mut prev = self.mono;
        for (l, &s) in self.sizes.iter().enumerate() {
            let v = if self.positive {
                positive_init(rng, &[prev, s])
            } else {
                glorot(rng, prev, s, &[prev, s])
            };
            store.insert(self.free_name(l), v, ParamKind::Weight);
            store.insert(self.bias_name(l), Tensor::zeros(&[s]), ParamKind::Bias);
            prev = s;
        }
        if self.side > 0 {
            let first = self.sizes[0];
            let u = glorot(rng, self.side, first, &[self.side, first]);
            store.insert(self.side_name(), u, ParamKind::Weight);
        }
    }

    fn weight(&self, fw: &mut Forward, layer: usize) -> Result<NodeId> {
        let v = fw.param(&self.free_name(layer))?;
        Ok(if self.positive { fw.graph.softplus(v) } else { v })
    }

    /// Hidden activations of every layer plus the output node.
    fn run(
        &self,
        fw: &mut Forward,
        side: Option<NodeId>,
        x_s: NodeId,
    ) -> Result<(Vec<NodeId>, Vec<NodeId>, NodeId)> {
        let s = fw.graph.shape(x_s);
        if s.len() != 2 || s[1] != self.mono {
            return Err(Error::shape("monotone_forward", &[s, &[self.mono]]));
        }
        let last = self.sizes.len() - 1;
        let mut weights = Vec::with_capacity(self.sizes.len());
        let mut hidden = Vec::with_capacity(last);
        let mut h = x_s;
        for l in 0..self.sizes.len() {
            let w = self.weight(fw, l)?;
            weights.push(w);
            let mut z = fw.graph.matmul(h, w)?;
            if l == 0 {
                if let Some(e) = side {
                    if self.side == 0 || fw.graph.shape(e) != [fw.graph.shape(x_s)[0], self.side] {
                        return Err(Error::shape(
                            "monotone_forward",
                            &[fw.graph.shape(e), &[self.side]],
                        ));
                    }
                    let u = fw.param(&self.side_name())?;
                    let eu = fw.graph.matmul(e, u)?;
                    z = fw.graph.add(z, eu)?;
                }
            }
            let b = fw.param(&self.bias_name(l))?;
            z = fw.graph.add(z, b)?;
            if l < last {
                h = fw.graph.tanh(z);
                hidden.push(h);
            } else {
                h = z;
            }
        }
        Ok((weights, hidden, h))
    }

    /// Output `[B, last]`, non-decreasing in every coordinate of `x_s` when
    /// `positive`.
    pub fn forward(&self, fw: &mut Forward, side: Option<NodeId>, x_s: NodeId) -> Result<NodeId> {
        Ok(self.run(fw, side, x_s)?.2)
    }

    /// Output together with its Jacobian `[B, mono]` with respect to `x_s`,
    /// built from first-order graph ops so the Jacobian itself is
    /// differentiable in the parameters. Requires a single output unit.
    pub fn forward_with_input_jacobian(
        &self,
        fw: &mut Forward,
        side: Option<NodeId>,
        x_s: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        if self.sizes.last() != Some(&1) {
            return Err(Error::InvalidArgument(
                "input Jacobian needs a single output unit".into(),
            ));
        }
        let (weights, hidden, out) = self.run(fw, side, x_s)?;
        let batch = fw.graph.shape(x_s)[0];
        let g = &mut fw.graph;
        let one = g.constant(Tensor::scalar(1.0));
        // tangent[b, k, :] = d(layer activation)/d x_s[k]
        let mut tangent: Option<NodeId> = None;
        for (l, &w) in weights.iter().enumerate() {
            let width = self.sizes[l];
            let dz = match tangent {
                None => g.reshape(w, &[1, self.mono, width])?,
                Some(t) => {
                    let prev = self.sizes[l - 1];
                    let flat = g.reshape(t, &[batch * self.mono, prev])?;
                    let m = g.matmul(flat, w)?;
                    g.reshape(m, &[batch, self.mono, width])?
                }
            };
            tangent = Some(if l < hidden.len() {
                let h = hidden[l];
                let hh = g.mul(h, h)?;
                let d = g.sub(one, hh)?; // 1 - tanh^2
                let d3 = g.reshape(d, &[batch, 1, width])?;
                g.mul(d3, dz)?
            } else {
                dz
            });
        }
        let t = tangent.expect("at least one layer");
        let t = if fw.graph.shape(t)[0] == 1 {
            // single linear layer: Jacobian is the weight column for every row
            let w = fw.graph.reshape(t, &[1, self.mono])?;
            let ones = fw.graph.constant(Tensor::full(&[batch, 1], 1.0));
            fw.graph.mul(ones, w)?
        } else {
            fw.graph.reshape(t, &[batch, self.mono])?
        };
        Ok((out, t))
    }
}

/// MIN-MAX network: `max_k min_j (a_kj · x + c_kj)` with `a_kj = softplus(v_kj)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinMaxNet {
    pub name: String,
    pub mono: usize,
    pub groups: usize,
    pub units: usize,
}

impl MinMaxNet {
    pub fn new(name: impl Into<String>, mono: usize, groups: usize, units: usize) -> Self {
        MinMaxNet {
            name: name.into(),
            mono,
            groups,
            units,
        }
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        let n = self.groups * self.units;
        store.insert(
            format!("{}.v", self.name),
            positive_init(rng, &[self.mono, n]),
            ParamKind::Weight,
        );
        let b = (0..n).map(|_| rng.gen_range(-0.1..0.1)).collect();
        store.insert(
            format!("{}.b", self.name),
            Tensor::from_parts(vec![n], b),
            ParamKind::Bias,
        );
    }

    pub fn forward(&self, fw: &mut Forward, x_s: NodeId) -> Result<NodeId> {
        let s = fw.graph.shape(x_s);
        if s.len() != 2 || s[1] != self.mono {
            return Err(Error::shape("minmax_forward", &[s, &[self.mono]]));
        }
        let batch = s[0];
        let v = fw.param(&format!("{}.v", self.name))?;
        let b = fw.param(&format!("{}.b", self.name))?;
        let g = &mut fw.graph;
        let a = g.softplus(v);
        let lin = g.matmul(x_s, a)?;
        let units = g.add(lin, b)?;
        let grouped = g.reshape(units, &[batch, self.groups, self.units])?;
        let mins = g.min_axis(grouped, 2)?;
        let mins = g.reshape(mins, &[batch, self.groups])?;
        g.max_axis(mins, 1)
    }
}

/// Mixture of experts with one softmax gate: `sum_e gate_e(x) * expert_e(x)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertGate {
    pub gate: Dense,
}

impl ExpertGate {
    pub fn new(name: impl Into<String>, input: usize, n_experts: usize) -> Self {
        ExpertGate {
            gate: Dense::new(name, input, n_experts),
        }
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        self.gate.init(store, rng);
    }

    /// Gate weights `[B, n_experts]`, rows summing to one.
    pub fn weights(&self, fw: &mut Forward, input: NodeId) -> Result<NodeId> {
        let logits = self.gate.forward(fw, input)?;
        Ok(fw.graph.softmax(logits))
    }

    /// Combine already-computed expert outputs.
    pub fn combine(&self, fw: &mut Forward, input: NodeId, experts: &[NodeId]) -> Result<NodeId> {
        if experts.len() != self.gate.output || experts.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "gate over {} experts given {}",
                self.gate.output,
                experts.len()
            )));
        }
        let w = self.weights(fw, input)?;
        let mut acc: Option<NodeId> = None;
        for (e, &out) in experts.iter().enumerate() {
            let we = fw.graph.slice_last(w, e, 1)?;
            let term = fw.graph.mul(we, out)?;
            acc = Some(match acc {
                None => term,
                Some(a) => fw.graph.add(a, term)?,
            });
        }
        Ok(acc.unwrap())
    }
}

/// Run every expert tower on `input` and mix them through `gate`.
pub fn expert_gate_forward(
    fw: &mut Forward,
    experts: &[MlpTower],
    gate: &ExpertGate,
    input: NodeId,
) -> Result<NodeId> {
    let outs = experts
        .iter()
        .map(|e| e.forward(fw, input))
        .collect::<Result<Vec<_>>>()?;
    gate.combine(fw, input, &outs)
}
