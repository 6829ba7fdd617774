//! Self-checks shared by `merit verify` and the acceptance suite.
//!
//! Everything here is seeded and deterministic: finite-difference checks of
//! every layer and loss, monotonicity sweeps over random and trained models,
//! the bitwise entire-space identity, the monotonic penalty on monotone and
//! planted anti-monotone models, and metric/oracle equivalence.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::autodiff::{grad_check, Graph, NodeId};
use crate::datagen::{generate, WorldConfig};
use crate::error::{Error, Result};
use crate::features::{FeatureSchema, MCI_DIM};
use crate::harness::{train, ExperimentData, ModelSizes, PairwiseLoss, TrainConfig};
use crate::layers::{
    Activation, CrossNetwork, Dense, EmbeddingTable, ExpertGate, Forward, MinMaxNet, MlpTower,
    MonotoneTower, ParamStore,
};
use crate::metrics::{self, oracle, NDCG_CUTOFFS};
use crate::models::{forward_graph, Architecture, Batch, ForwardOptions, Model, ModelSpec};
use crate::objectives::{
    combine_losses, enumerate_session_pairs, esmm_pointwise_loss, monotonic_penalty_node,
    pairwise_ctrcvr_loss, penalty_from_gradient, stratified_pairwise_loss,
    unstratified_pairwise_loss, LossWeights, ZRule, DEFAULT_PAIR_CAP,
};
use crate::rng::{stream, Domain};
use crate::tensor::Tensor;

/// Finite-difference step.
pub const GRAD_EPS: f64 = 1e-5;
/// Largest accepted relative error between analytic and numeric gradients.
pub const GRAD_TOL: f64 = 1e-4;
/// Largest accepted output drop when one MCI coordinate increases.
pub const MONO_TOL: f64 = 1e-9;
/// Size of the MCI perturbation in monotonicity sweeps.
pub const MONO_STEP: f64 = 0.1;
/// Largest penalty accepted as zero on a monotone model.
pub const PENALTY_ZERO_TOL: f64 = 1e-12;

/// Worst relative gradient error of one layer or loss over all configurations.
#[derive(Clone, Debug, Serialize)]
pub struct GradCheck {
    pub name: String,
    pub configs: usize,
    pub max_rel_err: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err < GRAD_TOL
    }
}

// Independent stream per (check, configuration).
fn check_rng(seed: u64, check: usize, config: usize) -> ChaCha8Rng {
    stream(seed, Domain::Verify, ((check as u64) << 20) | config as u64)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect())
}

/// Move every parameter off its initial value. Zero-initialized biases put
/// rows whose ReLUs are all dead exactly on the next kink, where central
/// differences are meaningless.
fn jitter(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    for (_, p) in store.iter_mut() {
        for v in p.value.data_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
    }
}

fn project(g: &mut Graph, out: NodeId, proj: &Tensor) -> Result<NodeId> {
    let r = g.constant(proj.clone());
    let m = g.mul(out, r)?;
    Ok(g.sum(m))
}

/// Worst gradient error of `f` with respect to its input (when
/// `input_grad`) and each parameter in `store`. The scalar under test is a
/// fixed random projection of the layer output.
fn layer_error<F>(
    store: &ParamStore,
    input: &Tensor,
    input_grad: bool,
    rng: &mut ChaCha8Rng,
    f: F,
) -> Result<f64>
where
    F: Fn(&mut Forward, NodeId) -> Result<NodeId>,
{
    let shape = {
        let mut fw = Forward::inference(store);
        let x = fw.constant(input.clone());
        let out = f(&mut fw, x)?;
        fw.graph.shape(out).to_vec()
    };
    let proj = uniform(rng, &shape, -1.0, 1.0);
    let run = |g: &mut Graph, bound: HashMap<String, NodeId>, x: Option<NodeId>| {
        let graph = std::mem::replace(g, Graph::new());
        let mut fw = Forward::with_bindings(graph, store, bound);
        let x = match x {
            Some(x) => x,
            None => fw.constant(input.clone()),
        };
        let out = f(&mut fw, x)?;
        let loss = project(&mut fw.graph, out, &proj)?;
        *g = fw.graph;
        Ok(loss)
    };
    let mut worst: f64 = 0.0;
    if input_grad {
        worst = grad_check(|g, p| run(g, HashMap::new(), Some(p)), input, GRAD_EPS)?;
    }
    for (name, param) in store.iter() {
        let e = grad_check(
            |g, p| run(g, HashMap::from([(name.clone(), p)]), None),
            &param.value,
            GRAD_EPS,
        )?;
        worst = worst.max(e);
    }
    Ok(worst)
}

type LayerCase = fn(&mut ChaCha8Rng) -> Result<f64>;

fn dense_case(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (b, i, o) = (rng.gen_range(1..5), rng.gen_range(1..7), rng.gen_range(1..6));
    let act = [
        Activation::Identity,
        Activation::Relu,
        Activation::Tanh,
        Activation::Sigmoid,
    ][rng.gen_range(0..4)];
    let layer = Dense::new("dense", i, o);
    let mut store = ParamStore::new();
    layer.init(&mut store, rng);
    jitter(&mut store, rng);
    let x = uniform(rng, &[b, i], -1.0, 1.0);
    layer_error(&store, &x, true, rng, |fw, x| {
        let z = layer.forward(fw, x)?;
        Ok(act.apply(&mut fw.graph, z))
    })
}

fn mlp_case(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (b, i) = (rng.gen_range(1..5), rng.gen_range(2..7));
    let sizes = vec![rng.gen_range(2..6), rng.gen_range(2..5), 1];
    let mut tower = MlpTower::new("mlp", i, sizes);
    if rng.gen_bool(0.5) {
        tower = tower.with_activation(Activation::Tanh);
    }
    if rng.gen_bool(0.5) {
        tower = tower.activated();
    }
    let mut store = ParamStore::new();
    tower.init(&mut store, rng);
    jitter(&mut store, rng);
    let x = uniform(rng, &[b, i], -1.0, 1.0);
    layer_error(&store, &x, true, rng, |fw, x| tower.forward(fw, x))
}

fn embedding_case(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (vocab, dim, b) = (rng.gen_range(2..8), rng.gen_range(1..5), rng.gen_range(1..7));
    let table = EmbeddingTable::new("emb", vocab, dim);
    let mut store = ParamStore::new();
    table.init(&mut store, rng);
    jitter(&mut store, rng);
    let idx: Vec<usize> = (0..b).map(|_| rng.gen_range(0..vocab)).collect();
    let dummy = Tensor::zeros(&[1]);
    layer_error(&store, &dummy, false, rng, |fw, _| table.forward(fw, &idx))
}

fn cross_case(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (b, d, depth) = (rng.gen_range(1..5), rng.gen_range(1..7), rng.gen_range(1..4));
    let net = CrossNetwork::new("cross", d, depth);
    let mut store = ParamStore::new();
    net.init(&mut store, rng);
    jitter(&mut store, rng);
    let x = uniform(rng, &[b, d], -1.0, 1.0);
    layer_error(&store, &x, true, rng, |fw, x| net.forward(fw, x))
}

fn tower_parts(rng: &mut ChaCha8Rng, positive: bool) -> (MonotoneTower, ParamStore, Tensor) {
    let (b, side) = (rng.gen_range(1..4), rng.gen_range(0..5));
    let sizes = vec![rng.gen_range(2..6), rng.gen_range(2..5), 1];
    let mut tower = MonotoneTower::new("tower", side, MCI_DIM, sizes);
    if !positive {
        tower = tower.unconstrained();
    }
    let mut store = ParamStore::new();
    tower.init(&mut store, rng);
    jitter(&mut store, rng);
    let x = uniform(rng, &[b, side + MCI_DIM], 0.0, 1.0);
    (tower, store, x)
}

fn split_side(fw: &mut Forward, x: NodeId, side: usize) -> Result<(Option<NodeId>, NodeId)> {
    let e = if side > 0 {
        Some(fw.graph.slice_last(x, 0, side)?)
    } else {
        None
    };
    Ok((e, fw.graph.slice_last(x, side, MCI_DIM)?))
}

fn tower_case(rng: &mut ChaCha8Rng, positive: bool, jacobian: bool) -> Result<f64> {
    let (tower, store, x) = tower_parts(rng, positive);
    layer_error(&store, &x, true, rng, |fw, x| {
        let (e, x_s) = split_side(fw, x, tower.side)?;
        if jacobian {
            Ok(tower.forward_with_input_jacobian(fw, e, x_s)?.1)
        } else {
            tower.forward(fw, e, x_s)
        }
    })
}

fn merchant_tower_case(rng: &mut ChaCha8Rng) -> Result<f64> {
    tower_case(rng, true, false)
}

fn merchant_jacobian_case(rng: &mut ChaCha8Rng) -> Result<f64> {
    tower_case(rng, true, true)
}

fn free_tower_case(rng: &mut ChaCha8Rng) -> Result<f64> {
    tower_case(rng, false, true)
}

fn minmax_case(rng: &mut ChaCha8Rng) -> Result<f64> {
    let b = rng.gen_range(1..5);
    let net = MinMaxNet::new("minmax", MCI_DIM, rng.gen_range(1..4), rng.gen_range(1..4));
    let mut store = ParamStore::new();
    net.init(&mut store, rng);
    jitter(&mut store, rng);
    let x = uniform(rng, &[b, MCI_DIM], 0.0, 1.0);
    layer_error(&store, &x, true, rng, |fw, x| net.forward(fw, x))
}

fn gate_case(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (b, i, n, d) = (
        rng.gen_range(1..4),
        rng.gen_range(1..5),
        rng.gen_range(2..4),
        rng.gen_range(1..4),
    );
    let gate = ExpertGate::new("gate", i, n);
    let mut store = ParamStore::new();
    gate.init(&mut store, rng);
    jitter(&mut store, rng);
    let maps: Vec<Tensor> = (0..n).map(|_| uniform(rng, &[i, d], -1.0, 1.0)).collect();
    let x = uniform(rng, &[b, i], -1.0, 1.0);
    layer_error(&store, &x, true, rng, |fw, x| {
        let experts = maps
            .iter()
            .map(|m| {
                let c = fw.constant(m.clone());
                let h = fw.graph.matmul(x, c)?;
                Ok(fw.graph.tanh(h))
            })
            .collect::<Result<Vec<_>>>()?;
        gate.combine(fw, x, &experts)
    })
}

fn session_labels(rng: &mut ChaCha8Rng, n: usize) -> (Vec<u8>, Vec<f64>) {
    let y = (0..n).map(|_| rng.gen_range(0..3u8)).collect();
    let z = (0..n).map(|_| rng.gen_range(0.0..5.0)).collect();
    (y, z)
}

fn esmm_case(rng: &mut ChaCha8Rng) -> Result<f64> {
    let b = rng.gen_range(1..8);
    let y: Vec<u8> = (0..b).map(|_| rng.gen_range(0..3u8)).collect();
    let x = uniform(rng, &[b, 2], -3.0, 3.0);
    grad_check(
        |g, p| {
            let a = g.slice_last(p, 0, 1)?;
            let c = g.slice_last(p, 1, 1)?;
            let p_ctr = g.sigmoid(a);
            let p_cvr = g.sigmoid(c);
            let p_ctcvr = g.mul(p_ctr, p_cvr)?;
            esmm_pointwise_loss(g, p_ctr, p_ctcvr, &y)
        },
        &x,
        GRAD_EPS,
    )
}

fn pair_case(rng: &mut ChaCha8Rng, rule: ZRule, which: u8) -> Result<f64> {
    let n = rng.gen_range(2..10);
    let (y, z) = session_labels(rng, n);
    let pairs = enumerate_session_pairs(&y, &z, rule, DEFAULT_PAIR_CAP, rng)?;
    let x = uniform(rng, &[n, 1], -3.0, 3.0);
    grad_check(
        |g, p| {
            let s = g.sigmoid(p);
            match which {
                0 => pairwise_ctrcvr_loss(g, s, &pairs),
                1 => stratified_pairwise_loss(g, s, &pairs),
                _ => unstratified_pairwise_loss(g, s, &pairs),
            }
        },
        &x,
        GRAD_EPS,
    )
}

fn ctrcvr_pair_case(rng: &mut ChaCha8Rng) -> Result<f64> {
    pair_case(rng, ZRule::Stratified, 0)
}

fn mspl_case(rng: &mut ChaCha8Rng) -> Result<f64> {
    pair_case(rng, ZRule::Stratified, 1)
}

fn mpl_case(rng: &mut ChaCha8Rng) -> Result<f64> {
    pair_case(rng, ZRule::Unstratified, 2)
}

fn penalty_case(rng: &mut ChaCha8Rng) -> Result<f64> {
    let b = rng.gen_range(1..5);
    // Keep entries away from the kink of relu at zero.
    let data = (0..b * MCI_DIM)
        .map(|_| {
            let m = rng.gen_range(0.05..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    let x = Tensor::from_parts(vec![b, MCI_DIM], data);
    grad_check(|g, p| Ok(monotonic_penalty_node(g, p)), &x, GRAD_EPS)
}

fn combined_case(rng: &mut ChaCha8Rng) -> Result<f64> {
    let w = LossWeights::new(rng.gen_range(0.0..2.0), rng.gen_range(0.0..2.0))?;
    let x = uniform(rng, &[1, 3], 0.0, 2.0);
    grad_check(
        |g, p| {
            let parts = (0..3)
                .map(|k| {
                    let s = g.slice_last(p, k, 1)?;
                    let q = g.mul(s, s)?;
                    Ok(g.sum(q))
                })
                .collect::<Result<Vec<_>>>()?;
            combine_losses(g, parts[0], parts[1], parts[2], w)
        },
        &x,
        GRAD_EPS,
    )
}

const CASES: [(&str, LayerCase); 16] = [
    ("dense", dense_case),
    ("mlp_tower", mlp_case),
    ("embedding", embedding_case),
    ("cross_network", cross_case),
    ("merchant_tower", merchant_tower_case),
    ("merchant_tower_jacobian", merchant_jacobian_case),
    ("free_tower_jacobian", free_tower_case),
    ("minmax_net", minmax_case),
    ("expert_gate", gate_case),
    ("esmm_loss", esmm_case),
    ("pairwise_ctrcvr_loss", ctrcvr_pair_case),
    ("stratified_pairwise_loss", mspl_case),
    ("unstratified_pairwise_loss", mpl_case),
    ("monotonic_penalty", penalty_case),
    ("combined_loss", combined_case),
    ("model_forward", model_case),
];

/// Finite-difference check of every layer and loss over `configs` seeded
/// random configurations each.
pub fn gradient_checks(configs: usize, seed: u64) -> Result<Vec<GradCheck>> {
    CASES
        .iter()
        .enumerate()
        .map(|(k, (name, case))| {
            let mut worst: f64 = 0.0;
            for c in 0..configs {
                let mut rng = check_rng(seed, k, c);
                let e = case(&mut rng)
                    .map_err(|e| Error::InvalidArgument(format!("{name} config {c}: {e}")))?;
                worst = worst.max(e);
            }
            Ok(GradCheck {
                name: name.to_string(),
                configs,
                max_rel_err: worst,
            })
        })
        .collect()
}

/// A tiny simulated schema and batch source for model-level checks.
pub fn verification_data(seed: u64) -> Result<ExperimentData> {
    let world = WorldConfig {
        n_users: 200,
        n_hotels: 120,
        n_sessions: 80,
        test_sessions: 20,
        hotels_per_session: 10,
        seed,
        ..WorldConfig::default()
    };
    let (_, data) = generate(&world)?;
    Ok(ExperimentData {
        schema: data.schema,
        train: data.train,
        test: data.test,
    })
}

/// Small architecture-complete spec used by the model-level checks.
pub fn small_spec(architecture: Architecture, schema: FeatureSchema) -> ModelSpec {
    ModelSpec {
        tower_sizes: vec![6, 4, 1],
        trunk_sizes: vec![6, 4],
        head_sizes: vec![3, 1],
        n_experts: 2,
        monotone_sizes: vec![4, 3, 1],
        minmax_groups: 2,
        minmax_units: 2,
        ..ModelSpec::new(architecture, schema)
    }
}

// Gradient of pCTCVR through a whole small model, for a few parameters of
// each kind. Checking every embedding row would dominate the runtime.
fn model_case(rng: &mut ChaCha8Rng) -> Result<f64> {
    let data = verification_data(7)?;
    let arch = Architecture::ALL[rng.gen_range(0..Architecture::ALL.len())];
    let mut model = Model::init(small_spec(arch, data.schema.clone()), rng.gen())?;
    jitter(&mut model.params, rng);
    let b = rng.gen_range(2..6);
    let start = rng.gen_range(0..data.train.len() - b);
    let batch = Batch::from_impressions(&data.schema, &data.train.impressions[start..start + b])?;
    let proj = uniform(rng, &[b, 1], -1.0, 1.0);
    let names: Vec<String> = model
        .params
        .iter()
        .map(|(n, _)| n.clone())
        .filter(|n| !n.ends_with(".table"))
        .collect();
    let mut worst: f64 = 0.0;
    for _ in 0..3 {
        let name = &names[rng.gen_range(0..names.len())];
        let e = grad_check(
            |g, p| {
                let graph = std::mem::replace(g, Graph::new());
                let bound = HashMap::from([(name.clone(), p)]);
                let mut fw = Forward::with_bindings(graph, &model.params, bound);
                let out = forward_graph(&model.spec, &mut fw, &batch, ForwardOptions::default())?;
                let loss = project(&mut fw.graph, out.p_ctcvr, &proj)?;
                *g = fw.graph;
                Ok(loss)
            },
            model.params.tensor(name)?,
            GRAD_EPS,
        )?;
        worst = worst.max(e);
    }
    Ok(worst)
}

/// Outcome of a monotonicity sweep.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MonotonicityStats {
    /// Number of (input, coordinate, output) comparisons.
    pub checks: u64,
    /// Comparisons whose output dropped by more than [`MONO_TOL`].
    pub violations: u64,
    /// Most negative observed output change (0 when none dropped).
    pub worst_drop: f64,
}

impl MonotonicityStats {
    pub fn merge(&mut self, other: &MonotonicityStats) {
        self.checks += other.checks;
        self.violations += other.violations;
        self.worst_drop = self.worst_drop.min(other.worst_drop);
    }
}

/// Random model inputs: uniform field indices and MCI indicators in `[0, 1]`.
pub fn random_batch(schema: &FeatureSchema, n: usize, rng: &mut ChaCha8Rng) -> Batch {
    let fields = schema
        .fields()
        .iter()
        .map(|f| (0..n).map(|_| rng.gen_range(0..f.vocab_size())).collect())
        .collect();
    Batch {
        fields,
        mci: uniform(rng, &[n, MCI_DIM], 0.0, 1.0),
    }
}

/// Raise each MCI coordinate of `n` random inputs by [`MONO_STEP`] and
/// count drops of pCTR, pCVR or pCTCVR.
pub fn monotonicity_sweep(model: &Model, n: usize, seed: u64) -> Result<MonotonicityStats> {
    let mut rng = stream(seed, Domain::Verify, u64::MAX >> 16);
    let batch = random_batch(&model.spec.schema, n, &mut rng);
    let base = model.predict(&batch)?;
    let mut stats = MonotonicityStats::default();
    for k in 0..MCI_DIM {
        let mut mci = batch.mci.clone();
        for r in 0..n {
            mci.data_mut()[r * MCI_DIM + k] += MONO_STEP;
        }
        let moved = model.predict(&batch.with_mci(mci)?)?;
        for (before, after) in [
            (&base.p_ctr, &moved.p_ctr),
            (&base.p_cvr, &moved.p_cvr),
            (&base.p_ctcvr, &moved.p_ctcvr),
        ] {
            for (a, b) in before.iter().zip(after) {
                let d = b - a;
                stats.checks += 1;
                if d < -MONO_TOL {
                    stats.violations += 1;
                }
                stats.worst_drop = stats.worst_drop.min(d);
            }
        }
    }
    Ok(stats)
}

/// Model with every parameter moved by Gaussian noise of scale `scale`, so
/// checks do not rely on the near-uniform initial weights.
pub fn randomized_model(spec: ModelSpec, seed: u64, scale: f64) -> Result<Model> {
    let mut model = Model::init(spec, seed)?;
    let mut rng = stream(seed, Domain::Verify, 1 << 40);
    for (_, p) in model.params.iter_mut() {
        for v in p.value.data_mut() {
            *v += scale * rng.sample::<f64, _>(StandardNormal);
        }
    }
    Ok(model)
}

/// Monotonicity of `count` randomized MERIT and MERIT_MINMAX models
/// (alternating), `inputs` random inputs each.
pub fn random_model_monotonicity(
    schema: &FeatureSchema,
    count: usize,
    inputs: usize,
    seed: u64,
) -> Result<MonotonicityStats> {
    let mut total = MonotonicityStats::default();
    for m in 0..count {
        let arch = if m % 2 == 0 {
            Architecture::Merit
        } else {
            Architecture::MeritMinmax
        };
        let model = randomized_model(ModelSpec::new(arch, schema.clone()), seed + m as u64, 0.5)?;
        total.merge(&monotonicity_sweep(&model, inputs, seed + m as u64)?);
    }
    Ok(total)
}

/// Short training run on a small simulated world, for checks that need
/// trained rather than initial parameters.
pub fn quick_train(architecture: Architecture, seed: u64) -> Result<Model> {
    let config = TrainConfig {
        architecture,
        pairwise: if architecture.is_merit() {
            PairwiseLoss::Mspl
        } else {
            PairwiseLoss::None
        },
        epochs: 2,
        batch_size: 256,
        seed,
        eval_each_epoch: false,
        model: ModelSizes::default(),
        world: WorldConfig {
            n_users: 800,
            n_hotels: 300,
            n_sessions: 400,
            test_sessions: 50,
            seed,
            ..WorldConfig::default()
        },
        ..TrainConfig::default()
    };
    let data = ExperimentData::for_config(&config)?;
    Ok(train(&config, &data)?.model)
}

/// Architectures and seeds of the trained models in the monotonicity check.
pub const TRAINED_MONOTONE: [(Architecture, u64); 3] = [
    (Architecture::Merit, 11),
    (Architecture::Merit, 12),
    (Architecture::MeritMinmax, 13),
];

/// Bitwise `pCTCVR == pCTR * pCVR` on a random batch for every architecture.
/// Returns the number of mismatching rows per architecture.
pub fn entire_space_identity(schema: &FeatureSchema, n: usize, seed: u64) -> Result<Vec<(Architecture, usize)>> {
    Architecture::ALL
        .iter()
        .map(|&arch| {
            let model = randomized_model(ModelSpec::new(arch, schema.clone()), seed, 0.1)?;
            let mut rng = stream(seed, Domain::Verify, 2 << 40);
            let batch = random_batch(schema, n, &mut rng);
            let p = model.predict(&batch)?;
            let bad = (0..p.len())
                .filter(|&i| (p.p_ctr[i] * p.p_cvr[i]).to_bits() != p.p_ctcvr[i].to_bits())
                .count();
            Ok((arch, bad))
        })
        .collect()
}

/// Pointwise monotonic penalty of `model` on `batch`, by backpropagating
/// pCTCVR into the MCI inputs.
pub fn model_penalty(model: &Model, batch: &Batch) -> Result<f64> {
    let mut fw = Forward::inference(&model.params);
    let opts = ForwardOptions {
        watch_mci: true,
        mci_jacobian: false,
    };
    let out = forward_graph(&model.spec, &mut fw, batch, opts)?;
    let total = fw.graph.sum(out.p_ctcvr);
    let grads = fw.graph.backward(total)?;
    let grad = grads
        .get(out.mci)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(batch.mci.shape()));
    Ok(penalty_from_gradient(&grad))
}

/// MERIT_PML model whose free towers decrease strictly in every MCI input:
/// negative first-layer weights, positive weights above.
pub fn planted_anti_monotone(schema: &FeatureSchema, seed: u64) -> Result<Model> {
    let mut model = Model::init(ModelSpec::new(Architecture::MeritPml, schema.clone()), seed)?;
    let names: Vec<String> = model
        .params
        .iter()
        .map(|(n, _)| n.clone())
        .filter(|n| n.starts_with("phi.") && n.contains(".v"))
        .collect();
    for name in names {
        let first = name.ends_with(".v0");
        let p = model
            .params
            .get_mut(&name)
            .ok_or_else(|| Error::Schema(format!("missing parameter {name}")))?;
        for v in p.value.data_mut() {
            let m = v.abs() + 0.05;
            *v = if first { -m } else { m };
        }
    }
    Ok(model)
}

/// Number of metric values that differ from the brute-force oracles over
/// `instances` random instances (sizes 1..=50, with ties).
pub fn metric_oracle_mismatches(instances: usize, seed: u64) -> Result<usize> {
    let mut bad = 0;
    for t in 0..instances {
        let mut rng = stream(seed, Domain::Verify, (3 << 40) | t as u64);
        let n = rng.gen_range(1..=50);
        let tied = rng.gen_bool(0.5);
        let scores: Vec<f64> = (0..n)
            .map(|_| {
                if tied {
                    rng.gen_range(0..5) as f64 * 0.25
                } else {
                    rng.gen()
                }
            })
            .collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.3)).collect();
        let users: Vec<u64> = (0..n).map(|_| rng.gen_range(0..6)).collect();
        let sessions: Vec<u64> = (0..n).map(|_| rng.gen_range(0..5)).collect();
        let z: Vec<f64> = (0..n)
            .map(|_| {
                if tied {
                    rng.gen_range(0..6) as f64
                } else {
                    rng.gen_range(0.0..5.0)
                }
            })
            .collect();
        if metrics::auc(&scores, &labels)? != oracle::auc(&scores, &labels) {
            bad += 1;
        }
        if metrics::gauc(&scores, &labels, &users)?.map(|g| g.value)
            != oracle::gauc(&scores, &labels, &users)
        {
            bad += 1;
        }
        for k in NDCG_CUTOFFS.into_iter().chain([1, n]) {
            if metrics::ndcg_at_k(&scores, &z, k)? != oracle::ndcg(&scores, &z, k) {
                bad += 1;
            }
            if metrics::wndcg_at_k(&scores, &z, &sessions, k)? != oracle::wndcg(&scores, &z, &sessions, k) {
                bad += 1;
            }
        }
    }
    Ok(bad)
}

/// Sizes of a verification run.
#[derive(Clone, Debug, PartialEq)]
pub struct VerifyOptions {
    pub seed: u64,
    pub grad_configs: usize,
    pub random_models: usize,
    pub inputs: usize,
    pub metric_instances: usize,
    /// Include the checks that train models first.
    pub trained: bool,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            seed: 42,
            grad_configs: 20,
            random_models: 100,
            inputs: 1000,
            metric_instances: 200,
            trained: true,
        }
    }
}

/// One named verification outcome.
#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// All verification outcomes of a run.
#[derive(Clone, Debug, Serialize)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

fn result(name: &str, passed: bool, detail: String) -> CheckResult {
    CheckResult {
        name: name.to_string(),
        passed,
        detail,
    }
}

fn mono_detail(s: &MonotonicityStats) -> String {
    format!(
        "{} checks, {} violations, worst change {:e}",
        s.checks, s.violations, s.worst_drop
    )
}

/// Run every verification check.
pub fn run_verification(opts: &VerifyOptions) -> Result<VerifyReport> {
    let mut checks = Vec::new();
    for g in gradient_checks(opts.grad_configs, opts.seed)? {
        checks.push(result(
            &format!("gradient/{}", g.name),
            g.passed(),
            format!("{} configs, max rel err {:e}", g.configs, g.max_rel_err),
        ));
    }

    let data = verification_data(opts.seed)?;
    let schema = &data.schema;
    let stats = random_model_monotonicity(schema, opts.random_models, opts.inputs, opts.seed)?;
    checks.push(result(
        "monotonicity/random_models",
        stats.violations == 0 && stats.checks > 0,
        mono_detail(&stats),
    ));

    let identity = entire_space_identity(schema, opts.inputs, opts.seed)?;
    let bad: usize = identity.iter().map(|(_, b)| b).sum();
    checks.push(result(
        "entire_space_identity",
        bad == 0,
        format!("{} architectures, {bad} mismatching rows", identity.len()),
    ));

    let mut rng = stream(opts.seed, Domain::Verify, 4 << 40);
    let batch = random_batch(schema, opts.inputs.min(256), &mut rng);
    let mut worst_monotone: f64 = 0.0;
    for arch in [Architecture::Merit, Architecture::MeritMinmax] {
        let m = randomized_model(ModelSpec::new(arch, schema.clone()), opts.seed, 0.5)?;
        worst_monotone = worst_monotone.max(model_penalty(&m, &batch)?);
    }
    let planted = model_penalty(&planted_anti_monotone(schema, opts.seed)?, &batch)?;
    checks.push(result(
        "penalty/monotone_models",
        worst_monotone < PENALTY_ZERO_TOL,
        format!("max penalty {worst_monotone:e}"),
    ));
    checks.push(result(
        "penalty/planted_anti_monotone",
        planted > 0.0,
        format!("penalty {planted:e}"),
    ));

    let mismatches = metric_oracle_mismatches(opts.metric_instances, opts.seed)?;
    checks.push(result(
        "metrics/oracle_equivalence",
        mismatches == 0,
        format!("{} instances, {mismatches} mismatches", opts.metric_instances),
    ));

    if opts.trained {
        let mut total = MonotonicityStats::default();
        for (arch, seed) in TRAINED_MONOTONE {
            let m = quick_train(arch, seed)?;
            total.merge(&monotonicity_sweep(&m, opts.inputs, seed)?);
        }
        checks.push(result(
            "monotonicity/trained_models",
            total.violations == 0 && total.checks > 0,
            mono_detail(&total),
        ));
    }
    Ok(VerifyReport { checks })
}
