//! MERIT and the baseline multi-task rankers.
//!
//! Every architecture maps a batch of encoded impressions to
//! `(pCTR, pCVR, pCTCVR)`, with `pCTCVR` formed as the exact product of the
//! other two. Parameters are held in a [`ParamStore`] under stable names, so
//! checkpoints are plain name/shape/value listings.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::NodeId;
use crate::error::{Error, Result};
use crate::features::{FeatureSchema, Impression, MCI_DIM};
use crate::layers::{
    CrossNetwork, EmbeddingTable, ExpertGate, Forward, MinMaxNet, MlpTower, MonotoneTower,
    ParamKind, ParamStore,
};
use crate::rng::{stream, Domain};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Architecture {
    #[serde(rename = "DNN")]
    Dnn,
    #[serde(rename = "SharedBottom")]
    SharedBottom,
    #[serde(rename = "MMoE")]
    Mmoe,
    #[serde(rename = "CGC")]
    Cgc,
    #[serde(rename = "MERIT")]
    Merit,
    #[serde(rename = "MERIT_MINMAX")]
    MeritMinmax,
    #[serde(rename = "MERIT_PML")]
    MeritPml,
}

impl Architecture {
    pub const ALL: [Architecture; 7] = [
        Architecture::Dnn,
        Architecture::SharedBottom,
        Architecture::Mmoe,
        Architecture::Cgc,
        Architecture::Merit,
        Architecture::MeritMinmax,
        Architecture::MeritPml,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Architecture::Dnn => "DNN",
            Architecture::SharedBottom => "SharedBottom",
            Architecture::Mmoe => "MMoE",
            Architecture::Cgc => "CGC",
            Architecture::Merit => "MERIT",
            Architecture::MeritMinmax => "MERIT_MINMAX",
            Architecture::MeritPml => "MERIT_PML",
        }
    }

    /// Architectures built around the cross network and merchant tower.
    pub fn is_merit(self) -> bool {
        matches!(
            self,
            Architecture::Merit | Architecture::MeritMinmax | Architecture::MeritPml
        )
    }

    /// Outputs are non-decreasing in every MCI input by construction.
    pub fn is_structurally_monotone(self) -> bool {
        matches!(self, Architecture::Merit | Architecture::MeritMinmax)
    }
}

impl FromStr for Architecture {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Architecture::ALL
            .into_iter()
            .find(|a| a.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::UnknownArchitecture(s.to_string()))
    }
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Ctr,
    Cvr,
}

impl Task {
    pub const BOTH: [Task; 2] = [Task::Ctr, Task::Cvr];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Ctr => "ctr",
            Task::Cvr => "cvr",
        }
    }
}

fn default_tower() -> Vec<usize> {
    vec![256, 128, 64, 1]
}
fn default_trunk() -> Vec<usize> {
    vec![256, 128]
}
fn default_head() -> Vec<usize> {
    vec![64, 1]
}
fn default_monotone() -> Vec<usize> {
    vec![32, 16, 1]
}
fn default_dcn_depth() -> usize {
    2
}
fn default_experts() -> usize {
    8
}
fn default_minmax() -> usize {
    10
}
fn default_dropout() -> f64 {
    0.3
}

/// Architecture selection plus every size needed to build the parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub architecture: Architecture,
    pub schema: FeatureSchema,
    /// CTR/CVR towers of MERIT variants and DNN.
    #[serde(default = "default_tower")]
    pub tower_sizes: Vec<usize>,
    /// Shared trunk (SharedBottom) and every expert (MMoE, CGC).
    #[serde(default = "default_trunk")]
    pub trunk_sizes: Vec<usize>,
    /// Per-task heads on top of the trunk or expert mixture.
    #[serde(default = "default_head")]
    pub head_sizes: Vec<usize>,
    #[serde(default = "default_dcn_depth")]
    pub dcn_depth: usize,
    /// MMoE expert count; CGC always uses one shared plus one per task.
    #[serde(default = "default_experts")]
    pub n_experts: usize,
    /// Merchant tower (and the free tower of MERIT_PML).
    #[serde(default = "default_monotone")]
    pub monotone_sizes: Vec<usize>,
    #[serde(default = "default_minmax")]
    pub minmax_groups: usize,
    #[serde(default = "default_minmax")]
    pub minmax_units: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
}

impl ModelSpec {
    pub fn new(architecture: Architecture, schema: FeatureSchema) -> Self {
        ModelSpec {
            architecture,
            schema,
            tower_sizes: default_tower(),
            trunk_sizes: default_trunk(),
            head_sizes: default_head(),
            dcn_depth: default_dcn_depth(),
            n_experts: default_experts(),
            monotone_sizes: default_monotone(),
            minmax_groups: default_minmax(),
            minmax_units: default_minmax(),
            dropout: default_dropout(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("{}: {m}", self.architecture)));
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        if self.schema.fields().is_empty() {
            return bad("schema has no fields");
        }
        let ends_in_one = |s: &[usize]| s.last() == Some(&1) && s.iter().all(|&w| w > 0);
        let nonempty = |s: &[usize]| !s.is_empty() && s.iter().all(|&w| w > 0);
        match self.architecture {
            Architecture::Dnn if !ends_in_one(&self.tower_sizes) => {
                bad("tower_sizes must be positive and end in 1")
            }
            Architecture::SharedBottom | Architecture::Mmoe | Architecture::Cgc
                if !nonempty(&self.trunk_sizes) || !ends_in_one(&self.head_sizes) =>
            {
                bad("trunk_sizes must be non-empty and head_sizes must end in 1")
            }
            Architecture::Mmoe if self.n_experts == 0 => bad("n_experts must be at least 1"),
            a if a.is_merit() && !ends_in_one(&self.tower_sizes) => {
                bad("tower_sizes must be positive and end in 1")
            }
            Architecture::Merit | Architecture::MeritPml
                if !ends_in_one(&self.monotone_sizes) =>
            {
                bad("monotone_sizes must be positive and end in 1")
            }
            Architecture::MeritMinmax if self.minmax_groups == 0 || self.minmax_units == 0 => {
                bad("minmax groups and units must be positive")
            }
            _ => Ok(()),
        }
    }

    fn embedding_width(&self) -> usize {
        self.schema.embedding_width()
    }

    fn tables(&self) -> Vec<EmbeddingTable> {
        self.schema
            .fields()
            .iter()
            .map(|f| EmbeddingTable::new(format!("emb.{}", f.name), f.vocab_size(), f.embedding_dim()))
            .collect()
    }

    fn dcn(&self, t: Task) -> CrossNetwork {
        CrossNetwork::new(format!("dcn.{}", t.as_str()), self.embedding_width(), self.dcn_depth)
    }

    fn psi(&self, t: Task) -> MlpTower {
        MlpTower::new(format!("psi.{}", t.as_str()), self.embedding_width(), self.tower_sizes.clone())
            .with_dropout(self.dropout)
    }

    fn phi(&self, t: Task) -> MonotoneTower {
        let tower = MonotoneTower::new(
            format!("phi.{}", t.as_str()),
            self.embedding_width(),
            MCI_DIM,
            self.monotone_sizes.clone(),
        );
        if self.architecture == Architecture::MeritPml {
            tower.unconstrained()
        } else {
            tower
        }
    }

    fn minmax(&self, t: Task) -> MinMaxNet {
        MinMaxNet::new(
            format!("minmax.{}", t.as_str()),
            MCI_DIM,
            self.minmax_groups,
            self.minmax_units,
        )
    }

    fn flat_width(&self) -> usize {
        self.embedding_width() + MCI_DIM
    }

    fn dnn_tower(&self, t: Task) -> MlpTower {
        MlpTower::new(format!("dnn.{}", t.as_str()), self.flat_width(), self.tower_sizes.clone())
            .with_dropout(self.dropout)
    }

    fn trunk_like(&self, name: String) -> MlpTower {
        MlpTower::new(name, self.flat_width(), self.trunk_sizes.clone())
            .with_dropout(self.dropout)
            .activated()
    }

    fn head(&self, t: Task) -> MlpTower {
        let input = *self.trunk_sizes.last().unwrap_or(&self.flat_width());
        MlpTower::new(format!("head.{}", t.as_str()), input, self.head_sizes.clone())
            .with_dropout(self.dropout)
    }

    fn experts(&self) -> Vec<MlpTower> {
        match self.architecture {
            Architecture::Mmoe => (0..self.n_experts)
                .map(|e| self.trunk_like(format!("expert{e}")))
                .collect(),
            Architecture::Cgc => ["shared", "ctr", "cvr"]
                .iter()
                .map(|n| self.trunk_like(format!("expert.{n}")))
                .collect(),
            _ => Vec::new(),
        }
    }

    fn gate(&self, t: Task) -> ExpertGate {
        let n = match self.architecture {
            Architecture::Cgc => 2,
            _ => self.n_experts,
        };
        ExpertGate::new(format!("gate.{}", t.as_str()), self.flat_width(), n)
    }

    /// Freshly initialized parameters, deterministic in `seed`.
    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        self.validate()?;
        let mut rng = stream(seed, Domain::Init, 0);
        let mut store = ParamStore::new();
        for t in self.tables() {
            t.init(&mut store, &mut rng);
        }
        match self.architecture {
            Architecture::Dnn => {
                for t in Task::BOTH {
                    self.dnn_tower(t).init(&mut store, &mut rng);
                }
            }
            Architecture::SharedBottom => {
                self.trunk_like("trunk".into()).init(&mut store, &mut rng);
                for t in Task::BOTH {
                    self.head(t).init(&mut store, &mut rng);
                }
            }
            Architecture::Mmoe | Architecture::Cgc => {
                for e in self.experts() {
                    e.init(&mut store, &mut rng);
                }
                for t in Task::BOTH {
                    self.gate(t).init(&mut store, &mut rng);
                    self.head(t).init(&mut store, &mut rng);
                }
            }
            Architecture::Merit | Architecture::MeritMinmax | Architecture::MeritPml => {
                for t in Task::BOTH {
                    self.dcn(t).init(&mut store, &mut rng);
                    self.psi(t).init(&mut store, &mut rng);
                    if self.architecture == Architecture::MeritMinmax {
                        self.minmax(t).init(&mut store, &mut rng);
                    } else {
                        self.phi(t).init(&mut store, &mut rng);
                    }
                }
            }
        }
        Ok(store)
    }

    /// Check that `params` has exactly the names, shapes and kinds this
    /// spec would create.
    pub fn check_params(&self, params: &ParamStore) -> Result<()> {
        let template = self.init_params(0)?;
        if template.len() != params.len() {
            return Err(Error::Schema(format!(
                "{} expects {} parameter tensors, found {}",
                self.architecture,
                template.len(),
                params.len()
            )));
        }
        for (name, p) in template.iter() {
            let q = params
                .get(name)
                .ok_or_else(|| Error::Schema(format!("missing parameter {name}")))?;
            if q.value.shape() != p.value.shape() || q.kind != p.kind {
                return Err(Error::Schema(format!(
                    "parameter {name}: expected {:?} {:?}, found {:?} {:?}",
                    p.kind,
                    p.value.shape(),
                    q.kind,
                    q.value.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Encoded inputs of a batch of impressions.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// Per schema field, one index per impression.
    pub fields: Vec<Vec<usize>>,
    /// Oriented MCI indicators `[B, 9]`.
    pub mci: Tensor,
}

impl Batch {
    pub fn from_impressions<'a, I>(schema: &FeatureSchema, impressions: I) -> Result<Batch>
    where
        I: IntoIterator<Item = &'a Impression>,
    {
        let n_fields = schema.fields().len();
        let mut fields = vec![Vec::new(); n_fields];
        let mut mci = Vec::new();
        let mut rows = 0;
        for imp in impressions {
            schema.validate_indices(&imp.indices)?;
            for (f, &i) in fields.iter_mut().zip(&imp.indices) {
                f.push(i);
            }
            mci.extend_from_slice(imp.mci.values());
            rows += 1;
        }
        Ok(Batch {
            fields,
            mci: Tensor::new(vec![rows, MCI_DIM], mci)?,
        })
    }

    pub fn len(&self) -> usize {
        self.mci.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Copy with a different MCI matrix.
    pub fn with_mci(&self, mci: Tensor) -> Result<Batch> {
        if mci.shape() != self.mci.shape() {
            return Err(Error::shape("with_mci", &[self.mci.shape(), mci.shape()]));
        }
        Ok(Batch {
            fields: self.fields.clone(),
            mci,
        })
    }
}

/// Extra graph outputs requested from a forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Make the MCI input a gradient-receiving leaf.
    pub watch_mci: bool,
    /// Build `d pCTCVR / d x_s` in the graph (merchant-tower variants only).
    pub mci_jacobian: bool,
}

/// Graph nodes produced by a forward pass; every probability is `[B, 1]`.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    pub p_ctr: NodeId,
    pub p_cvr: NodeId,
    pub p_ctcvr: NodeId,
    pub mci: NodeId,
    /// `d pCTCVR / d x_s`, `[B, 9]`, when requested.
    pub ctcvr_mci_jacobian: Option<NodeId>,
}

/// Plain per-impression predictions.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Predictions {
    pub p_ctr: Vec<f64>,
    pub p_cvr: Vec<f64>,
    pub p_ctcvr: Vec<f64>,
}

impl Predictions {
    pub fn len(&self) -> usize {
        self.p_ctcvr.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p_ctcvr.is_empty()
    }

    fn extend(&mut self, other: Predictions) {
        self.p_ctr.extend(other.p_ctr);
        self.p_cvr.extend(other.p_cvr);
        self.p_ctcvr.extend(other.p_ctcvr);
    }
}

fn embed(spec: &ModelSpec, fw: &mut Forward, batch: &Batch) -> Result<NodeId> {
    if batch.fields.len() != spec.schema.fields().len() {
        return Err(Error::Schema(format!(
            "batch has {} fields, schema {}",
            batch.fields.len(),
            spec.schema.fields().len()
        )));
    }
    let tables = spec.tables();
    let mut parts = Vec::with_capacity(tables.len());
    for f in spec.schema.concat_order() {
        parts.push(tables[f].forward(fw, &batch.fields[f])?);
    }
    fw.graph.concat(&parts)
}

fn finish(
    fw: &mut Forward,
    logit_ctr: NodeId,
    logit_cvr: NodeId,
    mci: NodeId,
) -> Result<ForwardOutput> {
    let p_ctr = fw.graph.sigmoid(logit_ctr);
    let p_cvr = fw.graph.sigmoid(logit_cvr);
    let p_ctcvr = fw.graph.mul(p_ctr, p_cvr)?;
    Ok(ForwardOutput {
        p_ctr,
        p_cvr,
        p_ctcvr,
        mci,
        ctcvr_mci_jacobian: None,
    })
}

fn mci_node(fw: &mut Forward, batch: &Batch, opts: ForwardOptions) -> NodeId {
    if opts.watch_mci {
        fw.graph.watched(batch.mci.clone())
    } else {
        fw.graph.constant(batch.mci.clone())
    }
}

/// Graph-level forward of MERIT, MERIT_MINMAX or MERIT_PML.
pub fn merit_graph(
    spec: &ModelSpec,
    fw: &mut Forward,
    batch: &Batch,
    opts: ForwardOptions,
) -> Result<ForwardOutput> {
    if !spec.architecture.is_merit() {
        return Err(Error::InvalidArgument(format!(
            "{} is not a merchant-tower architecture",
            spec.architecture
        )));
    }
    if opts.mci_jacobian && spec.architecture == Architecture::MeritMinmax {
        return Err(Error::InvalidArgument(
            "in-graph MCI Jacobian is available for tanh merchant towers only".into(),
        ));
    }
    let e = embed(spec, fw, batch)?;
    let x_s = mci_node(fw, batch, opts);
    let mut logits = [e; 2];
    let mut jacobians = [None; 2];
    for (k, t) in Task::BOTH.into_iter().enumerate() {
        let e_task = spec.dcn(t).forward(fw, e)?;
        let psi = spec.psi(t).forward(fw, e_task)?;
        let phi = match spec.architecture {
            Architecture::MeritMinmax => spec.minmax(t).forward(fw, x_s)?,
            _ if opts.mci_jacobian => {
                let (out, jac) = spec.phi(t).forward_with_input_jacobian(fw, Some(e_task), x_s)?;
                jacobians[k] = Some(jac);
                out
            }
            _ => spec.phi(t).forward(fw, Some(e_task), x_s)?,
        };
        logits[k] = fw.graph.add(phi, psi)?;
    }
    let mut out = finish(fw, logits[0], logits[1], x_s)?;
    if let [Some(j_ctr), Some(j_cvr)] = jacobians {
        out.ctcvr_mci_jacobian = Some(ctcvr_jacobian(fw, &out, j_ctr, j_cvr)?);
    }
    Ok(out)
}

/// Chain rule through the sigmoid heads and the product:
/// `d(p_ctr p_cvr) = p_cvr p_ctr (1 - p_ctr) dlogit_ctr + p_ctr p_cvr (1 - p_cvr) dlogit_cvr`.
fn ctcvr_jacobian(
    fw: &mut Forward,
    out: &ForwardOutput,
    j_ctr: NodeId,
    j_cvr: NodeId,
) -> Result<NodeId> {
    let g = &mut fw.graph;
    let one = g.constant(Tensor::scalar(1.0));
    let q_ctr = g.sub(one, out.p_ctr)?;
    let q_cvr = g.sub(one, out.p_cvr)?;
    let a = g.mul(out.p_ctcvr, q_ctr)?;
    let b = g.mul(out.p_ctcvr, q_cvr)?;
    let ta = g.mul(a, j_ctr)?;
    let tb = g.mul(b, j_cvr)?;
    g.add(ta, tb)
}

/// Graph-level forward of DNN, SharedBottom, MMoE or CGC.
pub fn baseline_graph(
    spec: &ModelSpec,
    fw: &mut Forward,
    batch: &Batch,
    opts: ForwardOptions,
) -> Result<ForwardOutput> {
    if opts.mci_jacobian {
        return Err(Error::InvalidArgument(
            "in-graph MCI Jacobian is available for tanh merchant towers only".into(),
        ));
    }
    let e = embed(spec, fw, batch)?;
    let x_s = mci_node(fw, batch, opts);
    let flat = fw.graph.concat(&[e, x_s])?;
    let (ctr, cvr) = match spec.architecture {
        Architecture::Dnn => (
            spec.dnn_tower(Task::Ctr).forward(fw, flat)?,
            spec.dnn_tower(Task::Cvr).forward(fw, flat)?,
        ),
        Architecture::SharedBottom => {
            let h = spec.trunk_like("trunk".into()).forward(fw, flat)?;
            (
                spec.head(Task::Ctr).forward(fw, h)?,
                spec.head(Task::Cvr).forward(fw, h)?,
            )
        }
        Architecture::Mmoe | Architecture::Cgc => {
            let outs = spec
                .experts()
                .iter()
                .map(|x| x.forward(fw, flat))
                .collect::<Result<Vec<_>>>()?;
            let mut logits = Vec::with_capacity(2);
            for (k, t) in Task::BOTH.into_iter().enumerate() {
                let inputs = if spec.architecture == Architecture::Cgc {
                    vec![outs[0], outs[1 + k]]
                } else {
                    outs.clone()
                };
                let mixed = spec.gate(t).combine(fw, flat, &inputs)?;
                logits.push(spec.head(t).forward(fw, mixed)?);
            }
            (logits[0], logits[1])
        }
        other => {
            return Err(Error::InvalidArgument(format!("{other} is not a baseline architecture")))
        }
    };
    finish(fw, ctr, cvr, x_s)
}

/// Forward pass of any architecture.
pub fn forward_graph(
    spec: &ModelSpec,
    fw: &mut Forward,
    batch: &Batch,
    opts: ForwardOptions,
) -> Result<ForwardOutput> {
    if spec.architecture.is_merit() {
        merit_graph(spec, fw, batch, opts)
    } else {
        baseline_graph(spec, fw, batch, opts)
    }
}

fn run(
    spec: &ModelSpec,
    params: &ParamStore,
    batch: &Batch,
    dropout: Option<ChaCha8Rng>,
    merit: bool,
) -> Result<Predictions> {
    let mut fw = match dropout {
        Some(rng) => Forward::training(params, rng),
        None => Forward::inference(params),
    };
    let out = if merit {
        merit_graph(spec, &mut fw, batch, ForwardOptions::default())?
    } else {
        baseline_graph(spec, &mut fw, batch, ForwardOptions::default())?
    };
    let col = |id| fw.graph.value(id).data().to_vec();
    Ok(Predictions {
        p_ctr: col(out.p_ctr),
        p_cvr: col(out.p_cvr),
        p_ctcvr: col(out.p_ctcvr),
    })
}

/// MERIT-family predictions. `dropout` carries the mask stream in training
/// mode; `None` is inference.
pub fn merit_forward(
    spec: &ModelSpec,
    params: &ParamStore,
    batch: &Batch,
    dropout: Option<ChaCha8Rng>,
) -> Result<Predictions> {
    run(spec, params, batch, dropout, true)
}

/// Baseline predictions; see [`merit_forward`].
pub fn baseline_forward(
    spec: &ModelSpec,
    params: &ParamStore,
    batch: &Batch,
    dropout: Option<ChaCha8Rng>,
) -> Result<Predictions> {
    run(spec, params, batch, dropout, false)
}

/// A model specification together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: ParamStore,
}

const CHECKPOINT_MAGIC: &str = "merit-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

impl Model {
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Model> {
        let params = spec.init_params(seed)?;
        Ok(Model { spec, params })
    }

    pub fn from_parts(spec: ModelSpec, params: ParamStore) -> Result<Model> {
        spec.check_params(&params)?;
        Ok(Model { spec, params })
    }

    /// Inference on one batch.
    pub fn predict(&self, batch: &Batch) -> Result<Predictions> {
        run(&self.spec, &self.params, batch, None, self.spec.architecture.is_merit())
    }

    /// Inference over many impressions in fixed-size chunks, in parallel.
    /// Chunk boundaries do not depend on the thread count.
    pub fn predict_impressions(&self, impressions: &[Impression], chunk: usize) -> Result<Predictions> {
        let parts = impressions
            .par_chunks(chunk.max(1))
            .map(|c| {
                let b = Batch::from_impressions(&self.spec.schema, c)?;
                self.predict(&b)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut all = Predictions::default();
        for p in parts {
            all.extend(p);
        }
        Ok(all)
    }

    /// Serialize as a versioned text checkpoint. Values use the shortest
    /// representation that parses back to the same bits.
    pub fn write_checkpoint<W: Write>(&self, mut out: W) -> Result<()> {
        let mut s = String::new();
        writeln!(s, "{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}").unwrap();
        writeln!(s, "spec {}", serde_json::to_string(&self.spec)?).unwrap();
        writeln!(s, "params {}", self.params.len()).unwrap();
        for (name, p) in self.params.iter() {
            let kind = match p.kind {
                ParamKind::Weight => "weight",
                ParamKind::Bias => "bias",
            };
            write!(s, "{name} {kind} {}", p.value.shape().len()).unwrap();
            for d in p.value.shape() {
                write!(s, " {d}").unwrap();
            }
            s.push('\n');
            let mut first = true;
            for v in p.value.data() {
                if !first {
                    s.push(' ');
                }
                first = false;
                write!(s, "{v:e}").unwrap();
            }
            s.push('\n');
        }
        out.write_all(s.as_bytes())?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_checkpoint(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(input: R) -> Result<Model> {
        let mut lines = BufReader::new(input).lines();
        let mut line_no = 0u64;
        let mut next = |what: &str| -> Result<(u64, String)> {
            line_no += 1;
            match lines.next() {
                Some(l) => Ok((line_no, l?)),
                None => Err(Error::Parse {
                    line: line_no,
                    msg: format!("unexpected end of checkpoint, expected {what}"),
                }),
            }
        };
        let perr = |line: u64, msg: String| Error::Parse { line, msg };

        let (n, header) = next("header")?;
        let version = header
            .strip_prefix(CHECKPOINT_MAGIC)
            .map(str::trim)
            .ok_or_else(|| perr(n, "not a checkpoint file".into()))?;
        if version != CHECKPOINT_VERSION.to_string() {
            return Err(perr(n, format!("unsupported checkpoint version {version}")));
        }
        let (n, spec_line) = next("spec")?;
        let json = spec_line
            .strip_prefix("spec ")
            .ok_or_else(|| perr(n, "expected spec line".into()))?;
        let spec: ModelSpec =
            serde_json::from_str(json).map_err(|e| perr(n, format!("bad spec: {e}")))?;
        let (n, count_line) = next("parameter count")?;
        let count: usize = count_line
            .strip_prefix("params ")
            .and_then(|c| c.trim().parse().ok())
            .ok_or_else(|| perr(n, "expected parameter count".into()))?;

        let mut params = ParamStore::new();
        for _ in 0..count {
            let (n, head) = next("parameter header")?;
            let mut it = head.split_ascii_whitespace();
            let name = it.next().ok_or_else(|| perr(n, "missing name".into()))?;
            let kind = match it.next() {
                Some("weight") => ParamKind::Weight,
                Some("bias") => ParamKind::Bias,
                other => return Err(perr(n, format!("bad parameter kind {other:?}"))),
            };
            let ndim: usize = it
                .next()
                .and_then(|d| d.parse().ok())
                .ok_or_else(|| perr(n, "bad rank".into()))?;
            let shape = (0..ndim)
                .map(|_| it.next().and_then(|d| d.parse().ok()))
                .collect::<Option<Vec<usize>>>()
                .ok_or_else(|| perr(n, "bad shape".into()))?;
            if it.next().is_some() {
                return Err(perr(n, "trailing tokens after shape".into()));
            }
            let (n, body) = next("parameter values")?;
            let data = body
                .split_ascii_whitespace()
                .map(f64::from_str)
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| perr(n, format!("bad value: {e}")))?;
            let t = Tensor::new(shape, data).map_err(|e| perr(n, e.to_string()))?;
            if params.get(name).is_some() {
                return Err(perr(n, format!("duplicate parameter {name}")));
            }
            params.insert(name, t, kind);
        }
        Model::from_parts(spec, params)
    }

    pub fn load(path: &Path) -> Result<Model> {
        Model::read_checkpoint(std::fs::File::open(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, WorldConfig};

    fn small_data() -> (FeatureSchema, Vec<Impression>) {
        let cfg = WorldConfig {
            n_users: 50,
            n_hotels: 40,
            n_sessions: 6,
            test_sessions: 2,
            hotels_per_session: 5,
            ..WorldConfig::default()
        };
        let (_, data) = generate(&cfg).unwrap();
        (data.schema, data.train.impressions)
    }

    fn small_spec(arch: Architecture, schema: FeatureSchema) -> ModelSpec {
        ModelSpec {
            tower_sizes: vec![8, 4, 1],
            trunk_sizes: vec![8, 6],
            head_sizes: vec![4, 1],
            n_experts: 3,
            monotone_sizes: vec![5, 3, 1],
            minmax_groups: 3,
            minmax_units: 2,
            ..ModelSpec::new(arch, schema)
        }
    }

    #[test]
    fn architecture_tags_round_trip() {
        for a in Architecture::ALL {
            assert_eq!(a.as_str().parse::<Architecture>().unwrap(), a);
            let j = serde_json::to_string(&a).unwrap();
            assert_eq!(j, format!("\"{}\"", a.as_str()));
        }
        assert!(matches!(
            "PLE".parse::<Architecture>(),
            Err(Error::UnknownArchitecture(_))
        ));
    }

    #[test]
    fn entire_space_product_is_exact_for_all_architectures() {
        let (schema, imps) = small_data();
        let batch = Batch::from_impressions(&schema, &imps).unwrap();
        for a in Architecture::ALL {
            let m = Model::init(small_spec(a, schema.clone()), 3).unwrap();
            let p = m.predict(&batch).unwrap();
            assert_eq!(p.len(), imps.len());
            for i in 0..p.len() {
                assert_eq!(p.p_ctcvr[i].to_bits(), (p.p_ctr[i] * p.p_cvr[i]).to_bits(), "{a}");
                assert!(p.p_ctr[i] > 0.0 && p.p_ctr[i] < 1.0);
            }
        }
    }

    #[test]
    fn zero_heads_give_one_half() {
        let (schema, imps) = small_data();
        let batch = Batch::from_impressions(&schema, &imps).unwrap();
        let mut m = Model::init(small_spec(Architecture::Merit, schema), 5).unwrap();
        // zero the last layer of every tower so both logits vanish
        for (name, p) in m.params.iter_mut() {
            let last_psi = name.starts_with("psi.") && name.contains(".l2.");
            let phi_out = name.starts_with("phi.") && (name.ends_with(".b2"));
            if last_psi || phi_out {
                p.value = Tensor::zeros(p.value.shape());
            }
            if name.starts_with("phi.") && name.ends_with(".v2") {
                p.value = Tensor::full(p.value.shape(), -800.0);
            }
        }
        let p = m.predict(&batch).unwrap();
        assert!(p.p_ctr.iter().all(|&v| v == 0.5));
        assert!(p.p_cvr.iter().all(|&v| v == 0.5));
        assert!(p.p_ctcvr.iter().all(|&v| v == 0.25));
    }

    #[test]
    fn shared_bottom_identical_heads_agree() {
        let (schema, imps) = small_data();
        let batch = Batch::from_impressions(&schema, &imps).unwrap();
        let mut m = Model::init(small_spec(Architecture::SharedBottom, schema), 7).unwrap();
        let names: Vec<String> = m
            .params
            .iter()
            .filter(|(n, _)| n.starts_with("head.ctr"))
            .map(|(n, _)| n.clone())
            .collect();
        for n in names {
            let v = m.params.tensor(&n).unwrap().clone();
            m.params.set(&n.replace("head.ctr", "head.cvr"), v).unwrap();
        }
        let p = m.predict(&batch).unwrap();
        assert_eq!(p.p_ctr, p.p_cvr);
    }

    #[test]
    fn single_expert_mmoe_equals_shared_bottom() {
        let (schema, imps) = small_data();
        let batch = Batch::from_impressions(&schema, &imps).unwrap();
        let sb = Model::init(small_spec(Architecture::SharedBottom, schema.clone()), 7).unwrap();
        let mut spec = small_spec(Architecture::Mmoe, schema);
        spec.n_experts = 1;
        let mut mmoe = Model::init(spec, 8).unwrap();
        for (name, p) in sb.params.iter() {
            let target = name.replace("trunk", "expert0");
            mmoe.params.set(&target, p.value.clone()).unwrap();
        }
        assert_eq!(sb.predict(&batch).unwrap(), mmoe.predict(&batch).unwrap());
    }

    #[test]
    fn schema_mismatch_is_an_error() {
        let (schema, mut imps) = small_data();
        imps[0].indices.pop();
        assert!(Batch::from_impressions(&schema, &imps).is_err());
        let m = Model::init(small_spec(Architecture::Dnn, schema.clone()), 1).unwrap();
        let mut batch = Batch::from_impressions(&schema, &imps[1..]).unwrap();
        batch.fields.pop();
        assert!(m.predict(&batch).is_err());
    }

    #[test]
    fn inference_is_deterministic_and_dropout_seeded() {
        let (schema, imps) = small_data();
        let batch = Batch::from_impressions(&schema, &imps).unwrap();
        let m = Model::init(small_spec(Architecture::Merit, schema), 2).unwrap();
        assert_eq!(m.predict(&batch).unwrap(), m.predict(&batch).unwrap());
        let r = || Some(stream(1, Domain::Dropout, 0));
        let a = merit_forward(&m.spec, &m.params, &batch, r()).unwrap();
        let b = merit_forward(&m.spec, &m.params, &batch, r()).unwrap();
        assert_eq!(a, b);
        assert!(baseline_forward(&m.spec, &m.params, &batch, None).is_err());
    }

    #[test]
    fn merit_outputs_monotone_in_each_mci_coordinate() {
        let (schema, imps) = small_data();
        let batch = Batch::from_impressions(&schema, &imps).unwrap();
        for a in [Architecture::Merit, Architecture::MeritMinmax] {
            let m = Model::init(small_spec(a, schema.clone()), 4).unwrap();
            let base = m.predict(&batch).unwrap();
            for k in 0..MCI_DIM {
                let mut x = batch.mci.clone();
                for r in 0..batch.len() {
                    x.data_mut()[r * MCI_DIM + k] += 0.1;
                }
                let up = m.predict(&batch.with_mci(x).unwrap()).unwrap();
                for i in 0..batch.len() {
                    assert!(up.p_ctr[i] - base.p_ctr[i] >= -1e-9);
                    assert!(up.p_cvr[i] - base.p_cvr[i] >= -1e-9);
                    assert!(up.p_ctcvr[i] - base.p_ctcvr[i] >= -1e-9);
                }
            }
        }
    }

    #[test]
    fn in_graph_jacobian_matches_backward() {
        let (schema, imps) = small_data();
        let batch = Batch::from_impressions(&schema, &imps).unwrap();
        for a in [Architecture::Merit, Architecture::MeritPml] {
            let m = Model::init(small_spec(a, schema.clone()), 9).unwrap();
            let mut fw = Forward::inference(&m.params);
            let opts = ForwardOptions {
                watch_mci: true,
                mci_jacobian: true,
            };
            let out = forward_graph(&m.spec, &mut fw, &batch, opts).unwrap();
            let s = fw.graph.sum(out.p_ctcvr);
            let g = fw.graph.backward(s).unwrap();
            let jac = fw.graph.value(out.ctcvr_mci_jacobian.unwrap());
            for (x, y) in jac.data().iter().zip(g.get(out.mci).unwrap().data()) {
                assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()), "{x} {y}");
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let (schema, _) = small_data();
        for a in Architecture::ALL {
            let m = Model::init(small_spec(a, schema.clone()), 12).unwrap();
            let mut buf = Vec::new();
            m.write_checkpoint(&mut buf).unwrap();
            let back = Model::read_checkpoint(&buf[..]).unwrap();
            assert_eq!(back, m);
            let mut again = Vec::new();
            back.write_checkpoint(&mut again).unwrap();
            assert_eq!(buf, again);
        }
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let (schema, _) = small_data();
        let m = Model::init(small_spec(Architecture::Dnn, schema), 12).unwrap();
        let mut buf = Vec::new();
        m.write_checkpoint(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let bad_version = text.replacen("merit-checkpoint 1", "merit-checkpoint 9", 1);
        assert!(matches!(
            Model::read_checkpoint(bad_version.as_bytes()),
            Err(Error::Parse { line: 1, .. })
        ));
        let truncated: String = text.lines().take(5).map(|l| format!("{l}\n")).collect();
        assert!(Model::read_checkpoint(truncated.as_bytes()).is_err());
        let mut lines: Vec<&str> = text.lines().collect();
        lines[4] = "1.0 oops";
        assert!(matches!(
            Model::read_checkpoint(lines.join("\n").as_bytes()),
            Err(Error::Parse { line: 5, .. })
        ));
    }

    #[test]
    fn spec_validation() {
        let (schema, _) = small_data();
        let mut s = small_spec(Architecture::Merit, schema);
        s.monotone_sizes = vec![4, 2];
        assert!(s.validate().is_err());
        s.monotone_sizes = vec![4, 1];
        s.dropout = 1.0;
        assert!(s.validate().is_err());
    }
}
