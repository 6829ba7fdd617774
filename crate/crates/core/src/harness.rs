//! Experiment plumbing: configs, the Adam training loop, evaluation, the
//! λ sweep and report files.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{generate, read_dataset, serialize_dataset, Dataset, Split, WorldConfig};
use crate::error::{Error, Result};
use crate::features::{FeatureSchema, Impression};
use crate::layers::{Forward, ParamKind, ParamStore};
use crate::metrics::{compute_report, MetricsReport};
use crate::models::{forward_graph, Architecture, Batch, ForwardOptions, Model, ModelSpec};
use crate::objectives::{
    combine_losses, enumerate_batch_pairs, esmm_pointwise_loss, monotonic_penalty_node,
    pairwise_loss, LossWeights, ZRule, DEFAULT_PAIR_CAP,
};
use crate::rng::{stream, Domain};
use crate::tensor::Tensor;

/// Which MCI pairwise term enters the loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairwiseLoss {
    /// Pointwise loss only.
    None,
    /// Label pairs plus unstratified MCI pairs.
    Mpl,
    /// Label pairs plus stratified MCI pairs.
    Mspl,
}

/// Layer sizes, overridable from a config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSizes {
    pub tower_sizes: Vec<usize>,
    pub trunk_sizes: Vec<usize>,
    pub head_sizes: Vec<usize>,
    pub dcn_depth: usize,
    pub n_experts: usize,
    pub monotone_sizes: Vec<usize>,
    pub minmax_groups: usize,
    pub minmax_units: usize,
}

impl Default for ModelSizes {
    fn default() -> Self {
        let d = ModelSpec::new(Architecture::Dnn, empty_schema());
        ModelSizes {
            tower_sizes: d.tower_sizes,
            trunk_sizes: d.trunk_sizes,
            head_sizes: d.head_sizes,
            dcn_depth: d.dcn_depth,
            n_experts: d.n_experts,
            monotone_sizes: d.monotone_sizes,
            minmax_groups: d.minmax_groups,
            minmax_units: d.minmax_units,
        }
    }
}

fn empty_schema() -> FeatureSchema {
    FeatureSchema::new(Vec::new(), Default::default(), crate::features::MciWeights::uniform())
        .expect("empty schema is valid")
}

/// Everything that determines one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub architecture: Architecture,
    pub pairwise: PairwiseLoss,
    pub learning_rate: f64,
    /// Target impressions per batch; batches hold whole sessions.
    pub batch_size: usize,
    pub l2: f64,
    pub dropout: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Weight of the pointwise monotonic penalty (MERIT_PML only).
    pub pml_weight: f64,
    pub pair_cap: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Evaluate on the test split after every epoch.
    pub eval_each_epoch: bool,
    pub model: ModelSizes,
    /// Directory holding `train.csv`, `test.csv` and `schema.json`; when
    /// absent the data is simulated from `world`.
    pub data_dir: Option<PathBuf>,
    pub world: WorldConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            architecture: Architecture::Merit,
            pairwise: PairwiseLoss::Mspl,
            learning_rate: 0.001,
            batch_size: 512,
            l2: 1e-5,
            dropout: 0.3,
            lambda1: 1.0,
            lambda2: 0.1,
            pml_weight: 1.0,
            pair_cap: DEFAULT_PAIR_CAP,
            epochs: 5,
            seed: 42,
            eval_each_epoch: true,
            model: ModelSizes::default(),
            data_dir: None,
            world: WorldConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.l2.is_finite() && self.l2 >= 0.0) {
            return bad(format!("l2 must be non-negative, got {}", self.l2));
        }
        if !(self.pml_weight.is_finite() && self.pml_weight >= 0.0) {
            return bad(format!("pml_weight must be non-negative, got {}", self.pml_weight));
        }
        if self.pair_cap == 0 {
            return bad("pair_cap must be positive".into());
        }
        self.loss_weights()?;
        Ok(())
    }

    pub fn loss_weights(&self) -> Result<LossWeights> {
        LossWeights::new(self.lambda1, self.lambda2)
    }

    pub fn model_spec(&self, schema: FeatureSchema) -> Result<ModelSpec> {
        let m = &self.model;
        let spec = ModelSpec {
            tower_sizes: m.tower_sizes.clone(),
            trunk_sizes: m.trunk_sizes.clone(),
            head_sizes: m.head_sizes.clone(),
            dcn_depth: m.dcn_depth,
            n_experts: m.n_experts,
            monotone_sizes: m.monotone_sizes.clone(),
            minmax_groups: m.minmax_groups,
            minmax_units: m.minmax_units,
            dropout: self.dropout,
            ..ModelSpec::new(self.architecture, schema)
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: TrainConfig = serde_json::from_str(s)?;
        c.validate()?;
        Ok(c)
    }
}

/// Schema plus both splits.
#[derive(Clone, Debug)]
pub struct ExperimentData {
    pub schema: FeatureSchema,
    pub train: Dataset,
    pub test: Dataset,
}

pub const TRAIN_FILE: &str = "train.csv";
pub const TEST_FILE: &str = "test.csv";
pub const SCHEMA_FILE: &str = "schema.json";

impl ExperimentData {
    pub fn simulate(world: &WorldConfig) -> Result<Self> {
        let (_, d) = generate(world)?;
        Ok(ExperimentData {
            schema: d.schema,
            train: d.train,
            test: d.test,
        })
    }

    /// Load the three files written by [`ExperimentData::save`].
    pub fn load(dir: &Path) -> Result<Self> {
        let schema = FeatureSchema::from_json(&std::fs::read_to_string(dir.join(SCHEMA_FILE))?)?;
        let train = read_dataset(&dir.join(TRAIN_FILE))?;
        let test = read_dataset(&dir.join(TEST_FILE))?;
        let data = ExperimentData {
            schema,
            train,
            test,
        };
        data.check()?;
        Ok(data)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(SCHEMA_FILE), self.schema.to_json()?)?;
        serialize_dataset(&self.train, &dir.join(TRAIN_FILE))?;
        serialize_dataset(&self.test, &dir.join(TEST_FILE))?;
        Ok(())
    }

    /// Data named by `config`: files if `data_dir` is set, else simulated.
    pub fn for_config(config: &TrainConfig) -> Result<Self> {
        match &config.data_dir {
            Some(dir) => Self::load(dir),
            None => Self::simulate(&config.world),
        }
    }

    fn check(&self) -> Result<()> {
        let names: Vec<&str> = self.schema.fields().iter().map(|f| f.name.as_str()).collect();
        for (d, split) in [(&self.train, Split::Train), (&self.test, Split::Test)] {
            let got: Vec<&str> = d.field_names.iter().map(String::as_str).collect();
            if got != names {
                return Err(Error::Schema(format!(
                    "{} split columns {:?} do not match schema fields {:?}",
                    split.as_str(),
                    got,
                    names
                )));
            }
        }
        Ok(())
    }
}

/// Adam with bias correction; moments are kept per parameter name.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every parameter that has a gradient.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::InvalidArgument(format!("gradient for unknown parameter {name}")))?;
            if p.value.shape() != g.shape() {
                return Err(Error::shape("adam", &[p.value.shape(), g.shape()]));
            }
            let n = g.len();
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            for ((w, &gi), (mi, vi)) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mh = *mi / c1;
                let vh = *vi / c2;
                *w -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Losses of one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub esmm: f64,
    pub pair_ctrcvr: f64,
    pub pair_mci: f64,
    pub penalty: f64,
}

/// Per-epoch training record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub batches: usize,
    /// Batch means of each loss component.
    pub loss: LossParts,
    pub test: Option<MetricsReport>,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub model: Model,
    pub history: Vec<EpochRecord>,
}

/// Group session ranges into batches of whole sessions holding at most
/// `target` impressions each (a longer single session forms its own batch).
pub fn session_batches(sessions: &[std::ops::Range<usize>], target: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur: Vec<usize> = Vec::new();
    let mut size = 0;
    for (k, s) in sessions.iter().enumerate() {
        let len = s.len();
        if !cur.is_empty() && size + len > target {
            out.push(std::mem::take(&mut cur));
            size = 0;
        }
        cur.push(k);
        size += len;
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Forward, loss and gradients of one batch. Returns the loss parts and
/// gradients keyed by parameter name, L2 included.
pub fn batch_gradients(
    config: &TrainConfig,
    spec: &ModelSpec,
    params: &ParamStore,
    impressions: &[Impression],
    step: u64,
) -> Result<(LossParts, BTreeMap<String, Tensor>)> {
    let batch = Batch::from_impressions(&spec.schema, impressions)?;
    let pml = spec.architecture == Architecture::MeritPml;
    let mut fw = Forward::training(params, stream(config.seed, Domain::Dropout, step));
    let opts = ForwardOptions {
        watch_mci: false,
        mci_jacobian: pml,
    };
    let out = forward_graph(spec, &mut fw, &batch, opts)?;
    let y: Vec<u8> = impressions.iter().map(|i| i.y).collect();
    let g = &mut fw.graph;
    let esmm = esmm_pointwise_loss(g, out.p_ctr, out.p_ctcvr, &y)?;
    let (pair_y, pair_z) = match config.pairwise {
        PairwiseLoss::None => {
            let zero = g.constant(Tensor::scalar(0.0));
            (zero, zero)
        }
        mode => {
            let rule = if mode == PairwiseLoss::Mspl {
                ZRule::Stratified
            } else {
                ZRule::Unstratified
            };
            let mut rng = stream(config.seed, Domain::Pairs, step);
            let pairs = enumerate_batch_pairs(impressions, rule, config.pair_cap, &mut rng)?;
            (
                pairwise_loss(g, out.p_ctcvr, &pairs.y_pairs())?,
                pairwise_loss(g, out.p_ctcvr, &pairs.z_pairs())?,
            )
        }
    };
    let weights = config.loss_weights()?;
    let mut total = combine_losses(g, esmm, pair_y, pair_z, weights)?;
    let mut penalty = 0.0;
    if let Some(jac) = out.ctcvr_mci_jacobian {
        let p = monotonic_penalty_node(g, jac);
        penalty = g.value(p).item();
        let weighted = g.scale(p, config.pml_weight);
        total = g.add(total, weighted)?;
    }
    let parts = LossParts {
        total: g.value(total).item(),
        esmm: g.value(esmm).item(),
        pair_ctrcvr: g.value(pair_y).item(),
        pair_mci: g.value(pair_z).item(),
        penalty,
    };
    if !parts.total.is_finite() {
        let first = impressions.first().map(|i| i.session_id);
        let last = impressions.last().map(|i| i.session_id);
        return Err(Error::NonFinite(format!(
            "training loss at step {step} (sessions {first:?}..={last:?}, {} impressions): {parts:?}",
            impressions.len()
        )));
    }
    let mut grads = fw.graph.backward(total)?;
    let mut named = BTreeMap::new();
    for (name, p) in params.iter() {
        let mut gt = fw
            .bindings()
            .get(name)
            .and_then(|&id| grads.take(id))
            .unwrap_or_else(|| Tensor::zeros(p.value.shape()));
        if p.kind == ParamKind::Weight && config.l2 > 0.0 {
            let c = 2.0 * config.l2;
            for (gi, &w) in gt.data_mut().iter_mut().zip(p.value.data()) {
                *gi += c * w;
            }
        }
        named.insert(name.clone(), gt);
    }
    Ok((parts, named))
}

/// Train a fresh model on `data.train`; deterministic given the config.
pub fn train(config: &TrainConfig, data: &ExperimentData) -> Result<TrainOutput> {
    config.validate()?;
    if data.train.is_empty() {
        return Err(Error::InvalidArgument("training split is empty".into()));
    }
    let spec = config.model_spec(data.schema.clone())?;
    let mut model = Model::init(spec, config.seed)?;
    let mut adam = Adam::new(config.learning_rate);
    let sessions = data.train.sessions();
    let mut history = Vec::with_capacity(config.epochs);
    let mut step = 0u64;
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..sessions.len()).collect();
        rand::seq::SliceRandom::shuffle(
            &mut order[..],
            &mut stream(config.seed, Domain::Shuffle, epoch as u64),
        );
        let shuffled: Vec<std::ops::Range<usize>> = order.iter().map(|&k| sessions[k].clone()).collect();
        let batches = session_batches(&shuffled, config.batch_size);
        let mut sums = LossParts::default();
        let mut rows: Vec<Impression> = Vec::with_capacity(config.batch_size * 2);
        for b in &batches {
            rows.clear();
            for &k in b {
                rows.extend_from_slice(&data.train.impressions[shuffled[k].clone()]);
            }
            let (parts, grads) = batch_gradients(config, &model.spec, &model.params, &rows, step)?;
            adam.step(&mut model.params, &grads)?;
            step += 1;
            sums.total += parts.total;
            sums.esmm += parts.esmm;
            sums.pair_ctrcvr += parts.pair_ctrcvr;
            sums.pair_mci += parts.pair_mci;
            sums.penalty += parts.penalty;
        }
        let n = batches.len() as f64;
        let loss = LossParts {
            total: sums.total / n,
            esmm: sums.esmm / n,
            pair_ctrcvr: sums.pair_ctrcvr / n,
            pair_mci: sums.pair_mci / n,
            penalty: sums.penalty / n,
        };
        let test = if config.eval_each_epoch && !data.test.is_empty() {
            Some(evaluate(&model, &data.test)?)
        } else {
            None
        };
        log::info!(
            "{} epoch {}: loss {:.5} ndcg@20 {:?} ctcvr_auc {:?}",
            model.spec.architecture,
            epoch + 1,
            loss.total,
            test.as_ref().map(|t| t.ndcg_20),
            test.as_ref().and_then(|t| t.ctcvr_auc)
        );
        history.push(EpochRecord {
            epoch: epoch + 1,
            batches: batches.len(),
            loss,
            test,
        });
    }
    Ok(TrainOutput { model, history })
}

/// Impressions scored per inference chunk.
pub const EVAL_CHUNK: usize = 2048;

/// Inference-mode metrics of `model` on `dataset`.
pub fn evaluate(model: &Model, dataset: &Dataset) -> Result<MetricsReport> {
    let pred = model.predict_impressions(&dataset.impressions, EVAL_CHUNK)?;
    compute_report(&pred, &dataset.impressions)
}

/// λ grid of a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub lambda1: Vec<f64>,
    pub lambda2: Vec<f64>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        SweepGrid {
            lambda1: vec![0.1, 0.5, 1.0],
            lambda2: vec![0.01, 0.05, 0.1, 0.2],
        }
    }
}

impl SweepGrid {
    pub fn points(&self) -> Vec<(f64, f64)> {
        self.lambda1
            .iter()
            .flat_map(|&a| self.lambda2.iter().map(move |&b| (a, b)))
            .collect()
    }
}

/// Tolerated CTCVR AUC drop below the best grid point.
pub const DEFAULT_AUC_FLOOR: f64 = 0.005;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub lambda1: f64,
    pub lambda2: f64,
    pub ctcvr_auc: f64,
    pub ndcg_20: f64,
    pub report: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub points: Vec<SweepPoint>,
    /// Index into `points`; `None` only for an empty sweep.
    pub chosen: Option<usize>,
    pub auc_floor: f64,
    /// True when no point met the floor and the best-AUC point was taken.
    pub fallback: bool,
}

/// Selection rule: among points whose CTCVR AUC is within `floor` of the
/// best, take the largest NDCG@20; ties go to larger λ2, then larger λ1.
/// Returns the index and whether the fallback (best AUC) was used.
pub fn select_point(points: &[SweepPoint], floor: f64) -> Option<(usize, bool)> {
    let best = points.iter().map(|p| p.ctcvr_auc).fold(f64::NEG_INFINITY, f64::max);
    if points.is_empty() {
        return None;
    }
    let key = |p: &SweepPoint| (p.ndcg_20, p.lambda2, p.lambda1);
    let feasible = points
        .iter()
        .enumerate()
        .filter(|(_, p)| p.ctcvr_auc >= best - floor)
        .max_by(|(_, a), (_, b)| {
            let (ka, kb) = (key(a), key(b));
            ka.0.total_cmp(&kb.0)
                .then(ka.1.total_cmp(&kb.1))
                .then(ka.2.total_cmp(&kb.2))
        })
        .map(|(i, _)| i);
    match feasible {
        Some(i) => Some((i, false)),
        None => {
            // only reachable with NaN AUCs or a negative floor
            log::warn!("no sweep point within the AUC floor; taking the best-AUC point");
            let i = points
                .iter()
                .enumerate()
                .filter(|(_, p)| !p.ctcvr_auc.is_nan())
                .max_by(|a, b| a.1.ctcvr_auc.total_cmp(&b.1.ctcvr_auc))
                .map_or(0, |(i, _)| i);
            Some((i, true))
        }
    }
}

/// Train and evaluate every grid point (in parallel), then apply the
/// selection rule.
pub fn sweep_lambdas(
    base: &TrainConfig,
    grid: &SweepGrid,
    auc_floor: f64,
    data: &ExperimentData,
) -> Result<SweepResult> {
    let mut quiet = base.clone();
    quiet.eval_each_epoch = false;
    let points = grid
        .points()
        .into_par_iter()
        .map(|(l1, l2)| {
            let mut c = quiet.clone();
            c.lambda1 = l1;
            c.lambda2 = l2;
            let out = train(&c, data)?;
            let report = evaluate(&out.model, &data.test)?;
            Ok(SweepPoint {
                lambda1: l1,
                lambda2: l2,
                ctcvr_auc: report.ctcvr_auc.unwrap_or(f64::NAN),
                ndcg_20: report.ndcg_20,
                report,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let sel = select_point(&points, auc_floor);
    Ok(SweepResult {
        chosen: sel.map(|s| s.0),
        fallback: sel.is_some_and(|s| s.1),
        points,
        auc_floor,
    })
}

/// Column names of the sweep CSV.
pub fn sweep_csv_header() -> Vec<String> {
    ["lambda1", "lambda2", "chosen", "feasible"]
        .iter()
        .map(|s| s.to_string())
        .chain(MetricsReport::CSV_COLUMNS.iter().map(|s| s.to_string()))
        .collect()
}

/// Per-point CSV, suitable for plotting AUC and NDCG against λ.
pub fn write_sweep_csv<W: Write>(result: &SweepResult, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(sweep_csv_header())?;
    let best = result
        .points
        .iter()
        .map(|p| p.ctcvr_auc)
        .fold(f64::NEG_INFINITY, f64::max);
    for (i, p) in result.points.iter().enumerate() {
        let mut row = vec![
            p.lambda1.to_string(),
            p.lambda2.to_string(),
            (result.chosen == Some(i)).to_string(),
            (p.ctcvr_auc >= best - result.auc_floor).to_string(),
        ];
        row.extend(p.report.csv_values());
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Per-epoch loss and test-metric history as CSV.
pub fn write_history_csv<W: Write>(history: &[EpochRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = ["epoch", "batches", "loss", "esmm", "pair_ctrcvr", "pair_mci", "penalty"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(MetricsReport::CSV_COLUMNS.iter().map(|c| format!("test_{c}")));
    w.write_record(&header)?;
    for r in history {
        let mut row = vec![
            r.epoch.to_string(),
            r.batches.to_string(),
            r.loss.total.to_string(),
            r.loss.esmm.to_string(),
            r.loss.pair_ctrcvr.to_string(),
            r.loss.pair_mci.to_string(),
            r.loss.penalty.to_string(),
        ];
        match &r.test {
            Some(t) => row.extend(t.csv_values()),
            None => row.extend(std::iter::repeat_n(String::new(), MetricsReport::CSV_COLUMNS.len())),
        }
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Output formats of [`emit_report`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

/// Anything that can be written as a report file.
pub enum Report<'a> {
    Metrics(&'a MetricsReport),
    Sweep(&'a SweepResult),
}

/// Write a metrics report or sweep result to `path`.
pub fn emit_report(report: Report<'_>, format: ReportFormat, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    match (report, format) {
        (Report::Metrics(m), ReportFormat::Json) => {
            serde_json::to_writer_pretty(file, m)?;
        }
        (Report::Metrics(m), ReportFormat::Csv) => {
            let mut f = file;
            f.write_all(m.to_csv()?.as_bytes())?;
            f.flush()?;
        }
        (Report::Sweep(s), ReportFormat::Json) => {
            serde_json::to_writer_pretty(file, s)?;
        }
        (Report::Sweep(s), ReportFormat::Csv) => write_sweep_csv(s, file)?,
    }
    Ok(())
}
