//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero when any criterion fails. Tolerances are pinned below.

use std::time::Instant;

use merit_core::datagen::WorldConfig;
use merit_core::harness::{
    evaluate, select_point, sweep_lambdas, train, ExperimentData, PairwiseLoss, SweepGrid,
    TrainConfig, DEFAULT_AUC_FLOOR,
};
use merit_core::models::{baseline_forward, merit_forward, Architecture, Model, ModelSpec};
use merit_core::objectives::{
    enumerate_session_pairs, pairwise_ctrcvr_loss, stratified_pairwise_loss,
    unstratified_pairwise_loss, ZRule,
};
use merit_core::rng::{stream, Domain};
use merit_core::verify::{
    entire_space_identity, gradient_checks, metric_oracle_mismatches, model_penalty,
    monotonicity_sweep, planted_anti_monotone, quick_train, random_batch,
    random_model_monotonicity, randomized_model, verification_data, MonotonicityStats,
    GRAD_TOL, PENALTY_ZERO_TOL, TRAINED_MONOTONE,
};
use merit_core::{Graph, Tensor};

const SEED: u64 = 42;
const GRAD_CONFIGS: usize = 20;
const RANDOM_MODELS: usize = 100;
const MONO_INPUTS: usize = 1000;
const ORACLE_INSTANCES: usize = 200;
const DIRECTIONAL_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const MIN_SEEDS_HOLDING: usize = 4;
const NDCG_GAIN: f64 = 0.01;
const AUC_LOSS: f64 = 0.01;
const TREND_NOISE: f64 = 0.002;

struct Outcome {
    passed: bool,
    detail: String,
}

fn check(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn gradients() -> Outcome {
    let checks = gradient_checks(GRAD_CONFIGS, SEED).expect("gradient checks run");
    let worst = checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    let failed: Vec<&str> = checks
        .iter()
        .filter(|c| !c.passed())
        .map(|c| c.name.as_str())
        .collect();
    check(
        failed.is_empty(),
        format!(
            "{} layers/losses x {GRAD_CONFIGS} configs, worst rel err {worst:.2e} (tol {GRAD_TOL:e}), failing {failed:?}",
            checks.len()
        ),
    )
}

fn monotonicity() -> Outcome {
    let data = verification_data(SEED).expect("data");
    let random = random_model_monotonicity(&data.schema, RANDOM_MODELS, MONO_INPUTS, SEED)
        .expect("random sweep");
    let mut trained = MonotonicityStats::default();
    for (arch, seed) in TRAINED_MONOTONE {
        let m = quick_train(arch, seed).expect("training");
        trained.merge(&monotonicity_sweep(&m, MONO_INPUTS, seed).expect("trained sweep"));
    }
    check(
        random.violations == 0 && trained.violations == 0,
        format!(
            "random: {} checks, {} violations; trained: {} checks, {} violations",
            random.checks, random.violations, trained.checks, trained.violations
        ),
    )
}

fn identity() -> Outcome {
    let data = verification_data(SEED).expect("data");
    let inference = entire_space_identity(&data.schema, MONO_INPUTS, SEED).expect("identity");
    let mut bad: usize = inference.iter().map(|(_, b)| b).sum();
    // training-mode passes draw dropout masks
    let mut rng = stream(SEED, Domain::Test, 0);
    let batch = random_batch(&data.schema, 256, &mut rng);
    for (k, arch) in Architecture::ALL.into_iter().enumerate() {
        let m = randomized_model(ModelSpec::new(arch, data.schema.clone()), SEED, 0.1).unwrap();
        let drop = Some(stream(SEED, Domain::Dropout, k as u64));
        let p = if arch.is_merit() {
            merit_forward(&m.spec, &m.params, &batch, drop)
        } else {
            baseline_forward(&m.spec, &m.params, &batch, drop)
        }
        .unwrap();
        bad += (0..p.len())
            .filter(|&i| (p.p_ctr[i] * p.p_cvr[i]).to_bits() != p.p_ctcvr[i].to_bits())
            .count();
    }
    check(
        bad == 0,
        format!(
            "{} architectures, inference and dropout passes, {bad} non-bitwise rows",
            Architecture::ALL.len()
        ),
    )
}

fn oracles() -> Outcome {
    let bad = metric_oracle_mismatches(ORACLE_INSTANCES, SEED).expect("oracles");
    check(bad == 0, format!("{ORACLE_INSTANCES} instances, {bad} mismatches"))
}

// Gradient of one pairwise term on the conflict batch y = [2, 0], z = [1, 4].
fn conflict_grad(rule: ZRule, which: u8) -> [f64; 2] {
    let y = [2u8, 0];
    let z = [1.0, 4.0];
    let pairs = enumerate_session_pairs(&y, &z, rule, 200, &mut stream(SEED, Domain::Pairs, 0)).unwrap();
    let mut g = Graph::new();
    let s = g.parameter(Tensor::new(vec![2, 1], vec![0.6, 0.4]).unwrap());
    let loss = match which {
        0 => pairwise_ctrcvr_loss(&mut g, s, &pairs),
        1 => stratified_pairwise_loss(&mut g, s, &pairs),
        _ => unstratified_pairwise_loss(&mut g, s, &pairs),
    }
    .unwrap();
    let grads = g.backward(loss).unwrap();
    let d = grads.get(s).map(|t| t.data().to_vec()).unwrap_or(vec![0.0, 0.0]);
    [d[0], d[1]]
}

fn conflict_masking() -> Outcome {
    let y_term = conflict_grad(ZRule::Stratified, 0);
    let mspl = conflict_grad(ZRule::Stratified, 1);
    let mpl = conflict_grad(ZRule::Unstratified, 2);
    let masked = mspl == [0.0, 0.0];
    let opposed = y_term[0] != 0.0 && mpl[0] != 0.0 && y_term[0].signum() == -mpl[0].signum();
    check(
        masked && opposed,
        format!("MSPL grad {mspl:?}; Y-term grad on s0 {:.4}, MPL grad on s0 {:.4}", y_term[0], mpl[0]),
    )
}

fn penalty() -> Outcome {
    let data = verification_data(SEED).expect("data");
    let mut rng = stream(SEED, Domain::Test, 1);
    let batch = random_batch(&data.schema, 512, &mut rng);
    let mut worst: f64 = 0.0;
    for arch in [Architecture::Merit, Architecture::MeritMinmax] {
        let m = randomized_model(ModelSpec::new(arch, data.schema.clone()), SEED, 0.5).unwrap();
        worst = worst.max(model_penalty(&m, &batch).unwrap());
    }
    for (arch, seed) in TRAINED_MONOTONE {
        let m = quick_train(arch, seed).unwrap();
        worst = worst.max(model_penalty(&m, &batch).unwrap());
    }
    let planted = model_penalty(&planted_anti_monotone(&data.schema, SEED).unwrap(), &batch).unwrap();
    check(
        worst < PENALTY_ZERO_TOL && planted > 0.0,
        format!("monotone models max {worst:.3e} (tol {PENALTY_ZERO_TOL:e}); planted anti-monotone {planted:.3e}"),
    )
}

fn config(arch: Architecture, pairwise: PairwiseLoss, seed: u64) -> TrainConfig {
    TrainConfig {
        architecture: arch,
        pairwise,
        seed,
        eval_each_epoch: false,
        world: WorldConfig {
            seed,
            ..WorldConfig::default()
        },
        ..TrainConfig::default()
    }
}

fn fit(c: &TrainConfig, data: &ExperimentData) -> (f64, f64) {
    let out = train(c, data).expect("training");
    let r = evaluate(&out.model, &data.test).expect("evaluation");
    (r.ndcg_20, r.ctcvr_auc.unwrap_or(f64::NAN))
}

fn directional() -> Outcome {
    let mut holding = 0;
    let mut rows = Vec::new();
    for seed in DIRECTIONAL_SEEDS {
        let base = config(Architecture::Dnn, PairwiseLoss::None, seed);
        let data = ExperimentData::for_config(&base).expect("data");
        let (n_dnn, a_dnn) = fit(&base, &data);
        let (n_mspl, a_mspl) = fit(&config(Architecture::Merit, PairwiseLoss::Mspl, seed), &data);
        let (n_mpl, _) = fit(&config(Architecture::Merit, PairwiseLoss::Mpl, seed), &data);
        let ok = n_mspl - n_dnn >= NDCG_GAIN && a_dnn - a_mspl <= AUC_LOSS && n_mspl >= n_mpl;
        holding += ok as usize;
        rows.push(format!(
            "seed {seed}: ndcg@20 dnn {n_dnn:.4} mspl {n_mspl:.4} mpl {n_mpl:.4}, ctcvr auc dnn {a_dnn:.4} mspl {a_mspl:.4} -> {}",
            if ok { "holds" } else { "fails" }
        ));
    }
    for r in &rows {
        println!("      {r}");
    }
    check(
        holding >= MIN_SEEDS_HOLDING,
        format!("holds on {holding}/{} seeds (need {MIN_SEEDS_HOLDING})", DIRECTIONAL_SEEDS.len()),
    )
}

fn trend() -> Outcome {
    let base = config(Architecture::Merit, PairwiseLoss::Mspl, SEED);
    let data = ExperimentData::for_config(&base).expect("data");
    let grid = SweepGrid::default();
    let result = sweep_lambdas(&base, &grid, DEFAULT_AUC_FLOOR, &data).expect("sweep");
    let mut row: Vec<_> = result.points.iter().filter(|p| p.lambda1 == 1.0).collect();
    row.sort_by(|a, b| a.lambda2.total_cmp(&b.lambda2));
    for p in &row {
        println!(
            "      lambda1 1.0 lambda2 {:<4} ndcg@20 {:.4} ctcvr auc {:.4}",
            p.lambda2, p.ndcg_20, p.ctcvr_auc
        );
    }
    let ndcg_ok = row.windows(2).all(|w| w[1].ndcg_20 >= w[0].ndcg_20 - TREND_NOISE);
    let auc_ok = row.windows(2).all(|w| w[1].ctcvr_auc <= w[0].ctcvr_auc + TREND_NOISE);
    let chosen = select_point(&result.points, DEFAULT_AUC_FLOOR);
    let unique = matches!(chosen, Some((_, false)));
    let pick = chosen
        .map(|(i, _)| format!("({}, {})", result.points[i].lambda1, result.points[i].lambda2))
        .unwrap_or_else(|| "none".into());
    check(
        row.len() == grid.lambda2.len() && ndcg_ok && auc_ok && unique,
        format!("ndcg non-decreasing {ndcg_ok}, auc non-increasing {auc_ok}, selected {pick} within floor {unique}"),
    )
}

fn determinism() -> Outcome {
    let mut c = config(Architecture::Merit, PairwiseLoss::Mspl, SEED);
    c.epochs = 2;
    c.world.n_sessions = 800;
    c.world.test_sessions = 200;
    c.eval_each_epoch = true;
    let data = ExperimentData::for_config(&c).expect("data");
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let out = train(&c, &data).unwrap();
            let mut ckpt = Vec::new();
            out.model.write_checkpoint(&mut ckpt).unwrap();
            let report = evaluate(&out.model, &data.test).unwrap().to_json().unwrap();
            (ckpt, report, serde_json::to_string(&out.history).unwrap())
        })
    };
    let a = run(1);
    let b = run(1);
    let c4 = run(4);
    let reloaded = Model::read_checkpoint(&a.0[..]).unwrap();
    let mut again = Vec::new();
    reloaded.write_checkpoint(&mut again).unwrap();
    let same = a == b && a == c4 && again == a.0;
    check(
        same,
        format!("two runs on 1 thread and one on 4 threads: checkpoints, histories and reports bitwise equal = {same}"),
    )
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 9] = [
        ("gradient correctness", gradients),
        ("structural monotonicity", monotonicity),
        ("entire-space identity", identity),
        ("metric oracle equivalence", oracles),
        ("stratified pairwise conflict masking", conflict_masking),
        ("pointwise monotonic penalty consistency", penalty),
        ("directional comparison with the DNN baseline", directional),
        ("lambda2 trend and selection rule", trend),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (k, (name, run)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let o = run();
        let secs = t.elapsed().as_secs_f64();
        failed += !o.passed as usize;
        println!(
            "{} [{}] {name}: {} ({secs:.1} s)",
            if o.passed { "PASS" } else { "FAIL" },
            k + 1,
            o.detail
        );
    }
    println!("acceptance: {}/{} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
