//! `merit` command-line interface.
//!
//! Every subcommand prints one JSON object on stdout when it succeeds. On
//! failure it prints `{"error": <kind>, "message": <text>}` on stderr and
//! exits nonzero: 2 for usage errors, 3 for failed verification, 1 otherwise.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use merit_core::datagen::serialize_dataset;
use merit_core::harness::{
    emit_report, write_history_csv, Report, ReportFormat, DEFAULT_AUC_FLOOR, SCHEMA_FILE,
    TEST_FILE, TRAIN_FILE,
};
use merit_core::{
    evaluate, run_verification, sweep_lambdas, train, ExperimentData, Model, SweepGrid,
    TrainConfig, VerifyOptions, WorldConfig,
};
use serde_json::json;

#[derive(Parser, Debug)]
#[command(name = "merit", version, about = "Merchant-incentive ranking toolkit")]
struct Cli {
    #[command(flatten)]
    global: GlobalOpts,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalOpts {
    /// JSON config file (world config for `gen`, training config otherwise).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed of the config (training and simulation).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (`gen`, `train`, `sweep`) or file (`eval`, `verify`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for parallel sections; results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a dataset and write train.csv, test.csv and schema.json.
    Gen,
    /// Train a model, then write its checkpoint, history and test metrics.
    Train {
        /// Dataset directory written by `gen`; overrides the config.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split of a dataset directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Train every (lambda1, lambda2) grid point and apply the selection rule.
    Sweep {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Comma-separated lambda1 values.
        #[arg(long, value_delimiter = ',')]
        lambda1: Option<Vec<f64>>,
        /// Comma-separated lambda2 values.
        #[arg(long, value_delimiter = ',')]
        lambda2: Option<Vec<f64>>,
        /// Tolerated CTCVR AUC drop below the best point.
        #[arg(long, default_value_t = DEFAULT_AUC_FLOOR)]
        floor: f64,
    },
    /// Gradient, monotonicity, identity, penalty and metric self-checks.
    Verify {
        /// Smaller sizes and no trained models.
        #[arg(long)]
        quick: bool,
    },
}

/// Error carrying its own machine-readable kind and exit code.
#[derive(Debug)]
struct Tagged {
    kind: &'static str,
    code: u8,
    message: String,
}

impl std::fmt::Display for Tagged {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Tagged {}

fn usage(message: impl Into<String>) -> anyhow::Error {
    Tagged {
        kind: "usage",
        code: 2,
        message: message.into(),
    }
    .into()
}

fn classify(err: &anyhow::Error) -> (&'static str, u8) {
    for cause in err.chain() {
        if let Some(t) = cause.downcast_ref::<Tagged>() {
            return (t.kind, t.code);
        }
        if let Some(e) = cause.downcast_ref::<merit_core::Error>() {
            return (e.kind(), 1);
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            return ("json", 1);
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return ("io", 1);
        }
    }
    ("runtime", 1)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail(&usage(e.to_string().trim().to_string())),
    };
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => fail(&e),
    }
}

fn fail(err: &anyhow::Error) -> ExitCode {
    let (kind, code) = classify(err);
    let message = format!("{err:#}");
    eprintln!("{}", json!({ "error": kind, "message": message }));
    ExitCode::from(code)
}

fn run(cli: Cli) -> anyhow::Result<serde_json::Value> {
    if let Some(n) = cli.global.threads {
        if n == 0 {
            return Err(usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let g = &cli.global;
    match &cli.command {
        Command::Gen => cmd_gen(g),
        Command::Train { data } => cmd_train(g, data.as_deref()),
        Command::Eval { checkpoint, data } => cmd_eval(g, checkpoint, data),
        Command::Sweep {
            data,
            lambda1,
            lambda2,
            floor,
        } => cmd_sweep(g, data.as_deref(), lambda1.clone(), lambda2.clone(), *floor),
        Command::Verify { quick } => cmd_verify(g, *quick),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn require_out(g: &GlobalOpts) -> anyhow::Result<&Path> {
    g.out
        .as_deref()
        .ok_or_else(|| usage("--out is required for this command"))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn cmd_gen(g: &GlobalOpts) -> anyhow::Result<serde_json::Value> {
    let out = require_out(g)?;
    let mut world: WorldConfig = match &g.config {
        Some(p) => read_json(p)?,
        None => WorldConfig::default(),
    };
    if let Some(s) = g.seed {
        world.seed = s;
    }
    world.validate()?;
    let data = ExperimentData::simulate(&world)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    std::fs::write(out.join(SCHEMA_FILE), data.schema.to_json()?)?;
    serialize_dataset(&data.train, &out.join(TRAIN_FILE))?;
    serialize_dataset(&data.test, &out.join(TEST_FILE))?;
    write_json(&out.join("world.json"), &world)?;
    Ok(json!({
        "command": "gen",
        "out": out,
        "seed": world.seed,
        "train_impressions": data.train.len(),
        "test_impressions": data.test.len(),
        "train_ctr": data.train.click_rate(),
        "train_cvr": data.train.conversion_rate(),
    }))
}

fn train_config(g: &GlobalOpts, data: Option<&Path>) -> anyhow::Result<TrainConfig> {
    let mut config: TrainConfig = match &g.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = g.seed {
        config.seed = s;
        config.world.seed = s;
    }
    if let Some(d) = data {
        config.data_dir = Some(d.to_path_buf());
    }
    config.validate()?;
    Ok(config)
}

fn cmd_train(g: &GlobalOpts, data: Option<&Path>) -> anyhow::Result<serde_json::Value> {
    let out = require_out(g)?;
    let config = train_config(g, data)?;
    let data = ExperimentData::for_config(&config)?;
    let result = train(&config, &data)?;
    let report = evaluate(&result.model, &data.test)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    result.model.save(&out.join("model.ckpt"))?;
    write_json(&out.join("config.json"), &config)?;
    let history = std::fs::File::create(out.join("history.csv"))?;
    write_history_csv(&result.history, std::io::BufWriter::new(history))?;
    emit_report(Report::Metrics(&report), ReportFormat::Json, &out.join("metrics.json"))?;
    emit_report(Report::Metrics(&report), ReportFormat::Csv, &out.join("metrics.csv"))?;
    Ok(json!({
        "command": "train",
        "out": out,
        "architecture": config.architecture,
        "epochs": config.epochs,
        "seed": config.seed,
        "metrics": report,
    }))
}

fn cmd_eval(g: &GlobalOpts, checkpoint: &Path, data: &Path) -> anyhow::Result<serde_json::Value> {
    if g.config.is_some() || g.seed.is_some() {
        return Err(usage("eval takes no --config or --seed"));
    }
    let model = Model::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let test = merit_core::datagen::read_dataset(&data.join(TEST_FILE))?;
    let report = evaluate(&model, &test)?;
    if let Some(out) = &g.out {
        let format = match out.extension().and_then(|e| e.to_str()) {
            Some("csv") => ReportFormat::Csv,
            Some("json") => ReportFormat::Json,
            _ => bail!(usage("--out must end in .json or .csv")),
        };
        emit_report(Report::Metrics(&report), format, out)?;
    }
    Ok(json!({ "command": "eval", "metrics": report }))
}

fn cmd_sweep(
    g: &GlobalOpts,
    data: Option<&Path>,
    lambda1: Option<Vec<f64>>,
    lambda2: Option<Vec<f64>>,
    floor: f64,
) -> anyhow::Result<serde_json::Value> {
    let out = require_out(g)?;
    if !(floor.is_finite() && floor >= 0.0) {
        return Err(usage("--floor must be a non-negative number"));
    }
    let config = train_config(g, data)?;
    let mut grid = SweepGrid::default();
    if let Some(l) = lambda1 {
        grid.lambda1 = l;
    }
    if let Some(l) = lambda2 {
        grid.lambda2 = l;
    }
    if grid.points().is_empty() {
        return Err(usage("the lambda grid is empty"));
    }
    let data = ExperimentData::for_config(&config)?;
    let result = sweep_lambdas(&config, &grid, floor, &data)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    emit_report(Report::Sweep(&result), ReportFormat::Json, &out.join("sweep.json"))?;
    emit_report(Report::Sweep(&result), ReportFormat::Csv, &out.join("sweep.csv"))?;
    let chosen = result.chosen.map(|i| &result.points[i]);
    Ok(json!({
        "command": "sweep",
        "out": out,
        "points": result.points.len(),
        "fallback": result.fallback,
        "chosen": chosen.map(|p| json!({
            "lambda1": p.lambda1,
            "lambda2": p.lambda2,
            "ctcvr_auc": p.ctcvr_auc,
            "ndcg_20": p.ndcg_20,
        })),
    }))
}

fn cmd_verify(g: &GlobalOpts, quick: bool) -> anyhow::Result<serde_json::Value> {
    if g.config.is_some() {
        return Err(usage("verify takes no --config"));
    }
    let mut opts = VerifyOptions::default();
    if quick {
        opts.grad_configs = 3;
        opts.random_models = 4;
        opts.inputs = 100;
        opts.metric_instances = 50;
        opts.trained = false;
    }
    if let Some(s) = g.seed {
        opts.seed = s;
    }
    let report = run_verification(&opts)?;
    if let Some(out) = &g.out {
        write_json(out, &report)?;
    }
    if !report.passed() {
        let failed: Vec<&str> = report
            .checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.name.as_str())
            .collect();
        return Err(Tagged {
            kind: "verification_failed",
            code: 3,
            message: format!("failed checks: {}", failed.join(", ")),
        }
        .into());
    }
    Ok(json!({ "command": "verify", "passed": true, "checks": report.checks }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classify_prefers_tagged_errors() {
        let e = usage("bad flag").context("outer");
        assert_eq!(classify(&e), ("usage", 2));
    }

    #[test]
    fn classify_maps_library_and_io_errors() {
        let lib: anyhow::Error = merit_core::Error::Config("x".into()).into();
        assert_eq!(classify(&lib), ("config", 1));
        let io: anyhow::Error = std::io::Error::other("gone").into();
        assert_eq!(classify(&io.context("reading")), ("io", 1));
        assert_eq!(classify(&anyhow::anyhow!("plain")), ("runtime", 1));
    }

    #[test]
    fn global_flags_parse_after_the_subcommand() {
        let cli = Cli::try_parse_from(["merit", "sweep", "--lambda2", "0.1,0.2", "--seed", "3", "--out", "o"]).unwrap();
        assert_eq!(cli.global.seed, Some(3));
        match cli.command {
            Command::Sweep { lambda2, floor, .. } => {
                assert_eq!(lambda2, Some(vec![0.1, 0.2]));
                assert_eq!(floor, DEFAULT_AUC_FLOOR);
            }
            other => panic!("{other:?}"),
        }
    }
}
