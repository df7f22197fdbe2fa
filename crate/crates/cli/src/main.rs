use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use smnarx::dataset::{split_dataset, Split, TrajectoryDataset};
use smnarx::em::{fit, FitConfig, Variant};
use smnarx::metrics::{evaluate, write_mode_trace};
use smnarx::model::SmnarxModel;
use smnarx::simulate::{benchmark_system, simulate, TrueSystem};
use smnarx::study::{run_study, StudySettings};
use smnarx::tuning::grid_search_lambda;
use smnarx::BasisConfig;

#[derive(Parser)]
#[command(name = "smnarx", version, about = "Identify switched Markov polynomial NARX models")]
struct Cli {
    /// Worker threads (defaults to the number of cores).
    #[arg(long, global = true, env = "SMNARX_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a trajectory from the benchmark or a system JSON.
    Simulate(SimulateArgs),
    /// Fit a model to the training split of a dataset.
    Fit(FitArgs),
    /// Evaluate a fitted model on a dataset.
    Evaluate(EvaluateArgs),
    /// Select lambda by validation RMSE.
    GridSearch(GridArgs),
    /// Repeated simulate/fit/evaluate runs against a known system.
    Study(StudyArgs),
}

#[derive(Args)]
struct SystemArgs {
    /// Use the built-in three-mode benchmark system.
    #[arg(long, conflicts_with = "system")]
    benchmark: bool,
    /// True system JSON.
    #[arg(long)]
    system: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    system: SystemArgs,
    #[arg(long, default_value_t = 12000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Tag the output as train,validation,test sample counts.
    #[arg(long, value_parser = parse_split)]
    split: Option<(usize, usize, usize)>,
    #[arg(long, default_value_t = 200)]
    batch_len: usize,
    /// Dataset CSV to write.
    #[arg(long, short)]
    out: PathBuf,
    /// Where to write the true system JSON (default: next to the dataset).
    #[arg(long)]
    truth_out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Em,
    EmL1,
    #[value(name = "em-l1-2s")]
    EmL1TwoStage,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Variant {
        match v {
            VariantArg::Em => Variant::Em,
            VariantArg::EmL1 => Variant::EmL1,
            VariantArg::EmL1TwoStage => Variant::EmL1TwoStage,
        }
    }
}

#[derive(Args, Clone)]
struct EstimatorArgs {
    /// Use the benchmark orders and hyperparameters (the built-in defaults).
    #[arg(long)]
    benchmark_defaults: bool,
    #[arg(long, default_value_t = 3)]
    modes: usize,
    #[arg(long, default_value_t = 5e-4)]
    lambda: f64,
    #[arg(long, default_value_t = 5e-2)]
    upsilon: f64,
    #[arg(long, default_value_t = 10)]
    restarts: usize,
    #[arg(long, default_value_t = 100)]
    max_iters: usize,
    #[arg(long, default_value_t = 1e-2)]
    burn_in_tol: f64,
    #[arg(long, default_value_t = 1e-6)]
    converge_tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "em-l1-2s")]
    variant: VariantArg,
    #[arg(long = "na", default_value_t = 4)]
    n_a: usize,
    #[arg(long = "nb", default_value_t = 4)]
    n_b: usize,
    #[arg(long = "nd", default_value_t = 3)]
    n_d: usize,
}

impl EstimatorArgs {
    fn config(&self) -> anyhow::Result<FitConfig> {
        let cfg = if self.benchmark_defaults {
            FitConfig {
                seed: self.seed,
                ..FitConfig::default()
            }
        } else {
            FitConfig {
                modes: self.modes,
                variant: self.variant.into(),
                lambda: self.lambda,
                upsilon: self.upsilon,
                burn_in_tol: self.burn_in_tol,
                converge_tol: self.converge_tol,
                max_iters: self.max_iters,
                restarts: self.restarts,
                seed: self.seed,
                ..FitConfig::default()
            }
        };
        cfg.validate().map_err(|e| usage(anyhow!(e)))?;
        Ok(cfg)
    }

    fn basis(&self, q: usize) -> anyhow::Result<BasisConfig> {
        let (n_a, n_b, n_d) = if self.benchmark_defaults {
            (4, 4, 3)
        } else {
            (self.n_a, self.n_b, self.n_d)
        };
        BasisConfig::new(n_a, n_b, q, n_d).map_err(|e| usage(anyhow!(e)))
    }
}

#[derive(Args)]
struct FitArgs {
    /// Dataset CSV.
    data: PathBuf,
    #[command(flatten)]
    est: EstimatorArgs,
    /// Split an untagged dataset as train,validation,test sample counts.
    #[arg(long, value_parser = parse_split)]
    split: Option<(usize, usize, usize)>,
    #[arg(long, default_value_t = 200)]
    batch_len: usize,
    /// Fitted model JSON.
    #[arg(long, default_value = "model.json")]
    out: PathBuf,
    /// Fit report JSON.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Coefficient paths CSV (iteration, mode, term, value).
    #[arg(long)]
    paths: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Fitted model JSON (a fit report JSON also works).
    #[arg(long)]
    model: PathBuf,
    /// Dataset CSV.
    #[arg(long)]
    data: PathBuf,
    /// True system JSON for parameter and mode indexes.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long, default_value = "metrics.json")]
    out: PathBuf,
    /// Mode trace CSV (k, split, true mode, predicted mode).
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct GridArgs {
    /// Dataset CSV with a validation split.
    data: PathBuf,
    #[command(flatten)]
    est: EstimatorArgs,
    #[arg(long, value_parser = parse_window, default_value = "1e-6,1e1")]
    window: (f64, f64),
    #[arg(long, default_value_t = 8)]
    grid_size: usize,
    #[arg(long, default_value_t = 3)]
    patience: usize,
    #[arg(long, value_parser = parse_split)]
    split: Option<(usize, usize, usize)>,
    #[arg(long, default_value_t = 200)]
    batch_len: usize,
    /// Table CSV (lambda, validation RMSE, ...).
    #[arg(long, default_value = "lambda_table.csv")]
    out: PathBuf,
    /// Best lambda JSON.
    #[arg(long, default_value = "best_lambda.json")]
    best: PathBuf,
}

#[derive(Args)]
struct StudyArgs {
    #[command(flatten)]
    system: SystemArgs,
    #[arg(long, default_value_t = 100)]
    runs: usize,
    #[command(flatten)]
    est: EstimatorArgs,
    #[arg(long, value_parser = parse_split, default_value = "10000,1000,1000")]
    split: (usize, usize, usize),
    #[arg(long, default_value_t = 200)]
    batch_len: usize,
    /// Directory for runs.csv, coefficients.csv, indexes.csv, study.json.
    #[arg(long, default_value = "study")]
    out_dir: PathBuf,
}

fn parse_split(s: &str) -> Result<(usize, usize, usize), String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err("expected train,validation,test".into());
    }
    let p = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok((p(parts[0])?, p(parts[1])?, p(parts[2])?))
}

fn parse_window(s: &str) -> Result<(f64, f64), String> {
    let (lo, hi) = s.split_once(',').ok_or("expected lo,hi")?;
    let p = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("{v:?}: {e}"));
    let (lo, hi) = (p(lo)?, p(hi)?);
    if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
        return Err(format!("need 0 < lo <= hi, got {lo},{hi}"));
    }
    Ok((lo, hi))
}

/// Marks an error as a usage or IO problem (exit code 2).
#[derive(Debug)]
struct UsageError(anyhow::Error);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#}", self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(e: anyhow::Error) -> anyhow::Error {
    anyhow::Error::new(UsageError(e))
}

fn open(path: &Path) -> anyhow::Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| usage(anyhow!("cannot open {}: {e}", path.display())))
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)
            .map_err(|e| usage(anyhow!("cannot create {}: {e}", dir.display())))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| usage(anyhow!("cannot write {}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()
        .map_err(|e| usage(anyhow!("cannot write {}: {e}", path.display())))
}

fn read_dataset(path: &Path) -> anyhow::Result<TrajectoryDataset> {
    TrajectoryDataset::read_csv(open(path)?)
        .map_err(|e| usage(anyhow!("{}: {e}", path.display())))
}

fn read_system(args: &SystemArgs) -> anyhow::Result<TrueSystem> {
    match (&args.system, args.benchmark) {
        (Some(path), _) => {
            let sys: TrueSystem = serde_json::from_reader(open(path)?)
                .map_err(|e| usage(anyhow!("{}: {e}", path.display())))?;
            sys.validate()
                .map_err(|e| usage(anyhow!("{}: {e}", path.display())))?;
            Ok(sys)
        }
        (None, true) => Ok(benchmark_system()),
        (None, false) => Err(usage(anyhow!("pass --benchmark or --system <json>"))),
    }
}

fn read_model(path: &Path) -> anyhow::Result<SmnarxModel> {
    let value: serde_json::Value = serde_json::from_reader(open(path)?)
        .map_err(|e| usage(anyhow!("{}: {e}", path.display())))?;
    // fit reports nest the model under "model"
    let inner = match value.get("model") {
        Some(m) if m.get("theta").is_some() => m.clone(),
        _ => value,
    };
    serde_json::from_value(inner).map_err(|e| usage(anyhow!("{}: {e}", path.display())))
}

fn prepare(
    data: TrajectoryDataset,
    split: Option<(usize, usize, usize)>,
    batch_len: usize,
) -> anyhow::Result<TrajectoryDataset> {
    match split {
        Some((tr, va, te)) => split_dataset(&data, tr, va, te, batch_len).map_err(|e| usage(anyhow!(e))),
        None => Ok(data),
    }
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    args: Vec<String>,
    config: serde_json::Value,
    seeds: Vec<u64>,
    inputs: Vec<String>,
    outputs: Vec<String>,
    version: &'static str,
    wall_clock_seconds: f64,
}

impl RunManifest {
    fn write(self, primary: &Path) -> anyhow::Result<()> {
        let mut name = primary.as_os_str().to_owned();
        name.push(".manifest.json");
        write_json(Path::new(&name), &self)
    }
}

fn manifest(
    command: &str,
    config: serde_json::Value,
    seeds: Vec<u64>,
    inputs: &[&Path],
    outputs: &[&Path],
    started: Instant,
) -> RunManifest {
    RunManifest {
        command: command.into(),
        args: std::env::args().collect(),
        config,
        seeds,
        inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
        version: env!("CARGO_PKG_VERSION"),
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    }
}

fn cmd_simulate(args: SimulateArgs) -> anyhow::Result<()> {
    let started = Instant::now();
    let system = read_system(&args.system)?;
    let warm = system.model.basis.config().warm_up();
    if args.n <= warm {
        return Err(usage(anyhow!("--n {} must exceed the warm-up of {warm} samples", args.n)));
    }
    let data = simulate(&system, args.n, args.seed).context("simulation failed")?;
    let data = prepare(data, args.split, args.batch_len)?;
    let truth_out = args
        .truth_out
        .clone()
        .unwrap_or_else(|| args.out.with_extension("truth.json"));
    let mut w = create(&args.out)?;
    data.write_csv(&mut w, true)?;
    w.flush()?;
    write_json(&truth_out, &system)?;
    manifest(
        "simulate",
        json!({ "n": args.n, "split": args.split, "batch_len": args.batch_len }),
        vec![args.seed],
        &[],
        &[&args.out, &truth_out],
        started,
    )
    .write(&args.out)
}

fn cmd_fit(args: FitArgs) -> anyhow::Result<()> {
    let started = Instant::now();
    let config = args.est.config()?;
    let data = prepare(read_dataset(&args.data)?, args.split, args.batch_len)?;
    let q = data.input_dim().ok_or_else(|| usage(anyhow!("{} is empty", args.data.display())))?;
    let basis = args.est.basis(q)?;
    let config = FitConfig {
        record_paths: args.paths.is_some(),
        ..config
    };
    let report = fit(&data, basis, &config)?;
    log::info!(
        "selected restart {} after {} iterations (converged: {}), loglik {:.4}",
        report.restart_selected,
        report.iterations,
        report.converged,
        report.loglik_trace.last().copied().unwrap_or(f64::NAN)
    );
    write_json(&args.out, &report.model)?;
    let mut outputs = vec![args.out.as_path()];
    if let Some(path) = &args.report {
        write_json(path, &report)?;
        outputs.push(path);
    }
    if let Some(path) = &args.paths {
        let mut w = create(path)?;
        report.write_paths_csv(&mut w)?;
        w.flush()?;
        outputs.push(path);
    }
    manifest(
        "fit",
        serde_json::to_value(&config)?,
        vec![config.seed],
        &[&args.data],
        &outputs,
        started,
    )
    .write(&args.out)
}

fn cmd_evaluate(args: EvaluateArgs) -> anyhow::Result<()> {
    let started = Instant::now();
    let model = read_model(&args.model)?;
    let data = read_dataset(&args.data)?;
    let truth = match &args.truth {
        Some(p) => Some(read_system(&SystemArgs {
            benchmark: false,
            system: Some(p.clone()),
        })?),
        None => None,
    };
    if let Some(t) = &truth {
        if t.model.basis.terms() != model.basis.terms() {
            return Err(usage(anyhow!("model and truth use different bases")));
        }
    }
    let eval = evaluate(&model, &data, truth.as_ref().map(|t| &t.model))?;
    write_json(&args.out, &eval.report)?;
    let mut outputs = vec![args.out.as_path()];
    if let Some(path) = &args.trace {
        let mut w = create(path)?;
        write_mode_trace(&eval.trace, &mut w)?;
        w.flush()?;
        outputs.push(path);
    }
    let mut inputs = vec![args.model.as_path(), args.data.as_path()];
    if let Some(p) = &args.truth {
        inputs.push(p);
    }
    manifest("evaluate", json!({}), vec![], &inputs, &outputs, started).write(&args.out)
}

fn cmd_grid_search(args: GridArgs) -> anyhow::Result<()> {
    let started = Instant::now();
    if args.grid_size == 0 {
        return Err(usage(anyhow!("--grid-size must be at least 1")));
    }
    if args.patience == 0 {
        return Err(usage(anyhow!("--patience must be at least 1")));
    }
    let config = args.est.config()?;
    let data = prepare(read_dataset(&args.data)?, args.split, args.batch_len)?;
    if data.segments_in(Split::Validation).next().is_none() {
        return Err(usage(anyhow!("{} has no validation split", args.data.display())));
    }
    let q = data.input_dim().ok_or_else(|| usage(anyhow!("{} is empty", args.data.display())))?;
    let basis = args.est.basis(q)?;
    let result = grid_search_lambda(&data, basis, &config, args.window, args.grid_size, args.patience)?;
    let mut w = create(&args.out)?;
    writeln!(w, "lambda,rmse_validation,final_loglik,iterations,nonzero")?;
    for p in &result.table {
        writeln!(
            w,
            "{},{},{},{},{}",
            smnarx::dataset::fmt_f64(p.lambda),
            smnarx::dataset::fmt_f64(p.rmse_validation),
            smnarx::dataset::fmt_f64(p.final_loglik),
            p.iterations,
            p.nonzero
        )?;
    }
    w.flush()?;
    write_json(
        &args.best,
        &json!({ "best_lambda": result.best_lambda, "best_rmse": result.best_rmse, "skipped": result.skipped }),
    )?;
    manifest(
        "grid-search",
        json!({ "fit": config, "window": args.window, "grid_size": args.grid_size, "patience": args.patience }),
        vec![config.seed],
        &[&args.data],
        &[&args.out, &args.best],
        started,
    )
    .write(&args.out)
}

fn cmd_study(args: StudyArgs) -> anyhow::Result<()> {
    let started = Instant::now();
    if args.runs == 0 {
        return Err(usage(anyhow!("--runs must be at least 1")));
    }
    let system = read_system(&args.system)?;
    let config = args.est.config()?;
    let (train, validation, test) = args.split;
    let settings = StudySettings {
        train,
        validation,
        test,
        batch_len: args.batch_len,
        seed: args.est.seed,
        ..StudySettings::default()
    };
    let report = run_study(&system, &config, args.runs, &settings)?;
    if !report.failures.is_empty() {
        log::warn!("{} of {} runs failed", report.failures.len(), args.runs);
    }
    let dir = &args.out_dir;
    let paths = [
        dir.join("runs.csv"),
        dir.join("coefficients.csv"),
        dir.join("indexes.csv"),
        dir.join("study.json"),
    ];
    let mut w = create(&paths[0])?;
    report.write_runs_csv(&mut w)?;
    w.flush()?;
    let mut w = create(&paths[1])?;
    report.write_coefficients_csv(&mut w)?;
    w.flush()?;
    let mut w = create(&paths[2])?;
    report.write_indexes_csv(&mut w)?;
    w.flush()?;
    write_json(&paths[3], &report)?;
    let outputs: Vec<&Path> = paths.iter().map(PathBuf::as_path).collect();
    manifest(
        "study",
        json!({ "fit": config, "study": settings, "runs": args.runs, "failures": report.failures.len() }),
        vec![settings.seed],
        &[],
        &outputs,
        started,
    )
    .write(&paths[3])
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!(UsageError(anyhow!("--threads must be at least 1")));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("thread pool")?;
    }
    match cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::GridSearch(a) => cmd_grid_search(a),
        Command::Study(a) => cmd_study(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
