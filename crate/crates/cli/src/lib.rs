//! Command-line driver: `simulate`, `fit`, `eval` and `bench`.

pub mod bench;
pub mod config;

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use log::info;

use sparse_prs::evaluate::{support_similarity, write_report, EvalReport, Metric};
use sparse_prs::genotype::{read_gts, read_phenotype_csv, write_gts, write_phenotype_csv, GenotypeMatrix, PhenotypeTable};
use sparse_prs::pipeline::{
    evaluate_rows, fit_model, read_external_scores, split, Composition, FittedModel, Method, PipelineConfig, SplitSpec,
};
use sparse_prs::simulate::{simulate_genotypes, simulate_phenotype, SimConfig};
use sparse_prs::solver::SolverConfig;
use sparse_prs::{Family, PrsError};

use bench::{run_bench, summarize, write_runs, write_summary, BenchConfig, BenchMethod};
use config::{parse_assignment, parse_seeds, Settings, BENCH_KEYS, EVAL_KEYS, FIT_KEYS, SIMULATE_KEYS, SIMULATION_KEYS, SOLVER_KEYS};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags, config keys or values. Exit code 2.
    #[error("{0}")]
    Usage(String),
    /// Failure while running. Exit code 1.
    #[error(transparent)]
    Runtime(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<PrsError> for CliError {
    fn from(e: PrsError) -> Self {
        CliError::Runtime(e.into())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

#[derive(Debug, Parser)]
#[command(name = "sparse-prs", version, about = "Sparse polygenic risk scores with univariate-guided lasso")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate LD-block genotypes, a phenotype and the true effects.
    Simulate(SimulateArgs),
    /// Fit lasso, uniLasso or uniLasso-ES and write the model.
    Fit(FitArgs),
    /// Score fitted models on held-out rows.
    Eval(EvalArgs),
    /// Simulate, fit and evaluate over several seeds.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// Flat `key = value` settings file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one setting; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE", allow_hyphen_values = true)]
    set: Vec<String>,
    #[arg(long, allow_hyphen_values = true)]
    seed: Option<String>,
    /// Thread count; 0 uses every core.
    #[arg(long, allow_hyphen_values = true)]
    workers: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<String>,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, allow_hyphen_values = true)]
    n: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    p: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    n_causal: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    heritability: Option<String>,
    #[arg(long)]
    family: Option<String>,
}

#[derive(Debug, Args)]
struct FitArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    genotypes: Option<String>,
    #[arg(long)]
    phenotype: Option<String>,
    /// Sample ids in genotype row order, one per line.
    #[arg(long)]
    samples: Option<String>,
    #[arg(long)]
    external_scores: Option<String>,
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    family: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    maf_threshold: Option<String>,
    #[arg(long)]
    composition: Option<String>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Model file; repeat to compare several.
    #[arg(long)]
    model: Vec<String>,
    #[arg(long)]
    genotypes: Option<String>,
    #[arg(long)]
    phenotype: Option<String>,
    #[arg(long)]
    samples: Option<String>,
    #[arg(long)]
    metric: Option<String>,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[command(flatten)]
    common: Common,
    /// Seed list, e.g. `1-10` or `1,4,9`.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    methods: Option<String>,
    #[arg(long)]
    families: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    n: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    p: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    maf_threshold: Option<String>,
    #[arg(long)]
    composition: Option<String>,
}

fn start() -> Instant {
    static START: OnceLock<Instant> = OnceLock::new();
    *START.get_or_init(Instant::now)
}

pub fn init_logging() {
    let t0 = start();
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format(move |buf, record| {
            writeln!(buf, "[{:>9.3}s] {:<5} {}", t0.elapsed().as_secs_f64(), record.level(), record.args())
        })
        .try_init();
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            match &e {
                CliError::Usage(msg) => eprintln!("error: {msg}"),
                CliError::Runtime(err) => eprintln!("error: {err:#}"),
            }
            e.exit_code()
        }
    }
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate(a) => {
            let named = [
                ("n", a.n),
                ("p", a.p),
                ("n_causal", a.n_causal),
                ("heritability", a.heritability),
                ("family", a.family),
            ];
            let settings = resolve("simulate", &[SIMULATION_KEYS, SIMULATE_KEYS], &a.common, named)?;
            with_workers(&settings, || cmd_simulate(&settings))
        }
        Command::Fit(a) => {
            let named = [
                ("genotypes", a.genotypes),
                ("phenotype", a.phenotype),
                ("samples", a.samples),
                ("external_scores", a.external_scores),
                ("method", a.method),
                ("family", a.family),
                ("maf_threshold", a.maf_threshold),
                ("composition", a.composition),
            ];
            let settings = resolve("fit", &[FIT_KEYS, SOLVER_KEYS], &a.common, named)?;
            with_workers(&settings, || cmd_fit(&settings))
        }
        Command::Eval(a) => {
            let models = (!a.model.is_empty()).then(|| a.model.join(","));
            let named = [
                ("model", models),
                ("genotypes", a.genotypes),
                ("phenotype", a.phenotype),
                ("samples", a.samples),
                ("metric", a.metric),
            ];
            let settings = resolve("eval", &[EVAL_KEYS], &a.common, named)?;
            with_workers(&settings, || cmd_eval(&settings))
        }
        Command::Bench(a) => {
            let named = [
                ("seeds", a.seeds),
                ("methods", a.methods),
                ("families", a.families),
                ("n", a.n),
                ("p", a.p),
                ("maf_threshold", a.maf_threshold),
                ("composition", a.composition),
            ];
            let settings = resolve("bench", &[SIMULATION_KEYS, SOLVER_KEYS, BENCH_KEYS], &a.common, named)?;
            with_workers(&settings, || cmd_bench(&settings))
        }
    }
}

fn resolve<const N: usize>(
    command: &str,
    specs: &[&[config::KeySpec]],
    common: &Common,
    named: [(&str, Option<String>); N],
) -> Result<Settings, CliError> {
    let mut overrides = Vec::new();
    for (k, v) in [("seed", &common.seed), ("workers", &common.workers), ("out", &common.out)] {
        if let Some(v) = v {
            overrides.push((k.to_string(), v.clone()));
        }
    }
    for (k, v) in named {
        if let Some(v) = v {
            overrides.push((k.to_string(), v));
        }
    }
    for s in &common.set {
        overrides.push(parse_assignment(s)?);
    }
    Settings::resolve(command, specs, common.config.as_deref(), overrides)
}

fn with_workers<F>(settings: &Settings, f: F) -> Result<(), CliError>
where
    F: FnOnce() -> Result<(), CliError> + Send,
{
    let workers: usize = settings.get("workers")?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::Runtime(e.into()))?;
    pool.install(f)
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn output_dir(settings: &Settings) -> Result<PathBuf, CliError> {
    let out = PathBuf::from(settings.get::<String>("out")?);
    fs::create_dir_all(&out)?;
    let mut meta = BufWriter::new(File::create(out.join("metadata.txt"))?);
    settings.write_metadata(&mut meta)?;
    meta.flush()?;
    Ok(out)
}

fn sim_config(settings: &Settings) -> Result<SimConfig, CliError> {
    let positive_count = |key: &str| -> Result<usize, CliError> {
        let v: i64 = settings.get(key)?;
        usize::try_from(v).map_err(|_| CliError::Usage(format!("{key}: must be nonnegative, got {v}")))
    };
    let config = SimConfig {
        n: positive_count("n")?,
        p: positive_count("p")?,
        block_size: positive_count("block_size")?,
        within_block_correlation: settings.get("within_block_correlation")?,
        maf_range: (settings.get("maf_low")?, settings.get("maf_high")?),
        n_causal: positive_count("n_causal")?,
        family: settings.opt::<Family>("family")?.unwrap_or(Family::Gaussian),
        heritability: settings.get("heritability")?,
        case_fraction: settings.get("case_fraction")?,
        missing_rate: settings.get("missing_rate")?,
        seed: settings.opt("seed")?.unwrap_or(1),
        one_causal_per_block: settings.get("one_causal_per_block")?,
        n_covariates: positive_count("n_covariates")?,
        covariate_effect: settings.get("covariate_effect")?,
    };
    config.validate().map_err(usage)?;
    Ok(config)
}

fn pipeline_config(settings: &Settings, method: Method, family: Family) -> Result<PipelineConfig, CliError> {
    let min_ratio = match settings.raw("min_ratio") {
        None | Some("auto") => None,
        Some(_) => Some(settings.get("min_ratio")?),
    };
    let kkt_tol = match settings.raw("kkt_tol") {
        None | Some("none") => None,
        Some(_) => Some(settings.get("kkt_tol")?),
    };
    let config = PipelineConfig {
        method,
        family,
        maf_threshold: settings.get("maf_threshold")?,
        composition: settings.get::<Composition>("composition")?,
        split: SplitSpec {
            seed: settings.opt("seed")?.unwrap_or(0),
            ..SplitSpec::default()
        },
        solver: SolverConfig {
            tol: settings.get("tol")?,
            max_iter: settings.get("max_iter")?,
            max_outer: settings.get("max_outer")?,
            kkt_tol,
            record_objective: false,
        },
        path_length: settings.get("path_length")?,
        min_ratio,
        strict_external: settings.get("strict_external")?,
    };
    if !(0.0..0.5).contains(&config.maf_threshold) {
        return Err(usage(format!("maf_threshold: must lie in [0, 0.5), got {}", config.maf_threshold)));
    }
    if config.path_length == 0 {
        return Err(usage("path_length: must be positive"));
    }
    if let Some(r) = config.min_ratio {
        if !(r > 0.0 && r < 1.0) {
            return Err(usage(format!("min_ratio: must lie in (0, 1), got {r}")));
        }
    }
    Ok(config)
}

fn cmd_simulate(settings: &Settings) -> Result<(), CliError> {
    let config = sim_config(settings)?;
    let out = output_dir(settings)?;
    let genotypes = simulate_genotypes(&config)?;
    let (phenotype, truth) = simulate_phenotype(&genotypes, &config)?;
    write_gts(&genotypes, out.join("genotypes.gts"))?;
    write_phenotype_csv(&phenotype, out.join("phenotype.csv"))?;
    let mut w = csv::Writer::from_path(out.join("truth.csv"))?;
    w.write_record(["variant_id", "true_beta"])?;
    for &(j, b) in &truth.true_beta {
        w.write_record([genotypes.variant_ids()[j].clone(), b.to_string()])?;
    }
    w.flush()?;
    println!(
        "simulated n={} p={} causal={} family={} seed={} -> {}",
        config.n,
        config.p,
        truth.causal_indices.len(),
        config.family,
        config.seed,
        out.display()
    );
    Ok(())
}

fn read_samples(path: &Path) -> Result<Vec<String>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| anyhow::anyhow!("reading {}: {e}", path.display()))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

/// Genotypes plus a phenotype table whose rows follow the genotype rows.
fn load_data(settings: &Settings) -> Result<(GenotypeMatrix, PhenotypeTable), CliError> {
    let gpath: String = settings.get("genotypes")?;
    let ppath: String = settings.get("phenotype")?;
    let genotypes = read_gts(&gpath).map_err(|e| anyhow::anyhow!("{gpath}: {e}"))?;
    let phenotype = read_phenotype_csv(&ppath).map_err(|e| anyhow::anyhow!("{ppath}: {e}"))?;
    let phenotype = match settings.raw("samples") {
        Some(s) => {
            let ids = read_samples(Path::new(s))?;
            if ids.len() != genotypes.n_individuals() {
                return Err(anyhow::anyhow!(
                    "{s} lists {} samples but {gpath} has {} individuals",
                    ids.len(),
                    genotypes.n_individuals()
                )
                .into());
            }
            phenotype.align_to(&ids)?
        }
        None => {
            if phenotype.len() != genotypes.n_individuals() {
                return Err(anyhow::anyhow!(
                    "{ppath} has {} rows but {gpath} has {} individuals",
                    phenotype.len(),
                    genotypes.n_individuals()
                )
                .into());
            }
            phenotype
        }
    };
    Ok((genotypes, phenotype))
}

fn cmd_fit(settings: &Settings) -> Result<(), CliError> {
    let method: Method = settings.get("method")?;
    let family: Family = settings.get("family")?;
    let config = pipeline_config(settings, method, family)?;
    let external_path = settings.raw("external_scores");
    if method == Method::UnilassoEs && external_path.is_none() {
        return Err(usage("method unilasso_es requires external_scores (--external-scores)"));
    }
    let out = output_dir(settings)?;
    let (genotypes, phenotype) = load_data(settings)?;
    let external = external_path
        .map(|p| read_external_scores(p).map_err(|e| anyhow::anyhow!("{p}: {e}")))
        .transpose()?;
    let fit = fit_model(&genotypes, &phenotype, external.as_ref(), &config)?;
    fit.model.write(out.join("model.tsv"))?;

    let mut w = csv::Writer::from_path(out.join("path.csv"))?;
    w.write_record([
        "lambda_index",
        "lambda",
        "n_nonzero",
        "deviance",
        "kkt_violation",
        "iterations",
        "converged",
        "validation_metric",
    ])?;
    for (k, (pt, v)) in fit.path.points.iter().zip(&fit.validation_metrics).enumerate() {
        w.write_record([
            k.to_string(),
            pt.lambda.to_string(),
            pt.n_nonzero.to_string(),
            pt.deviance.to_string(),
            pt.kkt_violation.to_string(),
            pt.iterations.to_string(),
            pt.converged.to_string(),
            v.to_string(),
        ])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(out.join("timings.csv"))?;
    w.write_record(["stage", "seconds"])?;
    w.write_record(["preprocess", &format!("{:.3}", fit.timings.preprocess_s)])?;
    w.write_record(["train", &format!("{:.3}", fit.timings.train_s)])?;
    w.flush()?;

    info!(
        "[EVAL] method={} nonzero={} sign_changes={} lambda={:.6e} validation_{}={:.4} preprocess={:.2}s train={:.2}s",
        method,
        fit.model.n_nonzero(),
        fit.sign_changes,
        fit.model.chosen_lambda,
        Metric::for_family(family),
        fit.model.metadata.validation_metric,
        fit.timings.preprocess_s,
        fit.timings.train_s
    );
    println!(
        "fitted {} ({}) nonzero={} sign_changes={} -> {}",
        method,
        family,
        fit.model.n_nonzero(),
        fit.sign_changes,
        out.join("model.tsv").display()
    );
    Ok(())
}

fn read_timings(model_path: &Path) -> (Option<f64>, Option<f64>) {
    let Some(dir) = model_path.parent() else {
        return (None, None);
    };
    let Ok(mut r) = csv::Reader::from_path(dir.join("timings.csv")) else {
        return (None, None);
    };
    let (mut pre, mut train) = (None, None);
    for rec in r.records().flatten() {
        let v = rec.get(1).and_then(|s| s.parse().ok());
        match rec.get(0) {
            Some("preprocess") => pre = v,
            Some("train") => train = v,
            _ => {}
        }
    }
    (pre, train)
}

fn cmd_eval(settings: &Settings) -> Result<(), CliError> {
    let paths: Vec<String> = settings.list("model")?;
    if paths.is_empty() {
        return Err(usage("model is required for command eval (--model)"));
    }
    let requested: Option<Metric> = settings.opt("metric")?;
    let rows_mode: String = settings.get("rows")?;
    if rows_mode != "test" && rows_mode != "all" {
        return Err(usage(format!("rows: expected test or all, got {rows_mode:?}")));
    }
    let include_timings: bool = settings.get("include_timings")?;
    let models = paths
        .iter()
        .map(|p| FittedModel::read(p).map_err(|e| anyhow::anyhow!("{p}: {e}")))
        .collect::<Result<Vec<_>, _>>()?;
    if let Some(metric) = requested {
        for (p, m) in paths.iter().zip(&models) {
            if Metric::for_family(m.family) != metric {
                return Err(usage(format!(
                    "metric {metric} does not apply to {p}, a {} model (use {})",
                    m.family,
                    Metric::for_family(m.family)
                )));
            }
        }
    }
    let out = output_dir(settings)?;
    let (genotypes, phenotype) = load_data(settings)?;
    let n = genotypes.n_individuals();

    let mut reports = Vec::new();
    for (path, model) in paths.iter().zip(&models) {
        let rows: Vec<usize> = if rows_mode == "all" {
            (0..n).collect()
        } else {
            let s = split(
                n,
                &SplitSpec {
                    seed: model.metadata.split_seed,
                    ..SplitSpec::default()
                },
            )?;
            if s.test.len() != model.metadata.n_test || s.train.len() != model.metadata.n_train {
                return Err(anyhow::anyhow!(
                    "{path}: fitted on a different sample size; cannot recover its test rows (use rows = all)"
                )
                .into());
            }
            s.test
        };
        let metric = Metric::for_family(model.family);
        let value = evaluate_rows(model, &genotypes, &phenotype, &rows)?;
        let (pre, train) = if include_timings {
            read_timings(Path::new(path))
        } else {
            (None, None)
        };
        info!(
            "[EVAL] model={path} method={} rows={} {metric}={value:.4} nonzero={}",
            model.method,
            rows.len(),
            model.n_nonzero()
        );
        reports.push(EvalReport {
            method: model.method.to_string(),
            phenotype: phenotype.response_name.clone(),
            family: model.family,
            metric,
            metric_value: value,
            n_nonzero: model.n_nonzero(),
            sign_changes: model.metadata.sign_changes,
            runtime_preprocess_s: pre,
            runtime_train_s: train,
        });
    }
    let mut w = BufWriter::new(File::create(out.join("report.csv"))?);
    write_report(&reports, &mut w)?;
    w.flush()?;

    if models.len() >= 2 {
        let labels: Vec<String> = models
            .iter()
            .enumerate()
            .map(|(i, m)| {
                let seen = models[..i].iter().filter(|o| o.method == m.method).count();
                if seen == 0 {
                    m.method.to_string()
                } else {
                    format!("{}_{}", m.method, seen + 1)
                }
            })
            .collect();
        let refs: Vec<&FittedModel> = models.iter().collect();
        let table = support_similarity(&labels, &refs)?;
        let mut w = BufWriter::new(File::create(out.join("similarity.csv"))?);
        table.write_csv(&mut w)?;
        w.flush()?;
    }
    println!("evaluated {} model(s) -> {}", models.len(), out.join("report.csv").display());
    Ok(())
}

/// Bench settings as a [`BenchConfig`]; used by `bench` and by tests.
pub fn bench_config(settings: &Settings) -> Result<BenchConfig, CliError> {
    let sim = sim_config(settings)?;
    let seeds = parse_seeds(settings.raw("seeds").unwrap_or(""))?;
    let families: Vec<Family> = settings.list("families")?;
    let methods: Vec<BenchMethod> = settings.list("methods")?;
    if families.is_empty() || methods.is_empty() {
        return Err(usage("families and methods must not be empty"));
    }
    let snr: f64 = settings.get("snr")?;
    if !(snr > 0.0) {
        return Err(usage(format!("snr: must be positive, got {snr}")));
    }
    Ok(BenchConfig {
        sim,
        seeds,
        families,
        methods,
        snr,
        pipeline: pipeline_config(settings, Method::Unilasso, Family::Gaussian)?,
    })
}

fn cmd_bench(settings: &Settings) -> Result<(), CliError> {
    let config = bench_config(settings)?;
    let include_timings: bool = settings.get("include_timings")?;
    let out = output_dir(settings)?;
    let records = run_bench(&config);
    let mut w = BufWriter::new(File::create(out.join("runs.csv"))?);
    write_runs(&records, include_timings, &mut w)?;
    w.flush()?;
    let summary = summarize(&records);
    let mut w = BufWriter::new(File::create(out.join("summary.csv"))?);
    write_summary(&summary, &mut w)?;
    w.flush()?;
    let failed = records.iter().filter(|r| r.outcome.is_err()).count();
    println!(
        "bench seeds={} runs={} failed={} -> {}",
        config.seeds.len(),
        records.len(),
        failed,
        out.join("summary.csv").display()
    );
    Ok(())
}
