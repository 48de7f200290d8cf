//! Repeated simulate, fit and evaluate runs over a list of seeds.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use log::{info, warn};
use rayon::prelude::*;

use sparse_prs::evaluate::Metric;
use sparse_prs::pipeline::{fit_model, Method, PipelineConfig, SplitSpec};
use sparse_prs::simulate::{simulate_genotypes, simulate_phenotype, synthetic_external_scores, SimConfig};
use sparse_prs::{Family, PrsError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BenchMethod {
    Lasso,
    Unilasso,
    UnilassoEs,
    /// uniLasso-ES with the external scores shuffled across variants.
    UnilassoEsPermuted,
}

impl BenchMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            BenchMethod::Lasso => "lasso",
            BenchMethod::Unilasso => "unilasso",
            BenchMethod::UnilassoEs => "unilasso_es",
            BenchMethod::UnilassoEsPermuted => "unilasso_es_permuted",
        }
    }

    fn method(self) -> Method {
        match self {
            BenchMethod::Lasso => Method::Lasso,
            BenchMethod::Unilasso => Method::Unilasso,
            BenchMethod::UnilassoEs | BenchMethod::UnilassoEsPermuted => Method::UnilassoEs,
        }
    }
}

impl fmt::Display for BenchMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BenchMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "lasso" => Ok(BenchMethod::Lasso),
            "unilasso" => Ok(BenchMethod::Unilasso),
            "unilasso_es" => Ok(BenchMethod::UnilassoEs),
            "unilasso_es_permuted" => Ok(BenchMethod::UnilassoEsPermuted),
            other => Err(format!("unknown bench method {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    /// Simulation template; `seed` and `family` are set per run.
    pub sim: SimConfig,
    pub seeds: Vec<u64>,
    pub families: Vec<Family>,
    pub methods: Vec<BenchMethod>,
    /// Signal-to-noise ratio of the synthetic external scores.
    pub snr: f64,
    /// `method` is set per run and the split seed follows the run seed.
    pub pipeline: PipelineConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub metric: Metric,
    pub value: f64,
    pub n_nonzero: usize,
    pub sign_changes: usize,
    pub preprocess_s: f64,
    pub train_s: f64,
    pub support: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub seed: u64,
    pub family: Family,
    pub method: BenchMethod,
    pub outcome: Result<RunMetrics, String>,
}

fn run_seed(config: &BenchConfig, seed: u64) -> Vec<RunRecord> {
    let mut records = Vec::new();
    let sim = SimConfig {
        seed,
        ..config.sim.clone()
    };
    let genotypes = simulate_genotypes(&sim);
    for &family in &config.families {
        let fail = |msg: String| -> Vec<RunRecord> {
            config
                .methods
                .iter()
                .map(|&method| RunRecord {
                    seed,
                    family,
                    method,
                    outcome: Err(msg.clone()),
                })
                .collect()
        };
        let genotypes = match &genotypes {
            Ok(g) => g,
            Err(e) => {
                warn!("[EVAL] seed={seed} simulation failed: {e}");
                records.extend(fail(e.to_string()));
                continue;
            }
        };
        let (phenotype, truth) = match simulate_phenotype(genotypes, &SimConfig { family, ..sim.clone() }) {
            Ok(v) => v,
            Err(e) => {
                warn!("[EVAL] seed={seed} family={family} phenotype simulation failed: {e}");
                records.extend(fail(e.to_string()));
                continue;
            }
        };
        for &method in &config.methods {
            let outcome = (|| -> Result<RunMetrics, PrsError> {
                let external = match method {
                    BenchMethod::UnilassoEs | BenchMethod::UnilassoEsPermuted => Some(synthetic_external_scores(
                        &truth,
                        genotypes.variant_ids(),
                        config.snr,
                        seed,
                        method == BenchMethod::UnilassoEsPermuted,
                    )?),
                    _ => None,
                };
                let pipeline = PipelineConfig {
                    method: method.method(),
                    family,
                    split: SplitSpec {
                        seed,
                        ..config.pipeline.split
                    },
                    ..config.pipeline
                };
                let fit = fit_model(genotypes, &phenotype, external.as_ref(), &pipeline)?;
                let value = fit.test_metric(genotypes, &phenotype)?;
                Ok(RunMetrics {
                    metric: Metric::for_family(family),
                    value,
                    n_nonzero: fit.model.n_nonzero(),
                    sign_changes: fit.sign_changes,
                    preprocess_s: fit.timings.preprocess_s,
                    train_s: fit.timings.train_s,
                    support: fit
                        .model
                        .coefficients
                        .iter()
                        .filter(|(_, c)| *c != 0.0)
                        .map(|(id, _)| id.clone())
                        .collect(),
                })
            })();
            match &outcome {
                Ok(m) => info!(
                    "[EVAL] seed={seed} family={family} method={method} {}={:.4} nonzero={} sign_changes={}",
                    m.metric, m.value, m.n_nonzero, m.sign_changes
                ),
                Err(e) => warn!("[EVAL] seed={seed} family={family} method={method} failed: {e}"),
            }
            records.push(RunRecord {
                seed,
                family,
                method,
                outcome: outcome.map_err(|e| e.to_string()),
            });
        }
    }
    records
}

/// Runs every seed; failures are recorded per run and never abort the batch.
/// Records come back in seed, family, method order whatever the thread count.
pub fn run_bench(config: &BenchConfig) -> Vec<RunRecord> {
    config
        .seeds
        .par_iter()
        .map(|&seed| run_seed(config, seed))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub family: Family,
    pub method: BenchMethod,
    pub metric: Metric,
    pub n_ok: usize,
    pub n_failed: usize,
    pub metric_mean: Option<f64>,
    pub metric_sd: Option<f64>,
    pub nonzero_mean: Option<f64>,
    pub nonzero_sd: Option<f64>,
    pub sign_changes_total: usize,
}

fn mean_sd(values: &[f64]) -> (Option<f64>, Option<f64>) {
    let n = values.len();
    if n == 0 {
        return (None, None);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (Some(mean), None);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (Some(mean), Some(var.sqrt()))
}

/// One row per (family, method) in first-seen order; sd is the sample
/// standard deviation and is empty with fewer than two successful runs.
pub fn summarize(records: &[RunRecord]) -> Vec<SummaryRow> {
    let mut keys: Vec<(Family, BenchMethod)> = Vec::new();
    for r in records {
        if !keys.contains(&(r.family, r.method)) {
            keys.push((r.family, r.method));
        }
    }
    keys.into_iter()
        .map(|(family, method)| {
            let group: Vec<&RunRecord> = records
                .iter()
                .filter(|r| r.family == family && r.method == method)
                .collect();
            let ok: Vec<&RunMetrics> = group.iter().filter_map(|r| r.outcome.as_ref().ok()).collect();
            let (metric_mean, metric_sd) = mean_sd(&ok.iter().map(|m| m.value).collect::<Vec<_>>());
            let (nonzero_mean, nonzero_sd) = mean_sd(&ok.iter().map(|m| m.n_nonzero as f64).collect::<Vec<_>>());
            SummaryRow {
                family,
                method,
                metric: Metric::for_family(family),
                n_ok: ok.len(),
                n_failed: group.len() - ok.len(),
                metric_mean,
                metric_sd,
                nonzero_mean,
                nonzero_sd,
                sign_changes_total: ok.iter().map(|m| m.sign_changes).sum(),
            }
        })
        .collect()
}

pub const RUNS_HEADER: [&str; 10] = [
    "seed",
    "family",
    "method",
    "metric_name",
    "metric_value",
    "n_nonzero",
    "sign_changes",
    "status",
    "runtime_preprocess_s",
    "runtime_train_s",
];

pub const SUMMARY_HEADER: [&str; 10] = [
    "family",
    "method",
    "metric_name",
    "n_ok",
    "n_failed",
    "metric_mean",
    "metric_sd",
    "n_nonzero_mean",
    "n_nonzero_sd",
    "sign_changes_total",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Runtimes are written only with `include_timings`, so that default
/// outputs are reproducible byte for byte.
pub fn write_runs<W: Write>(records: &[RunRecord], include_timings: bool, w: W) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(RUNS_HEADER)?;
    for r in records {
        let metric = Metric::for_family(r.family).to_string();
        let row = match &r.outcome {
            Ok(m) => {
                let time = |s: f64| if include_timings { format!("{s:.3}") } else { String::new() };
                [
                    r.seed.to_string(),
                    r.family.to_string(),
                    r.method.to_string(),
                    metric,
                    m.value.to_string(),
                    m.n_nonzero.to_string(),
                    m.sign_changes.to_string(),
                    "ok".to_string(),
                    time(m.preprocess_s),
                    time(m.train_s),
                ]
            }
            Err(e) => [
                r.seed.to_string(),
                r.family.to_string(),
                r.method.to_string(),
                metric,
                String::new(),
                String::new(),
                String::new(),
                format!("failed: {e}"),
                String::new(),
                String::new(),
            ],
        };
        out.write_record(row)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_summary<W: Write>(rows: &[SummaryRow], w: W) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(SUMMARY_HEADER)?;
    for s in rows {
        out.write_record([
            s.family.to_string(),
            s.method.to_string(),
            s.metric.to_string(),
            s.n_ok.to_string(),
            s.n_failed.to_string(),
            opt(s.metric_mean),
            opt(s.metric_sd),
            opt(s.nonzero_mean),
            opt(s.nonzero_sd),
            s.sign_changes_total.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}
