//! Lasso, uniLasso and uniLasso with external scores, from split to
//! serialized model.
//!
//! Every method follows the same outline: split the individuals, build a
//! second-stage design on the training rows, solve the path, choose lambda on
//! the validation rows, rebuild the design on train+validation and solve again
//! up to the chosen lambda. A design also records how its coefficients map
//! back to the variant scale, so the model returned is always expressed on
//! imputed genotypes.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use log::{info, warn};
use ndarray::{concatenate, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{PrsError, Result};
use crate::evaluate::{count_sign_changes, metric_value, Metric};
use crate::genotype::{maf_filter, GenotypeMatrix, PhenotypeTable};
use crate::linalg::mean;
use crate::solver::{fit_path, Constraint, LambdaPath, PathFit, PathPoint, PenalizedProblem, SolverConfig};
use crate::univariate::{build_loo_features, fit_univariate_columns};
use crate::Family;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Lasso,
    Unilasso,
    UnilassoEs,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Lasso => "lasso",
            Method::Unilasso => "unilasso",
            Method::UnilassoEs => "unilasso_es",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = PrsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lasso" => Ok(Method::Lasso),
            "unilasso" => Ok(Method::Unilasso),
            "unilasso_es" => Ok(Method::UnilassoEs),
            other => Err(PrsError::invalid(format!(
                "unknown method {other:?} (expected lasso, unilasso or unilasso_es)"
            ))),
        }
    }
}

/// How external-score coefficients map to the variant scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Composition {
    /// Second-stage coefficients are already per genotype unit.
    #[default]
    Direct,
    /// Multiply each coefficient by the training univariate slope.
    UnivariateComposed,
}

impl Composition {
    pub fn as_str(self) -> &'static str {
        match self {
            Composition::Direct => "direct",
            Composition::UnivariateComposed => "univariate_composed",
        }
    }
}

impl fmt::Display for Composition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Composition {
    type Err = PrsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(Composition::Direct),
            "univariate_composed" => Ok(Composition::UnivariateComposed),
            other => Err(PrsError::invalid(format!(
                "unknown composition {other:?} (expected direct or univariate_composed)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub validation_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_fraction: 0.7,
            validation_fraction: 0.1,
            test_fraction: 0.2,
            seed: 0,
        }
    }
}

/// Sorted, disjoint row sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    pub fn train_validation(&self) -> Vec<usize> {
        let mut rows: Vec<usize> = self.train.iter().chain(&self.validation).copied().collect();
        rows.sort_unstable();
        rows
    }
}

/// Validation and test sizes are `floor(fraction * n)`; training takes the rest.
pub fn split(n: usize, spec: &SplitSpec) -> Result<Split> {
    if n < 10 {
        return Err(PrsError::invalid(format!("need at least 10 individuals to split, got {n}")));
    }
    let fractions = [spec.train_fraction, spec.validation_fraction, spec.test_fraction];
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(PrsError::invalid("split fractions must lie in [0, 1] and sum to 1"));
    }
    let size = |f: f64| (f * n as f64 + 1e-9).floor() as usize;
    let n_val = size(spec.validation_fraction);
    let n_test = size(spec.test_fraction);
    if n_val == 0 || n_val + n_test >= n {
        return Err(PrsError::invalid("split leaves an empty training or validation set"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let mut validation = order[..n_val].to_vec();
    let mut test = order[n_val..n_val + n_test].to_vec();
    let mut train = order[n_val + n_test..].to_vec();
    validation.sort_unstable();
    test.sort_unstable();
    train.sort_unstable();
    Ok(Split {
        train,
        validation,
        test,
    })
}

/// External univariate coefficients keyed by variant id.
pub type ExternalScores = HashMap<String, f64>;

pub fn read_external_scores(path: impl AsRef<Path>) -> Result<ExternalScores> {
    let mut reader = csv::ReaderBuilder::new().delimiter(b'\t').from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.len() != 2 || &headers[0] != "variant_id" || &headers[1] != "beta_tilde" {
        return Err(PrsError::format("external scores need the header variant_id<TAB>beta_tilde"));
    }
    let mut scores = ExternalScores::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let id = record[0].to_string();
        let value: f64 = record[1]
            .trim()
            .parse()
            .map_err(|_| PrsError::format(format!("row {}: beta_tilde {:?} is not a number", line + 2, &record[1])))?;
        if !value.is_finite() {
            return Err(PrsError::format(format!("row {}: beta_tilde must be finite", line + 2)));
        }
        if scores.insert(id.clone(), value).is_some() {
            return Err(PrsError::format(format!("variant {id} listed twice in external scores")));
        }
    }
    Ok(scores)
}

/// Writes scores sorted by variant id.
pub fn write_external_scores(scores: &ExternalScores, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "variant_id\tbeta_tilde")?;
    let mut ids: Vec<&String> = scores.keys().collect();
    ids.sort();
    for id in ids {
        writeln!(w, "{id}\t{}", scores[id])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelMetadata {
    /// Additive `S_xx` constant of the final fit, when univariate fits were made.
    pub stabilization_constant: Option<f64>,
    pub maf_threshold: f64,
    pub split_seed: u64,
    /// Mean response of the rows the final model was fit on.
    pub train_mean: f64,
    pub lambda_index: usize,
    pub validation_metric: f64,
    pub n_train: usize,
    pub n_validation: usize,
    pub n_test: usize,
    /// Nonzero coefficients whose sign disagrees with the method's reference.
    pub sign_changes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FittedModel {
    pub method: Method,
    pub family: Family,
    pub intercept: f64,
    /// Nonzero coefficients per genotype unit, in variant order.
    pub coefficients: Vec<(String, f64)>,
    pub covariate_names: Vec<String>,
    pub covariate_coefficients: Vec<f64>,
    pub chosen_lambda: f64,
    pub composition: Composition,
    pub metadata: ModelMetadata,
}

impl FittedModel {
    pub fn n_nonzero(&self) -> usize {
        self.coefficients.iter().filter(|(_, c)| *c != 0.0).count()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let m = &self.metadata;
        writeln!(w, "#method={}", self.method)?;
        writeln!(w, "#family={}", self.family)?;
        writeln!(w, "#composition={}", self.composition)?;
        writeln!(w, "#intercept={}", self.intercept)?;
        writeln!(w, "#lambda={}", self.chosen_lambda)?;
        writeln!(w, "#lambda_index={}", m.lambda_index)?;
        writeln!(w, "#validation_metric={}", m.validation_metric)?;
        writeln!(w, "#maf_threshold={}", m.maf_threshold)?;
        writeln!(w, "#split_seed={}", m.split_seed)?;
        if let Some(c) = m.stabilization_constant {
            writeln!(w, "#stabilization_constant={c}")?;
        }
        writeln!(w, "#train_mean={}", m.train_mean)?;
        writeln!(w, "#n_train={}", m.n_train)?;
        writeln!(w, "#n_validation={}", m.n_validation)?;
        writeln!(w, "#n_test={}", m.n_test)?;
        writeln!(w, "#sign_changes={}", m.sign_changes)?;
        for (name, c) in self.covariate_names.iter().zip(&self.covariate_coefficients) {
            writeln!(w, "#covariate:{name}={c}")?;
        }
        writeln!(w, "variant_id\tcoefficient")?;
        for (id, c) in &self.coefficients {
            writeln!(w, "{id}\t{c}")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn read_from<R: BufRead>(reader: R) -> Result<FittedModel> {
        let mut keys: HashMap<String, String> = HashMap::new();
        let mut covariate_names = Vec::new();
        let mut covariate_coefficients = Vec::new();
        let mut coefficients = Vec::new();
        let mut seen_header = false;
        for (line_no, line) in reader.lines().enumerate() {
            let line = line?;
            let at = || format!("model line {}", line_no + 1);
            if !seen_header {
                if line == "variant_id\tcoefficient" {
                    seen_header = true;
                    continue;
                }
                let body = line
                    .strip_prefix('#')
                    .ok_or_else(|| PrsError::format(format!("{}: expected #key=value", at())))?;
                let (key, value) = body
                    .split_once('=')
                    .ok_or_else(|| PrsError::format(format!("{}: expected #key=value", at())))?;
                if let Some(name) = key.strip_prefix("covariate:") {
                    covariate_names.push(name.to_string());
                    covariate_coefficients.push(parse_num(value, &at())?);
                } else if keys.insert(key.to_string(), value.to_string()).is_some() {
                    return Err(PrsError::format(format!("{}: duplicate key {key}", at())));
                }
            } else if !line.is_empty() {
                let (id, value) = line
                    .split_once('\t')
                    .ok_or_else(|| PrsError::format(format!("{}: expected variant_id<TAB>coefficient", at())))?;
                coefficients.push((id.to_string(), parse_num(value, &at())?));
            }
        }
        if !seen_header {
            return Err(PrsError::format("model file has no variant_id<TAB>coefficient header"));
        }
        let mut take = |key: &str| -> Result<String> {
            keys.remove(key)
                .ok_or_else(|| PrsError::format(format!("model file is missing #{key}")))
        };
        let model = FittedModel {
            method: take("method")?.parse()?,
            family: take("family")?.parse()?,
            composition: take("composition")?.parse()?,
            intercept: parse_num(&take("intercept")?, "intercept")?,
            chosen_lambda: parse_num(&take("lambda")?, "lambda")?,
            metadata: ModelMetadata {
                lambda_index: parse_num(&take("lambda_index")?, "lambda_index")?,
                validation_metric: parse_num(&take("validation_metric")?, "validation_metric")?,
                maf_threshold: parse_num(&take("maf_threshold")?, "maf_threshold")?,
                split_seed: parse_num(&take("split_seed")?, "split_seed")?,
                stabilization_constant: match take("stabilization_constant") {
                    Ok(v) => Some(parse_num(&v, "stabilization_constant")?),
                    Err(_) => None,
                },
                train_mean: parse_num(&take("train_mean")?, "train_mean")?,
                n_train: parse_num(&take("n_train")?, "n_train")?,
                n_validation: parse_num(&take("n_validation")?, "n_validation")?,
                n_test: parse_num(&take("n_test")?, "n_test")?,
                sign_changes: parse_num(&take("sign_changes")?, "sign_changes")?,
            },
            coefficients,
            covariate_names,
            covariate_coefficients,
        };
        if let Some(key) = keys.keys().next() {
            return Err(PrsError::format(format!("model file has unknown key #{key}")));
        }
        Ok(model)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<FittedModel> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

fn parse_num<T: FromStr>(value: &str, what: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| PrsError::format(format!("{what}: cannot parse {value:?}")))
}

/// Linear predictor of `model` for the given rows.
pub fn predict(
    model: &FittedModel,
    genotypes: &GenotypeMatrix,
    phenotype: &PhenotypeTable,
    rows: &[usize],
) -> Result<Vec<f64>> {
    if phenotype.len() != genotypes.n_individuals() {
        return Err(PrsError::dimension("phenotype rows do not match genotype individuals"));
    }
    if phenotype.covariate_names != model.covariate_names {
        return Err(PrsError::invalid(format!(
            "model covariates {:?} do not match phenotype covariates {:?}",
            model.covariate_names, phenotype.covariate_names
        )));
    }
    let mut eta: Vec<f64> = rows
        .iter()
        .map(|&i| {
            let cov = phenotype.covariates.row(i);
            model.intercept + cov.iter().zip(&model.covariate_coefficients).map(|(a, b)| a * b).sum::<f64>()
        })
        .collect();
    for (id, c) in &model.coefficients {
        let j = genotypes
            .variant_index(id)
            .ok_or_else(|| PrsError::invalid(format!("model variant {id} not found in genotypes")))?;
        for (e, x) in eta.iter_mut().zip(genotypes.column_rows(j, rows)?) {
            *e += c * x;
        }
    }
    Ok(eta)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineConfig {
    pub method: Method,
    pub family: Family,
    pub maf_threshold: f64,
    pub composition: Composition,
    pub split: SplitSpec,
    pub solver: SolverConfig,
    pub path_length: usize,
    /// Defaults to the solver's rule (0.01 when n < m, else 1e-4).
    pub min_ratio: Option<f64>,
    /// Error instead of dropping variants without an external score.
    pub strict_external: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            method: Method::Unilasso,
            family: Family::Gaussian,
            maf_threshold: 0.0005,
            composition: Composition::Direct,
            split: SplitSpec::default(),
            solver: SolverConfig::default(),
            path_length: 100,
            min_ratio: None,
            strict_external: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StageTimings {
    pub preprocess_s: f64,
    pub train_s: f64,
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub model: FittedModel,
    pub split: Split,
    /// Path on the training rows.
    pub path: PathFit,
    pub lambdas: Vec<f64>,
    pub validation_metrics: Vec<f64>,
    /// Path on train+validation, ending at the chosen lambda.
    pub refit_path: PathFit,
    /// Per-variant sign the final coefficients are compared against.
    pub sign_reference: HashMap<String, f64>,
    pub sign_changes: usize,
    pub timings: StageTimings,
    /// Variants removed by the leverage guard or for lack of an external score.
    pub dropped: Vec<String>,
}

impl FitOutcome {
    /// Metric of the final model on the test rows.
    pub fn test_metric(&self, genotypes: &GenotypeMatrix, phenotype: &PhenotypeTable) -> Result<f64> {
        evaluate_rows(&self.model, genotypes, phenotype, &self.split.test)
    }
}

/// Metric of `model` on `rows`, with the model's training mean as R^2 baseline.
pub fn evaluate_rows(
    model: &FittedModel,
    genotypes: &GenotypeMatrix,
    phenotype: &PhenotypeTable,
    rows: &[usize],
) -> Result<f64> {
    let eta = predict(model, genotypes, phenotype, rows)?;
    let y: Vec<f64> = rows.iter().map(|&i| phenotype.response[i]).collect();
    metric_value(Metric::for_family(model.family), &y, &eta, model.metadata.train_mean)
}

/// Second-stage problem plus the map from its coefficients to the variant
/// scale: `gamma_j = scale_k theta_k`, `gamma_0 += offset_k theta_k`.
struct Design {
    problem: PenalizedProblem,
    variants: Vec<usize>,
    scale: Vec<f64>,
    offset: Vec<f64>,
    reference: Vec<f64>,
    shift: Option<f64>,
    dropped: Vec<usize>,
}

struct Composed {
    intercept: f64,
    /// `(design column, coefficient)`, nonzero only.
    genetic: Vec<(usize, f64)>,
    covariates: Vec<f64>,
}

impl Design {
    fn n_variants(&self) -> usize {
        self.variants.len()
    }

    fn compose(&self, point: &PathPoint) -> Composed {
        let beta = point.beta(self.problem.n_features());
        let p = self.n_variants();
        let mut intercept = point.intercept;
        let mut genetic = Vec::new();
        for k in 0..p {
            let theta = beta[k];
            if theta != 0.0 {
                intercept += self.offset[k] * theta;
                let gamma = self.scale[k] * theta;
                if gamma != 0.0 {
                    genetic.push((k, gamma));
                }
            }
        }
        Composed {
            intercept,
            genetic,
            covariates: beta[p..].to_vec(),
        }
    }
}

fn with_covariates(x: Array2<f64>, covariates: Array2<f64>) -> Result<Array2<f64>> {
    if covariates.ncols() == 0 {
        return Ok(x);
    }
    concatenate(Axis(1), &[x.view(), covariates.view()]).map_err(|e| PrsError::dimension(e.to_string()))
}

fn build_design(
    genotypes: &GenotypeMatrix,
    phenotype: &PhenotypeTable,
    rows: &[usize],
    external: Option<&ExternalScores>,
    config: &PipelineConfig,
    need_reference: bool,
) -> Result<Design> {
    let family = config.family;
    let ids = genotypes.variant_ids();
    let y: Vec<f64> = rows.iter().map(|&i| phenotype.response[i]).collect();
    let covariates = phenotype.covariates.select(Axis(0), rows);
    let q = covariates.ncols();
    let summaries = genotypes.summaries_for_rows(rows);
    let mut kept = maf_filter(&summaries, rows.len(), config.maf_threshold);
    let mut dropped = Vec::new();
    let mut beta_tilde = Vec::new();
    if config.method == Method::UnilassoEs {
        let external = external.ok_or_else(|| PrsError::invalid("unilasso_es needs external scores"))?;
        let mut usable = Vec::with_capacity(kept.len());
        for &j in &kept {
            match external.get(&ids[j]) {
                None if config.strict_external => {
                    return Err(PrsError::invalid(format!("variant {} has no external score", ids[j])));
                }
                Some(&b) if b != 0.0 => {
                    usable.push(j);
                    beta_tilde.push(b);
                }
                _ => dropped.push(j),
            }
        }
        if usable.is_empty() {
            return Err(PrsError::invalid("no kept variant has a nonzero external score"));
        }
        kept = usable;
    }
    if kept.is_empty() {
        return Err(PrsError::invalid("no variant passes the MAF filter"));
    }
    let x = genotypes.dense(rows, &kept)?;
    let p = kept.len();
    let cov_constraints = std::iter::repeat_n(Constraint::Free, q);

    let design = match config.method {
        Method::Lasso => {
            let (reference, shift) = if need_reference {
                let (fits, shift) = fit_univariate_columns(x.view(), &kept, ids, &y, family)?;
                (fits.iter().map(|f| f.u1).collect(), Some(shift))
            } else {
                (vec![0.0; p], None)
            };
            let weights = std::iter::repeat_n(1.0, p).chain(std::iter::repeat_n(0.0, q)).collect();
            let constraints = std::iter::repeat_n(Constraint::Free, p).chain(cov_constraints).collect();
            let problem =
                PenalizedProblem::new(with_covariates(x, covariates)?, y, family, weights, constraints, 1.0)?;
            Design {
                problem,
                variants: kept,
                scale: vec![1.0; p],
                offset: vec![0.0; p],
                reference,
                shift,
                dropped,
            }
        }
        Method::Unilasso => {
            let build = build_loo_features(x.view(), &kept, ids, &y, family)?;
            drop(x);
            dropped.extend(&build.dropped);
            let p = build.fits.len();
            let weights = std::iter::repeat_n(1.0, p).chain(std::iter::repeat_n(0.0, q)).collect();
            let constraints = std::iter::repeat_n(Constraint::NonNegative, p).chain(cov_constraints).collect();
            let features = with_covariates(build.features.values, covariates)?;
            let problem = PenalizedProblem::new(features, y, family, weights, constraints, 1.0)?;
            Design {
                problem,
                variants: build.features.column_map,
                scale: build.fits.iter().map(|f| f.u1).collect(),
                offset: build.fits.iter().map(|f| f.u0).collect(),
                reference: build.fits.iter().map(|f| f.u1).collect(),
                shift: Some(build.features.sxx_shift),
                dropped,
            }
        }
        Method::UnilassoEs => {
            let (scale, reference, shift) = match config.composition {
                Composition::Direct => (vec![1.0; p], beta_tilde.clone(), None),
                Composition::UnivariateComposed => {
                    let (fits, shift) = fit_univariate_columns(x.view(), &kept, ids, &y, family)?;
                    let slopes: Vec<f64> = fits.iter().map(|f| f.u1).collect();
                    let reference = slopes.iter().zip(&beta_tilde).map(|(a, b)| a * b).collect();
                    (slopes, reference, Some(shift))
                }
            };
            let weights = beta_tilde
                .iter()
                .map(|b| 1.0 / b.abs())
                .chain(std::iter::repeat_n(0.0, q))
                .collect();
            let constraints = beta_tilde
                .iter()
                .map(|&b| if b > 0.0 { Constraint::NonNegative } else { Constraint::NonPositive })
                .chain(cov_constraints)
                .collect();
            let problem =
                PenalizedProblem::new(with_covariates(x, covariates)?, y, family, weights, constraints, 1.0)?;
            Design {
                problem,
                variants: kept,
                scale,
                offset: vec![0.0; p],
                reference,
                shift,
                dropped,
            }
        }
    };
    Ok(design)
}

fn validation_predictions(
    composed: &Composed,
    x_val: &Array2<f64>,
    cov_val: &Array2<f64>,
) -> Vec<f64> {
    let mut eta = vec![composed.intercept; x_val.nrows()];
    for &(k, gamma) in &composed.genetic {
        for (e, x) in eta.iter_mut().zip(x_val.column(k)) {
            *e += gamma * x;
        }
    }
    for (c, col) in composed.covariates.iter().zip(cov_val.columns()) {
        for (e, x) in eta.iter_mut().zip(col) {
            *e += c * x;
        }
    }
    eta
}

/// First index of the largest value, so ties favour the larger lambda.
fn best_index(metrics: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (k, &v) in metrics.iter().enumerate() {
        if v.is_nan() {
            continue;
        }
        if best.is_none_or(|b| v > metrics[b]) {
            best = Some(k);
        }
    }
    best
}

fn check_inputs(genotypes: &GenotypeMatrix, phenotype: &PhenotypeTable, config: &PipelineConfig) -> Result<()> {
    if phenotype.len() != genotypes.n_individuals() {
        return Err(PrsError::dimension(format!(
            "{} phenotype rows but {} genotyped individuals",
            phenotype.len(),
            genotypes.n_individuals()
        )));
    }
    if config.family == Family::Binomial && !phenotype.is_binary() {
        return Err(PrsError::invalid("binomial family needs a 0/1 response"));
    }
    if !(0.0..=0.5).contains(&config.maf_threshold) {
        return Err(PrsError::invalid(format!("maf_threshold {} outside [0, 0.5]", config.maf_threshold)));
    }
    if config.path_length == 0 {
        return Err(PrsError::invalid("path_length must be positive"));
    }
    Ok(())
}

/// Runs the configured method end to end.
pub fn fit_model(
    genotypes: &GenotypeMatrix,
    phenotype: &PhenotypeTable,
    external: Option<&ExternalScores>,
    config: &PipelineConfig,
) -> Result<FitOutcome> {
    check_inputs(genotypes, phenotype, config)?;
    let ids = genotypes.variant_ids();
    let mut timings = StageTimings::default();

    let clock = Instant::now();
    let split = split(genotypes.n_individuals(), &config.split)?;
    info!(
        "[SPLIT] train={} validation={} test={} seed={}",
        split.train.len(),
        split.validation.len(),
        split.test.len(),
        config.split.seed
    );
    let design = build_design(genotypes, phenotype, &split.train, external, config, false)?;
    info!(
        "[UNIV] method={} features={} dropped={} ({:.2}s)",
        config.method,
        design.n_variants(),
        design.dropped.len(),
        clock.elapsed().as_secs_f64()
    );
    timings.preprocess_s += clock.elapsed().as_secs_f64();

    let clock = Instant::now();
    let lambda_path = match config.min_ratio {
        Some(r) => LambdaPath::geometric(crate::solver::lambda_max(&design.problem)?, config.path_length, r)?,
        None => {
            let default = LambdaPath::default_for(&design.problem)?;
            LambdaPath::geometric(default.lambdas()[0], config.path_length, default.min_ratio())?
        }
    };
    let path = fit_path(&design.problem, &lambda_path, &config.solver)?;
    if !path.all_converged() {
        warn!("[SOLVE] some path points did not converge");
    }
    let x_val = genotypes.dense(&split.validation, &design.variants)?;
    let cov_val = phenotype.covariates.select(Axis(0), &split.validation);
    let y_val: Vec<f64> = split.validation.iter().map(|&i| phenotype.response[i]).collect();
    let train_mean = mean(&split.train.iter().map(|&i| phenotype.response[i]).collect::<Vec<_>>());
    let metric = Metric::for_family(config.family);
    let validation_metrics = path
        .points
        .iter()
        .map(|pt| {
            let eta = validation_predictions(&design.compose(pt), &x_val, &cov_val);
            metric_value(metric, &y_val, &eta, train_mean)
        })
        .collect::<Result<Vec<f64>>>()?;
    let chosen = best_index(&validation_metrics)
        .ok_or_else(|| PrsError::invalid("validation metric undefined along the whole path"))?;
    let chosen_lambda = lambda_path.lambdas()[chosen];
    info!(
        "[SOLVE] path={} chosen_index={} lambda={:.6e} validation_{}={:.4} ({:.2}s)",
        lambda_path.len(),
        chosen,
        chosen_lambda,
        metric,
        validation_metrics[chosen],
        clock.elapsed().as_secs_f64()
    );
    timings.train_s += clock.elapsed().as_secs_f64();
    drop(x_val);
    drop(design);

    let clock = Instant::now();
    let rows = split.train_validation();
    let refit_design = build_design(genotypes, phenotype, &rows, external, config, true)?;
    timings.preprocess_s += clock.elapsed().as_secs_f64();
    let clock = Instant::now();
    let refit_path = fit_path(&refit_design.problem, &lambda_path.truncated(chosen), &config.solver)?;
    let last = refit_path.points.last().expect("nonempty path");
    if !last.converged {
        return Err(PrsError::NonConvergence { lambda: last.lambda });
    }
    timings.train_s += clock.elapsed().as_secs_f64();

    let composed = refit_design.compose(last);
    let mut model = FittedModel {
        method: config.method,
        family: config.family,
        intercept: composed.intercept,
        coefficients: composed
            .genetic
            .iter()
            .map(|&(k, g)| (ids[refit_design.variants[k]].clone(), g))
            .collect(),
        covariate_names: phenotype.covariate_names.clone(),
        covariate_coefficients: composed.covariates,
        chosen_lambda,
        composition: if config.method == Method::UnilassoEs {
            config.composition
        } else {
            Composition::Direct
        },
        metadata: ModelMetadata {
            stabilization_constant: refit_design.shift,
            maf_threshold: config.maf_threshold,
            split_seed: config.split.seed,
            train_mean: mean(&rows.iter().map(|&i| phenotype.response[i]).collect::<Vec<_>>()),
            lambda_index: chosen,
            validation_metric: validation_metrics[chosen],
            n_train: split.train.len(),
            n_validation: split.validation.len(),
            n_test: split.test.len(),
            sign_changes: 0,
        },
    };
    let sign_reference: HashMap<String, f64> = refit_design
        .variants
        .iter()
        .zip(&refit_design.reference)
        .map(|(&j, &r)| (ids[j].clone(), r))
        .collect();
    let sign_changes = count_sign_changes(&model, &sign_reference);
    model.metadata.sign_changes = sign_changes;
    info!(
        "[SOLVE] refit rows={} nonzero={} sign_changes={} ({:.2}s)",
        rows.len(),
        model.n_nonzero(),
        sign_changes,
        clock.elapsed().as_secs_f64()
    );
    let dropped = refit_design.dropped.iter().map(|&j| ids[j].clone()).collect();
    Ok(FitOutcome {
        model,
        split,
        path,
        lambdas: lambda_path.lambdas().to_vec(),
        validation_metrics,
        refit_path,
        sign_reference,
        sign_changes,
        timings,
        dropped,
    })
}

pub fn fit_lasso(
    genotypes: &GenotypeMatrix,
    phenotype: &PhenotypeTable,
    config: &PipelineConfig,
) -> Result<FitOutcome> {
    fit_model(genotypes, phenotype, None, &PipelineConfig { method: Method::Lasso, ..*config })
}

pub fn fit_unilasso(
    genotypes: &GenotypeMatrix,
    phenotype: &PhenotypeTable,
    config: &PipelineConfig,
) -> Result<FitOutcome> {
    fit_model(genotypes, phenotype, None, &PipelineConfig { method: Method::Unilasso, ..*config })
}

pub fn fit_unilasso_es(
    genotypes: &GenotypeMatrix,
    phenotype: &PhenotypeTable,
    external: &ExternalScores,
    config: &PipelineConfig,
) -> Result<FitOutcome> {
    fit_model(
        genotypes,
        phenotype,
        Some(external),
        &PipelineConfig {
            method: Method::UnilassoEs,
            ..*config
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::{simulate_genotypes, simulate_phenotype, synthetic_external_scores, SimConfig};
    use crate::solver::{fit_single, predict_dense};

    fn data(n_causal: usize, family: Family, seed: u64) -> (GenotypeMatrix, PhenotypeTable, crate::simulate::SimTruth) {
        let cfg = SimConfig {
            n: 300,
            p: 120,
            block_size: 6,
            n_causal,
            family,
            seed,
            ..SimConfig::default()
        };
        let g = simulate_genotypes(&cfg).unwrap();
        let (ph, truth) = simulate_phenotype(&g, &cfg).unwrap();
        (g, ph, truth)
    }

    fn config(method: Method, family: Family) -> PipelineConfig {
        PipelineConfig {
            method,
            family,
            path_length: 30,
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn split_sizes_and_partition() {
        let s = split(10, &SplitSpec::default()).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (7, 1, 2));
        let s = split(2000, &SplitSpec { seed: 5, ..SplitSpec::default() }).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (1400, 200, 400));
        let mut all: Vec<usize> = s.train.iter().chain(&s.validation).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..2000).collect::<Vec<_>>());
        assert_eq!(s, split(2000, &SplitSpec { seed: 5, ..SplitSpec::default() }).unwrap());
        assert_ne!(s, split(2000, &SplitSpec { seed: 6, ..SplitSpec::default() }).unwrap());
        assert!(split(9, &SplitSpec::default()).is_err());
    }

    #[test]
    fn best_index_prefers_larger_lambda_on_ties() {
        assert_eq!(best_index(&[0.1, 0.3, 0.3, 0.2]), Some(1));
        assert_eq!(best_index(&[f64::NAN, 0.0]), Some(1));
        assert_eq!(best_index(&[f64::NAN]), None);
    }

    #[test]
    fn model_file_roundtrip() {
        let (g, ph, _) = data(5, Family::Gaussian, 1);
        let out = fit_unilasso(&g, &ph, &config(Method::Unilasso, Family::Gaussian)).unwrap();
        let mut buf = Vec::new();
        out.model.write_to(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("#method=unilasso\n#family=gaussian\n"));
        assert!(text.contains("#covariate:sex="));
        assert!(text.contains("\nvariant_id\tcoefficient\n"));
        let back = FittedModel::read_from(&buf[..]).unwrap();
        assert_eq!(back, out.model);
    }

    #[test]
    fn unilasso_keeps_univariate_signs() {
        for family in [Family::Gaussian, Family::Binomial] {
            for seed in 0..3 {
                let (g, ph, _) = data(6, family, seed);
                let out = fit_unilasso(&g, &ph, &config(Method::Unilasso, family)).unwrap();
                assert_eq!(out.sign_changes, 0);
                assert!(out.model.n_nonzero() > 0);
                for (id, c) in &out.model.coefficients {
                    assert_eq!(c.signum(), out.sign_reference[id].signum());
                }
            }
        }
    }

    #[test]
    fn es_signs_follow_external_scores() {
        let (g, ph, truth) = data(6, Family::Gaussian, 3);
        let ext = synthetic_external_scores(&truth, g.variant_ids(), 5.0, 3, false).unwrap();
        for composition in [Composition::Direct, Composition::UnivariateComposed] {
            let cfg = PipelineConfig {
                composition,
                ..config(Method::UnilassoEs, Family::Gaussian)
            };
            let out = fit_unilasso_es(&g, &ph, &ext, &cfg).unwrap();
            assert_eq!(out.sign_changes, 0);
            assert_eq!(out.model.composition, composition);
            if composition == Composition::Direct {
                for (id, c) in &out.model.coefficients {
                    assert_eq!(c.signum(), ext[id].signum());
                }
            }
        }
    }

    #[test]
    fn zero_or_missing_external_score_excludes_variant() {
        let (g, ph, truth) = data(6, Family::Gaussian, 4);
        let mut ext = synthetic_external_scores(&truth, g.variant_ids(), 5.0, 4, false).unwrap();
        let causal = g.variant_ids()[truth.causal_indices[0]].clone();
        ext.insert(causal.clone(), 0.0);
        let missing = g.variant_ids()[truth.causal_indices[1]].clone();
        ext.remove(&missing);
        let cfg = config(Method::UnilassoEs, Family::Gaussian);
        let out = fit_unilasso_es(&g, &ph, &ext, &cfg).unwrap();
        assert!(out.model.coefficients.iter().all(|(id, _)| *id != causal && *id != missing));
        assert!(out.dropped.contains(&causal) && out.dropped.contains(&missing));

        let strict = PipelineConfig {
            strict_external: true,
            ..cfg
        };
        assert!(fit_unilasso_es(&g, &ph, &ext, &strict).is_err());
        let zeros: ExternalScores = g.variant_ids().iter().map(|id| (id.clone(), 0.0)).collect();
        assert!(fit_unilasso_es(&g, &ph, &zeros, &cfg).is_err());
    }

    #[test]
    fn composed_model_matches_second_stage_on_univariate_features() {
        let (g, ph, _) = data(6, Family::Gaussian, 5);
        let cfg = config(Method::Unilasso, Family::Gaussian);
        let rows: Vec<usize> = (0..200).collect();
        let design = build_design(&g, &ph, &rows, None, &cfg, true).unwrap();
        let lmax = crate::solver::lambda_max(&design.problem).unwrap();
        let point = fit_single(&design.problem, 0.05 * lmax, &cfg.solver).unwrap();
        assert!(point.n_nonzero > 1);
        let composed = design.compose(&point);

        // second stage applied to univariate predictions u0 + u1 x on fresh rows
        let test: Vec<usize> = (200..300).collect();
        let x = g.dense(&test, &design.variants).unwrap();
        let cov = ph.covariates.select(Axis(0), &test);
        let mut features = x.clone();
        for (k, mut col) in features.columns_mut().into_iter().enumerate() {
            col.mapv_inplace(|v| design.offset[k] + design.scale[k] * v);
        }
        let features = with_covariates(features, cov.clone()).unwrap();
        let beta = point.beta(design.problem.n_features());
        let stage_two = predict_dense(&features, point.intercept, ndarray::ArrayView1::from(&beta[..]));
        let direct = validation_predictions(&composed, &x, &cov);
        for (a, b) in stage_two.iter().zip(&direct) {
            assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn predictions_follow_model_definition() {
        let (g, ph, _) = data(3, Family::Gaussian, 6);
        let rows: Vec<usize> = (0..10).collect();
        let mut model = FittedModel {
            method: Method::Lasso,
            family: Family::Gaussian,
            intercept: 0.7,
            coefficients: vec![],
            covariate_names: ph.covariate_names.clone(),
            covariate_coefficients: vec![0.0; ph.n_covariates()],
            chosen_lambda: 1.0,
            composition: Composition::Direct,
            metadata: ModelMetadata::default(),
        };
        assert_eq!(predict(&model, &g, &ph, &rows).unwrap(), vec![0.7; 10]);
        model.coefficients.push((g.variant_ids()[4].clone(), -1.5));
        model.covariate_coefficients[1] = 2.0;
        let eta = predict(&model, &g, &ph, &rows).unwrap();
        let col = g.column_dense(4).unwrap();
        for &i in &rows {
            let expect = 0.7 - 1.5 * col[i] + 2.0 * ph.covariates[[i, 1]];
            assert!((eta[i] - expect).abs() < 1e-12);
        }
        model.coefficients.push(("nope".into(), 1.0));
        assert!(predict(&model, &g, &ph, &rows).is_err());
    }

    #[test]
    fn lambda_above_max_leaves_covariates_only() {
        let (g, ph, _) = data(6, Family::Gaussian, 7);
        let cfg = config(Method::Lasso, Family::Gaussian);
        let rows: Vec<usize> = (0..300).collect();
        let design = build_design(&g, &ph, &rows, None, &cfg, false).unwrap();
        let lmax = crate::solver::lambda_max(&design.problem).unwrap();
        let point = fit_single(&design.problem, 1.01 * lmax, &cfg.solver).unwrap();
        let composed = design.compose(&point);
        assert!(composed.genetic.is_empty());
        assert!(composed.covariates.iter().any(|&c| c != 0.0));
    }

    #[test]
    fn null_phenotype_gives_sparse_weak_model() {
        let (g, ph, _) = data(0, Family::Gaussian, 8);
        let out = fit_lasso(&g, &ph, &config(Method::Lasso, Family::Gaussian)).unwrap();
        assert!(out.model.n_nonzero() <= 5, "{}", out.model.n_nonzero());
        assert!(out.test_metric(&g, &ph).unwrap() <= 0.02);
    }

    #[test]
    fn validation_choice_is_the_maximum() {
        let (g, ph, _) = data(6, Family::Binomial, 9);
        let out = fit_lasso(&g, &ph, &config(Method::Lasso, Family::Binomial)).unwrap();
        let k = out.model.metadata.lambda_index;
        assert!(out.validation_metrics.iter().all(|&m| m <= out.validation_metrics[k]));
        assert!(out.validation_metrics[..k].iter().all(|&m| m < out.validation_metrics[k]));
        assert_eq!(out.refit_path.points.len(), k + 1);
        assert_eq!(out.model.chosen_lambda, out.lambdas[k]);
    }

    #[test]
    fn deterministic_model_bytes() {
        let (g, ph, _) = data(6, Family::Gaussian, 10);
        let cfg = config(Method::Unilasso, Family::Gaussian);
        let bytes = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            let out = pool.install(|| fit_unilasso(&g, &ph, &cfg).unwrap());
            let mut buf = Vec::new();
            out.model.write_to(&mut buf).unwrap();
            buf
        };
        assert_eq!(bytes(1), bytes(4));
    }
}
