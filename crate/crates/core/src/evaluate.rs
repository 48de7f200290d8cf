//! Test-set metrics, support statistics and report tables.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use log::warn;

use crate::error::{PrsError, Result};
use crate::pipeline::FittedModel;
use crate::Family;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    R2,
    Auc,
}

impl Metric {
    pub fn for_family(family: Family) -> Metric {
        match family {
            Family::Gaussian => Metric::R2,
            Family::Binomial => Metric::Auc,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::R2 => "r2",
            Metric::Auc => "auc",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Metric {
    type Err = PrsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "r2" => Ok(Metric::R2),
            "auc" => Ok(Metric::Auc),
            other => Err(PrsError::invalid(format!("unknown metric {other:?} (expected r2 or auc)"))),
        }
    }
}

/// `1 - sum (y - eta)^2 / sum (y - ybar0)^2` with `ybar0` the training mean.
pub fn r_squared(y: &[f64], eta: &[f64], train_mean: f64) -> Result<f64> {
    if y.len() != eta.len() {
        return Err(PrsError::dimension("response and predictions differ in length"));
    }
    let rss: f64 = y.iter().zip(eta).map(|(a, b)| (a - b) * (a - b)).sum();
    let tss: f64 = y.iter().map(|a| (a - train_mean) * (a - train_mean)).sum();
    if tss == 0.0 {
        return Err(PrsError::invalid("R^2 baseline sum of squares is zero"));
    }
    Ok(1.0 - rss / tss)
}

/// Mann-Whitney estimate of the area under the ROC curve; ties count 1/2.
pub fn auc(y: &[f64], eta: &[f64]) -> Result<f64> {
    if y.len() != eta.len() {
        return Err(PrsError::dimension("response and predictions differ in length"));
    }
    if y.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(PrsError::invalid("AUC needs a 0/1 response"));
    }
    if eta.iter().any(|v| v.is_nan()) {
        return Err(PrsError::invalid("AUC scores contain NaN"));
    }
    let n_pos = y.iter().filter(|&&v| v == 1.0).count();
    let n_neg = y.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(PrsError::invalid("AUC needs both classes in the test set"));
    }
    let mut order: Vec<usize> = (0..y.len()).collect();
    order.sort_by(|&a, &b| eta[a].total_cmp(&eta[b]));
    let mut rank_sum = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && eta[order[end]] == eta[order[start]] {
            end += 1;
        }
        // ranks start..end (0-based) share their average, 1-based
        let avg = (start + end + 1) as f64 / 2.0;
        let pos_in_group = order[start..end].iter().filter(|&&i| y[i] == 1.0).count();
        rank_sum += avg * pos_in_group as f64;
        start = end;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

pub fn metric_value(metric: Metric, y: &[f64], eta: &[f64], train_mean: f64) -> Result<f64> {
    match metric {
        Metric::R2 => r_squared(y, eta, train_mean),
        Metric::Auc => auc(y, eta),
    }
}

/// Nonzero coefficients whose sign differs from the reference slope. A zero
/// or absent reference counts as a change.
pub fn count_sign_changes(model: &FittedModel, reference: &HashMap<String, f64>) -> usize {
    model
        .coefficients
        .iter()
        .filter(|(_, c)| *c != 0.0)
        .filter(|(id, c)| {
            let r = reference.get(id).copied().unwrap_or(0.0);
            r == 0.0 || r.signum() != c.signum()
        })
        .count()
}

pub fn support(model: &FittedModel) -> BTreeSet<&str> {
    model
        .coefficients
        .iter()
        .filter(|(_, c)| *c != 0.0)
        .map(|(id, _)| id.as_str())
        .collect()
}

/// `|A & B| / |A | B|`; two empty sets give 0.
pub fn jaccard(a: &BTreeSet<&str>, b: &BTreeSet<&str>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        warn!("Jaccard similarity of two empty supports set to 0");
        return 0.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityTable {
    pub labels: Vec<String>,
    /// Row-major square matrix.
    pub values: Vec<Vec<f64>>,
}

impl SimilarityTable {
    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.values[a][b]
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec![String::new()];
        header.extend(self.labels.iter().cloned());
        out.write_record(&header)?;
        for (label, row) in self.labels.iter().zip(&self.values) {
            let mut rec = vec![label.clone()];
            rec.extend(row.iter().map(|v| v.to_string()));
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }
}

pub fn support_similarity(labels: &[String], models: &[&FittedModel]) -> Result<SimilarityTable> {
    if models.len() < 2 {
        return Err(PrsError::invalid("support similarity needs at least two models"));
    }
    if labels.len() != models.len() {
        return Err(PrsError::dimension("one label per model required"));
    }
    let supports: Vec<BTreeSet<&str>> = models.iter().map(|m| support(m)).collect();
    let values = supports
        .iter()
        .map(|a| supports.iter().map(|b| jaccard(a, b)).collect())
        .collect();
    Ok(SimilarityTable {
        labels: labels.to_vec(),
        values,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub method: String,
    pub phenotype: String,
    pub family: Family,
    pub metric: Metric,
    pub metric_value: f64,
    /// Variant coefficients only.
    pub n_nonzero: usize,
    pub sign_changes: usize,
    pub runtime_preprocess_s: Option<f64>,
    pub runtime_train_s: Option<f64>,
}

pub const REPORT_HEADER: [&str; 8] = [
    "method",
    "family",
    "metric_name",
    "metric_value",
    "n_nonzero",
    "sign_changes",
    "runtime_preprocess_s",
    "runtime_train_s",
];

/// One row per report. Runtimes are left blank when absent.
pub fn write_report<W: Write>(reports: &[EvalReport], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(REPORT_HEADER)?;
    let opt = |v: Option<f64>| v.map(|s| format!("{s:.3}")).unwrap_or_default();
    for r in reports {
        out.write_record([
            r.method.clone(),
            r.family.to_string(),
            r.metric.to_string(),
            r.metric_value.to_string(),
            r.n_nonzero.to_string(),
            r.sign_changes.to_string(),
            opt(r.runtime_preprocess_s),
            opt(r.runtime_train_s),
        ])?;
    }
    out.flush()?;
    Ok(())
}
