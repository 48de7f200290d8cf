//! Per-variant univariate fits and their leave-one-out predictions.
//!
//! Every quantity here depends on a single column, so columns are processed
//! independently in parallel. The stabilized denominator `S*_xx` replaces the
//! centered sum of squares everywhere it appears (slope and leverage alike).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use log::warn;
use ndarray::{Array2, ArrayView2, ShapeBuilder};
use rayon::prelude::*;

use crate::error::{PrsError, Result};
use crate::genotype::{stabilize_sxx, GenotypeMatrix, PhenotypeTable};
use crate::linalg::{dot, logit, mean, sigmoid};
use crate::Family;

/// Smallest admissible `1 - H_ii`.
pub const LEVERAGE_GUARD: f64 = 1e-12;
/// Clamp applied to the mean response before taking its logit.
pub const PROB_CLAMP: f64 = 1e-6;
/// Floor on IRLS weights `p (1 - p)`.
pub const WEIGHT_FLOOR: f64 = 1e-6;
pub const IRLS_ITERATIONS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnivariateFit {
    /// Original variant index.
    pub variant: usize,
    pub u0: f64,
    pub u1: f64,
    /// Denominator used for the slope (weighted for the binomial family).
    pub sxx_used: f64,
    pub family: Family,
}

impl UnivariateFit {
    pub fn predict(&self, x: f64) -> f64 {
        self.u0 + self.u1 * x
    }
}

/// State of the final IRLS step of a univariate logistic fit.
#[derive(Debug, Clone, PartialEq)]
pub struct IrlsState {
    /// Linear predictor at which `weights` and `working_response` were formed.
    pub eta: Vec<f64>,
    pub weights: Vec<f64>,
    pub working_response: Vec<f64>,
    /// Fitted values of the final weighted least-squares solve.
    pub fitted: Vec<f64>,
}

fn check_lengths(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(PrsError::dimension(format!("x has {} entries, y has {}", x.len(), y.len())));
    }
    if x.len() < 3 {
        return Err(PrsError::invalid("univariate fits need at least 3 observations"));
    }
    Ok(())
}

fn check_denominator(sxx_star: f64) -> Result<()> {
    if !(sxx_star > 0.0 && sxx_star.is_finite()) {
        return Err(PrsError::invalid(format!("stabilized S_xx must be positive, got {sxx_star}")));
    }
    Ok(())
}

pub fn centered_sxx(x: &[f64]) -> f64 {
    let xbar = mean(x);
    x.iter().map(|v| (v - xbar) * (v - xbar)).sum()
}

pub fn fit_univariate_gaussian(x: &[f64], y: &[f64], sxx_star: f64) -> Result<UnivariateFit> {
    check_lengths(x, y)?;
    check_denominator(sxx_star)?;
    let xbar = mean(x);
    let ybar = mean(y);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - xbar) * (b - ybar)).sum();
    let u1 = sxy / sxx_star;
    Ok(UnivariateFit {
        variant: 0,
        u0: ybar - u1 * xbar,
        u1,
        sxx_used: sxx_star,
        family: Family::Gaussian,
    })
}

/// Closed-form leave-one-out predictions `L_i = y_i - r_i / (1 - H_ii)`.
pub fn loo_gaussian(x: &[f64], y: &[f64], fit: &UnivariateFit) -> Result<Vec<f64>> {
    check_lengths(x, y)?;
    check_denominator(fit.sxx_used)?;
    let n = x.len() as f64;
    let xbar = mean(x);
    x.iter()
        .zip(y)
        .enumerate()
        .map(|(i, (&xi, &yi))| {
            let h = 1.0 / n + (xi - xbar) * (xi - xbar) / fit.sxx_used;
            let denom = 1.0 - h;
            if denom <= LEVERAGE_GUARD {
                return Err(PrsError::Leverage { observation: i });
            }
            Ok(yi - (yi - fit.predict(xi)) / denom)
        })
        .collect()
}

struct WeightedMoments {
    total: f64,
    xbar: f64,
    sxx: f64,
}

fn weighted_moments(x: &[f64], w: &[f64], shift: f64) -> WeightedMoments {
    let total: f64 = w.iter().sum();
    let xbar = dot(w, x) / total;
    let sxx = x.iter().zip(w).map(|(v, wi)| wi * (v - xbar) * (v - xbar)).sum::<f64>() + shift;
    WeightedMoments { total, xbar, sxx }
}

fn check_binary(y: &[f64]) -> Result<f64> {
    if y.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(PrsError::invalid("binomial response must be coded 0/1"));
    }
    let ybar = mean(y);
    if ybar == 0.0 || ybar == 1.0 {
        return Err(PrsError::invalid("binomial response has a single class"));
    }
    Ok(ybar)
}

/// Two IRLS iterations from the null model `eta = logit(mean(y))`.
///
/// The additive stabilization `sxx_star - S_xx(x)` is carried over to the
/// weighted sum of squares of each iteration.
pub fn fit_univariate_binomial(x: &[f64], y: &[f64], sxx_star: f64) -> Result<(UnivariateFit, IrlsState)> {
    check_lengths(x, y)?;
    check_denominator(sxx_star)?;
    let ybar = check_binary(y)?;
    let shift = (sxx_star - centered_sxx(x)).max(0.0);
    fit_binomial_with_shift(x, y, ybar, shift)
}

fn fit_binomial_with_shift(x: &[f64], y: &[f64], ybar: f64, shift: f64) -> Result<(UnivariateFit, IrlsState)> {
    let n = x.len();
    let mut eta = vec![logit(ybar.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)); n];
    let mut fit = UnivariateFit {
        variant: 0,
        u0: 0.0,
        u1: 0.0,
        sxx_used: 0.0,
        family: Family::Binomial,
    };
    let mut state = None;
    for _ in 0..IRLS_ITERATIONS {
        let mut weights = vec![0.0; n];
        let mut z = vec![0.0; n];
        for i in 0..n {
            let p = sigmoid(eta[i]);
            let w = (p * (1.0 - p)).max(WEIGHT_FLOOR);
            weights[i] = w;
            z[i] = eta[i] + (y[i] - p) / w;
        }
        let m = weighted_moments(x, &weights, shift);
        if m.sxx <= 0.0 {
            return Err(PrsError::invalid("weighted S_xx is zero; constant column without stabilization"));
        }
        let zbar = dot(&weights, &z) / m.total;
        let sxz: f64 = (0..n).map(|i| weights[i] * (x[i] - m.xbar) * (z[i] - zbar)).sum();
        fit.u1 = sxz / m.sxx;
        fit.u0 = zbar - fit.u1 * m.xbar;
        fit.sxx_used = m.sxx;
        if !(fit.u0.is_finite() && fit.u1.is_finite()) {
            return Err(PrsError::invalid("IRLS produced non-finite coefficients"));
        }
        let fitted: Vec<f64> = x.iter().map(|&xi| fit.predict(xi)).collect();
        state = Some(IrlsState {
            eta: std::mem::replace(&mut eta, fitted.clone()),
            weights,
            working_response: z,
            fitted,
        });
    }
    Ok((fit, state.expect("at least one IRLS iteration")))
}

/// Approximate leave-one-out linear predictors from the final weighted
/// least-squares step: `L_i = z_i - (z_i - fitted_i) / (1 - H^w_ii)` with
/// `H^w_ii = w_i (1 / sum(w) + (x_i - xbar_w)^2 / S^w*_xx)`.
pub fn loo_binomial_approx(x: &[f64], y: &[f64], state: &IrlsState, sxx_star: f64) -> Result<Vec<f64>> {
    check_lengths(x, y)?;
    check_denominator(sxx_star)?;
    let n = x.len();
    if state.weights.len() != n || state.working_response.len() != n || state.fitted.len() != n {
        return Err(PrsError::dimension("IRLS state does not match the column length"));
    }
    let shift = (sxx_star - centered_sxx(x)).max(0.0);
    let m = weighted_moments(x, &state.weights, shift);
    (0..n)
        .map(|i| {
            let d = x[i] - m.xbar;
            let h = state.weights[i] * (1.0 / m.total + d * d / m.sxx);
            let denom = 1.0 - h;
            if denom <= LEVERAGE_GUARD {
                return Err(PrsError::Leverage { observation: i });
            }
            let z = state.working_response[i];
            Ok(z - (z - state.fitted[i]) / denom)
        })
        .collect()
}

/// Dense matrix of leave-one-out univariate predictions, one column per
/// retained variant.
#[derive(Debug, Clone, PartialEq)]
pub struct LooFeatureMatrix {
    /// `n x p_kept`, column-major.
    pub values: Array2<f64>,
    /// Column `k` holds variant `column_map[k]`.
    pub column_map: Vec<usize>,
    pub family: Family,
    /// Additive stabilization constant applied to every `S_xx`.
    pub sxx_shift: f64,
}

#[derive(Debug, Clone)]
pub struct LooBuild {
    pub features: LooFeatureMatrix,
    /// One fit per retained column, aligned with `features.column_map`.
    pub fits: Vec<UnivariateFit>,
    /// Variants dropped by the leverage guard.
    pub dropped: Vec<usize>,
}

/// Univariate fits and LOO predictions for every column of `x`.
///
/// `x` holds the imputed genotypes of the fitting rows for the kept variants
/// (column `k` is variant `variants[k]`). The stabilization constant is the
/// fifth percentile of the column `S_xx` values. `variant_ids` is indexed by
/// original variant index and only used to label errors.
pub fn build_loo_features(
    x: ArrayView2<f64>,
    variants: &[usize],
    variant_ids: &[String],
    y: &[f64],
    family: Family,
) -> Result<LooBuild> {
    let (n, p) = x.dim();
    if p == 0 {
        return Err(PrsError::invalid("empty feature set"));
    }
    if variants.len() != p || y.len() != n {
        return Err(PrsError::dimension("design, variant map and response disagree"));
    }
    let ybar = match family {
        Family::Gaussian => mean(y),
        Family::Binomial => check_binary(y)?,
    };
    let column = |k: usize| -> std::borrow::Cow<'_, [f64]> {
        match x.column(k).to_slice() {
            Some(s) => std::borrow::Cow::Borrowed(s),
            None => std::borrow::Cow::Owned(x.column(k).to_vec()),
        }
    };
    let sxx: Vec<f64> = (0..p).into_par_iter().map(|k| centered_sxx(&column(k))).collect();
    let stabilized = stabilize_sxx(&sxx)?;
    if stabilized.shift <= 0.0 {
        return Err(PrsError::invalid("every kept column is constant"));
    }
    let shift = stabilized.shift;

    let per_column: Vec<Result<(UnivariateFit, Vec<f64>)>> = (0..p)
        .into_par_iter()
        .map(|k| {
            let col = column(k);
            let sxx_star = stabilized.values[k];
            let result = match family {
                Family::Gaussian => fit_univariate_gaussian(&col, y, sxx_star)
                    .and_then(|fit| loo_gaussian(&col, y, &fit).map(|l| (fit, l))),
                Family::Binomial => fit_binomial_with_shift(&col, y, ybar, shift)
                    .and_then(|(fit, state)| loo_binomial_approx(&col, y, &state, sxx_star).map(|l| (fit, l))),
            };
            result.map(|(mut fit, loo)| {
                fit.variant = variants[k];
                (fit, loo)
            })
        })
        .collect();

    let mut fits = Vec::with_capacity(p);
    let mut columns = Vec::with_capacity(p);
    let mut dropped = Vec::new();
    for (k, r) in per_column.into_iter().enumerate() {
        match r {
            Ok((fit, loo)) => {
                fits.push(fit);
                columns.push(loo);
            }
            Err(PrsError::Leverage { observation }) => {
                warn!("dropping variant {}: leverage at observation {observation} too close to one", variants[k]);
                dropped.push(variants[k]);
            }
            Err(e) => {
                return Err(PrsError::Variant {
                    variant_id: variant_ids
                        .get(variants[k])
                        .cloned()
                        .unwrap_or_else(|| format!("#{}", variants[k])),
                    source: Box::new(e),
                })
            }
        }
    }
    if fits.is_empty() {
        return Err(PrsError::invalid("empty feature set"));
    }
    let mut values = Array2::<f64>::zeros((n, fits.len()).f());
    for (mut dst, src) in values.columns_mut().into_iter().zip(&columns) {
        dst.assign(&ndarray::ArrayView1::from(&src[..]));
    }
    Ok(LooBuild {
        features: LooFeatureMatrix {
            values,
            column_map: fits.iter().map(|f| f.variant).collect(),
            family,
            sxx_shift: shift,
        },
        fits,
        dropped,
    })
}

/// Univariate fits only, with the same stabilization as [`build_loo_features`].
/// Returns the fits (one per column of `x`) and the stabilization constant.
pub fn fit_univariate_columns(
    x: ArrayView2<f64>,
    variants: &[usize],
    variant_ids: &[String],
    y: &[f64],
    family: Family,
) -> Result<(Vec<UnivariateFit>, f64)> {
    let (n, p) = x.dim();
    if p == 0 {
        return Err(PrsError::invalid("empty feature set"));
    }
    if variants.len() != p || y.len() != n {
        return Err(PrsError::dimension("design, variant map and response disagree"));
    }
    let ybar = match family {
        Family::Gaussian => mean(y),
        Family::Binomial => check_binary(y)?,
    };
    let column = |k: usize| x.column(k).to_vec();
    let sxx: Vec<f64> = (0..p).into_par_iter().map(|k| centered_sxx(&column(k))).collect();
    let stabilized = stabilize_sxx(&sxx)?;
    if stabilized.shift <= 0.0 {
        return Err(PrsError::invalid("every kept column is constant"));
    }
    let fits = (0..p)
        .into_par_iter()
        .map(|k| {
            let col = column(k);
            let fit = match family {
                Family::Gaussian => fit_univariate_gaussian(&col, y, stabilized.values[k]),
                Family::Binomial => fit_binomial_with_shift(&col, y, ybar, stabilized.shift).map(|(f, _)| f),
            };
            fit.map(|mut f| {
                f.variant = variants[k];
                f
            })
            .map_err(|e| PrsError::Variant {
                variant_id: variant_ids.get(variants[k]).cloned().unwrap_or_else(|| format!("#{}", variants[k])),
                source: Box::new(e),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((fits, stabilized.shift))
}

/// Builds LOO features for the `kept` variants over all individuals.
pub fn build_loo_matrix(
    genotypes: &GenotypeMatrix,
    phenotype: &PhenotypeTable,
    kept: &[usize],
    family: Family,
) -> Result<LooBuild> {
    if phenotype.len() != genotypes.n_individuals() {
        return Err(PrsError::dimension("phenotype rows do not match genotype individuals"));
    }
    if kept.is_empty() {
        return Err(PrsError::invalid("empty feature set"));
    }
    let rows: Vec<usize> = (0..genotypes.n_individuals()).collect();
    let x = genotypes.dense(&rows, kept)?;
    build_loo_features(x.view(), kept, genotypes.variant_ids(), &phenotype.response, family)
}

pub const LOO_MAGIC: &[u8; 4] = b"LOO1";

/// Spill format: magic "LOO1", n and p as u64 LE, then f64 LE column-major.
pub fn write_loo_spill(values: &Array2<f64>, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let (n, p) = values.dim();
    w.write_all(LOO_MAGIC)?;
    w.write_all(&(n as u64).to_le_bytes())?;
    w.write_all(&(p as u64).to_le_bytes())?;
    for col in values.columns() {
        for v in col {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_loo_spill(path: impl AsRef<Path>) -> Result<Array2<f64>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut head = [0u8; 20];
    r.read_exact(&mut head)
        .map_err(|_| PrsError::format("truncated LOO1 header"))?;
    if &head[..4] != LOO_MAGIC {
        return Err(PrsError::format("bad magic, expected \"LOO1\""));
    }
    let n = u64::from_le_bytes(head[4..12].try_into().unwrap()) as usize;
    let p = u64::from_le_bytes(head[12..20].try_into().unwrap()) as usize;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != n * p * 8 {
        return Err(PrsError::format("LOO1 payload length does not match header"));
    }
    let data: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Array2::from_shape_vec((n, p).f(), data).map_err(|e| PrsError::format(e.to_string()))
}
