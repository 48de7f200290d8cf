//! Synthetic genotypes with LD-block correlation and phenotypes with known
//! sparse effects.
//!
//! Genotypes follow a thresholded Gaussian copula: inside a block every
//! individual shares one latent factor, so latent values of two variants in
//! the same block have correlation `within_block_correlation`. Each latent
//! value is cut into 0/1/2 at Hardy-Weinberg quantiles for a per-variant
//! minor-allele frequency. Blocks draw from independent counter-based
//! streams, so generating them in parallel does not change the output.

use std::collections::HashMap;
use std::f64::consts::PI;

use ndarray::Array2;
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{PrsError, Result};
use crate::genotype::{GenotypeMatrix, PhenotypeTable};
use crate::linalg::{mean, sigmoid};
use crate::Family;

/// Stream id reserved for phenotype draws; blocks use their index.
const PHENOTYPE_STREAM: u64 = u64::MAX;
const EXTERNAL_STREAM: u64 = u64::MAX - 1;

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub n: usize,
    pub p: usize,
    pub block_size: usize,
    pub within_block_correlation: f64,
    pub maf_range: (f64, f64),
    pub n_causal: usize,
    pub family: Family,
    /// Share of phenotypic variance from genotypes (liability scale for binomial).
    pub heritability: f64,
    pub case_fraction: f64,
    pub missing_rate: f64,
    pub seed: u64,
    pub one_causal_per_block: bool,
    pub n_covariates: usize,
    pub covariate_effect: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n: 2000,
            p: 5000,
            block_size: 10,
            within_block_correlation: 0.8,
            maf_range: (0.05, 0.5),
            n_causal: 20,
            family: Family::Gaussian,
            heritability: 0.5,
            case_fraction: 0.3,
            missing_rate: 0.0,
            seed: 1,
            one_causal_per_block: true,
            n_covariates: 2,
            covariate_effect: 0.0,
        }
    }
}

impl SimConfig {
    pub fn n_blocks(&self) -> usize {
        self.p.div_ceil(self.block_size)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(PrsError::invalid(format!("{key}: {msg}")));
        if self.n < 10 {
            return bad("n", format!("need at least 10 individuals, got {}", self.n));
        }
        if self.p == 0 {
            return bad("p", "need at least one variant".into());
        }
        if self.block_size == 0 {
            return bad("block_size", "must be positive".into());
        }
        if !(0.0..1.0).contains(&self.within_block_correlation) {
            return bad("within_block_correlation", format!("{} outside [0, 1)", self.within_block_correlation));
        }
        let (lo, hi) = self.maf_range;
        if !(lo > 0.0 && lo <= hi && hi <= 0.5) {
            return bad("maf_range", format!("({lo}, {hi}) is not within (0, 0.5]"));
        }
        if self.n_causal > self.p {
            return bad("n_causal", format!("{} exceeds p = {}", self.n_causal, self.p));
        }
        if self.one_causal_per_block && self.n_causal > self.n_blocks() {
            return bad("n_causal", format!("{} exceeds the {} LD blocks", self.n_causal, self.n_blocks()));
        }
        if !(self.heritability > 0.0 && self.heritability < 1.0) {
            return bad("heritability", format!("{} outside (0, 1)", self.heritability));
        }
        if !(self.case_fraction > 0.0 && self.case_fraction < 1.0) {
            return bad("case_fraction", format!("{} outside (0, 1)", self.case_fraction));
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return bad("missing_rate", format!("{} outside [0, 1)", self.missing_rate));
        }
        if !self.covariate_effect.is_finite() {
            return bad("covariate_effect", "must be finite".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimTruth {
    /// Sorted ascending.
    pub causal_indices: Vec<usize>,
    /// `(variant, effect)` for each causal variant, ascending by variant.
    pub true_beta: Vec<(usize, f64)>,
    pub linear_predictor: Vec<f64>,
}

impl SimTruth {
    pub fn dense_beta(&self, p: usize) -> Vec<f64> {
        let mut beta = vec![0.0; p];
        for &(j, b) in &self.true_beta {
            beta[j] = b;
        }
        beta
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn variant_id(j: usize) -> String {
    format!("snp{j:06}")
}

pub fn individual_id(i: usize) -> String {
    format!("ind{i:06}")
}

pub fn simulate_genotypes(config: &SimConfig) -> Result<GenotypeMatrix> {
    config.validate()?;
    let n = config.n;
    let std_normal = Normal::standard();
    let loading = config.within_block_correlation.sqrt();
    let unique = (1.0 - config.within_block_correlation).sqrt();
    let blocks: Vec<Vec<u8>> = (0..config.n_blocks())
        .into_par_iter()
        .map(|b| {
            let mut rng = stream_rng(config.seed, b as u64);
            let start = b * config.block_size;
            let width = config.block_size.min(config.p - start);
            let shared: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            let mut codes = Vec::with_capacity(width * n);
            for _ in 0..width {
                let maf = rng.random_range(config.maf_range.0..=config.maf_range.1);
                let lower = std_normal.inverse_cdf((1.0 - maf) * (1.0 - maf));
                let upper = std_normal.inverse_cdf(1.0 - maf * maf);
                for s in &shared {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    let z = loading * s + unique * e;
                    let code = if z < lower {
                        0
                    } else if z < upper {
                        1
                    } else {
                        2
                    };
                    let missing = config.missing_rate > 0.0 && rng.random::<f64>() < config.missing_rate;
                    codes.push(if missing { 3 } else { code });
                }
            }
            codes
        })
        .collect();
    let codes: Vec<u8> = blocks.concat();
    GenotypeMatrix::from_codes(n, (0..config.p).map(variant_id).collect(), &codes)
}

fn variance(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64
}

fn choose_causal(config: &SimConfig, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut causal: Vec<usize> = if config.one_causal_per_block {
        index::sample(rng, config.n_blocks(), config.n_causal)
            .into_iter()
            .map(|b| {
                let start = b * config.block_size;
                let width = config.block_size.min(config.p - start);
                start + rng.random_range(0..width)
            })
            .collect()
    } else {
        index::sample(rng, config.p, config.n_causal).into_vec()
    };
    causal.sort_unstable();
    causal
}

/// Intercept `c` with `mean(sigmoid(c + offset)) = target`, by bisection.
fn calibrate_intercept(offset: &[f64], target: f64) -> f64 {
    let frac = |c: f64| offset.iter().map(|o| sigmoid(c + o)).sum::<f64>() / offset.len() as f64;
    let (mut lo, mut hi) = (-50.0, 50.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if frac(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

pub fn simulate_phenotype(genotypes: &GenotypeMatrix, config: &SimConfig) -> Result<(PhenotypeTable, SimTruth)> {
    config.validate()?;
    let n = genotypes.n_individuals();
    if genotypes.n_variants() != config.p || n != config.n {
        return Err(PrsError::dimension("genotype matrix does not match the simulation config"));
    }
    let mut rng = stream_rng(config.seed, PHENOTYPE_STREAM);
    let causal = choose_causal(config, &mut rng);
    let signs: Vec<f64> = causal.iter().map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect();

    let mut genetic = vec![0.0; n];
    for (&j, &s) in causal.iter().zip(&signs) {
        for (g, x) in genetic.iter_mut().zip(genotypes.column_dense(j)?) {
            *g += s * x;
        }
    }
    let raw_var = variance(&genetic);
    if !causal.is_empty() && raw_var <= 0.0 {
        return Err(PrsError::invalid("causal variants give a constant genetic score"));
    }
    let h2 = config.heritability;
    let target_var = match config.family {
        Family::Gaussian => h2,
        Family::Binomial => h2 / (1.0 - h2) * PI * PI / 3.0,
    };
    let scale = if causal.is_empty() { 0.0 } else { (target_var / raw_var).sqrt() };
    genetic.iter_mut().for_each(|g| *g *= scale);

    let mut covariate_names = Vec::with_capacity(config.n_covariates);
    let mut covariates = Array2::<f64>::zeros((n, config.n_covariates));
    for k in 0..config.n_covariates {
        let name = match k {
            0 => "sex".to_string(),
            1 => "age".to_string(),
            _ => format!("pc{}", k - 1),
        };
        covariate_names.push(name);
        for i in 0..n {
            covariates[[i, k]] = if k == 0 {
                f64::from(rng.random_bool(0.5))
            } else {
                StandardNormal.sample(&mut rng)
            };
        }
    }
    let covariate_part: Vec<f64> = (0..n)
        .map(|i| config.covariate_effect * covariates.row(i).sum())
        .collect();

    let (response, intercept) = match config.family {
        Family::Gaussian => {
            let genetic_share = if causal.is_empty() { 0.0 } else { h2 };
            let noise_var = 1.0 - genetic_share - variance(&covariate_part);
            if noise_var <= 0.0 {
                return Err(PrsError::invalid("covariate_effect leaves no room for noise variance"));
            }
            let sd = noise_var.sqrt();
            let y = (0..n)
                .map(|i| {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    genetic[i] + covariate_part[i] + sd * e
                })
                .collect();
            (y, 0.0)
        }
        Family::Binomial => {
            let offset: Vec<f64> = genetic.iter().zip(&covariate_part).map(|(g, c)| g + c).collect();
            let c = calibrate_intercept(&offset, config.case_fraction);
            let y = offset
                .iter()
                .map(|o| f64::from(rng.random_bool(sigmoid(c + o))))
                .collect();
            (y, c)
        }
    };
    let linear_predictor = (0..n).map(|i| intercept + genetic[i] + covariate_part[i]).collect();
    let table = PhenotypeTable::new(
        (0..n).map(individual_id).collect(),
        "y",
        response,
        covariate_names,
        covariates,
    )?;
    let true_beta = causal.iter().zip(&signs).map(|(&j, &s)| (j, s * scale)).collect();
    Ok((
        table,
        SimTruth {
            causal_indices: causal,
            true_beta,
            linear_predictor,
        },
    ))
}

/// Synthetic external univariate scores: `true beta + N(0, sd^2)` for every
/// variant, with `sd = mean |causal effect| / snr`. With `permute` the scores
/// are shuffled across variants, which destroys their information.
pub fn synthetic_external_scores(
    truth: &SimTruth,
    variant_ids: &[String],
    snr: f64,
    seed: u64,
    permute: bool,
) -> Result<HashMap<String, f64>> {
    if !(snr > 0.0) {
        return Err(PrsError::invalid("external score SNR must be positive"));
    }
    let p = variant_ids.len();
    let beta = truth.dense_beta(p);
    let magnitude = if truth.true_beta.is_empty() {
        1.0
    } else {
        truth.true_beta.iter().map(|(_, b)| b.abs()).sum::<f64>() / truth.true_beta.len() as f64
    };
    let sd = magnitude / snr;
    let mut rng = stream_rng(seed, EXTERNAL_STREAM);
    let mut scores: Vec<f64> = beta
        .iter()
        .map(|b| {
            let e: f64 = StandardNormal.sample(&mut rng);
            b + sd * e
        })
        .collect();
    if permute {
        scores.shuffle(&mut rng);
    }
    Ok(variant_ids.iter().cloned().zip(scores).collect())
}
