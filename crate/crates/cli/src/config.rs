//! Flat `key = value` settings: built-in defaults, then an optional config
//! file, then command-line values. Later sources win.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use crate::CliError;

#[derive(Debug, Clone, Copy)]
pub struct KeySpec {
    pub key: &'static str,
    pub default: Option<&'static str>,
}

const fn key(key: &'static str, default: &'static str) -> KeySpec {
    KeySpec {
        key,
        default: Some(default),
    }
}

const fn optional(key: &'static str) -> KeySpec {
    KeySpec { key, default: None }
}

pub const SIMULATION_KEYS: &[KeySpec] = &[
    key("n", "2000"),
    key("p", "5000"),
    key("block_size", "10"),
    key("within_block_correlation", "0.8"),
    key("maf_low", "0.05"),
    key("maf_high", "0.5"),
    key("n_causal", "20"),
    key("heritability", "0.5"),
    key("case_fraction", "0.3"),
    key("missing_rate", "0"),
    key("one_causal_per_block", "true"),
    key("n_covariates", "2"),
    key("covariate_effect", "0"),
];

pub const SIMULATE_KEYS: &[KeySpec] = &[key("family", "gaussian"), key("seed", "1"), key("out", "sim"), key("workers", "0")];

pub const SOLVER_KEYS: &[KeySpec] = &[
    key("maf_threshold", "0.0005"),
    key("composition", "direct"),
    key("path_length", "100"),
    key("min_ratio", "auto"),
    key("tol", "1e-7"),
    key("max_iter", "100000"),
    key("max_outer", "25"),
    key("kkt_tol", "1e-6"),
    key("strict_external", "false"),
];

pub const FIT_KEYS: &[KeySpec] = &[
    optional("genotypes"),
    optional("phenotype"),
    optional("samples"),
    optional("external_scores"),
    key("method", "unilasso"),
    key("family", "gaussian"),
    key("seed", "0"),
    key("out", "fit"),
    key("workers", "0"),
];

pub const EVAL_KEYS: &[KeySpec] = &[
    optional("model"),
    optional("genotypes"),
    optional("phenotype"),
    optional("samples"),
    optional("metric"),
    key("rows", "test"),
    key("include_timings", "false"),
    key("out", "eval"),
    key("workers", "0"),
];

pub const BENCH_KEYS: &[KeySpec] = &[
    key("seeds", "1-10"),
    key("families", "gaussian"),
    key("methods", "lasso,unilasso,unilasso_es"),
    key("snr", "5"),
    key("include_timings", "false"),
    key("out", "bench"),
    key("workers", "0"),
];

/// Resolved settings for one command.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    command: String,
    values: BTreeMap<String, String>,
}

/// Parses `key = value` lines; `#` starts a comment line.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("config line {}: expected key = value, got {line:?}", no + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn parse_assignment(text: &str) -> Result<(String, String), CliError> {
    let (k, v) = text
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {text:?}")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

impl Settings {
    pub fn resolve(
        command: &str,
        specs: &[&[KeySpec]],
        config_file: Option<&Path>,
        overrides: Vec<(String, String)>,
    ) -> Result<Settings, CliError> {
        let known: Vec<&KeySpec> = specs.iter().flat_map(|s| s.iter()).collect();
        let mut values: BTreeMap<String, String> = known
            .iter()
            .filter_map(|k| k.default.map(|d| (k.key.to_string(), d.to_string())))
            .collect();
        let mut assignments = Vec::new();
        if let Some(path) = config_file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read config file {}: {e}", path.display())))?;
            assignments.extend(parse_config_text(&text)?);
        }
        assignments.extend(overrides);
        for (k, v) in assignments {
            if !known.iter().any(|s| s.key == k) {
                return Err(CliError::Usage(format!("unknown key {k:?} for command {command}")));
            }
            values.insert(k, v);
        }
        Ok(Settings {
            command: command.to_string(),
            values,
        })
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str).filter(|v| !v.is_empty())
    }

    pub fn get<T>(&self, key: &str) -> Result<T, CliError>
    where
        T: FromStr,
        T::Err: Display,
    {
        self.opt(key)?
            .ok_or_else(|| CliError::Usage(format!("{key} is required for command {}", self.command)))
    }

    pub fn opt<T>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T: FromStr,
        T::Err: Display,
    {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e| CliError::Usage(format!("{key}: invalid value {v:?} ({e})"))),
        }
    }

    pub fn list<T>(&self, key: &str) -> Result<Vec<T>, CliError>
    where
        T: FromStr,
        T::Err: Display,
    {
        self.raw(key)
            .unwrap_or("")
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|e| CliError::Usage(format!("{key}: invalid entry {s:?} ({e})"))))
            .collect()
    }

    /// Every resolved value, in a form `--config` accepts.
    pub fn write_metadata<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "# sparse-prs {} {}", env!("CARGO_PKG_VERSION"), self.command)?;
        for (k, v) in &self.values {
            writeln!(w, "{k} = {v}")?;
        }
        Ok(())
    }
}

/// Accepts `a-b` ranges and comma lists, e.g. `1-3,7`.
pub fn parse_seeds(text: &str) -> Result<Vec<u64>, CliError> {
    let bad = || CliError::Usage(format!("seeds: invalid value {text:?}"));
    let mut seeds = Vec::new();
    for part in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                let a: u64 = a.trim().parse().map_err(|_| bad())?;
                let b: u64 = b.trim().parse().map_err(|_| bad())?;
                if b < a {
                    return Err(bad());
                }
                seeds.extend(a..=b);
            }
            None => seeds.push(part.parse().map_err(|_| bad())?),
        }
    }
    if seeds.is_empty() {
        return Err(bad());
    }
    Ok(seeds)
}
