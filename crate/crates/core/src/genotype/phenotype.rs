use std::collections::HashMap;
use std::path::Path;

use ndarray::{Array2, Axis};

use crate::error::{PrsError, Result};

/// Response and covariates per individual.
///
/// The CSV layout is a header row with an `id` column; the first other column
/// is the response and any remaining columns are covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct PhenotypeTable {
    pub ids: Vec<String>,
    pub response_name: String,
    pub response: Vec<f64>,
    pub covariate_names: Vec<String>,
    /// `n x q`, row per individual.
    pub covariates: Array2<f64>,
}

impl PhenotypeTable {
    pub fn new(
        ids: Vec<String>,
        response_name: impl Into<String>,
        response: Vec<f64>,
        covariate_names: Vec<String>,
        covariates: Array2<f64>,
    ) -> Result<Self> {
        let n = ids.len();
        if response.len() != n || covariates.nrows() != n || covariates.ncols() != covariate_names.len() {
            return Err(PrsError::dimension("phenotype table columns have inconsistent lengths"));
        }
        if response.iter().chain(covariates.iter()).any(|v| !v.is_finite()) {
            return Err(PrsError::invalid("phenotype table contains non-finite values"));
        }
        Ok(PhenotypeTable {
            ids,
            response_name: response_name.into(),
            response,
            covariate_names,
            covariates,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn is_binary(&self) -> bool {
        self.response.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn subset(&self, rows: &[usize]) -> PhenotypeTable {
        PhenotypeTable {
            ids: rows.iter().map(|&i| self.ids[i].clone()).collect(),
            response_name: self.response_name.clone(),
            response: rows.iter().map(|&i| self.response[i]).collect(),
            covariate_names: self.covariate_names.clone(),
            covariates: self.covariates.select(Axis(0), rows),
        }
    }

    /// Reorders rows to follow `ids`; every id must be present.
    pub fn align_to(&self, ids: &[String]) -> Result<PhenotypeTable> {
        let pos: HashMap<&str, usize> = self.ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let rows = ids
            .iter()
            .map(|id| {
                pos.get(id.as_str())
                    .copied()
                    .ok_or_else(|| PrsError::invalid(format!("individual {id} missing from phenotype table")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(self.subset(&rows))
    }
}

pub fn read_phenotype_csv(path: impl AsRef<Path>) -> Result<PhenotypeTable> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let id_col = headers
        .iter()
        .position(|h| h == "id")
        .ok_or_else(|| PrsError::format("phenotype CSV has no `id` column"))?;
    let value_cols: Vec<usize> = (0..headers.len()).filter(|&c| c != id_col).collect();
    let (&response_col, covariate_cols) = value_cols
        .split_first()
        .ok_or_else(|| PrsError::format("phenotype CSV has no response column"))?;

    let mut ids = Vec::new();
    let mut response = Vec::new();
    let mut covariates = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let parse = |c: usize| -> Result<f64> {
            let raw = record.get(c).unwrap_or("").trim();
            raw.parse::<f64>().map_err(|_| {
                PrsError::format(format!("row {}: column `{}` value {raw:?} is not a number", line + 2, &headers[c]))
            })
        };
        ids.push(record.get(id_col).unwrap_or("").to_string());
        response.push(parse(response_col)?);
        for &c in covariate_cols {
            covariates.push(parse(c)?);
        }
    }
    let n = ids.len();
    let q = covariate_cols.len();
    let covariates = Array2::from_shape_vec((n, q), covariates).map_err(|e| PrsError::format(e.to_string()))?;
    PhenotypeTable::new(
        ids,
        &headers[response_col],
        response,
        covariate_cols.iter().map(|&c| headers[c].to_string()).collect(),
        covariates,
    )
}

pub fn write_phenotype_csv(table: &PhenotypeTable, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["id".to_string(), table.response_name.clone()];
    header.extend(table.covariate_names.iter().cloned());
    w.write_record(&header)?;
    for i in 0..table.len() {
        let mut row = vec![table.ids[i].clone(), table.response[i].to_string()];
        row.extend(table.covariates.row(i).iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
