//! Packed genotype storage, per-column summaries and MAF filtering.
//!
//! Genotypes are held column-major as 2-bit codes: `0` homozygous major,
//! `1` heterozygous, `2` homozygous minor and `3` missing. Missing entries are
//! imputed with the observed column mean whenever a column is decoded.

mod gts;
mod phenotype;

use std::collections::HashMap;

use ndarray::{Array2, ShapeBuilder};
use rayon::prelude::*;

use crate::error::{PrsError, Result};

pub use gts::{read_gts, read_gts_from, write_gts, write_gts_to, GTS_MAGIC};
pub use phenotype::{read_phenotype_csv, write_phenotype_csv, PhenotypeTable};

pub const MISSING_CODE: u8 = 3;

/// Per-column statistics over the observed (non-missing) genotypes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColumnSummary {
    /// Mean of observed codes, in genotype units. Zero for an all-missing column.
    pub mean: f64,
    pub maf: f64,
    /// Centered sum of squares of the imputed column.
    pub s_xx: f64,
    pub n_missing: usize,
}

impl ColumnSummary {
    pub fn from_codes<I>(codes: I) -> Self
    where
        I: IntoIterator<Item = u8>,
        I::IntoIter: Clone,
    {
        let codes = codes.into_iter();
        let mut sum = 0.0;
        let mut observed = 0usize;
        let mut n_missing = 0usize;
        for c in codes.clone() {
            if c == MISSING_CODE {
                n_missing += 1;
            } else {
                sum += c as f64;
                observed += 1;
            }
        }
        if observed == 0 {
            return ColumnSummary {
                mean: 0.0,
                maf: 0.0,
                s_xx: 0.0,
                n_missing,
            };
        }
        let mean = sum / observed as f64;
        // imputed entries sit exactly at the mean and add nothing
        let s_xx = codes
            .filter(|&c| c != MISSING_CODE)
            .map(|c| {
                let d = c as f64 - mean;
                d * d
            })
            .sum();
        let freq = mean / 2.0;
        ColumnSummary {
            mean,
            maf: freq.min(1.0 - freq),
            s_xx,
            n_missing,
        }
    }

    pub fn is_all_missing(&self, n: usize) -> bool {
        self.n_missing == n
    }
}

/// Number of bytes one packed column of `n` codes occupies.
pub fn packed_len(n: usize) -> usize {
    n.div_ceil(4)
}

/// Packs codes four per byte, least-significant bits first, zero padded.
pub fn pack_codes(codes: &[u8]) -> Vec<u8> {
    let mut out = vec![0u8; packed_len(codes.len())];
    for (i, &c) in codes.iter().enumerate() {
        out[i / 4] |= (c & 0b11) << (2 * (i % 4));
    }
    out
}

pub fn unpack_codes(bytes: &[u8], n: usize) -> Vec<u8> {
    (0..n).map(|i| (bytes[i / 4] >> (2 * (i % 4))) & 0b11).collect()
}

/// Column-major packed genotype matrix with eager column summaries.
#[derive(Debug, Clone, PartialEq)]
pub struct GenotypeMatrix {
    n_individuals: usize,
    variant_ids: Vec<String>,
    packed: Vec<u8>,
    summaries: Vec<ColumnSummary>,
    index: HashMap<String, usize>,
}

impl GenotypeMatrix {
    /// Builds a matrix from column-major codes (`codes[j * n + i]`).
    pub fn from_codes(n_individuals: usize, variant_ids: Vec<String>, codes: &[u8]) -> Result<Self> {
        let p = variant_ids.len();
        if codes.len() != n_individuals * p {
            return Err(PrsError::dimension(format!(
                "expected {} codes for {} x {}, got {}",
                n_individuals * p,
                n_individuals,
                p,
                codes.len()
            )));
        }
        if let Some(bad) = codes.iter().find(|&&c| c > MISSING_CODE) {
            return Err(PrsError::invalid(format!("genotype code {bad} outside 0..=3")));
        }
        let stride = packed_len(n_individuals);
        let mut packed = Vec::with_capacity(stride * p);
        if n_individuals > 0 {
            for col in codes.chunks(n_individuals) {
                packed.extend(pack_codes(col));
            }
        }
        Self::from_packed(n_individuals, variant_ids, packed)
    }

    pub(crate) fn from_packed(n_individuals: usize, variant_ids: Vec<String>, packed: Vec<u8>) -> Result<Self> {
        let p = variant_ids.len();
        if n_individuals == 0 || p == 0 {
            return Err(PrsError::dimension(format!(
                "genotype matrix must be non-empty, got {n_individuals} x {p}"
            )));
        }
        let stride = packed_len(n_individuals);
        if packed.len() != stride * p {
            return Err(PrsError::dimension("packed payload does not match dimensions"));
        }
        let mut index = HashMap::with_capacity(p);
        for (j, id) in variant_ids.iter().enumerate() {
            if index.insert(id.clone(), j).is_some() {
                return Err(PrsError::invalid(format!("duplicate variant id {id}")));
            }
        }
        let summaries = packed
            .par_chunks(stride)
            .map(|bytes| ColumnSummary::from_codes(PackedIter::new(bytes, n_individuals)))
            .collect();
        Ok(GenotypeMatrix {
            n_individuals,
            variant_ids,
            packed,
            summaries,
            index,
        })
    }

    pub fn n_individuals(&self) -> usize {
        self.n_individuals
    }

    pub fn n_variants(&self) -> usize {
        self.variant_ids.len()
    }

    pub fn variant_ids(&self) -> &[String] {
        &self.variant_ids
    }

    pub fn variant_index(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn summaries(&self) -> &[ColumnSummary] {
        &self.summaries
    }

    pub(crate) fn packed_column(&self, j: usize) -> &[u8] {
        let stride = packed_len(self.n_individuals);
        &self.packed[j * stride..(j + 1) * stride]
    }

    fn check_index(&self, j: usize) -> Result<()> {
        if j >= self.n_variants() {
            return Err(PrsError::IndexOutOfRange {
                index: j,
                len: self.n_variants(),
            });
        }
        Ok(())
    }

    pub fn column_codes(&self, j: usize) -> Result<Vec<u8>> {
        self.check_index(j)?;
        Ok(unpack_codes(self.packed_column(j), self.n_individuals))
    }

    /// Decoded column with missing codes replaced by the observed mean.
    pub fn column_dense(&self, j: usize) -> Result<Vec<f64>> {
        self.check_index(j)?;
        let fill = self.summaries[j].mean;
        Ok(PackedIter::new(self.packed_column(j), self.n_individuals)
            .map(|c| decode(c, fill))
            .collect())
    }

    /// Imputed values of column `j` restricted to `rows`, in the given order.
    pub fn column_rows(&self, j: usize, rows: &[usize]) -> Result<Vec<f64>> {
        self.check_index(j)?;
        let bytes = self.packed_column(j);
        let fill = self.summaries[j].mean;
        rows.iter()
            .map(|&i| {
                if i >= self.n_individuals {
                    return Err(PrsError::dimension(format!("row {i} out of range")));
                }
                Ok(decode((bytes[i / 4] >> (2 * (i % 4))) & 0b11, fill))
            })
            .collect()
    }

    /// Dense imputed submatrix (`rows.len()` x `columns.len()`, column-major).
    pub fn dense(&self, rows: &[usize], columns: &[usize]) -> Result<Array2<f64>> {
        let mut out = Array2::<f64>::zeros((rows.len(), columns.len()).f());
        let cols: Vec<Vec<f64>> = columns
            .par_iter()
            .map(|&j| self.column_rows(j, rows))
            .collect::<Result<_>>()?;
        for (mut dst, src) in out.columns_mut().into_iter().zip(cols) {
            dst.assign(&ndarray::ArrayView1::from(&src[..]));
        }
        Ok(out)
    }

    /// Summaries recomputed over a subset of individuals.
    pub fn summaries_for_rows(&self, rows: &[usize]) -> Vec<ColumnSummary> {
        (0..self.n_variants())
            .into_par_iter()
            .map(|j| {
                let bytes = self.packed_column(j);
                ColumnSummary::from_codes(rows.iter().map(|&i| (bytes[i / 4] >> (2 * (i % 4))) & 0b11))
            })
            .collect()
    }

    pub fn maf_filter(&self, threshold: f64) -> Vec<usize> {
        maf_filter(&self.summaries, self.n_individuals, threshold)
    }
}

#[inline]
fn decode(code: u8, fill: f64) -> f64 {
    if code == MISSING_CODE {
        fill
    } else {
        code as f64
    }
}

#[derive(Clone)]
struct PackedIter<'a> {
    bytes: &'a [u8],
    pos: usize,
    n: usize,
}

impl<'a> PackedIter<'a> {
    fn new(bytes: &'a [u8], n: usize) -> Self {
        PackedIter { bytes, pos: 0, n }
    }
}

impl Iterator for PackedIter<'_> {
    type Item = u8;

    fn next(&mut self) -> Option<u8> {
        if self.pos >= self.n {
            return None;
        }
        let i = self.pos;
        self.pos += 1;
        Some((self.bytes[i / 4] >> (2 * (i % 4))) & 0b11)
    }
}

/// Indices of columns with `maf >= threshold`. All-missing columns never pass.
pub fn maf_filter(summaries: &[ColumnSummary], n: usize, threshold: f64) -> Vec<usize> {
    summaries
        .iter()
        .enumerate()
        .filter(|(_, s)| !s.is_all_missing(n) && s.maf >= threshold)
        .map(|(j, _)| j)
        .collect()
}

/// Stabilized centered sums of squares, `S*_xx = S_xx + shift`.
#[derive(Debug, Clone, PartialEq)]
pub struct StabilizedSxx {
    pub shift: f64,
    pub values: Vec<f64>,
}

/// Nearest-rank fifth percentile: the `ceil(0.05 m)`-th smallest value.
pub fn fifth_percentile(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(PrsError::invalid("percentile of an empty set"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = (5 * sorted.len()).div_ceil(100).max(1);
    Ok(sorted[rank - 1])
}

/// Adds the fifth percentile of `sxx` to every value.
///
/// When the percentile lands on a zero (many constant columns) the smallest
/// positive value is used instead so the result stays strictly positive.
pub fn stabilize_sxx(sxx: &[f64]) -> Result<StabilizedSxx> {
    let mut shift = fifth_percentile(sxx)?;
    if shift <= 0.0 {
        shift = sxx
            .iter()
            .copied()
            .filter(|&v| v > 0.0)
            .min_by(f64::total_cmp)
            .unwrap_or(0.0);
    }
    Ok(StabilizedSxx {
        shift,
        values: sxx.iter().map(|v| v + shift).collect(),
    })
}

pub fn stabilized_sxx(summaries: &[ColumnSummary]) -> Result<StabilizedSxx> {
    let sxx: Vec<f64> = summaries.iter().map(|s| s.s_xx).collect();
    stabilize_sxx(&sxx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn matrix(n: usize, cols: &[&[u8]]) -> GenotypeMatrix {
        let ids = (0..cols.len()).map(|j| format!("v{j}")).collect();
        let codes: Vec<u8> = cols.iter().flat_map(|c| c.iter().copied()).collect();
        GenotypeMatrix::from_codes(n, ids, &codes).unwrap()
    }

    #[test]
    fn packs_lsb_first() {
        assert_eq!(pack_codes(&[2]), vec![0b0000_0010]);
        assert_eq!(pack_codes(&[0, 1, 2, 3, 0]), vec![0b1110_0100, 0b0000_0000]);
    }

    #[test]
    fn imputes_missing_with_observed_mean() {
        let m = matrix(3, &[&[0, 2, 3], &[1, 1, 1]]);
        assert_eq!(m.column_dense(0).unwrap(), vec![0.0, 2.0, 1.0]);
        assert_eq!(m.column_dense(1).unwrap(), vec![1.0, 1.0, 1.0]);
        assert_eq!(m.summaries()[1].s_xx, 0.0);
    }

    #[test]
    fn all_missing_column_is_zero_and_filtered() {
        let m = matrix(2, &[&[3, 3], &[0, 1]]);
        assert_eq!(m.column_dense(0).unwrap(), vec![0.0, 0.0]);
        assert_eq!(m.summaries()[0].maf, 0.0);
        assert_eq!(m.maf_filter(0.0), vec![1]);
    }

    #[test]
    fn column_index_out_of_range() {
        let m = matrix(2, &[&[0, 1]]);
        assert!(matches!(m.column_dense(1), Err(PrsError::IndexOutOfRange { .. })));
    }

    #[test]
    fn maf_threshold_from_rare_heterozygote() {
        let mut col = vec![0u8; 2000];
        col[17] = 1;
        let m = matrix(2000, &[&col]);
        assert!((m.summaries()[0].maf - 0.00025).abs() < 1e-15);
        assert!(m.maf_filter(0.0005).is_empty());
        assert_eq!(m.maf_filter(0.0), vec![0]);
    }

    #[test]
    fn maf_boundary_is_inclusive() {
        let m = matrix(4, &[&[1, 1, 1, 1]]);
        assert_eq!(m.summaries()[0].maf, 0.5);
        assert_eq!(m.maf_filter(0.5), vec![0]);
    }

    #[test]
    fn maf_folds_major_allele() {
        let m = matrix(4, &[&[2, 2, 2, 1]]);
        assert!((m.summaries()[0].maf - 0.125).abs() < 1e-15);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let err = GenotypeMatrix::from_codes(1, vec!["a".into(), "a".into()], &[0, 1]);
        assert!(err.is_err());
    }

    #[test]
    fn constant_sxx_doubles() {
        let s = stabilize_sxx(&[3.5; 40]).unwrap();
        assert_eq!(s.shift, 3.5);
        assert!(s.values.iter().all(|&v| v == 7.0));
    }

    #[test]
    fn percentile_matches_sort_oracle() {
        // values 0..=100 in scrambled order; nearest rank ceil(5.05) = 6 -> 5.0
        let mut values: Vec<f64> = (0..=100).map(|v| v as f64).collect();
        values.reverse();
        values.swap(3, 70);
        let mut sorted = values.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let rank = ((0.05 * sorted.len() as f64).ceil() as usize).max(1);
        assert_eq!(fifth_percentile(&values).unwrap(), sorted[rank - 1]);
        assert_eq!(fifth_percentile(&values).unwrap(), 5.0);
        // exact multiples of 20 must not round up
        let hundred: Vec<f64> = (1..=100).map(|v| v as f64).collect();
        assert_eq!(fifth_percentile(&hundred).unwrap(), 5.0);
    }

    #[test]
    fn zero_sxx_column_gets_positive_denominator() {
        let mut sxx: Vec<f64> = (1..=40).map(|v| v as f64).collect();
        sxx.push(0.0);
        let s = stabilize_sxx(&sxx).unwrap();
        assert!(s.values.iter().all(|&v| v > 0.0));
        assert_eq!(*s.values.last().unwrap(), s.shift);
    }

    #[test]
    fn percentile_falls_back_when_mostly_constant() {
        let mut sxx = vec![0.0; 10];
        sxx.extend([4.0, 9.0]);
        let s = stabilize_sxx(&sxx).unwrap();
        assert_eq!(s.shift, 4.0);
    }

    #[test]
    fn empty_sxx_is_an_error() {
        assert!(stabilize_sxx(&[]).is_err());
    }

    #[test]
    fn row_subset_summaries() {
        let m = matrix(4, &[&[0, 2, 2, 3]]);
        let s = m.summaries_for_rows(&[0, 1]);
        assert_eq!(s[0].mean, 1.0);
        assert_eq!(s[0].s_xx, 2.0);
        let d = m.dense(&[3, 0], &[0]).unwrap();
        assert_eq!(d[[0, 0]], 4.0 / 3.0);
        assert_eq!(d[[1, 0]], 0.0);
    }

    proptest! {
        #[test]
        fn pack_unpack_bijection(codes in prop::collection::vec(0u8..4, 0..64)) {
            prop_assert_eq!(unpack_codes(&pack_codes(&codes), codes.len()), codes);
        }

        #[test]
        fn imputation_preserves_observed_mean(codes in prop::collection::vec(0u8..4, 1..80)) {
            let m = GenotypeMatrix::from_codes(codes.len(), vec!["x".into()], &codes).unwrap();
            let col = m.column_dense(0).unwrap();
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            prop_assert!((mean - m.summaries()[0].mean).abs() <= 1e-12);
            prop_assert!(col.iter().all(|&v| (0.0..=2.0).contains(&v)));
        }

        #[test]
        fn maf_filter_is_monotone(
            codes in prop::collection::vec(0u8..4, 60),
            t1 in 0.0f64..0.5,
            t2 in 0.0f64..0.5,
        ) {
            let ids = (0..6).map(|j| format!("v{j}")).collect();
            let m = GenotypeMatrix::from_codes(10, ids, &codes).unwrap();
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let wide = m.maf_filter(lo);
            for j in m.maf_filter(hi) {
                prop_assert!(wide.contains(&j));
            }
        }

        #[test]
        fn stabilized_positive_with_a_varying_column(
            mut sxx in prop::collection::vec(0.0f64..10.0, 1..50),
            zeros in 0usize..50,
        ) {
            sxx.extend(std::iter::repeat_n(0.0, zeros));
            prop_assume!(sxx.iter().any(|&v| v > 0.0));
            let s = stabilize_sxx(&sxx).unwrap();
            prop_assert!(s.values.iter().all(|&v| v > 0.0));
        }
    }
}
