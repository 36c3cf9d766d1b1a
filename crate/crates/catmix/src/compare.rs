//! Cross-tabulation and agreement between two hard partitions.
//!
//! Labelings from different methods (k-modes clusters vs latent class
//! modal assignments, say) have arbitrary names, so agreement is read off
//! the cross-tabulation: how concentrated each column is, and how much of
//! the sample a best mapping of columns onto rows explains.

use serde::Serialize;

use crate::error::Error;
use crate::Result;

/// Contingency table of two labelings of the same observations.
#[derive(Debug, Clone, Serialize)]
pub struct CrossTab {
    /// counts[r][c] = #{i : a_i = r, b_i = c}.
    pub counts: Vec<Vec<usize>>,
    /// Display names for the rows (labels of `a`), 1-based.
    pub row_labels: Vec<String>,
    /// Display names for the columns (labels of `b`), 1-based.
    pub col_labels: Vec<String>,
    /// Column-wise percentages; each column sums to 100.
    pub col_pct: Vec<Vec<f64>>,
    pub row_totals: Vec<usize>,
    pub col_totals: Vec<usize>,
    pub n: usize,
}

impl CrossTab {
    /// The same table with rows and columns exchanged.
    pub fn transposed(&self) -> CrossTab {
        let rows = self.counts.len();
        let cols = self.col_totals.len();
        let counts: Vec<Vec<usize>> = (0..cols)
            .map(|c| (0..rows).map(|r| self.counts[r][c]).collect())
            .collect();
        build(counts, self.col_labels.clone(), self.row_labels.clone(), self.n)
    }
}

/// Cross-tabulate two equal-length labelings (0-based labels).
pub fn crosstab(labels_a: &[usize], labels_b: &[usize]) -> Result<CrossTab> {
    if labels_a.len() != labels_b.len() {
        return Err(Error::LengthMismatch {
            left: labels_a.len(),
            right: labels_b.len(),
        });
    }
    if labels_a.is_empty() {
        return Err(Error::NoRows);
    }
    let rows = labels_a.iter().max().unwrap() + 1;
    let cols = labels_b.iter().max().unwrap() + 1;
    let mut counts = vec![vec![0usize; cols]; rows];
    for (&a, &b) in labels_a.iter().zip(labels_b) {
        counts[a][b] += 1;
    }
    let row_labels = (1..=rows).map(|r| r.to_string()).collect();
    let col_labels = (1..=cols).map(|c| c.to_string()).collect();
    Ok(build(counts, row_labels, col_labels, labels_a.len()))
}

fn build(
    counts: Vec<Vec<usize>>,
    row_labels: Vec<String>,
    col_labels: Vec<String>,
    n: usize,
) -> CrossTab {
    let rows = counts.len();
    let cols = counts.first().map(Vec::len).unwrap_or(0);
    let row_totals: Vec<usize> = counts.iter().map(|r| r.iter().sum()).collect();
    let col_totals: Vec<usize> = (0..cols)
        .map(|c| (0..rows).map(|r| counts[r][c]).sum())
        .collect();
    let col_pct = counts
        .iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .map(|(c, &v)| {
                    if col_totals[c] > 0 {
                        100.0 * v as f64 / col_totals[c] as f64
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    CrossTab {
        counts,
        row_labels,
        col_labels,
        col_pct,
        row_totals,
        col_totals,
        n,
    }
}

/// Agreement summary of a cross-tabulation.
#[derive(Debug, Clone, Serialize)]
pub struct Agreement {
    /// Largest column percentage per column: how concentrated each
    /// class of `b` is in a single class of `a`.
    pub column_max_pct: Vec<f64>,
    /// Share of observations explained by mapping each column to its
    /// best row (many columns may map to one row).
    pub overall: f64,
    /// The row each column maps to.
    pub mapping: Vec<usize>,
}

/// Score a cross-tabulation: per-column maxima and the overall share of
/// observations covered when each column is greedily mapped to the row
/// holding most of it.
pub fn agreement(tab: &CrossTab) -> Result<Agreement> {
    if tab.n == 0 {
        return Err(Error::NoRows);
    }
    let rows = tab.counts.len();
    let cols = tab.col_totals.len();
    let mut column_max_pct = Vec::with_capacity(cols);
    let mut mapping = Vec::with_capacity(cols);
    let mut matched = 0usize;
    for c in 0..cols {
        let best = (0..rows).max_by_key(|&r| (tab.counts[r][c], std::cmp::Reverse(r)));
        let r = best.unwrap_or(0);
        mapping.push(r);
        matched += tab.counts[r][c];
        column_max_pct.push(tab.col_pct[r][c]);
    }
    Ok(Agreement {
        column_max_pct,
        overall: matched as f64 / tab.n as f64,
        mapping,
    })
}
