//! Binary-indicator datasets: ingestion, validation, summaries, and
//! response-pattern collapsing.
//!
//! A [`CategoricalDataset`] holds an N×J matrix of {0,1} indicators plus
//! optional auxiliary columns: binary covariates and real-valued outcomes.
//! Values are immutable after construction, so a dataset can be shared
//! freely across threads.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde::Serialize;

use crate::error::Error;
use crate::Result;

/// Validated N×J binary indicator matrix with named auxiliary columns.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalDataset {
    indicator_names: Vec<String>,
    /// Row-major N×J, each cell 0 or 1.
    indicators: Vec<Vec<u8>>,
    covariates: Vec<(String, Vec<u8>)>,
    outcomes: Vec<(String, Vec<f64>)>,
}

impl CategoricalDataset {
    /// Build a dataset from already-parsed columns, enforcing the type
    /// invariants: every indicator/covariate cell in {0,1}, J ≥ 1, N ≥ 1,
    /// all column names unique, all columns of equal length.
    pub fn new(
        indicator_names: Vec<String>,
        indicators: Vec<Vec<u8>>,
        covariates: Vec<(String, Vec<u8>)>,
        outcomes: Vec<(String, Vec<f64>)>,
    ) -> Result<Self> {
        if indicator_names.is_empty() {
            return Err(Error::NoIndicators);
        }
        if indicators.is_empty() {
            return Err(Error::NoRows);
        }
        let n = indicators.len();
        let j = indicator_names.len();

        let mut seen = std::collections::HashSet::new();
        for name in indicator_names
            .iter()
            .chain(covariates.iter().map(|(n, _)| n))
            .chain(outcomes.iter().map(|(n, _)| n))
        {
            if !seen.insert(name.as_str()) {
                return Err(Error::DuplicateColumn {
                    column: name.clone(),
                });
            }
        }

        for (i, row) in indicators.iter().enumerate() {
            if row.len() != j {
                return Err(Error::DimensionMismatch {
                    context: format!("indicator row {} has {} cells, expected {}", i + 1, row.len(), j),
                });
            }
            for (jj, &v) in row.iter().enumerate() {
                if v > 1 {
                    return Err(Error::NonBinaryValue {
                        column: indicator_names[jj].clone(),
                        row: i + 1,
                        value: v.to_string(),
                    });
                }
            }
        }
        for (name, col) in &covariates {
            if col.len() != n {
                return Err(Error::DimensionMismatch {
                    context: format!("covariate `{name}` has {} cells, expected {n}", col.len()),
                });
            }
            if let Some(i) = col.iter().position(|&v| v > 1) {
                return Err(Error::NonBinaryValue {
                    column: name.clone(),
                    row: i + 1,
                    value: col[i].to_string(),
                });
            }
        }
        for (name, col) in &outcomes {
            if col.len() != n {
                return Err(Error::DimensionMismatch {
                    context: format!("outcome `{name}` has {} cells, expected {n}", col.len()),
                });
            }
        }

        Ok(Self {
            indicator_names,
            indicators,
            covariates,
            outcomes,
        })
    }

    /// Observation count N.
    pub fn n(&self) -> usize {
        self.indicators.len()
    }

    /// Indicator count J.
    pub fn n_items(&self) -> usize {
        self.indicator_names.len()
    }

    pub fn indicator_names(&self) -> &[String] {
        &self.indicator_names
    }

    /// All indicator rows, row-major.
    pub fn rows(&self) -> &[Vec<u8>] {
        &self.indicators
    }

    pub fn row(&self, i: usize) -> &[u8] {
        &self.indicators[i]
    }

    pub fn covariate_names(&self) -> Vec<&str> {
        self.covariates.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn outcome_names(&self) -> Vec<&str> {
        self.outcomes.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn covariate(&self, name: &str) -> Result<&[u8]> {
        self.covariates
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, c)| c.as_slice())
            .ok_or_else(|| Error::UnknownColumn {
                column: name.to_string(),
            })
    }

    pub fn outcome(&self, name: &str) -> Result<&[f64]> {
        self.outcomes
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, c)| c.as_slice())
            .ok_or_else(|| Error::UnknownColumn {
                column: name.to_string(),
            })
    }

    /// A new dataset containing the given rows (with repetition allowed),
    /// auxiliary columns included. Used by bootstrap resampling.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Self> {
        if idx.is_empty() {
            return Err(Error::NoRows);
        }
        let indicators = idx.iter().map(|&i| self.indicators[i].clone()).collect();
        let covariates = self
            .covariates
            .iter()
            .map(|(n, c)| (n.clone(), idx.iter().map(|&i| c[i]).collect()))
            .collect();
        let outcomes = self
            .outcomes
            .iter()
            .map(|(n, c)| (n.clone(), idx.iter().map(|&i| c[i]).collect()))
            .collect();
        Self::new(self.indicator_names.clone(), indicators, covariates, outcomes)
    }
}

/// How columns of a CSV file map to roles.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Schema {
    /// Roles read off header prefixes: `i:` indicator, `c:` covariate,
    /// `y:` outcome. Unprefixed columns are ignored.
    HeaderPrefixes,
    /// Roles listed explicitly by (unprefixed) column name. Columns not
    /// named in any list are ignored.
    Explicit {
        indicators: Vec<String>,
        covariates: Vec<String>,
        outcomes: Vec<String>,
    },
}

/// One rejected row: its 1-based data row number and the first offending
/// column.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DroppedRow {
    pub row: usize,
    pub column: String,
}

/// Result of [`load_csv`]: the validated dataset plus the rows rejected
/// by the listwise missing-data policy.
#[derive(Debug, Clone)]
pub struct LoadReport {
    pub dataset: CategoricalDataset,
    pub dropped: Vec<DroppedRow>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Role {
    Indicator,
    Covariate,
    Outcome,
}

/// Load a UTF-8, comma-separated file with a header row.
///
/// Cells in indicator and covariate columns must be `0` or `1`; outcome
/// cells must parse as real numbers. Rows with a missing (empty) cell in
/// any schema-named column are rejected listwise and reported in
/// [`LoadReport::dropped`]. A malformed (non-binary / non-numeric) cell is
/// a hard error naming the column and the 1-based data row.
pub fn load_csv(path: &Path, schema: &Schema) -> Result<LoadReport> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_path(path)?;

    let headers: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if headers.is_empty() {
        return Err(Error::EmptyFile {
            path: path.display().to_string(),
        });
    }

    // (column index in file, exposed name, role)
    let mut columns: Vec<(usize, String, Role)> = Vec::new();
    match schema {
        Schema::HeaderPrefixes => {
            for (idx, h) in headers.iter().enumerate() {
                if let Some(name) = h.strip_prefix("i:") {
                    columns.push((idx, name.trim().to_string(), Role::Indicator));
                } else if let Some(name) = h.strip_prefix("c:") {
                    columns.push((idx, name.trim().to_string(), Role::Covariate));
                } else if let Some(name) = h.strip_prefix("y:") {
                    columns.push((idx, name.trim().to_string(), Role::Outcome));
                }
            }
        }
        Schema::Explicit {
            indicators,
            covariates,
            outcomes,
        } => {
            let find = |name: &str| -> Result<usize> {
                headers
                    .iter()
                    .position(|h| h == name)
                    .ok_or_else(|| Error::UnknownColumn {
                        column: name.to_string(),
                    })
            };
            for name in indicators {
                columns.push((find(name)?, name.clone(), Role::Indicator));
            }
            for name in covariates {
                columns.push((find(name)?, name.clone(), Role::Covariate));
            }
            for name in outcomes {
                columns.push((find(name)?, name.clone(), Role::Outcome));
            }
        }
    }
    if !columns.iter().any(|(_, _, r)| *r == Role::Indicator) {
        return Err(Error::NoIndicators);
    }

    let mut indicator_cols: Vec<(usize, String)> = Vec::new();
    let mut covariate_cols: Vec<(usize, String)> = Vec::new();
    let mut outcome_cols: Vec<(usize, String)> = Vec::new();
    for (idx, name, role) in columns {
        match role {
            Role::Indicator => indicator_cols.push((idx, name)),
            Role::Covariate => covariate_cols.push((idx, name)),
            Role::Outcome => outcome_cols.push((idx, name)),
        }
    }

    let mut indicators: Vec<Vec<u8>> = Vec::new();
    let mut covariates: Vec<Vec<u8>> = covariate_cols.iter().map(|_| Vec::new()).collect();
    let mut outcomes: Vec<Vec<f64>> = outcome_cols.iter().map(|_| Vec::new()).collect();
    let mut dropped = Vec::new();

    for (rec_idx, record) in reader.records().enumerate() {
        let record = record?;
        let row_no = rec_idx + 1; // 1-based data row

        // Listwise missing-data check first, so a row that is both missing
        // one cell and malformed in another is reported as dropped only if
        // the missing cell comes first.
        let mut missing: Option<&str> = None;
        for (idx, name) in indicator_cols
            .iter()
            .chain(covariate_cols.iter())
            .chain(outcome_cols.iter())
        {
            let cell = record.get(*idx).unwrap_or("").trim();
            if cell.is_empty() {
                missing = Some(name);
                break;
            }
        }
        if let Some(column) = missing {
            dropped.push(DroppedRow {
                row: row_no,
                column: column.to_string(),
            });
            continue;
        }

        let parse_binary = |idx: usize, name: &str| -> Result<u8> {
            let cell = record.get(idx).unwrap_or("").trim();
            match cell {
                "0" => Ok(0),
                "1" => Ok(1),
                other => Err(Error::NonBinaryValue {
                    column: name.to_string(),
                    row: row_no,
                    value: other.to_string(),
                }),
            }
        };

        let mut row = Vec::with_capacity(indicator_cols.len());
        for (idx, name) in &indicator_cols {
            row.push(parse_binary(*idx, name)?);
        }
        indicators.push(row);

        for ((idx, name), col) in covariate_cols.iter().zip(covariates.iter_mut()) {
            col.push(parse_binary(*idx, name)?);
        }
        for ((idx, name), col) in outcome_cols.iter().zip(outcomes.iter_mut()) {
            let cell = record.get(*idx).unwrap_or("").trim();
            let v: f64 = cell.parse().map_err(|_| Error::InvalidNumber {
                column: name.clone(),
                row: row_no,
                value: cell.to_string(),
            })?;
            col.push(v);
        }
    }

    if indicators.is_empty() {
        return if dropped.is_empty() {
            Err(Error::EmptyFile {
                path: path.display().to_string(),
            })
        } else {
            Err(Error::NoRows)
        };
    }

    let dataset = CategoricalDataset::new(
        indicator_cols.into_iter().map(|(_, n)| n).collect(),
        indicators,
        covariate_cols
            .into_iter()
            .map(|(_, n)| n)
            .zip(covariates)
            .collect(),
        outcome_cols
            .into_iter()
            .map(|(_, n)| n)
            .zip(outcomes)
            .collect(),
    )?;
    Ok(LoadReport { dataset, dropped })
}

/// Per-indicator endorsement proportions and the distribution of per-row
/// selection counts.
#[derive(Debug, Clone, Serialize)]
pub struct DatasetSummary {
    /// (indicator name, column mean) in column order.
    pub endorsement: Vec<(String, f64)>,
    /// Histogram of per-row selection counts; bin `c` counts rows with
    /// exactly `c` ones, for c = 0..=J.
    pub count_histogram: Vec<usize>,
    /// Mean of per-row selection counts.
    pub count_mean: f64,
    /// Sample standard deviation (n−1 denominator) of per-row counts.
    pub count_sd: f64,
}

/// Summarize endorsement proportions and selection counts.
pub fn describe(ds: &CategoricalDataset) -> DatasetSummary {
    let n = ds.n() as f64;
    let j = ds.n_items();

    let mut col_sums = vec![0usize; j];
    let mut histogram = vec![0usize; j + 1];
    let mut counts = Vec::with_capacity(ds.n());
    for row in ds.rows() {
        let mut c = 0usize;
        for (jj, &v) in row.iter().enumerate() {
            col_sums[jj] += v as usize;
            c += v as usize;
        }
        histogram[c] += 1;
        counts.push(c as f64);
    }

    let endorsement = ds
        .indicator_names()
        .iter()
        .zip(&col_sums)
        .map(|(name, &s)| (name.clone(), s as f64 / n))
        .collect();

    let count_mean = counts.iter().sum::<f64>() / n;
    let count_sd = if ds.n() > 1 {
        let ss: f64 = counts.iter().map(|c| (c - count_mean).powi(2)).sum();
        (ss / (n - 1.0)).sqrt()
    } else {
        0.0
    };

    DatasetSummary {
        endorsement,
        count_histogram: histogram,
        count_mean,
        count_sd,
    }
}

/// Distinct indicator response patterns with multiplicities.
///
/// Collapsing makes likelihood work O(P·K·J) instead of O(N·K·J); the
/// weighted expansion reproduces the original row multiset exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct PatternTable {
    /// P×J distinct rows, in order of first occurrence.
    pub patterns: Vec<Vec<u8>>,
    /// Multiplicity of each pattern; sums to N.
    pub weights: Vec<usize>,
    /// For each original row, the index of its pattern.
    pub row_to_pattern: Vec<usize>,
}

impl PatternTable {
    pub fn n_patterns(&self) -> usize {
        self.patterns.len()
    }

    pub fn n(&self) -> usize {
        self.row_to_pattern.len()
    }
}

/// Collapse a dataset's indicator rows to weighted unique patterns.
pub fn collapse_patterns(ds: &CategoricalDataset) -> PatternTable {
    let mut index: HashMap<&[u8], usize> = HashMap::new();
    let mut patterns: Vec<Vec<u8>> = Vec::new();
    let mut weights: Vec<usize> = Vec::new();
    let mut row_to_pattern = Vec::with_capacity(ds.n());

    for row in ds.rows() {
        let p = match index.get(row.as_slice()) {
            Some(&p) => {
                weights[p] += 1;
                p
            }
            None => {
                let p = patterns.len();
                index.insert(row.as_slice(), p);
                patterns.push(row.clone());
                weights.push(1);
                p
            }
        };
        row_to_pattern.push(p);
    }

    PatternTable {
        patterns,
        weights,
        row_to_pattern,
    }
}

impl fmt::Display for DatasetSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "indicator endorsement proportions:")?;
        for (name, p) in &self.endorsement {
            writeln!(f, "  {name:<40} {p:.4}")?;
        }
        writeln!(
            f,
            "selections per row: mean {:.2}, sd {:.2}",
            self.count_mean, self.count_sd
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_csv(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f.flush().unwrap();
        f
    }

    #[test]
    fn loads_three_row_file() {
        let f = write_csv("i:a,i:b\n1,0\n0,1\n1,1\n");
        let report = load_csv(f.path(), &Schema::HeaderPrefixes).unwrap();
        assert_eq!(report.dataset.n(), 3);
        assert_eq!(report.dataset.n_items(), 2);
        assert_eq!(report.dataset.indicator_names(), &["a", "b"]);
        assert!(report.dropped.is_empty());
    }

    #[test]
    fn rejects_non_binary_indicator() {
        let f = write_csv("i:a,i:b\n1,0\n2,1\n");
        let err = load_csv(f.path(), &Schema::HeaderPrefixes).unwrap_err();
        match err {
            Error::NonBinaryValue { column, row, value } => {
                assert_eq!(column, "a");
                assert_eq!(row, 2);
                assert_eq!(value, "2");
            }
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn drops_rows_with_missing_cells() {
        let f = write_csv("i:a,i:b,y:score\n1,0,2.5\n1,,3.0\n0,1,\n1,1,4.0\n");
        let report = load_csv(f.path(), &Schema::HeaderPrefixes).unwrap();
        assert_eq!(report.dataset.n(), 2);
        assert_eq!(
            report.dropped,
            vec![
                DroppedRow { row: 2, column: "b".into() },
                DroppedRow { row: 3, column: "score".into() },
            ]
        );
    }

    #[test]
    fn explicit_schema_ignores_extra_columns() {
        let f = write_csv("id,a,b,gender,score\nx1,1,0,1,2.0\nx2,0,1,0,3.5\n");
        let schema = Schema::Explicit {
            indicators: vec!["a".into(), "b".into()],
            covariates: vec!["gender".into()],
            outcomes: vec!["score".into()],
        };
        let report = load_csv(f.path(), &schema).unwrap();
        assert_eq!(report.dataset.n(), 2);
        assert_eq!(report.dataset.covariate("gender").unwrap(), &[1, 0]);
        assert_eq!(report.dataset.outcome("score").unwrap(), &[2.0, 3.5]);
    }

    #[test]
    fn explicit_schema_unknown_column_errors() {
        let f = write_csv("a,b\n1,0\n");
        let schema = Schema::Explicit {
            indicators: vec!["a".into(), "missing".into()],
            covariates: vec![],
            outcomes: vec![],
        };
        let err = load_csv(f.path(), &schema).unwrap_err();
        assert!(matches!(err, Error::UnknownColumn { column } if column == "missing"));
    }

    #[test]
    fn empty_file_errors() {
        let f = write_csv("i:a,i:b\n");
        let err = load_csv(f.path(), &Schema::HeaderPrefixes).unwrap_err();
        assert!(matches!(err, Error::EmptyFile { .. }));
    }

    #[test]
    fn describe_constant_column() {
        let ds = CategoricalDataset::new(
            vec!["a".into()],
            vec![vec![1], vec![1], vec![1]],
            vec![],
            vec![],
        )
        .unwrap();
        let s = describe(&ds);
        assert_eq!(s.endorsement[0].1, 1.0);
    }

    #[test]
    fn describe_hand_case() {
        let ds = CategoricalDataset::new(
            vec!["a".into(), "b".into()],
            vec![vec![1, 0], vec![0, 0]],
            vec![],
            vec![],
        )
        .unwrap();
        let s = describe(&ds);
        assert_eq!(s.endorsement[0].1, 0.5);
        assert_eq!(s.endorsement[1].1, 0.0);
        assert_eq!(s.count_mean, 0.5);
        assert_eq!(s.count_histogram, vec![1, 1, 0]);
    }

    // independent single-pass oracle for column means
    #[test]
    fn describe_matches_single_pass_oracle() {
        use rand::Rng;
        let mut rng = crate::rng::stream(99, 0);
        let n = 57;
        let j = 9;
        let rows: Vec<Vec<u8>> = (0..n)
            .map(|_| (0..j).map(|_| u8::from(rng.random::<f64>() < 0.4)).collect())
            .collect();
        let names = (0..j).map(|c| format!("v{c}")).collect();
        let ds = CategoricalDataset::new(names, rows.clone(), vec![], vec![]).unwrap();
        let s = describe(&ds);
        for c in 0..j {
            let mut acc = 0.0;
            for row in &rows {
                acc += f64::from(row[c]);
            }
            let oracle = acc / n as f64;
            assert!((s.endorsement[c].1 - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn collapse_identical_rows() {
        let ds = CategoricalDataset::new(
            vec!["a".into(), "b".into()],
            vec![vec![1, 0]; 4],
            vec![],
            vec![],
        )
        .unwrap();
        let pt = collapse_patterns(&ds);
        assert_eq!(pt.n_patterns(), 1);
        assert_eq!(pt.weights, vec![4]);
    }

    #[test]
    fn collapse_mixed_rows() {
        let ds = CategoricalDataset::new(
            vec!["a".into(), "b".into()],
            vec![vec![1, 0], vec![0, 1], vec![1, 0]],
            vec![],
            vec![],
        )
        .unwrap();
        let pt = collapse_patterns(&ds);
        assert_eq!(pt.n_patterns(), 2);
        assert_eq!(pt.weights, vec![2, 1]);
        assert_eq!(pt.row_to_pattern, vec![0, 1, 0]);
    }

    #[test]
    fn select_rows_resamples_all_columns() {
        let ds = CategoricalDataset::new(
            vec!["a".into()],
            vec![vec![1], vec![0], vec![1]],
            vec![("c".into(), vec![0, 1, 1])],
            vec![("y".into(), vec![1.0, 2.0, 3.0])],
        )
        .unwrap();
        let sub = ds.select_rows(&[2, 0, 2]).unwrap();
        assert_eq!(sub.rows(), &[vec![1], vec![1], vec![1]]);
        assert_eq!(sub.covariate("c").unwrap(), &[1, 0, 1]);
        assert_eq!(sub.outcome("y").unwrap(), &[3.0, 1.0, 3.0]);
    }
}
