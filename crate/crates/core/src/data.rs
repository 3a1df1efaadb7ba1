//! Clustered binary datasets.
//!
//! Rows keep their input order. Cluster labels are renumbered densely in
//! order of first appearance; the original labels are retained. Two-level
//! data carries a single synthetic level-3 cluster.

use std::collections::HashMap;
use std::io::Read;

use crate::error::DataError;

/// Label given to the synthetic level-3 cluster of two-level data.
pub const SYNTHETIC_LEVEL3: &str = "_all";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Level {
    Level2,
    Level3,
}

/// One unvalidated input record.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRow {
    pub outcome: f64,
    pub level3_id: Option<String>,
    pub level2_id: String,
    pub covariates: Vec<Option<f64>>,
}

/// Unvalidated input: covariate names plus records in file order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RawTable {
    pub covariate_names: Vec<String>,
    pub rows: Vec<RawRow>,
}

/// Column names used when reading CSV input.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvLayout {
    pub outcome: String,
    pub level2: String,
    /// `None` reads the data as two-level.
    pub level3: Option<String>,
    /// Covariate columns to read; `None` reads every other column.
    pub covariates: Option<Vec<String>>,
}

impl Default for CsvLayout {
    fn default() -> Self {
        Self {
            outcome: "y".into(),
            level2: "id2".into(),
            level3: None,
            covariates: None,
        }
    }
}

impl RawTable {
    /// Reads a comma-separated table with a header row. The columns named in
    /// `layout` are required; covariates are real-valued. Empty cells and `.` are
    /// read as missing.
    pub fn from_csv<R: Read>(reader: R, layout: &CsvLayout) -> Result<Self, DataError> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let headers = rdr.headers().map_err(|e| DataError::Csv(e.to_string()))?.clone();
        let find = |name: &str| headers.iter().position(|h| h == name);
        let y_col = find(&layout.outcome).ok_or_else(|| DataError::UnknownColumn(layout.outcome.clone()))?;
        let id2_col = find(&layout.level2).ok_or_else(|| DataError::UnknownColumn(layout.level2.clone()))?;
        let id3_col = match &layout.level3 {
            Some(name) => Some(find(name).ok_or_else(|| DataError::UnknownColumn(name.clone()))?),
            None => None,
        };

        let cov_cols: Vec<usize> = match &layout.covariates {
            Some(names) => names
                .iter()
                .map(|n| find(n).ok_or_else(|| DataError::UnknownColumn(n.clone())))
                .collect::<Result<_, _>>()?,
            None => (0..headers.len())
                .filter(|&c| c != y_col && c != id2_col && Some(c) != id3_col)
                .collect(),
        };
        let covariate_names: Vec<String> = cov_cols.iter().map(|&c| headers[c].to_string()).collect();

        let mut rows = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| DataError::Csv(e.to_string()))?;
            let row = i + 1;
            let cell = |c: usize| rec.get(c).filter(|s| !s.is_empty() && *s != ".");
            let outcome = match cell(y_col) {
                Some(s) => parse_real(s, row, &layout.outcome)?,
                None => {
                    return Err(DataError::MissingValue {
                        row,
                        column: layout.outcome.clone(),
                    })
                }
            };
            let level2_id = cell(id2_col)
                .ok_or_else(|| DataError::MissingValue {
                    row,
                    column: layout.level2.clone(),
                })?
                .to_string();
            let level3_id = match id3_col {
                Some(c) => Some(
                    cell(c)
                        .ok_or_else(|| DataError::MissingValue {
                            row,
                            column: layout.level3.clone().unwrap_or_default(),
                        })?
                        .to_string(),
                ),
                None => None,
            };
            let covariates = cov_cols
                .iter()
                .zip(&covariate_names)
                .map(|(&c, name)| cell(c).map(|s| parse_real(s, row, name)).transpose())
                .collect::<Result<Vec<_>, _>>()?;
            rows.push(RawRow {
                outcome,
                level3_id,
                level2_id,
                covariates,
            });
        }
        Ok(Self { covariate_names, rows })
    }
}

fn parse_real(s: &str, row: usize, column: &str) -> Result<f64, DataError> {
    s.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| DataError::Csv(format!("row {row}: `{s}` in column `{column}` is not a number")))
}

#[derive(Debug, Clone, PartialEq)]
struct Column {
    name: String,
    values: Vec<f64>,
}

/// A validated dataset of binary outcomes nested in level-2 clusters, which
/// are in turn nested in level-3 clusters.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusteredDataset {
    outcomes: Vec<u8>,
    level2: Vec<usize>,
    level3: Vec<usize>,
    level2_labels: Vec<String>,
    level3_labels: Vec<String>,
    level2_parent: Vec<usize>,
    has_level3: bool,
    columns: Vec<Column>,
}

/// Builds dense ids in first-appearance order.
struct Labeler {
    index: HashMap<String, usize>,
    labels: Vec<String>,
}

impl Labeler {
    fn new() -> Self {
        Self {
            index: HashMap::new(),
            labels: Vec::new(),
        }
    }

    fn id(&mut self, label: &str) -> usize {
        if let Some(&i) = self.index.get(label) {
            return i;
        }
        let i = self.labels.len();
        self.index.insert(label.to_string(), i);
        self.labels.push(label.to_string());
        i
    }
}

impl ClusteredDataset {
    /// Validates raw records; see [`DataError`] for the rejected cases.
    pub fn validate(raw: RawTable) -> Result<Self, DataError> {
        let n = raw.rows.len();
        let p = raw.covariate_names.len();
        check_unique(&raw.covariate_names)?;
        let has_level3 = raw.rows.iter().any(|r| r.level3_id.is_some());

        let mut l2 = Labeler::new();
        let mut l3 = Labeler::new();
        let mut outcomes = Vec::with_capacity(n);
        let mut level2 = Vec::with_capacity(n);
        let mut level3 = Vec::with_capacity(n);
        let mut values: Vec<Vec<f64>> = (0..p).map(|_| Vec::with_capacity(n)).collect();

        for (i, r) in raw.rows.iter().enumerate() {
            let row = i + 1;
            outcomes.push(binary(r.outcome, row)?);
            level2.push(l2.id(&r.level2_id));
            let l3_label = match (&r.level3_id, has_level3) {
                (Some(s), _) => s.as_str(),
                (None, false) => SYNTHETIC_LEVEL3,
                (None, true) => {
                    return Err(DataError::MissingValue {
                        row,
                        column: "level-3 id".into(),
                    })
                }
            };
            level3.push(l3.id(l3_label));
            if r.covariates.len() != p {
                return Err(DataError::LengthMismatch {
                    name: format!("row {row}"),
                    got: r.covariates.len(),
                    expected: p,
                });
            }
            for (c, v) in r.covariates.iter().enumerate() {
                match v {
                    Some(v) if v.is_finite() => values[c].push(*v),
                    _ => {
                        return Err(DataError::MissingValue {
                            row,
                            column: raw.covariate_names[c].clone(),
                        })
                    }
                }
            }
        }
        if !has_level3 && n == 0 {
            l3.id(SYNTHETIC_LEVEL3);
        }
        let columns = raw
            .covariate_names
            .into_iter()
            .zip(values)
            .map(|(name, values)| Column { name, values })
            .collect();
        Self::assemble(outcomes, level2, level3, l2.labels, l3.labels, has_level3, columns)
    }

    /// Builds a dataset from integer cluster ids, used by the simulator.
    /// Labels are the decimal ids. `level3 = None` means two-level data.
    pub fn from_indexed(
        outcomes: Vec<u8>,
        level3: Option<Vec<usize>>,
        level2: Vec<usize>,
        columns: Vec<(String, Vec<f64>)>,
    ) -> Result<Self, DataError> {
        let n = outcomes.len();
        for (i, &y) in outcomes.iter().enumerate() {
            binary(f64::from(y), i + 1)?;
        }
        let names: Vec<String> = columns.iter().map(|(n, _)| n.clone()).collect();
        check_unique(&names)?;
        for (name, v) in &columns {
            if v.len() != n {
                return Err(DataError::LengthMismatch {
                    name: name.clone(),
                    got: v.len(),
                    expected: n,
                });
            }
            if let Some(i) = v.iter().position(|x| !x.is_finite()) {
                return Err(DataError::MissingValue {
                    row: i + 1,
                    column: name.clone(),
                });
            }
        }
        let has_level3 = level3.is_some();
        let mut l2 = Labeler::new();
        let mut l3 = Labeler::new();
        let level2: Vec<usize> = level2.iter().map(|id| l2.id(&id.to_string())).collect();
        let level3: Vec<usize> = match level3 {
            Some(ids) => {
                if ids.len() != n {
                    return Err(DataError::LengthMismatch {
                        name: "level-3 id".into(),
                        got: ids.len(),
                        expected: n,
                    });
                }
                ids.iter().map(|id| l3.id(&id.to_string())).collect()
            }
            None => {
                l3.id(SYNTHETIC_LEVEL3);
                vec![0; n]
            }
        };
        if level2.len() != n {
            return Err(DataError::LengthMismatch {
                name: "level-2 id".into(),
                got: level2.len(),
                expected: n,
            });
        }
        let columns = columns
            .into_iter()
            .map(|(name, values)| Column { name, values })
            .collect();
        Self::assemble(outcomes, level2, level3, l2.labels, l3.labels, has_level3, columns)
    }

    fn assemble(
        outcomes: Vec<u8>,
        level2: Vec<usize>,
        level3: Vec<usize>,
        level2_labels: Vec<String>,
        level3_labels: Vec<String>,
        has_level3: bool,
        columns: Vec<Column>,
    ) -> Result<Self, DataError> {
        let mut level2_parent: Vec<Option<usize>> = vec![None; level2_labels.len()];
        for (&k, &j) in level2.iter().zip(&level3) {
            match level2_parent[k] {
                None => level2_parent[k] = Some(j),
                Some(prev) if prev != j => {
                    return Err(DataError::BrokenNesting {
                        level2: level2_labels[k].clone(),
                        first: level3_labels[prev].clone(),
                        second: level3_labels[j].clone(),
                    })
                }
                Some(_) => {}
            }
        }
        if level2_labels.len() < 2 {
            return Err(DataError::TooFewClusters {
                found: level2_labels.len(),
            });
        }
        Ok(Self {
            outcomes,
            level2,
            level3,
            level2_labels,
            level3_labels,
            level2_parent: level2_parent.into_iter().map(|p| p.unwrap_or(0)).collect(),
            has_level3,
            columns,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.outcomes.len()
    }

    pub fn outcomes(&self) -> &[u8] {
        &self.outcomes
    }

    /// Dense level-2 id of every row.
    pub fn level2_ids(&self) -> &[usize] {
        &self.level2
    }

    /// Dense level-3 id of every row (all zero for two-level data).
    pub fn level3_ids(&self) -> &[usize] {
        &self.level3
    }

    pub fn level2_labels(&self) -> &[String] {
        &self.level2_labels
    }

    pub fn level3_labels(&self) -> &[String] {
        &self.level3_labels
    }

    /// Level-3 cluster containing each level-2 cluster.
    pub fn level2_parent(&self) -> &[usize] {
        &self.level2_parent
    }

    pub fn n_level2(&self) -> usize {
        self.level2_labels.len()
    }

    pub fn n_level3(&self) -> usize {
        self.level3_labels.len()
    }

    /// True when the input carried level-3 ids.
    pub fn has_level3(&self) -> bool {
        self.has_level3
    }

    pub fn column_names(&self) -> impl Iterator<Item = &str> {
        self.columns.iter().map(|c| c.name.as_str())
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.columns
            .iter()
            .find(|c| c.name == name)
            .map(|c| c.values.as_slice())
    }

    /// Returns a copy with extra covariate columns appended.
    pub fn with_columns(&self, extra: Vec<(String, Vec<f64>)>) -> Result<Self, DataError> {
        let mut out = self.clone();
        for (name, values) in extra {
            if out.column(&name).is_some() {
                return Err(DataError::DuplicateColumn(name));
            }
            if values.len() != self.n_rows() {
                return Err(DataError::LengthMismatch {
                    name,
                    got: values.len(),
                    expected: self.n_rows(),
                });
            }
            out.columns.push(Column { name, values });
        }
        Ok(out)
    }

    /// Number of rows in each cluster at the given level.
    pub fn cluster_sizes(&self, level: Level) -> ClusterSizes {
        let (ids, labels) = match level {
            Level::Level2 => (&self.level2, &self.level2_labels),
            Level::Level3 => (&self.level3, &self.level3_labels),
        };
        let mut counts = vec![0usize; labels.len()];
        for &id in ids {
            counts[id] += 1;
        }
        ClusterSizes {
            labels: labels.clone(),
            counts,
        }
    }
}

fn binary(v: f64, row: usize) -> Result<u8, DataError> {
    if v == 0.0 {
        Ok(0)
    } else if v == 1.0 {
        Ok(1)
    } else {
        Err(DataError::NonBinaryOutcome { row, value: v })
    }
}

fn check_unique(names: &[String]) -> Result<(), DataError> {
    for (i, a) in names.iter().enumerate() {
        if names[..i].contains(a) {
            return Err(DataError::DuplicateColumn(a.clone()));
        }
    }
    Ok(())
}

/// Per-cluster row counts, in dense-id order.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSizes {
    labels: Vec<String>,
    counts: Vec<usize>,
}

impl ClusterSizes {
    pub fn get(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label).map(|i| self.counts[i])
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, usize)> {
        self.labels.iter().map(String::as_str).zip(self.counts.iter().copied())
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn min(&self) -> Option<usize> {
        self.counts.iter().copied().min()
    }

    pub fn max(&self) -> Option<usize> {
        self.counts.iter().copied().max()
    }
}
