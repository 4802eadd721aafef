use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ColumnKind {
    Numeric,
    /// Values are level indices `0..levels` stored as floats.
    Categorical { levels: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub kind: ColumnKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub columns: Vec<Column>,
}

impl FeatureSchema {
    pub fn numeric<S: AsRef<str>>(names: &[S]) -> Self {
        FeatureSchema {
            columns: names
                .iter()
                .map(|n| Column {
                    name: n.as_ref().to_string(),
                    kind: ColumnKind::Numeric,
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn names(&self) -> Vec<&str> {
        self.columns.iter().map(|c| c.name.as_str()).collect()
    }

    pub fn permuted(&self, perm: &[usize]) -> Self {
        FeatureSchema {
            columns: perm.iter().map(|&j| self.columns[j].clone()).collect(),
        }
    }
}

/// Column-major feature matrix. Missing entries are `NaN`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    schema: FeatureSchema,
    n_rows: usize,
    cols: Vec<Vec<f64>>,
}

impl Dataset {
    pub fn from_columns(schema: FeatureSchema, cols: Vec<Vec<f64>>) -> Result<Self> {
        if cols.len() != schema.len() {
            return Err(Error::SchemaMismatch(format!(
                "{} columns for a schema of {}",
                cols.len(),
                schema.len()
            )));
        }
        let n_rows = cols.first().map_or(0, Vec::len);
        for (c, col) in schema.columns.iter().zip(&cols) {
            if col.len() != n_rows {
                return Err(Error::SchemaMismatch(format!("column `{}` has ragged length", c.name)));
            }
            if let ColumnKind::Categorical { levels } = c.kind {
                if let Some(bad) = col
                    .iter()
                    .find(|v| !v.is_nan() && (v.fract() != 0.0 || **v < 0.0 || **v >= levels as f64))
                {
                    return Err(Error::invalid(format!(
                        "column `{}`: {bad} is not a level index below {levels}",
                        c.name
                    )));
                }
            } else if col.iter().any(|v| v.is_infinite()) {
                return Err(Error::NonFinite(format!("column `{}`", c.name)));
            }
        }
        Ok(Dataset { schema, n_rows, cols })
    }

    pub fn from_rows(schema: FeatureSchema, rows: &[Vec<f64>]) -> Result<Self> {
        let p = schema.len();
        if let Some(r) = rows.iter().find(|r| r.len() != p) {
            return Err(Error::SchemaMismatch(format!("row of length {} for {p} columns", r.len())));
        }
        let cols = (0..p).map(|j| rows.iter().map(|r| r[j]).collect()).collect();
        Self::from_columns(schema, cols)
    }

    pub fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.cols.len()
    }

    #[inline]
    pub fn value(&self, row: usize, col: usize) -> f64 {
        self.cols[col][row]
    }

    pub fn column(&self, col: usize) -> &[f64] {
        &self.cols[col]
    }

    pub fn row(&self, row: usize) -> Vec<f64> {
        self.cols.iter().map(|c| c[row]).collect()
    }

    pub fn select_rows(&self, rows: &[usize]) -> Dataset {
        Dataset {
            schema: self.schema.clone(),
            n_rows: rows.len(),
            cols: self.cols.iter().map(|c| rows.iter().map(|&r| c[r]).collect()).collect(),
        }
    }

    /// Reorder columns: new column `k` is old column `perm[k]`.
    pub fn permute_columns(&self, perm: &[usize]) -> Dataset {
        Dataset {
            schema: self.schema.permuted(perm),
            n_rows: self.n_rows,
            cols: perm.iter().map(|&j| self.cols[j].clone()).collect(),
        }
    }
}

/// What the trees predict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "lowercase")]
pub enum Task {
    Regression,
    /// Targets are class indices `0..n_classes` stored as floats.
    Classification { n_classes: usize },
}
