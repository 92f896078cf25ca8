//! Data tables and design-matrix recipes.
//!
//! A [`DesignSpec`] lists model terms by column name:
//!
//! - `x` — a numeric column, or a factor expanded into treatment-coded indicator columns
//!   `x[level]` (one per non-reference level);
//! - `a:b` — the elementwise product of the expansions of `a` and `b`;
//! - `a*b` — shorthand for `a`, `b`, `a:b`.
//!
//! The lexical-class factor uses `function` as its reference level unless told otherwise.
//! Optional z-scoring applies to numeric source columns before products are formed, and the
//! means and standard deviations are recorded in the design.

use std::io::Read;

use indexmap::IndexMap;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One table column: raw strings, plus values when every cell parses as a number.
#[derive(Debug, Clone, PartialEq)]
pub struct Column {
    raw: Vec<String>,
    numeric: Option<Vec<f64>>,
}

impl Column {
    pub fn from_strings(raw: Vec<String>) -> Self {
        let numeric = raw
            .iter()
            .map(|s| s.trim().parse::<f64>().ok())
            .collect::<Option<Vec<f64>>>();
        Column { raw, numeric }
    }

    pub fn from_numbers(values: Vec<f64>) -> Self {
        Column {
            raw: values.iter().map(|v| v.to_string()).collect(),
            numeric: Some(values),
        }
    }

    pub fn raw(&self) -> &[String] {
        &self.raw
    }

    pub fn numeric(&self) -> Option<&[f64]> {
        self.numeric.as_deref()
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }
}

/// Column-oriented data with named columns of equal length.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Table {
    columns: IndexMap<String, Column>,
    n_rows: usize,
}

impl Table {
    pub fn new() -> Self {
        Table::default()
    }

    pub fn with_column(mut self, name: impl Into<String>, column: Column) -> Result<Self> {
        self.insert(name, column)?;
        Ok(self)
    }

    pub fn insert(&mut self, name: impl Into<String>, column: Column) -> Result<()> {
        if !self.columns.is_empty() && column.len() != self.n_rows {
            return Err(Error::DimensionMismatch {
                expected: self.n_rows,
                found: column.len(),
            });
        }
        self.n_rows = column.len();
        self.columns.insert(name.into(), column);
        Ok(())
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn column(&self, name: &str) -> Result<&Column> {
        self.columns
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown column {name:?}")))
    }

    pub fn numeric(&self, name: &str) -> Result<&[f64]> {
        self.column(name)?
            .numeric()
            .ok_or_else(|| Error::InvalidArgument(format!("column {name:?} is not numeric")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.columns.keys().map(String::as_str)
    }

    pub fn from_csv<R: Read>(input: R) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(input);
        let headers: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
        let mut raw: Vec<Vec<String>> = vec![Vec::new(); headers.len()];
        for rec in reader.records() {
            let rec = rec?;
            for (col, cell) in raw.iter_mut().zip(rec.iter()) {
                col.push(cell.to_owned());
            }
        }
        let mut table = Table::new();
        for (name, col) in headers.into_iter().zip(raw) {
            table.insert(name, Column::from_strings(col))?;
        }
        Ok(table)
    }

    /// Rows whose `column` renders exactly as `value`.
    pub fn filter_eq(&self, column: &str, value: &str) -> Result<Table> {
        let keep: Vec<bool> = self
            .column(column)?
            .raw()
            .iter()
            .map(|v| v == value)
            .collect();
        Ok(self.filter(&keep))
    }

    pub fn filter(&self, keep: &[bool]) -> Table {
        let mut out = Table::new();
        for (name, col) in &self.columns {
            let raw: Vec<String> = col
                .raw
                .iter()
                .zip(keep)
                .filter(|(_, &k)| k)
                .map(|(v, _)| v.clone())
                .collect();
            let numeric = col.numeric.as_ref().map(|n| {
                n.iter()
                    .zip(keep)
                    .filter(|(_, &k)| k)
                    .map(|(v, _)| *v)
                    .collect()
            });
            out.insert(name.clone(), Column { raw, numeric })
                .expect("filtered columns share a length");
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignSpec {
    #[serde(default = "default_true")]
    pub intercept: bool,
    pub terms: Vec<String>,
    #[serde(default)]
    pub standardize: bool,
    /// Reference level per factor; unlisted factors use their alphabetically first level.
    #[serde(default = "default_references")]
    pub reference_levels: IndexMap<String, String>,
}

fn default_true() -> bool {
    true
}

fn default_references() -> IndexMap<String, String> {
    IndexMap::from([("lexical_class".to_string(), "function".to_string())])
}

impl DesignSpec {
    pub fn new<S: AsRef<str>>(terms: &[S]) -> Self {
        DesignSpec {
            intercept: true,
            terms: terms.iter().map(|t| t.as_ref().to_string()).collect(),
            standardize: false,
            reference_levels: default_references(),
        }
    }
}

/// Named model matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    pub names: Vec<String>,
    pub x: DMatrix<f64>,
    /// `(mean, sd)` of every standardized source column.
    pub standardization: IndexMap<String, (f64, f64)>,
}

impl Design {
    pub fn from_columns<S: AsRef<str>>(names: &[S], columns: &[Vec<f64>]) -> Result<Self> {
        if names.len() != columns.len() {
            return Err(Error::DimensionMismatch {
                expected: names.len(),
                found: columns.len(),
            });
        }
        let n = columns.first().map_or(0, Vec::len);
        if let Some(c) = columns.iter().find(|c| c.len() != n) {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: c.len(),
            });
        }
        let x = DMatrix::from_fn(n, columns.len(), |i, j| columns[j][i]);
        Ok(Design {
            names: names.iter().map(|s| s.as_ref().to_string()).collect(),
            x,
            standardization: IndexMap::new(),
        })
    }

    pub fn n_rows(&self) -> usize {
        self.x.nrows()
    }

    pub fn n_cols(&self) -> usize {
        self.x.ncols()
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.names.iter().position(|n| n == name)?;
        Some(self.x.column(j).iter().copied().collect())
    }
}

fn expand_terms(terms: &[String]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    let mut push = |t: String| {
        if !out.contains(&t) {
            out.push(t);
        }
    };
    for term in terms {
        let term: String = term.chars().filter(|c| !c.is_whitespace()).collect();
        if term.contains('*') {
            let parts: Vec<&str> = term.split('*').collect();
            // All non-empty subsets, lower order first.
            for size in 1..=parts.len() {
                for mask in 0u32..(1 << parts.len()) {
                    if mask.count_ones() as usize == size {
                        let sel: Vec<&str> = (0..parts.len())
                            .filter(|i| mask & (1 << i) != 0)
                            .map(|i| parts[i])
                            .collect();
                        push(sel.join(":"));
                    }
                }
            }
        } else {
            push(term);
        }
    }
    out
}

/// Builds the model matrix for `spec` over `table`.
pub fn build_design(table: &Table, spec: &DesignSpec) -> Result<Design> {
    let n = table.n_rows();
    let mut standardization = IndexMap::new();
    let mut source = |name: &str| -> Result<Vec<(String, Vec<f64>)>> {
        let col = table.column(name)?;
        if let Some(values) = col.numeric() {
            if !spec.standardize {
                return Ok(vec![(name.to_string(), values.to_vec())]);
            }
            let m = values.iter().sum::<f64>() / n as f64;
            let sd =
                (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n as f64 - 1.0)).sqrt();
            if sd.is_nan() || sd <= 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "cannot standardize constant column {name:?}"
                )));
            }
            standardization.insert(name.to_string(), (m, sd));
            return Ok(vec![(
                name.to_string(),
                values.iter().map(|v| (v - m) / sd).collect(),
            )]);
        }
        let mut levels: Vec<&String> = col.raw().iter().collect();
        levels.sort();
        levels.dedup();
        let reference = match spec.reference_levels.get(name) {
            Some(r) if levels.contains(&r) => r.clone(),
            Some(r) => {
                return Err(Error::InvalidArgument(format!(
                    "reference level {r:?} not present in factor {name:?}"
                )))
            }
            None => levels[0].clone(),
        };
        Ok(levels
            .into_iter()
            .filter(|l| **l != reference)
            .map(|l| {
                let ind = col
                    .raw()
                    .iter()
                    .map(|v| f64::from(u8::from(v == l)))
                    .collect();
                (format!("{name}[{l}]"), ind)
            })
            .collect())
    };

    let mut names = Vec::new();
    let mut columns = Vec::new();
    if spec.intercept {
        names.push("(Intercept)".to_string());
        columns.push(vec![1.0; n]);
    }
    for term in expand_terms(&spec.terms) {
        let mut acc: Vec<(String, Vec<f64>)> = vec![(String::new(), vec![1.0; n])];
        for factor in term.split(':') {
            let parts = source(factor)?;
            acc = acc
                .iter()
                .flat_map(|(an, av)| {
                    parts.iter().map(move |(pn, pv)| {
                        let name = if an.is_empty() {
                            pn.clone()
                        } else {
                            format!("{an}:{pn}")
                        };
                        (
                            name,
                            av.iter().zip(pv).map(|(a, b)| a * b).collect::<Vec<f64>>(),
                        )
                    })
                })
                .collect();
        }
        for (name, col) in acc {
            names.push(name);
            columns.push(col);
        }
    }
    let mut design = Design::from_columns(&names, &columns)?;
    design.standardization = standardization;
    Ok(design)
}
