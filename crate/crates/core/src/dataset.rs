//! Typed tables loaded from CSV, schema inference and one-hot encoding.
//!
//! A [`Table`] is immutable once built. Column order always follows the
//! source file header, since every serializer walks columns in that order.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Phrase used wherever a missing cell is rendered as text.
pub const MISSING_PHRASE: &str = "unknown";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot open {}: {source}", path.display())]
    Open {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("malformed CSV in {}: {source}", path.display())]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{} has no header or no data rows", path.display())]
    Empty { path: PathBuf },
    #[error("duplicate column name {0:?}")]
    DuplicateColumn(String),
    #[error("column {0} has an empty name")]
    EmptyColumnName(usize),
    #[error("label column {0:?} is not one of the schema columns")]
    UnknownLabelColumn(String),
    #[error("header does not match schema: missing {missing:?}, unexpected {unexpected:?}")]
    HeaderMismatch {
        missing: Vec<String>,
        unexpected: Vec<String>,
    },
    #[error("row {row} has {found} cells, expected {expected}")]
    RaggedRow {
        row: usize,
        found: usize,
        expected: usize,
    },
    #[error("row {row}, column {column:?}: {value:?} is not a finite number")]
    BadNumber {
        row: usize,
        column: String,
        value: String,
    },
    #[error("row {row}, column {column:?}: numeric column holds a text cell")]
    TextInNumericColumn { row: usize, column: String },
    #[error("row {row}: label cell is missing")]
    MissingLabel { row: usize },
    #[error("row {row}: label {value:?} is outside the two-class set {classes:?}")]
    ThirdLabel {
        row: usize,
        value: String,
        classes: Vec<String>,
    },
    #[error("label column holds {0} distinct value(s), exactly two are required")]
    NotBinary(usize),
    #[error("positive label {positive:?} is not one of the observed labels {observed:?}")]
    PositiveLabelNotObserved {
        positive: String,
        observed: Vec<String>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Categorical,
    Numeric,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub kind: ColumnKind,
}

impl Column {
    pub fn new(name: impl Into<String>, kind: ColumnKind) -> Self {
        Self {
            name: name.into(),
            kind,
        }
    }
}

/// Column layout plus the binary label declaration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SchemaDef")]
pub struct Schema {
    columns: Vec<Column>,
    label_column: String,
    positive_label: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SchemaDef {
    columns: Vec<Column>,
    label_column: String,
    positive_label: String,
}

impl TryFrom<SchemaDef> for Schema {
    type Error = DatasetError;

    fn try_from(def: SchemaDef) -> Result<Self, Self::Error> {
        Schema::new(def.columns, def.label_column, def.positive_label)
    }
}

impl Schema {
    pub fn new(
        columns: Vec<Column>,
        label_column: impl Into<String>,
        positive_label: impl Into<String>,
    ) -> Result<Self, DatasetError> {
        let label_column = label_column.into();
        let mut seen = HashSet::new();
        for (i, c) in columns.iter().enumerate() {
            if c.name.is_empty() {
                return Err(DatasetError::EmptyColumnName(i));
            }
            if !seen.insert(c.name.as_str()) {
                return Err(DatasetError::DuplicateColumn(c.name.clone()));
            }
        }
        if !seen.contains(label_column.as_str()) {
            return Err(DatasetError::UnknownLabelColumn(label_column));
        }
        Ok(Self {
            columns,
            label_column,
            positive_label: positive_label.into(),
        })
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn label_column(&self) -> &str {
        &self.label_column
    }

    pub fn positive_label(&self) -> &str {
        &self.positive_label
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    pub fn label_index(&self) -> usize {
        self.index_of(&self.label_column)
            .expect("label column validated at construction")
    }

    /// Non-label columns with their positions, in column order.
    pub fn features(&self) -> impl Iterator<Item = (usize, &Column)> {
        let label = self.label_index();
        self.columns
            .iter()
            .enumerate()
            .filter(move |(i, _)| *i != label)
    }

    pub fn feature_names(&self) -> Vec<&str> {
        self.features().map(|(_, c)| c.name.as_str()).collect()
    }

    pub fn is_feature(&self, name: &str) -> bool {
        name != self.label_column && self.index_of(name).is_some()
    }

    /// Canonical text form of the positive label, comparable with [`Cell::label_key`].
    fn positive_key(&self) -> String {
        let kind = self.columns[self.label_index()].kind;
        match (kind, parse_number(&self.positive_label)) {
            (ColumnKind::Numeric, Some(v)) => format_number(v),
            _ => self.positive_label.clone(),
        }
    }

    /// Same column set rearranged into `order`. Names must match exactly.
    fn reordered(&self, order: &[String]) -> Self {
        let columns = order
            .iter()
            .map(|n| self.columns[self.index_of(n).unwrap()].clone())
            .collect();
        Self {
            columns,
            label_column: self.label_column.clone(),
            positive_label: self.positive_label.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Text(String),
    Number(f64),
    Missing,
}

impl Cell {
    /// Text used inside serializations. Missing cells read "unknown".
    pub fn render(&self) -> String {
        match self {
            Cell::Text(s) => s.clone(),
            Cell::Number(v) => format_number(*v),
            Cell::Missing => MISSING_PHRASE.to_string(),
        }
    }

    /// Text written back to CSV. Missing cells become empty fields.
    pub fn csv_field(&self) -> String {
        match self {
            Cell::Missing => String::new(),
            other => other.render(),
        }
    }

    fn label_key(&self) -> Option<String> {
        match self {
            Cell::Missing => None,
            other => Some(other.render()),
        }
    }

    pub fn is_missing(&self) -> bool {
        matches!(self, Cell::Missing)
    }
}

pub type Row = Vec<Cell>;

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    schema: Schema,
    rows: Vec<Row>,
    labels: Vec<bool>,
}

impl Table {
    /// Builds a table, checking row width, numeric cells and the two-class label rule.
    pub fn new(schema: Schema, rows: Vec<Row>) -> Result<Self, DatasetError> {
        let width = schema.columns().len();
        let label_idx = schema.label_index();
        let mut classes: Vec<String> = Vec::with_capacity(2);
        let mut keys = Vec::with_capacity(rows.len());

        for (r, row) in rows.iter().enumerate() {
            if row.len() != width {
                return Err(DatasetError::RaggedRow {
                    row: r,
                    found: row.len(),
                    expected: width,
                });
            }
            for (cell, col) in row.iter().zip(schema.columns()) {
                match (col.kind, cell) {
                    (ColumnKind::Numeric, Cell::Text(_)) => {
                        return Err(DatasetError::TextInNumericColumn {
                            row: r,
                            column: col.name.clone(),
                        })
                    }
                    (_, Cell::Number(v)) if !v.is_finite() => {
                        return Err(DatasetError::BadNumber {
                            row: r,
                            column: col.name.clone(),
                            value: v.to_string(),
                        })
                    }
                    _ => {}
                }
            }
            let key = row[label_idx]
                .label_key()
                .ok_or(DatasetError::MissingLabel { row: r })?;
            if !classes.contains(&key) {
                if classes.len() == 2 {
                    return Err(DatasetError::ThirdLabel {
                        row: r,
                        value: key,
                        classes,
                    });
                }
                classes.push(key.clone());
            }
            keys.push(key);
        }

        if classes.len() != 2 {
            return Err(DatasetError::NotBinary(classes.len()));
        }
        let positive = schema.positive_key();
        if !classes.contains(&positive) {
            return Err(DatasetError::PositiveLabelNotObserved {
                positive: schema.positive_label().to_string(),
                observed: classes,
            });
        }
        let labels = keys.into_iter().map(|k| k == positive).collect();
        Ok(Self {
            schema,
            rows,
            labels,
        })
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn rows(&self) -> &[Row] {
        &self.rows
    }

    pub fn row(&self, i: usize) -> &[Cell] {
        &self.rows[i]
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// `true` where the row carries the positive label.
    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    /// Display text of the label for either class.
    pub fn class_name(&self, positive: bool) -> String {
        let label_idx = self.schema.label_index();
        self.rows
            .iter()
            .zip(&self.labels)
            .find(|(_, &l)| l == positive)
            .map(|(row, _)| row[label_idx].render())
            .unwrap_or_default()
    }

    /// Writes the table as CSV with canonical numeric rendering.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(self.schema.columns().iter().map(|c| c.name.as_str()))?;
        for row in &self.rows {
            w.write_record(row.iter().map(Cell::csv_field))?;
        }
        w.flush()?;
        Ok(())
    }
}

fn is_missing_text(raw: &str) -> bool {
    let t = raw.trim();
    t.is_empty() || t == "NA"
}

fn parse_number(raw: &str) -> Option<f64> {
    raw.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Integers print without a decimal point; everything else keeps at most
/// six significant digits, switching to exponent form outside 1e-4..1e6.
pub fn format_number(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    if v.fract() == 0.0 && v.abs() < 1e15 {
        return format!("{}", v as i64);
    }
    let sci = format!("{v:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp) as usize;
        trim_zeros(&format!("{v:.decimals$}")).to_string()
    } else {
        format!("{}e{exp}", trim_zeros(mantissa))
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn open_reader(path: &Path) -> Result<csv::Reader<File>, DatasetError> {
    let file = File::open(path).map_err(|source| DatasetError::Open {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(file))
}

fn read_raw(path: &Path) -> Result<(Vec<String>, Vec<csv::StringRecord>), DatasetError> {
    let csv_err = |source| DatasetError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = open_reader(path)?;
    let header: Vec<String> = reader
        .headers()
        .map_err(csv_err)?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let records = reader
        .records()
        .collect::<Result<Vec<_>, _>>()
        .map_err(csv_err)?;
    if header.iter().all(|h| h.is_empty()) {
        return Err(DatasetError::Empty {
            path: path.to_path_buf(),
        });
    }
    Ok((header, records))
}

/// Loads `path` under `schema`. The returned table's schema follows the file's column order.
pub fn load_table(path: &Path, schema: &Schema) -> Result<Table, DatasetError> {
    let (header, records) = read_raw(path)?;

    let mut seen = HashSet::new();
    for h in &header {
        if !seen.insert(h.as_str()) {
            return Err(DatasetError::DuplicateColumn(h.clone()));
        }
    }
    let declared: BTreeSet<&str> = schema.columns().iter().map(|c| c.name.as_str()).collect();
    let found: BTreeSet<&str> = header.iter().map(String::as_str).collect();
    if declared != found {
        return Err(DatasetError::HeaderMismatch {
            missing: declared.difference(&found).map(|s| s.to_string()).collect(),
            unexpected: found.difference(&declared).map(|s| s.to_string()).collect(),
        });
    }

    let schema = schema.reordered(&header);
    let mut rows = Vec::with_capacity(records.len());
    for (r, record) in records.iter().enumerate() {
        if record.len() != header.len() {
            return Err(DatasetError::RaggedRow {
                row: r,
                found: record.len(),
                expected: header.len(),
            });
        }
        let row = record
            .iter()
            .zip(schema.columns())
            .map(|(raw, col)| parse_cell(raw, col, r))
            .collect::<Result<Row, _>>()?;
        rows.push(row);
    }
    Table::new(schema, rows)
}

fn parse_cell(raw: &str, col: &Column, row: usize) -> Result<Cell, DatasetError> {
    if is_missing_text(raw) {
        return Ok(Cell::Missing);
    }
    match col.kind {
        ColumnKind::Categorical => Ok(Cell::Text(raw.to_string())),
        ColumnKind::Numeric => {
            parse_number(raw)
                .map(Cell::Number)
                .ok_or_else(|| DatasetError::BadNumber {
                    row,
                    column: col.name.clone(),
                    value: raw.to_string(),
                })
        }
    }
}

/// A column is numeric iff every non-missing cell parses as a finite real.
pub fn infer_schema(
    path: &Path,
    label_column: &str,
    positive_label: &str,
) -> Result<Schema, DatasetError> {
    let (header, records) = read_raw(path)?;
    if records.is_empty() {
        return Err(DatasetError::Empty {
            path: path.to_path_buf(),
        });
    }
    let mut seen = HashSet::new();
    for h in &header {
        if !seen.insert(h.as_str()) {
            return Err(DatasetError::DuplicateColumn(h.clone()));
        }
    }
    let columns = header
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let numeric = records.iter().all(|rec| match rec.get(j) {
                Some(raw) => is_missing_text(raw) || parse_number(raw).is_some(),
                None => true,
            });
            let kind = if numeric {
                ColumnKind::Numeric
            } else {
                ColumnKind::Categorical
            };
            Column::new(name.clone(), kind)
        })
        .collect();
    Schema::new(columns, label_column, positive_label)
}

/// Dense one-hot view of a table's features, with the label as a 0/1 target.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedMatrix {
    /// Numeric feature names and `feature=level` indicator names.
    pub column_names: Vec<String>,
    /// Source feature of each encoded column.
    pub feature_of: Vec<String>,
    /// Row-major values, one row per table row.
    pub values: Vec<Vec<f64>>,
    pub target: Vec<f64>,
}

impl EncodedMatrix {
    pub fn n_rows(&self) -> usize {
        self.values.len()
    }

    pub fn n_cols(&self) -> usize {
        self.column_names.len()
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.values.iter().map(|row| row[j]).collect()
    }

    /// Encoded column indices belonging to `feature`.
    pub fn columns_of<'a>(&'a self, feature: &'a str) -> impl Iterator<Item = usize> + 'a {
        self.feature_of
            .iter()
            .enumerate()
            .filter(move |(_, f)| f.as_str() == feature)
            .map(|(j, _)| j)
    }
}

/// One-hot encodes categorical features (levels sorted lexicographically) and
/// copies numeric ones. Missing categorical cells encode as all zeros; missing
/// numeric cells take the column mean so they add nothing to a covariance.
pub fn one_hot_encode(table: &Table) -> EncodedMatrix {
    let n = table.len();
    let mut column_names = Vec::new();
    let mut feature_of = Vec::new();
    let mut columns: Vec<Vec<f64>> = Vec::new();

    for (j, col) in table.schema().features() {
        match col.kind {
            ColumnKind::Numeric => {
                let observed: Vec<f64> = table
                    .rows()
                    .iter()
                    .filter_map(|r| match r[j] {
                        Cell::Number(v) => Some(v),
                        _ => None,
                    })
                    .collect();
                let fill = if observed.is_empty() {
                    0.0
                } else {
                    observed.iter().sum::<f64>() / observed.len() as f64
                };
                columns.push(
                    table
                        .rows()
                        .iter()
                        .map(|r| match r[j] {
                            Cell::Number(v) => v,
                            _ => fill,
                        })
                        .collect(),
                );
                column_names.push(col.name.clone());
                feature_of.push(col.name.clone());
            }
            ColumnKind::Categorical => {
                let mut levels: BTreeMap<String, Vec<f64>> = BTreeMap::new();
                for (r, row) in table.rows().iter().enumerate() {
                    if let Cell::Text(level) = &row[j] {
                        levels.entry(level.clone()).or_insert_with(|| vec![0.0; n])[r] = 1.0;
                    }
                }
                for (level, indicator) in levels {
                    column_names.push(format!("{}={}", col.name, level));
                    feature_of.push(col.name.clone());
                    columns.push(indicator);
                }
            }
        }
    }

    let values = (0..n)
        .map(|r| columns.iter().map(|c| c[r]).collect())
        .collect();
    let target = table
        .labels()
        .iter()
        .map(|&l| if l { 1.0 } else { 0.0 })
        .collect();
    EncodedMatrix {
        column_names,
        feature_of,
        values,
        target,
    }
}
