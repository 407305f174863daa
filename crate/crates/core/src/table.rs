//! Tabular artifacts. Every emitted table carries a metadata map that is
//! written as a leading `# key=value; ...` row in CSV and as an object in JSON.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    #[default]
    Csv,
    Json,
}

impl OutputFormat {
    pub fn extension(self) -> &'static str {
        match self {
            OutputFormat::Csv => "csv",
            OutputFormat::Json => "json",
        }
    }
}

impl FromStr for OutputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(OutputFormat::Csv),
            "json" => Ok(OutputFormat::Json),
            other => Err(Error::config(format!("unknown output format `{other}`"))),
        }
    }
}

impl fmt::Display for OutputFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.extension())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Cell {
    Int(i64),
    Float(f64),
    Text(String),
    /// Rendered as an empty CSV cell and `null` in JSON.
    Absent,
}

impl Cell {
    fn csv(&self) -> String {
        match self {
            Cell::Int(v) => v.to_string(),
            Cell::Float(v) => v.to_string(),
            Cell::Text(s) => s.clone(),
            Cell::Absent => String::new(),
        }
    }

    fn json(&self) -> Value {
        match self {
            Cell::Int(v) => json!(v),
            Cell::Float(v) if v.is_finite() => json!(v),
            Cell::Float(_) | Cell::Absent => Value::Null,
            Cell::Text(s) => json!(s),
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Cell::Int(v) => Some(*v as f64),
            Cell::Float(v) => Some(*v),
            _ => None,
        }
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Float(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<u64> for Cell {
    fn from(v: u64) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::Text(v)
    }
}

impl From<Option<f64>> for Cell {
    fn from(v: Option<f64>) -> Self {
        v.map_or(Cell::Absent, Cell::Float)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Table {
    pub name: String,
    pub metadata: BTreeMap<String, String>,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(name: impl Into<String>, columns: &[&str]) -> Self {
        Table {
            name: name.into(),
            metadata: BTreeMap::new(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(
            row.len(),
            self.columns.len(),
            "row width in table {}",
            self.name
        );
        self.rows.push(row);
    }

    pub fn with_metadata(mut self, meta: &BTreeMap<String, String>) -> Self {
        self.metadata
            .extend(meta.iter().map(|(k, v)| (k.clone(), v.clone())));
        self
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    fn metadata_line(&self) -> String {
        let parts: Vec<String> = self
            .metadata
            .iter()
            .map(|(k, v)| format!("{k}={}", v.replace(['\n', ';'], " ")))
            .collect();
        format!("# {}", parts.join("; "))
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{}", self.metadata_line())?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record(&self.columns)?;
        for row in &self.rows {
            w.write_record(row.iter().map(Cell::csv))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_json(&self) -> Value {
        json!({
            "name": self.name,
            "metadata": self.metadata,
            "columns": self.columns,
            "rows": self.rows.iter().map(|r| r.iter().map(Cell::json).collect::<Vec<_>>()).collect::<Vec<_>>(),
        })
    }

    pub fn write<W: Write>(&self, out: W, format: OutputFormat) -> Result<()> {
        match format {
            OutputFormat::Csv => self.write_csv(out),
            OutputFormat::Json => {
                let mut out = out;
                serde_json::to_writer_pretty(&mut out, &self.to_json())?;
                writeln!(out)?;
                Ok(())
            }
        }
    }

    /// Writes `<dir>/<name>.<ext>` and returns the path.
    pub fn save(&self, dir: &Path, format: OutputFormat) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let path = dir.join(format!("{}.{}", self.name, format.extension()));
        let mut buf = Vec::new();
        self.write(&mut buf, format)?;
        fs::write(&path, buf)?;
        Ok(path)
    }

    /// Cellwise mean of same-shaped tables. Numeric cells average over the
    /// tables where they are present and finite; text comes from the first.
    pub fn average(tables: &[Table]) -> Result<Table> {
        let first = tables
            .first()
            .ok_or_else(|| Error::domain("cannot average zero tables"))?;
        for t in tables {
            if t.columns != first.columns
                || t.rows.len() != first.rows.len()
                || t.rows
                    .iter()
                    .zip(&first.rows)
                    .any(|(a, b)| a.len() != b.len())
            {
                return Err(Error::structure(format!(
                    "tables named `{}` have different shapes",
                    first.name
                )));
            }
        }
        let rows = (0..first.rows.len())
            .map(|i| {
                (0..first.columns.len())
                    .map(|j| match &first.rows[i][j] {
                        Cell::Text(s) => Cell::Text(s.clone()),
                        _ => {
                            let vals: Vec<f64> = tables
                                .iter()
                                .filter_map(|t| t.rows[i][j].as_f64())
                                .filter(|v| v.is_finite())
                                .collect();
                            if vals.is_empty() {
                                Cell::Absent
                            } else {
                                Cell::Float(vals.iter().sum::<f64>() / vals.len() as f64)
                            }
                        }
                    })
                    .collect()
            })
            .collect();
        Ok(Table {
            name: first.name.clone(),
            metadata: first.metadata.clone(),
            columns: first.columns.clone(),
            rows,
        })
    }

    /// Reads a CSV written by [`Table::write_csv`]. Cells come back as
    /// floats when they parse, text otherwise.
    pub fn read_csv(path: &Path) -> Result<Table> {
        let text = fs::read_to_string(path)?;
        let (first, rest) = text.split_once('\n').ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            reason: "empty table".into(),
        })?;
        let mut metadata = BTreeMap::new();
        for part in first.trim_start_matches('#').split(';') {
            if let Some((k, v)) = part.trim().split_once('=') {
                metadata.insert(k.to_string(), v.to_string());
            }
        }
        let mut reader = csv::Reader::from_reader(rest.as_bytes());
        let columns = reader.headers()?.iter().map(String::from).collect();
        let mut rows = Vec::new();
        for rec in reader.records() {
            rows.push(
                rec?.iter()
                    .map(|c| {
                        if c.is_empty() {
                            Cell::Absent
                        } else {
                            c.parse::<f64>()
                                .map_or_else(|_| Cell::Text(c.to_string()), Cell::Float)
                        }
                    })
                    .collect(),
            );
        }
        Ok(Table {
            name: path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
            metadata,
            columns,
            rows,
        })
    }
}
