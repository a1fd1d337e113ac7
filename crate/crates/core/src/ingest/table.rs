use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rectangular table: `n ≥ 1` non-empty headers and `m ≥ 1` rows of `n` cells.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Table {
    headers: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    /// Validates the table invariants. Cell text is kept verbatim; only
    /// headers are checked (after trimming) for emptiness.
    pub fn new(headers: Vec<String>, rows: Vec<Vec<String>>) -> Result<Self> {
        if headers.is_empty() {
            return Err(Error::EmptyHeader(0));
        }
        if let Some(i) = headers.iter().position(|h| h.trim().is_empty()) {
            return Err(Error::EmptyHeader(i));
        }
        if rows.is_empty() {
            return Err(Error::EmptyTable);
        }
        for (i, row) in rows.iter().enumerate() {
            if row.len() != headers.len() {
                return Err(Error::RaggedRow {
                    row: i,
                    expected: headers.len(),
                    found: row.len(),
                });
            }
        }
        Ok(Self { headers, rows })
    }

    pub fn headers(&self) -> &[String] {
        &self.headers
    }

    pub fn rows(&self) -> &[Vec<String>] {
        &self.rows
    }

    pub fn cell(&self, row: usize, col: usize) -> &str {
        &self.rows[row][col]
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_cols(&self) -> usize {
        self.headers.len()
    }

    /// Same table with rows reordered: row `i` of the result is row `perm[i]`.
    pub fn permute_rows(&self, perm: &[usize]) -> Table {
        Table {
            headers: self.headers.clone(),
            rows: perm.iter().map(|&i| self.rows[i].clone()).collect(),
        }
    }

    /// Same table with columns reordered: column `j` of the result is column `perm[j]`.
    pub fn permute_cols(&self, perm: &[usize]) -> Table {
        Table {
            headers: perm.iter().map(|&j| self.headers[j].clone()).collect(),
            rows: self
                .rows
                .iter()
                .map(|r| perm.iter().map(|&j| r[j].clone()).collect())
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TableFormat {
    Csv,
    JsonRows,
}

impl FromStr for TableFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(TableFormat::Csv),
            "json" | "json-rows" => Ok(TableFormat::JsonRows),
            other => Err(Error::Config(format!("unknown table format {other:?}"))),
        }
    }
}

impl fmt::Display for TableFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TableFormat::Csv => "csv",
            TableFormat::JsonRows => "json-rows",
        })
    }
}

pub fn parse_table(raw: &[u8], format: TableFormat) -> Result<Table> {
    let text = std::str::from_utf8(raw).map_err(|e| Error::Decode(e.to_string()))?;
    match format {
        TableFormat::Csv => parse_csv(text),
        TableFormat::JsonRows => parse_json_rows(text),
    }
}

fn parse_csv(text: &str) -> Result<Table> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut records = reader.records();
    let headers: Vec<String> = match records.next() {
        Some(rec) => rec
            .map_err(|e| Error::Decode(e.to_string()))?
            .iter()
            .map(str::to_string)
            .collect(),
        None => return Err(Error::EmptyHeader(0)),
    };
    let mut rows = Vec::new();
    for rec in records {
        let rec = rec.map_err(|e| Error::Decode(e.to_string()))?;
        rows.push(rec.iter().map(str::to_string).collect());
    }
    Table::new(headers, rows)
}

fn json_cell(v: &serde_json::Value) -> Result<String> {
    use serde_json::Value;
    match v {
        Value::String(s) => Ok(s.clone()),
        Value::Null => Ok(String::new()),
        Value::Bool(b) => Ok(b.to_string()),
        Value::Number(n) => Ok(n.to_string()),
        Value::Array(_) | Value::Object(_) => Err(Error::Decode("nested value in table cell".into())),
    }
}

fn parse_json_rows(text: &str) -> Result<Table> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Decode(e.to_string()))?;
    let items = value
        .as_array()
        .ok_or_else(|| Error::Decode("expected a JSON array of objects".into()))?;
    let objects = items
        .iter()
        .map(|v| {
            v.as_object()
                .ok_or_else(|| Error::Decode("array item is not an object".into()))
        })
        .collect::<Result<Vec<_>>>()?;
    let Some(first) = objects.first() else {
        return Err(Error::EmptyTable);
    };
    let headers: Vec<String> = first.keys().cloned().collect();
    let mut rows = Vec::with_capacity(objects.len());
    for (i, obj) in objects.iter().enumerate() {
        if obj.len() != headers.len() {
            return Err(Error::RaggedRow {
                row: i,
                expected: headers.len(),
                found: obj.len(),
            });
        }
        let mut row = Vec::with_capacity(headers.len());
        for h in &headers {
            match obj.get(h) {
                Some(v) => row.push(json_cell(v)?),
                None => {
                    return Err(Error::RaggedRow {
                        row: i,
                        expected: headers.len(),
                        found: obj.keys().filter(|k| headers.contains(k)).count(),
                    })
                }
            }
        }
        rows.push(row);
    }
    Table::new(headers, rows)
}
