//! Artifact writing: tables as CSV or JSON, JSON documents, and the run
//! manifest that lists every file a command produced.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::Value;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

/// Column-major description of a table with one header row.
#[derive(Clone, Debug, Default)]
pub struct Table {
    pub columns: Vec<&'static str>,
    pub rows: Vec<Vec<Cell>>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Cell {
    Int(i64),
    Float(f64),
    Text(String),
    Empty,
}

impl From<f64> for Cell {
    fn from(x: f64) -> Self {
        Cell::Float(x)
    }
}

impl From<usize> for Cell {
    fn from(x: usize) -> Self {
        Cell::Int(x as i64)
    }
}

impl From<u32> for Cell {
    fn from(x: u32) -> Self {
        Cell::Int(i64::from(x))
    }
}

impl From<&str> for Cell {
    fn from(x: &str) -> Self {
        Cell::Text(x.to_string())
    }
}

impl<T: Into<Cell>> From<Option<T>> for Cell {
    fn from(x: Option<T>) -> Self {
        x.map_or(Cell::Empty, Into::into)
    }
}

impl Cell {
    fn text(&self) -> String {
        match self {
            Cell::Int(i) => i.to_string(),
            // shortest round-trip representation, '.' decimal, exponent for
            // very large or small magnitudes
            Cell::Float(x) => format!("{x:?}"),
            Cell::Text(s) => s.clone(),
            Cell::Empty => String::new(),
        }
    }

    fn json(&self) -> Value {
        match self {
            Cell::Int(i) => Value::from(*i),
            Cell::Float(x) => serde_json::Number::from_f64(*x).map_or(Value::Null, Value::Number),
            Cell::Text(s) => Value::from(s.as_str()),
            Cell::Empty => Value::Null,
        }
    }
}

impl Table {
    pub fn new(columns: Vec<&'static str>) -> Self {
        Self {
            columns,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        w.write_record(&self.columns)?;
        for row in &self.rows {
            w.write_record(row.iter().map(Cell::text))?;
        }
        w.into_inner().context("flushing CSV buffer")
    }

    pub fn to_json(&self) -> Value {
        Value::Array(
            self.rows
                .iter()
                .map(|row| {
                    Value::Object(
                        self.columns
                            .iter()
                            .zip(row)
                            .map(|(c, v)| (c.to_string(), v.json()))
                            .collect(),
                    )
                })
                .collect(),
        )
    }
}

/// Output directory that records what was written into it.
pub struct Artifacts {
    dir: PathBuf,
    format: Format,
    written: Vec<String>,
}

impl Artifacts {
    pub fn new(dir: &Path, format: Format) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            format,
            written: Vec::new(),
        })
    }

    pub fn format(&self) -> Format {
        self.format
    }

    fn write(&mut self, name: String, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.dir.join(&name);
        fs::write(&path, bytes).with_context(|| format!("cannot write {}", path.display()))?;
        self.written.push(name);
        Ok(path)
    }

    /// Writes `<stem>.csv` or `<stem>.json` depending on the format.
    pub fn table(&mut self, stem: &str, table: &Table) -> Result<PathBuf> {
        match self.format {
            Format::Csv => self.write(format!("{stem}.csv"), &table.to_csv()?),
            Format::Json => self.write(format!("{stem}.json"), &json_bytes(&table.to_json())?),
        }
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        let bytes = json_bytes(value)?;
        self.write(name.to_string(), &bytes)
    }

    /// Writes `manifest.json` listing every artifact written so far.
    pub fn finish(self, mut manifest: RunManifest) -> Result<PathBuf> {
        manifest.outputs = self.written.clone();
        let path = self.dir.join("manifest.json");
        fs::write(&path, json_bytes(&manifest)?)
            .with_context(|| format!("cannot write {}", path.display()))?;
        Ok(path)
    }
}

fn json_bytes<T: Serialize + ?Sized>(value: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(bytes)
}

#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seed: Option<u64>,
    pub tool_version: String,
    pub timestamp: String,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, config_hash: String, seed: Option<u64>) -> Self {
        Self {
            command: command.to_string(),
            config_hash,
            seed,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            outputs: Vec::new(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_uses_lf_and_round_trip_floats() {
        let mut t = Table::new(vec!["x", "label", "missing"]);
        t.push(vec![0.1.into(), "a,b".into(), Cell::Empty]);
        t.push(vec![1e-20.into(), 3usize.into(), None::<f64>.into()]);
        let text = String::from_utf8(t.to_csv().unwrap()).unwrap();
        assert_eq!(text, "x,label,missing\n0.1,\"a,b\",\n1e-20,3,\n");
        assert!(!text.contains('\r'));
        let json = t.to_json();
        assert_eq!(json[0]["x"], 0.1);
        assert!(json[1]["missing"].is_null());
    }

    #[test]
    fn manifest_lists_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = Artifacts::new(dir.path(), Format::Json).unwrap();
        let mut t = Table::new(vec!["n"]);
        t.push(vec![1usize.into()]);
        a.table("counts", &t).unwrap();
        a.json("summary.json", &serde_json::json!({"k": 1}))
            .unwrap();
        let path = a
            .finish(RunManifest::new("test", "abc".into(), Some(3)))
            .unwrap();
        let m: Value = serde_json::from_slice(&fs::read(path).unwrap()).unwrap();
        assert_eq!(
            m["outputs"],
            serde_json::json!(["counts.json", "summary.json"])
        );
        assert_eq!(m["seed"], 3);
    }
}
