//! Run directories, atomic artifact writes, CSV helpers and the manifest.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{LabError, LabResult};

/// A fresh output directory. Artifacts are written to a temporary file in
/// the same directory and renamed into place.
#[derive(Debug)]
pub struct OutputDir {
    root: PathBuf,
    artifacts: Vec<String>,
}

impl OutputDir {
    /// Creates `root`; an existing non-empty directory is refused.
    pub fn create(root: &Path) -> LabResult<Self> {
        if root.exists() {
            let mut entries = std::fs::read_dir(root).map_err(|e| LabError::io(root, e))?;
            if entries.next().is_some() {
                return Err(LabError::OutputExists(root.to_path_buf()));
            }
        }
        std::fs::create_dir_all(root).map_err(|e| LabError::io(root, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            artifacts: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn artifacts(&self) -> &[String] {
        &self.artifacts
    }

    /// Writes `bytes` to `relative` (subdirectories are created).
    pub fn write(&mut self, relative: &str, bytes: &[u8]) -> LabResult<PathBuf> {
        let path = self.root.join(relative);
        let parent = path.parent().unwrap_or(&self.root).to_path_buf();
        std::fs::create_dir_all(&parent).map_err(|e| LabError::io(&parent, e))?;
        let mut tmp = tempfile::NamedTempFile::new_in(&parent).map_err(|e| LabError::io(&parent, e))?;
        tmp.write_all(bytes).map_err(|e| LabError::io(tmp.path(), e))?;
        tmp.persist(&path).map_err(|e| LabError::io(&path, e.error))?;
        self.artifacts.push(relative.to_string());
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, relative: &str, value: &T) -> LabResult<PathBuf> {
        let mut text = serde_json::to_string_pretty(value).expect("artifact serialises");
        text.push('\n');
        self.write(relative, text.as_bytes())
    }

    pub fn write_csv(&mut self, relative: &str, table: &CsvTable) -> LabResult<PathBuf> {
        let bytes = table.to_bytes();
        self.write(relative, &bytes)
    }

    /// Writes `manifest.json`, checking that every listed artifact exists.
    pub fn finish(mut self, command: &str, config_hash: String, seed: u64, started: u64) -> LabResult<RunManifest> {
        let manifest = RunManifest {
            command: command.to_string(),
            config_hash,
            seed,
            artifacts: self.artifacts.clone(),
            started_unix: started,
            finished_unix: unix_now(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
        };
        for a in &manifest.artifacts {
            if !self.root.join(a).is_file() {
                return Err(LabError::Missing(format!("artifact {a} vanished before the manifest was written")));
            }
        }
        self.write_json("manifest.json", &manifest)?;
        Ok(manifest)
    }
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    /// Paths relative to the run directory.
    pub artifacts: Vec<String>,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub code_version: String,
}

/// A header plus rows of already formatted cells.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Self {
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push_numbers(&mut self, values: &[f64]) {
        self.rows.push(values.iter().map(|&v| fmt_num(v)).collect());
    }

    pub fn push(&mut self, cells: Vec<String>) {
        self.rows.push(cells);
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header).expect("in-memory write");
        for row in &self.rows {
            w.write_record(row).expect("in-memory write");
        }
        w.into_inner().expect("in-memory flush")
    }
}

/// Shortest round-trip decimal form; integers print without a fraction.
pub fn fmt_num(v: f64) -> String {
    format!("{v}")
}

/// Numeric columns read back from a CSV file.
#[derive(Debug, Clone, PartialEq)]
pub struct NumericCsv {
    pub header: Vec<String>,
    pub columns: Vec<Vec<f64>>,
}

impl NumericCsv {
    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.header.iter().position(|h| h == name).map(|i| &self.columns[i][..])
    }

    pub fn len(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Reads a CSV whose cells are all numbers. Errors carry the file line.
pub fn read_numeric_csv(path: &Path) -> LabResult<NumericCsv> {
    let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
    parse_numeric_csv(&text, path)
}

pub fn parse_numeric_csv(text: &str, origin: &Path) -> LabResult<NumericCsv> {
    let err = |line: u64, message: String| LabError::Parse {
        path: origin.to_path_buf(),
        message: format!("line {line}: {message}"),
    };
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| err(1, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.is_empty() || header.iter().all(|h| h.is_empty()) {
        return Err(err(1, "empty CSV: no header row".into()));
    }
    let mut columns = vec![Vec::new(); header.len()];
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        for (i, cell) in record.iter().enumerate() {
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| err(line, format!("column '{}': '{cell}' is not a number", header[i])))?;
            columns[i].push(v);
        }
    }
    if columns[0].is_empty() {
        return Err(err(2, "CSV has a header but no data rows".into()));
    }
    Ok(NumericCsv { header, columns })
}
