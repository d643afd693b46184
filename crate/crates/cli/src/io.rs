//! File formats: datasets, model snapshots and plot-ready tables.
//!
//! Every file is written whole to a temporary sibling and renamed into place.
//! Floats use Rust's shortest round-trip representation, so reading a file
//! back recovers the exact values.

use std::io::Write;
use std::path::Path;

use gpssm::elbo::ElboTerms;
use gpssm::model::{GpssmModel, Sequence};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const SNAPSHOT_VERSION: u32 = 1;

pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| CliError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| CliError::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| CliError::io(path, e))?;
    tmp.persist(path).map_err(|e| CliError::io(path, e.error))?;
    Ok(())
}

/// A delimited table held in memory until written.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Self { header: header.into_iter().map(Into::into).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let fail = |e: csv::Error| CliError::Io(format!("encoding table: {e}"));
        w.write_record(&self.header).map_err(fail)?;
        for r in &self.rows {
            w.write_record(r).map_err(fail)?;
        }
        w.into_inner().map_err(|e| CliError::Io(format!("encoding table: {e}")))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| CliError::io(path, e))?;
        let header = r.headers().map_err(|e| CliError::io(path, e))?.iter().map(str::to_string).collect();
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| CliError::io(path, e))?;
            rows.push(rec.iter().map(str::to_string).collect());
        }
        Ok(Self { header, rows })
    }
}

/// Observations with optional controls and true latent states.
///
/// Columns: `time`, `y_1..y_P`, then optionally `u_1..` and `x_1..`. Missing
/// observations are `NaN` (an empty cell reads as `NaN` too).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub time: Vec<f64>,
    pub observations: DMatrix<f64>,
    pub controls: Option<DMatrix<f64>>,
    pub latent: Option<DMatrix<f64>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.time.len()
    }

    pub fn is_empty(&self) -> bool {
        self.time.is_empty()
    }

    pub fn sequence(&self) -> Result<Sequence> {
        Ok(Sequence::new(self.observations.clone(), self.controls.clone())?)
    }

    pub fn to_table(&self) -> Table {
        let p = self.observations.ncols();
        let du = self.controls.as_ref().map_or(0, |u| u.ncols());
        let dx = self.latent.as_ref().map_or(0, |x| x.ncols());
        let mut header = vec!["time".to_string()];
        header.extend((1..=p).map(|i| format!("y_{i}")));
        header.extend((1..=du).map(|i| format!("u_{i}")));
        header.extend((1..=dx).map(|i| format!("x_{i}")));
        let mut t = Table::new(header);
        for r in 0..self.len() {
            let mut row = vec![fmt_f64(self.time[r])];
            row.extend(self.observations.row(r).iter().map(|v| fmt_f64(*v)));
            if let Some(u) = &self.controls {
                row.extend(u.row(r).iter().map(|v| fmt_f64(*v)));
            }
            if let Some(x) = &self.latent {
                row.extend(x.row(r).iter().map(|v| fmt_f64(*v)));
            }
            t.push(row);
        }
        t
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.to_table().write(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let t = Table::read(path)?;
        Self::from_table(&t).map_err(|e| match e {
            CliError::Io(m) => CliError::Io(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn from_table(t: &Table) -> Result<Self> {
        let bad = |m: String| CliError::Io(format!("malformed dataset: {m}"));
        if t.header.first().map(String::as_str) != Some("time") {
            return Err(bad("first column must be 'time'".into()));
        }
        let mut cols: [Vec<usize>; 3] = Default::default();
        for (j, name) in t.header.iter().enumerate().skip(1) {
            let (kind, idx) = name.split_once('_').ok_or_else(|| bad(format!("unexpected column '{name}'")))?;
            let slot = match kind {
                "y" => 0,
                "u" => 1,
                "x" => 2,
                _ => return Err(bad(format!("unexpected column '{name}'"))),
            };
            if idx.parse::<usize>().ok() != Some(cols[slot].len() + 1) {
                return Err(bad(format!("column '{name}' out of order")));
            }
            cols[slot].push(j);
        }
        if cols[0].is_empty() {
            return Err(bad("no observation columns".into()));
        }
        let n = t.rows.len();
        let cell = |r: usize, j: usize| -> Result<f64> {
            let s = t.rows[r].get(j).map(|s| s.trim()).ok_or_else(|| bad(format!("row {} is short", r + 1)))?;
            if s.is_empty() {
                return Ok(f64::NAN);
            }
            s.parse().map_err(|_| bad(format!("row {}: '{s}' is not a number", r + 1)))
        };
        let mut time = Vec::with_capacity(n);
        for r in 0..n {
            if t.rows[r].len() != t.header.len() {
                return Err(bad(format!("row {} has {} fields, expected {}", r + 1, t.rows[r].len(), t.header.len())));
            }
            time.push(cell(r, 0)?);
        }
        let block = |idx: &[usize]| -> Result<Option<DMatrix<f64>>> {
            if idx.is_empty() {
                return Ok(None);
            }
            let mut m = DMatrix::zeros(n, idx.len());
            for r in 0..n {
                for (k, &j) in idx.iter().enumerate() {
                    m[(r, k)] = cell(r, j)?;
                }
            }
            Ok(Some(m))
        };
        let observations = block(&cols[0])?.expect("checked non-empty");
        let controls = block(&cols[1])?;
        if controls.as_ref().is_some_and(|u| u.iter().any(|v| !v.is_finite())) {
            return Err(bad("controls must be finite".into()));
        }
        Ok(Self { time, observations, controls, latent: block(&cols[2])? })
    }
}

/// Summary of the training run stored with a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingInfo {
    pub elbo: f64,
    pub terms: ElboTerms,
    pub iterations: usize,
    pub converged: bool,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Snapshot {
    pub version: u32,
    pub model: GpssmModel,
    pub training: TrainingInfo,
}

impl Snapshot {
    pub fn new(model: GpssmModel, training: TrainingInfo) -> Self {
        Self { version: SNAPSHOT_VERSION, model, training }
    }

    pub fn encode(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self).map_err(|e| CliError::Io(format!("encoding snapshot: {e}")))?;
        s.push('\n');
        Ok(s)
    }

    pub fn decode(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Version {
            version: u32,
        }
        let v: Version =
            serde_json::from_str(text).map_err(|e| CliError::Io(format!("snapshot has no readable version: {e}")))?;
        if v.version != SNAPSHOT_VERSION {
            return Err(CliError::Io(format!(
                "snapshot version {} is not supported (expected {SNAPSHOT_VERSION})",
                v.version
            )));
        }
        serde_json::from_str(text).map_err(|e| CliError::Io(format!("invalid snapshot: {e}")))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.encode()?.as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::decode(&text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
    }
}
