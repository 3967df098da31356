//! CSV tables in and out. Floats are written in Rust's shortest round-trip
//! form, so every table reads back to the exact values written.

use std::fs;
use std::path::{Path, PathBuf};

use vbgp_core::vb::Checkpoint;
use vbgp_core::{Observations, PathBundle};

use crate::CliError;

fn io_error(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

pub fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io_error(dir, e))
}

/// A header plus string rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Table {
            header: header.iter().map(|h| h.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push<I, S>(&mut self, row: I)
    where
        I: IntoIterator<Item = S>,
        S: ToString,
    {
        self.rows.push(row.into_iter().map(|v| v.to_string()).collect());
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_path(path)
            .map_err(|e| io_error(path, e))?;
        w.write_record(&self.header).map_err(|e| io_error(path, e))?;
        for row in &self.rows {
            w.write_record(row).map_err(|e| io_error(path, e))?;
        }
        w.flush().map_err(|e| io_error(path, e))
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let mut r = csv::Reader::from_path(path).map_err(|e| io_error(path, e))?;
        let header = r
            .headers()
            .map_err(|e| io_error(path, e))?
            .iter()
            .map(str::to_string)
            .collect();
        let mut rows = Vec::new();
        for rec in r.records() {
            rows.push(rec.map_err(|e| io_error(path, e))?.iter().map(str::to_string).collect());
        }
        Ok(Table { header, rows })
    }

    /// Parses column `name` as `f64`.
    pub fn column(&self, name: &str) -> Result<Vec<f64>, CliError> {
        let i = self
            .header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::Io(format!("missing column {name:?}")))?;
        self.rows
            .iter()
            .enumerate()
            .map(|(r, row)| {
                row[i]
                    .parse()
                    .map_err(|_| CliError::Io(format!("row {}: column {name:?} is not a number: {:?}", r + 1, row[i])))
            })
            .collect()
    }

    fn expect_header(&self, path: &Path, expected: &[&str]) -> Result<(), CliError> {
        if self.header != expected {
            return Err(io_error(
                path,
                format!("expected columns {expected:?}, found {:?}", self.header),
            ));
        }
        Ok(())
    }
}

pub fn write_observations(path: &Path, obs: &Observations) -> Result<(), CliError> {
    let mut t = Table::new(&["t", "y"]);
    for (tau, y) in obs.times().iter().zip(obs.values()) {
        t.push([tau, y]);
    }
    t.write(path)
}

pub fn read_observations(path: &Path) -> Result<Observations, CliError> {
    let t = Table::read(path)?;
    t.expect_header(path, &["t", "y"])?;
    Ok(Observations::new(t.column("t")?, t.column("y")?)?)
}

/// Long format: one row per (path, grid point), projected state only.
pub fn write_paths(path: &Path, bundle: &PathBundle) -> Result<(), CliError> {
    let mut t = Table::new(&["path_id", "t", "value"]);
    let times = bundle.grid().points();
    for i in 0..bundle.n_paths() {
        for (k, tk) in times.iter().enumerate() {
            t.push([i.to_string(), tk.to_string(), bundle.value(i, k, 0).to_string()]);
        }
    }
    t.write(path)
}

/// Paths read back as (shared time grid, one vector per path).
#[derive(Debug, Clone, PartialEq)]
pub struct PathTable {
    pub times: Vec<f64>,
    pub paths: Vec<Vec<f64>>,
}

pub fn read_paths(path: &Path) -> Result<PathTable, CliError> {
    let t = Table::read(path)?;
    t.expect_header(path, &["path_id", "t", "value"])?;
    let ids = t.column("path_id")?;
    let times = t.column("t")?;
    let values = t.column("value")?;
    let mut out = PathTable {
        times: Vec::new(),
        paths: Vec::new(),
    };
    for ((id, tk), v) in ids.into_iter().zip(times).zip(values) {
        let id = id as usize;
        if id == out.paths.len() {
            out.paths.push(Vec::new());
        } else if id + 1 != out.paths.len() {
            return Err(io_error(
                path,
                format!("path ids must be contiguous from 0, found {id}"),
            ));
        }
        let k = out.paths[id].len();
        if id == 0 {
            out.times.push(tk);
        } else if out.times.get(k) != Some(&tk) {
            return Err(io_error(path, format!("path {id} is not on the time grid of path 0")));
        }
        out.paths[id].push(v);
    }
    if out.paths.iter().any(|p| p.len() != out.times.len()) {
        return Err(io_error(path, "paths have different lengths"));
    }
    Ok(out)
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), CliError> {
    fs::write(path, ckpt.to_text()).map_err(|e| io_error(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    Checkpoint::from_text(&text).map_err(|e| io_error(path, e))
}

pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch_{epoch:06}.ckpt"))
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}
