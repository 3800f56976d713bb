//! Line-delimited JSON records.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{CliError, Result};

pub fn append<R: Serialize>(path: &Path, record: &R) -> Result<()> {
    let mut line = serde_json::to_string(record).expect("record serializes");
    line.push('\n');
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(CliError::io(path))?;
    f.write_all(line.as_bytes()).map_err(CliError::io(path))
}

pub fn read<R: DeserializeOwned>(path: &Path) -> Result<Vec<R>> {
    let text = fs::read_to_string(path).map_err(CliError::io(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| CliError::Format {
                path: path.to_path_buf(),
                line: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}

/// Keeps the first `n` lines, dropping records a resumed run will redo.
pub fn truncate(path: &Path, n: usize) -> Result<()> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
        Err(e) => {
            return Err(CliError::Io {
                path: path.to_path_buf(),
                source: e,
            })
        }
    };
    let kept: String = text.split_inclusive('\n').take(n).collect();
    fs::write(path, kept).map_err(CliError::io(path))
}
