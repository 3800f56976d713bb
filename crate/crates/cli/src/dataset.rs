//! Line-oriented dataset files.
//!
//! One sample per line, three tab-separated fields:
//!
//! ```text
//! copy	0 40 13 14 15 1 13 14 15	000000111
//! ```
//!
//! the category name, the token ids separated by single spaces, and one
//! `0`/`1` mask digit per token (`1` marks answer tokens that carry loss).
//! Blank lines and lines starting with `#` are skipped.

#![allow(clippy::tabs_in_doc_comments)]

use std::fmt::Write as _;
use std::path::Path;

use fedsplit_core::data::{Sample, TaskKind};

use crate::error::{CliError, Result};

pub fn format_sample(s: &Sample) -> String {
    let mut line = String::new();
    line.push_str(s.category.name());
    line.push('\t');
    for (i, t) in s.tokens.iter().enumerate() {
        if i > 0 {
            line.push(' ');
        }
        write!(line, "{t}").expect("string write");
    }
    line.push('\t');
    line.extend(s.gt_mask.iter().map(|&m| if m { '1' } else { '0' }));
    line
}

pub fn parse_sample(line: &str) -> std::result::Result<Sample, String> {
    let fields: Vec<&str> = line.split('\t').collect();
    let [cat, toks, mask] = fields[..] else {
        return Err(format!("expected 3 tab-separated fields, found {}", fields.len()));
    };
    let category = TaskKind::parse(cat).ok_or_else(|| format!("unknown category `{cat}`"))?;
    let tokens = toks
        .split(' ')
        .map(|t| t.parse::<u32>().map_err(|_| format!("bad token id `{t}`")))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let gt_mask = mask
        .chars()
        .map(|c| match c {
            '0' => Ok(false),
            '1' => Ok(true),
            _ => Err(format!("mask digit `{c}` is not 0 or 1")),
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let s = Sample {
        tokens,
        gt_mask,
        category,
    };
    if !s.is_well_formed() {
        return Err("mask must match the token count and mark a non-empty suffix".into());
    }
    Ok(s)
}

pub fn to_text(samples: &[Sample]) -> String {
    let mut out = String::from("# category\ttoken ids\tmask\n");
    for s in samples {
        out.push_str(&format_sample(s));
        out.push('\n');
    }
    out
}

pub fn write(path: &Path, samples: &[Sample]) -> Result<()> {
    std::fs::write(path, to_text(samples)).map_err(CliError::io(path))
}

pub fn read(path: &Path) -> Result<Vec<Sample>> {
    let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        out.push(parse_sample(line).map_err(|reason| CliError::Format {
            path: path.to_path_buf(),
            line: i + 1,
            reason,
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use fedsplit_core::data::{generate_mix, TaskMix, TaskParams};

    #[test]
    fn roundtrip() {
        let data = generate_mix(&TaskMix::uniform(&TaskKind::ALL), 20, 1, 0, 64, &TaskParams::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.txt");
        write(&p, &data).unwrap();
        assert_eq!(read(&p).unwrap(), data);
    }

    #[test]
    fn rejects_malformed_lines() {
        assert!(parse_sample("copy\t1 2 3").is_err());
        assert!(parse_sample("nope\t1 2 3\t001").is_err());
        assert!(parse_sample("copy\t1 2 3\t0012").is_err());
        assert!(parse_sample("copy\t1 2 3\t01").is_err());
        assert!(parse_sample("copy\t1 2 3\t000").is_err());
        assert!(parse_sample("copy\t1 2 3\t010").is_err());
        assert!(parse_sample("copy\t1 2 3\t011").is_ok());
    }
}
