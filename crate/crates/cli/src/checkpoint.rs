//! Self-verifying tensor files.
//!
//! Layout: a magic line, the header length in bytes on its own line, a JSON
//! header, then the payload of little-endian `f32` values. The header lists
//! every tensor's name, shape and offset together with the SHA-256 of the
//! payload, which is checked on every read.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use fedsplit_core::compute::Array;
use fedsplit_core::model::{LoraSet, TransformerStack};
use fedsplit_core::optim::{OptimState, Optimizer};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const MAGIC: &str = "FEDSPLIT-CKPT 1";

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub round: usize,
    pub meta: serde_json::Value,
    pub tensors: Vec<Tensor>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    round: usize,
    dtype: String,
    meta: serde_json::Value,
    tensors: Vec<Entry>,
    payload_bytes: usize,
    payload_sha256: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    pub fn new(kind: &str, round: usize) -> Self {
        Checkpoint {
            kind: kind.to_string(),
            round,
            meta: serde_json::Value::Null,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, array: &Array<f32>) {
        self.tensors.push(Tensor {
            name: name.into(),
            shape: array.shape().to_vec(),
            data: array.data().to_vec(),
        });
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn array(&self, name: &str) -> Option<Array<f32>> {
        self.get(name)
            .map(|t| Array::new(t.shape.clone(), t.data.clone()).expect("shape checked on read"))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for t in &self.tensors {
            entries.push(Entry {
                name: t.name.clone(),
                shape: t.shape.clone(),
                offset: payload.len(),
                len: t.data.len(),
            });
            for x in &t.data {
                payload.extend_from_slice(&x.to_le_bytes());
            }
        }
        let header = Header {
            kind: self.kind.clone(),
            round: self.round,
            dtype: "f32".into(),
            meta: self.meta.clone(),
            tensors: entries,
            payload_bytes: payload.len(),
            payload_sha256: sha256_hex(&payload),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = format!("{MAGIC}\n{}\n", header.len()).into_bytes();
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: String| CliError::Integrity {
            path: path.to_path_buf(),
            reason,
        };
        let mut lines = bytes.splitn(3, |&b| b == b'\n');
        if lines.next() != Some(MAGIC.as_bytes()) {
            return Err(bad("missing magic line".into()));
        }
        let len: usize = lines
            .next()
            .and_then(|l| std::str::from_utf8(l).ok())
            .and_then(|l| l.parse().ok())
            .ok_or_else(|| bad("unreadable header length".into()))?;
        let rest = lines.next().unwrap_or(&[]);
        if rest.len() < len {
            return Err(bad("truncated header".into()));
        }
        let (head, payload) = rest.split_at(len);
        let header: Header = serde_json::from_slice(head).map_err(|e| bad(format!("header: {e}")))?;
        if header.dtype != "f32" {
            return Err(bad(format!("unsupported dtype {}", header.dtype)));
        }
        if payload.len() != header.payload_bytes {
            return Err(bad(format!(
                "payload is {} bytes, header says {}",
                payload.len(),
                header.payload_bytes
            )));
        }
        if sha256_hex(payload) != header.payload_sha256 {
            return Err(bad("payload checksum mismatch".into()));
        }
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let end = e.offset + 4 * e.len;
            if end > payload.len() || e.shape.iter().product::<usize>() != e.len {
                return Err(bad(format!("tensor {} has an inconsistent extent", e.name)));
            }
            let data = payload[e.offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push(Tensor {
                name: e.name,
                shape: e.shape,
                data,
            });
        }
        Ok(Checkpoint {
            kind: header.kind,
            round: header.round,
            meta: header.meta,
            tensors,
        })
    }

    /// Writes through a temporary file so a crash never leaves half a file
    /// under the final name.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp).map_err(CliError::io(&tmp))?;
            f.write_all(&self.to_bytes()).map_err(CliError::io(&tmp))?;
            f.sync_all().map_err(CliError::io(&tmp))?;
        }
        fs::rename(&tmp, path).map_err(CliError::io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(CliError::io(path))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn expect_kind(&self, kind: &str, path: &Path) -> Result<()> {
        if self.kind != kind {
            return Err(CliError::Integrity {
                path: path.to_path_buf(),
                reason: format!("expected a {kind} checkpoint, found {}", self.kind),
            });
        }
        Ok(())
    }
}

fn lora_name(prefix: &str, layer: usize, proj: &str, factor: &str) -> String {
    format!("{prefix}.{layer}.{proj}.{factor}")
}

pub fn push_lora(ckpt: &mut Checkpoint, prefix: &str, set: &LoraSet<f32>) {
    for p in &set.pairs {
        ckpt.push(lora_name(prefix, p.layer, p.proj.name(), "a"), &p.a);
        ckpt.push(lora_name(prefix, p.layer, p.proj.name(), "b"), &p.b);
    }
}

/// Fills `template` (which fixes the structure) from `ckpt`.
pub fn read_lora(ckpt: &Checkpoint, prefix: &str, template: &mut LoraSet<f32>, path: &Path) -> Result<()> {
    for p in template.pairs.iter_mut() {
        for (factor, slot) in [("a", &mut p.a), ("b", &mut p.b)] {
            let name = lora_name(prefix, p.layer, p.proj.name(), factor);
            let a = ckpt.array(&name).ok_or_else(|| CliError::Integrity {
                path: path.to_path_buf(),
                reason: format!("missing tensor {name}"),
            })?;
            if a.shape() != slot.shape() {
                return Err(CliError::Integrity {
                    path: path.to_path_buf(),
                    reason: format!("tensor {name} has shape {:?}, expected {:?}", a.shape(), slot.shape()),
                });
            }
            *slot = a;
        }
    }
    Ok(())
}

pub fn push_base(ckpt: &mut Checkpoint, base: &TransformerStack<f32>) {
    for (name, a) in base.named_arrays() {
        ckpt.push(name, a);
    }
}

pub fn read_base(
    ckpt: &Checkpoint,
    config: &fedsplit_core::model::ModelConfig,
    path: &Path,
) -> Result<TransformerStack<f32>> {
    TransformerStack::from_named(config, |name| ckpt.array(name)).map_err(|e| CliError::Integrity {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

pub fn push_optimizer(ckpt: &mut Checkpoint, prefix: &str, opt: &Optimizer<f32>) {
    for (kind, bufs) in [("m", &opt.state.m), ("v", &opt.state.v)] {
        for (i, b) in bufs.iter().enumerate() {
            let a = Array::new(vec![b.len()], b.clone()).expect("flat");
            ckpt.push(format!("{prefix}.{kind}.{i}"), &a);
        }
    }
}

pub fn read_optimizer(ckpt: &Checkpoint, prefix: &str, step: u64, opt: &mut Optimizer<f32>) {
    let collect = |kind: &str| -> Vec<Vec<f32>> {
        (0..)
            .map_while(|i| ckpt.get(&format!("{prefix}.{kind}.{i}")).map(|t| t.data.clone()))
            .collect()
    };
    opt.state = OptimState {
        step,
        m: collect("m"),
        v: collect("v"),
    };
}

/// Periodic checkpoint file name for `round`.
pub fn round_file(dir: &Path, round: usize) -> PathBuf {
    dir.join(format!("round-{round:06}.ckpt"))
}

/// Periodic checkpoints in `dir`, oldest first.
pub fn periodic(dir: &Path) -> Result<Vec<(usize, PathBuf)>> {
    let mut out = Vec::new();
    let entries = match fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(out),
        Err(e) => {
            return Err(CliError::Io {
                path: dir.to_path_buf(),
                source: e,
            })
        }
    };
    for e in entries {
        let path = e.map_err(CliError::io(dir))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if let Some(r) = name.strip_prefix("round-").and_then(|s| s.strip_suffix(".ckpt")) {
            if let Ok(r) = r.parse() {
                out.push((r, path));
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Deletes all but the newest `keep` periodic checkpoints.
pub fn prune(dir: &Path, keep: usize) -> Result<()> {
    let all = periodic(dir)?;
    let n = all.len().saturating_sub(keep);
    for (_, p) in &all[..n] {
        fs::remove_file(p).map_err(CliError::io(p))?;
    }
    Ok(())
}
