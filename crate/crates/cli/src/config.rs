//! Run configuration: TOML file with dotted `--set key=value` overrides.

use std::path::{Path, PathBuf};

use fedsplit_core::align::AlignConfig;
use fedsplit_core::data::{PartitionScheme, TaskKind, TaskMix, TaskParams};
use fedsplit_core::fedcore::{Mode, PretrainConfig, RoundConfig};
use fedsplit_core::model::{extract_layers, KeepRatio, LoraConfig, ModelConfig, SplitPlan};
use fedsplit_core::optim::OptimConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// Environment variable naming the directory relative output paths live in.
pub const OUTPUT_ROOT_ENV: &str = "FEDSPLIT_OUT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct RunConfig {
    /// Seeds base weights, data, LoRA init and every batch draw.
    pub seed: u64,
    pub model: ModelSection,
    pub split: SplitSection,
    pub lora: LoraConfig,
    pub pretrain: PretrainConfig,
    pub align: AlignConfig,
    pub federation: FederationSection,
    pub data: DataSection,
    pub output: OutputSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            n_layers: 8,
            d_model: 64,
            n_heads: 4,
            d_ff: 192,
            vocab_size: 64,
            max_seq_len: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    /// Adapter layers s.
    pub adapter_size: usize,
    /// Fraction κ of non-adapter layers kept in the emulator.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub keep_ratio: Option<KeepRatio>,
    /// Alternative to `keep_ratio`: layer dropout β, κ = 1 − β.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dropout: Option<f64>,
}

impl Default for SplitSection {
    fn default() -> Self {
        SplitSection {
            adapter_size: 2,
            keep_ratio: None,
            dropout: None,
        }
    }
}

impl SplitSection {
    pub fn keep(&self) -> Result<KeepRatio> {
        match (self.keep_ratio, self.dropout) {
            (Some(_), Some(_)) => Err(CliError::Validation(
                "set split.keep_ratio or split.dropout, not both".into(),
            )),
            (Some(k), None) => Ok(k),
            (None, Some(beta)) => Ok(KeepRatio::from_dropout(&beta.to_string())?),
            (None, None) => Ok(KeepRatio::new(1, 2)?),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederationSection {
    pub mode: Mode,
    /// Number of clients M.
    pub clients: usize,
    pub local_steps: usize,
    pub batch_size: usize,
    pub rounds: usize,
    pub prox_eps: f64,
    pub optim: OptimConfig,
}

impl Default for FederationSection {
    fn default() -> Self {
        let r = RoundConfig::default();
        FederationSection {
            mode: r.mode,
            clients: 4,
            local_steps: r.local_steps,
            batch_size: r.batch_size,
            rounds: r.rounds,
            prox_eps: r.prox_eps,
            optim: r.optim,
        }
    }
}

impl FederationSection {
    pub fn round_config(&self) -> RoundConfig {
        RoundConfig {
            local_steps: self.local_steps,
            batch_size: self.batch_size,
            rounds: self.rounds,
            prox_eps: self.prox_eps,
            optim: self.optim.clone(),
            mode: self.mode,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub client_tasks: Vec<TaskKind>,
    pub public_tasks: Vec<TaskKind>,
    /// Draw the public set from the client mixture instead.
    pub public_overlap: bool,
    pub pretrain_tasks: Vec<TaskKind>,
    pub partition: PartitionScheme,
    pub train_size: usize,
    pub public_size: usize,
    pub eval_size: usize,
    pub pretrain_size: usize,
    pub params: TaskParams,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            client_tasks: TaskKind::ALL.to_vec(),
            public_tasks: vec![TaskKind::Copy, TaskKind::Reverse],
            public_overlap: false,
            pretrain_tasks: TaskKind::ALL.to_vec(),
            partition: PartitionScheme::ByCategory,
            train_size: 800,
            public_size: 500,
            eval_size: 200,
            pretrain_size: 2000,
            params: TaskParams {
                min_len: 3,
                max_len: 5,
                ..TaskParams::default()
            },
        }
    }
}

impl DataSection {
    pub fn client_mix(&self) -> TaskMix {
        TaskMix::uniform(&self.client_tasks)
    }

    pub fn public_mix(&self) -> TaskMix {
        if self.public_overlap {
            self.client_mix()
        } else {
            TaskMix::uniform(&self.public_tasks)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    /// Run directory; relative paths resolve against `$FEDSPLIT_OUT`.
    pub dir: PathBuf,
    pub checkpoint_every: usize,
    pub keep_checkpoints: usize,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: PathBuf::from("run"),
            checkpoint_every: 10,
            keep_checkpoints: 3,
        }
    }
}

impl RunConfig {
    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            n_layers: m.n_layers,
            d_model: m.d_model,
            n_heads: m.n_heads,
            d_ff: m.d_ff,
            vocab_size: m.vocab_size,
            max_seq_len: m.max_seq_len,
            rng_seed: self.seed,
        }
    }

    pub fn plan(&self) -> Result<SplitPlan> {
        Ok(extract_layers(
            self.model.n_layers,
            self.split.adapter_size,
            self.split.keep()?,
            self.federation.mode.placement(),
        )?)
    }

    /// Checks every section; the first problem found is reported.
    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.plan()?;
        if self.lora.rank == 0 {
            return Err(CliError::Validation("lora.rank must be >= 1".into()));
        }
        if self.lora.targets.is_empty() {
            return Err(CliError::Validation("lora.targets must not be empty".into()));
        }
        self.align.validate()?;
        self.federation.round_config().validate()?;
        let f = &self.federation;
        if f.clients == 0 {
            return Err(CliError::Validation("federation.clients must be >= 1".into()));
        }
        if f.mode == Mode::OffsiteSingle && f.clients != 1 {
            return Err(CliError::Validation(
                "offsite_single mode needs federation.clients = 1".into(),
            ));
        }
        let d = &self.data;
        d.params.validate()?;
        for (name, list) in [("client_tasks", &d.client_tasks), ("public_tasks", &d.public_tasks)] {
            if list.is_empty() {
                return Err(CliError::Validation(format!("data.{name} must not be empty")));
            }
        }
        if d.partition == PartitionScheme::ByCategory && f.clients > d.client_tasks.len() {
            return Err(CliError::Validation(format!(
                "by_category partition needs federation.clients ({}) <= number of client tasks ({})",
                f.clients,
                d.client_tasks.len()
            )));
        }
        for (name, n) in [
            ("train_size", d.train_size),
            ("public_size", d.public_size),
            ("eval_size", d.eval_size),
        ] {
            if n == 0 {
                return Err(CliError::Validation(format!("data.{name} must be >= 1")));
            }
        }
        if self.pretrain.steps > 0 && (d.pretrain_size == 0 || d.pretrain_tasks.is_empty()) {
            return Err(CliError::Validation(
                "pretraining needs data.pretrain_size >= 1 and pretrain_tasks".into(),
            ));
        }
        if d.params.max_seq_len() > self.model.max_seq_len {
            return Err(CliError::Validation(format!(
                "task sequences reach {} tokens but model.max_seq_len is {}",
                d.params.max_seq_len(),
                self.model.max_seq_len
            )));
        }
        if self.output.checkpoint_every == 0 {
            return Err(CliError::Validation("output.checkpoint_every must be >= 1".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Run directory with `$FEDSPLIT_OUT` applied to relative paths.
    pub fn run_dir(&self) -> PathBuf {
        resolve_output(&self.output.dir)
    }
}

pub fn resolve_output(dir: &Path) -> PathBuf {
    if dir.is_absolute() {
        return dir.to_path_buf();
    }
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if !root.is_empty() => PathBuf::from(root).join(dir),
        _ => dir.to_path_buf(),
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies `a.b.c=value` to a TOML table. Values parse as TOML literals and
/// fall back to plain strings.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Validation(format!("override `{assignment}` is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(CliError::Validation(format!("override key `{key}` is malformed")));
    }
    let mut node = table;
    for part in &path[..path.len() - 1] {
        let entry = node
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Validation(format!("override `{key}`: `{part}` is not a table")))?;
    }
    node.insert(path[path.len() - 1].to_string(), parse_literal(raw.trim()));
    Ok(())
}

/// Defaults, then the file (if any), then overrides.
pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut table = match file {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(CliError::io(p))?;
            text.parse::<toml::Table>()
                .map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let cfg: RunConfig = table
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Validation(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}
