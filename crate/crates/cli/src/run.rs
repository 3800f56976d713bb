//! Subcommand implementations over a run directory.
//!
//! ```text
//! <run>/config.toml          resolved configuration
//! <run>/plan.txt             layer split
//! <run>/base.ckpt            pretrained base weights
//! <run>/pretrain.jsonl       base pretraining loss trace
//! <run>/prealign.jsonl       pre-alignment loss trace
//! <run>/metrics.jsonl        one record per round
//! <run>/timing.jsonl         wall time per round
//! <run>/data/*.txt           train / public / eval samples
//! <run>/checkpoints/         prealign, periodic and final server state
//! <run>/adapemu.ckpt         adapter + emulator LoRA
//! <run>/adapfu.ckpt          adapter LoRA for the original layers
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use fedsplit_core::costs::{cost_report, reference_grid, CostReport};
use fedsplit_core::data::{generate_mix, partition, public_dataset, PartitionSpec, Sample, TaskMix};
use fedsplit_core::fedcore::{
    evaluate, init_clients, init_server, pre_align, pretrain_base, resume_training, EvalReport, Federation, Observer,
    RoundConfig, RoundReport, ServerState,
};
use fedsplit_core::model::{assemble, inject_lora, Assembly, ModelConfig, SplitPlan, TransformerStack};
use fedsplit_core::rng::purpose;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint};
use crate::config::RunConfig;
use crate::dataset;
use crate::error::{CliError, Result};
use crate::metrics;
use crate::plot;

pub const CONFIG: &str = "config.toml";
pub const PLAN: &str = "plan.txt";
pub const BASE: &str = "base.ckpt";
pub const PRETRAIN_LOG: &str = "pretrain.jsonl";
pub const PREALIGN_LOG: &str = "prealign.jsonl";
pub const METRICS: &str = "metrics.jsonl";
pub const TIMING: &str = "timing.jsonl";
pub const DATA_DIR: &str = "data";
pub const CKPT_DIR: &str = "checkpoints";
pub const PREALIGN_CKPT: &str = "prealign.ckpt";
pub const FINAL_CKPT: &str = "final.ckpt";
pub const ADAPEMU: &str = "adapemu.ckpt";
pub const ADAPFU: &str = "adapfu.ckpt";

const EVAL_BATCH: usize = 50;

/// Generated datasets of a run.
#[derive(Clone, Debug)]
pub struct Datasets {
    pub train: Vec<Sample>,
    pub public: Vec<Sample>,
    pub eval: Vec<Sample>,
    pub pretrain: Vec<Sample>,
}

pub fn datasets(cfg: &RunConfig) -> Result<Datasets> {
    let d = &cfg.data;
    let v = cfg.model.vocab_size;
    let public = if d.public_overlap {
        generate_mix(&d.client_mix(), d.public_size, cfg.seed, purpose::PUBLIC, v, &d.params)?
    } else {
        public_dataset(&d.public_mix(), d.public_size, cfg.seed, v, &d.params)?
    };
    let pretrain = if d.pretrain_size > 0 && !d.pretrain_tasks.is_empty() {
        generate_mix(
            &TaskMix::uniform(&d.pretrain_tasks),
            d.pretrain_size,
            cfg.seed,
            purpose::PRETRAIN,
            v,
            &d.params,
        )?
    } else {
        Vec::new()
    };
    Ok(Datasets {
        train: generate_mix(&d.client_mix(), d.train_size, cfg.seed, 0, v, &d.params)?,
        public,
        eval: generate_mix(&d.client_mix(), d.eval_size, cfg.seed, purpose::EVAL, v, &d.params)?,
        pretrain,
    })
}

/// Random init followed by full-parameter pretraining.
pub fn pretrained_base(cfg: &RunConfig, data: &[Sample]) -> Result<(TransformerStack<f32>, Vec<f64>)> {
    let mut base = TransformerStack::init(&cfg.model_config())?;
    let trace = pretrain_base(&mut base, data, &cfg.pretrain, cfg.seed)?;
    Ok((base, trace))
}

/// Everything a run needs besides server state.
pub struct Prepared {
    pub dir: PathBuf,
    pub config: RunConfig,
    pub plan: SplitPlan,
    pub base: TransformerStack<f32>,
    pub data: Datasets,
    pub rounds: RoundConfig,
}

impl Prepared {
    pub fn federation(&self) -> Federation<'_, f32> {
        Federation {
            plan: &self.plan,
            base: &self.base,
            public: &self.data.public,
            align: &self.config.align,
            rounds: &self.rounds,
            seed: self.config.seed,
        }
    }
}

const RUN_FILES: [&str; 12] = [
    CONFIG,
    PLAN,
    BASE,
    PRETRAIN_LOG,
    PREALIGN_LOG,
    METRICS,
    TIMING,
    ADAPEMU,
    ADAPFU,
    "curves.tsv",
    "curves.svg",
    "eval.jsonl",
];

/// Removes the files this tool writes, leaving anything else alone.
fn clean(dir: &Path) -> Result<()> {
    for f in RUN_FILES {
        let p = dir.join(f);
        if p.exists() {
            fs::remove_file(&p).map_err(CliError::io(&p))?;
        }
    }
    for sub in [DATA_DIR, CKPT_DIR] {
        let p = dir.join(sub);
        if p.exists() {
            fs::remove_dir_all(&p).map_err(CliError::io(&p))?;
        }
    }
    Ok(())
}

/// Creates or reopens the run directory for `cfg`. An existing directory
/// must hold the same configuration unless `fresh` is set.
pub fn prepare(cfg: &RunConfig, fresh: bool) -> Result<Prepared> {
    cfg.validate()?;
    let dir = cfg.run_dir();
    fs::create_dir_all(&dir).map_err(CliError::io(&dir))?;
    let cfg_path = dir.join(CONFIG);
    let text = cfg.to_toml();
    if fresh {
        clean(&dir)?;
    } else if cfg_path.exists() {
        let old = fs::read_to_string(&cfg_path).map_err(CliError::io(&cfg_path))?;
        if old != text {
            return Err(CliError::Validation(format!(
                "{} holds a run with a different configuration; pass --fresh to start over",
                dir.display()
            )));
        }
    }
    fs::write(&cfg_path, &text).map_err(CliError::io(&cfg_path))?;
    let plan = cfg.plan()?;
    let plan_path = dir.join(PLAN);
    fs::write(&plan_path, plan.describe()).map_err(CliError::io(&plan_path))?;

    let data = datasets(cfg)?;
    let data_dir = dir.join(DATA_DIR);
    fs::create_dir_all(&data_dir).map_err(CliError::io(&data_dir))?;
    for (name, set) in [("train", &data.train), ("public", &data.public), ("eval", &data.eval)] {
        dataset::write(&data_dir.join(format!("{name}.txt")), set)?;
    }
    fs::create_dir_all(dir.join(CKPT_DIR)).map_err(CliError::io(dir.join(CKPT_DIR)))?;

    let base_path = dir.join(BASE);
    let base = if base_path.exists() {
        let ckpt = Checkpoint::load(&base_path)?;
        ckpt.expect_kind("base", &base_path)?;
        checkpoint::read_base(&ckpt, &cfg.model_config(), &base_path)?
    } else {
        let (base, trace) = pretrained_base(cfg, &data.pretrain)?;
        let mut ckpt = Checkpoint::new("base", 0);
        checkpoint::push_base(&mut ckpt, &base);
        ckpt.save(&base_path)?;
        let log = dir.join(PRETRAIN_LOG);
        if log.exists() {
            fs::remove_file(&log).map_err(CliError::io(&log))?;
        }
        metrics::append(&log, &LossTrace { losses: trace })?;
        base
    };
    Ok(Prepared {
        dir,
        rounds: cfg.federation.round_config(),
        config: cfg.clone(),
        plan,
        base,
        data,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub losses: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub round: usize,
    pub wall_seconds: f64,
}

#[derive(Serialize, Deserialize)]
struct StateMeta {
    align_opt_step: u64,
    adapter_layers: Vec<usize>,
    emulator_layers: Vec<usize>,
}

pub fn state_checkpoint(server: &ServerState<f32>, plan: &SplitPlan) -> Checkpoint {
    let mut c = Checkpoint::new("state", server.round);
    c.meta = serde_json::to_value(StateMeta {
        align_opt_step: server.align_optimizer.state.step,
        adapter_layers: plan.adapter(),
        emulator_layers: plan.emulator.clone(),
    })
    .expect("meta serializes");
    checkpoint::push_lora(&mut c, "adapter", &server.adapter);
    checkpoint::push_lora(&mut c, "emulator", &server.emulator);
    checkpoint::push_optimizer(&mut c, "align_opt", &server.align_optimizer);
    c
}

pub fn load_state(prep: &Prepared, path: &Path) -> Result<ServerState<f32>> {
    let ckpt = Checkpoint::load(path)?;
    ckpt.expect_kind("state", path)?;
    let meta: StateMeta = serde_json::from_value(ckpt.meta.clone()).map_err(|e| CliError::Integrity {
        path: path.to_path_buf(),
        reason: format!("metadata: {e}"),
    })?;
    let mut adapter = prep.plan.adapter();
    adapter.sort_unstable();
    let mut stored = meta.adapter_layers.clone();
    stored.sort_unstable();
    if stored != adapter || meta.emulator_layers != prep.plan.emulator {
        return Err(CliError::Integrity {
            path: path.to_path_buf(),
            reason: "layer split does not match the configuration".into(),
        });
    }
    let mut server = init_server(&prep.federation(), &prep.config.lora)?;
    checkpoint::read_lora(&ckpt, "adapter", &mut server.adapter, path)?;
    checkpoint::read_lora(&ckpt, "emulator", &mut server.emulator, path)?;
    checkpoint::read_optimizer(&ckpt, "align_opt", meta.align_opt_step, &mut server.align_optimizer);
    server.round = ckpt.round;
    Ok(server)
}

/// Newest saved state: the final checkpoint, a periodic one, or the
/// pre-alignment snapshot.
pub fn latest_state(dir: &Path) -> Result<Option<PathBuf>> {
    let ck = dir.join(CKPT_DIR);
    let fin = ck.join(FINAL_CKPT);
    if fin.exists() {
        return Ok(Some(fin));
    }
    if let Some((_, p)) = checkpoint::periodic(&ck)?.pop() {
        return Ok(Some(p));
    }
    let pre = ck.join(PREALIGN_CKPT);
    Ok(pre.exists().then_some(pre))
}

/// Pre-aligned server state, computed once and then reused.
fn prealigned(prep: &Prepared) -> Result<ServerState<f32>> {
    let path = prep.dir.join(CKPT_DIR).join(PREALIGN_CKPT);
    if path.exists() {
        return load_state(prep, &path);
    }
    let fed = prep.federation();
    let mut server = init_server(&fed, &prep.config.lora)?;
    let trace = pre_align(&fed, &mut server)?;
    let log = prep.dir.join(PREALIGN_LOG);
    if log.exists() {
        fs::remove_file(&log).map_err(CliError::io(&log))?;
    }
    metrics::append(&log, &LossTrace { losses: trace })?;
    state_checkpoint(&server, &prep.plan).save(&path)?;
    Ok(server)
}

pub fn prealign(cfg: &RunConfig, fresh: bool) -> Result<Prepared> {
    let prep = prepare(cfg, fresh)?;
    prealigned(&prep)?;
    Ok(prep)
}

struct RunObserver<'a> {
    dir: &'a Path,
    plan: &'a SplitPlan,
    every: usize,
    keep: usize,
    total: usize,
    tick: Instant,
    quiet: bool,
}

impl Observer<f32> for RunObserver<'_> {
    type Error = CliError;

    fn round_finished(&mut self, server: &ServerState<f32>, report: &RoundReport) -> Result<()> {
        metrics::append(&self.dir.join(METRICS), report)?;
        let wall = self.tick.elapsed().as_secs_f64();
        self.tick = Instant::now();
        metrics::append(
            &self.dir.join(TIMING),
            &Timing {
                round: report.round,
                wall_seconds: wall,
            },
        )?;
        if server.round.is_multiple_of(self.every) {
            let ck = self.dir.join(CKPT_DIR);
            state_checkpoint(server, self.plan).save(&checkpoint::round_file(&ck, server.round))?;
            checkpoint::prune(&ck, self.keep)?;
        }
        if !self.quiet {
            let n = report.client_losses.len().max(1) as f64;
            let mean = report.client_losses.iter().map(|c| c.loss).sum::<f64>() / n;
            eprintln!(
                "round {}/{} client_loss={mean:.4} adapter_norm={:.4} ({wall:.1}s)",
                server.round, self.total, report.adapter_norm
            );
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub dir: PathBuf,
    pub resumed_from: Option<usize>,
    pub rounds: usize,
}

/// Pretraining (once), pre-alignment (once), then the remaining rounds.
/// Restarts pick up from the newest checkpoint.
pub fn train(cfg: &RunConfig, fresh: bool, quiet: bool) -> Result<TrainSummary> {
    let prep = prepare(cfg, fresh)?;
    let (server, resumed_from) = match latest_state(&prep.dir)? {
        Some(p) => {
            let s = load_state(&prep, &p)?;
            let r = s.round;
            (s, Some(r))
        }
        None => (prealigned(&prep)?, None),
    };
    if server.round > prep.rounds.rounds {
        return Err(CliError::Validation(format!(
            "checkpoint is at round {} but the run has {} rounds",
            server.round, prep.rounds.rounds
        )));
    }
    metrics::truncate(&prep.dir.join(METRICS), server.round)?;
    metrics::truncate(&prep.dir.join(TIMING), server.round)?;
    let fed = prep.federation();
    let shards = partition(
        &prep.data.train,
        &PartitionSpec {
            scheme: cfg.data.partition,
            clients: cfg.federation.clients,
            seed: cfg.seed,
        },
    )?;
    let clients = init_clients(&fed, shards, &server)?;
    let mut obs = RunObserver {
        dir: &prep.dir,
        plan: &prep.plan,
        every: cfg.output.checkpoint_every,
        keep: cfg.output.keep_checkpoints,
        total: prep.rounds.rounds,
        tick: Instant::now(),
        quiet,
    };
    let out = resume_training(&fed, server, clients, &mut obs)?;
    let ck = prep.dir.join(CKPT_DIR);
    state_checkpoint(&out.server, &prep.plan).save(&ck.join(FINAL_CKPT))?;
    let mut emu = Checkpoint::new("adapemu", out.server.round);
    checkpoint::push_lora(&mut emu, "adapter", &out.server.adapter);
    checkpoint::push_lora(&mut emu, "emulator", &out.server.emulator);
    emu.save(&prep.dir.join(ADAPEMU))?;
    let mut fu = Checkpoint::new("adapfu", out.server.round);
    checkpoint::push_lora(&mut fu, "adapter", &out.server.adapter);
    fu.save(&prep.dir.join(ADAPFU))?;
    Ok(TrainSummary {
        dir: prep.dir.clone(),
        resumed_from,
        rounds: out.server.round,
    })
}

pub fn read_run_config(dir: &Path) -> Result<RunConfig> {
    let p = dir.join(CONFIG);
    let text = fs::read_to_string(&p).map_err(CliError::io(&p))?;
    let cfg: RunConfig = toml::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

fn load_base(dir: &Path, model: &ModelConfig) -> Result<TransformerStack<f32>> {
    let p = dir.join(BASE);
    let ckpt = Checkpoint::load(&p)?;
    ckpt.expect_kind("base", &p)?;
    checkpoint::read_base(&ckpt, model, &p)
}

/// Loss and exact match of one assembly. LoRA comes from `checkpoint` (a
/// server-state file) when given, else from the run's final artifact.
pub fn eval(dir: &Path, split: Assembly, checkpoint: Option<&Path>, data: Option<&Path>) -> Result<EvalReport> {
    let cfg = read_run_config(dir)?;
    let model = cfg.model_config();
    let plan = cfg.plan()?;
    let base = load_base(dir, &model)?;
    let mut adapter = inject_lora::<f32>(&model, &plan.adapter(), &cfg.lora, 0)?;
    let mut emulator = inject_lora::<f32>(&model, &plan.emulator, &cfg.lora, 0)?;
    let (path, want_emulator) = match (checkpoint, split) {
        (Some(p), _) => (p.to_path_buf(), true),
        (None, Assembly::AdapEmu) => (dir.join(ADAPEMU), true),
        (None, Assembly::AdapFu) => (dir.join(ADAPFU), false),
    };
    let ckpt = Checkpoint::load(&path)?;
    checkpoint::read_lora(&ckpt, "adapter", &mut adapter, &path)?;
    if want_emulator && split == Assembly::AdapEmu {
        checkpoint::read_lora(&ckpt, "emulator", &mut emulator, &path)?;
    }
    let samples = match data {
        Some(p) => dataset::read(p)?,
        None => {
            let p = dir.join(DATA_DIR).join("eval.txt");
            if p.exists() {
                dataset::read(&p)?
            } else {
                datasets(&cfg)?.eval
            }
        }
    };
    let emu_ref = (split == Assembly::AdapEmu).then_some(&emulator);
    let assembled = assemble(&plan, &base, &adapter, emu_ref, split)?;
    Ok(evaluate(&assembled, &samples, EVAL_BATCH)?)
}

/// The configured plan's costs, optionally followed by the reference grid.
pub fn cost(cfg: &RunConfig, reference: bool) -> Result<Vec<(String, CostReport)>> {
    let mut rows = vec![(
        "config".to_string(),
        cost_report(&cfg.plan()?, &cfg.model_config(), &cfg.lora, cfg.federation.mode),
    )];
    if reference {
        rows.extend(reference_grid()?);
    }
    Ok(rows)
}

pub fn cost_table(rows: &[(String, CostReport)]) -> String {
    let header = [
        "label",
        "method",
        "s",
        "keep",
        "adapter",
        "emulator",
        "trainable",
        "down_B",
        "up_B",
        "total_MB",
        "fwd_FLOP",
        "bwd_FLOP",
    ];
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|(l, r)| {
            vec![
                l.clone(),
                r.method.name().to_string(),
                r.adapter_size.to_string(),
                format!("{}", r.keep_ratio),
                r.adapter_layers.to_string(),
                r.emulator_layers.to_string(),
                r.trainable_params.to_string(),
                r.comm_down_bytes.to_string(),
                r.comm_up_bytes.to_string(),
                format!("{:.2}", r.comm_total_mb),
                format!("{:.3e}", r.flop_per_token_forward),
                format!("{:.3e}", r.flop_per_token_backward),
            ]
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|i| {
            body.iter()
                .map(|r| r[i].len())
                .chain([header[i].len()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let line = |cells: Vec<String>| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:>w$}"))
            .collect::<Vec<_>>()
            .join("  ")
    };
    let mut out = line(header.iter().map(|s| s.to_string()).collect());
    out.push('\n');
    for r in body {
        out.push_str(&line(r));
        out.push('\n');
    }
    out
}

/// Writes `curves.tsv` and `curves.svg` next to the metrics.
pub fn plot(dir: &Path) -> Result<(PathBuf, PathBuf)> {
    let reports: Vec<RoundReport> = metrics::read(&dir.join(METRICS))?;
    let c = plot::curves(&reports);
    let tsv = dir.join("curves.tsv");
    let svg = dir.join("curves.svg");
    fs::write(&tsv, plot::to_tsv(&c)).map_err(CliError::io(&tsv))?;
    let title = dir.file_name().and_then(|n| n.to_str()).unwrap_or("run");
    fs::write(&svg, plot::to_svg(&c, title)).map_err(CliError::io(&svg))?;
    Ok((tsv, svg))
}
