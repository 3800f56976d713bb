#![allow(dead_code, clippy::field_reassign_with_default)]

use std::path::Path;
use std::process::{Command, Output};

use fedsplit::config::RunConfig;

/// A model and data budget small enough for many runs per test.
pub fn toy(dir: &Path) -> RunConfig {
    let mut c = RunConfig::default();
    c.model.n_layers = 6;
    c.model.d_model = 16;
    c.model.n_heads = 2;
    c.model.d_ff = 32;
    c.pretrain.steps = 5;
    c.pretrain.batch_size = 4;
    c.align.pre_align_iters = 2;
    c.align.per_round_iters = 1;
    c.align.batch_size = 4;
    c.federation.local_steps = 2;
    c.federation.batch_size = 4;
    c.federation.rounds = 4;
    c.data.train_size = 40;
    c.data.public_size = 20;
    c.data.eval_size = 10;
    c.data.pretrain_size = 20;
    c.output.dir = dir.to_path_buf();
    c.output.checkpoint_every = 2;
    c
}

pub fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedsplit"))
        .args(args)
        .env_remove("FEDSPLIT_OUT")
        .output()
        .expect("binary runs")
}

pub fn write_config(path: &Path, c: &RunConfig) {
    std::fs::write(path, c.to_toml()).unwrap();
}
