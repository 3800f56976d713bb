//! Trainable-parameter, communication and FLOP accounting.
//!
//! Communication assumes every LoRA parameter travels as a 4-byte float and
//! reports megabytes as 10^6 bytes. FLOP counts cover the dense decoder
//! weights only: a forward pass costs `2·P` per token for the `P` weights it
//! touches and a backward pass `4·P` for every layer gradients must cross.
//! Attention score products, the embedding and the output head are left out,
//! so absolute values are rough while orderings between plans hold.

use alloc::string::String;

use serde::{Deserialize, Serialize};

use crate::fedcore::Mode;
use crate::model::{extract_layers, KeepRatio, LoraConfig, ModelConfig, Projection, SplitPlan};
use crate::Result;

pub const BYTES_PER_PARAM: usize = 4;
pub const BYTES_PER_MB: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    /// Adapter LoRA, trained by clients.
    Client,
    /// Emulator LoRA, trained by the server.
    Server,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub method: Mode,
    pub keep_ratio: f64,
    pub adapter_size: usize,
    pub adapter_layers: usize,
    pub emulator_layers: usize,
    pub trainable_params: usize,
    pub comm_down_bytes: usize,
    pub comm_up_bytes: usize,
    pub comm_total_mb: f64,
    pub flop_per_token_forward: f64,
    pub flop_per_token_backward: f64,
}

impl CostReport {
    pub fn comm_total_bytes(&self) -> usize {
        self.comm_down_bytes + self.comm_up_bytes
    }

    pub fn flop_per_token_total(&self) -> f64 {
        self.flop_per_token_forward + self.flop_per_token_backward
    }
}

/// `Σ r·(d_in + d_out)` over targeted projections of the layers in scope.
pub fn count_trainable(plan: &SplitPlan, model: &ModelConfig, lora: &LoraConfig, scope: Scope) -> usize {
    let layers = match scope {
        Scope::Client => plan.adapter().len(),
        Scope::Server => plan.emulator.len(),
    };
    layers * lora.params_per_layer(model)
}

/// Bytes sent to and received from one client in one round.
pub fn comm_per_round(
    plan: &SplitPlan,
    model: &ModelConfig,
    lora: &LoraConfig,
    method: Mode,
    bytes_per_param: usize,
) -> (usize, usize) {
    let adapter = count_trainable(plan, model, lora, Scope::Client) * bytes_per_param;
    let emulator = count_trainable(plan, model, lora, Scope::Server) * bytes_per_param;
    match method {
        Mode::FedBiOT => (adapter + emulator, adapter),
        Mode::FedOT | Mode::OffsiteSingle => (adapter, adapter),
    }
}

/// Dense weight count of one decoder layer.
pub fn dense_layer_params(model: &ModelConfig) -> usize {
    Projection::ALL
        .iter()
        .map(|&p| {
            let (i, o) = model.proj_dims(p);
            i * o
        })
        .sum()
}

/// `(forward, backward)` FLOP per token. Gradients enter at the head and
/// must reach the lowest trainable layer, so a tail-only adapter only pays
/// backward cost for its own layers while a split adapter pays for the
/// whole loaded stack.
pub fn flop_per_token(plan: &SplitPlan, model: &ModelConfig) -> (f64, f64) {
    let p = dense_layer_params(model) as f64;
    let loaded = plan.adapter_head.len() + plan.emulator.len() + plan.adapter_tail.len();
    let grad_path = if plan.adapter_head.is_empty() {
        plan.adapter_tail.len()
    } else {
        loaded
    };
    (2.0 * p * loaded as f64, 4.0 * p * grad_path as f64)
}

pub fn cost_report(plan: &SplitPlan, model: &ModelConfig, lora: &LoraConfig, method: Mode) -> CostReport {
    let (down, up) = comm_per_round(plan, model, lora, method, BYTES_PER_PARAM);
    let (fwd, bwd) = flop_per_token(plan, model);
    CostReport {
        method,
        keep_ratio: plan.keep_ratio.as_f64(),
        adapter_size: plan.adapter_size,
        adapter_layers: plan.adapter().len(),
        emulator_layers: plan.emulator.len(),
        trainable_params: count_trainable(plan, model, lora, Scope::Client),
        comm_down_bytes: down,
        comm_up_bytes: up,
        comm_total_mb: (down + up) as f64 / BYTES_PER_MB,
        flop_per_token_forward: fwd,
        flop_per_token_backward: bwd,
    }
}

/// A 7B-class configuration: 32 layers of width 4096.
pub fn reference_model() -> ModelConfig {
    ModelConfig {
        n_layers: 32,
        d_model: 4096,
        n_heads: 32,
        d_ff: 11008,
        vocab_size: 32000,
        max_seq_len: 4096,
        rng_seed: 0,
    }
}

/// The comparison grid: split-adapter baseline with four adapter layers
/// and the tail adapter with two or four, at dropout 0.2 and 0.5.
pub fn reference_grid() -> Result<alloc::vec::Vec<(String, CostReport)>> {
    let model = reference_model();
    let lora = LoraConfig::default();
    let mut out = alloc::vec::Vec::new();
    for beta in ["0.2", "0.5"] {
        let keep = KeepRatio::from_dropout(beta)?;
        for (method, s) in [(Mode::FedOT, 4), (Mode::FedBiOT, 2), (Mode::FedBiOT, 4)] {
            let plan = extract_layers(model.n_layers, s, keep, method.placement())?;
            out.push((alloc::format!("beta={beta}"), cost_report(&plan, &model, &lora, method)));
        }
    }
    Ok(out)
}
