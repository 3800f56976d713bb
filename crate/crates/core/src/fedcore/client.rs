use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::prox::{proximal_term, reconstruct};
use crate::align::sample_batch;
use crate::compute::{Array, Tape};
use crate::data::{Sample, Shard, Weight};
use crate::model::{assemble, Assembly, Batch, LoraSet, Placement, SplitPlan, Trainable, TransformerStack};
use crate::optim::{OptimConfig, Optimizer};
use crate::rng::{purpose, stream};
use crate::{Error, Result, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    /// Tail adapter, per-round emulator alignment, proximal regularizer.
    #[serde(rename = "fedbiot")]
    FedBiOT,
    /// Adapters at both ends, emulator fixed after pre-alignment.
    #[serde(rename = "fedot")]
    FedOT,
    /// Like `FedOT` with a single client holding all data.
    #[serde(rename = "offsite_single")]
    OffsiteSingle,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::FedBiOT, Mode::FedOT, Mode::OffsiteSingle];

    pub fn name(self) -> &'static str {
        match self {
            Mode::FedBiOT => "fedbiot",
            Mode::FedOT => "fedot",
            Mode::OffsiteSingle => "offsite_single",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }

    pub fn placement(self) -> Placement {
        match self {
            Mode::FedBiOT => Placement::Tail,
            Mode::FedOT | Mode::OffsiteSingle => Placement::Split,
        }
    }

    pub fn aligns_each_round(self) -> bool {
        self == Mode::FedBiOT
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoundConfig {
    /// Local optimizer steps per round (K).
    pub local_steps: usize,
    pub batch_size: usize,
    /// Total rounds (R).
    pub rounds: usize,
    /// Proximal weight ε.
    pub prox_eps: f64,
    pub optim: OptimConfig,
    pub mode: Mode,
}

impl Default for RoundConfig {
    fn default() -> Self {
        RoundConfig {
            local_steps: 30,
            batch_size: 10,
            rounds: 500,
            prox_eps: 1.0,
            optim: OptimConfig::default(),
            mode: Mode::FedBiOT,
        }
    }
}

impl RoundConfig {
    pub fn validate(&self) -> Result<()> {
        if self.local_steps == 0 {
            return Err(Error::config("federation.local_steps must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("federation.batch_size must be >= 1"));
        }
        if !(self.prox_eps >= 0.0 && self.prox_eps.is_finite()) {
            return Err(Error::config(format!(
                "federation.prox_eps must be >= 0 (got {})",
                self.prox_eps
            )));
        }
        if !(self.optim.lr > 0.0 && self.optim.lr.is_finite()) {
            return Err(Error::config(format!(
                "federation.optim.lr must be > 0 (got {})",
                self.optim.lr
            )));
        }
        Ok(())
    }
}

/// What the server sends at the start of round `round`.
#[derive(Clone, Debug, PartialEq)]
pub struct BroadcastSnapshot<T> {
    pub round: usize,
    pub adapter: LoraSet<T>,
    pub emulator: LoraSet<T>,
}

#[derive(Clone, Debug)]
pub struct ClientState<T> {
    pub client_id: usize,
    pub samples: Vec<Sample>,
    pub weight: Weight,
    pub adapter: LoraSet<T>,
    pub optimizer: Optimizer<T>,
}

impl<T: Scalar> ClientState<T> {
    pub fn new(shard: Shard, adapter: LoraSet<T>, optim: OptimConfig) -> Self {
        ClientState {
            client_id: shard.client_id,
            samples: shard.samples,
            weight: shard.weight,
            adapter,
            optimizer: Optimizer::new(optim),
        }
    }
}

/// Value of a client objective split into its two parts.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LocalLoss {
    /// Masked next-token cross-entropy through AdapEmu.
    pub task: f64,
    /// `(ε/2)·‖ŵ − ŵ_anchor‖²`, zero when ε = 0.
    pub prox: f64,
}

impl LocalLoss {
    pub fn total(&self) -> f64 {
        self.task + self.prox
    }
}

/// Client objective and its gradient with respect to the adapter factors
/// (in [`LoraSet::buffers`] order). The emulator is frozen.
pub fn client_loss_and_grad<T: Scalar>(
    batch: &Batch,
    plan: &SplitPlan,
    base: &TransformerStack<T>,
    adapter: &LoraSet<T>,
    emulator: &LoraSet<T>,
    anchor: &Array<T>,
    eps: f64,
) -> Result<(LocalLoss, Vec<Vec<T>>)> {
    let model = assemble(plan, base, adapter, Some(emulator), Assembly::AdapEmu)?;
    let mut tape = Tape::new();
    let fwd = model.forward(
        &mut tape,
        batch,
        Trainable {
            adapter: true,
            emulator: false,
        },
    )?;
    let task = tape.softmax_cross_entropy(fwd.logits, &batch.targets, &batch.target_mask)?;
    let (loss, prox) = if eps > 0.0 {
        let p = proximal_term(&mut tape, &fwd.adapter, anchor, eps)?;
        (tape.add(task, p)?, tape.value(p).item().as_f64())
    } else {
        (task, 0.0)
    };
    let grads = tape.backward(loss)?;
    let g = fwd
        .adapter
        .factor_vars()
        .into_iter()
        .map(|v| grads.slice(v).expect("adapter factors are trainable").to_vec())
        .collect();
    Ok((
        LocalLoss {
            task: tape.value(task).item().as_f64(),
            prox,
        },
        g,
    ))
}

/// Objective value only; the finite-difference side of gradient checks.
pub fn client_objective<T: Scalar>(
    batch: &Batch,
    plan: &SplitPlan,
    base: &TransformerStack<T>,
    adapter: &LoraSet<T>,
    emulator: &LoraSet<T>,
    anchor: &Array<T>,
    eps: f64,
) -> Result<LocalLoss> {
    let model = assemble(plan, base, adapter, Some(emulator), Assembly::AdapEmu)?;
    let mut tape = Tape::new();
    let fwd = model.forward(&mut tape, batch, Trainable::default())?;
    let task = tape.softmax_cross_entropy(fwd.logits, &batch.targets, &batch.target_mask)?;
    let prox = if eps > 0.0 {
        let p = proximal_term(&mut tape, &fwd.adapter, anchor, eps)?;
        tape.value(p).item().as_f64()
    } else {
        0.0
    };
    Ok(LocalLoss {
        task: tape.value(task).item().as_f64(),
        prox,
    })
}

/// Per-step losses of one client's local phase, measured before each step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LocalTrace {
    pub steps: Vec<LocalLoss>,
}

impl LocalTrace {
    pub fn final_task_loss(&self) -> f64 {
        self.steps.last().map_or(0.0, |s| s.task)
    }
}

/// Re-initializes the client from `snapshot` and runs K optimizer steps.
/// Batch `k` of round `t` for client `m` comes from its own RNG stream, so
/// clients can run in any order.
pub fn local_update<T: Scalar>(
    client: &mut ClientState<T>,
    snapshot: &BroadcastSnapshot<T>,
    config: &RoundConfig,
    plan: &SplitPlan,
    base: &TransformerStack<T>,
    seed: u64,
) -> Result<LocalTrace> {
    if client.samples.is_empty() {
        return Err(Error::config(format!("client {} has an empty shard", client.client_id)));
    }
    client.adapter = snapshot.adapter.clone();
    client.optimizer = Optimizer::new(config.optim.clone());
    let anchor = reconstruct(&snapshot.adapter);
    let mut trace = LocalTrace::default();
    for k in 0..config.local_steps {
        let mut rng = stream(
            seed,
            &[
                purpose::CLIENT_BATCH,
                snapshot.round as u64,
                client.client_id as u64,
                k as u64,
            ],
        );
        let batch = sample_batch(&client.samples, config.batch_size, &mut rng, base.config.max_seq_len)?;
        let (loss, grads) = client_loss_and_grad(
            &batch,
            plan,
            base,
            &client.adapter,
            &snapshot.emulator,
            &anchor,
            config.prox_eps,
        )?;
        let refs: Vec<&[T]> = grads.iter().map(|g| g.as_slice()).collect();
        client.optimizer.step(&mut client.adapter.buffers_mut(), &refs);
        trace.steps.push(loss);
    }
    Ok(trace)
}
