use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::aggregate::{aggregate, Update};
use super::client::{local_update, BroadcastSnapshot, ClientState, Mode, RoundConfig};
use super::prox::reconstruct;
use crate::align::{align_emulator, AlignConfig, PRE_ALIGN_PHASE};
use crate::data::{Sample, Shard};
use crate::model::{inject_lora, LoraConfig, LoraSet, SplitPlan, TransformerStack};
use crate::optim::Optimizer;
use crate::rng::{derive_seed, purpose};
use crate::{Error, Result, Scalar};

/// Everything fixed for the lifetime of a run.
#[derive(Clone, Copy, Debug)]
pub struct Federation<'a, T> {
    pub plan: &'a SplitPlan,
    pub base: &'a TransformerStack<T>,
    pub public: &'a [Sample],
    pub align: &'a AlignConfig,
    pub rounds: &'a RoundConfig,
    pub seed: u64,
}

impl<T: Scalar> Federation<'_, T> {
    pub fn validate(&self) -> Result<()> {
        self.align.validate()?;
        self.rounds.validate()?;
        if self.plan.placement != self.rounds.mode.placement() {
            return Err(Error::config(format!(
                "mode {} needs {:?} adapter placement, plan has {:?}",
                self.rounds.mode.name(),
                self.rounds.mode.placement(),
                self.plan.placement
            )));
        }
        if self.plan.n_layers != self.base.n_layers() {
            return Err(Error::config(format!(
                "plan is for {} layers but the model has {}",
                self.plan.n_layers,
                self.base.n_layers()
            )));
        }
        Ok(())
    }
}

/// Server-side state carried between rounds.
#[derive(Clone, Debug, PartialEq)]
pub struct ServerState<T> {
    /// Number of completed rounds.
    pub round: usize,
    pub adapter: LoraSet<T>,
    pub emulator: LoraSet<T>,
    pub align_optimizer: Optimizer<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientLoss {
    pub client_id: usize,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    /// Task loss at each client's last local step.
    pub client_losses: Vec<ClientLoss>,
    pub align_losses: Vec<f64>,
    /// `‖ŵ‖` of the aggregated adapter.
    pub adapter_norm: f64,
}

/// Fresh LoRA sets on the plan's adapter and emulator layers.
pub fn init_server<T: Scalar>(fed: &Federation<'_, T>, lora: &LoraConfig) -> Result<ServerState<T>> {
    fed.validate()?;
    let cfg = &fed.base.config;
    let adapter = inject_lora(
        cfg,
        &fed.plan.adapter(),
        lora,
        derive_seed(fed.seed, &[purpose::LORA_INIT, 0]),
    )?;
    let emulator = inject_lora(
        cfg,
        &fed.plan.emulator,
        lora,
        derive_seed(fed.seed, &[purpose::LORA_INIT, 1]),
    )?;
    Ok(ServerState {
        round: 0,
        adapter,
        emulator,
        align_optimizer: Optimizer::new(fed.align.optim.clone()),
    })
}

pub fn init_clients<T: Scalar>(
    fed: &Federation<'_, T>,
    shards: Vec<Shard>,
    server: &ServerState<T>,
) -> Result<Vec<ClientState<T>>> {
    if shards.is_empty() {
        return Err(Error::config("no clients"));
    }
    if fed.rounds.mode == Mode::OffsiteSingle && shards.len() != 1 {
        return Err(Error::config(format!(
            "offsite_single runs one client, got {}",
            shards.len()
        )));
    }
    shards
        .into_iter()
        .map(|s| {
            if s.samples.is_empty() {
                return Err(Error::config(format!("client {} has an empty shard", s.client_id)));
            }
            Ok(ClientState::new(s, server.adapter.clone(), fed.rounds.optim.clone()))
        })
        .collect()
}

/// Distills the emulator before any round.
pub fn pre_align<T: Scalar>(fed: &Federation<'_, T>, server: &mut ServerState<T>) -> Result<Vec<f64>> {
    align_emulator(
        fed.align,
        fed.align.pre_align_iters,
        fed.public,
        fed.plan,
        fed.base,
        &server.adapter,
        &mut server.emulator,
        &mut server.align_optimizer,
        fed.seed,
        PRE_ALIGN_PHASE,
    )
}

/// Step 1 of a round: alignment against the current aggregated adapter.
pub fn server_align<T: Scalar>(fed: &Federation<'_, T>, server: &mut ServerState<T>) -> Result<Vec<f64>> {
    if !fed.rounds.mode.aligns_each_round() {
        return Ok(Vec::new());
    }
    align_emulator(
        fed.align,
        fed.align.per_round_iters,
        fed.public,
        fed.plan,
        fed.base,
        &server.adapter,
        &mut server.emulator,
        &mut server.align_optimizer,
        fed.seed,
        server.round as u64,
    )
}

/// Step 2: the frozen copy every client starts from.
pub fn broadcast<T: Scalar>(server: &ServerState<T>) -> BroadcastSnapshot<T> {
    BroadcastSnapshot {
        round: server.round,
        adapter: server.adapter.clone(),
        emulator: server.emulator.clone(),
    }
}

/// Step 3: every client runs its local update.
pub fn client_phase<T: Scalar>(
    fed: &Federation<'_, T>,
    snapshot: &BroadcastSnapshot<T>,
    clients: &mut [ClientState<T>],
) -> Result<Vec<ClientLoss>> {
    clients
        .iter_mut()
        .map(|c| {
            let trace = local_update(c, snapshot, fed.rounds, fed.plan, fed.base, fed.seed)?;
            Ok(ClientLoss {
                client_id: c.client_id,
                loss: trace.final_task_loss(),
            })
        })
        .collect()
}

/// Step 4: weighted average of the client adapters.
pub fn server_aggregate<T: Scalar>(fed: &Federation<'_, T>, clients: &[ClientState<T>]) -> Result<LoraSet<T>> {
    if fed.rounds.mode == Mode::OffsiteSingle {
        return match clients {
            [only] => Ok(only.adapter.clone()),
            _ => Err(Error::config("offsite_single runs exactly one client")),
        };
    }
    let updates: Vec<Update<'_, T>> = clients
        .iter()
        .map(|c| Update {
            client_id: c.client_id,
            weight: c.weight,
            lora: &c.adapter,
        })
        .collect();
    aggregate(&updates)
}

/// One full round: align, broadcast, local updates, aggregate.
pub fn run_round<T: Scalar>(
    fed: &Federation<'_, T>,
    server: &mut ServerState<T>,
    clients: &mut [ClientState<T>],
) -> Result<RoundReport> {
    if server.round >= fed.rounds.rounds {
        return Err(Error::config(format!(
            "round {} requested but the run has {} rounds",
            server.round, fed.rounds.rounds
        )));
    }
    let align_losses = server_align(fed, server)?;
    let snapshot = broadcast(server);
    let client_losses = client_phase(fed, &snapshot, clients)?;
    server.adapter = server_aggregate(fed, clients)?;
    let report = RoundReport {
        round: server.round,
        client_losses,
        align_losses,
        adapter_norm: reconstruct(&server.adapter).norm_sq().as_f64().sqrt(),
    };
    server.round += 1;
    Ok(report)
}

/// Hooks for persistence while a run progresses.
pub trait Observer<T> {
    type Error: From<Error>;

    fn pre_aligned(&mut self, _server: &ServerState<T>, _trace: &[f64]) -> core::result::Result<(), Self::Error> {
        Ok(())
    }

    fn round_finished(
        &mut self,
        _server: &ServerState<T>,
        _report: &RoundReport,
    ) -> core::result::Result<(), Self::Error> {
        Ok(())
    }
}

impl<T> Observer<T> for () {
    type Error = Error;
}

#[derive(Clone, Debug)]
pub struct TrainingOutcome<T> {
    pub server: ServerState<T>,
    pub clients: Vec<ClientState<T>>,
    pub pre_align: Vec<f64>,
    pub reports: Vec<RoundReport>,
}

/// Pre-alignment followed by all rounds.
pub fn run_training<T: Scalar, O: Observer<T>>(
    fed: &Federation<'_, T>,
    lora: &LoraConfig,
    shards: Vec<Shard>,
    observer: &mut O,
) -> core::result::Result<TrainingOutcome<T>, O::Error> {
    let mut server = init_server(fed, lora)?;
    let clients = init_clients(fed, shards, &server)?;
    let pre = pre_align(fed, &mut server)?;
    observer.pre_aligned(&server, &pre)?;
    let mut out = resume_training(fed, server, clients, observer)?;
    out.pre_align = pre;
    Ok(out)
}

/// Runs the remaining rounds from `server.round`.
pub fn resume_training<T: Scalar, O: Observer<T>>(
    fed: &Federation<'_, T>,
    mut server: ServerState<T>,
    mut clients: Vec<ClientState<T>>,
    observer: &mut O,
) -> core::result::Result<TrainingOutcome<T>, O::Error> {
    fed.validate()?;
    let mut reports = Vec::new();
    while server.round < fed.rounds.rounds {
        let report = run_round(fed, &mut server, &mut clients)?;
        observer.round_finished(&server, &report)?;
        reports.push(report);
    }
    Ok(TrainingOutcome {
        server,
        clients,
        pre_align: Vec::new(),
        reports,
    })
}
