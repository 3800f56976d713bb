//! The federated loop: client updates with a proximal pull toward the
//! broadcast adapter, weighted aggregation, and round orchestration.

mod aggregate;
mod client;
mod eval;
mod pretrain;
mod prox;
mod round;

pub use aggregate::{aggregate, Update};
pub use client::{
    client_loss_and_grad, client_objective, local_update, BroadcastSnapshot, ClientState, LocalLoss, LocalTrace, Mode,
    RoundConfig,
};
pub use eval::{evaluate, greedy_answers, EvalReport};
pub use pretrain::{pretrain_base, PretrainConfig};
pub use prox::{proximal_term, reconstruct, reconstruct_on_tape};
pub use round::{
    broadcast, client_phase, init_clients, init_server, pre_align, resume_training, run_round, run_training,
    server_aggregate, server_align, ClientLoss, Federation, Observer, RoundReport, ServerState, TrainingOutcome,
};
