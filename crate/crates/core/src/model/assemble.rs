use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::extract::SplitPlan;
use super::lora::{BoundLora, LoraSet};
use super::transformer::{Batch, BoundStack, TransformerStack};
use crate::compute::{Array, Tape, Var};
use crate::{Error, Result, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Assembly {
    /// Adapter on top of the compressed emulator (what clients run).
    AdapEmu,
    /// Adapter on top of the original non-adapter layers.
    AdapFu,
}

impl Assembly {
    pub fn name(self) -> &'static str {
        match self {
            Assembly::AdapEmu => "AdapEmu",
            Assembly::AdapFu => "AdapFu",
        }
    }
}

/// Which LoRA sets receive gradients in a forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Trainable {
    pub adapter: bool,
    pub emulator: bool,
}

/// A runnable composition of base weights, plan and LoRA sets.
#[derive(Clone, Copy, Debug)]
pub struct Assembled<'a, T> {
    pub plan: &'a SplitPlan,
    pub base: &'a TransformerStack<T>,
    pub adapter: &'a LoraSet<T>,
    pub emulator: Option<&'a LoraSet<T>>,
    pub mode: Assembly,
}

/// Tape handles produced by [`Assembled::forward`].
pub struct Forward {
    pub logits: Var,
    /// Hidden state after the last emulator (or non-compressed) layer.
    pub body_out: Var,
    pub adapter: BoundLora,
    pub emulator: Option<BoundLora>,
}

pub fn assemble<'a, T: Scalar>(
    plan: &'a SplitPlan,
    base: &'a TransformerStack<T>,
    adapter_lora: &'a LoraSet<T>,
    emulator_lora: Option<&'a LoraSet<T>>,
    mode: Assembly,
) -> Result<Assembled<'a, T>> {
    if plan.n_layers != base.n_layers() {
        return Err(Error::config(format!(
            "plan is for {} layers but the model has {}",
            plan.n_layers,
            base.n_layers()
        )));
    }
    let mut want_adapter = plan.adapter();
    want_adapter.sort_unstable();
    if adapter_lora.layers() != want_adapter {
        return Err(Error::config(format!(
            "adapter LoRA covers layers {:?}, plan expects {:?}",
            adapter_lora.layers(),
            want_adapter
        )));
    }
    match (mode, emulator_lora) {
        (Assembly::AdapEmu, None) => {
            return Err(Error::config("AdapEmu requires an emulator LoRA set"));
        }
        (Assembly::AdapEmu, Some(e)) if e.layers() != plan.emulator => {
            return Err(Error::config(format!(
                "emulator LoRA covers layers {:?}, plan expects {:?}",
                e.layers(),
                plan.emulator
            )));
        }
        (Assembly::AdapEmu, Some(e)) if e.scale() != adapter_lora.scale() => {
            return Err(Error::config("adapter and emulator LoRA must share rank and alpha"));
        }
        (Assembly::AdapFu, Some(_)) => {
            return Err(Error::config(
                "AdapFu runs the original layers and takes no emulator LoRA",
            ));
        }
        _ => {}
    }
    Ok(Assembled {
        plan,
        base,
        adapter: adapter_lora,
        emulator: emulator_lora,
        mode,
    })
}

impl<'a, T: Scalar> Assembled<'a, T> {
    /// Layer indices in execution order.
    pub fn route(&self) -> Vec<usize> {
        let body = match self.mode {
            Assembly::AdapEmu => &self.plan.emulator,
            Assembly::AdapFu => &self.plan.noncompressed,
        };
        let mut r = self.plan.adapter_head.clone();
        r.extend_from_slice(body);
        r.extend_from_slice(&self.plan.adapter_tail);
        r
    }

    pub fn forward(&self, tape: &mut Tape<T>, batch: &Batch, trainable: Trainable) -> Result<Forward> {
        let adapter = self.adapter.bind(tape, trainable.adapter)?;
        let emulator = match self.emulator {
            Some(e) if self.mode == Assembly::AdapEmu => Some(e.bind(tape, trainable.emulator)?),
            _ => None,
        };
        let lora = match &emulator {
            Some(e) => adapter.union(e),
            None => adapter.clone(),
        };
        let mut stack = BoundStack::new(tape, self.base, false);
        let mut x = stack.embed(tape, batch)?;
        for &i in &self.plan.adapter_head {
            x = stack.layer(tape, i, x, batch, Some(&lora))?;
        }
        let body = match self.mode {
            Assembly::AdapEmu => &self.plan.emulator,
            Assembly::AdapFu => &self.plan.noncompressed,
        };
        for &i in body {
            x = stack.layer(tape, i, x, batch, Some(&lora))?;
        }
        let body_out = x;
        for &i in &self.plan.adapter_tail {
            x = stack.layer(tape, i, x, batch, Some(&lora))?;
        }
        let logits = stack.head(tape, x)?;
        Ok(Forward {
            logits,
            body_out,
            adapter,
            emulator,
        })
    }

    pub fn logits(&self, batch: &Batch) -> Result<Array<T>> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, batch, Trainable::default())?;
        Ok(tape.value(out.logits).clone())
    }
}

/// Hidden states fed into the tail adapter, for the compressed emulator
/// (with its LoRA) and for the non-compressed layers (base weights only).
pub fn emulator_activations<T: Scalar>(
    plan: &SplitPlan,
    base: &TransformerStack<T>,
    adapter_lora: &LoraSet<T>,
    emulator_lora: &LoraSet<T>,
    batch: &Batch,
) -> Result<(Array<T>, Array<T>)> {
    let emu = assemble(plan, base, adapter_lora, Some(emulator_lora), Assembly::AdapEmu)?;
    let full = assemble(plan, base, adapter_lora, None, Assembly::AdapFu)?;
    let mut tape = Tape::new();
    let e = emu.forward(&mut tape, batch, Trainable::default())?;
    let f = full.forward(&mut tape, batch, Trainable::default())?;
    Ok((tape.value(e.body_out).clone(), tape.value(f.body_out).clone()))
}
