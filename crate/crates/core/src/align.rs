//! Server-side distillation of the emulator toward the non-compressed layers.
//!
//! The loss on a batch is
//!
//! ```text
//! L = mean‖E(x) − E*(x)‖² + λ · KL( M(x; adapter, E*) ‖ M(x; adapter, E) )
//! ```
//!
//! with both terms restricted to rows whose next token is ground truth.
//! The squared distance is averaged over those rows and the hidden width.
//! Only the emulator LoRA factors receive gradients.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::compute::{Tape, Var};
use crate::data::Sample;
use crate::model::{assemble, Assembly, Batch, BoundLora, LoraSet, SplitPlan, Trainable, TransformerStack};
use crate::optim::{OptimConfig, Optimizer};
use crate::rng::{purpose, stream};
use crate::{Error, Result, Scalar};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignConfig {
    /// Weight of the output-distribution term.
    pub lambda: f64,
    pub pre_align_iters: usize,
    /// Alignment steps at the start of every round.
    pub per_round_iters: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig {
            lambda: 1.0,
            pre_align_iters: 500,
            per_round_iters: 10,
            batch_size: 10,
            optim: OptimConfig::default(),
        }
    }
}

impl AlignConfig {
    /// Values the lambda sweep covers.
    pub const LAMBDA_GRID: [f64; 3] = [0.1, 1.0, 10.0];

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config(format!(
                "align.lambda must be >= 0 (got {})",
                self.lambda
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("align.batch_size must be >= 1"));
        }
        Ok(())
    }
}

/// Loss node plus the bound emulator factors.
pub struct AlignGraph {
    pub loss: Var,
    pub repr: Var,
    pub kd: Var,
    pub emulator: BoundLora,
    pub adapter: BoundLora,
}

/// Builds the alignment loss on `tape` for one packed batch.
pub fn alignment_graph<T: Scalar>(
    tape: &mut Tape<T>,
    batch: &Batch,
    plan: &SplitPlan,
    base: &TransformerStack<T>,
    adapter_lora: &LoraSet<T>,
    emulator_lora: &LoraSet<T>,
    lambda: f64,
) -> Result<AlignGraph> {
    if lambda.is_nan() || lambda < 0.0 {
        return Err(Error::config(format!("lambda must be >= 0 (got {lambda})")));
    }
    let count = batch.supervised();
    if count == 0 {
        return Err(Error::EmptySupervision);
    }
    let full = assemble(plan, base, adapter_lora, None, Assembly::AdapFu)?;
    let emu = assemble(plan, base, adapter_lora, Some(emulator_lora), Assembly::AdapEmu)?;
    let f = full.forward(tape, batch, Trainable::default())?;
    let e = emu.forward(
        tape,
        batch,
        Trainable {
            adapter: false,
            emulator: true,
        },
    )?;
    let d = base.config.d_model;
    let sq = tape.l2_distance_sq(e.body_out, f.body_out, Some(&batch.target_mask))?;
    let repr = tape.scale(sq, T::lit(1.0 / (count * d) as f64));
    let kd = tape.kl_divergence(f.logits, e.logits, &batch.target_mask)?;
    let weighted = tape.scale(kd, T::lit(lambda));
    let loss = tape.add(repr, weighted)?;
    Ok(AlignGraph {
        loss,
        repr,
        kd,
        emulator: e.emulator.expect("AdapEmu binds the emulator"),
        adapter: e.adapter,
    })
}

/// Scalar alignment loss on one batch.
pub fn alignment_loss<T: Scalar>(
    batch: &Batch,
    plan: &SplitPlan,
    base: &TransformerStack<T>,
    adapter_lora: &LoraSet<T>,
    emulator_lora: &LoraSet<T>,
    lambda: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let g = alignment_graph(&mut tape, batch, plan, base, adapter_lora, emulator_lora, lambda)?;
    Ok(tape.value(g.loss).item().as_f64())
}

/// Loss and emulator-factor gradients in [`LoraSet::buffers`] order.
pub fn alignment_loss_and_grad<T: Scalar>(
    batch: &Batch,
    plan: &SplitPlan,
    base: &TransformerStack<T>,
    adapter_lora: &LoraSet<T>,
    emulator_lora: &LoraSet<T>,
    lambda: f64,
) -> Result<(f64, Vec<Vec<T>>)> {
    let mut tape = Tape::new();
    let g = alignment_graph(&mut tape, batch, plan, base, adapter_lora, emulator_lora, lambda)?;
    let grads = tape.backward(g.loss)?;
    let out = g
        .emulator
        .factor_vars()
        .into_iter()
        .map(|v| grads.slice(v).expect("emulator factors are trainable").to_vec())
        .collect();
    Ok((tape.value(g.loss).item().as_f64(), out))
}

/// Draws `batch_size` samples (with replacement) and packs them.
pub fn sample_batch(data: &[Sample], batch_size: usize, rng: &mut impl Rng, max_seq_len: usize) -> Result<Batch> {
    let picks: Vec<&Sample> = (0..batch_size)
        .map(|_| &data[rng.random_range(0..data.len())])
        .collect();
    Batch::pack(
        picks.iter().map(|s| (s.tokens.as_slice(), s.gt_mask.as_slice())),
        max_seq_len,
    )
}

/// Runs `iters` optimizer steps on the emulator LoRA over batches from
/// `public`. `phase` keys the batch stream (pre-alignment vs. round `t`).
/// Returns the loss before each step.
#[allow(clippy::too_many_arguments)]
pub fn align_emulator<T: Scalar>(
    config: &AlignConfig,
    iters: usize,
    public: &[Sample],
    plan: &SplitPlan,
    base: &TransformerStack<T>,
    adapter_lora: &LoraSet<T>,
    emulator_lora: &mut LoraSet<T>,
    optimizer: &mut Optimizer<T>,
    seed: u64,
    phase: u64,
) -> Result<Vec<f64>> {
    config.validate()?;
    if public.is_empty() {
        return Err(Error::config("public dataset is empty"));
    }
    let mut trace = Vec::with_capacity(iters);
    for it in 0..iters {
        let mut rng = stream(seed, &[purpose::ALIGN_BATCH, phase, it as u64]);
        let batch = sample_batch(public, config.batch_size, &mut rng, base.config.max_seq_len)?;
        let (loss, grads) = alignment_loss_and_grad(&batch, plan, base, adapter_lora, emulator_lora, config.lambda)?;
        let grad_refs: Vec<&[T]> = grads.iter().map(|g| g.as_slice()).collect();
        optimizer.step(&mut emulator_lora.buffers_mut(), &grad_refs);
        trace.push(loss);
    }
    Ok(trace)
}

/// Phase key used for pre-alignment batches.
pub const PRE_ALIGN_PHASE: u64 = u64::MAX;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compute::gradcheck::H;
    use crate::data::{generate_mix, TaskKind, TaskMix, TaskParams};
    use crate::model::{extract, inject_lora, KeepRatio, LoraConfig, ModelConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 6,
            d_model: 16,
            n_heads: 2,
            d_ff: 24,
            vocab_size: 64,
            max_seq_len: 24,
            rng_seed: 3,
        }
    }

    struct Fixture {
        base: TransformerStack<f64>,
        plan: SplitPlan,
        adapter: LoraSet<f64>,
        emulator: LoraSet<f64>,
        public: Vec<Sample>,
    }

    fn fixture(keep: &str, seed: u64) -> Fixture {
        let c = ModelConfig {
            rng_seed: seed,
            ..cfg()
        };
        let base = TransformerStack::init(&c).unwrap();
        let plan = extract(&base, 2, keep.parse::<KeepRatio>().unwrap()).unwrap();
        let l = LoraConfig::default();
        let adapter = inject_lora(&c, &plan.adapter(), &l, seed + 1).unwrap();
        let emulator = inject_lora(&c, &plan.emulator, &l, seed + 2).unwrap();
        let public = generate_mix(
            &TaskMix::uniform(&[TaskKind::Copy, TaskKind::Reverse]),
            32,
            seed,
            0,
            64,
            &TaskParams::default(),
        )
        .unwrap();
        Fixture {
            base,
            plan,
            adapter,
            emulator,
            public,
        }
    }

    fn batch(f: &Fixture) -> Batch {
        sample_batch(&f.public, 4, &mut ChaCha8Rng::seed_from_u64(0), 24).unwrap()
    }

    fn perturb(set: &mut LoraSet<f64>, seed: u64, amp: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for b in set.buffers_mut() {
            b.iter_mut().for_each(|x| *x += rng.random_range(-amp..amp));
        }
    }

    #[test]
    fn zero_at_identity_point() {
        let f = fixture("1", 1);
        let mut emu = f.emulator.clone();
        emu.pairs.iter_mut().for_each(|p| p.a.data_mut().fill(0.0));
        let b = batch(&f);
        let (loss, grads) = alignment_loss_and_grad(&b, &f.plan, &f.base, &f.adapter, &f.emulator, 1.0).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.iter().all(|g| g.iter().all(|&x| x == 0.0)));
        assert_eq!(
            alignment_loss(&b, &f.plan, &f.base, &f.adapter, &emu, 10.0).unwrap(),
            0.0
        );
    }

    #[test]
    fn lambda_zero_is_representation_only() {
        let f = fixture("0.5", 2);
        let b = batch(&f);
        let mut tape = Tape::new();
        let g = alignment_graph(&mut tape, &b, &f.plan, &f.base, &f.adapter, &f.emulator, 0.0).unwrap();
        assert_eq!(tape.value(g.loss).item(), tape.value(g.repr).item());
        assert!(tape.value(g.kd).item() > 0.0);
        assert!(tape.value(g.repr).item() > 0.0);
    }

    #[test]
    fn emulator_gradient_matches_finite_differences() {
        let mut f = fixture("0.5", 3);
        perturb(&mut f.emulator, 9, 0.2);
        perturb(&mut f.adapter, 10, 0.2);
        let b = batch(&f);
        let (_, grads) = alignment_loss_and_grad(&b, &f.plan, &f.base, &f.adapter, &f.emulator, 0.7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..4 {
            let dir: Vec<Vec<f64>> = grads
                .iter()
                .map(|g| g.iter().map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            let analytic: f64 = grads
                .iter()
                .zip(&dir)
                .flat_map(|(g, d)| g.iter().zip(d).map(|(a, b)| a * b))
                .sum();
            let shifted = |sign: f64| {
                let mut e = f.emulator.clone();
                for (buf, d) in e.buffers_mut().into_iter().zip(&dir) {
                    buf.iter_mut().zip(d).for_each(|(x, di)| *x += sign * H * di);
                }
                alignment_loss(&b, &f.plan, &f.base, &f.adapter, &e, 0.7).unwrap()
            };
            let numeric = (shifted(1.0) - shifted(-1.0)) / (2.0 * H);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12);
            assert!(rel < 1e-4, "analytic {analytic} numeric {numeric}");
        }
    }

    #[test]
    fn loss_is_nonnegative() {
        for seed in 0..4 {
            let mut f = fixture("0.5", seed);
            perturb(&mut f.emulator, seed, 0.5);
            let l = alignment_loss(&batch(&f), &f.plan, &f.base, &f.adapter, &f.emulator, 1.0).unwrap();
            assert!(l >= 0.0);
        }
    }

    #[test]
    fn adapter_receives_no_gradient() {
        let f = fixture("0.5", 4);
        let mut tape = Tape::new();
        let g = alignment_graph(&mut tape, &batch(&f), &f.plan, &f.base, &f.adapter, &f.emulator, 1.0).unwrap();
        let grads = tape.backward(g.loss).unwrap();
        assert!(g.adapter.factor_vars().into_iter().all(|v| grads.get(v).is_none()));
        assert!(g.emulator.factor_vars().into_iter().all(|v| grads.get(v).is_some()));
    }

    #[test]
    fn zero_iterations_leave_emulator_unchanged() {
        let f = fixture("0.5", 5);
        let mut emu = f.emulator.clone();
        let mut opt = Optimizer::new(OptimConfig::default());
        let trace = align_emulator(
            &AlignConfig::default(),
            0,
            &f.public,
            &f.plan,
            &f.base,
            &f.adapter,
            &mut emu,
            &mut opt,
            0,
            PRE_ALIGN_PHASE,
        )
        .unwrap();
        assert!(trace.is_empty());
        assert_eq!(emu, f.emulator);
    }

    #[test]
    fn alignment_reduces_loss() {
        for seed in 0..3 {
            let f = fixture("0.5", seed);
            let mut emu = f.emulator.clone();
            let config = AlignConfig {
                optim: OptimConfig::default().with_lr(1e-2),
                batch_size: 8,
                ..Default::default()
            };
            let mut opt = Optimizer::new(config.optim.clone());
            let eval = sample_batch(&f.public, 16, &mut ChaCha8Rng::seed_from_u64(77), 24).unwrap();
            let before = alignment_loss(&eval, &f.plan, &f.base, &f.adapter, &emu, 1.0).unwrap();
            align_emulator(
                &config,
                100,
                &f.public,
                &f.plan,
                &f.base,
                &f.adapter,
                &mut emu,
                &mut opt,
                seed,
                PRE_ALIGN_PHASE,
            )
            .unwrap();
            let after = alignment_loss(&eval, &f.plan, &f.base, &f.adapter, &emu, 1.0).unwrap();
            assert!(after < before, "seed {seed}: {before} -> {after}");
        }
    }

    #[test]
    fn invalid_inputs() {
        let f = fixture("0.5", 6);
        let b = batch(&f);
        assert!(matches!(
            alignment_loss(&b, &f.plan, &f.base, &f.adapter, &f.emulator, -1.0),
            Err(Error::Config(_))
        ));
        let mut emu = f.emulator.clone();
        let mut opt = Optimizer::new(OptimConfig::default());
        let r = align_emulator(
            &AlignConfig::default(),
            1,
            &[],
            &f.plan,
            &f.base,
            &f.adapter,
            &mut emu,
            &mut opt,
            0,
            0,
        );
        assert!(matches!(r, Err(Error::Config(_))));
        let none = [false; 5];
        let toks = [1u32, 2, 3, 4, 5];
        let empty = Batch::pack([(&toks[..], &none[..])], 24).unwrap();
        assert!(matches!(
            alignment_loss(&empty, &f.plan, &f.base, &f.adapter, &f.emulator, 1.0),
            Err(Error::EmptySupervision)
        ));
    }
}
