use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::align::sample_batch;
use crate::compute::Tape;
use crate::data::Sample;
use crate::model::{BoundStack, TransformerStack};
use crate::optim::{OptimConfig, Optimizer};
use crate::rng::{purpose, stream};
use crate::{Error, Result, Scalar};

/// Full-parameter training that turns a random stack into the frozen base.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 300,
            batch_size: 16,
            optim: OptimConfig::default().with_lr(3e-3),
        }
    }
}

/// Trains every base weight on masked next-token loss over `data`.
/// Returns the loss before each step.
pub fn pretrain_base<T: Scalar>(
    base: &mut TransformerStack<T>,
    data: &[Sample],
    config: &PretrainConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    if config.steps > 0 && data.is_empty() {
        return Err(Error::config("pretraining data is empty"));
    }
    if config.batch_size == 0 {
        return Err(Error::config("pretrain.batch_size must be >= 1"));
    }
    let mut opt = Optimizer::new(config.optim.clone());
    let mut trace = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let mut rng = stream(seed, &[purpose::PRETRAIN, step as u64]);
        let batch = sample_batch(data, config.batch_size, &mut rng, base.config.max_seq_len)?;
        let mut tape = Tape::new();
        let mut bound = BoundStack::new(&mut tape, base, true);
        let mut x = bound.embed(&mut tape, &batch)?;
        for i in 0..base.n_layers() {
            x = bound.layer(&mut tape, i, x, &batch, None)?;
        }
        let logits = bound.head(&mut tape, x)?;
        let loss = tape.softmax_cross_entropy(logits, &batch.targets, &batch.target_mask)?;
        let grads = tape.backward(loss)?;
        let g: Vec<Vec<T>> = bound
            .vars()
            .into_iter()
            .map(|v| grads.slice(v.expect("all layers bound")).expect("trainable").to_vec())
            .collect();
        trace.push(tape.value(loss).item().as_f64());
        let refs: Vec<&[T]> = g.iter().map(|x| x.as_slice()).collect();
        let mut params: Vec<&mut [T]> = base.arrays_mut().into_iter().map(|a| a.data_mut()).collect();
        opt.step(&mut params, &refs);
    }
    Ok(trace)
}
