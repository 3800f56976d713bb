use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::compute::Tape;
use crate::data::Sample;
use crate::model::{Assembled, Batch, Trainable};
use crate::{Error, Result, Scalar};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    /// Mean next-token cross-entropy over all answer tokens.
    pub loss: f64,
    /// Fraction of samples whose greedy answer matches exactly.
    pub exact_match: f64,
}

fn pack(samples: &[&Sample], max_seq_len: usize) -> Result<Batch> {
    Batch::pack(
        samples.iter().map(|s| (s.tokens.as_slice(), s.gt_mask.as_slice())),
        max_seq_len,
    )
}

fn argmax<T: Scalar>(row: &[T]) -> u32 {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best as u32
}

/// Greedy continuation of every prompt for exactly as many tokens as the
/// reference answer has.
pub fn greedy_answers<T: Scalar>(model: &Assembled<'_, T>, samples: &[&Sample]) -> Result<Vec<Vec<u32>>> {
    let max_len = model.base.config.max_seq_len;
    let mut seqs: Vec<Vec<u32>> = samples.iter().map(|s| s.prompt().to_vec()).collect();
    let want: Vec<usize> = samples.iter().map(|s| s.answer().len()).collect();
    let steps = want.iter().copied().max().unwrap_or(0);
    for _ in 0..steps {
        let active: Vec<usize> = (0..seqs.len())
            .filter(|&i| seqs[i].len() - samples[i].answer_start() < want[i])
            .collect();
        if active.is_empty() {
            break;
        }
        let masks: Vec<Vec<bool>> = active.iter().map(|&i| alloc::vec![false; seqs[i].len()]).collect();
        let batch = Batch::pack(
            active
                .iter()
                .zip(&masks)
                .map(|(&i, m)| (seqs[i].as_slice(), m.as_slice())),
            max_len,
        )?;
        let logits = model.logits(&batch)?;
        for (k, &i) in active.iter().enumerate() {
            let last = batch.segments[k].end - 1;
            seqs[i].push(argmax(logits.row(last)));
        }
    }
    Ok(seqs
        .into_iter()
        .zip(samples)
        .map(|(s, x)| s[x.answer_start()..].to_vec())
        .collect())
}

/// Masked loss and exact-match accuracy of `model` on `samples`.
pub fn evaluate<T: Scalar>(model: &Assembled<'_, T>, samples: &[Sample], batch_size: usize) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Input("evaluation set is empty".into()));
    }
    let batch_size = batch_size.max(1);
    let (mut loss_sum, mut tokens, mut correct) = (0.0, 0usize, 0usize);
    for chunk in samples.chunks(batch_size) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let batch = pack(&refs, model.base.config.max_seq_len)?;
        let mut tape = Tape::new();
        let fwd = model.forward(&mut tape, &batch, Trainable::default())?;
        let ce = tape.softmax_cross_entropy(fwd.logits, &batch.targets, &batch.target_mask)?;
        let n = batch.supervised();
        loss_sum += tape.value(ce).item().as_f64() * n as f64;
        tokens += n;
        let answers = greedy_answers(model, &refs)?;
        correct += answers
            .iter()
            .zip(&refs)
            .filter(|(a, s)| a.as_slice() == s.answer())
            .count();
    }
    Ok(EvalReport {
        samples: samples.len(),
        loss: loss_sum / tokens as f64,
        exact_match: correct as f64 / samples.len() as f64,
    })
}
