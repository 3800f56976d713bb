use alloc::vec::Vec;

use crate::compute::{Array, Tape, Var};
use crate::model::{BoundLora, LoraSet};
use crate::{Result, Scalar};

/// Effective adapter deltas `(α/r)·B·A` for every pair, flattened row-major
/// and concatenated in `(layer, projection)` order.
pub fn reconstruct<T: Scalar>(lora: &LoraSet<T>) -> Array<T> {
    let scale = T::lit(lora.scale());
    let mut out = Vec::new();
    for p in &lora.pairs {
        let (d_out, r, d_in) = (p.b.rows(), p.b.cols(), p.a.cols());
        let (a, b) = (p.a.data(), p.b.data());
        for i in 0..d_out {
            for j in 0..d_in {
                let mut acc = T::zero();
                for k in 0..r {
                    acc = acc + b[i * r + k] * a[k * d_in + j];
                }
                out.push(scale * acc);
            }
        }
    }
    let n = out.len();
    Array::new(alloc::vec![n], out).expect("flat")
}

/// Tape version of [`reconstruct`] over bound factors.
pub fn reconstruct_on_tape<T: Scalar>(tape: &mut Tape<T>, bound: &BoundLora) -> Result<Var> {
    let mut parts = Vec::with_capacity(bound.entries.len());
    for e in &bound.entries {
        let ba = tape.matmul(e.b, e.a)?;
        parts.push(tape.scale(ba, T::lit(bound.scale)));
    }
    Ok(tape.concat(&parts))
}

/// `(ε/2)·‖ŵ − anchor‖²` on the tape.
pub fn proximal_term<T: Scalar>(tape: &mut Tape<T>, bound: &BoundLora, anchor: &Array<T>, eps: f64) -> Result<Var> {
    let w = reconstruct_on_tape(tape, bound)?;
    let a = tape.constant(anchor.clone());
    let sq = tape.l2_distance_sq(w, a, None)?;
    Ok(tape.scale(sq, T::lit(eps / 2.0)))
}
