use alloc::format;
use alloc::vec::Vec;

use crate::data::Weight;
use crate::model::LoraSet;
use crate::{Error, Result, Scalar};

/// One client's upload.
#[derive(Clone, Copy, Debug)]
pub struct Update<'a, T> {
    pub client_id: usize,
    pub weight: Weight,
    pub lora: &'a LoraSet<T>,
}

fn gcd(a: u128, b: u128) -> u128 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Factor-wise weighted average `Σ_m p_m · w_m`. Clients are summed in
/// ascending id order whatever order they arrive in.
pub fn aggregate<T: Scalar>(updates: &[Update<'_, T>]) -> Result<LoraSet<T>> {
    let mut sorted: Vec<&Update<'_, T>> = updates.iter().collect();
    sorted.sort_by_key(|u| u.client_id);
    let first = *sorted
        .first()
        .ok_or_else(|| Error::Aggregation("no client updates".into()))?;
    for w in sorted.windows(2) {
        if w[0].client_id == w[1].client_id {
            return Err(Error::Aggregation(format!("client {} submitted twice", w[0].client_id)));
        }
    }
    for u in &sorted {
        if u.weight.den == 0 || u.weight.num == 0 {
            return Err(Error::Aggregation(format!(
                "client {} has a non-positive weight",
                u.client_id
            )));
        }
        if !u.lora.same_structure(first.lora) {
            return Err(Error::Aggregation(format!(
                "client {} LoRA structure differs from client {}",
                u.client_id, first.client_id
            )));
        }
    }
    // Σ num_i/den_i == 1, checked exactly.
    let lcm = sorted
        .iter()
        .fold(1u128, |l, u| l / gcd(l, u.weight.den as u128) * u.weight.den as u128);
    let total: u128 = sorted
        .iter()
        .map(|u| u.weight.num as u128 * (lcm / u.weight.den as u128))
        .sum();
    if total != lcm {
        return Err(Error::Aggregation(format!("weights sum to {total}/{lcm}, expected 1")));
    }

    let mut out = first.lora.zeros_like();
    let n_buf = out.buffers().len();
    let mut acc: Vec<Vec<f64>> = out.buffers().iter().map(|b| alloc::vec![0.0; b.len()]).collect();
    for u in &sorted {
        let p = u.weight.as_f64();
        for (dst, src) in acc.iter_mut().zip(u.lora.buffers()) {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += p * s.as_f64();
            }
        }
    }
    debug_assert_eq!(acc.len(), n_buf);
    for (dst, src) in out.buffers_mut().into_iter().zip(acc) {
        for (d, s) in dst.iter_mut().zip(src) {
            *d = T::lit(s);
        }
    }
    Ok(out)
}
