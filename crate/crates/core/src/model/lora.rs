//! Low-rank adapters attached to decoder projections.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::transformer::{ModelConfig, Projection};
use crate::compute::{Array, Tape, Var};
use crate::rng::{normal, purpose, stream};
use crate::{Error, Result, Scalar};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<Projection>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 8,
            alpha: 16.0,
            targets: vec![Projection::Q, Projection::V],
        }
    }
}

impl LoraConfig {
    /// Trainable parameters LoRA adds to one layer: `Σ r·(d_in + d_out)`.
    pub fn params_per_layer(&self, model: &ModelConfig) -> usize {
        self.targets
            .iter()
            .map(|&p| {
                let (i, o) = model.proj_dims(p);
                self.rank * (i + o)
            })
            .sum()
    }
}

/// `a: [r, d_in]` (down), `b: [d_out, r]` (up). Delta on the projection is
/// `(alpha / r) · b · a`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraPair<T> {
    pub layer: usize,
    pub proj: Projection,
    pub a: Array<T>,
    pub b: Array<T>,
}

/// LoRA factors for a set of layers, kept sorted by `(layer, projection)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraSet<T> {
    pub rank: usize,
    pub alpha: f64,
    pub pairs: Vec<LoraPair<T>>,
}

/// Creates fresh factors on `target_layers`: `a` Gaussian with std
/// `1/sqrt(d_in)`, `b` zero. Each factor draws from its own stream, so the
/// values depend only on `(seed, layer, projection)`.
pub fn inject_lora<T: Scalar>(
    model: &ModelConfig,
    target_layers: &[usize],
    config: &LoraConfig,
    seed: u64,
) -> Result<LoraSet<T>> {
    if config.rank == 0 {
        return Err(Error::config("lora.rank must be >= 1"));
    }
    if !(config.alpha.is_finite()) {
        return Err(Error::config("lora.alpha must be finite"));
    }
    let mut seen = BTreeSet::new();
    for &l in target_layers {
        if l >= model.n_layers {
            return Err(Error::config(format!(
                "LoRA target layer {l} does not exist (n_layers = {})",
                model.n_layers
            )));
        }
        if !seen.insert(l) {
            return Err(Error::config(format!("duplicate LoRA injection on layer {l}")));
        }
    }
    let targets: BTreeSet<Projection> = config.targets.iter().copied().collect();
    if targets.len() != config.targets.len() {
        return Err(Error::config("duplicate projection in lora.targets"));
    }
    let mut pairs = Vec::new();
    for &layer in &seen {
        for &proj in &targets {
            let (d_in, d_out) = model.proj_dims(proj);
            let mut rng = stream(seed, &[purpose::LORA_INIT, layer as u64, proj.ordinal() as u64]);
            let std = 1.0 / libm::sqrt(d_in as f64);
            pairs.push(LoraPair {
                layer,
                proj,
                a: Array::from_fn(&[config.rank, d_in], |_| T::lit(std * normal(&mut rng))),
                b: Array::zeros(&[d_out, config.rank]),
            });
        }
    }
    Ok(LoraSet {
        rank: config.rank,
        alpha: config.alpha,
        pairs,
    })
}

impl<T: Scalar> LoraSet<T> {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn layers(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.pairs.iter().map(|p| p.layer).collect();
        v.dedup();
        v
    }

    pub fn param_count(&self) -> usize {
        self.pairs.iter().map(|p| p.a.len() + p.b.len()).sum()
    }

    /// Adds the pairs of `other`; any layer present in both is an error.
    pub fn extend(&mut self, other: LoraSet<T>) -> Result<()> {
        if other.rank != self.rank || other.alpha != self.alpha {
            return Err(Error::config("cannot merge LoRA sets with different rank/alpha"));
        }
        let mine: BTreeSet<usize> = self.layers().into_iter().collect();
        if let Some(l) = other.layers().into_iter().find(|l| mine.contains(l)) {
            return Err(Error::config(format!("duplicate LoRA injection on layer {l}")));
        }
        self.pairs.extend(other.pairs);
        self.pairs.sort_by_key(|p| (p.layer, p.proj));
        Ok(())
    }

    /// Same layers, projections, rank, alpha and factor shapes.
    pub fn same_structure(&self, other: &LoraSet<T>) -> bool {
        self.rank == other.rank
            && self.alpha == other.alpha
            && self.pairs.len() == other.pairs.len()
            && self.pairs.iter().zip(&other.pairs).all(|(x, y)| {
                x.layer == y.layer && x.proj == y.proj && x.a.shape() == y.a.shape() && x.b.shape() == y.b.shape()
            })
    }

    /// Factor buffers `[a0, b0, a1, b1, ...]`.
    pub fn buffers(&self) -> Vec<&[T]> {
        self.pairs.iter().flat_map(|p| [p.a.data(), p.b.data()]).collect()
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut [T]> {
        self.pairs
            .iter_mut()
            .flat_map(|p| [p.a.data_mut(), p.b.data_mut()])
            .collect()
    }

    pub fn zeros_like(&self) -> Self {
        LoraSet {
            rank: self.rank,
            alpha: self.alpha,
            pairs: self
                .pairs
                .iter()
                .map(|p| LoraPair {
                    layer: p.layer,
                    proj: p.proj,
                    a: Array::zeros(p.a.shape()),
                    b: Array::zeros(p.b.shape()),
                })
                .collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> LoraSet<U> {
        LoraSet {
            rank: self.rank,
            alpha: self.alpha,
            pairs: self
                .pairs
                .iter()
                .map(|p| LoraPair {
                    layer: p.layer,
                    proj: p.proj,
                    a: p.a.cast(),
                    b: p.b.cast(),
                })
                .collect(),
        }
    }

    /// Puts every factor on the tape.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Result<BoundLora> {
        let mut entries = Vec::with_capacity(self.pairs.len());
        for p in &self.pairs {
            let a = tape.leaf(p.a.clone(), trainable);
            let b = tape.leaf(p.b.clone(), trainable);
            let a_t = tape.transpose(a)?;
            let b_t = tape.transpose(b)?;
            entries.push(BoundPair {
                layer: p.layer,
                proj: p.proj,
                a,
                b,
                a_t,
                b_t,
            });
        }
        Ok(BoundLora {
            scale: self.scale(),
            entries,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundPair {
    pub layer: usize,
    pub proj: Projection,
    pub a: Var,
    pub b: Var,
    a_t: Var,
    b_t: Var,
}

/// A [`LoraSet`] placed on a tape.
#[derive(Clone, Debug)]
pub struct BoundLora {
    pub scale: f64,
    pub entries: Vec<BoundPair>,
}

impl BoundLora {
    /// `(aᵀ, bᵀ, scale)` for a projection, if adapted.
    pub fn get(&self, layer: usize, proj: Projection) -> Option<(Var, Var, f64)> {
        self.entries
            .iter()
            .find(|e| e.layer == layer && e.proj == proj)
            .map(|e| (e.a_t, e.b_t, self.scale))
    }

    /// Factor vars in [`LoraSet::buffers`] order.
    pub fn factor_vars(&self) -> Vec<Var> {
        self.entries.iter().flat_map(|e| [e.a, e.b]).collect()
    }

    /// Merges two bindings covering disjoint layers.
    pub fn union(&self, other: &BoundLora) -> BoundLora {
        debug_assert_eq!(self.scale, other.scale);
        let mut entries = self.entries.clone();
        entries.extend(other.entries.iter().copied());
        BoundLora {
            scale: self.scale,
            entries,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_scale_param_count() {
        let model = ModelConfig {
            d_model: 4096,
            d_ff: 11008,
            n_heads: 32,
            ..Default::default()
        };
        assert_eq!(LoraConfig::default().params_per_layer(&model), 131_072);
    }

    #[test]
    fn toy_param_count() {
        let model = ModelConfig {
            d_model: 32,
            d_ff: 96,
            ..Default::default()
        };
        let cfg = LoraConfig {
            rank: 4,
            ..Default::default()
        };
        assert_eq!(cfg.params_per_layer(&model), 512);
        let set = inject_lora::<f64>(&model, &[1, 5], &cfg, 0).unwrap();
        assert_eq!(set.param_count(), 1024);
    }

    #[test]
    fn duplicate_layer_rejected() {
        let model = ModelConfig::default();
        let cfg = LoraConfig::default();
        assert!(matches!(
            inject_lora::<f64>(&model, &[2, 2], &cfg, 0),
            Err(Error::Config(_))
        ));
        let mut a = inject_lora::<f64>(&model, &[1, 2], &cfg, 0).unwrap();
        let b = inject_lora::<f64>(&model, &[2, 3], &cfg, 0).unwrap();
        assert!(a.extend(b).is_err());
        let c = inject_lora::<f64>(&model, &[4], &cfg, 0).unwrap();
        a.extend(c).unwrap();
        assert_eq!(a.layers(), vec![1, 2, 4]);
    }

    #[test]
    fn missing_layer_rejected() {
        let model = ModelConfig::default();
        assert!(inject_lora::<f64>(&model, &[8], &LoraConfig::default(), 0).is_err());
    }

    #[test]
    fn init_zeroes_b() {
        let set = inject_lora::<f64>(&ModelConfig::default(), &[0], &LoraConfig::default(), 9).unwrap();
        for p in &set.pairs {
            assert!(p.b.data().iter().all(|&x| x == 0.0));
            assert!(p.a.data().iter().any(|&x| x != 0.0));
        }
    }
}
