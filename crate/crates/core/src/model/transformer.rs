use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::lora::BoundLora;
use crate::compute::{Array, Tape, Var};
use crate::rng::{normal, purpose, stream};
use crate::{Error, Result, Scalar};

const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub rng_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 8,
            d_model: 64,
            n_heads: 4,
            d_ff: 192,
            vocab_size: 64,
            max_seq_len: 64,
            rng_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("model.{name} must be >= 1")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::config(format!(
                "model.d_model ({}) must be divisible by model.n_heads ({})",
                self.d_model, self.n_heads
            )));
        }
        if !(self.d_model / self.n_heads).is_multiple_of(2) {
            return Err(Error::config("model head dimension must be even for rotary positions"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Dense weights of one decoder layer (norm gains excluded).
    pub fn layer_params(&self) -> usize {
        4 * self.d_model * self.d_model + 3 * self.d_model * self.d_ff
    }

    /// `(d_in, d_out)` of a projection.
    pub fn proj_dims(&self, p: Projection) -> (usize, usize) {
        match p {
            Projection::Q | Projection::K | Projection::V | Projection::O => (self.d_model, self.d_model),
            Projection::Gate | Projection::Up => (self.d_model, self.d_ff),
            Projection::Down => (self.d_ff, self.d_model),
        }
    }
}

/// Linear maps inside a decoder layer that LoRA can target.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    Q,
    K,
    V,
    O,
    Gate,
    Up,
    Down,
}

impl Projection {
    pub const ALL: [Projection; 7] = [
        Projection::Q,
        Projection::K,
        Projection::V,
        Projection::O,
        Projection::Gate,
        Projection::Up,
        Projection::Down,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Projection::Q => "q",
            Projection::K => "k",
            Projection::V => "v",
            Projection::O => "o",
            Projection::Gate => "gate",
            Projection::Up => "up",
            Projection::Down => "down",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == s)
    }

    pub fn ordinal(self) -> usize {
        self as usize
    }
}

/// Pre-norm decoder block: RMS-norm, rotary causal attention, RMS-norm,
/// SiLU-gated feed-forward, each with a residual connection. Projection
/// weights are stored `[d_in, d_out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLayer<T> {
    pub attn_norm: Array<T>,
    pub wq: Array<T>,
    pub wk: Array<T>,
    pub wv: Array<T>,
    pub wo: Array<T>,
    pub ffn_norm: Array<T>,
    pub w_gate: Array<T>,
    pub w_up: Array<T>,
    pub w_down: Array<T>,
}

impl<T: Scalar> DecoderLayer<T> {
    pub fn weight(&self, p: Projection) -> &Array<T> {
        match p {
            Projection::Q => &self.wq,
            Projection::K => &self.wk,
            Projection::V => &self.wv,
            Projection::O => &self.wo,
            Projection::Gate => &self.w_gate,
            Projection::Up => &self.w_up,
            Projection::Down => &self.w_down,
        }
    }

    fn arrays(&self) -> [(&'static str, &Array<T>); 9] {
        [
            ("attn_norm", &self.attn_norm),
            ("q", &self.wq),
            ("k", &self.wk),
            ("v", &self.wv),
            ("o", &self.wo),
            ("ffn_norm", &self.ffn_norm),
            ("gate", &self.w_gate),
            ("up", &self.w_up),
            ("down", &self.w_down),
        ]
    }

    fn arrays_mut(&mut self) -> [&mut Array<T>; 9] {
        [
            &mut self.attn_norm,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ffn_norm,
            &mut self.w_gate,
            &mut self.w_up,
            &mut self.w_down,
        ]
    }
}

/// Decoder-only transformer. Layer 0 is nearest the input, layer `n-1`
/// nearest the output head.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerStack<T> {
    pub config: ModelConfig,
    pub embedding: Array<T>,
    pub layers: Vec<DecoderLayer<T>>,
    pub final_norm: Array<T>,
    pub head: Array<T>,
}

fn gaussian<T: Scalar>(rng: &mut impl Rng, shape: &[usize], std: f64) -> Array<T> {
    Array::from_fn(shape, |_| T::lit(std * normal(rng)))
}

impl<T: Scalar> TransformerStack<T> {
    /// Random initialization from `config.rng_seed`.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let (d, f, v) = (config.d_model, config.d_ff, config.vocab_size);
        let seed = config.rng_seed;
        let mut rng = stream(seed, &[purpose::BASE_INIT, u64::MAX]);
        let embedding = gaussian(&mut rng, &[v, d], 1.0);
        let head = gaussian(&mut rng, &[d, v], 1.0 / libm_sqrt(d));
        let out_std = 1.0 / libm_sqrt(2 * config.n_layers * d);
        let layers = (0..config.n_layers)
            .map(|i| {
                let mut rng = stream(seed, &[purpose::BASE_INIT, i as u64]);
                let ones = Array::from_fn(&[d], |_| T::one());
                DecoderLayer {
                    attn_norm: ones.clone(),
                    wq: gaussian(&mut rng, &[d, d], 1.0 / libm_sqrt(d)),
                    wk: gaussian(&mut rng, &[d, d], 1.0 / libm_sqrt(d)),
                    wv: gaussian(&mut rng, &[d, d], 1.0 / libm_sqrt(d)),
                    wo: gaussian(&mut rng, &[d, d], out_std),
                    ffn_norm: ones,
                    w_gate: gaussian(&mut rng, &[d, f], 1.0 / libm_sqrt(d)),
                    w_up: gaussian(&mut rng, &[d, f], 1.0 / libm_sqrt(d)),
                    w_down: gaussian(&mut rng, &[f, d], out_std),
                }
            })
            .collect();
        Ok(TransformerStack {
            config: config.clone(),
            embedding,
            layers,
            final_norm: Array::from_fn(&[d], |_| T::one()),
            head,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Every weight with a stable name, in canonical order.
    pub fn named_arrays(&self) -> Vec<(String, &Array<T>)> {
        let mut out = vec![(String::from("embedding"), &self.embedding)];
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, a) in layer.arrays() {
                out.push((format!("layers.{i}.{name}"), a));
            }
        }
        out.push((String::from("final_norm"), &self.final_norm));
        out.push((String::from("head"), &self.head));
        out
    }

    /// Mutable view in the same order as [`named_arrays`](Self::named_arrays).
    pub fn arrays_mut(&mut self) -> Vec<&mut Array<T>> {
        let mut out = vec![&mut self.embedding];
        for layer in self.layers.iter_mut() {
            out.extend(layer.arrays_mut());
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.head);
        out
    }

    /// Rebuilds a stack from named arrays produced by [`named_arrays`](Self::named_arrays).
    pub fn from_named(config: &ModelConfig, mut lookup: impl FnMut(&str) -> Option<Array<T>>) -> Result<Self> {
        let mut template = Self::init(config)?;
        let names: Vec<String> = template.named_arrays().into_iter().map(|(n, _)| n).collect();
        for (name, slot) in names.iter().zip(template.arrays_mut()) {
            let a = lookup(name).ok_or_else(|| Error::Input(format!("missing array {name}")))?;
            if a.shape() != slot.shape() {
                return Err(Error::Shape {
                    op: "load",
                    lhs: slot.shape().to_vec(),
                    rhs: a.shape().to_vec(),
                });
            }
            *slot = a;
        }
        Ok(template)
    }

    pub fn cast<U: Scalar>(&self) -> TransformerStack<U> {
        TransformerStack {
            config: self.config.clone(),
            embedding: self.embedding.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| DecoderLayer {
                    attn_norm: l.attn_norm.cast(),
                    wq: l.wq.cast(),
                    wk: l.wk.cast(),
                    wv: l.wv.cast(),
                    wo: l.wo.cast(),
                    ffn_norm: l.ffn_norm.cast(),
                    w_gate: l.w_gate.cast(),
                    w_up: l.w_up.cast(),
                    w_down: l.w_down.cast(),
                })
                .collect(),
            final_norm: self.final_norm.cast(),
            head: self.head.cast(),
        }
    }

    /// Plain forward through all layers without LoRA.
    pub fn logits(&self, batch: &Batch) -> Result<Array<T>> {
        let mut tape = Tape::new();
        let mut bound = BoundStack::new(&mut tape, self, false);
        let mut x = bound.embed(&mut tape, batch)?;
        for i in 0..self.n_layers() {
            x = bound.layer(&mut tape, i, x, batch, None)?;
        }
        let logits = bound.head(&mut tape, x)?;
        Ok(tape.value(logits).clone())
    }
}

fn libm_sqrt(x: usize) -> f64 {
    libm::sqrt(x as f64)
}

/// Several token sequences packed along the row axis. Each sequence is a
/// segment with its own positions; attention never crosses segments.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub tokens: Vec<usize>,
    pub positions: Vec<usize>,
    pub segments: Vec<Range<usize>>,
    /// Next-token target for each row (the last row of a segment has none).
    pub targets: Vec<usize>,
    /// Rows whose next token is ground truth.
    pub target_mask: Vec<bool>,
}

impl Batch {
    pub fn pack<'a>(seqs: impl IntoIterator<Item = (&'a [u32], &'a [bool])>, max_seq_len: usize) -> Result<Self> {
        let mut b = Batch {
            tokens: Vec::new(),
            positions: Vec::new(),
            segments: Vec::new(),
            targets: Vec::new(),
            target_mask: Vec::new(),
        };
        for (tokens, gt) in seqs {
            if tokens.is_empty() {
                return Err(Error::Input("empty sequence".into()));
            }
            if tokens.len() > max_seq_len {
                return Err(Error::Input(format!(
                    "sequence length {} exceeds max_seq_len {max_seq_len}",
                    tokens.len()
                )));
            }
            if gt.len() != tokens.len() {
                return Err(Error::Shape {
                    op: "batch",
                    lhs: vec![tokens.len()],
                    rhs: vec![gt.len()],
                });
            }
            let start = b.tokens.len();
            for (t, &tok) in tokens.iter().enumerate() {
                b.tokens.push(tok as usize);
                b.positions.push(t);
                match tokens.get(t + 1) {
                    Some(&next) => {
                        b.targets.push(next as usize);
                        b.target_mask.push(gt[t + 1]);
                    }
                    None => {
                        b.targets.push(0);
                        b.target_mask.push(false);
                    }
                }
            }
            b.segments.push(start..b.tokens.len());
        }
        if b.tokens.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        Ok(b)
    }

    pub fn rows(&self) -> usize {
        self.tokens.len()
    }

    pub fn supervised(&self) -> usize {
        self.target_mask.iter().filter(|&&m| m).count()
    }
}

pub struct LayerVars {
    pub attn_norm: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub ffn_norm: Var,
    pub w_gate: Var,
    pub w_up: Var,
    pub w_down: Var,
}

impl LayerVars {
    fn proj(&self, p: Projection) -> Var {
        match p {
            Projection::Q => self.wq,
            Projection::K => self.wk,
            Projection::V => self.wv,
            Projection::O => self.wo,
            Projection::Gate => self.w_gate,
            Projection::Up => self.w_up,
            Projection::Down => self.w_down,
        }
    }

    fn all(&self) -> [Var; 9] {
        [
            self.attn_norm,
            self.wq,
            self.wk,
            self.wv,
            self.wo,
            self.ffn_norm,
            self.w_gate,
            self.w_up,
            self.w_down,
        ]
    }
}

/// Base weights placed on a tape. Layers are bound on first use so a
/// forward over a subset of layers only touches that subset.
pub struct BoundStack<'m, T> {
    stack: &'m TransformerStack<T>,
    trainable: bool,
    embedding: Var,
    final_norm: Var,
    head: Var,
    layers: Vec<Option<LayerVars>>,
}

impl<'m, T: Scalar> BoundStack<'m, T> {
    pub fn new(tape: &mut Tape<T>, stack: &'m TransformerStack<T>, trainable: bool) -> Self {
        BoundStack {
            stack,
            trainable,
            embedding: tape.leaf(stack.embedding.clone(), trainable),
            final_norm: tape.leaf(stack.final_norm.clone(), trainable),
            head: tape.leaf(stack.head.clone(), trainable),
            layers: (0..stack.n_layers()).map(|_| None).collect(),
        }
    }

    fn layer_vars(&mut self, tape: &mut Tape<T>, i: usize) -> &LayerVars {
        let (stack, tr) = (self.stack, self.trainable);
        self.layers[i].get_or_insert_with(|| {
            let l = &stack.layers[i];
            LayerVars {
                attn_norm: tape.leaf(l.attn_norm.clone(), tr),
                wq: tape.leaf(l.wq.clone(), tr),
                wk: tape.leaf(l.wk.clone(), tr),
                wv: tape.leaf(l.wv.clone(), tr),
                wo: tape.leaf(l.wo.clone(), tr),
                ffn_norm: tape.leaf(l.ffn_norm.clone(), tr),
                w_gate: tape.leaf(l.w_gate.clone(), tr),
                w_up: tape.leaf(l.w_up.clone(), tr),
                w_down: tape.leaf(l.w_down.clone(), tr),
            }
        })
    }

    pub fn embed(&mut self, tape: &mut Tape<T>, batch: &Batch) -> Result<Var> {
        tape.embedding(self.embedding, &batch.tokens)
    }

    fn project(
        tape: &mut Tape<T>,
        x: Var,
        w: Var,
        lora: Option<&BoundLora>,
        layer: usize,
        p: Projection,
    ) -> Result<Var> {
        let base = tape.matmul(x, w)?;
        match lora.and_then(|l| l.get(layer, p)) {
            None => Ok(base),
            Some((a_t, b_t, scale)) => {
                let down = tape.matmul(x, a_t)?;
                let up = tape.matmul(down, b_t)?;
                let up = tape.scale(up, T::lit(scale));
                tape.add(base, up)
            }
        }
    }

    /// One decoder layer. `lora` supplies optional low-rank deltas keyed by
    /// base layer index.
    pub fn layer(
        &mut self,
        tape: &mut Tape<T>,
        i: usize,
        x: Var,
        batch: &Batch,
        lora: Option<&BoundLora>,
    ) -> Result<Var> {
        let cfg = &self.stack.config;
        let heads = cfg.n_heads;
        let eps = T::lit(NORM_EPS);
        let lv = self.layer_vars(tape, i);
        let (attn_norm, ffn_norm) = (lv.attn_norm, lv.ffn_norm);
        let w: [Var; 7] = Projection::ALL.map(|p| lv.proj(p));
        let h = tape.rms_norm(x, attn_norm, eps)?;
        let q = Self::project(tape, h, w[0], lora, i, Projection::Q)?;
        let k = Self::project(tape, h, w[1], lora, i, Projection::K)?;
        let v = Self::project(tape, h, w[2], lora, i, Projection::V)?;
        let q = tape.rope(q, heads, &batch.positions)?;
        let k = tape.rope(k, heads, &batch.positions)?;
        let a = tape.causal_attention(q, k, v, heads, &batch.segments)?;
        let o = Self::project(tape, a, w[3], lora, i, Projection::O)?;
        let x = tape.add(x, o)?;
        let h = tape.rms_norm(x, ffn_norm, eps)?;
        let g = Self::project(tape, h, w[4], lora, i, Projection::Gate)?;
        let g = tape.silu(g);
        let u = Self::project(tape, h, w[5], lora, i, Projection::Up)?;
        let gu = tape.mul(g, u)?;
        let f = Self::project(tape, gu, w[6], lora, i, Projection::Down)?;
        tape.add(x, f)
    }

    pub fn head(&mut self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let h = tape.rms_norm(x, self.final_norm, T::lit(NORM_EPS))?;
        tape.matmul(h, self.head)
    }

    /// Variables in [`TransformerStack::named_arrays`] order; `None` for
    /// layers never bound on this tape.
    pub fn vars(&self) -> Vec<Option<Var>> {
        let mut out = vec![Some(self.embedding)];
        for l in &self.layers {
            match l {
                Some(lv) => out.extend(lv.all().map(Some)),
                None => out.extend([None; 9]),
            }
        }
        out.push(Some(self.final_norm));
        out.push(Some(self.head));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            n_layers: 3,
            d_model: 8,
            n_heads: 2,
            d_ff: 12,
            vocab_size: 11,
            max_seq_len: 16,
            rng_seed: 3,
        }
    }

    fn batch(seqs: &[&[u32]]) -> Batch {
        let masks: Vec<Vec<bool>> = seqs.iter().map(|s| vec![true; s.len()]).collect();
        Batch::pack(seqs.iter().zip(&masks).map(|(s, m)| (*s, m.as_slice())), 16).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = ModelConfig {
            d_model: 10,
            n_heads: 4,
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let zero = ModelConfig {
            n_layers: 0,
            ..Default::default()
        };
        assert!(zero.validate().is_err());
    }

    #[test]
    fn forward_is_causal() {
        let m = TransformerStack::<f64>::init(&tiny()).unwrap();
        let a = m.logits(&batch(&[&[1, 2, 3, 4, 5]])).unwrap();
        let b = m.logits(&batch(&[&[1, 2, 3, 9, 0]])).unwrap();
        for r in 0..3 {
            assert_eq!(a.row(r), b.row(r));
        }
        assert_ne!(a.row(3), b.row(3));
    }

    #[test]
    fn packed_sequences_are_independent() {
        let m = TransformerStack::<f64>::init(&tiny()).unwrap();
        let alone = m.logits(&batch(&[&[4, 5, 6]])).unwrap();
        let packed = m.logits(&batch(&[&[1, 2], &[4, 5, 6]])).unwrap();
        for r in 0..3 {
            for (x, y) in alone.row(r).iter().zip(packed.row(r + 2)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn batch_targets_shift_by_one() {
        let toks: [u32; 4] = [1, 2, 3, 4];
        let gt = [false, false, true, true];
        let b = Batch::pack([(&toks[..], &gt[..])], 8).unwrap();
        assert_eq!(b.targets, vec![2, 3, 4, 0]);
        assert_eq!(b.target_mask, vec![false, true, true, false]);
        assert!(Batch::pack([(&toks[..], &gt[..])], 3).is_err());
    }

    #[test]
    fn named_roundtrip() {
        let m = TransformerStack::<f32>::init(&tiny()).unwrap();
        let named: Vec<(String, Array<f32>)> = m.named_arrays().into_iter().map(|(n, a)| (n, a.clone())).collect();
        let back =
            TransformerStack::from_named(&tiny(), |n| named.iter().find(|(k, _)| k == n).map(|(_, a)| a.clone()))
                .unwrap();
        assert_eq!(m, back);
    }
}
