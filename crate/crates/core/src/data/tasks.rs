use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::vocab::{self, id_of, BOS, EQUALS, PLUS};
use crate::rng::{purpose, stream};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Copy,
    Reverse,
    ModularAdd,
    Sort,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [TaskKind::Copy, TaskKind::Reverse, TaskKind::ModularAdd, TaskKind::Sort];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
            TaskKind::ModularAdd => "modular_add",
            TaskKind::Sort => "sort",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    pub fn tag(self) -> char {
        match self {
            TaskKind::Copy => 'C',
            TaskKind::Reverse => 'R',
            TaskKind::ModularAdd => 'A',
            TaskKind::Sort => 'S',
        }
    }

    fn ordinal(self) -> u64 {
        self as u64
    }
}

/// Shape parameters shared by the generators.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskParams {
    /// Letter strings for copy/reverse/sort have lengths in `min_len..=max_len`.
    pub min_len: usize,
    pub max_len: usize,
    /// Letters drawn from the first `letters` lowercase symbols.
    pub letters: usize,
    /// Operands and result of modular_add are digits `< modulus`.
    pub modulus: usize,
}

impl Default for TaskParams {
    fn default() -> Self {
        TaskParams {
            min_len: 3,
            max_len: 6,
            letters: 10,
            modulus: 10,
        }
    }
}

impl TaskParams {
    pub fn validate(&self) -> Result<()> {
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::config(format!(
                "task lengths must satisfy 1 <= min_len <= max_len (got {}..={})",
                self.min_len, self.max_len
            )));
        }
        if self.letters == 0 || self.letters > 26 {
            return Err(Error::config("task letters must be in 1..=26"));
        }
        if self.modulus < 2 || self.modulus > 10 {
            return Err(Error::config("task modulus must be in 2..=10"));
        }
        Ok(())
    }

    /// Longest sequence any kind can produce.
    pub fn max_seq_len(&self) -> usize {
        (3 + 2 * self.max_len).max(7)
    }
}

/// One instruction-style example. Tokens are `^ TAG prompt = answer`;
/// `gt_mask` marks the answer suffix.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Sample {
    pub tokens: Vec<u32>,
    pub gt_mask: Vec<bool>,
    pub category: TaskKind,
}

impl Sample {
    fn build(kind: TaskKind, prompt: &str, answer: &str) -> Self {
        let mut text = String::new();
        text.push(BOS);
        text.push(kind.tag());
        text.push_str(prompt);
        text.push(EQUALS);
        let prompt_len = text.chars().count();
        text.push_str(answer);
        let tokens = vocab::encode(&text).expect("generator emits vocabulary symbols");
        let gt_mask = (0..tokens.len()).map(|i| i >= prompt_len).collect();
        Sample {
            tokens,
            gt_mask,
            category: kind,
        }
    }

    /// Tokens before the answer region.
    pub fn prompt(&self) -> &[u32] {
        &self.tokens[..self.answer_start()]
    }

    pub fn answer(&self) -> &[u32] {
        &self.tokens[self.answer_start()..]
    }

    pub fn answer_start(&self) -> usize {
        self.gt_mask.iter().position(|&m| m).unwrap_or(self.tokens.len())
    }

    /// Non-empty mask that forms a suffix of the sequence.
    pub fn is_well_formed(&self) -> bool {
        let start = self.answer_start();
        self.tokens.len() == self.gt_mask.len() && start < self.tokens.len() && self.gt_mask[start..].iter().all(|&m| m)
    }

    pub fn text(&self) -> String {
        vocab::decode(&self.tokens)
    }
}

/// Smallest vocabulary that covers every symbol `kind` can emit.
pub fn required_vocab(kind: TaskKind, params: &TaskParams) -> usize {
    let tag = id_of(kind.tag()).expect("tag in alphabet");
    let body = match kind {
        TaskKind::ModularAdd => id_of(PLUS)
            .expect("plus")
            .max(id_of(vocab::digit(params.modulus - 1)).expect("digit")),
        _ => id_of(vocab::letter(params.letters - 1)).expect("letter"),
    };
    let fixed = id_of(BOS).expect("bos").max(id_of(EQUALS).expect("equals"));
    tag.max(body).max(fixed) as usize + 1
}

fn one(kind: TaskKind, params: &TaskParams, rng: &mut impl Rng) -> Sample {
    let mut letters = || -> String {
        let len = rng.random_range(params.min_len..=params.max_len);
        (0..len)
            .map(|_| vocab::letter(rng.random_range(0..params.letters)))
            .collect()
    };
    match kind {
        TaskKind::Copy => {
            let s = letters();
            Sample::build(kind, &s, &s)
        }
        TaskKind::Reverse => {
            let s = letters();
            let r: String = s.chars().rev().collect();
            Sample::build(kind, &s, &r)
        }
        TaskKind::Sort => {
            let s = letters();
            let mut c: Vec<char> = s.chars().collect();
            c.sort_unstable();
            let sorted: String = c.into_iter().collect();
            Sample::build(kind, &s, &sorted)
        }
        TaskKind::ModularAdd => {
            let a = rng.random_range(0..params.modulus);
            let b = rng.random_range(0..params.modulus);
            let prompt = format!("{}{}{}", vocab::digit(a), PLUS, vocab::digit(b));
            let ans = format!("{}", vocab::digit((a + b) % params.modulus));
            Sample::build(kind, &prompt, &ans)
        }
    }
}

/// `count` samples of one kind, fully determined by `(kind, count, seed, params)`.
pub fn generate_task(
    kind: TaskKind,
    count: usize,
    seed: u64,
    vocab_size: usize,
    params: &TaskParams,
) -> Result<Vec<Sample>> {
    params.validate()?;
    if count == 0 {
        return Err(Error::config("task count must be >= 1"));
    }
    let need = required_vocab(kind, params);
    if vocab_size < need {
        return Err(Error::config(format!(
            "vocab_size {vocab_size} too small for task {}: needs at least {need}",
            kind.name()
        )));
    }
    let mut rng = stream(seed, &[purpose::DATA, kind.ordinal()]);
    Ok((0..count).map(|_| one(kind, params, &mut rng)).collect())
}

/// Weighted mixture of task kinds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMix(pub Vec<(TaskKind, u32)>);

impl TaskMix {
    pub fn uniform(kinds: &[TaskKind]) -> Self {
        TaskMix(kinds.iter().map(|&k| (k, 1)).collect())
    }

    pub fn kinds(&self) -> Vec<TaskKind> {
        self.0.iter().filter(|(_, w)| *w > 0).map(|(k, _)| *k).collect()
    }

    /// Splits `count` across kinds by weight (largest remainder, ties to
    /// the earlier entry).
    pub fn allocate(&self, count: usize) -> Result<Vec<(TaskKind, usize)>> {
        let total: u64 = self.0.iter().map(|(_, w)| *w as u64).sum();
        if total == 0 {
            return Err(Error::config("task mix has no positive weight"));
        }
        let mut out: Vec<(TaskKind, usize, u64)> = self
            .0
            .iter()
            .map(|&(k, w)| {
                let exact = count as u64 * w as u64;
                (k, (exact / total) as usize, exact % total)
            })
            .collect();
        let assigned: usize = out.iter().map(|(_, c, _)| c).sum();
        let mut order: Vec<usize> = (0..out.len()).collect();
        order.sort_by(|&a, &b| out[b].2.cmp(&out[a].2).then(a.cmp(&b)));
        for &i in order.iter().take(count - assigned) {
            out[i].1 += 1;
        }
        Ok(out
            .into_iter()
            .map(|(k, c, _)| (k, c))
            .filter(|(_, c)| *c > 0)
            .collect())
    }

    pub fn overlaps(&self, other: &TaskMix) -> bool {
        let mine = self.kinds();
        other.kinds().iter().any(|k| mine.contains(k))
    }
}

/// Mixed dataset: per-kind counts from [`TaskMix::allocate`], then a seeded
/// shuffle. `stream_tag` separates otherwise identical draws (client data,
/// public data, held-out evaluation).
pub fn generate_mix(
    mix: &TaskMix,
    count: usize,
    seed: u64,
    stream_tag: u64,
    vocab_size: usize,
    params: &TaskParams,
) -> Result<Vec<Sample>> {
    let mut out = Vec::with_capacity(count);
    let sub = crate::rng::derive_seed(seed, &[stream_tag]);
    for (kind, n) in mix.allocate(count)? {
        out.extend(generate_task(kind, n, sub, vocab_size, params)?);
    }
    out.shuffle(&mut stream(sub, &[purpose::DATA, u64::MAX]));
    Ok(out)
}

/// Server-side public data. Drawn from its own stream so it never repeats
/// client samples even when the mixtures coincide.
pub fn public_dataset(
    mix: &TaskMix,
    count: usize,
    seed: u64,
    vocab_size: usize,
    params: &TaskParams,
) -> Result<Vec<Sample>> {
    if count == 0 {
        return Err(Error::config("public dataset count must be >= 1"));
    }
    generate_mix(mix, count, seed, purpose::PUBLIC, vocab_size, params)
}
