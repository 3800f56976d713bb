use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::tasks::{Sample, TaskKind};
use crate::rng::{purpose, stream};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionScheme {
    Iid,
    ByCategory,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub scheme: PartitionScheme,
    pub clients: usize,
    pub seed: u64,
}

/// Exact aggregation weight `|D_m| / |D|`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Weight {
    pub num: usize,
    pub den: usize,
}

impl Weight {
    pub fn as_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Shard {
    pub client_id: usize,
    pub samples: Vec<Sample>,
    pub weight: Weight,
}

/// Splits `dataset` into disjoint client shards covering it.
///
/// `Iid` shuffles and deals contiguous blocks whose sizes differ by at most
/// one. `ByCategory` hands out whole categories: largest first, round-robin
/// over clients.
pub fn partition(dataset: &[Sample], spec: &PartitionSpec) -> Result<Vec<Shard>> {
    let m = spec.clients;
    if m == 0 {
        return Err(Error::Partition("need at least one client".into()));
    }
    let n = dataset.len();
    let groups: Vec<Vec<usize>> = match spec.scheme {
        PartitionScheme::Iid => {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut stream(spec.seed, &[purpose::PARTITION]));
            let (base, extra) = (n / m, n % m);
            let mut out = Vec::with_capacity(m);
            let mut at = 0;
            for c in 0..m {
                let len = base + usize::from(c < extra);
                out.push(idx[at..at + len].to_vec());
                at += len;
            }
            out
        }
        PartitionScheme::ByCategory => {
            let mut cats: BTreeMap<TaskKind, Vec<usize>> = BTreeMap::new();
            for (i, s) in dataset.iter().enumerate() {
                cats.entry(s.category).or_default().push(i);
            }
            if m > cats.len() {
                return Err(Error::Partition(format!(
                    "{m} clients but only {} categories: by_category needs clients <= categories",
                    cats.len()
                )));
            }
            let mut ordered: Vec<(TaskKind, Vec<usize>)> = cats.into_iter().collect();
            // stable: equal sizes keep category order
            ordered.sort_by_key(|b| core::cmp::Reverse(b.1.len()));
            let mut out = alloc::vec![Vec::new(); m];
            for (i, (_, members)) in ordered.into_iter().enumerate() {
                out[i % m].extend(members);
            }
            out
        }
    };
    groups
        .into_iter()
        .enumerate()
        .map(|(client_id, idx)| {
            if idx.is_empty() {
                return Err(Error::Partition(format!("client {client_id} received an empty shard")));
            }
            Ok(Shard {
                client_id,
                weight: Weight { num: idx.len(), den: n },
                samples: idx.into_iter().map(|i| dataset[i].clone()).collect(),
            })
        })
        .collect()
}
