//! Layer selection: which layers form the adapter, which the uncompressed
//! remainder, and which survive uniform layer dropout into the emulator.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::transformer::TransformerStack;
use crate::{Error, Result, Scalar};

/// Fraction of non-adapter layers kept in the emulator, held as an exact
/// decimal fraction so `⌊κ·m⌋` never suffers float rounding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KeepRatio {
    num: u64,
    den: u64,
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl KeepRatio {
    pub fn new(num: u64, den: u64) -> Result<Self> {
        if den == 0 || num == 0 || num > den {
            return Err(Error::config(format!("keep ratio {num}/{den} must lie in (0, 1]")));
        }
        let g = gcd(num, den);
        Ok(KeepRatio {
            num: num / g,
            den: den / g,
        })
    }

    /// Maps a dropout rate `β` (fraction of layers removed) to `κ = 1 − β`.
    pub fn from_dropout(beta: &str) -> Result<Self> {
        let b: KeepRatio = parse_decimal(beta)?;
        KeepRatio::new(b.den - b.num, b.den)
    }

    pub fn from_f64(x: f64) -> Result<Self> {
        if !x.is_finite() {
            return Err(Error::config("keep ratio must be finite"));
        }
        parse_decimal(&format!("{x}"))
    }

    pub fn numer(self) -> u64 {
        self.num
    }

    pub fn denom(self) -> u64 {
        self.den
    }

    pub fn as_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// `⌊κ·m⌋`
    pub fn floor_mul(self, m: usize) -> usize {
        ((self.num as u128 * m as u128) / self.den as u128) as usize
    }
}

// Strict decimal parser: digits with at most one '.', no exponent.
fn parse_decimal(s: &str) -> Result<KeepRatio> {
    let s = s.trim();
    let bad = || Error::config(format!("invalid ratio {s:?}: expected a decimal in (0, 1]"));
    let (int, frac) = s.split_once('.').unwrap_or((s, ""));
    if int.is_empty() && frac.is_empty() {
        return Err(bad());
    }
    if !int.chars().chain(frac.chars()).all(|c| c.is_ascii_digit()) || frac.len() > 12 {
        return Err(bad());
    }
    let den = 10u64.pow(frac.len() as u32);
    let int_v: u64 = if int.is_empty() {
        0
    } else {
        int.parse().map_err(|_| bad())?
    };
    let frac_v: u64 = if frac.is_empty() {
        0
    } else {
        frac.parse().map_err(|_| bad())?
    };
    let num = int_v
        .checked_mul(den)
        .and_then(|x| x.checked_add(frac_v))
        .ok_or_else(bad)?;
    KeepRatio::new(num, den)
}

impl FromStr for KeepRatio {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        parse_decimal(s)
    }
}

impl fmt::Display for KeepRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_f64())
    }
}

impl Serialize for KeepRatio {
    fn serialize<S: Serializer>(&self, s: S) -> core::result::Result<S::Ok, S::Error> {
        s.serialize_f64(self.as_f64())
    }
}

impl<'de> Deserialize<'de> for KeepRatio {
    fn deserialize<D: Deserializer<'de>>(d: D) -> core::result::Result<Self, D::Error> {
        let x = f64::deserialize(d)?;
        KeepRatio::from_f64(x).map_err(serde::de::Error::custom)
    }
}

/// Where the adapter layers sit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Placement {
    /// The last `s` layers (next to the output head).
    Tail,
    /// `s/2` layers at each end of the stack.
    Split,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitPlan {
    pub n_layers: usize,
    pub adapter_size: usize,
    pub keep_ratio: KeepRatio,
    pub placement: Placement,
    /// Adapter layers that run before the emulator (empty for `Tail`).
    pub adapter_head: Vec<usize>,
    /// Adapter layers that run after the emulator.
    pub adapter_tail: Vec<usize>,
    /// Layers kept in the compressed emulator, strictly increasing.
    pub emulator: Vec<usize>,
    /// All non-adapter layers, in order.
    pub noncompressed: Vec<usize>,
}

impl SplitPlan {
    /// Adapter indices in execution order.
    pub fn adapter(&self) -> Vec<usize> {
        let mut v = self.adapter_head.clone();
        v.extend_from_slice(&self.adapter_tail);
        v
    }

    pub fn describe(&self) -> String {
        fn list(v: &[usize]) -> String {
            v.iter().map(|i| format!("{i}")).collect::<Vec<_>>().join(",")
        }
        format!(
            "n_layers={}\nadapter_size={}\nkeep_ratio={}\nplacement={}\nadapter=[{}]\nemulator=[{}]\nemulator_layers={}\nnoncompressed=[{}]\n",
            self.n_layers,
            self.adapter_size,
            self.keep_ratio,
            match self.placement {
                Placement::Tail => "tail",
                Placement::Split => "split",
            },
            list(&self.adapter()),
            list(&self.emulator),
            self.emulator.len(),
            list(&self.noncompressed),
        )
    }
}

/// Uniform layer dropout. With `m` non-adapter layers and
/// `n' = ⌊κ·m⌋`, the emulator keeps layers `⌊j·(m−1)/(n'−1)⌋` for
/// `j = 0..n'`, offset past any head adapter layers.
pub fn extract_layers(
    n_layers: usize,
    adapter_size: usize,
    keep: KeepRatio,
    placement: Placement,
) -> Result<SplitPlan> {
    let (n, s) = (n_layers, adapter_size);
    match placement {
        Placement::Tail if s < 1 || s + 2 > n => {
            return Err(Error::config(format!(
                "adapter size {s} out of range: need 1 <= s <= n-2 = {}",
                n.saturating_sub(2)
            )));
        }
        Placement::Split if s < 2 || s % 2 != 0 || s + 2 > n => {
            return Err(Error::config(format!(
                "split adapter size {s} out of range: need an even s with 2 <= s <= n-2 = {}",
                n.saturating_sub(2)
            )));
        }
        _ => {}
    }
    let m = n - s;
    let kept = keep.floor_mul(m);
    if kept < 2 {
        return Err(Error::config(format!(
            "emulator would keep floor({} * {m}) = {kept} layers; need floor(keep_ratio * (n - s)) >= 2",
            keep
        )));
    }
    let head = match placement {
        Placement::Tail => 0,
        Placement::Split => s / 2,
    };
    let adapter_head: Vec<usize> = (0..head).collect();
    let noncompressed: Vec<usize> = (head..head + m).collect();
    let adapter_tail: Vec<usize> = (head + m..n).collect();
    // j·(m−1)/(kept−1) with integer division is the exact floor.
    let emulator = (0..kept).map(|j| head + j * (m - 1) / (kept - 1)).collect();
    Ok(SplitPlan {
        n_layers: n,
        adapter_size: s,
        keep_ratio: keep,
        placement,
        adapter_head,
        adapter_tail,
        emulator,
        noncompressed,
    })
}

/// Adapter at the output end, the layout clients fine-tune in the split method.
pub fn extract<T: Scalar>(model: &TransformerStack<T>, adapter_size: usize, keep: KeepRatio) -> Result<SplitPlan> {
    extract_layers(model.n_layers(), adapter_size, keep, Placement::Tail)
}
