//! Federated fine-tuning of a decoder-only transformer without shipping the
//! full model: the server compresses the stack into an *emulator* (uniform
//! layer dropout over the lower layers) plus an *adapter* (the last few
//! layers), keeps the emulator aligned with the uncompressed layers on a
//! public dataset, while clients train low-rank adapter factors only.
//!
//! The crate is `no_std` (with `alloc`). Everything that touches files,
//! clocks or the command line lives in the `fedsplit` companion crate.
//!
//! Module map:
//!
//! * [`compute`]: dense arrays and a reverse-mode tape.
//! * [`model`]: toy transformer, layer extraction, LoRA, assembly.
//! * [`align`]: server-side emulator distillation.
//! * [`fedcore`]: client updates, aggregation, rounds, full training.
//! * [`data`]: synthetic instruction tasks and partitioning.
//! * [`costs`]: parameter, communication and FLOP accounting.

#![no_std]

extern crate alloc;

pub mod align;
pub mod compute;
pub mod costs;
pub mod data;
mod error;
pub mod fedcore;
pub mod model;
pub mod optim;
pub mod rng;
mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;
