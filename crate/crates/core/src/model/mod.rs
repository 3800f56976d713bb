//! Toy decoder-only transformer, emulator/adapter layer selection, LoRA
//! injection and model assembly.

mod assemble;
mod extract;
mod lora;
mod transformer;

pub use assemble::{assemble, emulator_activations, Assembled, Assembly, Forward, Trainable};
pub use extract::{extract, extract_layers, KeepRatio, Placement, SplitPlan};
pub use lora::{inject_lora, BoundLora, BoundPair, LoraConfig, LoraPair, LoraSet};
pub use transformer::{Batch, BoundStack, DecoderLayer, LayerVars, ModelConfig, Projection, TransformerStack};
