//! Federated sketching LoRA: a deterministic simulator of sketched low-rank
//! adapter training across clients, with rival heterogeneous-rank
//! baselines, masked aggregation and cost accounting.

pub mod baselines;
pub mod costs;
pub mod diagnostics;
pub mod error;
pub mod federation;
pub mod harness;
pub mod lora;
pub mod numerics;
pub mod secure_agg;
pub mod sketching;
pub mod tasks;

pub use error::{Error, Result};
