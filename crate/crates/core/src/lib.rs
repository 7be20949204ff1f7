//! Federated fine-tuning of an attention adapter over frozen embeddings,
//! with GAN-based minority-class augmentation and a blockwise-quantized
//! low-rank uplink.

pub mod adapter;
pub mod cli;
pub mod encoder;
pub mod federation;
pub mod gan;
pub mod qlora;
pub mod rng;
pub mod tensor;
