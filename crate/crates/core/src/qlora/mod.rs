//! Blockwise absmax quantization, low-rank adapter deltas and their wire
//! encoding.

mod delta;
mod quant;
mod wire;

use thiserror::Error;

use crate::tensor::TensorError;

pub use delta::{
    apply_delta, decode_delta, encode_delta, encode_params_dense, scaled_product, DeltaEntry, DeltaTensor,
    LowRankDelta,
};
pub use quant::{
    dequantize, fake_quantize, max_level, quantize_blockwise, roundtrip_error_bound, QuantizedTensor,
};
pub use wire::{
    payload_len, wire_len, Payload, Precision, WireMessage, WireTensor, DELTA_MAGIC, DELTA_VERSION,
    TENSOR_HEADER_LEN, WIRE_HEADER_LEN,
};

#[derive(Debug, Error)]
pub enum QloraError {
    #[error("unsupported bit width {0}; expected 4 or 8 (32 for raw payloads)")]
    UnsupportedBits(u8),
    #[error("block size must be at least 1")]
    ZeroBlockSize,
    #[error("non-finite value at element {index}")]
    NonFinite { index: usize },
    #[error("code {code} at element {index} is outside the symmetric {bits}-bit range")]
    CodeOutOfRange { index: usize, code: i8, bits: u8 },
    #[error("block {block} has invalid scale {scale}")]
    BadScale { block: usize, scale: f32 },
    #[error("{codes} codes / {scales} scales do not describe {numel} values in blocks of {block_size}")]
    PartsMismatch { codes: usize, scales: usize, numel: usize, block_size: usize },
    #[error("bad magic at offset 0: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("unsupported delta wire version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated payload at offset {offset}: need {needed} bytes, {available} available")]
    Truncated { offset: usize, needed: usize, available: usize },
    #[error("{extra} trailing bytes at offset {offset}")]
    TrailingBytes { offset: usize, extra: usize },
    #[error("tensor name at offset {offset} is not valid utf-8")]
    BadName { offset: usize },
    #[error("tensor {name}: rank {rank} exceeds min({rows}, {cols})")]
    RankTooLarge { name: String, rank: usize, rows: usize, cols: usize },
    #[error("tensor {name}: {detail}")]
    TensorShape { name: String, detail: String },
    #[error("unknown tensor {0:?}")]
    UnknownTensor(String),
    #[error("{field} value {value} does not fit its wire field")]
    FieldOverflow { field: &'static str, value: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}
