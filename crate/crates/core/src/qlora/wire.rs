//! `FTQD` delta wire format.
//!
//! ```text
//! magic "FTQD" | version u32 = 1 | bits u8 | block_size u32 | tensor_count u32
//! per tensor: name_len u16 | name utf-8 | rows u32 | cols u32 | rank u32 (0 = dense)
//!             | packed codes | scales f32 x n_blocks
//! ```
//!
//! All integers and floats are little-endian. A factored tensor carries
//! `rank * (rows + cols)` values (A row-major, then B row-major); a dense one
//! carries `rows * cols`. With `bits = 32` the values are raw f32 and no
//! scales follow.

use super::quant::{dequantize, quantize_blockwise, QuantizedTensor};
use super::QloraError;
use crate::tensor::Matrix;

pub const DELTA_MAGIC: [u8; 4] = *b"FTQD";
pub const DELTA_VERSION: u32 = 1;
/// magic + version + bits + block_size + tensor_count
pub const WIRE_HEADER_LEN: usize = 4 + 4 + 1 + 4 + 4;
/// name_len + rows + cols + rank, excluding the name bytes.
pub const TENSOR_HEADER_LEN: usize = 2 + 4 + 4 + 4;

/// Numeric encoding of the transmitted values.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Precision {
    Int4,
    Int8,
    /// Unquantized 32-bit floats.
    F32,
}

impl Precision {
    pub fn bits(self) -> u8 {
        match self {
            Precision::Int4 => 4,
            Precision::Int8 => 8,
            Precision::F32 => 32,
        }
    }

    pub fn from_bits(bits: u8) -> Result<Self, QloraError> {
        match bits {
            4 => Ok(Precision::Int4),
            8 => Ok(Precision::Int8),
            32 => Ok(Precision::F32),
            other => Err(QloraError::UnsupportedBits(other)),
        }
    }

    pub fn is_quantized(self) -> bool {
        self != Precision::F32
    }
}

/// Values of one wire tensor.
#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    Quantized(QuantizedTensor),
    Raw(Vec<f32>),
}

impl Payload {
    pub fn numel(&self) -> usize {
        match self {
            Payload::Quantized(q) => q.numel(),
            Payload::Raw(v) => v.len(),
        }
    }

    /// Dequantized (or raw) values as a flat vector.
    pub fn values(&self) -> Result<Vec<f32>, QloraError> {
        match self {
            Payload::Quantized(q) => Ok(dequantize(q)?.into_vec()),
            Payload::Raw(v) => Ok(v.clone()),
        }
    }

    pub fn encode(values: &[f32], precision: Precision, block_size: usize) -> Result<Self, QloraError> {
        match precision {
            Precision::F32 => {
                if let Some(index) = values.iter().position(|v| !v.is_finite()) {
                    return Err(QloraError::NonFinite { index });
                }
                Ok(Payload::Raw(values.to_vec()))
            }
            p => {
                let m = Matrix::from_vec(1, values.len(), values.to_vec())?;
                Ok(Payload::Quantized(quantize_blockwise(&m, p.bits(), block_size)?))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WireTensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// 0 for a dense tensor.
    pub rank: usize,
    pub payload: Payload,
}

impl WireTensor {
    pub fn expected_numel(rows: usize, cols: usize, rank: usize) -> usize {
        if rank == 0 {
            rows * cols
        } else {
            rank * (rows + cols)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WireMessage {
    pub precision: Precision,
    pub block_size: usize,
    pub tensors: Vec<WireTensor>,
}

/// Byte length of a message with the given `(name_len, numel)` tensors.
pub fn wire_len(precision: Precision, block_size: usize, tensors: &[(usize, usize)]) -> usize {
    WIRE_HEADER_LEN
        + tensors
            .iter()
            .map(|&(name_len, numel)| TENSOR_HEADER_LEN + name_len + payload_len(precision, block_size, numel))
            .sum::<usize>()
}

/// Bytes of codes plus scales for `numel` values.
pub fn payload_len(precision: Precision, block_size: usize, numel: usize) -> usize {
    match precision {
        Precision::F32 => 4 * numel,
        p => QuantizedTensor::packed_len(p.bits(), numel) + 4 * numel.div_ceil(block_size),
    }
}

impl WireMessage {
    pub fn encoded_len(&self) -> usize {
        let shape: Vec<(usize, usize)> =
            self.tensors.iter().map(|t| (t.name.len(), t.payload.numel())).collect();
        wire_len(self.precision, self.block_size, &shape)
    }

    pub fn encode(&self) -> Result<Vec<u8>, QloraError> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&DELTA_MAGIC);
        out.extend_from_slice(&DELTA_VERSION.to_le_bytes());
        out.push(self.precision.bits());
        out.extend_from_slice(&u32_field("block_size", self.block_size)?.to_le_bytes());
        out.extend_from_slice(&u32_field("tensor_count", self.tensors.len())?.to_le_bytes());
        for t in &self.tensors {
            let numel = WireTensor::expected_numel(t.rows, t.cols, t.rank);
            if numel != t.payload.numel() {
                return Err(QloraError::TensorShape {
                    name: t.name.clone(),
                    detail: format!("header implies {numel} values, payload has {}", t.payload.numel()),
                });
            }
            let name_len = u16::try_from(t.name.len())
                .map_err(|_| QloraError::FieldOverflow { field: "name_len", value: t.name.len() })?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&u32_field("rows", t.rows)?.to_le_bytes());
            out.extend_from_slice(&u32_field("cols", t.cols)?.to_le_bytes());
            out.extend_from_slice(&u32_field("rank", t.rank)?.to_le_bytes());
            match (&t.payload, self.precision) {
                (Payload::Raw(v), Precision::F32) => {
                    for x in v {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
                (Payload::Quantized(q), p) if p.is_quantized() && q.bits() == p.bits() => {
                    if q.block_size() != self.block_size {
                        return Err(QloraError::TensorShape {
                            name: t.name.clone(),
                            detail: format!("block size {} != message block size {}", q.block_size(), self.block_size),
                        });
                    }
                    out.extend_from_slice(&q.packed_codes());
                    for s in q.scales() {
                        out.extend_from_slice(&s.to_le_bytes());
                    }
                }
                _ => {
                    return Err(QloraError::TensorShape {
                        name: t.name.clone(),
                        detail: format!("payload does not match {}-bit message", self.precision.bits()),
                    })
                }
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, QloraError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != DELTA_MAGIC {
            return Err(QloraError::BadMagic {
                expected: String::from_utf8_lossy(&DELTA_MAGIC).into_owned(),
                found: String::from_utf8_lossy(magic).into_owned(),
            });
        }
        let version = r.u32()?;
        if version != DELTA_VERSION {
            return Err(QloraError::UnsupportedVersion(version));
        }
        let precision = Precision::from_bits(r.take(1)?[0])?;
        let block_size = r.u32()? as usize;
        if precision.is_quantized() && block_size == 0 {
            return Err(QloraError::ZeroBlockSize);
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let at = r.pos;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| QloraError::BadName { offset: at })?
                .to_owned();
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let rank = r.u32()? as usize;
            if rank > rows.min(cols) {
                return Err(QloraError::RankTooLarge { name, rank, rows, cols });
            }
            let numel = WireTensor::expected_numel(rows, cols, rank);
            let payload = match precision {
                Precision::F32 => {
                    let raw = r.take(4 * numel)?;
                    Payload::Raw(
                        raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect(),
                    )
                }
                p => {
                    let bits = p.bits();
                    let packed = r.take(QuantizedTensor::packed_len(bits, numel))?;
                    let codes = QuantizedTensor::unpack_codes(bits, packed, numel);
                    let n_blocks = numel.div_ceil(block_size);
                    let raw = r.take(4 * n_blocks)?;
                    let scales =
                        raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
                    Payload::Quantized(QuantizedTensor::from_parts(bits, block_size, 1, numel, codes, scales)?)
                }
            };
            tensors.push(WireTensor { name, rows, cols, rank, payload });
        }
        if r.pos != bytes.len() {
            return Err(QloraError::TrailingBytes { offset: r.pos, extra: bytes.len() - r.pos });
        }
        Ok(Self { precision, block_size, tensors })
    }
}

fn u32_field(field: &'static str, value: usize) -> Result<u32, QloraError> {
    u32::try_from(value).map_err(|_| QloraError::FieldOverflow { field, value })
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], QloraError> {
        let available = self.bytes.len() - self.pos;
        if available < n {
            return Err(QloraError::Truncated { offset: self.pos, needed: n, available });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, QloraError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, QloraError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(precision: Precision) -> WireMessage {
        let a: Vec<f32> = (0..10).map(|i| (i as f32 - 4.5) * 0.1).collect();
        let d = vec![0.25, -0.75, 1.0];
        WireMessage {
            precision,
            block_size: 4,
            tensors: vec![
                WireTensor { name: "w".into(), rows: 3, cols: 2, rank: 2, payload: Payload::encode(&a, precision, 4).unwrap() },
                WireTensor { name: "b".into(), rows: 1, cols: 3, rank: 0, payload: Payload::encode(&d, precision, 4).unwrap() },
            ],
        }
    }

    #[test]
    fn roundtrip_each_precision() {
        for p in [Precision::Int4, Precision::Int8, Precision::F32] {
            let m = sample(p);
            let bytes = m.encode().unwrap();
            assert_eq!(bytes.len(), m.encoded_len());
            assert_eq!(WireMessage::decode(&bytes).unwrap(), m);
        }
    }

    #[test]
    fn header_layout() {
        let bytes = sample(Precision::Int4).encode().unwrap();
        assert_eq!(&bytes[..4], b"FTQD");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(bytes[8], 4);
        assert_eq!(u32::from_le_bytes(bytes[9..13].try_into().unwrap()), 4);
        assert_eq!(u32::from_le_bytes(bytes[13..17].try_into().unwrap()), 2);
        assert_eq!(u16::from_le_bytes(bytes[17..19].try_into().unwrap()), 1);
        assert_eq!(bytes[19], b'w');
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let mut bytes = sample(Precision::Int8).encode().unwrap();
        let err = WireMessage::decode(&bytes[..bytes.len() - 1]).unwrap_err();
        assert!(matches!(err, QloraError::Truncated { .. }));
        bytes[0] = b'?';
        let err = WireMessage::decode(&bytes).unwrap_err();
        assert!(err.to_string().contains("FTQD"));
        let mut bytes = sample(Precision::Int8).encode().unwrap();
        bytes[8] = 3;
        assert!(matches!(WireMessage::decode(&bytes), Err(QloraError::UnsupportedBits(3))));
        let mut bytes = sample(Precision::Int8).encode().unwrap();
        bytes.push(0);
        assert!(matches!(WireMessage::decode(&bytes), Err(QloraError::TrailingBytes { .. })));
    }
}
