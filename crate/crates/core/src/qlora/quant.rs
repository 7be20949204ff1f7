use crate::tensor::Matrix;

use super::QloraError;

/// Largest code magnitude for a symmetric `bits`-wide quantizer.
pub fn max_level(bits: u8) -> i32 {
    (1i32 << (bits - 1)) - 1
}

fn check_bits(bits: u8) -> Result<(), QloraError> {
    match bits {
        4 | 8 => Ok(()),
        other => Err(QloraError::UnsupportedBits(other)),
    }
}

/// Blockwise absmax-quantized tensor. Codes are kept unpacked in memory and
/// packed two-per-byte for 4-bit only on the wire.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedTensor {
    bits: u8,
    block_size: usize,
    rows: usize,
    cols: usize,
    codes: Vec<i8>,
    scales: Vec<f32>,
}

impl QuantizedTensor {
    /// Assembles a tensor from decoded parts. Code ranges are checked by
    /// [`dequantize`], so a corrupt payload can still be inspected.
    pub fn from_parts(
        bits: u8,
        block_size: usize,
        rows: usize,
        cols: usize,
        codes: Vec<i8>,
        scales: Vec<f32>,
    ) -> Result<Self, QloraError> {
        check_bits(bits)?;
        if block_size == 0 {
            return Err(QloraError::ZeroBlockSize);
        }
        let numel = rows * cols;
        if codes.len() != numel || scales.len() != numel.div_ceil(block_size) {
            return Err(QloraError::PartsMismatch {
                codes: codes.len(),
                scales: scales.len(),
                numel,
                block_size,
            });
        }
        Ok(Self { bits, block_size, rows, cols, codes, scales })
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn numel(&self) -> usize {
        self.codes.len()
    }

    pub fn codes(&self) -> &[i8] {
        &self.codes
    }

    pub fn scales(&self) -> &[f32] {
        &self.scales
    }

    /// Scale of the block holding element `i`.
    pub fn scale_of(&self, i: usize) -> f32 {
        self.scales[i / self.block_size]
    }

    /// Codes packed for the wire: one byte each for 8-bit, two per byte
    /// (low nibble first, odd tail zero-padded) for 4-bit.
    pub fn packed_codes(&self) -> Vec<u8> {
        match self.bits {
            8 => self.codes.iter().map(|&c| c as u8).collect(),
            _ => self
                .codes
                .chunks(2)
                .map(|pair| {
                    let lo = (pair[0] as u8) & 0x0f;
                    let hi = pair.get(1).map_or(0, |&c| (c as u8) & 0x0f);
                    lo | (hi << 4)
                })
                .collect(),
        }
    }

    /// Number of bytes [`packed_codes`](Self::packed_codes) produces.
    pub fn packed_len(bits: u8, numel: usize) -> usize {
        (numel * bits as usize).div_ceil(8)
    }

    pub fn unpack_codes(bits: u8, packed: &[u8], numel: usize) -> Vec<i8> {
        match bits {
            8 => packed.iter().take(numel).map(|&b| b as i8).collect(),
            _ => {
                let mut out = Vec::with_capacity(numel);
                for &b in packed {
                    for nib in [b & 0x0f, b >> 4] {
                        if out.len() < numel {
                            // sign-extend the nibble
                            out.push(((nib << 4) as i8) >> 4);
                        }
                    }
                }
                out
            }
        }
    }
}

/// Stored block scale: `max|x| / level` rounded toward zero to a mantissa
/// short enough that `code * scale` is exact in f32 for every code.
fn stored_scale(absmax: f64, level: f64) -> f32 {
    let drop = 32 - (level as u32).leading_zeros();
    let mut s = (absmax / level) as f32;
    if s as f64 > absmax / level {
        s = f32::from_bits(s.to_bits() - 1);
    }
    let s = f32::from_bits(s.to_bits() & (u32::MAX << drop));
    if s == 0.0 {
        f32::from_bits(1)
    } else {
        s
    }
}

/// Quantizes each run of `block_size` elements (row-major). The block scale is
/// `max|x| / (2^(bits-1) - 1)` as stored (see [`stored_scale`]) and codes are
/// `x / scale` rounded half away from zero, so `|x - code * scale| <= scale / 2`
/// holds exactly after dequantization.
pub fn quantize_blockwise(x: &Matrix, bits: u8, block_size: usize) -> Result<QuantizedTensor, QloraError> {
    check_bits(bits)?;
    if block_size == 0 {
        return Err(QloraError::ZeroBlockSize);
    }
    if let Some(index) = x.data().iter().position(|v| !v.is_finite()) {
        return Err(QloraError::NonFinite { index });
    }
    let level = max_level(bits) as f64;
    let mut codes = Vec::with_capacity(x.len());
    let mut scales = Vec::with_capacity(x.len().div_ceil(block_size));
    for block in x.data().chunks(block_size) {
        let absmax = block.iter().fold(0.0f64, |m, &v| m.max((v as f64).abs()));
        if absmax == 0.0 {
            scales.push(0.0);
            codes.extend(std::iter::repeat_n(0i8, block.len()));
            continue;
        }
        let scale = stored_scale(absmax, level);
        scales.push(scale);
        for &v in block {
            let c = ((v as f64) / scale as f64).round().clamp(-level, level);
            codes.push(c as i8);
        }
    }
    QuantizedTensor::from_parts(bits, block_size, x.rows(), x.cols(), codes, scales)
}

/// `code * scale` per element.
pub fn dequantize(q: &QuantizedTensor) -> Result<Matrix, QloraError> {
    let level = max_level(q.bits);
    let mut out = Vec::with_capacity(q.numel());
    for (i, &c) in q.codes.iter().enumerate() {
        if (c as i32).abs() > level {
            return Err(QloraError::CodeOutOfRange { index: i, code: c, bits: q.bits });
        }
        let s = q.scale_of(i);
        if !s.is_finite() || s < 0.0 {
            return Err(QloraError::BadScale { block: i / q.block_size, scale: s });
        }
        out.push((c as f64 * s as f64) as f32);
    }
    Ok(Matrix::from_vec(q.rows, q.cols, out)?)
}

/// Quantize-dequantize round trip.
pub fn fake_quantize(x: &Matrix, bits: u8, block_size: usize) -> Result<Matrix, QloraError> {
    dequantize(&quantize_blockwise(x, bits, block_size)?)
}

/// Worst-case absolute round-trip error for an element of a block with the
/// given stored scale.
pub fn roundtrip_error_bound(scale: f32) -> f64 {
    scale as f64 / 2.0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: &[f32]) -> Matrix {
        Matrix::from_vec(1, v.len(), v.to_vec()).unwrap()
    }

    #[test]
    fn hand_evaluated_4bit_block() {
        let q = quantize_blockwise(&row(&[1.0, -2.0, 0.5, 0.25]), 4, 4).unwrap();
        let s = q.scales()[0] as f64;
        assert!(s <= 2.0 / 7.0 && (2.0 / 7.0 - s) < 2.0 / 7.0 * 2f64.powi(-19), "{s}");
        assert_eq!(q.codes(), &[4, -7, 2, 1]);
    }

    #[test]
    fn zero_block_has_zero_scale() {
        let q = quantize_blockwise(&row(&[0.0; 5]), 8, 4).unwrap();
        assert_eq!(q.scales(), &[0.0, 0.0]);
        assert!(q.codes().iter().all(|&c| c == 0));
        assert_eq!(dequantize(&q).unwrap().data(), &[0.0; 5]);
    }

    #[test]
    fn single_value_takes_the_top_code() {
        for bits in [4, 8] {
            for x in [1.0f32, -0.5, 3.25, 100.0, -1e-3, 0.37] {
                let q = quantize_blockwise(&row(&[x]), bits, 64).unwrap();
                assert_eq!(q.codes()[0] as i32, max_level(bits) * x.signum() as i32);
                let back = dequantize(&q).unwrap().data()[0];
                assert!(((back - x) / x).abs() <= 2f32.powi(-15), "bits={bits} x={x} back={back}");
            }
        }
    }

    #[test]
    fn scaled_codes_are_exact_in_f32() {
        for bits in [4u8, 8] {
            let level = max_level(bits);
            for absmax in [1.0f64, 0.3, 7.0e-3, 123.456, 1e-40, 3e38] {
                let s = stored_scale(absmax, level as f64);
                assert!(s as f64 <= absmax / level as f64 || absmax < 1e-38);
                for c in -level..=level {
                    let p = c as f64 * s as f64;
                    assert_eq!((p as f32) as f64, p, "bits={bits} absmax={absmax} c={c}");
                }
            }
        }
    }

    #[test]
    fn tiny_blocks_keep_a_positive_scale() {
        let q = quantize_blockwise(&row(&[1e-45, -1e-45]), 8, 2).unwrap();
        assert!(q.scales()[0] > 0.0);
        assert_eq!(dequantize(&q).unwrap().data(), &[1e-45, -1e-45]);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(quantize_blockwise(&row(&[1.0]), 3, 4), Err(QloraError::UnsupportedBits(3))));
        assert!(matches!(quantize_blockwise(&row(&[1.0]), 4, 0), Err(QloraError::ZeroBlockSize)));
        assert!(matches!(
            quantize_blockwise(&row(&[1.0, f32::NAN]), 4, 4),
            Err(QloraError::NonFinite { index: 1 })
        ));
    }

    #[test]
    fn out_of_range_code_is_corrupt() {
        let q = QuantizedTensor::from_parts(4, 2, 1, 2, vec![-8, 1], vec![1.0]).unwrap();
        assert!(matches!(dequantize(&q), Err(QloraError::CodeOutOfRange { index: 0, code: -8, bits: 4 })));
        let q = QuantizedTensor::from_parts(8, 2, 1, 2, vec![3, -128], vec![1.0]).unwrap();
        assert!(matches!(dequantize(&q), Err(QloraError::CodeOutOfRange { index: 1, .. })));
    }

    #[test]
    fn nibble_packing_low_first_with_padding() {
        let q = QuantizedTensor::from_parts(4, 8, 1, 3, vec![1, -1, 7], vec![1.0]).unwrap();
        assert_eq!(q.packed_codes(), vec![0xf1, 0x07]);
        assert_eq!(QuantizedTensor::unpack_codes(4, &q.packed_codes(), 3), vec![1, -1, 7]);
    }
}
