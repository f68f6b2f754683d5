//! Reduced-precision `(1 + e + m)`-bit floating point for model weights.
//!
//! Code layout, most significant bit first: sign (1 bit), biased exponent
//! (`e` bits, bias `2^(e-1)`), mantissa fraction (`m` bits). The exponent range is
//! `[-2^(e-1), 2^(e-1) - 1]`. Mantissas are truncated toward zero, exponents above
//! the range saturate to the largest magnitude, and there are no subnormals, NaN
//! or infinity codes: an all-zero exponent and mantissa field is a signed zero.
//!
//! Because the zero pattern occupies the bottom of the range, the smallest
//! non-zero magnitude is `(1 + 2^-m) * 2^emin`. Magnitudes below
//! `2^(emin - 1)` flush to zero; magnitudes between that and the smallest
//! non-zero value are clamped up to it, which keeps quantization monotone.

use serde::{Deserialize, Serialize};

use crate::checkpoint::{TensorData, TensorMap};
use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QuantSpec {
    e_bits: u8,
    m_bits: u8,
}

impl QuantSpec {
    /// Plain 32-bit float layout; lossless for every normal f32.
    pub const FULL: QuantSpec = QuantSpec { e_bits: 8, m_bits: 23 };

    /// `e_bits` in `2..=8` and `m_bits` in `1..=23`, so that every code decodes to a finite f32.
    pub fn new(e_bits: u8, m_bits: u8) -> Result<Self> {
        if !(2..=8).contains(&e_bits) {
            return Err(invalid(format!("exponent bits must be in 2..=8, got {e_bits}")));
        }
        if !(1..=23).contains(&m_bits) {
            return Err(invalid(format!("mantissa bits must be in 1..=23, got {m_bits}")));
        }
        Ok(QuantSpec { e_bits, m_bits })
    }

    pub fn e_bits(self) -> u8 {
        self.e_bits
    }

    pub fn m_bits(self) -> u8 {
        self.m_bits
    }

    pub fn total_bits(self) -> u32 {
        1 + self.e_bits as u32 + self.m_bits as u32
    }

    pub fn bias(self) -> i32 {
        1 << (self.e_bits - 1)
    }

    pub fn min_exponent(self) -> i32 {
        -self.bias()
    }

    pub fn max_exponent(self) -> i32 {
        self.bias() - 1
    }

    /// Smallest non-zero magnitude.
    pub fn min_positive(self) -> f32 {
        decode_value(1, self)
    }

    /// Largest magnitude, `(2 - 2^-m) * 2^emax`.
    pub fn max_value(self) -> f32 {
        decode_value(!self.sign_mask() & self.code_mask(), self)
    }

    fn sign_mask(self) -> u32 {
        1 << (self.e_bits + self.m_bits)
    }

    fn code_mask(self) -> u32 {
        ((1u64 << self.total_bits()) - 1) as u32
    }
}

impl std::fmt::Display for QuantSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "e{}m{} ({} bit)", self.e_bits, self.m_bits, self.total_bits())
    }
}

/// Unbiased exponent and 23-bit fraction of a finite, non-zero f32 magnitude,
/// normalizing subnormals.
fn split_f32(magnitude_bits: u32) -> (i32, u32) {
    let raw_exp = (magnitude_bits >> 23) as i32;
    let frac = magnitude_bits & 0x7f_ffff;
    if raw_exp == 0 {
        let top = 31 - frac.leading_zeros() as i32;
        (top - 149, (frac << (23 - top)) & 0x7f_ffff)
    } else {
        (raw_exp - 127, frac)
    }
}

pub fn encode_value(x: f32, spec: QuantSpec) -> Result<u32> {
    if !x.is_finite() {
        return Err(Error::InvalidValue(format!("cannot quantize non-finite value {x}")));
    }
    let bits = x.to_bits();
    let sign = if bits >> 31 == 1 { spec.sign_mask() } else { 0 };
    let magnitude = bits & 0x7fff_ffff;
    if magnitude == 0 {
        return Ok(sign);
    }
    let m = spec.m_bits as u32;
    let exp_field_max = (1u32 << spec.e_bits) - 1;
    let mant_max = (1u32 << m) - 1;
    let (exp, frac) = split_f32(magnitude);

    let (exp_field, mantissa) = if exp > spec.max_exponent() {
        (exp_field_max, mant_max)
    } else if exp < spec.min_exponent() - 1 {
        return Ok(sign);
    } else if exp == spec.min_exponent() - 1 {
        (0, 1)
    } else {
        let mantissa = frac >> (23 - m);
        let exp_field = (exp + spec.bias()) as u32;
        if exp_field == 0 && mantissa == 0 {
            // 2^emin itself collides with the zero pattern.
            (0, 1)
        } else {
            (exp_field, mantissa)
        }
    };
    Ok(sign | (exp_field << m) | mantissa)
}

pub fn decode_value(code: u32, spec: QuantSpec) -> f32 {
    let m = spec.m_bits as u32;
    let negative = code & spec.sign_mask() != 0;
    let exp_field = (code >> m) & ((1 << spec.e_bits) - 1);
    let mantissa = code & ((1 << m) - 1);
    let magnitude = if exp_field == 0 && mantissa == 0 {
        0.0
    } else {
        let significand = 1.0 + mantissa as f64 / (1u64 << m) as f64;
        (significand * 2f64.powi(exp_field as i32 - spec.bias())) as f32
    };
    if negative {
        -magnitude
    } else {
        magnitude
    }
}

/// `decode(encode(x))`.
pub fn quantize_value(x: f32, spec: QuantSpec) -> Result<f32> {
    Ok(decode_value(encode_value(x, spec)?, spec))
}

/// Concatenates `width`-bit codes MSB-first into bytes; the last byte is zero padded.
pub fn pack_bits(codes: &[u32], width: u32) -> Result<Vec<u8>> {
    if !(1..=32).contains(&width) {
        return Err(invalid(format!("code width must be in 1..=32, got {width}")));
    }
    let limit = 1u64 << width;
    let mut out = Vec::with_capacity((codes.len() * width as usize).div_ceil(8));
    let mut acc: u64 = 0;
    let mut filled: u32 = 0;
    for &code in codes {
        if code as u64 >= limit {
            return Err(invalid(format!("code {code:#x} does not fit in {width} bits")));
        }
        acc = (acc << width) | code as u64;
        filled += width;
        while filled >= 8 {
            filled -= 8;
            out.push((acc >> filled) as u8);
        }
        acc &= (1u64 << filled) - 1;
    }
    if filled > 0 {
        out.push((acc << (8 - filled)) as u8);
    }
    Ok(out)
}

pub fn unpack_bits(bytes: &[u8], count: usize, width: u32) -> Result<Vec<u32>> {
    if !(1..=32).contains(&width) {
        return Err(invalid(format!("code width must be in 1..=32, got {width}")));
    }
    let needed = (count * width as usize).div_ceil(8);
    if bytes.len() < needed {
        return Err(Error::Truncated { needed, available: bytes.len() });
    }
    let mask = (1u64 << width) - 1;
    let mut out = Vec::with_capacity(count);
    let mut acc: u64 = 0;
    let mut filled: u32 = 0;
    let mut next = bytes.iter();
    for _ in 0..count {
        while filled < width {
            acc = (acc << 8) | *next.next().expect("length checked above") as u64;
            filled += 8;
        }
        filled -= width;
        out.push(((acc >> filled) & mask) as u32);
        acc &= (1u64 << filled) - 1;
    }
    Ok(out)
}

/// Quantized weights as stored in an archive.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedWeights {
    pub spec: QuantSpec,
    pub num_values: usize,
    pub blob: Vec<u8>,
    /// Tensor names and shapes in packing order.
    pub manifest: Vec<(String, Vec<usize>)>,
}

impl PackedWeights {
    /// `num_values * (1 + e + m)`; the archive header is accounted separately.
    pub fn model_bits(&self) -> u64 {
        self.num_values as u64 * self.spec.total_bits() as u64
    }

    pub fn expected_blob_len(num_values: usize, spec: QuantSpec) -> usize {
        (num_values * spec.total_bits() as usize).div_ceil(8)
    }

    /// Decodes the blob back into named tensors.
    pub fn unpack(&self) -> Result<TensorMap> {
        let expected = Self::expected_blob_len(self.num_values, self.spec);
        if self.blob.len() != expected {
            return Err(Error::CorruptArchive(format!(
                "weight blob is {} bytes, expected {expected}",
                self.blob.len()
            )));
        }
        let declared: usize = self.manifest.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
        if declared != self.num_values {
            return Err(Error::CorruptArchive(format!(
                "manifest declares {declared} values, blob holds {}",
                self.num_values
            )));
        }
        let codes = unpack_bits(&self.blob, self.num_values, self.spec.total_bits())?;
        let mut out = TensorMap::new();
        let mut offset = 0;
        for (name, shape) in &self.manifest {
            let n: usize = shape.iter().product();
            let data = codes[offset..offset + n].iter().map(|&c| decode_value(c, self.spec)).collect();
            offset += n;
            out.insert(name.clone(), TensorData::new(shape.clone(), data)?);
        }
        Ok(out)
    }
}

/// Quantizes every tensor in name order. Returns the packed form and the
/// dequantized weights a receiver reconstructs from it.
pub fn quantize_model(weights: &TensorMap, spec: QuantSpec) -> Result<(PackedWeights, TensorMap)> {
    let mut codes = Vec::with_capacity(weights.values().map(|t| t.data.len()).sum());
    let mut manifest = Vec::with_capacity(weights.len());
    let mut dequantized = TensorMap::new();
    for (name, tensor) in weights {
        let mut values = Vec::with_capacity(tensor.data.len());
        for &x in &tensor.data {
            let code = encode_value(x, spec)
                .map_err(|_| Error::NonFinite { tensor: name.clone(), value: x })?;
            codes.push(code);
            values.push(decode_value(code, spec));
        }
        manifest.push((name.clone(), tensor.shape.clone()));
        dequantized.insert(name.clone(), TensorData::new(tensor.shape.clone(), values)?);
    }
    let blob = pack_bits(&codes, spec.total_bits())?;
    let packed = PackedWeights { spec, num_values: codes.len(), blob, manifest };
    Ok((packed, dequantized))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(e: u8, m: u8) -> QuantSpec {
        QuantSpec::new(e, m).unwrap()
    }

    #[test]
    fn spec_bounds() {
        assert!(QuantSpec::new(1, 10).is_err());
        assert!(QuantSpec::new(5, 0).is_err());
        assert!(QuantSpec::new(9, 10).is_err());
        assert!(QuantSpec::new(8, 24).is_err());
        assert_eq!(spec(5, 10).total_bits(), 16);
        assert_eq!(spec(4, 9).total_bits(), 14);
        assert_eq!((spec(4, 3).min_exponent(), spec(4, 3).max_exponent()), (-8, 7));
    }

    #[test]
    fn one_is_exact() {
        for (e, m) in [(2, 1), (4, 7), (5, 10), (8, 23)] {
            let s = spec(e, m);
            let code = encode_value(1.0, s).unwrap();
            assert_eq!(code >> m, s.bias() as u32, "exponent field of 1.0");
            assert_eq!(code & ((1 << m) - 1), 0);
            assert_eq!(decode_value(code, s), 1.0);
        }
    }

    #[test]
    fn mantissa_truncates() {
        // 1.75 = 1.11b; one fraction bit keeps 1.1b.
        assert_eq!(quantize_value(1.75, spec(4, 1)).unwrap(), 1.5);
        assert_eq!(quantize_value(-1.75, spec(4, 1)).unwrap(), -1.5);
    }

    #[test]
    fn overflow_saturates() {
        for m in [1u8, 3, 7] {
            let s = spec(4, m);
            let q = quantize_value(2f32.powi(40), s).unwrap();
            assert_eq!(q as f64, (2.0 - 2f64.powi(-(m as i32))) * 128.0);
            assert_eq!(q, s.max_value());
        }
    }

    #[test]
    fn zeros_and_signs() {
        let s = spec(5, 10);
        assert_eq!(decode_value(0, s).to_bits(), 0f32.to_bits());
        assert_eq!(decode_value(1 << 15, s).to_bits(), (-0f32).to_bits());
        assert_eq!(encode_value(-0.0, s).unwrap(), 1 << 15);
        assert_eq!(encode_value(0.0, s).unwrap(), 0);
    }

    #[test]
    fn underflow_policy() {
        let s = spec(4, 3); // emin = -8
        assert_eq!(quantize_value(2f32.powi(-10), s).unwrap(), 0.0);
        let min_pos = s.min_positive();
        assert_eq!(min_pos as f64, (1.0 + 1.0 / 8.0) * 2f64.powi(-8));
        assert_eq!(quantize_value(2f32.powi(-9), s).unwrap(), min_pos);
        assert_eq!(quantize_value(2f32.powi(-8), s).unwrap(), min_pos);
        assert_eq!(quantize_value(min_pos, s).unwrap(), min_pos);
        assert_eq!(quantize_value(-(2f32.powi(-9)), s).unwrap(), -min_pos);
    }

    #[test]
    fn rejects_non_finite() {
        for x in [f32::NAN, f32::INFINITY, f32::NEG_INFINITY] {
            assert!(matches!(encode_value(x, spec(5, 10)), Err(Error::InvalidValue(_))));
        }
    }

    #[test]
    fn full_precision_is_lossless_for_normals() {
        let s = QuantSpec::FULL;
        let samples = [1.0f32, -3.25, 1e-30, 3.4e38, f32::MIN_POSITIVE, 1.17e-38, 0.1, -7.7e-5];
        for x in samples {
            assert_eq!(quantize_value(x, s).unwrap().to_bits(), x.to_bits(), "{x:e}");
        }
        // Subnormals above 2^-128 still fit (exponent range reaches -128).
        let sub = f32::from_bits(0x0030_0001);
        assert_eq!(quantize_value(sub, s).unwrap().to_bits(), sub.to_bits());
    }

    #[test]
    fn exhaustive_round_trip_small_specs() {
        for (e, m) in [(2, 1), (3, 4), (4, 7), (5, 10), (6, 9)] {
            let s = spec(e, m);
            for code in 0..(1u32 << s.total_bits()) {
                let x = decode_value(code, s);
                assert_eq!(encode_value(x, s).unwrap(), code, "{s}: code {code:#x} -> {x:e}");
            }
        }
    }

    #[test]
    fn packing_examples() {
        assert_eq!(pack_bits(&[0xAB], 8).unwrap(), vec![0xAB]);
        assert_eq!(pack_bits(&[0xA, 0xB], 4).unwrap(), vec![0xAB]);
        assert_eq!(pack_bits(&[0xABC, 0xDEF, 0x123], 12).unwrap(), vec![0xAB, 0xCD, 0xEF, 0x12, 0x30]);
        assert!(pack_bits(&[0x10], 4).is_err());
        assert!(matches!(unpack_bits(&[0xAB], 2, 12), Err(Error::Truncated { .. })));
    }

    #[test]
    fn padding_is_zero() {
        let codes = vec![0xFFF; 7];
        let blob = pack_bits(&codes, 12).unwrap();
        assert_eq!(blob.len(), 11);
        assert_eq!(blob[10] & 0x0F, 0);
        assert_eq!(PackedWeights::expected_blob_len(7, spec(3, 8)), 11);
    }

    #[test]
    fn packed_model_round_trip() {
        let mut weights = TensorMap::new();
        weights.insert("b".into(), TensorData::new(vec![2, 3], vec![0.5, -1.25, 3.0, 1e-3, -7.0, 0.0]).unwrap());
        weights.insert("a".into(), TensorData::new(vec![1], vec![0.123]).unwrap());
        let s = spec(5, 10);
        let (packed, deq) = quantize_model(&weights, s).unwrap();
        assert_eq!(packed.manifest[0].0, "a");
        assert_eq!(packed.num_values, 7);
        assert_eq!(packed.model_bits(), 7 * 16);
        assert_eq!(packed.blob.len(), 14);
        let unpacked = packed.unpack().unwrap();
        assert_eq!(unpacked, deq);
        for (name, t) in &weights {
            for (x, q) in t.data.iter().zip(&deq[name].data) {
                assert_eq!(*q, quantize_value(*x, s).unwrap());
            }
        }

        let mut bad = weights.clone();
        bad.get_mut("a").unwrap().data[0] = f32::NAN;
        match quantize_model(&bad, s) {
            Err(Error::NonFinite { tensor, .. }) => assert_eq!(tensor, "a"),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn random_pack_round_trip() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100_000 {
            let codes: Vec<u32> = (0..3).map(|_| rng.random_range(0..1u32 << 12)).collect();
            let blob = pack_bits(&codes, 12).unwrap();
            assert_eq!(blob.len(), 5);
            assert_eq!(unpack_bits(&blob, 3, 12).unwrap(), codes);
        }
    }

    fn any_finite() -> impl Strategy<Value = f32> {
        any::<u32>().prop_map(f32::from_bits).prop_filter("finite", |x| x.is_finite())
    }

    fn any_spec() -> impl Strategy<Value = QuantSpec> {
        (2u8..=8, 1u8..=23).prop_map(|(e, m)| spec(e, m))
    }

    proptest! {
        #[test]
        fn idempotent(x in any_finite(), s in any_spec()) {
            let code = encode_value(x, s).unwrap();
            prop_assert_eq!(encode_value(decode_value(code, s), s).unwrap(), code);
        }

        #[test]
        fn sign_symmetric(x in any_finite(), s in any_spec()) {
            let a = quantize_value(x, s).unwrap();
            let b = quantize_value(-x, s).unwrap();
            prop_assert_eq!(a.to_bits() ^ b.to_bits(), 0x8000_0000);
        }

        #[test]
        fn monotone_in_magnitude(x in any_finite(), y in any_finite(), s in any_spec()) {
            let (lo, hi) = if x.abs() <= y.abs() { (x, y) } else { (y, x) };
            prop_assert!(quantize_value(lo, s).unwrap().abs() <= quantize_value(hi, s).unwrap().abs());
        }

        #[test]
        fn truncation_bound(x in any_finite(), s in any_spec()) {
            let a = x.abs() as f64;
            prop_assume!(a >= s.min_positive() as f64);
            let exp = a.log2().floor() as i32;
            prop_assume!(exp <= s.max_exponent());
            let q = quantize_value(x, s).unwrap().abs() as f64;
            let err = a - q;
            prop_assert!(err >= 0.0);
            prop_assert!(err < 2f64.powi(exp - s.m_bits() as i32));
        }

        #[test]
        fn pack_round_trip(width in 1u32..=32, raw in proptest::collection::vec(any::<u32>(), 0..64)) {
            let mask = if width == 32 { u32::MAX } else { (1u32 << width) - 1 };
            let codes: Vec<u32> = raw.iter().map(|c| c & mask).collect();
            let blob = pack_bits(&codes, width).unwrap();
            prop_assert_eq!(blob.len(), (codes.len() * width as usize).div_ceil(8));
            prop_assert_eq!(unpack_bits(&blob, codes.len(), width).unwrap(), codes);
        }
    }
}
