//! (e=5, m=10) against IEEE half precision from the `half` crate.
//!
//! Our bias is 16 where IEEE uses 15, so codes differ; decoded values are
//! compared over the normal half range, which both formats cover.

use half::f16;
use idxdiff_core::quantizer::{decode_value, encode_value, quantize_value, QuantSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn spec() -> QuantSpec {
    QuantSpec::new(5, 10).unwrap()
}

fn normal_halves() -> impl Iterator<Item = f16> {
    (0u16..=u16::MAX).map(f16::from_bits).filter(|h| h.is_normal())
}

#[test]
fn every_normal_half_is_exact() {
    let mut n = 0;
    for h in normal_halves() {
        let x = h.to_f32();
        assert_eq!(quantize_value(x, spec()).unwrap().to_bits(), x.to_bits(), "{h}");
        n += 1;
    }
    assert_eq!(n, 2 * 30 * 1024);
}

#[test]
fn decoded_codes_cover_the_half_normals() {
    let mut ours: Vec<u32> = (0u32..1 << 16).map(|c| decode_value(c, spec()).to_bits()).collect();
    ours.sort_unstable();
    for h in normal_halves() {
        assert!(ours.binary_search(&h.to_f32().to_bits()).is_ok(), "{h} not representable");
    }
}

/// Truncation toward zero via the half crate: round to nearest, then step one
/// ulp toward zero if that overshot.
fn half_truncate(x: f32) -> f32 {
    let h = f16::from_f32(x);
    if h.to_f32().abs() > x.abs() {
        f16::from_bits(h.to_bits() - 1).to_f32()
    } else {
        h.to_f32()
    }
}

#[test]
fn truncation_agrees_with_half_on_random_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let lo = f16::MIN_POSITIVE.to_f32();
    let hi = f16::MAX.to_f32();
    for _ in 0..1_000_000 {
        let mag = lo * (hi / lo).powf(rng.random::<f32>());
        let x = if rng.random::<bool>() { mag } else { -mag };
        if x.abs() < lo || x.abs() > hi {
            continue;
        }
        let ours = quantize_value(x, spec()).unwrap();
        assert_eq!(ours.to_bits(), half_truncate(x).to_bits(), "x = {x:e}");
        assert_eq!(encode_value(ours, spec()).unwrap(), encode_value(x, spec()).unwrap());
    }
}
