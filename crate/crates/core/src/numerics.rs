//! Bit-exact software emulation of reduced-precision floating-point formats.
//!
//! Every emulated value lives in an `f64` carrier. A format with at most 52
//! mantissa bits and an exponent range inside f64's embeds exactly, so
//! quantization is a pure function on `f64` with no custom bignum arithmetic.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A parametric floating-point format described by its field widths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FloatFormat {
    pub exponent_bits: u32,
    pub mantissa_bits: u32,
    pub bias: i32,
}

/// bfloat16: 1 sign + 8 exponent + 7 mantissa bits.
pub const BF16: FloatFormat = FloatFormat {
    exponent_bits: 8,
    mantissa_bits: 7,
    bias: 127,
};

/// IEEE 754 binary32.
pub const FP32: FloatFormat = FloatFormat {
    exponent_bits: 8,
    mantissa_bits: 23,
    bias: 127,
};

/// The widest emulatable format, identical to the f64 carrier. Quantizing to
/// this format is the identity on finite values.
pub const WIDE: FloatFormat = FloatFormat {
    exponent_bits: 11,
    mantissa_bits: 52,
    bias: 1023,
};

impl FloatFormat {
    /// A format with the default IEEE-style bias `2^(exponent_bits-1) - 1`.
    pub fn new(exponent_bits: u32, mantissa_bits: u32) -> Result<Self> {
        let bias = (1i32 << (exponent_bits.min(30) - 1)) - 1;
        let fmt = FloatFormat {
            exponent_bits,
            mantissa_bits,
            bias,
        };
        fmt.validate()?;
        Ok(fmt)
    }

    pub fn validate(&self) -> Result<()> {
        let total = 1 + self.exponent_bits + self.mantissa_bits;
        if self.exponent_bits == 0 || total > 64 {
            return Err(Error::InvalidFormat(format!(
                "field widths (1, {}, {}) must be nonzero and total at most 64 bits",
                self.exponent_bits, self.mantissa_bits
            )));
        }
        // The carrier must represent every value of the format exactly.
        if self.mantissa_bits > 52 || self.max_exponent() > 1023 || self.min_exponent() < -1022 {
            return Err(Error::InvalidFormat(format!(
                "format ({}, {}, {}) does not embed in the f64 carrier",
                self.exponent_bits, self.mantissa_bits, self.bias
            )));
        }
        Ok(())
    }

    /// Total storage width in bits (1 sign bit + exponent + mantissa).
    pub fn total_bits(&self) -> u32 {
        1 + self.exponent_bits + self.mantissa_bits
    }

    /// Smallest unbiased exponent of a normal value.
    pub fn min_exponent(&self) -> i32 {
        1 - self.bias
    }

    /// Largest unbiased exponent of a finite value (the all-ones exponent
    /// field encodes infinities and NaNs).
    pub fn max_exponent(&self) -> i32 {
        let max_field = (1i64 << self.exponent_bits) - 2;
        max_field as i32 - self.bias
    }

    /// Largest finite value: `(2 - 2^-m) * 2^max_exponent`.
    pub fn max_finite(&self) -> f64 {
        (2.0 - pow2(-(self.mantissa_bits as i32))) * pow2(self.max_exponent())
    }

    /// Smallest positive subnormal value: `2^(min_exponent - m)`.
    pub fn min_subnormal(&self) -> f64 {
        pow2(self.min_exponent() - self.mantissa_bits as i32)
    }
}

/// How `quantize` resolves values that fall between two representable numbers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RoundingMode {
    /// IEEE round-to-nearest, ties to even mantissa.
    NearestEven,
    /// Round up with probability proportional to the remainder. Fully
    /// determined by the seed and the input value.
    Stochastic { seed: u64 },
}

/// Exact `2^q` for any exponent reachable by an embeddable format.
pub fn pow2(q: i32) -> f64 {
    if q >= -1022 {
        debug_assert!(q <= 1023);
        f64::from_bits(((q + 1023) as u64) << 52)
    } else {
        // Subnormal power of two in the carrier.
        debug_assert!(q >= -1074);
        f64::from_bits(1u64 << (52 - (-1022 - q) as u32))
    }
}

fn floor_log2(x: f64) -> i32 {
    debug_assert!(x > 0.0 && x.is_finite());
    let bits = x.to_bits();
    let e = ((bits >> 52) & 0x7ff) as i32;
    if e == 0 {
        // Subnormal carrier value; every embeddable format clamps below -1022.
        -1023
    } else {
        e - 1023
    }
}

fn stochastic_unit(seed: u64, value_bits: u64) -> f64 {
    // splitmix64 over (seed, value) so the draw is a pure function of both.
    let mut z = seed ^ value_bits.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    (z >> 11) as f64 * pow2(-53)
}

/// Round `x` to the nearest value representable in `fmt`.
///
/// Values beyond the largest finite magnitude saturate to the signed maximum
/// finite value; NaN and infinities pass through unchanged. Subnormals of the
/// target format are representable.
pub fn quantize(x: f64, fmt: FloatFormat, mode: RoundingMode) -> f64 {
    if !x.is_finite() {
        return if x.is_nan() { f64::NAN } else { x };
    }
    if x == 0.0 {
        return x;
    }
    let m = fmt.mantissa_bits as i32;
    let e = floor_log2(x.abs());
    if e > fmt.max_exponent() {
        return fmt.max_finite().copysign(x);
    }
    let q = e.max(fmt.min_exponent()) - m;
    let scale = pow2(q);
    let y = x / scale; // exact: |y| < 2^(m+1)
    let r = match mode {
        RoundingMode::NearestEven => round_ties_even(y),
        RoundingMode::Stochastic { seed } => {
            let f = y.floor();
            let frac = y - f;
            if frac == 0.0 {
                y
            } else if stochastic_unit(seed, x.to_bits()) < frac {
                f + 1.0
            } else {
                f
            }
        }
    };
    let out = r * scale;
    if out.abs() > fmt.max_finite() {
        fmt.max_finite().copysign(x)
    } else if out == 0.0 {
        0.0f64.copysign(x)
    } else {
        out
    }
}

fn round_ties_even(y: f64) -> f64 {
    // f64::round_ties_even, spelled out for MSRV tolerance.
    let r = y.round();
    if (y - y.trunc()).abs() == 0.5 {
        // Tie: pick the even neighbor.
        if r % 2.0 != 0.0 {
            r - 1.0f64.copysign(y)
        } else {
            r
        }
    } else {
        r
    }
}

/// True when `x` is exactly representable in `fmt`.
pub fn is_representable(x: f64, fmt: FloatFormat) -> bool {
    !x.is_nan() && quantize(x, fmt, RoundingMode::NearestEven) == x
}

/// Spacing from `x` to the next representable value of larger magnitude.
///
/// `x` must be finite and already representable; `x = 0` yields the smallest
/// positive subnormal.
pub fn ulp(x: f64, fmt: FloatFormat) -> Result<f64> {
    if !x.is_finite() {
        return Err(Error::NotRepresentable(x));
    }
    if x == 0.0 {
        return Ok(fmt.min_subnormal());
    }
    if !is_representable(x, fmt) {
        return Err(Error::NotRepresentable(x));
    }
    let e = floor_log2(x.abs()).max(fmt.min_exponent());
    Ok(pow2(e - fmt.mantissa_bits as i32))
}

/// The paper's rule-of-thumb bound `w / 2^mantissa_bits` below which an
/// additive update to a weight of magnitude `w` is lost.
pub fn heuristic_vanish_threshold(w: f64, fmt: FloatFormat) -> f64 {
    assert!(w > 0.0, "vanish threshold requires a positive weight");
    w * pow2(-(fmt.mantissa_bits as i32))
}

/// The largest `t` such that `quantize(w + u) = w` under round-to-nearest-even
/// for every `0 < u < t`: half the ulp of `w` (the tie itself resolves by
/// mantissa parity and is confirmed against the brute-force oracle in tests).
pub fn exact_vanish_threshold(w: f64, fmt: FloatFormat) -> Result<f64> {
    if !(w > 0.0) || !w.is_finite() {
        return Err(Error::NotRepresentable(w));
    }
    if !is_representable(w, fmt) {
        return Err(Error::NotRepresentable(w));
    }
    if w < pow2(fmt.min_exponent()) {
        return Err(Error::SubnormalInput(w));
    }
    Ok(ulp(w, fmt)? * 0.5)
}

/// Ordered index of a representable value; adjacent finite values map to
/// adjacent integers, with 0 at +0. Negative values get negative indices.
pub fn value_index(x: f64, fmt: FloatFormat) -> Result<i64> {
    if !is_representable(x, fmt) {
        return Err(Error::NotRepresentable(x));
    }
    if x == 0.0 {
        return Ok(0);
    }
    let m = fmt.mantissa_bits as i32;
    let mag = x.abs();
    let e = floor_log2(mag).max(fmt.min_exponent());
    let y = mag / pow2(e - m); // integer in [1, 2^(m+1))
    let k = y as i64;
    let idx = if mag < pow2(fmt.min_exponent()) {
        k // subnormal: value = k * 2^(e_min - m)
    } else {
        let band = (e - fmt.min_exponent() + 1) as i64;
        band * (1i64 << m) + (k - (1i64 << m))
    };
    Ok(if x < 0.0 { -idx } else { idx })
}

/// Inverse of [`value_index`]. Index 0 is +0.
pub fn value_from_index(idx: i64, fmt: FloatFormat) -> Result<f64> {
    let m = fmt.mantissa_bits as i32;
    let per_band = 1i64 << m;
    let max_idx = (fmt.max_exponent() - fmt.min_exponent() + 1) as i64 * per_band + (per_band - 1);
    let mag_idx = idx.abs();
    if mag_idx > max_idx {
        return Err(Error::NotRepresentable(idx as f64));
    }
    let mag = if mag_idx < per_band {
        mag_idx as f64 * pow2(fmt.min_exponent() - m)
    } else {
        let band = mag_idx / per_band;
        let frac = mag_idx % per_band;
        let e = fmt.min_exponent() + band as i32 - 1;
        (per_band + frac) as f64 * pow2(e - m)
    };
    Ok(if idx < 0 { -mag } else { mag })
}

/// Index of the largest finite value of `fmt`.
pub fn max_value_index(fmt: FloatFormat) -> i64 {
    let per_band = 1i64 << fmt.mantissa_bits;
    (fmt.max_exponent() - fmt.min_exponent() + 1) as i64 * per_band + (per_band - 1)
}

/// All representable values `v` with `lo <= v < hi`, ascending and exact.
pub fn enumerate_values(lo: f64, hi: f64, fmt: FloatFormat) -> Result<Vec<f64>> {
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::InvalidRange { lo, hi });
    }
    // First representable value >= lo.
    let q = quantize(lo, fmt, RoundingMode::NearestEven);
    let mut idx = value_index(q, fmt)?;
    if q < lo {
        idx += 1;
    }
    let max_idx = max_value_index(fmt);
    let mut out = Vec::new();
    while idx <= max_idx {
        let v = value_from_index(idx, fmt)?;
        if v >= hi {
            break;
        }
        if v >= lo {
            out.push(v);
        }
        idx += 1;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn quantize_examples() {
        // Spacing in [256, 512) is 2, so 257.3 rounds to 258.
        assert_eq!(quantize(257.3, BF16, RoundingMode::NearestEven), 258.0);
        assert_eq!(quantize(1.0, BF16, RoundingMode::NearestEven), 1.0);
        // Nearest of (1 + k/128) * 2^-5 over k in 0..128 is k = 77.
        assert_eq!(quantize(0.05, BF16, RoundingMode::NearestEven), 0.050048828125);
    }

    #[test]
    fn quantize_propagates_non_finite() {
        assert!(quantize(f64::NAN, BF16, RoundingMode::NearestEven).is_nan());
        assert_eq!(
            quantize(f64::INFINITY, BF16, RoundingMode::NearestEven),
            f64::INFINITY
        );
        assert_eq!(
            quantize(f64::NEG_INFINITY, BF16, RoundingMode::NearestEven),
            f64::NEG_INFINITY
        );
    }

    #[test]
    fn overflow_saturates_to_max_finite() {
        let max = BF16.max_finite();
        assert_eq!(quantize(1e40, BF16, RoundingMode::NearestEven), max);
        assert_eq!(quantize(-1e40, BF16, RoundingMode::NearestEven), -max);
    }

    #[test]
    fn subnormals_are_representable() {
        let tiny = BF16.min_subnormal();
        assert!(is_representable(tiny, BF16));
        assert!(is_representable(tiny * 3.0, BF16));
        assert_eq!(quantize(tiny * 0.4, BF16, RoundingMode::NearestEven), 0.0);
        assert_eq!(quantize(tiny * 0.6, BF16, RoundingMode::NearestEven), tiny);
    }

    #[test]
    fn ulp_examples() {
        assert_eq!(ulp(1.0, BF16).unwrap(), 0.0078125);
        assert_eq!(ulp(256.0, BF16).unwrap(), 2.0);
        assert_eq!(ulp(0.050048828125, BF16).unwrap(), 2.44140625e-4);
        assert_eq!(ulp(0.0, BF16).unwrap(), BF16.min_subnormal());
        assert!(ulp(257.3, BF16).is_err());
    }

    #[test]
    fn vanish_threshold_examples() {
        assert_eq!(heuristic_vanish_threshold(0.05, BF16), 3.90625e-4);
        let fp32_t = heuristic_vanish_threshold(0.05, FP32);
        assert!((fp32_t - 5.96e-9).abs() / 5.96e-9 < 1e-2);
        assert_eq!(heuristic_vanish_threshold(1.0, BF16), 0.0078125);

        assert_eq!(exact_vanish_threshold(1.0, BF16).unwrap(), 0.00390625);
        assert_eq!(
            exact_vanish_threshold(0.050048828125, BF16).unwrap(),
            1.220703125e-4
        );
        // Half-ulp scaling in FP32.
        let w = 1.5f64;
        assert_eq!(exact_vanish_threshold(w, FP32).unwrap(), pow2(-24));
        // Subnormal inputs are rejected.
        assert!(exact_vanish_threshold(BF16.min_subnormal(), BF16).is_err());
    }

    /// Brute-force oracle: add every positive representable value to `w` and
    /// check which updates survive re-quantization.
    fn brute_force_vanish(w: f64, fmt: FloatFormat) -> f64 {
        let mut smallest_surviving = f64::INFINITY;
        for idx in 1..=max_value_index(fmt) {
            let u = value_from_index(idx, fmt).unwrap();
            if u >= w {
                break;
            }
            if quantize(w + u, fmt, RoundingMode::NearestEven) != w && u < smallest_surviving {
                smallest_surviving = u;
            }
        }
        smallest_surviving
    }

    #[test]
    fn exact_threshold_matches_brute_force() {
        for &w in &[1.0, 0.050048828125, 0.05 * 64.0, 3.0] {
            let w = quantize(w, BF16, RoundingMode::NearestEven);
            let t = exact_vanish_threshold(w, BF16).unwrap();
            let smallest_surviving = brute_force_vanish(w, BF16);
            // Every representable update below t vanishes and the first
            // surviving update is within one ulp of t.
            assert!(smallest_surviving >= t);
            assert!(smallest_surviving - t <= ulp(w, BF16).unwrap());
        }
    }

    #[test]
    fn enumerate_examples() {
        assert_eq!(enumerate_values(256.0, 512.0, BF16).unwrap().len(), 128);
        assert_eq!(enumerate_values(2.0, 4.0, BF16).unwrap().len(), 128);
        assert_eq!(
            enumerate_values(1.0, 1.0 + pow2(-7), BF16).unwrap(),
            vec![1.0]
        );
    }

    #[test]
    fn band_population_is_two_pow_mantissa() {
        for k in [-3i32, 0, 5, 100, -120] {
            let lo = pow2(k);
            let hi = pow2(k + 1);
            assert_eq!(enumerate_values(lo, hi, BF16).unwrap().len(), 128, "band {k}");
        }
    }

    #[test]
    fn index_round_trip_covers_all_bf16() {
        let max_idx = max_value_index(BF16);
        // 2^16 bit patterns = 2 signs * (max_idx + 1) magnitudes + inf/nan codes.
        assert_eq!(max_idx, (254 * 128 + 127) as i64);
        for idx in -max_idx..=max_idx {
            let v = value_from_index(idx, BF16).unwrap();
            assert_eq!(value_index(v, BF16).unwrap(), idx);
        }
    }

    #[test]
    fn stochastic_rounding_is_deterministic_and_unbiased() {
        let x = 1.0 + 0.3 * pow2(-7); // 30% of the way between neighbors
        let a = quantize(x, BF16, RoundingMode::Stochastic { seed: 42 });
        let b = quantize(x, BF16, RoundingMode::Stochastic { seed: 42 });
        assert_eq!(a, b);

        let n = 100_000u64;
        let lo = 1.0;
        let hi = 1.0 + pow2(-7);
        let mut mean = 0.0;
        for seed in 0..n {
            mean += quantize(x, BF16, RoundingMode::Stochastic { seed });
        }
        mean /= n as f64;
        let p = 0.3;
        let se = (p * (1.0 - p) / n as f64).sqrt() * (hi - lo);
        assert!((mean - x).abs() < 3.0 * se, "mean {mean} vs {x} (se {se})");
    }

    #[test]
    fn wide_format_is_identity() {
        for &x in &[1.0, -0.3, 1e-300, std::f64::consts::PI, 1e300] {
            assert_eq!(quantize(x, WIDE, RoundingMode::NearestEven), x);
        }
    }

    proptest! {
        #[test]
        fn idempotent(x in prop::num::f64::NORMAL) {
            for fmt in [BF16, FP32] {
                let q = quantize(x, fmt, RoundingMode::NearestEven);
                prop_assert_eq!(quantize(q, fmt, RoundingMode::NearestEven), q);
            }
        }

        #[test]
        fn monotone(x in -1e30f64..1e30, y in -1e30f64..1e30) {
            let (a, b) = if x <= y { (x, y) } else { (y, x) };
            for fmt in [BF16, FP32] {
                prop_assert!(
                    quantize(a, fmt, RoundingMode::NearestEven)
                        <= quantize(b, fmt, RoundingMode::NearestEven)
                );
            }
        }

        #[test]
        fn threshold_sandwich(idx in 1i64..max_value_index(BF16)) {
            let w = value_from_index(idx, BF16).unwrap();
            if w >= pow2(BF16.min_exponent()) {
                let exact = exact_vanish_threshold(w, BF16).unwrap();
                let heuristic = heuristic_vanish_threshold(w, BF16);
                // heuristic = w/2^m, exact = 2^(e-m-1): the ratio lies in [2, 4).
                prop_assert!(exact <= heuristic);
                prop_assert!(heuristic < 4.0 * exact);
                prop_assert!(heuristic >= 2.0 * exact);
            }
        }
    }
}
