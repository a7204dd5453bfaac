//! IEEE 754 binary16 conversion with round-to-nearest-even.
//!
//! Anchor positions are stored in the bitstream as 16-bit floats; encode and
//! decode must see bit-identical values, so the rounding here is exact and
//! platform independent (integer-only).

use crate::error::{Error, Result};

const F16_MAX: f64 = 65504.0;

/// Convert an f64 to its binary16 bit pattern, round-to-nearest-even.
///
/// Errors if the magnitude is not representable (overflow, inf or NaN).
pub fn f64_to_f16_bits(v: f64) -> Result<u16> {
    if !v.is_finite() || v.abs() > F16_MAX {
        return Err(Error::Fp16Overflow(v));
    }
    // Go through f32 first (exact for all f64 in f16 range after the f32
    // rounding step cannot introduce double rounding errors at f16 precision:
    // f32 keeps 24 bits, f16 needs 11, and the half-way detection below uses
    // the full residual mask).
    let f = v as f32;
    let bits = f.to_bits();
    let sign = ((bits >> 16) & 0x8000) as u16;
    let exp = ((bits >> 23) & 0xff) as i32;
    let mant = bits & 0x007f_ffff;

    if exp == 0 && mant == 0 {
        return Ok(sign); // signed zero
    }

    // Unbiased exponent in f32, re-biased for f16 (bias 15).
    let e = exp - 127 + 15;

    if e >= 31 {
        return Err(Error::Fp16Overflow(v));
    }

    if e <= 0 {
        // Subnormal f16 (or underflow to zero).
        if e < -10 {
            return Ok(sign); // rounds to zero
        }
        // Implicit leading 1 plus mantissa, shifted into subnormal position.
        let m = mant | 0x0080_0000;
        let shift = (14 - e) as u32; // bits to drop from the 24-bit mantissa
        let half = 1u32 << (shift - 1);
        let rest_mask = (1u32 << shift) - 1;
        let mut out = (m >> shift) as u16;
        let rem = m & rest_mask;
        if rem > half || (rem == half && (out & 1) == 1) {
            out += 1; // may carry into the normal range; that is still valid
        }
        return Ok(sign | out);
    }

    // Normal range: keep top 10 mantissa bits, round on the dropped 13.
    let mut out = ((e as u32) << 10 | (mant >> 13)) as u16;
    let rem = mant & 0x1fff;
    if rem > 0x1000 || (rem == 0x1000 && (out & 1) == 1) {
        out = out.wrapping_add(1);
        if (out & 0x7fff) >= 0x7c00 {
            return Err(Error::Fp16Overflow(v));
        }
    }
    Ok(sign | out)
}

/// Convert binary16 bits back to f64 (exact).
pub fn f16_bits_to_f64(bits: u16) -> f64 {
    let sign = if bits & 0x8000 != 0 { -1.0 } else { 1.0 };
    let exp = ((bits >> 10) & 0x1f) as i32;
    let mant = (bits & 0x3ff) as f64;
    if exp == 0 {
        return sign * mant * 2f64.powi(-24);
    }
    if exp == 31 {
        // Not produced by f64_to_f16_bits; decode anyway for completeness.
        return if mant == 0.0 { sign * f64::INFINITY } else { f64::NAN };
    }
    sign * (1.0 + mant / 1024.0) * 2f64.powi(exp - 15)
}

/// Round an f64 to the nearest binary16 value, returned as f64.
pub fn round_f16(v: f64) -> Result<f64> {
    Ok(f16_bits_to_f64(f64_to_f16_bits(v)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_values_roundtrip() {
        for v in [0.0, 0.5, 1.0, -2.0, 0.25, 1024.0, -0.125, 65504.0] {
            assert_eq!(round_f16(v).unwrap(), v);
        }
    }

    #[test]
    fn idempotent() {
        for v in [1.0 / 3.0, 0.1, -7.3, 123.456, 1e-5, -1e-6] {
            let once = round_f16(v).unwrap();
            let twice = round_f16(once).unwrap();
            assert_eq!(once, twice);
        }
    }

    #[test]
    fn one_third_rounds_to_nearest_even() {
        // 1/3 = 1.0101...b * 2^-2; the 10-bit mantissa keeps 0101010101 and
        // the first dropped bit is 0, so the value rounds down.
        let r = round_f16(1.0 / 3.0).unwrap();
        assert_eq!(r, 0.333251953125);
    }

    #[test]
    fn overflow_errors() {
        assert!(round_f16(70000.0).is_err());
        assert!(round_f16(-1e10).is_err());
        assert!(round_f16(f64::INFINITY).is_err());
        assert!(round_f16(f64::NAN).is_err());
    }

    #[test]
    fn matches_half_crate_on_grid() {
        // Cross-check against the `half` crate over a sweep including
        // subnormals, rounding ties, and near-overflow values.
        let mut vals = vec![0.0, -0.0, 1e-8, 6e-8, 6.1e-8, 6.0975e-5, 65503.0, 65504.0];
        let mut x = -8.0;
        while x < 8.0 {
            vals.push(x);
            x += 0.013;
        }
        for k in 0..2000 {
            vals.push((k as f64) * 0.37 - 350.0);
        }
        for v in vals {
            let ours = f64_to_f16_bits(v).unwrap();
            let theirs = half::f16::from_f64(v).to_bits();
            assert_eq!(ours, theirs, "mismatch at {v}");
            assert_eq!(f16_bits_to_f64(ours), half::f16::from_bits(ours).to_f64());
        }
    }

    #[test]
    fn subnormal_roundtrip_is_idempotent() {
        let v = 3.1e-8;
        let once = round_f16(v).unwrap();
        assert_eq!(round_f16(once).unwrap(), once);
    }
}
