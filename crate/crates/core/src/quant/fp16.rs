//! IEEE 754 binary16 conversion with round-half-to-even.

/// Largest magnitude that still rounds to a finite binary16 value.
const OVERFLOW: f64 = 65520.0;

/// Nearest binary16 bit pattern, or `None` when `v` is not finite or
/// rounds beyond the largest finite binary16 value.
pub fn f64_to_f16_bits(v: f64) -> Option<u16> {
    if !v.is_finite() {
        return None;
    }
    let sign: u16 = if v.is_sign_negative() { 0x8000 } else { 0 };
    let a = v.abs();
    if a == 0.0 {
        return Some(sign);
    }
    if a >= OVERFLOW {
        return None;
    }
    if a < f64::powi(2.0, -14) {
        // subnormal: units of 2^-24; a result of 1024 encodes the smallest normal
        let m = (a * f64::powi(2.0, 24)).round_ties_even() as u16;
        return Some(sign | m);
    }
    let mut e = ((a.to_bits() >> 52) & 0x7ff) as i32 - 1023;
    let mut m = (a * f64::powi(2.0, 10 - e)).round_ties_even() as u32;
    if m == 2048 {
        m = 1024;
        e += 1;
    }
    debug_assert!((-14..=15).contains(&e));
    Some(sign | (((e + 15) as u16) << 10) | (m - 1024) as u16)
}

/// Exact value of a binary16 bit pattern.
pub fn f16_bits_to_f64(h: u16) -> f64 {
    let sign = if h & 0x8000 != 0 { -1.0 } else { 1.0 };
    let exp = ((h >> 10) & 0x1f) as i32;
    let man = (h & 0x3ff) as f64;
    sign * match exp {
        0 => man * f64::powi(2.0, -24),
        31 if man == 0.0 => f64::INFINITY,
        31 => f64::NAN,
        _ => (1024.0 + man) * f64::powi(2.0, exp - 25),
    }
}
