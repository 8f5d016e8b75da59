//! Fixed-point arithmetic over the ring `Z_{2^k}`.
//!
//! Every secret value handled by the MPC backends is a vector of ring
//! elements. Reals are embedded by scaling with `2^frac_bits` and rounding;
//! negatives use the two's-complement interpretation, so they occupy the
//! upper half of the ring.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("value {value} is not representable with {total_bits} bits and {frac_bits} fraction bits")]
    Overflow {
        value: f64,
        total_bits: u32,
        frac_bits: u32,
    },
    #[error("invalid fixed-point spec: total_bits={total_bits}, frac_bits={frac_bits}")]
    InvalidSpec { total_bits: u32, frac_bits: u32 },
    #[error("ring width must be in 1..=128, got {0}")]
    InvalidRing(u32),
}

/// The ring `Z_{2^bits}` with elements stored in the low bits of a `u128`.
///
/// Widths other than the fixed-point ones (32/64/128) are allowed here so
/// small rings can be enumerated in tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Ring {
    bits: u32,
    mask: u128,
}

impl Ring {
    pub fn new(bits: u32) -> Result<Self, NumericsError> {
        if bits == 0 || bits > 128 {
            return Err(NumericsError::InvalidRing(bits));
        }
        let mask = if bits == 128 {
            u128::MAX
        } else {
            (1u128 << bits) - 1
        };
        Ok(Self { bits, mask })
    }

    #[inline]
    pub fn bits(&self) -> u32 {
        self.bits
    }

    /// Bytes needed to serialize one element.
    #[inline]
    pub fn byte_len(&self) -> usize {
        self.bits.div_ceil(8) as usize
    }

    #[inline]
    pub fn reduce(&self, x: u128) -> u128 {
        x & self.mask
    }

    #[inline]
    pub fn add(&self, a: u128, b: u128) -> u128 {
        a.wrapping_add(b) & self.mask
    }

    #[inline]
    pub fn sub(&self, a: u128, b: u128) -> u128 {
        a.wrapping_sub(b) & self.mask
    }

    #[inline]
    pub fn mul(&self, a: u128, b: u128) -> u128 {
        a.wrapping_mul(b) & self.mask
    }

    #[inline]
    pub fn neg(&self, a: u128) -> u128 {
        0u128.wrapping_sub(a) & self.mask
    }

    /// Two's-complement reading of a reduced element.
    #[inline]
    pub fn to_signed(&self, x: u128) -> i128 {
        if self.bits == 128 {
            return x as i128;
        }
        let x = x & self.mask;
        if x >> (self.bits - 1) == 1 {
            (x as i128) - (1i128 << self.bits)
        } else {
            x as i128
        }
    }

    #[inline]
    pub fn from_signed(&self, x: i128) -> u128 {
        (x as u128) & self.mask
    }

    /// Arithmetic right shift of the signed reading (floor division by `2^shift`).
    #[inline]
    pub fn shr_signed(&self, x: u128, shift: u32) -> u128 {
        self.from_signed(self.to_signed(x) >> shift)
    }

    pub fn to_le_bytes(&self, x: u128, out: &mut Vec<u8>) {
        out.extend_from_slice(&x.to_le_bytes()[..self.byte_len()]);
    }

    pub fn from_le_bytes(&self, bytes: &[u8]) -> u128 {
        let mut buf = [0u8; 16];
        buf[..bytes.len()].copy_from_slice(bytes);
        u128::from_le_bytes(buf) & self.mask
    }
}

/// Ring width and binary scaling exponent of the fixed-point encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct FixedPointSpec {
    pub total_bits: u32,
    pub frac_bits: u32,
}

impl Default for FixedPointSpec {
    fn default() -> Self {
        Self {
            total_bits: 64,
            frac_bits: 16,
        }
    }
}

/// An element of `Z_{2^total_bits}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct RingElement(pub u128);

impl RingElement {
    pub fn value(self) -> u128 {
        self.0
    }
}

impl FixedPointSpec {
    pub fn new(total_bits: u32, frac_bits: u32) -> Result<Self, NumericsError> {
        let spec = Self {
            total_bits,
            frac_bits,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), NumericsError> {
        let ok = matches!(self.total_bits, 32 | 64 | 128)
            && self.frac_bits > 0
            && self.frac_bits < self.total_bits;
        if ok {
            Ok(())
        } else {
            Err(NumericsError::InvalidSpec {
                total_bits: self.total_bits,
                frac_bits: self.frac_bits,
            })
        }
    }

    pub fn ring(&self) -> Ring {
        Ring::new(self.total_bits).expect("validated width")
    }

    /// Smallest positive representable magnitude, `2^-frac_bits`.
    pub fn ulp(&self) -> f64 {
        (-(self.frac_bits as f64)).exp2()
    }

    /// Exclusive bound on `|x|` accepted by [`encode`].
    pub fn max_abs(&self) -> f64 {
        ((self.total_bits - self.frac_bits - 1) as f64).exp2()
    }

    pub fn encode(&self, x: f64) -> Result<RingElement, NumericsError> {
        encode_scaled(x, self.ring(), self.frac_bits).map(RingElement)
    }

    pub fn decode(&self, r: RingElement) -> f64 {
        decode_scaled(r.0, self.ring(), self.frac_bits)
    }
}

/// `round(x · 2^scale) mod 2^k`, failing when `|x| ≥ 2^(k − scale − 1)`.
pub fn encode_scaled(x: f64, ring: Ring, scale: u32) -> Result<u128, NumericsError> {
    let overflow = || NumericsError::Overflow {
        value: x,
        total_bits: ring.bits(),
        frac_bits: scale,
    };
    if !x.is_finite() || scale >= ring.bits() {
        return Err(overflow());
    }
    let bound = ((ring.bits() - scale - 1) as f64).exp2();
    if x.abs() >= bound {
        return Err(overflow());
    }
    let scaled = (x * (scale as f64).exp2()).round();
    // i128 covers every width up to 127 bits; the 128-bit ring saturates at the bound checked above.
    Ok(ring.from_signed(scaled as i128))
}

pub fn decode_scaled(r: u128, ring: Ring, scale: u32) -> f64 {
    ring.to_signed(r) as f64 * (-(scale as f64)).exp2()
}

pub fn encode(x: f64, spec: FixedPointSpec) -> Result<RingElement, NumericsError> {
    spec.encode(x)
}

pub fn decode(r: RingElement, spec: FixedPointSpec) -> f64 {
    spec.decode(r)
}

/// Fixed-point product with floor truncation of the low `frac_bits` bits.
pub fn fixed_mul(
    a: RingElement,
    b: RingElement,
    spec: FixedPointSpec,
) -> Result<RingElement, NumericsError> {
    let ring = spec.ring();
    let (sa, sb) = (ring.to_signed(a.0), ring.to_signed(b.0));
    let overflow = || NumericsError::Overflow {
        value: decode(a, spec) * decode(b, spec),
        total_bits: spec.total_bits,
        frac_bits: spec.frac_bits,
    };
    let prod = sa.checked_mul(sb).ok_or_else(overflow)?;
    let truncated = prod >> spec.frac_bits;
    let limit = 1i128 << (spec.total_bits - 1).min(126);
    if spec.total_bits < 128 && (truncated >= limit || truncated < -limit) {
        return Err(overflow());
    }
    Ok(RingElement(ring.from_signed(truncated)))
}
