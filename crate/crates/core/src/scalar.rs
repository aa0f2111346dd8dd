use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};
use std::str::FromStr;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Real scalar the engine is generic over.
///
/// Implemented for `f32` (benchmark path) and `f64` (reference path used by
/// the oracle and equivalence tests). `Display`/`FromStr` give shortest
/// round-trip decimal text, which the cache dump format relies on.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + LowerExp
    + FromStr
    + Send
    + Sync
    + 'static
{
    /// Width of one value in the checkpoint encoding.
    const WIDTH: u8;

    fn write_le(self, out: &mut Vec<u8>);

    /// Decodes one value of `width` bytes. Widening f32 -> f64 is exact.
    fn read_le(bytes: &[u8], width: u8) -> Self;

    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable in every scalar type")
    }
}

impl Scalar for f32 {
    const WIDTH: u8 = 4;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8], width: u8) -> Self {
        match width {
            4 => f32::from_le_bytes(bytes[..4].try_into().unwrap()),
            _ => f64::from_le_bytes(bytes[..8].try_into().unwrap()) as f32,
        }
    }
}

impl Scalar for f64 {
    const WIDTH: u8 = 8;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8], width: u8) -> Self {
        match width {
            4 => f32::from_le_bytes(bytes[..4].try_into().unwrap()) as f64,
            _ => f64::from_le_bytes(bytes[..8].try_into().unwrap()),
        }
    }
}
