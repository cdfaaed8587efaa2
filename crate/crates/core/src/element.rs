//! Element types the kernels operate on.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ElementType {
    Int32,
    Int64,
    Float32,
    Float64,
}

impl ElementType {
    pub const ALL: [ElementType; 4] = [Self::Int32, Self::Int64, Self::Float32, Self::Float64];

    pub const fn size(self) -> usize {
        match self {
            Self::Int32 | Self::Float32 => 4,
            Self::Int64 | Self::Float64 => 8,
        }
    }

    pub const fn is_integer(self) -> bool {
        matches!(self, Self::Int32 | Self::Int64)
    }

    pub const fn name(self) -> &'static str {
        match self {
            Self::Int32 => "int32",
            Self::Int64 => "int64",
            Self::Float32 => "float32",
            Self::Float64 => "float64",
        }
    }
}

impl fmt::Display for ElementType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ElementType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown element type `{s}`")))
    }
}

/// A plain-old-data value that kernels can generate, combine and order.
///
/// Integer `combine` wraps modulo 2^width so that any re-association of a
/// parallel sum or scan is bit-identical to the sequential fold.
pub trait Element: Copy + Send + Sync + PartialEq + fmt::Debug + 'static {
    const TYPE: ElementType;

    fn zero() -> Self;

    /// Converts the increment value `v` (a 1-based position) to this type,
    /// truncating modulo 2^width for integers.
    fn from_u64_wrapping(v: u64) -> Self;

    fn combine(self, other: Self) -> Self;

    fn total_cmp(&self, other: &Self) -> Ordering;

    fn to_f64(self) -> f64;
}

macro_rules! int_element {
    ($t:ty, $tag:expr) => {
        impl Element for $t {
            const TYPE: ElementType = $tag;

            #[inline]
            fn zero() -> Self {
                0
            }

            #[inline]
            fn from_u64_wrapping(v: u64) -> Self {
                v as $t
            }

            #[inline]
            fn combine(self, other: Self) -> Self {
                self.wrapping_add(other)
            }

            #[inline]
            fn total_cmp(&self, other: &Self) -> Ordering {
                self.cmp(other)
            }

            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
        }
    };
}

int_element!(i32, ElementType::Int32);
int_element!(i64, ElementType::Int64);

/// Floating-point elements, which additionally support the trigonometric
/// map kernel.
pub trait FloatElement: Element {
    /// `min(sin(x), tan(x))`.
    fn min_sin_tan(self) -> Self;
}

macro_rules! float_element {
    ($t:ty, $tag:expr) => {
        impl Element for $t {
            const TYPE: ElementType = $tag;

            #[inline]
            fn zero() -> Self {
                0.0
            }

            #[inline]
            fn from_u64_wrapping(v: u64) -> Self {
                v as $t
            }

            #[inline]
            fn combine(self, other: Self) -> Self {
                self + other
            }

            #[inline]
            fn total_cmp(&self, other: &Self) -> Ordering {
                <$t>::total_cmp(self, other)
            }

            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
        }

        impl FloatElement for $t {
            #[inline]
            fn min_sin_tan(self) -> Self {
                self.sin().min(self.tan())
            }
        }
    };
}

float_element!(f32, ElementType::Float32);
float_element!(f64, ElementType::Float64);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_match_tags() {
        assert_eq!(ElementType::Int32.size(), std::mem::size_of::<i32>());
        assert_eq!(ElementType::Int64.size(), std::mem::size_of::<i64>());
        assert_eq!(ElementType::Float32.size(), std::mem::size_of::<f32>());
        assert_eq!(ElementType::Float64.size(), std::mem::size_of::<f64>());
    }

    #[test]
    fn names_round_trip() {
        for t in ElementType::ALL {
            assert_eq!(t.name().parse::<ElementType>().unwrap(), t);
        }
        assert!("int16".parse::<ElementType>().is_err());
    }

    #[test]
    fn integer_combine_wraps() {
        assert_eq!(i32::MAX.combine(1), i32::MIN);
        assert_eq!(i32::from_u64_wrapping(1 << 32), 0);
        assert_eq!(i32::from_u64_wrapping((1 << 32) + 5), 5);
    }

    #[test]
    fn min_sin_tan_orders() {
        assert_eq!(0.0f64.min_sin_tan(), 0.0);
        let q = std::f64::consts::FRAC_PI_4;
        assert!((q.min_sin_tan() - q.sin()).abs() < 1e-15);
        let t = 3.0 * q;
        assert!((t.min_sin_tan() + 1.0).abs() < 1e-12);
    }
}
