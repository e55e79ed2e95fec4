use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Element datatype of a tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    Float32,
    Int8,
    UInt8,
    Int16,
    Int32,
}

impl DType {
    pub const ALL: [DType; 5] = [DType::Float32, DType::Int8, DType::UInt8, DType::Int16, DType::Int32];

    pub fn name(self) -> &'static str {
        match self {
            DType::Float32 => "float32",
            DType::Int8 => "int8",
            DType::UInt8 => "uint8",
            DType::Int16 => "int16",
            DType::Int32 => "int32",
        }
    }

    /// Storage width in bits.
    pub fn width(self) -> u32 {
        match self {
            DType::Int8 | DType::UInt8 => 8,
            DType::Int16 => 16,
            DType::Float32 | DType::Int32 => 32,
        }
    }

    pub fn byte_size(self) -> usize {
        (self.width() / 8) as usize
    }

    pub fn is_float(self) -> bool {
        self == DType::Float32
    }

    pub fn is_integer(self) -> bool {
        !self.is_float()
    }

    pub fn is_signed(self) -> bool {
        !matches!(self, DType::UInt8)
    }

    /// Smallest representable value of an integer dtype.
    pub fn min_value(self) -> i64 {
        match self {
            DType::UInt8 => 0,
            DType::Float32 => i64::MIN,
            d => -(1i64 << (d.width() - 1)),
        }
    }

    /// Largest representable value of an integer dtype.
    pub fn max_value(self) -> i64 {
        match self {
            DType::UInt8 => 255,
            DType::Float32 => i64::MAX,
            d => (1i64 << (d.width() - 1)) - 1,
        }
    }

    pub fn contains(self, v: i64) -> bool {
        (self.min_value()..=self.max_value()).contains(&v)
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DType::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| Error::Spec(format!("unknown dtype token `{s}`")))
    }
}

/// Maximum effective bit width an integer dtype can carry. The sign bit is
/// included for signed dtypes.
pub fn max_bits(dtype: DType) -> Result<u32> {
    if dtype.is_float() {
        return Err(Error::Invalid(format!("{dtype} has no integer bit width")));
    }
    Ok(dtype.width())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranges() {
        assert_eq!((DType::Int8.min_value(), DType::Int8.max_value()), (-128, 127));
        assert_eq!((DType::UInt8.min_value(), DType::UInt8.max_value()), (0, 255));
        assert_eq!((DType::Int16.min_value(), DType::Int16.max_value()), (-32768, 32767));
        assert_eq!(DType::Int32.max_value(), i32::MAX as i64);
        assert_eq!(DType::Int32.min_value(), i32::MIN as i64);
    }

    #[test]
    fn max_bits_examples() {
        assert_eq!(max_bits(DType::Int8).unwrap(), 8);
        assert_eq!(max_bits(DType::Int16).unwrap(), 16);
        assert_eq!(max_bits(DType::Int32).unwrap(), 32);
        assert!(max_bits(DType::Float32).is_err());
    }

    #[test]
    fn tokens_roundtrip() {
        for d in DType::ALL {
            assert_eq!(d.name().parse::<DType>().unwrap(), d);
            assert_eq!(serde_json::to_string(&d).unwrap(), format!("\"{}\"", d.name()));
        }
        assert!("i8".parse::<DType>().is_err());
    }
}
