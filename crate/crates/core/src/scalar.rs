//! Floating-point element types the whole crate is generic over.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, NumAssign};

/// Storage tag written into checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn byte_width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            4 => Some(DType::F32),
            8 => Some(DType::F64),
            _ => None,
        }
    }
}

/// A real scalar usable as tensor element: `f32` for training, `f64` for
/// gradient checks.
pub trait Scalar: Float + FromPrimitive + NumAssign + Debug + Display + Default + Send + Sync + 'static {
    const DTYPE: DType;

    /// Lossless for both supported widths.
    fn to_f64_lossless(self) -> f64;

    /// Round-to-nearest conversion from a literal.
    fn lit(v: f64) -> Self;

    fn write_le(self, out: &mut Vec<u8>);

    /// `bytes.len()` must equal `DTYPE.byte_width()`.
    fn read_le(bytes: &[u8]) -> Self;

    fn erf(self) -> Self;
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    fn to_f64_lossless(self) -> f64 {
        self as f64
    }

    fn lit(v: f64) -> Self {
        v as f32
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4-byte slice"))
    }

    fn erf(self) -> Self {
        libm::erff(self)
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    fn to_f64_lossless(self) -> f64 {
        self
    }

    fn lit(v: f64) -> Self {
        v
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8-byte slice"))
    }

    fn erf(self) -> Self {
        libm::erf(self)
    }
}
