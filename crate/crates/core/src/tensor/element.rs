use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size_in_bytes(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) enum Storage {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl Storage {
    pub(crate) fn dtype(&self) -> DType {
        match self {
            Storage::F32(_) => DType::F32,
            Storage::F64(_) => DType::F64,
        }
    }

    pub(crate) fn len(&self) -> usize {
        match self {
            Storage::F32(v) => v.len(),
            Storage::F64(v) => v.len(),
        }
    }

    pub(crate) fn to_f64_vec(&self) -> Vec<f64> {
        match self {
            Storage::F32(v) => v.iter().map(|&x| x as f64).collect(),
            Storage::F64(v) => v.clone(),
        }
    }

    pub(crate) fn to_f32_vec(&self) -> Vec<f32> {
        match self {
            Storage::F32(v) => v.clone(),
            Storage::F64(v) => v.iter().map(|&x| x as f32).collect(),
        }
    }

    pub(crate) fn cast(&self, dtype: DType) -> Storage {
        match (self, dtype) {
            (Storage::F32(v), DType::F32) => Storage::F32(v.clone()),
            (Storage::F64(v), DType::F64) => Storage::F64(v.clone()),
            (s, DType::F32) => Storage::F32(s.to_f32_vec()),
            (s, DType::F64) => Storage::F64(s.to_f64_vec()),
        }
    }

    /// `self += other`; both must share a dtype and length.
    pub(crate) fn accumulate(&mut self, other: &Storage) {
        match (self, other) {
            (Storage::F32(a), Storage::F32(b)) => a.iter_mut().zip(b).for_each(|(x, y)| *x += *y),
            (Storage::F64(a), Storage::F64(b)) => a.iter_mut().zip(b).for_each(|(x, y)| *x += *y),
            _ => unreachable!("gradient dtype mismatch"),
        }
    }

    pub(crate) fn all_finite(&self) -> bool {
        match self {
            Storage::F32(v) => v.iter().all(|x| x.is_finite()),
            Storage::F64(v) => v.iter().all(|x| x.is_finite()),
        }
    }
}

/// Scalar types a tensor can hold. Kernels are written once, generic over
/// this trait, and instantiated for `f32` (deployment) and `f64` (gradient
/// verification).
pub(crate) trait Element:
    num_traits::Float
    + Copy
    + Default
    + Debug
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn view(s: &Storage) -> &[Self];
    fn wrap(v: Vec<Self>) -> Storage;
}

impl Element for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn view(s: &Storage) -> &[Self] {
        match s {
            Storage::F32(v) => v,
            Storage::F64(_) => unreachable!("expected f32 storage"),
        }
    }
    fn wrap(v: Vec<Self>) -> Storage {
        Storage::F32(v)
    }
}

impl Element for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    fn view(s: &Storage) -> &[Self] {
        match s {
            Storage::F64(v) => v,
            Storage::F32(_) => unreachable!("expected f64 storage"),
        }
    }
    fn wrap(v: Vec<Self>) -> Storage {
        Storage::F64(v)
    }
}

/// Instantiate a generic kernel for the runtime dtype.
macro_rules! dispatch {
    ($dtype:expr, $f:ident $(:: <$($g:ty),*>)? ( $($arg:expr),* $(,)? )) => {
        match $dtype {
            $crate::tensor::DType::F32 => $f::<f32 $(, $($g),*)?>($($arg),*),
            $crate::tensor::DType::F64 => $f::<f64 $(, $($g),*)?>($($arg),*),
        }
    };
}
pub(crate) use dispatch;
