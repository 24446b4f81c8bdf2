mod conv;
mod elementwise;
mod gemm;
mod loss;
mod matmul;
mod norm;
mod shape;

pub use conv::Conv2dParams;
pub use norm::BatchNormStats;

use super::Tensor;
use crate::error::{Error, Result};

pub(crate) fn same_dtype(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dtype() != b.dtype() {
        return Err(Error::DType {
            op,
            expected: a.dtype(),
            got: b.dtype(),
        });
    }
    Ok(())
}

pub(crate) fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    same_dtype(op, a, b)?;
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}
