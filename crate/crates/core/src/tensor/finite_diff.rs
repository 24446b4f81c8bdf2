//! Central finite differences in 64-bit, the reference every analytic
//! gradient is checked against.

use super::{kink, no_grad, DType, Tensor};
use crate::error::{Error, Result};

/// `(f(x + eps·eᵢ) − f(x − eps·eᵢ)) / 2eps` for every element `i`.
///
/// `f` receives an `f64` tensor of `x`'s shape and must be deterministic.
pub fn finite_diff_grad(f: impl Fn(&Tensor) -> Result<f64>, x: &Tensor, eps: f64) -> Result<Tensor> {
    let all: Vec<usize> = (0..x.numel()).collect();
    let samples = finite_diff_at(f, x, eps, &all)?;
    Tensor::from_f64_vec(samples.into_iter().map(|s| s.value).collect(), x.shape())
}

#[derive(Clone, Copy, Debug)]
pub struct FdSample {
    pub index: usize,
    pub value: f64,
    /// A ReLU changed sign inside `[x − eps, x + eps]`; the difference
    /// quotient straddles a kink and says nothing about the derivative.
    pub kink: bool,
}

/// Central differences at selected flat indices, with kink detection.
pub fn finite_diff_at(
    f: impl Fn(&Tensor) -> Result<f64>,
    x: &Tensor,
    eps: f64,
    indices: &[usize],
) -> Result<Vec<FdSample>> {
    if let Some(&bad) = indices.iter().find(|&&i| i >= x.numel()) {
        return Err(Error::Invalid(format!("index {bad} out of range for {} elements", x.numel())));
    }
    let _g = no_grad();
    let base = x.to_vec_f64();
    let shape = x.shape().to_vec();
    let eval = |v: Vec<f64>| -> Result<(f64, u64)> {
        let t = Tensor::from_f64_vec(v, &shape)?;
        let (r, sig) = kink::trace(|| f(&t));
        Ok((r?, sig))
    };
    let (_, sig0) = eval(base.clone())?;
    let mut out = Vec::with_capacity(indices.len());
    for &i in indices {
        let mut plus = base.clone();
        plus[i] += eps;
        let mut minus = base.clone();
        minus[i] -= eps;
        let (fp, sp) = eval(plus)?;
        let (fm, sm) = eval(minus)?;
        out.push(FdSample {
            index: i,
            value: (fp - fm) / (2.0 * eps),
            kink: sp != sig0 || sm != sig0,
        });
    }
    Ok(out)
}

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂)`, 0 when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nb);
    if denom == 0.0 {
        0.0
    } else {
        diff / denom
    }
}

/// Cast helper for oracle callers holding `f32` tensors.
pub fn shadow(x: &Tensor) -> Tensor {
    x.to_dtype(DType::F64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::from_f64_vec(vec![3.0], &[1]).unwrap();
        let g = finite_diff_grad(
            |t| {
                let v = t.to_vec_f64();
                Ok(v.iter().map(|a| a * a).sum())
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert!((g.to_vec_f64()[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn softmax_sum_is_flat() {
        let x = Tensor::from_f64_vec(vec![0.5, -1.0, 2.0, 0.0], &[4]).unwrap();
        let g = finite_diff_grad(|t| t.softmax_lastdim()?.sum()?.item(), &x, 1e-3).unwrap();
        assert!(g.to_vec_f64().iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn kink_detected_near_zero() {
        let x = Tensor::from_f64_vec(vec![1e-4, 1.0], &[2]).unwrap();
        let s = finite_diff_at(|t| t.relu()?.sum()?.item(), &x, 1e-3, &[0, 1]).unwrap();
        assert!(s[0].kink);
        assert!(!s[1].kink);
        assert!((s[1].value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn relative_error_basics() {
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
        assert!((relative_error(&[1.0, 0.0], &[1.0, 1e-3]) - 1e-3).abs() < 1e-9);
    }
}
