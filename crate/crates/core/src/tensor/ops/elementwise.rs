use super::same_shape;
use crate::error::{Error, Result};
use crate::profile::{self, OpKind};
use crate::tensor::{dispatch, kink, Element, Tensor};

impl Tensor {
    /// max(x, 0); the gradient at exactly 0 is 0.
    pub fn relu(&self) -> Result<Tensor> {
        let _p = profile::enter(OpKind::Relu);
        dispatch!(self.dtype(), relu_impl(self))
    }

    /// Same-shape elementwise sum (residual add).
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        let _p = profile::enter(OpKind::Add);
        same_shape("add", self, other)?;
        dispatch!(self.dtype(), add_impl(self, other))
    }

    /// Same-shape elementwise product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        let _p = profile::enter(OpKind::Mul);
        same_shape("mul", self, other)?;
        dispatch!(self.dtype(), mul_impl(self, other))
    }

    pub fn scale(&self, factor: f64) -> Result<Tensor> {
        let _p = profile::enter(OpKind::Scale);
        dispatch!(self.dtype(), scale_impl(self, factor))
    }

    /// Multiplies each index of axis 1 by a constant factor. Used to apply a
    /// head mask to `(N, heads, ..)` tensors.
    pub fn scale_axis1(&self, factors: &[f64]) -> Result<Tensor> {
        let _p = profile::enter(OpKind::HeadMask);
        if self.rank() < 2 || self.shape()[1] != factors.len() {
            return Err(Error::shape(
                "scale_axis1",
                format!("{} factors for shape {:?}", factors.len(), self.shape()),
            ));
        }
        dispatch!(self.dtype(), scale_axis1_impl(self, factors))
    }

    /// Sum of all elements as a `[1]` tensor.
    pub fn sum(&self) -> Result<Tensor> {
        let _p = profile::enter(OpKind::Sum);
        dispatch!(self.dtype(), sum_impl(self, 1.0))
    }

    pub fn mean(&self) -> Result<Tensor> {
        let _p = profile::enter(OpKind::Sum);
        dispatch!(self.dtype(), sum_impl(self, 1.0 / self.numel() as f64))
    }
}

fn relu_impl<T: Element>(x: &Tensor) -> Result<Tensor> {
    let xs = x.values::<T>();
    kink::observe(xs);
    let zero = T::zero();
    let out: Vec<T> = xs.iter().map(|&v| if v > zero { v } else { zero }).collect();
    Tensor::from_op("relu", x.shape().to_vec(), T::wrap(out), &[x], || {
        let x = x.clone();
        Box::new(move |g| {
            let g = T::view(g);
            let dx = x
                .values::<T>()
                .iter()
                .zip(g)
                .map(|(&v, &g)| if v > zero { g } else { zero })
                .collect();
            Ok(vec![Some(T::wrap(dx))])
        })
    })
}

fn add_impl<T: Element>(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let out: Vec<T> = a
        .values::<T>()
        .iter()
        .zip(b.values::<T>())
        .map(|(&x, &y)| x + y)
        .collect();
    Tensor::from_op("add", a.shape().to_vec(), T::wrap(out), &[a, b], || {
        Box::new(|g| Ok(vec![Some(g.clone()), Some(g.clone())]))
    })
}

fn mul_impl<T: Element>(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let out: Vec<T> = a
        .values::<T>()
        .iter()
        .zip(b.values::<T>())
        .map(|(&x, &y)| x * y)
        .collect();
    Tensor::from_op("mul", a.shape().to_vec(), T::wrap(out), &[a, b], || {
        let (a, b) = (a.clone(), b.clone());
        Box::new(move |g| {
            let g = T::view(g);
            let da = g.iter().zip(b.values::<T>()).map(|(&g, &y)| g * y).collect();
            let db = g.iter().zip(a.values::<T>()).map(|(&g, &x)| g * x).collect();
            Ok(vec![Some(T::wrap(da)), Some(T::wrap(db))])
        })
    })
}

fn scale_impl<T: Element>(x: &Tensor, factor: f64) -> Result<Tensor> {
    let f = T::of(factor);
    let out: Vec<T> = x.values::<T>().iter().map(|&v| v * f).collect();
    Tensor::from_op("scale", x.shape().to_vec(), T::wrap(out), &[x], || {
        Box::new(move |g| {
            let dx = T::view(g).iter().map(|&g| g * f).collect();
            Ok(vec![Some(T::wrap(dx))])
        })
    })
}

fn apply_axis1<T: Element>(shape: &[usize], xs: &[T], factors: &[T]) -> Vec<T> {
    let inner: usize = shape[2..].iter().product();
    xs.chunks(inner)
        .enumerate()
        .flat_map(|(i, chunk)| {
            let f = factors[i % factors.len()];
            chunk.iter().map(move |&v| v * f)
        })
        .collect()
}

fn scale_axis1_impl<T: Element>(x: &Tensor, factors: &[f64]) -> Result<Tensor> {
    let f: Vec<T> = factors.iter().map(|&v| T::of(v)).collect();
    let out = apply_axis1(x.shape(), x.values::<T>(), &f);
    Tensor::from_op("scale_axis1", x.shape().to_vec(), T::wrap(out), &[x], || {
        let shape = x.shape().to_vec();
        Box::new(move |g| Ok(vec![Some(T::wrap(apply_axis1(&shape, T::view(g), &f)))]))
    })
}

fn sum_impl<T: Element>(x: &Tensor, factor: f64) -> Result<Tensor> {
    let mut acc = T::zero();
    for &v in x.values::<T>() {
        acc += v;
    }
    let f = T::of(factor);
    Tensor::from_op("sum", vec![1], T::wrap(vec![acc * f]), &[x], || {
        let n = x.numel();
        Box::new(move |g| {
            let g = T::view(g)[0] * f;
            Ok(vec![Some(T::wrap(vec![g; n]))])
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_values() {
        let x = Tensor::from_vec(vec![-1.0, 2.0, 0.0], &[3]).unwrap();
        assert_eq!(x.relu().unwrap().to_vec_f32(), vec![0.0, 2.0, 0.0]);
    }

    #[test]
    fn relu_grad_at_zero_is_zero() {
        let x = Tensor::from_vec(vec![0.0, 1.0], &[2]).unwrap().with_requires_grad(true);
        x.relu().unwrap().sum().unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap().to_vec_f32(), vec![0.0, 1.0]);
    }

    #[test]
    fn add_rejects_shape_mismatch() {
        let a = Tensor::zeros(&[2, 3], crate::tensor::DType::F32).unwrap();
        let b = Tensor::zeros(&[3, 2], crate::tensor::DType::F32).unwrap();
        assert!(a.add(&b).is_err());
    }

    #[test]
    fn non_finite_is_surfaced() {
        let a = Tensor::from_vec(vec![f32::MAX], &[1]).unwrap();
        assert!(matches!(a.scale(10.0), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn scale_axis1_zeroes_one_head() {
        let x = Tensor::ones(&[1, 2, 2, 1], crate::tensor::DType::F32).unwrap();
        let y = x.scale_axis1(&[1.0, 0.0]).unwrap();
        assert_eq!(y.to_vec_f32(), vec![1.0, 1.0, 0.0, 0.0]);
    }
}
