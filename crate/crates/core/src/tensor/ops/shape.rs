use std::sync::Arc;

use crate::error::{Error, Result};
use crate::profile::{self, OpKind};
use crate::tensor::{dispatch, Element, Tensor};

impl Tensor {
    /// Reinterprets the element order under a new shape. Shares storage.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let _p = profile::enter(OpKind::Reshape);
        let n: usize = shape.iter().product();
        if n != self.numel() || shape.is_empty() || shape.len() > 4 || shape.contains(&0) {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape(), shape),
            ));
        }
        Ok(Tensor::from_op_unchecked(
            shape.to_vec(),
            Arc::clone(self.storage_arc()),
            &[self],
            || Box::new(|g| Ok(vec![Some(g.clone())])),
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&self) -> Result<Tensor> {
        let _p = profile::enter(OpKind::Transpose);
        let r = self.rank();
        if r < 2 {
            return Err(Error::shape("transpose_last2", "rank must be >= 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        permute_op(self, &perm)
    }

    /// General axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        let _p = profile::enter(OpKind::Permute);
        let r = self.rank();
        let mut seen = [false; 4];
        if perm.len() != r || perm.iter().any(|&p| p >= r || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape(
                "permute",
                format!("{perm:?} is not a permutation of rank {r}"),
            ));
        }
        permute_op(self, perm)
    }

    /// Concatenates along axis 1.
    pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
        let _p = profile::enter(OpKind::Concat);
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat_channels", "no inputs"))?;
        if first.rank() < 2 {
            return Err(Error::shape("concat_channels", "rank must be >= 2"));
        }
        for p in parts {
            super::same_dtype("concat_channels", first, p)?;
            let ok = p.rank() == first.rank()
                && p.shape()[0] == first.shape()[0]
                && p.shape()[2..] == first.shape()[2..];
            if !ok {
                return Err(Error::shape(
                    "concat_channels",
                    format!("{:?} vs {:?}", first.shape(), p.shape()),
                ));
            }
        }
        dispatch!(first.dtype(), concat_impl(parts))
    }

    /// Partitions axis 1 into consecutive pieces of the given sizes.
    pub fn split_channels(&self, sizes: &[usize]) -> Result<Vec<Tensor>> {
        let _p = profile::enter(OpKind::Split);
        if self.rank() < 2 {
            return Err(Error::shape("split_channels", "rank must be >= 2"));
        }
        let c = self.shape()[1];
        if sizes.iter().sum::<usize>() != c || sizes.contains(&0) {
            return Err(Error::shape(
                "split_channels",
                format!("sizes {sizes:?} do not partition {c} channels"),
            ));
        }
        dispatch!(self.dtype(), split_impl(self, sizes))
    }
}

fn permute_data<T: Element>(xs: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let r = shape.len();
    // Pad to rank 4 with leading unit axes.
    let pad = 4 - r;
    let mut s4 = [1usize; 4];
    s4[pad..].copy_from_slice(shape);
    let mut p4 = [0usize, 1, 2, 3];
    for (i, &p) in perm.iter().enumerate() {
        p4[pad + i] = pad + p;
    }
    let mut in_strides = [0usize; 4];
    let mut acc = 1;
    for i in (0..4).rev() {
        in_strides[i] = acc;
        acc *= s4[i];
    }
    let out_shape4: [usize; 4] = std::array::from_fn(|i| s4[p4[i]]);
    let st: [usize; 4] = std::array::from_fn(|i| in_strides[p4[i]]);
    let mut out = Vec::with_capacity(xs.len());
    for a in 0..out_shape4[0] {
        for b in 0..out_shape4[1] {
            for c in 0..out_shape4[2] {
                let base = a * st[0] + b * st[1] + c * st[2];
                for d in 0..out_shape4[3] {
                    out.push(xs[base + d * st[3]]);
                }
            }
        }
    }
    let out_shape = perm.iter().map(|&p| shape[p]).collect();
    (out, out_shape)
}

fn permute_op(x: &Tensor, perm: &[usize]) -> Result<Tensor> {
    dispatch!(x.dtype(), permute_impl(x, perm))
}

fn permute_impl<T: Element>(x: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let (out, out_shape) = permute_data(x.values::<T>(), x.shape(), perm);
    let mut inverse = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inverse[p] = i;
    }
    let grad_shape = out_shape.clone();
    Tensor::from_op("permute", out_shape, T::wrap(out), &[x], || {
        Box::new(move |g| {
            let (dx, _) = permute_data(T::view(g), &grad_shape, &inverse);
            Ok(vec![Some(T::wrap(dx))])
        })
    })
}

fn concat_impl<T: Element>(parts: &[&Tensor]) -> Result<Tensor> {
    let n = parts[0].shape()[0];
    let inner: usize = parts[0].shape()[2..].iter().product();
    let widths: Vec<usize> = parts.iter().map(|p| p.shape()[1]).collect();
    let c_total: usize = widths.iter().sum();
    let mut out = Vec::with_capacity(n * c_total * inner);
    for b in 0..n {
        for (p, &c) in parts.iter().zip(&widths) {
            let xs = p.values::<T>();
            out.extend_from_slice(&xs[b * c * inner..(b + 1) * c * inner]);
        }
    }
    let mut shape = parts[0].shape().to_vec();
    shape[1] = c_total;
    Tensor::from_op("concat_channels", shape, T::wrap(out), parts, || {
        Box::new(move |g| {
            let g = T::view(g);
            let mut grads: Vec<Vec<T>> = widths
                .iter()
                .map(|&c| Vec::with_capacity(n * c * inner))
                .collect();
            let mut off = 0;
            for _ in 0..n {
                for (gp, &c) in grads.iter_mut().zip(&widths) {
                    gp.extend_from_slice(&g[off..off + c * inner]);
                    off += c * inner;
                }
            }
            Ok(grads.into_iter().map(|v| Some(T::wrap(v))).collect())
        })
    })
}

fn split_impl<T: Element>(x: &Tensor, sizes: &[usize]) -> Result<Vec<Tensor>> {
    let n = x.shape()[0];
    let c = x.shape()[1];
    let inner: usize = x.shape()[2..].iter().product();
    let xs = x.values::<T>();
    let mut start = 0;
    let mut outs = Vec::with_capacity(sizes.len());
    for &size in sizes {
        let mut data = Vec::with_capacity(n * size * inner);
        for b in 0..n {
            let off = (b * c + start) * inner;
            data.extend_from_slice(&xs[off..off + size * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[1] = size;
        let lo = start;
        let t = Tensor::from_op_unchecked(shape, Arc::new(T::wrap(data)), &[x], || {
            Box::new(move |g| {
                let g = T::view(g);
                let mut dx = vec![T::zero(); n * c * inner];
                for b in 0..n {
                    let src = &g[b * size * inner..(b + 1) * size * inner];
                    let off = (b * c + lo) * inner;
                    dx[off..off + size * inner].copy_from_slice(src);
                }
                Ok(vec![Some(T::wrap(dx))])
            })
        });
        outs.push(t);
        start += size;
    }
    Ok(outs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn arange(shape: &[usize]) -> Tensor {
        let n = shape.iter().product::<usize>();
        Tensor::from_vec((0..n).map(|v| v as f32).collect(), shape).unwrap()
    }

    #[test]
    fn transpose_2d() {
        let x = arange(&[2, 3]);
        let y = x.transpose_last2().unwrap();
        assert_eq!(y.shape(), &[3, 2]);
        assert_eq!(y.to_vec_f32(), vec![0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
    }

    #[test]
    fn permute_4d_matches_index_formula() {
        let x = arange(&[2, 3, 4, 5]);
        let y = x.permute(&[0, 2, 1, 3]).unwrap();
        assert_eq!(y.shape(), &[2, 4, 3, 5]);
        let xs = x.to_vec_f32();
        let ys = y.to_vec_f32();
        for a in 0..2 {
            for b in 0..4 {
                for c in 0..3 {
                    for d in 0..5 {
                        let yi = ((a * 4 + b) * 3 + c) * 5 + d;
                        let xi = ((a * 3 + c) * 4 + b) * 5 + d;
                        assert_eq!(ys[yi], xs[xi]);
                    }
                }
            }
        }
    }

    #[test]
    fn permute_rejects_repeats() {
        assert!(arange(&[2, 2]).permute(&[0, 0]).is_err());
    }

    #[test]
    fn split_puts_initial_channels_first() {
        let x = arange(&[1, 3, 1, 2]);
        let parts = x.split_channels(&[1, 2]).unwrap();
        assert_eq!(parts[0].to_vec_f32(), vec![0.0, 1.0]);
        assert_eq!(parts[1].to_vec_f32(), vec![2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn split_and_concat_totals_must_match() {
        let x = arange(&[1, 3, 1, 1]);
        assert!(x.split_channels(&[1, 1]).is_err());
        let a = arange(&[1, 2, 1, 1]);
        let b = arange(&[1, 2, 2, 1]);
        assert!(Tensor::concat_channels(&[&a, &b]).is_err());
    }

    proptest! {
        #[test]
        fn split_then_concat_is_identity(
            n in 1usize..3, c in 2usize..7, h in 1usize..4, w in 1usize..4, cut in 1usize..6, seed in 0u64..1000
        ) {
            let cut = 1 + cut % (c - 1);
            let mut rng = crate::rng::Rng::new(seed);
            let x = rng.normal_tensor(&[n, c, h, w], 1.0);
            let parts = x.split_channels(&[cut, c - cut]).unwrap();
            let y = Tensor::concat_channels(&[&parts[0], &parts[1]]).unwrap();
            prop_assert_eq!(y.shape(), x.shape());
            let xb: Vec<u32> = x.to_vec_f32().iter().map(|v| v.to_bits()).collect();
            let yb: Vec<u32> = y.to_vec_f32().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(xb, yb);
        }

        #[test]
        fn double_transpose_is_identity(a in 1usize..5, b in 1usize..5, c in 1usize..5) {
            let x = arange(&[a, b, c]);
            let y = x.transpose_last2().unwrap().transpose_last2().unwrap();
            prop_assert_eq!(y.to_vec_f32(), x.to_vec_f32());
        }
    }
}
