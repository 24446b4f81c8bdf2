use super::gemm::{gemm_nn, gemm_nt, gemm_tn};
use super::same_dtype;
use crate::error::{Error, Result};
use crate::profile::{self, OpKind};
use crate::tensor::{dispatch, Element, Tensor};

impl Tensor {
    /// `[.., M, K] · [.., K, P] -> [.., M, P]`. Leading (batch) extents must
    /// be identical; there is no broadcasting.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let _p = profile::enter(OpKind::Matmul);
        same_dtype("matmul", self, other)?;
        let (a, b) = (self.shape(), other.shape());
        let r = a.len();
        if r < 2 || b.len() != r || a[..r - 2] != b[..r - 2] || a[r - 1] != b[r - 2] {
            return Err(Error::shape("matmul", format!("{a:?} x {b:?}")));
        }
        dispatch!(self.dtype(), matmul_impl(self, other))
    }

    /// Affine map over the last axis: `x[.., K] · wᵀ + b` with `w: [P, K]`.
    pub fn linear(&self, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let _p = profile::enter(OpKind::Linear);
        same_dtype("linear", self, weight)?;
        let k = *self.shape().last().expect("rank >= 1");
        if weight.rank() != 2 || weight.shape()[1] != k {
            return Err(Error::shape(
                "linear",
                format!("input {:?}, weight {:?}", self.shape(), weight.shape()),
            ));
        }
        if let Some(b) = bias {
            same_dtype("linear", self, b)?;
            if b.shape() != [weight.shape()[0]] {
                return Err(Error::shape("linear", format!("bias {:?}", b.shape())));
            }
        }
        dispatch!(self.dtype(), linear_impl(self, weight, bias))
    }
}

fn matmul_impl<T: Element>(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let r = a.rank();
    let (m, k, p) = (a.shape()[r - 2], a.shape()[r - 1], b.shape()[r - 1]);
    let batch: usize = a.shape()[..r - 2].iter().product();
    let (av, bv) = (a.values::<T>(), b.values::<T>());
    let mut out = vec![T::zero(); batch * m * p];
    for i in 0..batch {
        gemm_nn(
            m,
            k,
            p,
            &av[i * m * k..(i + 1) * m * k],
            &bv[i * k * p..(i + 1) * k * p],
            &mut out[i * m * p..(i + 1) * m * p],
            false,
        );
    }
    let mut shape = a.shape().to_vec();
    shape[r - 1] = p;
    Tensor::from_op("matmul", shape, T::wrap(out), &[a, b], || {
        let (a, b) = (a.clone(), b.clone());
        Box::new(move |g| {
            let g = T::view(g);
            let (av, bv) = (a.values::<T>(), b.values::<T>());
            let mut da = vec![T::zero(); batch * m * k];
            let mut db = vec![T::zero(); batch * k * p];
            for i in 0..batch {
                let gi = &g[i * m * p..(i + 1) * m * p];
                // dA = dC · Bᵀ, dB = Aᵀ · dC
                gemm_nt(m, p, k, gi, &bv[i * k * p..(i + 1) * k * p], &mut da[i * m * k..(i + 1) * m * k], false);
                gemm_tn(k, m, p, &av[i * m * k..(i + 1) * m * k], gi, &mut db[i * k * p..(i + 1) * k * p], false);
            }
            Ok(vec![Some(T::wrap(da)), Some(T::wrap(db))])
        })
    })
}

fn linear_impl<T: Element>(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let k = *x.shape().last().unwrap();
    let p = w.shape()[0];
    let rows = x.numel() / k;
    let mut out = vec![T::zero(); rows * p];
    gemm_nt(rows, k, p, x.values::<T>(), w.values::<T>(), &mut out, false);
    if let Some(b) = b {
        let bv = b.values::<T>();
        for row in out.chunks_mut(p) {
            for (o, &bb) in row.iter_mut().zip(bv) {
                *o += bb;
            }
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = p;
    let mut parents = vec![x, w];
    if let Some(b) = b {
        parents.push(b);
    }
    let has_bias = b.is_some();
    Tensor::from_op("linear", shape, T::wrap(out), &parents, || {
        let (x, w) = (x.clone(), w.clone());
        Box::new(move |g| {
            let g = T::view(g);
            let mut dx = vec![T::zero(); rows * k];
            gemm_nn(rows, p, k, g, w.values::<T>(), &mut dx, false);
            let mut dw = vec![T::zero(); p * k];
            gemm_tn(p, rows, k, g, x.values::<T>(), &mut dw, false);
            let mut grads = vec![Some(T::wrap(dx)), Some(T::wrap(dw))];
            if has_bias {
                let mut db = vec![T::zero(); p];
                for row in g.chunks(p) {
                    for (d, &gv) in db.iter_mut().zip(row) {
                        *d += gv;
                    }
                }
                grads.push(Some(T::wrap(db)));
            }
            Ok(grads)
        })
    })
}
