use crate::error::{Error, Result};
use crate::profile::{self, OpKind};
use crate::tensor::{dispatch, Element, Tensor};

impl Tensor {
    /// Mean softmax cross-entropy of `[N, K]` logits against class ids.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Tensor> {
        let _p = profile::enter(OpKind::CrossEntropy);
        let &[n, k] = self.shape() else {
            return Err(Error::shape("cross_entropy", format!("logits {:?}", self.shape())));
        };
        if labels.len() != n || labels.iter().any(|&l| l >= k) {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} labels for {n}x{k} logits", labels.len()),
            ));
        }
        dispatch!(self.dtype(), ce_impl(self, labels))
    }

    /// Row-wise argmax of a `[N, K]` tensor. Ties resolve to the lowest index.
    pub fn argmax_rows(&self) -> Result<Vec<usize>> {
        let &[_, k] = self.shape() else {
            return Err(Error::shape("argmax_rows", format!("{:?}", self.shape())));
        };
        Ok(self
            .to_vec_f64()
            .chunks(k)
            .map(|row| {
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect())
    }
}

fn ce_impl<T: Element>(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let k = logits.shape()[1];
    let n = labels.len();
    let xs = logits.values::<T>();
    let mut probs = Vec::with_capacity(xs.len());
    let mut total = T::zero();
    for (row, &label) in xs.chunks(k).zip(labels) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for &v in row {
            s += (v - m).exp();
        }
        let lse = m + s.ln();
        total += lse - row[label];
        probs.extend(row.iter().map(|&v| (v - lse).exp()));
    }
    let inv_n = T::of(1.0 / n as f64);
    let labels = labels.to_vec();
    Tensor::from_op("cross_entropy", vec![1], T::wrap(vec![total * inv_n]), &[logits], || {
        Box::new(move |g| {
            let scale = T::view(g)[0] * inv_n;
            let mut dx = probs;
            for (row, &label) in dx.chunks_mut(k).zip(&labels) {
                row[label] -= T::one();
                for v in row.iter_mut() {
                    *v *= scale;
                }
            }
            Ok(vec![Some(T::wrap(dx))])
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_k() {
        let x = Tensor::zeros(&[3, 4], crate::tensor::DType::F64).unwrap();
        let l = x.cross_entropy(&[0, 1, 3]).unwrap().item().unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn argmax_ties_to_lowest() {
        let x = Tensor::from_vec(vec![1.0, 3.0, 3.0, 0.0, -1.0, -2.0], &[2, 3]).unwrap();
        assert_eq!(x.argmax_rows().unwrap(), vec![1, 0]);
    }

    #[test]
    fn rejects_out_of_range_label() {
        let x = Tensor::zeros(&[1, 2], crate::tensor::DType::F32).unwrap();
        assert!(x.cross_entropy(&[2]).is_err());
    }
}
