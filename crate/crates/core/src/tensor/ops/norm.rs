use super::same_dtype;
use crate::error::{Error, Result};
use crate::profile::{self, OpKind};
use crate::tensor::{dispatch, Element, Tensor};

/// Batch statistics produced by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormStats {
    pub mean: Vec<f64>,
    /// Unbiased (n−1) variance, the convention for running estimates.
    pub var_unbiased: Vec<f64>,
}

impl Tensor {
    /// Softmax over the last axis with max subtraction.
    pub fn softmax_lastdim(&self) -> Result<Tensor> {
        let _p = profile::enter(OpKind::Softmax);
        dispatch!(self.dtype(), softmax_impl(self))
    }

    /// Layer normalization over `axis` (1 for channel-first maps, or the last
    /// axis for token-major tensors). Biased variance.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64, axis: usize) -> Result<Tensor> {
        let _p = profile::enter(OpKind::LayerNorm);
        check_affine("layer_norm", self, gamma, beta, axis)?;
        dispatch!(self.dtype(), layer_norm_impl(self, gamma, beta, eps, axis))
    }

    /// Batch normalization over axis 1 of a `[N, C]` or `[N, C, H, W]`
    /// tensor. In training mode the batch statistics normalize the input and
    /// are returned; otherwise `running_mean`/`running_var` are used.
    pub fn batch_norm(
        &self,
        gamma: &Tensor,
        beta: &Tensor,
        running_mean: &Tensor,
        running_var: &Tensor,
        eps: f64,
        train: bool,
    ) -> Result<(Tensor, Option<BatchNormStats>)> {
        let _p = profile::enter(OpKind::BatchNorm);
        if self.rank() != 2 && self.rank() != 4 {
            return Err(Error::shape("batch_norm", format!("input {:?}", self.shape())));
        }
        check_affine("batch_norm", self, gamma, beta, 1)?;
        check_affine("batch_norm", self, running_mean, running_var, 1)?;
        dispatch!(self.dtype(), batch_norm_impl(self, gamma, beta, running_mean, running_var, eps, train))
    }

    /// Mean over the spatial axes: `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&self) -> Result<Tensor> {
        let _p = profile::enter(OpKind::GlobalAvgPool);
        self.dims4()?;
        dispatch!(self.dtype(), gap_impl(self))
    }
}

fn check_affine(op: &'static str, x: &Tensor, g: &Tensor, b: &Tensor, axis: usize) -> Result<()> {
    same_dtype(op, x, g)?;
    same_dtype(op, x, b)?;
    if axis >= x.rank() {
        return Err(Error::shape(op, format!("axis {axis} for shape {:?}", x.shape())));
    }
    let c = x.shape()[axis];
    if g.shape() != [c] || b.shape() != [c] {
        return Err(Error::shape(
            op,
            format!("affine params {:?}/{:?} for {c} channels", g.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn softmax_rows<T: Element>(xs: &[T], t: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(xs.len());
    for row in xs.chunks(t) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let start = out.len();
        let mut sum = T::zero();
        for &v in row {
            let e = (v - m).exp();
            sum += e;
            out.push(e);
        }
        for v in &mut out[start..] {
            *v = *v / sum;
        }
    }
    out
}

fn softmax_impl<T: Element>(x: &Tensor) -> Result<Tensor> {
    let t = *x.shape().last().unwrap();
    let out = softmax_rows(x.values::<T>(), t);
    let y = std::sync::Arc::new(T::wrap(out));
    if !y.all_finite() {
        return Err(Error::NonFinite { op: "softmax" });
    }
    let y_saved = std::sync::Arc::clone(&y);
    Ok(Tensor::from_op_unchecked(x.shape().to_vec(), y, &[x], || {
        Box::new(move |g| {
            let g = T::view(g);
            let y = T::view(&y_saved);
            let mut dx = Vec::with_capacity(y.len());
            for (yr, gr) in y.chunks(t).zip(g.chunks(t)) {
                let mut dot = T::zero();
                for (&a, &b) in yr.iter().zip(gr) {
                    dot += a * b;
                }
                dx.extend(yr.iter().zip(gr).map(|(&a, &b)| a * (b - dot)));
            }
            Ok(vec![Some(T::wrap(dx))])
        })
    }))
}

/// `(outer, C, inner)` view of a tensor around `axis`.
fn around_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn layer_norm_impl<T: Element>(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64, axis: usize) -> Result<Tensor> {
    let (outer, c, inner) = around_axis(x.shape(), axis);
    let xs = x.values::<T>();
    let (gv, bv) = (gamma.values::<T>(), beta.values::<T>());
    let eps_t = T::of(eps);
    let inv_c = T::of(1.0 / c as f64);
    let mut xhat = vec![T::zero(); xs.len()];
    let mut rstd = vec![T::zero(); outer * inner];
    let mut out = vec![T::zero(); xs.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * c + k) * inner + i;
            let mut mean = T::zero();
            for k in 0..c {
                mean += xs[idx(k)];
            }
            mean = mean * inv_c;
            let mut var = T::zero();
            for k in 0..c {
                let d = xs[idx(k)] - mean;
                var += d * d;
            }
            var = var * inv_c;
            let r = T::one() / (var + eps_t).sqrt();
            rstd[o * inner + i] = r;
            for k in 0..c {
                let j = idx(k);
                let h = (xs[j] - mean) * r;
                xhat[j] = h;
                out[j] = h * gv[k] + bv[k];
            }
        }
    }
    Tensor::from_op("layer_norm", x.shape().to_vec(), T::wrap(out), &[x, gamma, beta], || {
        let gamma = gamma.clone();
        Box::new(move |g| {
            let g = T::view(g);
            let gv = gamma.values::<T>();
            let mut dx = vec![T::zero(); g.len()];
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |k: usize| (o * c + k) * inner + i;
                    let mut mean_d = T::zero();
                    let mut mean_dh = T::zero();
                    for k in 0..c {
                        let j = idx(k);
                        let d = g[j] * gv[k];
                        mean_d += d;
                        mean_dh += d * xhat[j];
                        dgamma[k] += g[j] * xhat[j];
                        dbeta[k] += g[j];
                    }
                    mean_d = mean_d * inv_c;
                    mean_dh = mean_dh * inv_c;
                    let r = rstd[o * inner + i];
                    for k in 0..c {
                        let j = idx(k);
                        dx[j] = r * (g[j] * gv[k] - mean_d - xhat[j] * mean_dh);
                    }
                }
            }
            Ok(vec![Some(T::wrap(dx)), Some(T::wrap(dgamma)), Some(T::wrap(dbeta))])
        })
    })
}

fn batch_norm_impl<T: Element>(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &Tensor,
    running_var: &Tensor,
    eps: f64,
    train: bool,
) -> Result<(Tensor, Option<BatchNormStats>)> {
    let (n, c, inner) = around_axis(x.shape(), 1);
    let m = n * inner;
    let xs = x.values::<T>();
    let (gv, bv) = (gamma.values::<T>(), beta.values::<T>());
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    let mut stats = None;
    if train {
        let inv_m = T::of(1.0 / m as f64);
        let mut unbiased = vec![0.0; c];
        for k in 0..c {
            let mut s = T::zero();
            for b in 0..n {
                for &v in &xs[(b * c + k) * inner..(b * c + k + 1) * inner] {
                    s += v;
                }
            }
            let mu = s * inv_m;
            let mut ss = T::zero();
            for b in 0..n {
                for &v in &xs[(b * c + k) * inner..(b * c + k + 1) * inner] {
                    ss += (v - mu) * (v - mu);
                }
            }
            mean[k] = mu;
            var[k] = ss * inv_m;
            unbiased[k] = if m > 1 { ss.as_f64() / (m - 1) as f64 } else { 0.0 };
        }
        stats = Some(BatchNormStats {
            mean: mean.iter().map(|v| v.as_f64()).collect(),
            var_unbiased: unbiased,
        });
    } else {
        mean.copy_from_slice(running_mean.values::<T>());
        var.copy_from_slice(running_var.values::<T>());
    }
    let eps_t = T::of(eps);
    let mut rstd = vec![T::zero(); c];
    for k in 0..c {
        let v = var[k] + eps_t;
        if !(v > T::zero()) {
            return Err(Error::NonPositiveVariance(k));
        }
        rstd[k] = T::one() / v.sqrt();
    }
    let mut xhat = vec![T::zero(); xs.len()];
    let mut out = vec![T::zero(); xs.len()];
    for b in 0..n {
        for k in 0..c {
            let off = (b * c + k) * inner;
            for j in off..off + inner {
                let h = (xs[j] - mean[k]) * rstd[k];
                xhat[j] = h;
                out[j] = h * gv[k] + bv[k];
            }
        }
    }
    let y = Tensor::from_op("batch_norm", x.shape().to_vec(), T::wrap(out), &[x, gamma, beta], || {
        let gamma = gamma.clone();
        Box::new(move |g| {
            let g = T::view(g);
            let gv = gamma.values::<T>();
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for b in 0..n {
                for k in 0..c {
                    let off = (b * c + k) * inner;
                    for j in off..off + inner {
                        dgamma[k] += g[j] * xhat[j];
                        dbeta[k] += g[j];
                    }
                }
            }
            let mut dx = vec![T::zero(); g.len()];
            let inv_m = T::of(1.0 / m as f64);
            for b in 0..n {
                for k in 0..c {
                    let off = (b * c + k) * inner;
                    let scale = gv[k] * rstd[k];
                    for j in off..off + inner {
                        dx[j] = if train {
                            // Batch statistics depend on every input.
                            scale * (g[j] - dbeta[k] * inv_m - xhat[j] * dgamma[k] * inv_m)
                        } else {
                            scale * g[j]
                        };
                    }
                }
            }
            Ok(vec![Some(T::wrap(dx)), Some(T::wrap(dgamma)), Some(T::wrap(dbeta))])
        })
    })?;
    Ok((y, stats))
}

fn gap_impl<T: Element>(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let plane = h * w;
    let inv = T::of(1.0 / plane as f64);
    let out: Vec<T> = x
        .values::<T>()
        .chunks(plane)
        .map(|p| {
            let mut s = T::zero();
            for &v in p {
                s += v;
            }
            s * inv
        })
        .collect();
    Tensor::from_op("global_avg_pool", vec![n, c], T::wrap(out), &[x], || {
        Box::new(move |g| {
            let dx = T::view(g)
                .iter()
                .flat_map(|&gv| std::iter::repeat_n(gv * inv, plane))
                .collect();
            Ok(vec![Some(T::wrap(dx))])
        })
    })
}
