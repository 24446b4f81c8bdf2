use std::sync::RwLock;

use super::{join, Ctx, Module, Slot};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{no_grad, Conv2dParams, DType, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LN_EPS: f64 = 1e-5;

fn vec_tensor(v: Vec<f64>, shape: &[usize], dtype: DType) -> Result<Tensor> {
    Ok(Tensor::from_f64_vec(v, shape)?.to_dtype(dtype))
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub params: Conv2dParams,
}

impl Conv2d {
    /// He-normal init, no bias.
    pub fn new(cin: usize, cout: usize, k: usize, params: Conv2dParams, rng: &mut Rng) -> Self {
        let cin_g = cin / params.groups;
        let fan_in = cin_g * k * k;
        let weight = rng.normal_tensor(&[cout, cin_g, k, k], (2.0 / fan_in as f64).sqrt());
        Self {
            weight,
            bias: None,
            params,
        }
    }

    /// 1×1, stride 1, bias-free projection with `1/√fan_in` init.
    pub fn pointwise(cin: usize, cout: usize, rng: &mut Rng) -> Self {
        let weight = rng.normal_tensor(&[cout, cin, 1, 1], (1.0 / cin as f64).sqrt());
        Self {
            weight,
            bias: None,
            params: Conv2dParams::default(),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1] * self.params.groups
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.conv2d(&self.weight, self.bias.as_ref(), self.params)
    }
}

impl Module for Conv2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, Slot)) {
        f(&join(prefix, "weight"), &self.weight, Slot::Param);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b, Slot::Param);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, Slot)) {
        f(&join(prefix, "weight"), &mut self.weight, Slot::Param);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b, Slot::Param);
        }
    }
}

/// Batch normalization over axis 1 with running estimates.
#[derive(Debug)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    running_mean: RwLock<Tensor>,
    running_var: RwLock<Tensor>,
    pub eps: f64,
    pub momentum: f64,
}

impl Clone for BatchNorm {
    fn clone(&self) -> Self {
        Self {
            gamma: self.gamma.clone(),
            beta: self.beta.clone(),
            running_mean: RwLock::new(self.running_mean()),
            running_var: RwLock::new(self.running_var()),
            eps: self.eps,
            momentum: self.momentum,
        }
    }
}

impl BatchNorm {
    pub fn new(c: usize) -> Self {
        let f = |v| Tensor::full(&[c], v, DType::F32).expect("positive width");
        Self {
            gamma: f(1.0),
            beta: f(0.0),
            running_mean: RwLock::new(f(0.0)),
            running_var: RwLock::new(f(1.0)),
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    pub fn running_mean(&self) -> Tensor {
        self.running_mean.read().expect("bn lock").clone()
    }

    pub fn running_var(&self) -> Tensor {
        self.running_var.read().expect("bn lock").clone()
    }

    pub fn set_running_stats(&mut self, mean: Tensor, var: Tensor) {
        *self.running_mean.get_mut().expect("bn lock") = mean;
        *self.running_var.get_mut().expect("bn lock") = var;
    }

    /// Per-channel `(scale, shift)` such that eval-mode BN is `x·scale + shift`.
    pub fn affine(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let g = self.gamma.to_vec_f64();
        let b = self.beta.to_vec_f64();
        let m = self.running_mean().to_vec_f64();
        let v = self.running_var().to_vec_f64();
        let mut scale = Vec::with_capacity(g.len());
        let mut shift = Vec::with_capacity(g.len());
        for c in 0..g.len() {
            let denom = v[c] + self.eps;
            if denom <= 0.0 || v[c] < 0.0 {
                return Err(Error::NonPositiveVariance(c));
            }
            let s = g[c] / denom.sqrt();
            scale.push(s);
            shift.push(b[c] - m[c] * s);
        }
        Ok((scale, shift))
    }

    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let rm = self.running_mean();
        let rv = self.running_var();
        let (y, stats) = x.batch_norm(&self.gamma, &self.beta, &rm, &rv, self.eps, ctx.train)?;
        if let Some(stats) = stats {
            let _g = no_grad();
            let mo = self.momentum;
            let dtype = rm.dtype();
            let blend = |old: Vec<f64>, new: &[f64]| -> Vec<f64> {
                old.iter().zip(new).map(|(o, n)| (1.0 - mo) * o + mo * n).collect()
            };
            let c = self.channels();
            let nm = vec_tensor(blend(rm.to_vec_f64(), &stats.mean), &[c], dtype)?;
            let nv = vec_tensor(blend(rv.to_vec_f64(), &stats.var_unbiased), &[c], dtype)?;
            *self.running_mean.write().expect("bn lock") = nm;
            *self.running_var.write().expect("bn lock") = nv;
        }
        Ok(y)
    }
}

impl Module for BatchNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, Slot)) {
        f(&join(prefix, "weight"), &self.gamma, Slot::Param);
        f(&join(prefix, "bias"), &self.beta, Slot::Param);
        f(&join(prefix, "running_mean"), &self.running_mean(), Slot::Buffer);
        f(&join(prefix, "running_var"), &self.running_var(), Slot::Buffer);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, Slot)) {
        f(&join(prefix, "weight"), &mut self.gamma, Slot::Param);
        f(&join(prefix, "bias"), &mut self.beta, Slot::Param);
        f(
            &join(prefix, "running_mean"),
            self.running_mean.get_mut().expect("bn lock"),
            Slot::Buffer,
        );
        f(
            &join(prefix, "running_var"),
            self.running_var.get_mut().expect("bn lock"),
            Slot::Buffer,
        );
    }
}

/// Convolution followed by batch norm. After [`ConvBn::fold_bn`] the BN is
/// gone and the conv carries the folded weights and a bias.
#[derive(Clone, Debug)]
pub struct ConvBn {
    pub conv: Conv2d,
    pub bn: Option<BatchNorm>,
}

impl ConvBn {
    pub fn new(cin: usize, cout: usize, k: usize, params: Conv2dParams, rng: &mut Rng) -> Self {
        Self {
            conv: Conv2d::new(cin, cout, k, params, rng),
            bn: Some(BatchNorm::new(cout)),
        }
    }

    pub fn is_fused(&self) -> bool {
        self.bn.is_none()
    }

    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let y = self.conv.forward(x)?;
        match &self.bn {
            Some(bn) => bn.forward(&y, ctx),
            None => Ok(y),
        }
    }

    /// `w' = w·γ/√(var+eps)`, `b' = (b − mean)·γ/√(var+eps) + β`.
    pub fn fold_bn(&self) -> Result<ConvBn> {
        let bn = self.bn.as_ref().ok_or(Error::AlreadyFused)?;
        let (scale, shift) = bn.affine()?;
        let w = &self.conv.weight;
        let dtype = w.dtype();
        let cout = w.shape()[0];
        let per_out = w.numel() / cout;
        let mut wv = w.to_vec_f64();
        for (o, chunk) in wv.chunks_mut(per_out).enumerate() {
            for v in chunk {
                *v *= scale[o];
            }
        }
        let b = match &self.conv.bias {
            Some(b) => b.to_vec_f64(),
            None => vec![0.0; cout],
        };
        let bv: Vec<f64> = (0..cout).map(|o| b[o] * scale[o] + shift[o]).collect();
        Ok(ConvBn {
            conv: Conv2d {
                weight: vec_tensor(wv, w.shape(), dtype)?,
                bias: Some(vec_tensor(bv, &[cout], dtype)?),
                params: self.conv.params,
            },
            bn: None,
        })
    }
}

impl Module for ConvBn {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, Slot)) {
        self.conv.visit(&join(prefix, "conv"), f);
        if let Some(bn) = &self.bn {
            bn.visit(&join(prefix, "bn"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, Slot)) {
        self.conv.visit_mut(&join(prefix, "conv"), f);
        if let Some(bn) = &mut self.bn {
            bn.visit_mut(&join(prefix, "bn"), f);
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    /// `[out, in]`.
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(cin: usize, cout: usize, bias: bool, rng: &mut Rng) -> Self {
        Self {
            weight: rng.normal_tensor(&[cout, cin], (1.0 / cin as f64).sqrt()),
            bias: bias.then(|| Tensor::zeros(&[cout], DType::F32).expect("positive width")),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.linear(&self.weight, self.bias.as_ref())
    }
}

impl Module for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, Slot)) {
        f(&join(prefix, "weight"), &self.weight, Slot::Param);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b, Slot::Param);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, Slot)) {
        f(&join(prefix, "weight"), &mut self.weight, Slot::Param);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b, Slot::Param);
        }
    }
}

/// Batch norm on `[N, C]` features followed by a linear map (classifier head).
#[derive(Clone, Debug)]
pub struct BnLinear {
    pub bn: Option<BatchNorm>,
    pub fc: Linear,
}

impl BnLinear {
    pub fn new(cin: usize, cout: usize, rng: &mut Rng) -> Self {
        Self {
            bn: Some(BatchNorm::new(cin)),
            fc: Linear::new(cin, cout, true, rng),
        }
    }

    pub fn is_fused(&self) -> bool {
        self.bn.is_none()
    }

    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        match &self.bn {
            Some(bn) => self.fc.forward(&bn.forward(x, ctx)?),
            None => self.fc.forward(x),
        }
    }

    /// BN precedes the linear map here, so it folds into the input side:
    /// `W' = W·diag(s)`, `b' = b + W·t` for BN's `x·s + t`.
    pub fn fold_bn(&self) -> Result<BnLinear> {
        let bn = self.bn.as_ref().ok_or(Error::AlreadyFused)?;
        let (scale, shift) = bn.affine()?;
        let w = &self.fc.weight;
        let dtype = w.dtype();
        let (p, k) = (w.shape()[0], w.shape()[1]);
        let wv = w.to_vec_f64();
        let mut b = match &self.fc.bias {
            Some(b) => b.to_vec_f64(),
            None => vec![0.0; p],
        };
        let mut nw = wv.clone();
        for o in 0..p {
            for i in 0..k {
                nw[o * k + i] = wv[o * k + i] * scale[i];
                b[o] += wv[o * k + i] * shift[i];
            }
        }
        Ok(BnLinear {
            bn: None,
            fc: Linear {
                weight: vec_tensor(nw, &[p, k], dtype)?,
                bias: Some(vec_tensor(b, &[p], dtype)?),
            },
        })
    }
}

impl Module for BnLinear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, Slot)) {
        if let Some(bn) = &self.bn {
            bn.visit(&join(prefix, "bn"), f);
        }
        self.fc.visit(&join(prefix, "fc"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, Slot)) {
        if let Some(bn) = &mut self.bn {
            bn.visit_mut(&join(prefix, "bn"), f);
        }
        self.fc.visit_mut(&join(prefix, "fc"), f);
    }
}

#[derive(Clone, Debug)]
pub struct LayerNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

impl LayerNormParams {
    pub fn new(c: usize) -> Self {
        Self {
            gamma: Tensor::ones(&[c], DType::F32).expect("positive width"),
            beta: Tensor::zeros(&[c], DType::F32).expect("positive width"),
            eps: LN_EPS,
        }
    }

    pub fn forward(&self, x: &Tensor, axis: usize) -> Result<Tensor> {
        x.layer_norm(&self.gamma, &self.beta, self.eps, axis)
    }
}

impl Module for LayerNormParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, Slot)) {
        f(&join(prefix, "weight"), &self.gamma, Slot::Param);
        f(&join(prefix, "bias"), &self.beta, Slot::Param);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, Slot)) {
        f(&join(prefix, "weight"), &mut self.gamma, Slot::Param);
        f(&join(prefix, "bias"), &mut self.beta, Slot::Param);
    }
}
