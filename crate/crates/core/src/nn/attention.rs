//! Token mixers: partial-channel single-head attention, its multi-head
//! twin with a head mask, and the bottleneck single-head variant.

use super::{join, Conv2d, Ctx, LayerNormParams, Linear, Module, Slot};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const DEFAULT_PARTIAL_RATIO: f64 = 1.0 / 4.67;
pub const DEFAULT_D_QK: usize = 16;

/// `round(r·C)` clamped to `[1, C]`.
pub fn partial_channels(c: usize, ratio: f64) -> usize {
    ((ratio * c as f64).round() as usize).clamp(1, c)
}

fn check_mask(mask: &[f64], heads: usize) -> Result<()> {
    if mask.len() != heads {
        return Err(Error::Invalid(format!("head mask has {} entries for {heads} heads", mask.len())));
    }
    match mask.iter().find(|&&d| d != 0.0 && d != 1.0) {
        Some(&d) => Err(Error::NonBinaryMask(d as f32)),
        None => Ok(()),
    }
}

/// Channel-major single-head attention on `q, k: [N, d, T]`, `v: [N, dv, T]`.
/// Returns `A·V` as `[N, dv, T]` and `A` as `[N, T, T]`.
fn attend_channel_major(q: &Tensor, k: &Tensor, v: &Tensor, d_qk: usize) -> Result<(Tensor, Tensor)> {
    let scores = q.transpose_last2()?.matmul(k)?.scale(1.0 / (d_qk as f64).sqrt())?;
    let a = scores.softmax_lastdim()?;
    let out = v.matmul(&a.transpose_last2()?)?;
    Ok((out, a))
}

fn capture(ctx: &Ctx, id: usize, a: &Tensor, shape: &[usize]) -> Result<()> {
    if let Some(sink) = ctx.capture {
        let a = a.detach().reshape(shape)?;
        sink.lock().expect("capture lock").push((id, a));
    }
    Ok(())
}

/// Single-head attention over the first `Cp` channels; the rest pass
/// through untouched until the full-width output projection.
#[derive(Clone, Debug)]
pub struct Shsa {
    pub c: usize,
    pub cp: usize,
    pub d_qk: usize,
    pub norm: LayerNormParams,
    pub wq: Conv2d,
    pub wk: Conv2d,
    pub wv: Conv2d,
    pub wo: Conv2d,
    /// Attention layer index within a model.
    pub id: usize,
}

impl Shsa {
    pub fn new(c: usize, ratio: f64, d_qk: usize, rng: &mut Rng) -> Result<Self> {
        if !(ratio > 0.0 && ratio <= 1.0) {
            return Err(Error::Config(format!("partial ratio {ratio} outside (0, 1]")));
        }
        Self::with_partial(c, partial_channels(c, ratio), d_qk, rng)
    }

    pub fn with_partial(c: usize, cp: usize, d_qk: usize, rng: &mut Rng) -> Result<Self> {
        if cp == 0 || cp > c {
            return Err(Error::Config(format!("attended channels {cp} must be in 1..={c}")));
        }
        if d_qk == 0 {
            return Err(Error::Config("d_qk must be at least 1".into()));
        }
        Ok(Self {
            c,
            cp,
            d_qk,
            norm: LayerNormParams::new(cp),
            wq: Conv2d::pointwise(cp, d_qk, rng),
            wk: Conv2d::pointwise(cp, d_qk, rng),
            wv: Conv2d::pointwise(cp, cp, rng),
            wo: Conv2d::pointwise(c, c, rng),
            id: 0,
        })
    }

    /// The full-channel single-head design: attention over every channel.
    pub fn full_channel(c: usize, d_qk: usize, rng: &mut Rng) -> Result<Self> {
        Self::with_partial(c, c, d_qk, rng)
    }

    fn run(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let (n, c, h, w) = x.dims4()?;
        if c != self.c {
            return Err(Error::shape("shsa", format!("input has {c} channels, layer expects {}", self.c)));
        }
        let t = h * w;
        let (xa, xr) = if self.cp < c {
            let mut parts = x.split_channels(&[self.cp, c - self.cp])?;
            let xr = parts.pop();
            (parts.pop().expect("two parts"), xr)
        } else {
            (x.clone(), None)
        };
        let xa = self.norm.forward(&xa, 1)?;
        let q = self.wq.forward(&xa)?.reshape(&[n, self.d_qk, t])?;
        let k = self.wk.forward(&xa)?.reshape(&[n, self.d_qk, t])?;
        let v = self.wv.forward(&xa)?.reshape(&[n, self.cp, t])?;
        let (o, a) = attend_channel_major(&q, &k, &v, self.d_qk)?;
        let o = o.reshape(&[n, self.cp, h, w])?;
        let mixed = match xr {
            Some(xr) => Tensor::concat_channels(&[&o, &xr])?,
            None => o,
        };
        Ok((self.wo.forward(&mixed)?, a))
    }

    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let (y, a) = self.run(x)?;
        let (n, t) = (a.shape()[0], a.shape()[1]);
        capture(ctx, self.id, &a, &[n, 1, t, t])?;
        Ok(y)
    }

    /// Post-softmax attention, `[N, 1, T, T]`.
    pub fn attention_maps(&self, x: &Tensor) -> Result<Tensor> {
        let (_, a) = self.run(x)?;
        let (n, t) = (a.shape()[0], a.shape()[1]);
        a.reshape(&[n, 1, t, t])
    }
}

impl Module for Shsa {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, Slot)) {
        self.norm.visit(&join(prefix, "norm"), f);
        self.wq.visit(&join(prefix, "wq"), f);
        self.wk.visit(&join(prefix, "wk"), f);
        self.wv.visit(&join(prefix, "wv"), f);
        self.wo.visit(&join(prefix, "wo"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, Slot)) {
        self.norm.visit_mut(&join(prefix, "norm"), f);
        self.wq.visit_mut(&join(prefix, "wq"), f);
        self.wk.visit_mut(&join(prefix, "wk"), f);
        self.wv.visit_mut(&join(prefix, "wv"), f);
        self.wo.visit_mut(&join(prefix, "wo"), f);
    }
}

/// Multi-head attention in token-major layout with a per-head output mask.
#[derive(Clone, Debug)]
pub struct Mhsa {
    pub c: usize,
    pub heads: usize,
    pub d_head: usize,
    pub d_v: usize,
    pub norm: LayerNormParams,
    /// `[heads·d_head, C]`.
    pub wq: Linear,
    pub wk: Linear,
    /// `[heads·d_v, C]`.
    pub wv: Linear,
    /// `[C, heads·d_v]`.
    pub wo: Linear,
    mask: Vec<f64>,
    pub id: usize,
}

impl Mhsa {
    pub fn new(c: usize, heads: usize, d_head: usize, d_v: usize, rng: &mut Rng) -> Result<Self> {
        if heads == 0 || d_head == 0 || d_v == 0 {
            return Err(Error::Config("heads and head widths must be positive".into()));
        }
        Ok(Self {
            c,
            heads,
            d_head,
            d_v,
            norm: LayerNormParams::new(c),
            wq: Linear::new(c, heads * d_head, false, rng),
            wk: Linear::new(c, heads * d_head, false, rng),
            wv: Linear::new(c, heads * d_v, false, rng),
            wo: Linear::new(heads * d_v, c, false, rng),
            mask: vec![1.0; heads],
            id: 0,
        })
    }

    /// Multi-head layer at the same width as a full-channel attention:
    /// query/key width `d_qk` per head, values split `C / heads`.
    pub fn twin(c: usize, heads: usize, d_qk: usize, rng: &mut Rng) -> Result<Self> {
        if heads == 0 || c % heads != 0 {
            return Err(Error::Config(format!("{heads} heads do not divide {c} channels")));
        }
        Self::new(c, heads, d_qk, c / heads, rng)
    }

    pub fn mask(&self) -> &[f64] {
        &self.mask
    }

    pub fn set_mask(&mut self, mask: &[f64]) -> Result<()> {
        check_mask(mask, self.heads)?;
        self.mask = mask.to_vec();
        Ok(())
    }

    fn run(&self, x: &Tensor, mask: &[f64]) -> Result<(Tensor, Tensor)> {
        check_mask(mask, self.heads)?;
        let (n, c, h, w) = x.dims4()?;
        if c != self.c {
            return Err(Error::shape("mhsa", format!("input has {c} channels, layer expects {}", self.c)));
        }
        let t = h * w;
        let (nh, dh, dv) = (self.heads, self.d_head, self.d_v);
        let tokens = x.reshape(&[n, c, t])?.transpose_last2()?;
        let xn = self.norm.forward(&tokens, 2)?;
        let split_heads = |y: Tensor, d: usize| -> Result<Tensor> { y.reshape(&[n, t, nh, d])?.permute(&[0, 2, 1, 3]) };
        let q = split_heads(self.wq.forward(&xn)?, dh)?;
        let k = split_heads(self.wk.forward(&xn)?, dh)?;
        let v = split_heads(self.wv.forward(&xn)?, dv)?;
        let scores = q.matmul(&k.transpose_last2()?)?.scale(1.0 / (dh as f64).sqrt())?;
        let a = scores.softmax_lastdim()?;
        let o = a.matmul(&v)?.scale_axis1(mask)?;
        let o = o.permute(&[0, 2, 1, 3])?.reshape(&[n, t, nh * dv])?;
        let y = self.wo.forward(&o)?.transpose_last2()?.reshape(&[n, c, h, w])?;
        Ok((y, a))
    }

    fn effective_mask<'a>(&'a self, ctx: &Ctx<'a>) -> &'a [f64] {
        match ctx.mask {
            Some((id, m)) if id == self.id => m,
            _ => &self.mask,
        }
    }

    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let (y, a) = self.run(x, self.effective_mask(ctx))?;
        capture(ctx, self.id, &a, a.shape())?;
        Ok(y)
    }

    /// Post-softmax attention, `[N, heads, T, T]`.
    pub fn attention_maps(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.run(x, &self.mask)?.1)
    }
}

impl Module for Mhsa {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, Slot)) {
        self.norm.visit(&join(prefix, "norm"), f);
        self.wq.visit(&join(prefix, "wq"), f);
        self.wk.visit(&join(prefix, "wk"), f);
        self.wv.visit(&join(prefix, "wv"), f);
        self.wo.visit(&join(prefix, "wo"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, Slot)) {
        self.norm.visit_mut(&join(prefix, "norm"), f);
        self.wq.visit_mut(&join(prefix, "wq"), f);
        self.wk.visit_mut(&join(prefix, "wk"), f);
        self.wv.visit_mut(&join(prefix, "wv"), f);
        self.wo.visit_mut(&join(prefix, "wo"), f);
    }
}

/// Reduce all channels to `Cp`, attend with one head, expand back to `C`.
#[derive(Clone, Debug)]
pub struct BottleneckAttention {
    pub c: usize,
    pub cp: usize,
    pub d_qk: usize,
    pub reduce: Conv2d,
    pub norm: LayerNormParams,
    pub wq: Conv2d,
    pub wk: Conv2d,
    pub wv: Conv2d,
    pub expand: Conv2d,
}

impl BottleneckAttention {
    pub fn new(c: usize, ratio: f64, d_qk: usize, rng: &mut Rng) -> Result<Self> {
        if !(ratio > 0.0 && ratio <= 1.0) || d_qk == 0 {
            return Err(Error::Config(format!("contraction {ratio}, d_qk {d_qk}")));
        }
        let cp = partial_channels(c, ratio);
        Ok(Self {
            c,
            cp,
            d_qk,
            reduce: Conv2d::pointwise(c, cp, rng),
            norm: LayerNormParams::new(cp),
            wq: Conv2d::pointwise(cp, d_qk, rng),
            wk: Conv2d::pointwise(cp, d_qk, rng),
            wv: Conv2d::pointwise(cp, cp, rng),
            expand: Conv2d::pointwise(cp, c, rng),
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        if c != self.c {
            return Err(Error::shape("bottleneck", format!("input has {c} channels, layer expects {}", self.c)));
        }
        let t = h * w;
        let xa = self.norm.forward(&self.reduce.forward(x)?, 1)?;
        let q = self.wq.forward(&xa)?.reshape(&[n, self.d_qk, t])?;
        let k = self.wk.forward(&xa)?.reshape(&[n, self.d_qk, t])?;
        let v = self.wv.forward(&xa)?.reshape(&[n, self.cp, t])?;
        let (o, _) = attend_channel_major(&q, &k, &v, self.d_qk)?;
        self.expand.forward(&o.reshape(&[n, self.cp, h, w])?)
    }
}

impl Module for BottleneckAttention {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, Slot)) {
        self.reduce.visit(&join(prefix, "reduce"), f);
        self.norm.visit(&join(prefix, "norm"), f);
        self.wq.visit(&join(prefix, "wq"), f);
        self.wk.visit(&join(prefix, "wk"), f);
        self.wv.visit(&join(prefix, "wv"), f);
        self.expand.visit(&join(prefix, "expand"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, Slot)) {
        self.reduce.visit_mut(&join(prefix, "reduce"), f);
        self.norm.visit_mut(&join(prefix, "norm"), f);
        self.wq.visit_mut(&join(prefix, "wq"), f);
        self.wk.visit_mut(&join(prefix, "wk"), f);
        self.wv.visit_mut(&join(prefix, "wv"), f);
        self.expand.visit_mut(&join(prefix, "expand"), f);
    }
}
