//! Parameterized layers built from tensor primitives.
//!
//! Every layer stores its weights as leaf tensors and exposes them through
//! [`Module`], which is how training, serialization, dtype casts and
//! parameter counting reach into nested structures without knowing them.

mod attention;
mod basic;
mod ffn;

use std::sync::Mutex;

pub use attention::{partial_channels, BottleneckAttention, Mhsa, Shsa, DEFAULT_D_QK, DEFAULT_PARTIAL_RATIO};
pub use basic::{BatchNorm, BnLinear, Conv2d, ConvBn, LayerNormParams, Linear, BN_EPS, BN_MOMENTUM, LN_EPS};
pub use ffn::Ffn;

use crate::tensor::{DType, Tensor};

/// Whether a tensor is trained or is running state.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    Param,
    Buffer,
}

pub trait Module {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, Slot));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, Slot));

    fn named_tensors(&self) -> Vec<(String, Tensor, Slot)>
    where
        Self: Sized,
    {
        let mut out = Vec::new();
        self.visit("", &mut |n, t, s| out.push((n.to_string(), t.clone(), s)));
        out
    }

    fn parameters(&self) -> Vec<(String, Tensor)>
    where
        Self: Sized,
    {
        let mut out = Vec::new();
        self.visit("", &mut |n, t, s| {
            if s == Slot::Param {
                out.push((n.to_string(), t.clone()))
            }
        });
        out
    }

    /// Number of trainable scalars. Running statistics are not counted.
    fn param_count(&self) -> u64
    where
        Self: Sized,
    {
        let mut total = 0u64;
        self.visit("", &mut |_, t, s| {
            if s == Slot::Param {
                total += t.numel() as u64
            }
        });
        total
    }

    fn set_requires_grad(&mut self, on: bool)
    where
        Self: Sized,
    {
        self.visit_mut("", &mut |_, t, s| {
            if s == Slot::Param {
                *t = t.with_requires_grad(on)
            }
        });
    }

    fn cast(&mut self, dtype: DType)
    where
        Self: Sized,
    {
        self.visit_mut("", &mut |_, t, _| *t = t.to_dtype(dtype));
    }

    fn zero_grad(&self)
    where
        Self: Sized,
    {
        self.visit("", &mut |_, t, _| t.zero_grad());
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Per-call options threaded through a forward pass.
#[derive(Clone, Copy, Default)]
pub struct Ctx<'a> {
    /// Batch statistics in BN layers, and running-stat updates.
    pub train: bool,
    /// Head mask override `(attention layer id, δ)` for one layer only.
    pub mask: Option<(usize, &'a [f64])>,
    /// Receives `(layer id, A)` for every attention layer, `A: [N, heads, T, T]`.
    pub capture: Option<&'a Mutex<Vec<(usize, Tensor)>>>,
}

impl<'a> Ctx<'a> {
    pub fn eval() -> Self {
        Self::default()
    }

    pub fn train() -> Self {
        Self {
            train: true,
            ..Self::default()
        }
    }
}
