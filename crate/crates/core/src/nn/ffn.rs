use super::{join, ConvBn, Ctx, Module, Slot};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Conv2dParams, Tensor};

/// Pointwise expand to `2C`, ReLU, pointwise project back to `C`.
#[derive(Clone, Debug)]
pub struct Ffn {
    pub expand: ConvBn,
    pub project: ConvBn,
}

impl Ffn {
    pub fn new(c: usize, rng: &mut Rng) -> Self {
        Self {
            expand: ConvBn::new(c, 2 * c, 1, Conv2dParams::default(), rng),
            project: ConvBn::new(2 * c, c, 1, Conv2dParams::default(), rng),
        }
    }

    pub fn channels(&self) -> usize {
        self.expand.conv.in_channels()
    }

    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let c = x.dims4()?.1;
        if c != self.channels() {
            return Err(Error::shape("ffn", format!("input has {c} channels, layer expects {}", self.channels())));
        }
        let h = self.expand.forward(x, ctx)?.relu()?;
        self.project.forward(&h, ctx)
    }
}

impl Module for Ffn {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, Slot)) {
        self.expand.visit(&join(prefix, "expand"), f);
        self.project.visit(&join(prefix, "project"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, Slot)) {
        self.expand.visit_mut(&join(prefix, "expand"), f);
        self.project.visit_mut(&join(prefix, "project"), f);
    }
}
