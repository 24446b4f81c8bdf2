//! Integer cost model: parameters, multiply-accumulates and memory traffic
//! per layer.
//!
//! Memory access for a layer is `b·(input elements + output elements) +
//! parameter elements`. For a bias-free `k×k` conv that keeps `h, w, c`
//! unchanged this is exactly `2·b·h·w·c + k²·c²`.

use serde::Serialize;

use super::{Block, Mixer, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::{BnLinear, Conv2d, ConvBn, LayerNormParams, Linear, Mhsa, Module, Shsa};
use crate::rng::Rng;

/// `2·b·h·w·c + k²·c²` evaluated without overflow.
pub fn memory_access_cost(b: u64, h: u64, w: u64, c: u64, k: u64) -> u128 {
    let (b, h, w, c, k) = (b as u128, h as u128, w as u128, c as u128, k as u128);
    2 * b * h * w * c + k * k * c * c
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LayerCost {
    pub name: String,
    pub params: u64,
    pub macs: u64,
    pub mem_access: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CostReport {
    pub batch: u64,
    pub resolution: usize,
    pub layers: Vec<LayerCost>,
    pub total_params: u64,
    pub total_macs: u64,
    pub total_mem_access: u64,
}

struct Walker {
    b: u64,
    layers: Vec<LayerCost>,
}

fn mul(xs: &[u64]) -> Result<u64> {
    xs.iter()
        .try_fold(1u64, |acc, &x| acc.checked_mul(x))
        .ok_or_else(|| Error::Invalid("cost overflows 64 bits".into()))
}

fn add(a: u64, b: u64) -> Result<u64> {
    a.checked_add(b).ok_or_else(|| Error::Invalid("cost overflows 64 bits".into()))
}

type Dims = (u64, u64, u64);

impl Walker {
    fn push(&mut self, name: String, params: u64, macs: u64, in_elems: u64, out_elems: u64) -> Result<()> {
        let traffic = mul(&[self.b, add(in_elems, out_elems)?])?;
        self.layers.push(LayerCost {
            name,
            params,
            macs,
            mem_access: add(traffic, params)?,
        });
        Ok(())
    }

    fn conv(&mut self, name: String, conv: &Conv2d, params: u64, (c, h, w): Dims) -> Result<Dims> {
        let k = conv.kernel() as u64;
        let p = conv.params;
        let out = |x: u64| (x + 2 * p.pad as u64 - k) / p.stride as u64 + 1;
        let (co, ho, wo) = (conv.out_channels() as u64, out(h), out(w));
        let cin_g = c / p.groups as u64;
        let macs = mul(&[self.b, co, ho, wo, cin_g, k, k])?;
        self.push(name, params, macs, c * h * w, co * ho * wo)?;
        Ok((co, ho, wo))
    }

    fn conv_bn(&mut self, name: String, cb: &ConvBn, d: Dims) -> Result<Dims> {
        self.conv(name, &cb.conv, cb.param_count(), d)
    }

    fn norm(&mut self, name: String, ln: &LayerNormParams, c: u64, t: u64) -> Result<()> {
        self.push(name, ln.param_count(), 0, c * t, c * t)
    }

    fn attn(&mut self, name: String, heads: u64, t: u64, dqk: u64, dv: u64) -> Result<()> {
        let macs = mul(&[self.b, heads, t, t, dqk + dv])?;
        let inputs = heads * t * (2 * dqk + dv);
        let scores = heads * t * t;
        self.push(name, 0, macs, inputs + scores, scores + heads * t * dv)
    }

    fn linear(&mut self, name: String, l: &Linear, tokens: u64) -> Result<()> {
        let (o, i) = (l.weight.shape()[0] as u64, l.weight.shape()[1] as u64);
        let macs = mul(&[self.b, tokens, i, o])?;
        self.push(name, l.param_count(), macs, tokens * i, tokens * o)
    }

    fn shsa(&mut self, p: &str, s: &Shsa, (c, h, w): Dims) -> Result<()> {
        let t = h * w;
        let cp = s.cp as u64;
        self.norm(format!("{p}.norm"), &s.norm, cp, t)?;
        for (n, conv) in [("wq", &s.wq), ("wk", &s.wk), ("wv", &s.wv)] {
            self.conv(format!("{p}.{n}"), conv, conv.param_count(), (cp, h, w))?;
        }
        self.attn(format!("{p}.attn"), 1, t, s.d_qk as u64, cp)?;
        self.conv(format!("{p}.wo"), &s.wo, s.wo.param_count(), (c, h, w))?;
        Ok(())
    }

    fn mhsa(&mut self, p: &str, m: &Mhsa, (c, h, w): Dims) -> Result<()> {
        let t = h * w;
        self.norm(format!("{p}.norm"), &m.norm, c, t)?;
        for (n, l) in [("wq", &m.wq), ("wk", &m.wk), ("wv", &m.wv)] {
            self.linear(format!("{p}.{n}"), l, t)?;
        }
        self.attn(format!("{p}.attn"), m.heads as u64, t, m.d_head as u64, m.d_v as u64)?;
        self.linear(format!("{p}.wo"), &m.wo, t)
    }

    fn block(&mut self, p: &str, b: &Block, d: Dims) -> Result<Dims> {
        self.conv_bn(format!("{p}.dw"), &b.dw, d)?;
        match &b.mixer {
            Mixer::None => {}
            Mixer::Shsa(s) => self.shsa(&format!("{p}.mixer"), s, d)?,
            Mixer::Mhsa(m) => self.mhsa(&format!("{p}.mixer"), m, d)?,
        }
        let e = self.conv_bn(format!("{p}.ffn.expand"), &b.ffn.expand, d)?;
        self.conv_bn(format!("{p}.ffn.project"), &b.ffn.project, e)
    }

    fn head(&mut self, h: &BnLinear, c: u64) -> Result<()> {
        if let Some(bn) = &h.bn {
            self.push("head.bn".into(), bn.param_count(), 0, c, c)?;
        }
        self.linear("head.fc".into(), &h.fc, 1)
    }
}

impl Model {
    /// Cost of one forward pass over `batch` images at `res`.
    pub fn cost_report(&self, batch: u64, res: usize) -> Result<CostReport> {
        if batch == 0 {
            return Err(Error::Invalid("batch must be positive".into()));
        }
        let mut wk = Walker {
            b: batch,
            layers: Vec::new(),
        };
        let mut d: Dims = (3, res as u64, res as u64);
        for (i, c) in self.stem.iter().enumerate() {
            d = wk.conv_bn(format!("stem.{i}"), c, d)?;
        }
        for (s, st) in self.stages.iter().enumerate() {
            if let Some(ds) = &st.downsample {
                let p = format!("stages.{s}.down");
                d = wk.block(&format!("{p}.pre"), &ds.pre, d)?;
                d = wk.conv_bn(format!("{p}.ir.expand"), &ds.ir.expand, d)?;
                d = wk.conv_bn(format!("{p}.ir.dw"), &ds.ir.dw, d)?;
                d = wk.conv_bn(format!("{p}.ir.project"), &ds.ir.project, d)?;
                d = wk.block(&format!("{p}.post"), &ds.post, d)?;
            }
            for (j, b) in st.blocks.iter().enumerate() {
                d = wk.block(&format!("stages.{s}.blocks.{j}"), b, d)?;
            }
        }
        wk.head(&self.head, d.0)?;
        let mut report = CostReport {
            batch,
            resolution: res,
            layers: wk.layers,
            total_params: 0,
            total_macs: 0,
            total_mem_access: 0,
        };
        for l in &report.layers {
            report.total_params = add(report.total_params, l.params)?;
            report.total_macs = add(report.total_macs, l.macs)?;
            report.total_mem_access = add(report.total_mem_access, l.mem_access)?;
        }
        Ok(report)
    }

    /// Multiply-accumulates for a single image.
    pub fn mac_count(&self, res: usize) -> Result<u64> {
        Ok(self.cost_report(1, res)?.total_macs)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct MacroComparison {
    pub a: CostReport,
    pub b: CostReport,
}

/// Cost reports of two layouts at the same input size. Costs do not depend
/// on weight values, so both models are built from a fixed seed.
pub fn macro_cost_compare(a: &ModelConfig, b: &ModelConfig, res: usize, batch: u64) -> Result<MacroComparison> {
    let report = |cfg: &ModelConfig| -> Result<CostReport> {
        let cfg = cfg.clone().with_resolution(res);
        Model::build(&cfg, &mut Rng::new(0))?.cost_report(batch, res)
    };
    Ok(MacroComparison {
        a: report(a)?,
        b: report(b)?,
    })
}
