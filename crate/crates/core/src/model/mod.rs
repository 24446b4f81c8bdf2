//! Network assembly: stride-2 stem, conv and attention stages joined by
//! downsampling layers, and a pooled classifier head.

mod config;
mod cost;

use std::sync::Mutex;

pub use config::{stem_ladder, MixerKind, ModelConfig, StageSpec, CONFIG_VERSION};
pub use cost::{macro_cost_compare, memory_access_cost, CostReport, LayerCost, MacroComparison};

use crate::error::{Error, Result};
use crate::nn::{join, BnLinear, ConvBn, Ctx, Ffn, Mhsa, Module, Shsa, Slot};
use crate::rng::Rng;
use crate::tensor::{Conv2dParams, Tensor};

pub const IR_EXPANSION: usize = 4;

#[derive(Clone, Debug)]
pub enum Mixer {
    None,
    Shsa(Shsa),
    Mhsa(Mhsa),
}

/// Residual depthwise conv, residual token mixer, residual FFN.
#[derive(Clone, Debug)]
pub struct Block {
    pub dw: ConvBn,
    pub mixer: Mixer,
    pub ffn: Ffn,
}

impl Block {
    fn new(c: usize, spec: Option<&StageSpec>, next_id: &mut usize, rng: &mut Rng) -> Result<Self> {
        let dw = ConvBn::new(c, c, 3, Conv2dParams::new(1, 1, c), rng);
        let mut mixer = match spec.map(StageSpec::mixer).unwrap_or(MixerKind::None) {
            MixerKind::None => Mixer::None,
            MixerKind::Shsa => {
                let s = spec.expect("attention stage");
                Mixer::Shsa(Shsa::new(c, s.partial_ratio, s.d_qk, rng)?)
            }
            MixerKind::Mhsa(h) => Mixer::Mhsa(Mhsa::twin(c, h, spec.expect("attention stage").d_qk, rng)?),
        };
        match &mut mixer {
            Mixer::Shsa(s) => s.id = *next_id,
            Mixer::Mhsa(m) => m.id = *next_id,
            Mixer::None => {}
        }
        if !matches!(mixer, Mixer::None) {
            *next_id += 1;
        }
        Ok(Self {
            dw,
            mixer,
            ffn: Ffn::new(c, rng),
        })
    }

    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let x = x.add(&self.dw.forward(x, ctx)?)?;
        let x = match &self.mixer {
            Mixer::None => x,
            Mixer::Shsa(s) => x.add(&s.forward(&x, ctx)?)?,
            Mixer::Mhsa(m) => x.add(&m.forward(&x, ctx)?)?,
        };
        x.add(&self.ffn.forward(&x, ctx)?)
    }

    fn fuse(&self) -> Result<Block> {
        Ok(Block {
            dw: self.dw.fold_bn()?,
            mixer: self.mixer.clone(),
            ffn: Ffn {
                expand: self.ffn.expand.fold_bn()?,
                project: self.ffn.project.fold_bn()?,
            },
        })
    }
}

impl Module for Block {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, Slot)) {
        self.dw.visit(&join(prefix, "dw"), f);
        match &self.mixer {
            Mixer::None => {}
            Mixer::Shsa(s) => s.visit(&join(prefix, "mixer"), f),
            Mixer::Mhsa(m) => m.visit(&join(prefix, "mixer"), f),
        }
        self.ffn.visit(&join(prefix, "ffn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, Slot)) {
        self.dw.visit_mut(&join(prefix, "dw"), f);
        match &mut self.mixer {
            Mixer::None => {}
            Mixer::Shsa(s) => s.visit_mut(&join(prefix, "mixer"), f),
            Mixer::Mhsa(m) => m.visit_mut(&join(prefix, "mixer"), f),
        }
        self.ffn.visit_mut(&join(prefix, "ffn"), f);
    }
}

/// 1×1 expand, 3×3 depthwise stride 2, 1×1 project; BN after each conv and
/// ReLU after the first two.
#[derive(Clone, Debug)]
pub struct InvertedResidual {
    pub expand: ConvBn,
    pub dw: ConvBn,
    pub project: ConvBn,
}

impl InvertedResidual {
    fn new(cin: usize, cout: usize, rng: &mut Rng) -> Self {
        let hidden = cin * IR_EXPANSION;
        Self {
            expand: ConvBn::new(cin, hidden, 1, Conv2dParams::default(), rng),
            dw: ConvBn::new(hidden, hidden, 3, Conv2dParams::new(2, 1, hidden), rng),
            project: ConvBn::new(hidden, cout, 1, Conv2dParams::default(), rng),
        }
    }

    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let h = self.expand.forward(x, ctx)?.relu()?;
        let h = self.dw.forward(&h, ctx)?.relu()?;
        self.project.forward(&h, ctx)
    }
}

impl Module for InvertedResidual {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, Slot)) {
        self.expand.visit(&join(prefix, "expand"), f);
        self.dw.visit(&join(prefix, "dw"), f);
        self.project.visit(&join(prefix, "project"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, Slot)) {
        self.expand.visit_mut(&join(prefix, "expand"), f);
        self.dw.visit_mut(&join(prefix, "dw"), f);
        self.project.visit_mut(&join(prefix, "project"), f);
    }
}

/// Conv block at the old width, stride-2 inverted residual, conv block at
/// the new width.
#[derive(Clone, Debug)]
pub struct Downsample {
    pub pre: Block,
    pub ir: InvertedResidual,
    pub post: Block,
}

impl Downsample {
    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let x = self.pre.forward(x, ctx)?;
        let x = self.ir.forward(&x, ctx)?;
        self.post.forward(&x, ctx)
    }
}

impl Module for Downsample {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, Slot)) {
        self.pre.visit(&join(prefix, "pre"), f);
        self.ir.visit(&join(prefix, "ir"), f);
        self.post.visit(&join(prefix, "post"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, Slot)) {
        self.pre.visit_mut(&join(prefix, "pre"), f);
        self.ir.visit_mut(&join(prefix, "ir"), f);
        self.post.visit_mut(&join(prefix, "post"), f);
    }
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub downsample: Option<Downsample>,
    pub blocks: Vec<Block>,
}

impl Module for Stage {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, Slot)) {
        if let Some(d) = &self.downsample {
            d.visit(&join(prefix, "down"), f);
        }
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, Slot)) {
        if let Some(d) = &mut self.downsample {
            d.visit_mut(&join(prefix, "down"), f);
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
    }
}

/// Where an attention layer sits and what kind it is.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize)]
pub struct AttentionInfo {
    pub id: usize,
    pub stage: usize,
    pub block: usize,
    pub heads: usize,
    pub kind: &'static str,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub stem: Vec<ConvBn>,
    pub stages: Vec<Stage>,
    pub head: BnLinear,
}

impl Model {
    pub fn build(config: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut stem = Vec::with_capacity(config.stem_channels.len());
        let mut cin = 3;
        for &c in &config.stem_channels {
            stem.push(ConvBn::new(cin, c, 3, Conv2dParams::new(2, 1, 1), rng));
            cin = c;
        }
        let mut next_id = 0;
        let mut stages = Vec::with_capacity(config.stages.len());
        let mut prev: Option<usize> = None;
        for spec in &config.stages {
            let downsample = match prev {
                Some(p) => Some(Downsample {
                    pre: Block::new(p, None, &mut next_id, rng)?,
                    ir: InvertedResidual::new(p, spec.channels, rng),
                    post: Block::new(spec.channels, None, &mut next_id, rng)?,
                }),
                None => None,
            };
            let blocks = (0..spec.blocks)
                .map(|_| Block::new(spec.channels, Some(spec), &mut next_id, rng))
                .collect::<Result<Vec<_>>>()?;
            stages.push(Stage { downsample, blocks });
            prev = Some(spec.channels);
        }
        let last = config.stages.last().expect("validated").channels;
        Ok(Self {
            config: config.clone(),
            stem,
            stages,
            head: BnLinear::new(last, config.num_classes, rng),
        })
    }

    pub fn is_fused(&self) -> bool {
        self.head.is_fused()
    }

    /// The same weights accepting `res`² inputs. No layer depends on the
    /// grid size, so only the config check changes.
    pub fn at_resolution(mut self, res: usize) -> Result<Self> {
        let cfg = self.config.clone().with_resolution(res);
        cfg.validate()?;
        self.config = cfg;
        Ok(self)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_ctx(x, &Ctx::eval())
    }

    pub fn forward_ctx(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        let r = self.config.input_resolution;
        if c != 3 || h != r || w != r {
            return Err(Error::shape(
                "model",
                format!("input {:?} does not match resolution {r}", x.shape()),
            ));
        }
        let mut x = x.clone();
        for conv in &self.stem {
            x = conv.forward(&x, ctx)?.relu()?;
        }
        for stage in &self.stages {
            if let Some(d) = &stage.downsample {
                x = d.forward(&x, ctx)?;
            }
            for b in &stage.blocks {
                x = b.forward(&x, ctx)?;
            }
        }
        self.head.forward(&x.global_avg_pool()?, ctx)
    }

    fn blocks(&self) -> impl Iterator<Item = (usize, usize, &Block)> {
        self.stages.iter().enumerate().flat_map(|(s, st)| {
            let down = st.downsample.iter().flat_map(|d| [&d.pre, &d.post]);
            down.chain(st.blocks.iter()).enumerate().map(move |(i, b)| (s, i, b))
        })
    }

    pub fn attention_layers(&self) -> Vec<AttentionInfo> {
        let mut out = Vec::new();
        for (stage, _, b) in self.blocks() {
            match &b.mixer {
                Mixer::None => {}
                Mixer::Shsa(s) => out.push(AttentionInfo {
                    id: s.id,
                    stage,
                    block: out.iter().filter(|a: &&AttentionInfo| a.stage == stage).count(),
                    heads: 1,
                    kind: "shsa",
                }),
                Mixer::Mhsa(m) => out.push(AttentionInfo {
                    id: m.id,
                    stage,
                    block: out.iter().filter(|a: &&AttentionInfo| a.stage == stage).count(),
                    heads: m.heads,
                    kind: "mhsa",
                }),
            }
        }
        out
    }

    pub fn mhsa(&self, id: usize) -> Result<&Mhsa> {
        self.blocks()
            .find_map(|(_, _, b)| match &b.mixer {
                Mixer::Mhsa(m) if m.id == id => Some(m),
                _ => None,
            })
            .ok_or(Error::UnknownLayer(id))
    }

    /// Post-softmax maps of every attention layer, `[N, heads, T, T]`.
    pub fn attention_maps(&self, x: &Tensor) -> Result<Vec<(usize, Tensor)>> {
        let sink = Mutex::new(Vec::new());
        let ctx = Ctx {
            capture: Some(&sink),
            ..Ctx::eval()
        };
        self.forward_ctx(x, &ctx)?;
        Ok(sink.into_inner().expect("capture lock"))
    }

    /// Copy with every BN folded into its conv or linear neighbour.
    pub fn fuse_all_bn(&self) -> Result<Model> {
        if self.is_fused() {
            return Err(Error::AlreadyFused);
        }
        let fuse_block = |b: &Block| b.fuse();
        Ok(Model {
            config: self.config.clone(),
            stem: self.stem.iter().map(ConvBn::fold_bn).collect::<Result<_>>()?,
            stages: self
                .stages
                .iter()
                .map(|st| {
                    Ok(Stage {
                        downsample: match &st.downsample {
                            Some(d) => Some(Downsample {
                                pre: fuse_block(&d.pre)?,
                                ir: InvertedResidual {
                                    expand: d.ir.expand.fold_bn()?,
                                    dw: d.ir.dw.fold_bn()?,
                                    project: d.ir.project.fold_bn()?,
                                },
                                post: fuse_block(&d.post)?,
                            }),
                            None => None,
                        },
                        blocks: st.blocks.iter().map(fuse_block).collect::<Result<_>>()?,
                    })
                })
                .collect::<Result<_>>()?,
            head: self.head.fold_bn()?,
        })
    }

    /// Token grid side after the stem and after each stage.
    pub fn stage_grids(&self) -> Vec<usize> {
        stage_grids(&self.config)
    }
}

fn half_ceil(h: usize) -> usize {
    h.div_ceil(2)
}

/// Grid side per stage for a 3×3 stride-2 pad-1 reduction chain.
pub fn stage_grids(cfg: &ModelConfig) -> Vec<usize> {
    let mut h = cfg.input_resolution;
    for _ in &cfg.stem_channels {
        h = half_ceil(h);
    }
    let mut out = vec![h];
    for _ in 1..cfg.stages.len() {
        h = half_ceil(h);
        out.push(h);
    }
    out
}

impl Module for Model {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, Slot)) {
        for (i, c) in self.stem.iter().enumerate() {
            c.visit(&join(prefix, &format!("stem.{i}")), f);
        }
        for (i, s) in self.stages.iter().enumerate() {
            s.visit(&join(prefix, &format!("stages.{i}")), f);
        }
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, Slot)) {
        for (i, c) in self.stem.iter_mut().enumerate() {
            c.visit_mut(&join(prefix, &format!("stem.{i}")), f);
        }
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.visit_mut(&join(prefix, &format!("stages.{i}")), f);
        }
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}
