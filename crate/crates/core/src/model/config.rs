use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{partial_channels, DEFAULT_D_QK, DEFAULT_PARTIAL_RATIO};

pub const CONFIG_VERSION: u32 = 1;

fn default_ratio() -> f64 {
    DEFAULT_PARTIAL_RATIO
}

fn default_d_qk() -> usize {
    DEFAULT_D_QK
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub channels: usize,
    pub blocks: usize,
    pub uses_shsa: bool,
    #[serde(default = "default_ratio")]
    pub partial_ratio: f64,
    #[serde(default = "default_d_qk")]
    pub d_qk: usize,
    /// Replace the single-head mixer with a multi-head one of this many
    /// heads (same width, values split across heads).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mhsa_heads: Option<usize>,
}

impl StageSpec {
    pub fn conv(channels: usize, blocks: usize) -> Self {
        Self {
            channels,
            blocks,
            uses_shsa: false,
            partial_ratio: DEFAULT_PARTIAL_RATIO,
            d_qk: DEFAULT_D_QK,
            mhsa_heads: None,
        }
    }

    pub fn attn(channels: usize, blocks: usize) -> Self {
        Self {
            uses_shsa: true,
            ..Self::conv(channels, blocks)
        }
    }

    pub fn mixer(&self) -> MixerKind {
        match (self.uses_shsa, self.mhsa_heads) {
            (false, _) => MixerKind::None,
            (true, None) => MixerKind::Shsa,
            (true, Some(h)) => MixerKind::Mhsa(h),
        }
    }

    /// Attended channels of the single-head mixer.
    pub fn partial_channels(&self) -> usize {
        partial_channels(self.channels, self.partial_ratio)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MixerKind {
    None,
    Shsa,
    Mhsa(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub config_version: u32,
    pub input_resolution: usize,
    /// Output widths of the stride-2 stem convolutions, last equal to the
    /// first stage's channels. Four entries give the 16× stem.
    pub stem_channels: Vec<usize>,
    pub stages: Vec<StageSpec>,
    pub num_classes: usize,
}

/// `[C/8, C/4, C/2, C]` for four entries, each rounded to an even width of
/// at least 2 (the last is kept exact).
pub fn stem_ladder(c1: usize, len: usize) -> Vec<usize> {
    (0..len)
        .map(|i| {
            let div = 1usize << (len - 1 - i);
            if div == 1 {
                c1
            } else {
                let v = c1 as f64 / div as f64;
                (((v / 2.0).round() as usize) * 2).max(2)
            }
        })
        .collect()
}

impl ModelConfig {
    pub fn new(input_resolution: usize, stages: Vec<StageSpec>, num_classes: usize) -> Self {
        let c1 = stages.first().map_or(0, |s| s.channels);
        Self {
            config_version: CONFIG_VERSION,
            input_resolution,
            stem_channels: stem_ladder(c1, 4),
            stages,
            num_classes,
        }
    }

    /// `[128(2), 256(4), 384(2)]` at 224², attention in stages 2 and 3.
    pub fn reference() -> Self {
        Self::new(
            224,
            vec![StageSpec::conv(128, 2), StageSpec::attn(256, 4), StageSpec::attn(384, 2)],
            1000,
        )
    }

    /// `[8(1), 16(1), 24(1)]` at 32², four classes.
    pub fn tiny() -> Self {
        Self::new(
            32,
            vec![StageSpec::conv(8, 1), StageSpec::attn(16, 1), StageSpec::attn(24, 1)],
            4,
        )
    }

    /// `[24(1), 48(1), 184(4), 368(2)]` behind a 4× stem (two stride-2
    /// convs), attention in the last two stages.
    pub fn four_stage() -> Self {
        let mut cfg = Self::new(
            224,
            vec![
                StageSpec::conv(24, 1),
                StageSpec::conv(48, 1),
                StageSpec::attn(184, 4),
                StageSpec::attn(368, 2),
            ],
            1000,
        );
        cfg.stem_channels = stem_ladder(24, 2);
        cfg
    }

    pub fn named(name: &str) -> Option<Self> {
        match name {
            "ref" => Some(Self::reference()),
            "tiny" => Some(Self::tiny()),
            "four-stage" => Some(Self::four_stage()),
            _ => None,
        }
    }

    pub fn with_resolution(mut self, res: usize) -> Self {
        self.input_resolution = res;
        self
    }

    /// Same layout with every attention stage switched to `kind`.
    pub fn with_mixer(mut self, kind: MixerKind) -> Self {
        for s in self.stages.iter_mut().filter(|s| s.uses_shsa) {
            match kind {
                MixerKind::None => {
                    s.uses_shsa = false;
                    s.mhsa_heads = None;
                }
                MixerKind::Shsa => s.mhsa_heads = None,
                MixerKind::Mhsa(h) => s.mhsa_heads = Some(h),
            }
        }
        self
    }

    pub fn with_partial_ratio(mut self, ratio: f64) -> Self {
        for s in &mut self.stages {
            s.partial_ratio = ratio;
        }
        self
    }

    /// Spatial reduction of the stem.
    pub fn stem_stride(&self) -> usize {
        1 << self.stem_channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.config_version != CONFIG_VERSION {
            return bad(format!(
                "config_version {} (supported: {CONFIG_VERSION})",
                self.config_version
            ));
        }
        if self.stages.is_empty() {
            return bad("at least one stage is required".into());
        }
        if self.stem_channels.is_empty() || self.stem_channels.len() > 6 {
            return bad(format!("stem needs 1..=6 convolutions, got {}", self.stem_channels.len()));
        }
        if self.stem_channels.contains(&0) {
            return bad("stem widths must be positive".into());
        }
        if *self.stem_channels.last().expect("non-empty") != self.stages[0].channels {
            return bad(format!(
                "stem ends at {} channels but stage 1 has {}",
                self.stem_channels.last().expect("non-empty"),
                self.stages[0].channels
            ));
        }
        let stride = self.stem_stride();
        if self.input_resolution == 0 || self.input_resolution % stride != 0 {
            return bad(format!(
                "input_resolution {} is not a positive multiple of {stride}",
                self.input_resolution
            ));
        }
        if self.num_classes == 0 {
            return bad("num_classes must be positive".into());
        }
        if self.stages[0].uses_shsa {
            return bad("the first stage cannot use attention".into());
        }
        let mut prev = 0;
        for (i, s) in self.stages.iter().enumerate() {
            if s.channels <= prev {
                return bad(format!("stage {} channels {} must exceed {prev}", i + 1, s.channels));
            }
            prev = s.channels;
            if s.blocks == 0 {
                return bad(format!("stage {} needs at least one block", i + 1));
            }
            if !(s.partial_ratio > 0.0 && s.partial_ratio <= 1.0) {
                return bad(format!("stage {} partial_ratio {} outside (0, 1]", i + 1, s.partial_ratio));
            }
            if s.d_qk == 0 {
                return bad(format!("stage {} d_qk must be positive", i + 1));
            }
            if let Some(h) = s.mhsa_heads {
                if !s.uses_shsa {
                    return bad(format!("stage {} sets mhsa_heads without attention", i + 1));
                }
                if h == 0 || s.channels % h != 0 {
                    return bad(format!("stage {}: {h} heads do not divide {} channels", i + 1, s.channels));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
