//! Toy convolutional backbone with a TSB insertion point, and the learner
//! factory for TSE.
//!
//! Stages are plain `conv3x3 -> BN -> ReLU` blocks. The first block of each
//! stage carries the stage stride; the default plan `2, 2, 1` maps a
//! `64x32` frame to a `16x8` map.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{ConvBlock, Forward, Params};
use crate::tensor::Tensor;
use crate::tse::LearnerStack;
use crate::tsb::Tsb;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub frame_height: usize,
    pub frame_width: usize,
    pub stage_channels: Vec<usize>,
    pub stage_strides: Vec<usize>,
    pub blocks_per_stage: usize,
    /// Learner output channels `D_1`.
    pub head_channels: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            in_channels: 3,
            frame_height: 64,
            frame_width: 32,
            stage_channels: vec![16, 32, 64],
            stage_strides: vec![2, 2, 1],
            blocks_per_stage: 2,
            head_channels: 128,
        }
    }
}

impl BackboneConfig {
    /// Channel count `D` of the final map.
    pub fn out_channels(&self) -> usize {
        *self.stage_channels.last().expect("validated: at least one stage")
    }

    /// Spatial size of the final map.
    pub fn out_size(&self) -> (usize, usize) {
        self.stage_strides.iter().fold((self.frame_height, self.frame_width), |(h, w), &s| {
            ((h - 1) / s + 1, (w - 1) / s + 1)
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.is_empty() || self.stage_channels.len() != self.stage_strides.len() {
            return Err(Error::pre("backbone_config", "one stride per stage, at least one stage"));
        }
        if self.blocks_per_stage == 0 || self.stage_strides.contains(&0) || self.stage_channels.contains(&0) {
            return Err(Error::pre("backbone_config", "blocks, strides and channels must be >= 1"));
        }
        if self.head_channels < self.out_channels() {
            return Err(Error::pre("backbone_config", "head channels D_1 must be >= D"));
        }
        if self.in_channels == 0 || self.frame_height == 0 || self.frame_width == 0 {
            return Err(Error::pre("backbone_config", "empty input frames"));
        }
        Ok(())
    }
}

pub struct BackboneOutput<'t> {
    /// `[B*T, D, H', W']` final maps.
    pub maps: Var<'t>,
    /// Output of every stage, after TSB where it was applied.
    pub stage_maps: Vec<Var<'t>>,
    /// Stage (1-based) after which TSB ran, if it did.
    pub tsb_stage: Option<usize>,
    pub attention: Vec<Tensor>,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub stages: Vec<Vec<ConvBlock>>,
}

impl Backbone {
    pub fn new<R: Rng>(params: &mut Params, rng: &mut R, cfg: BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let mut c_in = cfg.in_channels;
        let mut stages = Vec::with_capacity(cfg.stage_channels.len());
        for (s, (&c_out, &stride)) in cfg.stage_channels.iter().zip(&cfg.stage_strides).enumerate() {
            let mut blocks = Vec::with_capacity(cfg.blocks_per_stage);
            for b in 0..cfg.blocks_per_stage {
                let name = format!("backbone.stage{}.block{}", s + 1, b + 1);
                let st = if b == 0 { stride } else { 1 };
                blocks.push(ConvBlock::new(params, rng, &name, c_in, c_out, st));
                c_in = c_out;
            }
            stages.push(blocks);
        }
        Ok(Backbone { cfg, stages })
    }

    /// Runs `[B*T, C, H, W]` frames through every stage; with `tsb`, the
    /// whole clip's maps are boosted after stage `tsb.cfg.stage`.
    pub fn forward<'t>(
        &self,
        f: &mut Forward<'t, '_>,
        frames: Var<'t>,
        frames_per_clip: usize,
        tsb: Option<&Tsb>,
    ) -> Result<BackboneOutput<'t>> {
        let s = frames.shape();
        let expected = [self.cfg.in_channels, self.cfg.frame_height, self.cfg.frame_width];
        if s.len() != 4 || s[1..] != expected {
            return Err(Error::dim("backbone_forward", &s, &expected));
        }
        if let Some(t) = tsb {
            t.cfg.validate()?;
            if t.cfg.stage == 0 || t.cfg.stage > self.stages.len() {
                return Err(Error::pre(
                    "backbone_forward",
                    format!("TSB stage {} outside 1..={}", t.cfg.stage, self.stages.len()),
                ));
            }
        }
        let mut x = frames;
        let mut stage_maps = Vec::with_capacity(self.stages.len());
        let mut attention = Vec::new();
        let mut tsb_stage = None;
        for (i, blocks) in self.stages.iter().enumerate() {
            for b in blocks {
                x = b.forward(f, x)?;
            }
            if let Some(t) = tsb.filter(|t| t.cfg.stage == i + 1) {
                let out = t.forward_batch(f, x, frames_per_clip)?;
                x = out.enhanced;
                attention = out.attention;
                tsb_stage = Some(i + 1);
            }
            stage_maps.push(x);
        }
        Ok(BackboneOutput {
            maps: x,
            stage_maps,
            tsb_stage,
            attention,
        })
    }
}

/// Stacks equally shaped `[C,H,W]` frames into `[T,C,H,W]`.
pub fn stack_frames(frames: &[Tensor]) -> Result<Tensor> {
    let first = frames
        .first()
        .ok_or_else(|| Error::pre("stack_frames", "no frames"))?;
    let mut data = Vec::with_capacity(first.numel() * frames.len());
    for fr in frames {
        if fr.shape() != first.shape() {
            return Err(Error::dim("stack_frames", first.shape(), fr.shape()));
        }
        data.extend_from_slice(fr.data());
    }
    let mut shape = vec![frames.len()];
    shape.extend_from_slice(first.shape());
    Tensor::new(&shape, data)
}

/// One shared trunk block and `n` private heads mapping `D -> D_1`. All
/// learners hold the same trunk parameter ids.
pub fn make_learners<R: Rng>(params: &mut Params, rng: &mut R, cfg: &BackboneConfig, n: usize) -> Result<LearnerStack> {
    if n == 0 {
        return Err(Error::pre("make_learners", "need at least one learner"));
    }
    let d = cfg.out_channels();
    let trunk = ConvBlock::new(params, rng, "learners.trunk", d, d, 1);
    let heads = (0..n)
        .map(|i| ConvBlock::new(params, rng, &format!("learners.head{}", i + 1), d, cfg.head_channels, 1))
        .collect();
    Ok(LearnerStack {
        trunk,
        heads,
        out_channels: cfg.head_channels,
    })
}
