//! Flat run configuration: every knob of every module in one TOML table.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::BackboneConfig;
use crate::data::{write_file, SynthSpec};
use crate::error::{Error, Result};
use crate::pipeline::{FramePolicy, LossMode, ModelConfig, TrainConfig};
use crate::tse::SeoConfig;
use crate::tsb::TsbConfig;

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "TCL_SEED";

/// File name of the resolved config written next to every output.
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: String,

    // corpus
    pub identities: usize,
    pub clips_per_identity: usize,
    pub gallery_clips: usize,
    pub query_clips: usize,
    pub frames_per_clip: usize,
    pub frame_height: usize,
    pub frame_width: usize,
    pub channels: usize,
    pub bands: usize,
    pub salient_band: usize,
    pub share_group: usize,
    pub salient_amplitude: f64,
    pub detail_amplitude: f64,
    pub salient_drift: f64,
    pub noise: f64,
    pub occlusion_prob: f64,
    pub pose_jitter: usize,

    // backbone
    pub stage_channels: Vec<usize>,
    pub stage_strides: Vec<usize>,
    pub blocks_per_stage: usize,
    pub head_channels: usize,

    // TSE
    pub n_learners: usize,
    pub seo: bool,
    pub block_height: usize,
    /// 0 spans the full feature-map width.
    pub block_width: usize,
    pub stride_h: usize,
    pub stride_w: usize,

    // TSB
    pub tsb: bool,
    pub tsb_stage: usize,
    pub temperature: f64,

    // training
    pub epochs: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub decay_every: usize,
    pub ids_per_batch: usize,
    pub clips_per_id: usize,
    pub train_frames: usize,
    pub loss: LossMode,
    pub margin: f64,
    pub eval_every: usize,
    pub test_frames: FramePolicy,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::from_parts(
            &SynthSpec::default(),
            &ModelConfig::default(),
            &TrainConfig::default(),
            FramePolicy::Truncate,
        )
    }
}

impl RunConfig {
    pub fn from_parts(spec: &SynthSpec, model: &ModelConfig, train: &TrainConfig, test_frames: FramePolicy) -> Self {
        RunConfig {
            seed: train.seed,
            out_dir: "out".into(),
            identities: spec.identities,
            clips_per_identity: spec.clips_per_identity,
            gallery_clips: spec.gallery_clips,
            query_clips: spec.query_clips,
            frames_per_clip: spec.frames_per_clip,
            frame_height: spec.frame_height,
            frame_width: spec.frame_width,
            channels: spec.channels,
            bands: spec.bands,
            salient_band: spec.salient_band,
            share_group: spec.share_group,
            salient_amplitude: spec.salient_amplitude,
            detail_amplitude: spec.detail_amplitude,
            salient_drift: spec.salient_drift,
            noise: spec.noise,
            occlusion_prob: spec.occlusion_prob,
            pose_jitter: spec.pose_jitter,
            stage_channels: model.backbone.stage_channels.clone(),
            stage_strides: model.backbone.stage_strides.clone(),
            blocks_per_stage: model.backbone.blocks_per_stage,
            head_channels: model.backbone.head_channels,
            n_learners: model.seo.n_learners,
            seo: model.seo.seo,
            block_height: model.seo.block_height,
            block_width: model.seo.block_width.unwrap_or(0),
            stride_h: model.seo.stride_h,
            stride_w: model.seo.stride_w,
            tsb: model.use_tsb,
            tsb_stage: model.tsb.stage,
            temperature: model.tsb.temperature,
            epochs: train.epochs,
            lr: train.lr,
            lr_decay: train.lr_decay,
            decay_every: train.decay_every,
            ids_per_batch: train.p,
            clips_per_id: train.k,
            train_frames: train.frames_per_clip,
            loss: train.loss,
            margin: train.margin,
            eval_every: train.eval_every,
            test_frames,
        }
    }

    /// Reduced protocol used for the multi-seed ablation: narrower and
    /// shallower network, fewer epochs, larger step size. Corpus geometry,
    /// mask geometry, N, batch layout and frames per clip are unchanged.
    pub fn desk() -> Self {
        RunConfig {
            stage_channels: vec![8, 16, 32],
            blocks_per_stage: 1,
            head_channels: 32,
            salient_amplitude: 1.5,
            salient_drift: 1.0,
            noise: 0.2,
            occlusion_prob: 0.3,
            epochs: 60,
            lr: 3e-3,
            decay_every: 40,
            eval_every: 0,
            ..RunConfig::default()
        }
    }

    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            identities: self.identities,
            clips_per_identity: self.clips_per_identity,
            gallery_clips: self.gallery_clips,
            query_clips: self.query_clips,
            frames_per_clip: self.frames_per_clip,
            frame_height: self.frame_height,
            frame_width: self.frame_width,
            channels: self.channels,
            bands: self.bands,
            salient_band: self.salient_band,
            share_group: self.share_group,
            salient_amplitude: self.salient_amplitude,
            detail_amplitude: self.detail_amplitude,
            salient_drift: self.salient_drift,
            noise: self.noise,
            occlusion_prob: self.occlusion_prob,
            pose_jitter: self.pose_jitter,
        }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                in_channels: self.channels,
                frame_height: self.frame_height,
                frame_width: self.frame_width,
                stage_channels: self.stage_channels.clone(),
                stage_strides: self.stage_strides.clone(),
                blocks_per_stage: self.blocks_per_stage,
                head_channels: self.head_channels,
            },
            seo: SeoConfig {
                n_learners: self.n_learners,
                block_height: self.block_height,
                block_width: (self.block_width > 0).then_some(self.block_width),
                stride_h: self.stride_h,
                stride_w: self.stride_w,
                seo: self.seo,
            },
            tsb: TsbConfig {
                temperature: self.temperature,
                stage: self.tsb_stage,
            },
            use_tsb: self.tsb,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            lr: self.lr,
            lr_decay: self.lr_decay,
            decay_every: self.decay_every,
            p: self.ids_per_batch,
            k: self.clips_per_id,
            frames_per_clip: self.train_frames,
            margin: self.margin,
            loss: self.loss,
            eval_every: self.eval_every,
            seed: self.seed,
        }
    }

    /// Checks every module config.
    pub fn validate(&self) -> Result<()> {
        self.synth_spec().validate()?;
        let m = self.model();
        m.backbone.validate()?;
        m.tsb.validate()?;
        let (h, w) = m.backbone.out_size();
        m.seo.validate(h, w)?;
        if self.tsb && !(1..=self.stage_channels.len()).contains(&self.tsb_stage) {
            return Err(Error::pre("config", "tsb_stage outside the backbone stages"));
        }
        self.train().validate(self.n_learners)
    }

    /// Applies `TCL_SEED` if it is set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::pre("config", format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::format("config", e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_toml().as_bytes())
    }

    pub fn digest(&self) -> String {
        digest(&self.to_toml())
    }
}

/// SHA-256 of a string, hex encoded.
pub fn digest(s: &str) -> String {
    digest_bytes(s.as_bytes())
}

pub fn digest_bytes(b: &[u8]) -> String {
    hex::encode(Sha256::digest(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_toml() {
        for c in [RunConfig::default(), RunConfig::desk()] {
            let back = RunConfig::from_toml(&c.to_toml()).unwrap();
            assert_eq!(back, c);
            assert_eq!(back.digest(), c.digest());
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let s = RunConfig::default().to_toml() + "\nbogus = 1\n";
        assert!(RunConfig::from_toml(&s).is_err());
    }

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
        RunConfig::desk().validate().unwrap();
    }
}
