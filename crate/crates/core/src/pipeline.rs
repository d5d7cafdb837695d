//! Full model: backbone (with optional TSB), segment division, TSE,
//! temporal pooling, per-learner classifiers; training and descriptors.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, TripletOutput, Var};
use crate::backbone::{make_learners, Backbone, BackboneConfig};
use crate::data::{write_file, Dataset, Split, VideoClip};
use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricsReport};
use crate::nn::{Adam, Forward, Linear, Params};
use crate::tensor::Tensor;
use crate::tse::{SeoArtifacts, SeoConfig, Tse};
use crate::tsb::{Tsb, TsbConfig};

/// Norm floor for the per-learner normalisation of the test vector.
const DESC_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossMode {
    #[serde(rename = "ce")]
    Ce,
    #[serde(rename = "ce+triplet")]
    CeTriplet,
}

impl std::str::FromStr for LossMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ce" => Ok(LossMode::Ce),
            "ce+triplet" => Ok(LossMode::CeTriplet),
            _ => Err(Error::pre("loss", format!("unknown loss mode {s:?}, expected ce or ce+triplet"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub seo: SeoConfig,
    pub tsb: TsbConfig,
    pub use_tsb: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            seo: SeoConfig::default(),
            tsb: TsbConfig::default(),
            use_tsb: true,
        }
    }
}

/// Layer structure; parameter values live in [`Model::params`].
#[derive(Clone, Debug)]
pub struct Network {
    pub backbone: Backbone,
    pub tsb: Option<Tsb>,
    pub tse: Tse,
    pub heads: Vec<Linear>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub classes: usize,
    pub params: Params,
    pub net: Network,
}

pub struct ModelOutput<'t> {
    /// Temporally pooled `v_1..v_N`, each `[B,D1]`.
    pub features: Vec<Var<'t>>,
    /// Per-learner logits, each `[B,classes]`.
    pub logits: Vec<Var<'t>>,
    /// Concatenated normalised vectors `[B,N*D1]`.
    pub descriptor: Var<'t>,
    /// `artifacts[n][b*L + l]` for frame `n` of segment `l` of clip `b`.
    pub artifacts: Vec<Vec<SeoArtifacts>>,
    pub attention: Vec<Tensor>,
}

/// Splits `items` into consecutive groups of `n`.
pub fn segment_divide<T: Clone>(items: &[T], n: usize) -> Result<Vec<Vec<T>>> {
    if n == 0 {
        return Err(Error::pre("segment_divide", "N must be >= 1"));
    }
    if items.is_empty() || !items.len().is_multiple_of(n) {
        return Err(Error::pre(
            "segment_divide",
            format!(
                "T = {} is not a positive multiple of N = {n}; pad or drop frames first",
                items.len()
            ),
        ));
    }
    Ok(items.chunks(n).map(|c| c.to_vec()).collect())
}

/// Concatenation of the L2-normalised rows of each `[B,D1]` input.
pub fn concat_normalized<'t>(features: &[Var<'t>]) -> Result<Var<'t>> {
    let normed = features
        .iter()
        .map(|v| v.l2_normalize_rows(DESC_EPS))
        .collect::<Result<Vec<_>>>()?;
    Var::concat(&normed, 1)
}

/// Sum over learners of the mean cross-entropy of each head.
pub fn ce_heads_loss<'t>(logits: &[Var<'t>], labels: &[usize]) -> Result<Var<'t>> {
    let mut total: Option<Var<'t>> = None;
    for l in logits {
        let ce = l.cross_entropy(labels)?;
        total = Some(match total {
            Some(t) => t.add(ce)?,
            None => ce,
        });
    }
    total.ok_or_else(|| Error::pre("ce_heads_loss", "no classifier heads"))
}

/// Batch-hard triplet loss on the normalised test vectors.
pub fn triplet_loss<'t>(descriptor: Var<'t>, labels: &[usize], margin: f64) -> Result<TripletOutput<'t>> {
    descriptor.batch_hard_triplet(labels, margin)
}

impl Model {
    pub fn new(cfg: ModelConfig, classes: usize, seed: u64) -> Result<Self> {
        if classes == 0 {
            return Err(Error::pre("model", "need at least one class"));
        }
        cfg.tsb.validate()?;
        let (h, w) = cfg.backbone.out_size();
        cfg.seo.validate(h, w)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        let backbone = Backbone::new(&mut params, &mut rng, cfg.backbone.clone())?;
        let d = cfg.backbone.out_channels();
        let stages = cfg.backbone.stage_channels.len();
        if cfg.use_tsb && !(1..=stages).contains(&cfg.tsb.stage) {
            return Err(Error::pre("model", format!("TSB stage {} outside 1..={stages}", cfg.tsb.stage)));
        }
        let tsb = cfg.use_tsb.then(|| {
            let ch = cfg.backbone.stage_channels[cfg.tsb.stage - 1];
            Tsb::new(&mut params, cfg.tsb.clone(), ch)
        });
        let n = cfg.seo.n_learners;
        let learners = make_learners(&mut params, &mut rng, &cfg.backbone, n)?;
        let tse = Tse::new(&mut params, &mut rng, cfg.seo.clone(), learners, d);
        let heads = (0..n)
            .map(|i| Linear::new(&mut params, &mut rng, &format!("head{}", i + 1), cfg.backbone.head_channels, classes))
            .collect();
        Ok(Model {
            cfg,
            classes,
            params,
            net: Network {
                backbone,
                tsb,
                tse,
                heads,
            },
        })
    }

    pub fn n_learners(&self) -> usize {
        self.cfg.seo.n_learners
    }

    /// Descriptor length `N*D1`.
    pub fn descriptor_len(&self) -> usize {
        self.n_learners() * self.cfg.backbone.head_channels
    }
}

impl Network {
    /// Forward over `B` clips of `t` frames stacked as `[B*t,C,H,W]`.
    pub fn forward<'t>(&self, f: &mut Forward<'t, '_>, frames: Var<'t>, t: usize) -> Result<ModelOutput<'t>> {
        let bt = frames.shape().first().copied().unwrap_or(0);
        if t == 0 || bt % t != 0 {
            return Err(Error::pre("model_forward", format!("{bt} frames are not whole clips of {t}")));
        }
        let b = bt / t;
        let n = self.tse.cfg.n_learners;
        let bb = self.backbone.forward(f, frames, t, self.tsb.as_ref())?;
        let order: Vec<usize> = (0..bt).collect();
        // segments of each clip, clip-major: [c][l] -> frame indices
        let mut per_clip = Vec::with_capacity(b);
        for c in 0..b {
            per_clip.push(segment_divide(&order[c * t..(c + 1) * t], n)?);
        }
        let l = t / n;
        let segment = (0..n)
            .map(|k| {
                let idx: Vec<usize> = per_clip.iter().flat_map(|segs| segs.iter().map(move |s| s[k])).collect();
                bb.maps.index_select(&idx)
            })
            .collect::<Result<Vec<_>>>()?;
        let out = self.tse.forward(f, &segment)?;
        let d1 = self.tse.learners.out_channels;
        let features = out
            .features
            .iter()
            .map(|fk| fk.reshape(&[b, l, d1])?.mean_axis(1))
            .collect::<Result<Vec<_>>>()?;
        self.finish(f, features, out.artifacts, bb.attention)
    }

    /// Backbone, first learner on every frame, temporal mean, one head.
    /// Only defined without TSB and with a single learner.
    pub fn baseline_forward<'t>(&self, f: &mut Forward<'t, '_>, frames: Var<'t>, t: usize) -> Result<ModelOutput<'t>> {
        if self.tsb.is_some() || self.heads.len() != 1 {
            return Err(Error::pre("baseline_forward", "needs N = 1 and no TSB"));
        }
        let bt = frames.shape().first().copied().unwrap_or(0);
        if t == 0 || bt % t != 0 {
            return Err(Error::pre("baseline_forward", format!("{bt} frames are not whole clips of {t}")));
        }
        let bb = self.backbone.forward(f, frames, t, None)?;
        let per_frame = self.tse.learners.forward(f, 0, bb.maps)?;
        let d1 = self.tse.learners.out_channels;
        let v = per_frame.reshape(&[bt / t, t, d1])?.mean_axis(1)?;
        self.finish(f, vec![v], Vec::new(), Vec::new())
    }

    fn finish<'t>(
        &self,
        f: &mut Forward<'t, '_>,
        features: Vec<Var<'t>>,
        artifacts: Vec<Vec<SeoArtifacts>>,
        attention: Vec<Tensor>,
    ) -> Result<ModelOutput<'t>> {
        let logits = features
            .iter()
            .zip(&self.heads)
            .map(|(v, h)| h.forward(f, *v))
            .collect::<Result<Vec<_>>>()?;
        let descriptor = concat_normalized(&features)?;
        Ok(ModelOutput {
            features,
            logits,
            descriptor,
            artifacts,
            attention,
        })
    }
}

/// Test-time handling of clips whose length is not a multiple of `N`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FramePolicy {
    /// Keep the first `floor(T/N)*N` frames.
    Truncate,
    /// Repeat the last frame up to `ceil(T/N)*N`.
    Pad,
}

/// Frame indices used for a clip of `len` frames.
pub fn test_frames(len: usize, n: usize, policy: FramePolicy) -> Result<Vec<usize>> {
    if len == 0 {
        return Err(Error::pre("video_features", "empty clip"));
    }
    let keep = match policy {
        FramePolicy::Truncate => len / n * n,
        FramePolicy::Pad => len.div_ceil(n) * n,
    };
    if keep == 0 {
        return Err(Error::pre(
            "video_features",
            format!("clip of {len} frames is shorter than N = {n}; use padding"),
        ));
    }
    Ok((0..keep).map(|i| i.min(len - 1)).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoDescriptor {
    /// Pooled `v_1..v_N` before normalisation.
    pub per_learner: Vec<Tensor>,
    /// `[N*D1]` test vector.
    pub vector: Tensor,
}

/// Eval-mode descriptors of `clips`, in order. Clips of equal length are
/// batched together.
pub fn describe(model: &mut Model, clips: &[&VideoClip], policy: FramePolicy) -> Result<Vec<VideoDescriptor>> {
    const CHUNK: usize = 8;
    let n = model.n_learners();
    let mut out: Vec<Option<VideoDescriptor>> = vec![None; clips.len()];
    let mut by_len: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, c) in clips.iter().enumerate() {
        by_len.entry(c.len()).or_default().push(i);
    }
    for (len, members) in by_len {
        let idx = test_frames(len, n, policy)?;
        let t = idx.len();
        for chunk in members.chunks(CHUNK) {
            let parts: Vec<Tensor> = chunk.iter().map(|&i| clips[i].select(&idx)).collect();
            let frames = stack_clips(&parts)?;
            let tape = Tape::new();
            let mut f = Forward::eval(&tape, &mut model.params);
            let o = model.net.forward(&mut f, tape.constant(&frames), t)?;
            let feats: Vec<Tensor> = o.features.iter().map(|v| v.value()).collect();
            let desc = o.descriptor.value();
            for (r, &i) in chunk.iter().enumerate() {
                out[i] = Some(VideoDescriptor {
                    per_learner: feats.iter().map(|v| row(v, r)).collect(),
                    vector: row(&desc, r),
                });
            }
        }
    }
    Ok(out.into_iter().map(|d| d.expect("every clip described")).collect())
}

fn row(m: &Tensor, r: usize) -> Tensor {
    let c = m.shape()[1];
    Tensor::new(&[c], m.data()[r * c..(r + 1) * c].to_vec()).expect("row")
}

/// Concatenates `[T,C,H,W]` clips along the frame axis.
fn stack_clips(parts: &[Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| Error::pre("stack_clips", "no clips"))?;
    let mut data = Vec::with_capacity(first.numel() * parts.len());
    for p in parts {
        if p.shape()[1..] != first.shape()[1..] {
            return Err(Error::dim("stack_clips", first.shape(), p.shape()));
        }
        data.extend_from_slice(p.data());
    }
    let mut shape = first.shape().to_vec();
    shape[0] = parts.iter().map(|p| p.shape()[0]).sum();
    Tensor::new(&shape, data)
}

/// Query clips ranked against gallery clips by identity.
pub fn evaluate_model(model: &mut Model, data: &Dataset, policy: FramePolicy) -> Result<MetricsReport> {
    let query = data.split(Split::Query);
    let gallery = data.split(Split::Gallery);
    let qd = describe(model, &query, policy)?;
    let gd = describe(model, &gallery, policy)?;
    let vecs = |d: &[VideoDescriptor]| d.iter().map(|v| v.vector.data().to_vec()).collect::<Vec<_>>();
    let ql: Vec<usize> = query.iter().map(|c| c.identity).collect();
    let gl: Vec<usize> = gallery.iter().map(|c| c.identity).collect();
    evaluate(&vecs(&qd), &ql, &vecs(&gd), &gl)
}

/// Gallery clips ranked against themselves, each clip its own class.
pub fn self_retrieval(model: &mut Model, data: &Dataset, policy: FramePolicy) -> Result<MetricsReport> {
    let gallery = data.split(Split::Gallery);
    let gd = describe(model, &gallery, policy)?;
    let vecs: Vec<Vec<f64>> = gd.iter().map(|v| v.vector.data().to_vec()).collect();
    let labels: Vec<usize> = (0..gallery.len()).collect();
    evaluate(&vecs, &labels, &vecs, &labels)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub decay_every: usize,
    /// Identities per batch.
    pub p: usize,
    /// Clips per identity.
    pub k: usize,
    pub frames_per_clip: usize,
    pub margin: f64,
    pub loss: LossMode,
    /// Evaluate every this many epochs (and after the last); 0 disables.
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 150,
            lr: 3e-4,
            lr_decay: 0.1,
            decay_every: 40,
            p: 8,
            k: 4,
            frames_per_clip: 4,
            margin: 0.3,
            loss: LossMode::Ce,
            eval_every: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Step schedule: `lr * decay^floor(epoch / decay_every)`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let k = if self.decay_every == 0 { 0 } else { epoch / self.decay_every };
        self.lr * self.lr_decay.powi(k as i32)
    }

    pub fn batch_size(&self) -> usize {
        self.p * self.k
    }

    pub fn validate(&self, n_learners: usize) -> Result<()> {
        if self.p == 0 || self.k == 0 || self.frames_per_clip == 0 {
            return Err(Error::pre("train_config", "P, K and frames per clip must be >= 1"));
        }
        if !self.frames_per_clip.is_multiple_of(n_learners) {
            return Err(Error::pre(
                "train_config",
                format!("training clips of {} frames do not split into segments of N = {n_learners}", self.frames_per_clip),
            ));
        }
        if !(self.lr > 0.0) || !(self.margin >= 0.0) {
            return Err(Error::pre("train_config", "lr must be positive and margin non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub ce_loss: f64,
    pub triplet_loss: f64,
    pub map: Option<f64>,
    pub top1: Option<f64>,
    pub lr: f64,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str = "epoch,ce_loss,triplet_loss,mAP,top1,lr";

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        format!(
            "{},{:.9},{:.9},{},{},{:e}",
            self.epoch,
            self.ce_loss,
            self.triplet_loss,
            opt(self.map),
            opt(self.top1),
            self.lr
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub history: Vec<EpochLog>,
    pub final_metrics: Option<MetricsReport>,
}

/// Identity -> class index over the training clips.
pub fn class_map(clips: &[&VideoClip]) -> BTreeMap<usize, usize> {
    let mut ids: Vec<usize> = clips.iter().map(|c| c.identity).collect();
    ids.sort_unstable();
    ids.dedup();
    ids.into_iter().enumerate().map(|(i, id)| (id, i)).collect()
}

/// One sampled training batch.
pub struct Batch {
    /// `[B*T,C,H,W]`
    pub frames: Tensor,
    pub labels: Vec<usize>,
    /// `(identity, clip_id)` of every clip.
    pub clips: Vec<(usize, usize)>,
}

/// Restricted random sampling: one frame from each of `t` equal chunks.
fn sample_frames(rng: &mut ChaCha8Rng, len: usize, t: usize) -> Vec<usize> {
    if len < t {
        let mut idx: Vec<usize> = (0..t).map(|_| rng.random_range(0..len)).collect();
        idx.sort_unstable();
        return idx;
    }
    (0..t)
        .map(|i| {
            let lo = i * len / t;
            let hi = ((i + 1) * len / t).max(lo + 1);
            rng.random_range(lo..hi)
        })
        .collect()
}

/// `P x K` batches covering every training identity once per epoch.
pub fn epoch_batches(clips: &[&VideoClip], classes: &BTreeMap<usize, usize>, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Batch>> {
    let mut by_id: BTreeMap<usize, Vec<&VideoClip>> = BTreeMap::new();
    for c in clips {
        by_id.entry(c.identity).or_default().push(c);
    }
    let mut ids: Vec<usize> = by_id.keys().copied().collect();
    ids.shuffle(rng);
    let mut batches = Vec::new();
    for group in ids.chunks(cfg.p) {
        let mut parts = Vec::with_capacity(group.len() * cfg.k);
        let mut labels = Vec::new();
        let mut ids_out = Vec::new();
        for id in group {
            let mut pool = by_id[id].clone();
            pool.shuffle(rng);
            for j in 0..cfg.k {
                let c = pool[j % pool.len()];
                parts.push(c.select(&sample_frames(rng, c.len(), cfg.frames_per_clip)));
                labels.push(classes[id]);
                ids_out.push((c.identity, c.clip_id));
            }
        }
        batches.push(Batch {
            frames: stack_clips(&parts)?,
            labels,
            clips: ids_out,
        });
    }
    Ok(batches)
}

/// Loss terms of one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLoss {
    pub ce: f64,
    pub triplet: f64,
    pub total: f64,
}

/// One optimisation step. Non-finite loss or gradients leave the parameters
/// untouched and return a numerical error; `diag` then receives the batch
/// description and its SEO artifacts.
pub fn train_step(model: &mut Model, adam: &mut Adam, batch: &Batch, cfg: &TrainConfig, diag: Option<&Path>) -> Result<StepLoss> {
    let tape = Tape::new();
    let mut f = Forward::train(&tape, &mut model.params);
    let out = model.net.forward(&mut f, tape.constant(&batch.frames), cfg.frames_per_clip)?;
    let ce = ce_heads_loss(&out.logits, &batch.labels)?;
    let (loss, tri) = match cfg.loss {
        LossMode::Ce => (ce, 0.0),
        LossMode::CeTriplet => {
            let t = triplet_loss(out.descriptor, &batch.labels, cfg.margin)?;
            if t.degenerate() {
                log::warn!("triplet loss: no valid anchor in batch");
            }
            (ce.add(t.loss)?, t.loss.item())
        }
    };
    let step = StepLoss {
        ce: ce.item(),
        triplet: tri,
        total: loss.item(),
    };
    let fail = |what: &str| -> Error {
        if let Some(dir) = diag {
            if let Err(e) = write_divergence(dir, batch, &step, &out.artifacts, &out.attention) {
                log::error!("could not write divergence dump: {e}");
            }
        }
        Error::Numerical(format!("{what} (ce {}, triplet {}); batch {:?}", step.ce, step.triplet, batch.clips))
    };
    if !step.total.is_finite() {
        return Err(fail("loss is not finite"));
    }
    tape.backward(loss)?;
    let grads = f.grads();
    if grads.iter().any(|(_, g)| !g.is_finite()) {
        return Err(fail("gradient is not finite"));
    }
    drop(f);
    adam.step(&mut model.params, &grads);
    Ok(step)
}

fn write_divergence(dir: &Path, batch: &Batch, step: &StepLoss, artifacts: &[Vec<SeoArtifacts>], attention: &[Tensor]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut s = format!("ce\t{}\ntriplet\t{}\ntotal\t{}\n\nidentity\tclip\tlabel\n", step.ce, step.triplet, step.total);
    for ((id, clip), l) in batch.clips.iter().zip(&batch.labels) {
        let _ = writeln!(s, "{id}\t{clip}\t{l}");
    }
    write_file(&dir.join("batch.tsv"), s.as_bytes())?;
    batch.frames.save(&dir.join("frames.tclt"))?;
    crate::dump::dump_artifacts(&dir.join("artifacts"), artifacts, attention)?;
    Ok(())
}

/// Trains on gallery and spare clips, evaluating queries against the
/// gallery every `eval_every` epochs. `on_epoch` sees every log row.
pub fn train(
    model: &mut Model,
    data: &Dataset,
    cfg: &TrainConfig,
    diag: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochLog) -> Result<()>,
) -> Result<TrainReport> {
    cfg.validate(model.n_learners())?;
    let clips = data.train_clips();
    let classes = class_map(&clips);
    if classes.len() != model.classes {
        return Err(Error::pre(
            "train",
            format!("model has {} classes, data has {} identities", model.classes, classes.len()),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_ba7c);
    let mut adam = Adam::new(cfg.lr);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut final_metrics = None;
    for epoch in 0..cfg.epochs {
        adam.lr = cfg.lr_at(epoch);
        let batches = epoch_batches(&clips, &classes, cfg, &mut rng)?;
        let (mut ce, mut tri) = (0.0, 0.0);
        for b in &batches {
            let s = train_step(model, &mut adam, b, cfg, diag)?;
            ce += s.ce;
            tri += s.triplet;
        }
        let nb = batches.len() as f64;
        let last = epoch + 1 == cfg.epochs;
        let metrics = if cfg.eval_every > 0 && ((epoch + 1) % cfg.eval_every == 0 || last) {
            Some(evaluate_model(model, data, FramePolicy::Truncate)?)
        } else {
            None
        };
        let row = EpochLog {
            epoch,
            ce_loss: ce / nb,
            triplet_loss: tri / nb,
            map: metrics.as_ref().map(|m| m.map),
            top1: metrics.as_ref().map(|m| m.top1()),
            lr: adam.lr,
        };
        log::info!("{}", row.csv_row());
        on_epoch(&row)?;
        history.push(row);
        if last {
            final_metrics = metrics;
        }
    }
    Ok(TrainReport { history, final_metrics })
}

const CKPT_MAGIC: &[u8; 4] = b"TCLC";
const CKPT_VERSION: u32 = 1;

/// Single-file checkpoint: header then named tensor records.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Resolved run configuration, verbatim.
    pub config: String,
    pub config_digest: String,
    pub epoch: u64,
    pub seed: u64,
    pub records: Vec<(String, Tensor)>,
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn get_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| Error::format("checkpoint", e.to_string()))?;
    Ok(u32::from_le_bytes(b))
}

fn get_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|e| Error::format("checkpoint", e.to_string()))?;
    Ok(u64::from_le_bytes(b))
}

fn get_str(r: &mut impl Read) -> Result<String> {
    let n = get_u32(r)? as usize;
    let mut b = vec![0u8; n];
    r.read_exact(&mut b).map_err(|e| Error::format("checkpoint", e.to_string()))?;
    String::from_utf8(b).map_err(|e| Error::format("checkpoint", e.to_string()))
}

impl Checkpoint {
    pub fn from_params(params: &Params, config: &str, epoch: u64, seed: u64) -> Self {
        Checkpoint {
            config: config.to_string(),
            config_digest: crate::config::digest(config),
            epoch,
            seed,
            records: params.iter().map(|(n, t, _)| (n.to_string(), t.clone())).collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        put_str(&mut out, &self.config_digest);
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        put_str(&mut out, &self.config);
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for (name, t) in &self.records {
            put_str(&mut out, name);
            t.write_to(&mut out).expect("writing to a Vec cannot fail");
        }
        out
    }

    pub fn from_bytes(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|e| Error::format("checkpoint", e.to_string()))?;
        if &magic != CKPT_MAGIC {
            return Err(Error::format("checkpoint", "bad magic"));
        }
        let v = get_u32(&mut r)?;
        if v != CKPT_VERSION {
            return Err(Error::format("checkpoint", format!("unsupported version {v}")));
        }
        let config_digest = get_str(&mut r)?;
        let epoch = get_u64(&mut r)?;
        let seed = get_u64(&mut r)?;
        let config = get_str(&mut r)?;
        if crate::config::digest(&config) != config_digest {
            return Err(Error::format("checkpoint", "config digest does not match the stored config"));
        }
        let n = get_u32(&mut r)? as usize;
        let mut records = Vec::with_capacity(n);
        for _ in 0..n {
            let name = get_str(&mut r)?;
            records.push((name, Tensor::read_from(&mut r)?));
        }
        Ok(Checkpoint {
            config,
            config_digest,
            epoch,
            seed,
            records,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(std::io::BufReader::new(f))
    }

    /// Copies every record into `params`; names and shapes must match.
    pub fn restore(&self, params: &mut Params) -> Result<()> {
        if self.records.len() != params.len() {
            return Err(Error::format(
                "checkpoint",
                format!("{} records for {} parameters", self.records.len(), params.len()),
            ));
        }
        for (name, t) in &self.records {
            params.assign(name, t.clone())?;
        }
        Ok(())
    }

    /// SHA-256 of the serialised checkpoint.
    pub fn digest(&self) -> String {
        crate::config::digest_bytes(&self.to_bytes())
    }
}
