//! Synthetic video re-identification corpus.
//!
//! A person is a stack of horizontal bands on a dark background. One band
//! is bright and shared by groups of identities, so it dominates the
//! activations while telling group members apart only through the other,
//! fainter bands. Clips differ by a pose offset, per-frame jitter, pixel
//! noise and occasional gray occluders.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub identities: usize,
    pub clips_per_identity: usize,
    pub gallery_clips: usize,
    pub query_clips: usize,
    pub frames_per_clip: usize,
    pub frame_height: usize,
    pub frame_width: usize,
    pub channels: usize,
    pub bands: usize,
    /// Band (0-based, top to bottom) whose appearance is shared.
    pub salient_band: usize,
    /// Identities `g*share_group .. (g+1)*share_group` share the salient band.
    pub share_group: usize,
    pub salient_amplitude: f64,
    pub detail_amplitude: f64,
    /// Per-clip colour shift of the salient band, per channel at most this.
    pub salient_drift: f64,
    pub noise: f64,
    pub occlusion_prob: f64,
    /// Largest pose offset in pixels, per clip and per axis.
    pub pose_jitter: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            identities: 16,
            clips_per_identity: 6,
            gallery_clips: 3,
            query_clips: 2,
            frames_per_clip: 8,
            frame_height: 64,
            frame_width: 32,
            channels: 3,
            bands: 4,
            salient_band: 2,
            share_group: 4,
            salient_amplitude: 1.0,
            detail_amplitude: 0.35,
            salient_drift: 0.0,
            noise: 0.1,
            occlusion_prob: 0.1,
            pose_jitter: 2,
        }
    }
}

/// Body box margins inside the frame.
const MARGIN_Y: usize = 4;
const MARGIN_X: usize = 4;

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.identities < 2 {
            return Err(Error::pre("generate", "need at least 2 identities"));
        }
        if self.gallery_clips == 0 || self.query_clips == 0 {
            return Err(Error::pre("generate", "need at least one gallery and one query clip"));
        }
        if self.gallery_clips + self.query_clips > self.clips_per_identity {
            return Err(Error::pre("generate", "gallery + query clips exceed clips per identity"));
        }
        if self.frames_per_clip == 0 || self.channels == 0 {
            return Err(Error::pre("generate", "empty clips"));
        }
        if self.bands == 0 || self.salient_band >= self.bands || self.share_group < 2 {
            return Err(Error::pre("generate", "salient band must exist and be shared by >= 2 identities"));
        }
        let body_h = self.frame_height.saturating_sub(2 * (MARGIN_Y + self.pose_jitter + 1));
        if body_h < self.bands * 2 || self.frame_width <= 2 * (MARGIN_X + self.pose_jitter + 1) {
            return Err(Error::pre("generate", "frame too small for the body layout"));
        }
        if !(0.0..=1.0).contains(&self.occlusion_prob) || self.noise < 0.0 || self.salient_drift < 0.0 {
            return Err(Error::pre("generate", "noise and drift >= 0, occlusion in [0,1]"));
        }
        Ok(())
    }

    fn body_height(&self) -> usize {
        (self.frame_height - 2 * MARGIN_Y) / self.bands * self.bands
    }

    /// Rows of `band` in the unshifted layout.
    pub fn band_rows(&self, band: usize) -> std::ops::Range<usize> {
        let bh = self.body_height() / self.bands;
        MARGIN_Y + band * bh..MARGIN_Y + (band + 1) * bh
    }

    /// Columns of the body in the unshifted layout.
    pub fn body_cols(&self) -> std::ops::Range<usize> {
        MARGIN_X..self.frame_width - MARGIN_X
    }

    /// Identities whose salient band matches `id`'s.
    pub fn group_of(&self, id: usize) -> usize {
        id / self.share_group
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Gallery,
    Query,
    Spare,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Gallery => "gallery",
            Split::Query => "query",
            Split::Spare => "spare",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "gallery" => Ok(Split::Gallery),
            "query" => Ok(Split::Query),
            "spare" => Ok(Split::Spare),
            _ => Err(Error::format("manifest", format!("unknown split {s:?}"))),
        }
    }
}

/// One tracklet: `frames` is `[T,C,H,W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub identity: usize,
    pub clip_id: usize,
    pub camera: u32,
    pub split: Split,
    pub frames: Tensor,
}

impl VideoClip {
    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn frame_shape(&self) -> &[usize] {
        &self.frames.shape()[1..]
    }

    pub fn frame(&self, t: usize) -> Tensor {
        let n: usize = self.frame_shape().iter().product();
        Tensor::new(self.frame_shape(), self.frames.data()[t * n..(t + 1) * n].to_vec()).expect("frame slice")
    }

    /// Frames `idx` stacked as `[len(idx),C,H,W]`.
    pub fn select(&self, idx: &[usize]) -> Tensor {
        let n: usize = self.frame_shape().iter().product();
        let mut data = Vec::with_capacity(n * idx.len());
        for &t in idx {
            data.extend_from_slice(&self.frames.data()[t * n..(t + 1) * n]);
        }
        let mut shape = vec![idx.len()];
        shape.extend_from_slice(self.frame_shape());
        Tensor::new(&shape, data).expect("frame selection")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: SynthSpec,
    pub seed: u64,
    pub clips: Vec<VideoClip>,
}

/// Per-identity appearance: one colour per band.
struct Palette {
    salient: Vec<Vec<f64>>,
    detail: Vec<Vec<Vec<f64>>>,
}

fn random_colour(rng: &mut ChaCha8Rng, channels: usize, amp: f64) -> Vec<f64> {
    (0..channels).map(|_| amp * rng.random_range(-1.0..1.0)).collect()
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

impl Palette {
    fn new(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Self {
        let groups = spec.identities.div_ceil(spec.share_group);
        let salient = (0..groups)
            .map(|_| {
                // bright: every channel far from zero
                (0..spec.channels)
                    .map(|_| {
                        let s = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                        s * spec.salient_amplitude * rng.random_range(0.7..1.0)
                    })
                    .collect()
            })
            .collect();
        // detail colours are redrawn until every band differs across
        // identities by a clear margin
        let min_gap = 0.5 * spec.detail_amplitude;
        let mut detail: Vec<Vec<Vec<f64>>> = Vec::with_capacity(spec.identities);
        for _ in 0..spec.identities {
            let mut bands = Vec::with_capacity(spec.bands);
            for b in 0..spec.bands {
                let mut c = random_colour(rng, spec.channels, spec.detail_amplitude);
                for _ in 0..100 {
                    if detail.iter().all(|other| distance(&other[b], &c) >= min_gap) {
                        break;
                    }
                    c = random_colour(rng, spec.channels, spec.detail_amplitude);
                }
                bands.push(c);
            }
            detail.push(bands);
        }
        Palette { salient, detail }
    }

    fn colour(&self, spec: &SynthSpec, id: usize, band: usize) -> &[f64] {
        if band == spec.salient_band {
            &self.salient[spec.group_of(id)]
        } else {
            &self.detail[id][band]
        }
    }
}

fn render_frame(spec: &SynthSpec, palette: &Palette, id: usize, drift: &[f64], dy: i64, dx: i64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (h, w, c) = (spec.frame_height, spec.frame_width, spec.channels);
    let mut px = vec![0.0; c * h * w];
    let cols = spec.body_cols();
    for band in 0..spec.bands {
        let mut colour = palette.colour(spec, id, band).to_vec();
        if band == spec.salient_band {
            colour.iter_mut().zip(drift).for_each(|(v, d)| *v += d);
        }
        for y in spec.band_rows(band) {
            let yy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
            for x in cols.clone() {
                let xx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                for (ch, v) in colour.iter().enumerate() {
                    px[(ch * h + yy) * w + xx] = *v;
                }
            }
        }
    }
    if spec.occlusion_prob > 0.0 && rng.random_bool(spec.occlusion_prob) {
        let oh = rng.random_range(h / 8..=h / 3);
        let ow = rng.random_range(w / 4..=w / 2);
        let oy = rng.random_range(0..=h - oh);
        let ox = rng.random_range(0..=w - ow);
        for ch in 0..c {
            for y in oy..oy + oh {
                for x in ox..ox + ow {
                    px[(ch * h + y) * w + x] = 0.5;
                }
            }
        }
    }
    if spec.noise > 0.0 {
        for v in px.iter_mut() {
            // sum of uniforms: close to normal, variance noise^2
            let u: f64 = (0..3).map(|_| rng.random_range(-1.0..1.0)).sum();
            *v += spec.noise * u;
        }
    }
    px
}

/// Deterministic corpus for `(spec, seed)`.
pub fn generate(spec: &SynthSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let palette = Palette::new(spec, &mut rng);
    let (h, w, c, t) = (spec.frame_height, spec.frame_width, spec.channels, spec.frames_per_clip);
    let pj = spec.pose_jitter as i64;
    let mut clips = Vec::with_capacity(spec.identities * spec.clips_per_identity);
    for id in 0..spec.identities {
        for clip_id in 0..spec.clips_per_identity {
            let split = if clip_id < spec.gallery_clips {
                Split::Gallery
            } else if clip_id < spec.gallery_clips + spec.query_clips {
                Split::Query
            } else {
                Split::Spare
            };
            let (py, px) = (rng.random_range(-pj..=pj), rng.random_range(-pj..=pj));
            let drift = if spec.salient_drift > 0.0 {
                random_colour(&mut rng, c, spec.salient_drift)
            } else {
                vec![0.0; c]
            };
            let mut data = Vec::with_capacity(t * c * h * w);
            for _ in 0..t {
                let (jy, jx) = if pj > 0 {
                    (rng.random_range(-1..=1), rng.random_range(-1..=1))
                } else {
                    (0, 0)
                };
                data.extend(render_frame(spec, &palette, id, &drift, py + jy, px + jx, &mut rng));
            }
            clips.push(VideoClip {
                identity: id,
                clip_id,
                camera: 0,
                split,
                frames: Tensor::new(&[t, c, h, w], data)?,
            });
        }
    }
    Ok(Dataset {
        spec: spec.clone(),
        seed,
        clips,
    })
}

const MANIFEST: &str = "manifest.tsv";
const SPEC_FILE: &str = "spec.toml";

impl Dataset {
    pub fn identities(&self) -> usize {
        self.clips.iter().map(|c| c.identity + 1).max().unwrap_or(0)
    }

    pub fn split(&self, split: Split) -> Vec<&VideoClip> {
        self.clips.iter().filter(|c| c.split == split).collect()
    }

    /// Gallery and spare clips; queries are held out.
    pub fn train_clips(&self) -> Vec<&VideoClip> {
        self.clips.iter().filter(|c| c.split != Split::Query).collect()
    }

    /// SHA-256 over labels and frame bytes.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for c in &self.clips {
            h.update(format!("{}/{}/{}/{};", c.identity, c.clip_id, c.camera, c.split.as_str()).as_bytes());
            h.update(c.frames.to_bytes());
        }
        hex::encode(h.finalize())
    }

    fn clip_dir(c: &VideoClip) -> String {
        format!("id_{:04}/clip_{:02}", c.identity, c.clip_id)
    }

    /// One directory per identity, one `.tclt` file per frame, a manifest
    /// and the generating spec.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = String::from("identity\tclip\tframes\tcamera\tsplit\tpath\n");
        for c in &self.clips {
            let rel = Self::clip_dir(c);
            let cdir = dir.join(&rel);
            fs::create_dir_all(&cdir).map_err(|e| Error::io(&cdir, e))?;
            for t in 0..c.len() {
                c.frame(t).save(&cdir.join(format!("frame_{t:03}.tclt")))?;
            }
            manifest.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                c.identity,
                c.clip_id,
                c.len(),
                c.camera,
                c.split.as_str(),
                rel
            ));
        }
        let spec = toml::to_string(&SpecFile {
            seed: self.seed,
            spec: self.spec.clone(),
        })
        .map_err(|e| Error::format("spec", e.to_string()))?;
        write_file(&dir.join(SPEC_FILE), spec.as_bytes())?;
        write_file(&dir.join(MANIFEST), manifest.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let spec_path = dir.join(SPEC_FILE);
        let text = fs::read_to_string(&spec_path).map_err(|e| Error::io(&spec_path, e))?;
        let sf: SpecFile = toml::from_str(&text).map_err(|e| Error::format("spec", e.to_string()))?;
        let mpath = dir.join(MANIFEST);
        let file = fs::File::open(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let mut clips = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&mpath, e))?;
            if i == 0 || line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 6 {
                return Err(Error::format("manifest", format!("line {}: expected 6 fields", i + 1)));
            }
            let num = |s: &str| {
                s.parse::<usize>()
                    .map_err(|_| Error::format("manifest", format!("line {}: bad number {s:?}", i + 1)))
            };
            let n = num(f[2])?;
            let cdir = dir.join(f[5]);
            let frames: Vec<Tensor> = (0..n)
                .map(|t| Tensor::load(&cdir.join(format!("frame_{t:03}.tclt"))))
                .collect::<Result<_>>()?;
            clips.push(VideoClip {
                identity: num(f[0])?,
                clip_id: num(f[1])?,
                camera: num(f[3])? as u32,
                split: Split::parse(f[4])?,
                frames: crate::backbone::stack_frames(&frames)?,
            });
        }
        Ok(Dataset {
            spec: sf.spec,
            seed: sf.seed,
            clips,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct SpecFile {
    seed: u64,
    spec: SynthSpec,
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}
