//! Temporal saliency erasing.
//!
//! Within a segment of `N` consecutive frame maps, learner `n` only sees
//! frame `n` after the regions that learners `1..n` already attended to
//! have been gated out. The saliency erasing operation (SEO) has four
//! steps: a correlation map per previous feature, a sliding-block search
//! that picks the block to erase, a softmax gate over the fused correlation
//! masked by the fused block mask, and the gated erase of the map.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{uniform_fan_in, ConvBlock, Forward, ParamId, Params};
use crate::tensor::Tensor;

/// Sliding-block and learner-count settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeoConfig {
    pub n_learners: usize,
    pub block_height: usize,
    /// `None` spans the full feature-map width.
    pub block_width: Option<usize>,
    pub stride_h: usize,
    pub stride_w: usize,
    /// Off gives the ordered-learners-without-erasing ablation.
    pub seo: bool,
}

impl Default for SeoConfig {
    fn default() -> Self {
        SeoConfig {
            n_learners: 2,
            block_height: 3,
            block_width: None,
            stride_h: 1,
            stride_w: 1,
            seo: true,
        }
    }
}

impl SeoConfig {
    pub fn block_width_for(&self, map_width: usize) -> usize {
        self.block_width.unwrap_or(map_width)
    }

    /// Checks the block fits an `h x w` map.
    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        let bw = self.block_width_for(w);
        if self.n_learners == 0 {
            return Err(Error::pre("seo_config", "n_learners must be >= 1"));
        }
        if self.stride_h == 0 || self.stride_w == 0 {
            return Err(Error::pre("seo_config", "strides must be >= 1"));
        }
        if self.block_height == 0 || bw == 0 || self.block_height > h || bw > w {
            return Err(Error::pre(
                "block_binarize",
                format!("block {}x{} does not fit a {h}x{w} map", self.block_height, bw),
            ));
        }
        Ok(())
    }

    /// Count of candidate block positions on an `h x w` map.
    pub fn n_positions(&self, h: usize, w: usize) -> Result<usize> {
        self.validate(h, w)?;
        let (rows, cols) = self.grid(h, w);
        Ok(rows * cols)
    }

    fn grid(&self, h: usize, w: usize) -> (usize, usize) {
        let bw = self.block_width_for(w);
        (
            (h - self.block_height) / self.stride_h + 1,
            (w - bw) / self.stride_w + 1,
        )
    }
}

/// An erased rectangle; `index` is its row-major rank among the candidates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Block {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
    pub index: usize,
}

impl Block {
    pub fn contains(&self, i: usize, j: usize) -> bool {
        i >= self.row && i < self.row + self.height && j >= self.col && j < self.col + self.width
    }
}

/// `{0,1}` map; zeros mark erased cells.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    keep: Vec<bool>,
    blocks: Vec<Block>,
}

impl BinaryMask {
    pub fn ones(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            keep: vec![true; height * width],
            blocks: Vec::new(),
        }
    }

    /// Mask with one `block_h x block_w` zero block at `(row, col)`; the
    /// block index assumes unit strides.
    pub fn with_block(height: usize, width: usize, row: usize, col: usize, block_h: usize, block_w: usize) -> Result<Self> {
        if block_h == 0 || block_w == 0 || row + block_h > height || col + block_w > width {
            return Err(Error::pre("binary_mask", "block outside the map"));
        }
        let index = row * (width - block_w + 1) + col;
        Ok(Self::from_block(
            height,
            width,
            Block {
                row,
                col,
                height: block_h,
                width: block_w,
                index,
            },
        ))
    }

    fn from_block(height: usize, width: usize, block: Block) -> Self {
        let mut m = BinaryMask::ones(height, width);
        for i in block.row..block.row + block.height {
            for j in block.col..block.col + block.width {
                m.keep[i * width + j] = false;
            }
        }
        m.blocks.push(block);
        m
    }

    /// Elementwise product of two masks of the same size.
    pub fn fuse(&self, other: &BinaryMask) -> BinaryMask {
        assert_eq!((self.height, self.width), (other.height, other.width));
        BinaryMask {
            height: self.height,
            width: self.width,
            keep: self.keep.iter().zip(&other.keep).map(|(a, b)| *a && *b).collect(),
            blocks: self.blocks.iter().chain(&other.blocks).copied().collect(),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Erased blocks this mask was built from.
    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn is_kept(&self, i: usize, j: usize) -> bool {
        self.keep[i * self.width + j]
    }

    pub fn zeros(&self) -> usize {
        self.keep.iter().filter(|k| !**k).count()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.height, self.width], self.to_f64()).expect("mask shape")
    }
}

/// Picks the candidate block with the largest sum of `r` (row-major
/// `h x w`). Ties go to the smallest row-major position index.
fn select_block(r: &[f64], h: usize, w: usize, cfg: &SeoConfig) -> Block {
    let bw = cfg.block_width_for(w);
    let (rows, cols) = cfg.grid(h, w);
    let mut best: Option<(f64, Block)> = None;
    for pi in 0..rows {
        for pj in 0..cols {
            let (row, col) = (pi * cfg.stride_h, pj * cfg.stride_w);
            let mut score = 0.0;
            for i in row..row + cfg.block_height {
                for v in &r[i * w + col..i * w + col + bw] {
                    score += v;
                }
            }
            if best.as_ref().is_none_or(|(s, _)| score > *s) {
                best = Some((
                    score,
                    Block {
                        row,
                        col,
                        height: cfg.block_height,
                        width: bw,
                        index: pi * cols + pj,
                    },
                ));
            }
        }
    }
    best.expect("at least one candidate").1
}

/// Block binarisation of one `[H,W]` correlation map.
pub fn block_binarize(r: &Tensor, cfg: &SeoConfig) -> Result<BinaryMask> {
    let (h, w) = match *r.shape() {
        [h, w] => (h, w),
        ref s => return Err(Error::pre("block_binarize", format!("expected [H,W], got {s:?}"))),
    };
    cfg.validate(h, w)?;
    Ok(BinaryMask::from_block(h, w, select_block(r.data(), h, w, cfg)))
}

/// `R(i,j) = <F(i,j), w^T f_k>` for `[D,H,W]` maps with an `[D1]` feature,
/// or batched `[B,D,H,W]` with `[B,D1]`. `w` is `[D1,D]`.
pub fn correlation_map<'t>(map: Var<'t>, feature: Var<'t>, w: Var<'t>) -> Result<Var<'t>> {
    let fs = feature.shape();
    let ws = w.shape();
    let probe = match fs.as_slice() {
        [d1] => feature.reshape(&[1, *d1])?.matmul(w).and_then(|p| {
            let d = p.shape()[1];
            p.reshape(&[d])
        }),
        [_, _] => feature.matmul(w),
        _ => Err(Error::dim("correlation_map", &fs, &ws)),
    }
    .map_err(|_| Error::dim("correlation_map", &fs, &ws))?;
    map.channel_contract(probe)
}

/// `softmax(R_1 * ... * R_m) * B` over all `H*W` positions of each map.
///
/// `maps` are `[H,W]` with one mask, or `[B,H,W]` with one mask per sample.
/// The mask is a constant: gradients reach the maps only.
pub fn gate_map<'t>(maps: &[Var<'t>], masks: &[BinaryMask]) -> Result<Var<'t>> {
    let first = maps
        .first()
        .ok_or_else(|| Error::pre("gate_map", "needs at least one correlation map"))?;
    let shape = first.shape();
    let (b, h, w) = match *shape.as_slice() {
        [h, w] => (1, h, w),
        [b, h, w] => (b, h, w),
        _ => return Err(Error::pre("gate_map", format!("expected [H,W] or [B,H,W], got {shape:?}"))),
    };
    if masks.len() != b || masks.iter().any(|m| (m.height, m.width) != (h, w)) {
        return Err(Error::pre("gate_map", "one mask of the map size per sample"));
    }
    let mut fused = *first;
    for m in &maps[1..] {
        fused = fused.mul(*m)?;
    }
    let keep: Vec<f64> = masks.iter().flat_map(|m| m.to_f64()).collect();
    fused
        .reshape(&[b, h * w])?
        .softmax(1)?
        .mul_const(&keep)?
        .reshape(&shape)
}

/// `F_bar(i,j) = (H*W * G(i,j)) * F(i,j)`, broadcast over channels.
pub fn erase<'t>(map: Var<'t>, gate: Var<'t>) -> Result<Var<'t>> {
    let s = map.shape();
    let hw = s[s.len() - 2] * s[s.len() - 1];
    map.spatial_gate(gate, hw as f64)
}

/// Shared trunk block plus one private head block per learner.
#[derive(Clone, Debug)]
pub struct LearnerStack {
    pub trunk: ConvBlock,
    pub heads: Vec<ConvBlock>,
    pub out_channels: usize,
}

impl LearnerStack {
    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }

    /// `GAP(L_n(x))` for a `[B,D,H,W]` batch; returns `[B,D1]`.
    pub fn forward<'t>(&self, f: &mut Forward<'t, '_>, n: usize, x: Var<'t>) -> Result<Var<'t>> {
        let head = self
            .heads
            .get(n)
            .ok_or_else(|| Error::pre("learner", format!("no learner {n}")))?;
        let y = self.trunk.forward(f, x)?;
        head.forward(f, y)?.global_avg_pool()
    }
}

/// Intermediate maps of one frame of one segment.
#[derive(Clone, Debug)]
pub struct SeoArtifacts {
    /// `R_nk` for every earlier frame `k`.
    pub correlations: Vec<Tensor>,
    /// `B_nk`, one per earlier frame.
    pub masks: Vec<BinaryMask>,
    pub fused_mask: BinaryMask,
    pub gate: Tensor,
    pub erased: Tensor,
}

pub struct TseOutput<'t> {
    /// `f_1..f_N`, each `[B,D1]`.
    pub features: Vec<Var<'t>>,
    /// `artifacts[n][b]` for frame `n` of segment `b`.
    pub artifacts: Vec<Vec<SeoArtifacts>>,
}

/// The erasing module: one projection `w` shared by every frame pair.
#[derive(Clone, Debug)]
pub struct Tse {
    pub cfg: SeoConfig,
    pub projection: ParamId,
    pub learners: LearnerStack,
}

impl Tse {
    pub fn new<R: Rng>(params: &mut Params, rng: &mut R, cfg: SeoConfig, learners: LearnerStack, d: usize) -> Self {
        let d1 = learners.out_channels;
        let w = uniform_fan_in(rng, &[d1, d], d1);
        Tse {
            cfg,
            projection: params.add("tse.projection", w, true),
            learners,
        }
    }

    /// Runs the learners over one batch of segments. `segment[n]` holds
    /// frame `n` of every segment as `[B,D,H,W]`.
    pub fn forward<'t>(&self, f: &mut Forward<'t, '_>, segment: &[Var<'t>]) -> Result<TseOutput<'t>> {
        let n_frames = self.cfg.n_learners;
        if segment.len() != n_frames {
            return Err(Error::pre(
                "tse_forward",
                format!("segment has {} frames, expected {n_frames}", segment.len()),
            ));
        }
        if self.learners.len() != n_frames {
            return Err(Error::pre("tse_forward", "learner count differs from n_learners"));
        }
        let shape = segment[0].shape();
        let (b, d, h, w) = match *shape.as_slice() {
            [b, d, h, w] => (b, d, h, w),
            _ => return Err(Error::pre("tse_forward", format!("expected [B,D,H,W], got {shape:?}"))),
        };
        if segment.iter().any(|s| s.shape() != shape) {
            return Err(Error::pre("tse_forward", "segment frames differ in shape"));
        }
        if self.cfg.seo {
            self.cfg.validate(h, w)?;
        }

        let mut features: Vec<Var<'t>> = Vec::with_capacity(n_frames);
        let mut artifacts = Vec::with_capacity(n_frames);
        for (n, &map) in segment.iter().enumerate() {
            if n == 0 || !self.cfg.seo {
                // no earlier feature: uniform gate, all-ones mask, identity erase
                features.push(self.learners.forward(f, n, map)?);
                artifacts.push(plain_artifacts(map, b, d, h, w));
                continue;
            }
            let proj = f.var(self.projection);
            let mut maps = Vec::with_capacity(n);
            let mut masks_per_k: Vec<Vec<BinaryMask>> = Vec::with_capacity(n);
            for &fk in &features {
                let r = correlation_map(map, fk, proj)?;
                let rv = r.data();
                masks_per_k.push(
                    (0..b)
                        .map(|bi| {
                            let block = select_block(&rv[bi * h * w..(bi + 1) * h * w], h, w, &self.cfg);
                            BinaryMask::from_block(h, w, block)
                        })
                        .collect(),
                );
                maps.push(r);
            }
            let fused: Vec<BinaryMask> = (0..b)
                .map(|bi| {
                    masks_per_k
                        .iter()
                        .fold(BinaryMask::ones(h, w), |acc, m| acc.fuse(&m[bi]))
                })
                .collect();
            let gate = gate_map(&maps, &fused)?;
            let erased = erase(map, gate)?;
            features.push(self.learners.forward(f, n, erased)?);

            let (gv, ev) = (gate.data(), erased.data());
            let rvs: Vec<_> = maps.iter().map(|m| m.data()).collect();
            artifacts.push(
                (0..b)
                    .map(|bi| SeoArtifacts {
                        correlations: rvs
                            .iter()
                            .map(|r| slice_tensor(r, bi, &[h, w]))
                            .collect(),
                        masks: masks_per_k.iter().map(|m| m[bi].clone()).collect(),
                        fused_mask: fused[bi].clone(),
                        gate: slice_tensor(&gv, bi, &[h, w]),
                        erased: slice_tensor(&ev, bi, &[d, h, w]),
                    })
                    .collect(),
            );
        }
        Ok(TseOutput { features, artifacts })
    }
}

fn slice_tensor(data: &[f64], index: usize, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, data[index * n..(index + 1) * n].to_vec()).expect("slice shape")
}

fn plain_artifacts(map: Var<'_>, b: usize, d: usize, h: usize, w: usize) -> Vec<SeoArtifacts> {
    let md = map.data();
    (0..b)
        .map(|bi| SeoArtifacts {
            correlations: Vec::new(),
            masks: Vec::new(),
            fused_mask: BinaryMask::ones(h, w),
            gate: Tensor::full(&[h, w], 1.0 / (h * w) as f64),
            erased: slice_tensor(&md, bi, &[d, h, w]),
        })
        .collect()
}
