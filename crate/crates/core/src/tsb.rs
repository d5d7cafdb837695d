//! Temporal saliency boosting: query-memory attention between the frames
//! of one clip.
//!
//! Each frame's map is squeezed to a descriptor `q` by global average
//! pooling and matched against every local descriptor of the other frames
//! by temperature-scaled cosine similarity. The softmax-weighted sum `o`
//! of the raw memory descriptors is batch-normalised and added back to the
//! query map at every position.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Forward, Params};
use crate::tensor::Tensor;

/// Norm floor when normalising the query and memory descriptors.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TsbConfig {
    pub temperature: f64,
    /// Backbone stage after which the module runs (1-based).
    pub stage: usize,
}

impl Default for TsbConfig {
    fn default() -> Self {
        TsbConfig {
            temperature: 16.0,
            stage: 2,
        }
    }
}

impl TsbConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::pre("tsb_config", "temperature must be positive"));
        }
        Ok(())
    }
}

/// Cosine-softmax weights of `rows` (`[R,D]`) for each query (`[Q,D]`),
/// restricted to `keep` (`Q*R`, row-major). Returns `(A [Q,R], o [Q,D])`
/// with `o = A M`.
fn attend<'t>(queries: Var<'t>, memory: Var<'t>, keep: &[bool], tau: f64) -> Result<(Var<'t>, Var<'t>)> {
    let qn = queries.l2_normalize_rows(NORM_EPS)?;
    let mn = memory.l2_normalize_rows(NORM_EPS)?;
    let scores = qn.matmul(mn.transpose()?)?.scale(tau);
    let a = scores.masked_softmax(keep)?;
    let o = a.matmul(memory)?;
    Ok((a, o))
}

/// `A_i = softmax_i(tau * q_bar . M_bar_i)` for a `[D]` query and `[|M|,D]`
/// memory. Zero vectors are normalised against a `1e-12` floor.
pub fn attention_weights<'t>(q: Var<'t>, memory: Var<'t>, tau: f64) -> Result<Var<'t>> {
    let qs = q.shape();
    let ms = memory.shape();
    let (r, d) = match (qs.as_slice(), ms.as_slice()) {
        (&[d], &[r, d2]) if d == d2 => (r, d),
        _ => return Err(Error::dim("attention_weights", &qs, &ms)),
    };
    let (a, _) = attend(q.reshape(&[1, d])?, memory, &vec![true; r], tau)?;
    a.reshape(&[r])
}

/// `[T,D,H,W]` frames as `[T*H*W, D]` local descriptors.
fn descriptors<'t>(frames: Var<'t>) -> Result<Var<'t>> {
    let s = frames.shape();
    let (t, d, hw) = match *s.as_slice() {
        [t, d, h, w] => (t, d, h * w),
        _ => return Err(Error::pre("tsb", format!("expected [T,D,H,W], got {s:?}"))),
    };
    frames.reshape(&[t, d, hw])?.transpose()?.reshape(&[t * hw, d])
}

pub struct TsbOutput<'t> {
    pub enhanced: Var<'t>,
    /// Per clip, `[T, T*H*W]` attention of each query frame over the
    /// memory positions (own frame columns are zero). Empty when `T == 1`.
    pub attention: Vec<Tensor>,
}

/// The boosting module; its only parameters are one batch norm on `o`.
#[derive(Clone, Debug)]
pub struct Tsb {
    pub cfg: TsbConfig,
    pub bn: BatchNorm,
}

impl Tsb {
    pub fn new(params: &mut Params, cfg: TsbConfig, channels: usize) -> Self {
        Tsb {
            bn: BatchNorm::new(params, "tsb.bn", channels),
            cfg,
        }
    }

    /// `E = BN(o) + Q` for one `[D,H,W]` query against `S` memory frames.
    /// An empty memory returns `Q` untouched.
    pub fn propagate<'t>(&self, f: &mut Forward<'t, '_>, query: Var<'t>, memory: &[Var<'t>]) -> Result<Var<'t>> {
        if memory.is_empty() {
            return Ok(query);
        }
        let qs = query.shape();
        let d = match *qs.as_slice() {
            [d, _, _] => d,
            _ => return Err(Error::pre("propagate", format!("expected [D,H,W], got {qs:?}"))),
        };
        let mut rows = Vec::with_capacity(memory.len());
        for m in memory {
            let ms = m.shape();
            if ms.len() != 3 || ms[0] != d {
                return Err(Error::dim("propagate", &qs, &ms));
            }
            rows.push(descriptors(m.reshape(&[1, ms[0], ms[1], ms[2]])?)?);
        }
        let mem = Var::concat(&rows, 0)?;
        let n_rows = mem.shape()[0];
        let q = query.global_avg_pool()?.reshape(&[1, d])?;
        let (_, o) = attend(q, mem, &vec![true; n_rows], self.cfg.temperature)?;
        let o = self.bn.forward(f, o)?.reshape(&[d])?;
        query.add_spatial(o)
    }

    /// Enhances every frame of one `[T,D,H,W]` clip against the other
    /// `T-1` original frames.
    pub fn forward_clip<'t>(&self, f: &mut Forward<'t, '_>, clip: Var<'t>) -> Result<TsbOutput<'t>> {
        let t = clip.shape().first().copied().unwrap_or(0);
        self.forward_batch(f, clip, t.max(1))
    }

    /// Enhances `[B*T,D,H,W]` maps holding `B` clips of `T` frames; one
    /// batch norm spans all `B*T` outputs.
    pub fn forward_batch<'t>(&self, f: &mut Forward<'t, '_>, maps: Var<'t>, frames_per_clip: usize) -> Result<TsbOutput<'t>> {
        let s = maps.shape();
        let (bt, d, hw) = match *s.as_slice() {
            [bt, d, h, w] => (bt, d, h * w),
            _ => return Err(Error::pre("tsb_forward", format!("expected [B*T,D,H,W], got {s:?}"))),
        };
        let t = frames_per_clip;
        if t == 0 || bt % t != 0 {
            return Err(Error::pre("tsb_forward", format!("{bt} maps are not whole clips of {t}")));
        }
        if t == 1 {
            return Ok(TsbOutput {
                enhanced: maps,
                attention: Vec::new(),
            });
        }
        let keep: Vec<bool> = (0..t)
            .flat_map(|q| (0..t * hw).map(move |j| j / hw != q))
            .collect();
        let mut outs = Vec::with_capacity(bt / t);
        let mut attention = Vec::with_capacity(bt / t);
        for c in 0..bt / t {
            let idx: Vec<usize> = (c * t..(c + 1) * t).collect();
            let clip = maps.index_select(&idx)?;
            let q = clip.global_avg_pool()?;
            let mem = descriptors(clip)?;
            let (a, o) = attend(q, mem, &keep, self.cfg.temperature)?;
            attention.push(a.value());
            outs.push(o);
        }
        let o = Var::concat(&outs, 0)?;
        debug_assert_eq!(o.shape(), vec![bt, d]);
        let o = self.bn.forward(f, o)?;
        Ok(TsbOutput {
            enhanced: maps.add_spatial(o)?,
            attention,
        })
    }
}
