//! Component ablation: base, TSE without SEO, TSE, TSE + TSB.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use crate::config::RunConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::MetricsReport;
use crate::pipeline::{class_map, evaluate_model, train, LossMode, Model};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Arm {
    /// One learner, no erasing, no boosting.
    Base,
    /// Two ordered learners on raw frames.
    TseWoSeo,
    Tse,
    /// TSE and TSB.
    Tclnet,
    /// TSE and TSB trained with the added triplet loss.
    TclnetTri,
}

impl Arm {
    pub const TABLE: [Arm; 4] = [Arm::Base, Arm::TseWoSeo, Arm::Tse, Arm::Tclnet];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Base => "base",
            Arm::TseWoSeo => "tse-wo-seo",
            Arm::Tse => "tse",
            Arm::Tclnet => "tclnet",
            Arm::TclnetTri => "tclnet-tri",
        }
    }

    /// `cfg` with only the arm's mechanisms switched.
    pub fn apply(self, cfg: &RunConfig) -> RunConfig {
        let mut c = cfg.clone();
        let n = cfg.n_learners.max(2);
        match self {
            Arm::Base => {
                c.n_learners = 1;
                c.seo = false;
                c.tsb = false;
            }
            Arm::TseWoSeo => {
                c.n_learners = n;
                c.seo = false;
                c.tsb = false;
            }
            Arm::Tse => {
                c.n_learners = n;
                c.seo = true;
                c.tsb = false;
            }
            Arm::Tclnet | Arm::TclnetTri => {
                c.n_learners = n;
                c.seo = true;
                c.tsb = true;
            }
        }
        c.loss = if self == Arm::TclnetTri { LossMode::CeTriplet } else { LossMode::Ce };
        c
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        [Arm::Base, Arm::TseWoSeo, Arm::Tse, Arm::Tclnet, Arm::TclnetTri]
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::pre("ablate", format!("unknown arm {s:?}")))
    }
}

/// Trains a fresh model for `cfg` and scores it on the query split.
pub fn run_config(cfg: &RunConfig, data: &Dataset) -> Result<(Model, MetricsReport)> {
    cfg.validate()?;
    let classes = class_map(&data.train_clips()).len();
    let mut model = Model::new(cfg.model(), classes, cfg.seed)?;
    let tc = cfg.train();
    let report = train(&mut model, data, &tc, None, |_| Ok(()))?;
    let metrics = match report.final_metrics {
        Some(m) => m,
        None => evaluate_model(&mut model, data, cfg.test_frames)?,
    };
    Ok((model, metrics))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub arm: Arm,
    pub seed: u64,
    pub map: f64,
    pub top1: f64,
    pub seconds: f64,
}

impl AblationRow {
    pub const CSV_HEADER: &'static str = "arm,seed,mAP,top1,seconds";

    pub fn csv_row(&self) -> String {
        format!("{},{},{:.6},{:.6},{:.1}", self.arm, self.seed, self.map, self.top1, self.seconds)
    }
}

/// Every arm for every seed; `on_row` sees rows as they finish.
pub fn run_ablation(
    base: &RunConfig,
    data: &Dataset,
    seeds: &[u64],
    arms: &[Arm],
    mut on_row: impl FnMut(&AblationRow) -> Result<()>,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for &seed in seeds {
        for &arm in arms {
            let mut cfg = arm.apply(base);
            cfg.seed = seed;
            let start = Instant::now();
            let (_, m) = run_config(&cfg, data)?;
            let row = AblationRow {
                arm,
                seed,
                map: m.map,
                top1: m.top1(),
                seconds: start.elapsed().as_secs_f64(),
            };
            on_row(&row)?;
            rows.push(row);
        }
    }
    Ok(rows)
}

/// mAP of `arm` at `seed`.
pub fn map_of(rows: &[AblationRow], arm: Arm, seed: u64) -> Option<f64> {
    rows.iter().find(|r| r.arm == arm && r.seed == seed).map(|r| r.map)
}

pub fn mean_map(rows: &[AblationRow], arm: Arm) -> Option<f64> {
    let v: Vec<f64> = rows.iter().filter(|r| r.arm == arm).map(|r| r.map).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Seeds where `a` scores strictly higher mAP than `b`, out of the seeds
/// both were run on.
pub fn wins(rows: &[AblationRow], a: Arm, b: Arm) -> (usize, usize) {
    let mut seeds: Vec<u64> = rows.iter().map(|r| r.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    let mut won = 0;
    let mut total = 0;
    for s in seeds {
        if let (Some(x), Some(y)) = (map_of(rows, a, s), map_of(rows, b, s)) {
            total += 1;
            if x > y {
                won += 1;
            }
        }
    }
    (won, total)
}
