//! The `tclnet` command line: corpus generation, training, evaluation,
//! the component ablation and map dumps.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::ablation::{self, Arm};
use crate::autodiff::Tape;
use crate::config::{RunConfig, CONFIG_FILE};
use crate::data::{generate, write_file, Dataset, Split};
use crate::dump::dump_artifacts;
use crate::error::{Error, Result};
use crate::eval::MetricsReport;
use crate::nn::Forward;
use crate::pipeline::{
    class_map, evaluate_model, self_retrieval, test_frames, train, Checkpoint, EpochLog, FramePolicy, LossMode, Model,
};

/// Exit status for bad arguments, missing files and malformed inputs.
pub const EXIT_USAGE: i32 = 2;
/// Exit status when training produced a non-finite loss or gradient.
pub const EXIT_NUMERICAL: i32 = 3;

pub const CHECKPOINT_FILE: &str = "checkpoint.tclc";
pub const METRICS_FILE: &str = "metrics.csv";
pub const EVAL_FILE: &str = "eval.csv";

#[derive(Parser, Debug)]
#[command(name = "tclnet", version, about = "Saliency erasing and boosting for video re-identification")]
pub struct Cli {
    /// Log progress to stderr (RUST_LOG also works).
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write the synthetic corpus to --out.
    Generate(RunArgs),
    /// Train on a corpus and write the checkpoint, per-epoch metrics and the
    /// final evaluation to --out.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Corpus directory; generated from the config when omitted.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Score a checkpoint on a corpus.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Rank gallery clips against themselves, each clip its own class.
        #[arg(long)]
        self_retrieval: bool,
        /// Pad short clips by repeating the last frame instead of truncating.
        #[arg(long)]
        pad: bool,
    },
    /// Train base, TSE without SEO, TSE and TSE+TSB over several seeds.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Number of seeds, counted up from the configured seed.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        /// Comma-separated arms.
        #[arg(long, value_delimiter = ',', default_value = "base,tse-wo-seo,tse,tclnet")]
        arms: Vec<String>,
    },
    /// Dump correlation maps, masks, gates and TSB attention for one clip.
    DumpMaps {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Clip position in the corpus manifest.
        #[arg(long, default_value_t = 0)]
        clip: usize,
        #[arg(long, default_value = "out/maps")]
        out: PathBuf,
        #[arg(long)]
        pad: bool,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// The full training protocol.
    Full,
    /// Reduced network and schedule used for the multi-seed ablation.
    Desk,
}

/// Every config field that has a flag. Unset flags leave the config alone.
#[derive(Args, Debug, Clone, Default)]
pub struct RunArgs {
    /// TOML config; unknown keys are rejected.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Starting point when no --config is given.
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides both the config and TCL_SEED.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub identities: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub n_learners: Option<usize>,
    /// Disable erasing; every learner sees raw maps.
    #[arg(long)]
    pub no_seo: bool,
    #[arg(long)]
    pub no_tsb: bool,
    #[arg(long)]
    pub tsb_stage: Option<usize>,
    #[arg(long)]
    pub block_height: Option<usize>,
    /// 0 spans the full width.
    #[arg(long)]
    pub block_width: Option<usize>,
    #[arg(long)]
    pub stride_h: Option<usize>,
    #[arg(long)]
    pub stride_w: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub margin: Option<f64>,
    /// ce or ce+triplet.
    #[arg(long)]
    pub loss: Option<String>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Pad short test clips instead of truncating.
    #[arg(long)]
    pub pad: bool,
}

impl RunArgs {
    /// Config file or preset, then `TCL_SEED`, then flags.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut c = match (&self.config, self.preset) {
            (Some(p), _) => RunConfig::load(p)?,
            (None, Some(Preset::Desk)) => RunConfig::desk(),
            (None, _) => RunConfig::default(),
        };
        c.apply_env()?;
        if let Some(v) = &self.out {
            c.out_dir = v.to_string_lossy().into_owned();
        }
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { c.$f = v; } )* };
        }
        set!(seed, identities, epochs, lr, n_learners, tsb_stage, block_height, block_width, stride_h, stride_w, temperature, margin, eval_every);
        if self.no_seo {
            c.seo = false;
        }
        if self.no_tsb {
            c.tsb = false;
        }
        if let Some(l) = &self.loss {
            c.loss = l.parse::<LossMode>()?;
        }
        if self.pad {
            c.test_frames = FramePolicy::Pad;
        }
        c.validate()?;
        Ok(c)
    }
}

/// Exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numerical(_) => EXIT_NUMERICAL,
        _ => EXIT_USAGE,
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn corpus_for(cfg: &RunConfig, corpus: Option<&Path>) -> Result<Dataset> {
    match corpus {
        Some(p) => Dataset::load(p),
        None => generate(&cfg.synth_spec(), cfg.seed),
    }
}

/// Rebuilds the model stored in a checkpoint.
pub fn load_model(ckpt: &Checkpoint) -> Result<(RunConfig, Model)> {
    let cfg = RunConfig::from_toml(&ckpt.config)?;
    let classes = ckpt
        .records
        .iter()
        .find(|(n, _)| n == "head1.bias")
        .map(|(_, t)| t.numel())
        .ok_or_else(|| Error::format("checkpoint", "no head1.bias record"))?;
    let mut model = Model::new(cfg.model(), classes, ckpt.seed)?;
    ckpt.restore(&mut model.params)?;
    Ok((cfg, model))
}

fn write_report(dir: &Path, m: &MetricsReport) -> Result<()> {
    write_file(&dir.join(EVAL_FILE), m.to_csv().as_bytes())
}

fn cmd_generate(run: &RunArgs) -> Result<()> {
    let cfg = run.resolve()?;
    let dir = PathBuf::from(&cfg.out_dir);
    let data = generate(&cfg.synth_spec(), cfg.seed)?;
    data.save(&dir)?;
    cfg.save(&dir.join(CONFIG_FILE))?;
    println!(
        "{} clips of {} identities written to {} (digest {})",
        data.clips.len(),
        data.identities(),
        dir.display(),
        data.digest()
    );
    Ok(())
}

fn cmd_train(run: &RunArgs, corpus: Option<&Path>) -> Result<()> {
    let cfg = run.resolve()?;
    let dir = PathBuf::from(&cfg.out_dir);
    create_dir(&dir)?;
    cfg.save(&dir.join(CONFIG_FILE))?;
    let data = corpus_for(&cfg, corpus)?;
    let classes = class_map(&data.train_clips()).len();
    let mut model = Model::new(cfg.model(), classes, cfg.seed)?;
    let metrics_path = dir.join(METRICS_FILE);
    let mut metrics = fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    writeln!(metrics, "{}", EpochLog::CSV_HEADER).map_err(|e| Error::io(&metrics_path, e))?;
    let report = train(&mut model, &data, &cfg.train(), Some(&dir.join("diverged")), |row| {
        writeln!(metrics, "{}", row.csv_row()).map_err(|e| Error::io(&metrics_path, e))?;
        eprintln!("epoch {:>3}  ce {:.4}  tri {:.4}", row.epoch, row.ce_loss, row.triplet_loss);
        Ok(())
    })?;
    let ckpt = Checkpoint::from_params(&model.params, &cfg.to_toml(), cfg.epochs as u64, cfg.seed);
    ckpt.save(&dir.join(CHECKPOINT_FILE))?;
    let final_metrics = match report.final_metrics {
        Some(m) => m,
        None => evaluate_model(&mut model, &data, cfg.test_frames)?,
    };
    write_report(&dir, &final_metrics)?;
    println!("{}", final_metrics.summary());
    Ok(())
}

fn cmd_eval(checkpoint: &Path, corpus: &Path, out: &Path, self_ret: bool, pad: bool) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let (mut cfg, mut model) = load_model(&ckpt)?;
    if pad {
        cfg.test_frames = FramePolicy::Pad;
    }
    let data = Dataset::load(corpus)?;
    let m = if self_ret {
        self_retrieval(&mut model, &data, cfg.test_frames)?
    } else {
        evaluate_model(&mut model, &data, cfg.test_frames)?
    };
    create_dir(out)?;
    write_report(out, &m)?;
    println!("{}", m.summary());
    Ok(())
}

fn cmd_ablate(run: &RunArgs, corpus: Option<&Path>, seeds: u64, arms: &[String]) -> Result<()> {
    let cfg = run.resolve()?;
    let arms = arms.iter().map(|a| a.parse::<Arm>()).collect::<Result<Vec<_>>>()?;
    let dir = PathBuf::from(&cfg.out_dir);
    create_dir(&dir)?;
    cfg.save(&dir.join(CONFIG_FILE))?;
    let data = corpus_for(&cfg, corpus)?;
    let seeds: Vec<u64> = (0..seeds).map(|s| cfg.seed + s).collect();
    let path = dir.join("ablation.csv");
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    writeln!(f, "{}", ablation::AblationRow::CSV_HEADER).map_err(|e| Error::io(&path, e))?;
    let rows = ablation::run_ablation(&cfg, &data, &seeds, &arms, |r| {
        writeln!(f, "{}", r.csv_row()).map_err(|e| Error::io(&path, e))?;
        eprintln!("{:<11} seed {:<3} mAP {:.4}  top1 {:.4}  ({:.0}s)", r.arm, r.seed, r.map, r.top1, r.seconds);
        Ok(())
    })?;
    for &a in &arms {
        if let Some(m) = ablation::mean_map(&rows, a) {
            println!("{a:<11} mean mAP {:.4}", m);
        }
    }
    Ok(())
}

fn cmd_dump(checkpoint: &Path, corpus: &Path, clip: usize, out: &Path, pad: bool) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let (cfg, mut model) = load_model(&ckpt)?;
    let data = Dataset::load(corpus)?;
    let c = data
        .clips
        .get(clip)
        .ok_or_else(|| Error::pre("dump-maps", format!("clip {clip} outside the {} clips", data.clips.len())))?;
    let policy = if pad { FramePolicy::Pad } else { cfg.test_frames };
    let idx = test_frames(c.len(), model.n_learners(), policy)?;
    let tape = Tape::new();
    let mut f = Forward::eval(&tape, &mut model.params);
    let o = model.net.forward(&mut f, tape.constant(&c.select(&idx)), idx.len())?;
    let index = dump_artifacts(out, &o.artifacts, &o.attention)?;
    let split = match c.split {
        Split::Gallery => "gallery",
        Split::Query => "query",
        Split::Spare => "spare",
    };
    println!(
        "identity {} clip {} ({split}): {} files in {}",
        c.identity,
        c.clip_id,
        index.len(),
        out.display()
    );
    Ok(())
}

/// Runs a parsed command line.
pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Generate(run) => cmd_generate(run),
        Command::Train { run, corpus } => cmd_train(run, corpus.as_deref()),
        Command::Eval {
            checkpoint,
            corpus,
            out,
            self_retrieval,
            pad,
        } => cmd_eval(checkpoint, corpus, out, *self_retrieval, *pad),
        Command::Ablate {
            run,
            corpus,
            seeds,
            arms,
        } => cmd_ablate(run, corpus.as_deref(), *seeds, arms),
        Command::DumpMaps {
            checkpoint,
            corpus,
            clip,
            out,
            pad,
        } => cmd_dump(checkpoint, corpus, *clip, out, *pad),
    }
}
