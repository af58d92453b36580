//! Command layer of the `itr` binary.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::checkpoint;
use crate::config::{Precision, RunConfig};
use crate::error::{ConfigError, Error, Result};
use crate::evaluator::{self, EmbeddingDump, Protocol, RetrievalMetrics};
use crate::feature_store::synthetic::SyntheticCorpus;
use crate::feature_store::Dataset;
use crate::model::Model;
use crate::real::Real;
use crate::trainer;

#[derive(Debug, Parser)]
#[command(name = "itr", version, about = "Image-text retrieval training and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model; trailing `--section.key value` pairs override the config.
    Train(TrainArgs),
    /// Score a checkpoint on a split.
    Evaluate(EvalArgs),
    /// Write query-encoder embeddings of a split.
    Extract(ExtractArgs),
    /// Time encoding and matching.
    Bench(BenchArgs),
    /// One training + test evaluation per value of a hyperparameter.
    Sweep(SweepArgs),
    /// Write a synthetic corpus.
    MakeSynthetic(SyntheticArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Continue from `last.ckpt` in the run directory.
    #[arg(long)]
    pub resume: bool,
    /// Resume even if the config hash differs.
    #[arg(long)]
    pub force: bool,
    #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset root; defaults to the one recorded in the checkpoint.
    #[arg(long)]
    pub data_root: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, value_enum)]
    pub protocol: Option<ProtocolArg>,
    /// Report file; defaults to `eval_<split>_<protocol>.txt` beside the checkpoint.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data_root: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Checkpoint (encoding is timed) or embedding dump (matching only).
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub data_root: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Method label in the plot-data file.
    #[arg(long, default_value = "itr")]
    pub label: String,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ProtocolArg {
    Cocofold1k,
    Full5k,
    Flickr1k,
}

impl From<ProtocolArg> for Protocol {
    fn from(p: ProtocolArg) -> Self {
        match p {
            ProtocolArg::Cocofold1k => Protocol::Cocofold1k,
            ProtocolArg::Full5k => Protocol::Full5k,
            ProtocolArg::Flickr1k => Protocol::Flickr1k,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum, PartialEq, Eq)]
pub enum SweepAxis {
    Gamma,
    Epsilon,
    Lambda,
    QueueSize,
    BatchSize,
}

impl SweepAxis {
    pub fn key(self) -> &'static str {
        match self {
            SweepAxis::Gamma => "loss.gamma",
            SweepAxis::Epsilon => "loss.epsilon",
            SweepAxis::Lambda => "loss.lambda",
            SweepAxis::QueueSize => "moco.queue_size",
            SweepAxis::BatchSize => "train.batch_size",
        }
    }
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub axis: SweepAxis,
    /// Comma-separated values.
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<String>,
    #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct SyntheticArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub images: usize,
    #[arg(long, default_value_t = 36)]
    pub regions: usize,
    #[arg(long, default_value_t = 2048)]
    pub d_i: usize,
    #[arg(long, default_value_t = 768)]
    pub d_t: usize,
    /// CLIP feature width; 0 writes no CLIP features.
    #[arg(long, default_value_t = 512)]
    pub d_ic: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long)]
    pub max_length: Option<usize>,
    #[arg(long)]
    pub held_out: Option<usize>,
}

/// Turns `--a.b v` / `--a.b=v` tokens into `(key, value)` pairs.
pub fn parse_overrides(tokens: &[String]) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out = Vec::new();
    let mut it = tokens.iter();
    while let Some(tok) = it.next() {
        let key = tok
            .strip_prefix("--")
            .ok_or_else(|| ConfigError::new(tok.as_str(), "expected `--section.key value`"))?;
        if let Some((k, v)) = key.split_once('=') {
            out.push((k.to_string(), v.to_string()));
        } else {
            let v = it
                .next()
                .ok_or_else(|| ConfigError::new(key, "missing value"))?;
            out.push((key.to_string(), v.clone()));
        }
    }
    Ok(out)
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|source| Error::Io {
            path: parent.to_path_buf(),
            source,
        })?;
    }
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn run_train<F: Real>(cfg: &RunConfig, resume: bool, force: bool) -> Result<trainer::TrainOutcome> {
    let dir = cfg.run_dir();
    let out = trainer::train::<F>(cfg, &dir, resume, force)?;
    Ok(out)
}

fn train_any(cfg: &RunConfig, resume: bool, force: bool) -> Result<trainer::TrainOutcome> {
    match cfg.run.precision {
        Precision::F32 => run_train::<f32>(cfg, resume, force),
        Precision::F64 => run_train::<f64>(cfg, resume, force),
    }
}

/// Rebuilds the model of a checkpoint with its query parameters.
fn load_model<F: Real>(ckpt: &Path) -> Result<(RunConfig, Model, crate::params::ParamStore<F>)> {
    let info = checkpoint::info(ckpt)?;
    let (model, mut store) = Model::from_config::<F>(&info.config);
    checkpoint::load_query(ckpt, &mut store)?;
    Ok((info.config, model, store))
}

fn load_split<F: Real>(cfg: &RunConfig, root: Option<&Path>, split: &str) -> Result<Dataset<F>> {
    let root = root.unwrap_or_else(|| cfg.data_root());
    Ok(Dataset::load(root, split, &trainer::expected_dims(cfg))?)
}

fn evaluate<F: Real>(args: &EvalArgs) -> Result<RetrievalMetrics> {
    let (cfg, model, store) = load_model::<F>(&args.checkpoint)?;
    let ds = load_split::<F>(&cfg, args.data_root.as_deref(), &args.split)?;
    let protocol = args.protocol.map(Protocol::from).unwrap_or(cfg.eval.protocol);
    let r = evaluator::evaluate_model(&model, &store, &ds, protocol, cfg.train.eval_batch_size)?;
    let mut report = format!("protocol {}\nsplit {}\n", protocol.as_str(), args.split);
    report.push_str(&r.metrics.to_report());
    for (i, f) in r.per_fold.iter().enumerate().filter(|_| r.per_fold.len() > 1) {
        report.push_str(&format!("fold{i}_rsum {:.2}\n", f.rsum));
    }
    print!("{report}");
    let out = args.out.clone().unwrap_or_else(|| {
        args.checkpoint
            .with_file_name(format!("eval_{}_{}.txt", args.split, protocol.as_str()))
    });
    write(&out, &report)?;
    Ok(r.metrics)
}

fn extract<F: Real>(args: &ExtractArgs) -> Result<()> {
    let (cfg, model, store) = load_model::<F>(&args.checkpoint)?;
    let ds = load_split::<F>(&cfg, args.data_root.as_deref(), &args.split)?;
    let (img, cap) = evaluator::extract(&model, &store, &ds, cfg.train.eval_batch_size)?;
    EmbeddingDump::from_dataset(&ds, img, cap).save(&args.out)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn bench<F: Real>(args: &BenchArgs) -> Result<()> {
    let is_dump = crate::feature_store::format::Container::open(&args.input)?
        .names()
        .iter()
        .any(|n| n == "images");
    let (report, rsum) = if is_dump {
        let dump = EmbeddingDump::<F>::load(&args.input)?;
        let t = evaluator::benchmark_with(dump.images.view(), dump.captions.view(), args.repeats, || Ok(()))?;
        let m = evaluator::evaluate_protocol(
            dump.images.view(),
            dump.captions.view(),
            &dump.ground_truth(),
            Protocol::Full5k,
            1,
        )?;
        (t, m.metrics.rsum)
    } else {
        let (cfg, model, store) = load_model::<F>(&args.input)?;
        let ds = load_split::<F>(&cfg, args.data_root.as_deref(), &args.split)?;
        let bs = cfg.train.eval_batch_size;
        let t = evaluator::benchmark_inference(&model, &store, &ds, args.repeats, bs)?;
        let m = evaluator::evaluate_model(&model, &store, &ds, Protocol::Full5k, bs)?;
        (t, m.metrics.rsum)
    };
    let text = report.to_report();
    print!("{text}");
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| args.input.with_file_name("bench.txt"));
    write(&out, &text)?;
    write(
        &out.with_extension("csv"),
        &evaluator::plot_data(&[(args.label.clone(), report, rsum)]),
    )?;
    Ok(())
}

fn sweep(args: &SweepArgs) -> Result<()> {
    let base = parse_overrides(&args.overrides)?;
    let mut table = String::from(
        "value\ti2t_r1\ti2t_r5\ti2t_r10\tt2i_r1\tt2i_r5\tt2i_r10\trsum\n",
    );
    for value in &args.values {
        let mut ov = base.clone();
        let base_name = RunConfig::load(args.config.as_deref(), &ov)?.run.name;
        ov.push((args.axis.key().to_string(), value.clone()));
        ov.push(("run.name".into(), format!("{base_name}-{}-{value}", args.axis.key())));
        let cfg = RunConfig::load(args.config.as_deref(), &ov)?;
        let out = train_any(&cfg, false, false)?;
        let eval = EvalArgs {
            checkpoint: out.best_checkpoint(),
            data_root: None,
            split: cfg.data.test_split.clone(),
            protocol: None,
            out: None,
        };
        let m = match cfg.run.precision {
            Precision::F32 => evaluate::<f32>(&eval)?,
            Precision::F64 => evaluate::<f64>(&eval)?,
        };
        table.push_str(&format!(
            "{value}\t{:.1}\t{:.1}\t{:.1}\t{:.1}\t{:.1}\t{:.1}\t{:.1}\n",
            m.i2t[0], m.i2t[1], m.i2t[2], m.t2i[0], m.t2i[1], m.t2i[2], m.rsum
        ));
    }
    print!("{table}");
    let cfg = RunConfig::load(args.config.as_deref(), &base)?;
    let dir = cfg.run_dir();
    write(
        &dir.with_file_name(format!("{}-sweep-{}.tsv", cfg.run.name, args.axis.key())),
        &table,
    )?;
    Ok(())
}

fn make_synthetic(args: &SyntheticArgs) -> Result<()> {
    let mut c = SyntheticCorpus::new(
        args.images,
        args.regions,
        args.d_i,
        args.d_t,
        (args.d_ic > 0).then_some(args.d_ic),
        args.seed,
    );
    if let Some(l) = args.max_length {
        c.max_length = l;
        c.min_length = c.min_length.min(l);
    }
    if let Some(h) = args.held_out {
        c.held_out = h;
    }
    c.write(&args.out)?;
    println!("wrote synthetic corpus to {}", args.out.display());
    Ok(())
}

/// Dispatches on the precision recorded in a checkpoint or dump.
fn precision_of(path: &Path) -> Result<Precision> {
    if let Ok(info) = checkpoint::info(path) {
        return Ok(if info.precision == "f64" { Precision::F64 } else { Precision::F32 });
    }
    Ok(Precision::F32)
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => {
            let ov = parse_overrides(&a.overrides)?;
            let cfg = RunConfig::load(a.config.as_deref(), &ov)?;
            print!("{}", cfg.to_toml());
            let out = train_any(&cfg, a.resume, a.force)?;
            if let Some(best) = out.best {
                println!("best rsum {:.2} at epoch {:?}", best.rsum, best.epoch);
            }
            println!("checkpoint {}", out.best_checkpoint().display());
            Ok(())
        }
        Command::Evaluate(a) => match precision_of(&a.checkpoint)? {
            Precision::F32 => evaluate::<f32>(&a).map(|_| ()),
            Precision::F64 => evaluate::<f64>(&a).map(|_| ()),
        },
        Command::Extract(a) => match precision_of(&a.checkpoint)? {
            Precision::F32 => extract::<f32>(&a),
            Precision::F64 => extract::<f64>(&a),
        },
        Command::Bench(a) => match precision_of(&a.input)? {
            Precision::F32 => bench::<f32>(&a),
            Precision::F64 => bench::<f64>(&a),
        },
        Command::Sweep(a) => sweep(&a),
        Command::MakeSynthetic(a) => make_synthetic(&a),
    }
}

/// Parses `args` and runs; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
